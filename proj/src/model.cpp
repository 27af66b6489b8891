#include "mose/model.hpp"

#include "mose/parallel.hpp"

namespace mose
{
	std::vector<Index> upsample_stages(Index scale)
	{
		switch (scale)
		{
		case 2:
			return {2};
		case 3:
			return {3};
		case 4:
			return {2, 2};
		default:
			throw InvalidArgument("upsample: unsupported scale " + std::to_string(scale) + " (expected 2, 3 or 4)");
		}
	}

	std::vector<Index> window_order(Index height, Index width, Index m, Index shift)
	{
		if (height % m || width % m)
			throw InvalidArgument("window_order: grid " + std::to_string(height) + "x" + std::to_string(width) +
								  " is not a multiple of the window " + std::to_string(m));
		std::vector<Index> order;
		order.reserve(static_cast<std::size_t>(height * width));
		for (Index wy = 0; wy < height / m; ++wy)
			for (Index wx = 0; wx < width / m; ++wx)
				for (Index i = 0; i < m; ++i)
					for (Index j = 0; j < m; ++j)
					{
						const Index y = (wy * m + i + shift) % height, x = (wx * m + j + shift) % width;
						order.push_back(y * width + x);
					}
		return order;
	}

	template <typename S>
	MatrixR<S> gather_rows(const MatrixR<S> &x, const std::vector<Index> &order)
	{
		MatrixR<S> out(static_cast<Index>(order.size()), x.cols());
		for (Index r = 0; r < out.rows(); ++r)
			out.row(r) = x.row(order[static_cast<std::size_t>(r)]);
		return out;
	}

	template <typename S>
	MatrixR<S> scatter_rows(const MatrixR<S> &x, const std::vector<Index> &order)
	{
		MatrixR<S> out(x.rows(), x.cols());
		for (Index r = 0; r < x.rows(); ++r)
			out.row(order[static_cast<std::size_t>(r)]) = x.row(r);
		return out;
	}

	namespace
	{
		template <typename S>
		typename SrModel<S>::Conv add_conv(ParameterSet<S> &params, const std::string &prefix, Index cin, Index cout, Rng &rng)
		{
			typename SrModel<S>::Conv c;
			c.weight = params.add(prefix + ".weight", trunc_normal_init<S>({cout, cin, 3, 3}, 0.02, rng));
			c.bias = params.add(prefix + ".bias", Tensor<S>({cout}));
			return c;
		}

		template <typename S>
		std::pair<std::size_t, std::size_t> add_norm(ParameterSet<S> &params, const std::string &prefix, Index c)
		{
			return {params.add(prefix + ".weight", Tensor<S>::filled({c}, S(1))), params.add(prefix + ".bias", Tensor<S>({c}))};
		}

		template <typename S>
		MatrixR<S> conv(const ParameterSet<S> &params, const typename SrModel<S>::Conv &c, const MatrixR<S> &x, Index h, Index w)
		{
			return conv3x3_forward(x, h, w, params.value(c.weight), params.value(c.bias));
		}

		template <typename S>
		MatrixR<S> conv_back(ParameterSet<S> &params, const typename SrModel<S>::Conv &c, const MatrixR<S> &x, Index h, Index w,
							 const MatrixR<S> &dy)
		{
			return conv3x3_backward(x, h, w, params.value(c.weight), dy, params.grad(c.weight), params.grad(c.bias));
		}

		template <typename S>
		void check_activation(const MatrixR<S> &x, const std::string &where)
		{
			if (!x.allFinite())
				throw NumericError("non-finite activation after " + where);
		}

	} // namespace

	template <typename S>
	SrModel<S>::SrModel(const ModelConfig &cfg, ParameterSet<S> &params, Rng &rng) : cfg_(cfg)
	{
		cfg_.finalize();
		stages_ = upsample_stages(cfg_.scale);
		const Index t = cfg_.embed_dim;
		// Each sublayer draws from its own stream so adding a layer never reshuffles the others.
		Rng shallow_rng = rng.split("shallow");
		shallow_ = add_conv(params, "shallow", cfg_.in_channels, t, shallow_rng);
		for (Index g = 0; g < cfg_.groups; ++g)
		{
			for (Index b = 0; b < cfg_.blocks_per_group; ++b)
			{
				Block blk;
				blk.prefix = "blocks." + std::to_string(g) + "." + std::to_string(b);
				Rng brng = rng.split(blk.prefix);
				blk.attention_cfg = cfg_.block_attention(b);
				std::tie(blk.norm1_w, blk.norm1_b) = add_norm(params, blk.prefix + ".norm1", t);
				Rng arng = brng.split("attn");
				blk.attention = WindowAttention<S>(blk.attention_cfg, blk.prefix + ".attn", params, arng);
				std::tie(blk.norm2_w, blk.norm2_b) = add_norm(params, blk.prefix + ".norm2", t);
				Rng frng = brng.split("ffn");
				if (cfg_.ffn == FfnKind::moe)
					blk.moe = MoeLayer<S>(cfg_.moe, blk.prefix + ".moe", params, frng);
				else
					blk.mlp = FeedForward<S>(t, cfg_.mlp_ratio * t, blk.prefix + ".mlp", params, frng);
				blocks_.push_back(std::move(blk));
			}
			const std::string name = "groups." + std::to_string(g) + ".conv";
			Rng grng = rng.split(name);
			group_convs_.push_back(add_conv(params, name, t, t, grng));
		}
		std::tie(norm_w_, norm_b_) = add_norm(params, "norm", t);
		Rng body_rng = rng.split("body_conv");
		body_conv_ = add_conv(params, "body_conv", t, t, body_rng);
		for (std::size_t i = 0; i < stages_.size(); ++i)
		{
			const std::string name = "upsample." + std::to_string(i);
			Rng urng = rng.split(name);
			upsample_convs_.push_back(add_conv(params, name, t, t * stages_[i] * stages_[i], urng));
		}
		Rng head_rng = rng.split("head");
		head_ = add_conv(params, "head", t, cfg_.in_channels, head_rng);
	}

	template <typename S>
	MatrixR<S> SrModel<S>::block_forward(const ParameterSet<S> &params, const Block &blk, const MatrixR<S> &x, Index h, Index w,
										  const Tensor<S> *mask, BlockTrace *trace, ExampleOutput &out) const
	{
		const Index m = cfg_.window(), shift = blk.attention_cfg.shift;
		const auto order = window_order(h, w, m, shift);
		const MatrixR<S> a = blk.attention.forward(params, gather_rows(x, order), shift ? mask : nullptr, trace ? &trace->attention : nullptr);
		LayerNormCache<S> n1c, n2c;
		const MatrixR<S> x1 =
			x + layer_norm_forward(scatter_rows(a, order), params.value(blk.norm1_w), params.value(blk.norm1_b), trace ? trace->norm1 : n1c);
		MatrixR<S> f;
		if (cfg_.ffn == FfnKind::moe)
		{
			auto res = blk.moe.forward(params, x1, 1, h, w, trace ? &trace->moe : nullptr);
			f = std::move(res.y);
			out.decisions.push_back(std::move(res.decision));
			out.importance.push_back(std::move(res.importance));
		}
		else
			f = blk.mlp.forward(params, x1, trace ? &trace->mlp : nullptr);
		MatrixR<S> x2 = x1 + layer_norm_forward(f, params.value(blk.norm2_w), params.value(blk.norm2_b), trace ? trace->norm2 : n2c);
		check_activation(x2, blk.prefix);
		return x2;
	}

	template <typename S>
	MatrixR<S> SrModel<S>::upsample_tokens(const ParameterSet<S> &params, MatrixR<S> x, Index &h, Index &w, Trace *trace) const
	{
		for (std::size_t i = 0; i < stages_.size(); ++i)
		{
			MatrixR<S> y = conv(params, upsample_convs_[i], x, h, w);
			if (trace)
				trace->upsample_in.push_back(std::move(x));
			x = depth_to_space(y, h, w, stages_[i]);
			h *= stages_[i];
			w *= stages_[i];
		}
		return x;
	}

	template <typename S>
	typename SrModel<S>::ExampleOutput SrModel<S>::forward_example(const ParameterSet<S> &params, const S *planes, Index h, Index w,
																	 Trace *trace, bool features_only) const
	{
		if (h < 1 || w < 1)
			throw InvalidArgument("forward: empty input " + std::to_string(h) + "x" + std::to_string(w));
		const Index m = cfg_.window();
		const Index hp = padded_size(h, m), wp = padded_size(w, m);
		ExampleOutput out;
		MatrixR<S> x = pad_reflect(planes_to_tokens(planes, cfg_.in_channels, h, w), h, w, hp, wp);
		check_activation(x, "input");

		Tensor<S> mask_local;
		Tensor<S> &mask = trace ? trace->mask : mask_local;
		if (cfg_.blocks_per_group > 1)
			mask = shifted_window_mask<S>(hp, wp, m, m / 2);
		if (trace)
		{
			trace->height = h;
			trace->width = w;
			trace->padded_height = hp;
			trace->padded_width = wp;
			trace->blocks.assign(blocks_.size(), BlockTrace{});
			trace->group_conv_in.clear();
			trace->upsample_in.clear();
		}

		const MatrixR<S> shallow = conv(params, shallow_, x, hp, wp);
		if (trace)
			trace->input = std::move(x);
		x = shallow;
		for (Index g = 0; g < cfg_.groups; ++g)
		{
			const MatrixR<S> group_in = x;
			for (Index b = 0; b < cfg_.blocks_per_group; ++b)
			{
				const auto i = static_cast<std::size_t>(g * cfg_.blocks_per_group + b);
				x = block_forward(params, blocks_[i], x, hp, wp, &mask, trace ? &trace->blocks[i] : nullptr, out);
			}
			MatrixR<S> y = conv(params, group_convs_[static_cast<std::size_t>(g)], x, hp, wp) + group_in;
			if (trace)
				trace->group_conv_in.push_back(std::move(x));
			x = std::move(y);
		}
		LayerNormCache<S> norm_local;
		MatrixR<S> n = layer_norm_forward(x, params.value(norm_w_), params.value(norm_b_), trace ? trace->norm : norm_local);
		out.features = conv(params, body_conv_, n, hp, wp) + shallow;
		check_activation(out.features, "body_conv");
		if (trace)
			trace->body_conv_in = std::move(n);
		if (features_only)
			return out;

		Index uh = hp, uw = wp;
		MatrixR<S> u = upsample_tokens(params, out.features, uh, uw, trace);
		MatrixR<S> o = conv(params, head_, u, uh, uw);
		check_activation(o, "head");
		if (trace)
			trace->head_in = std::move(u);
		out.sr = crop(o, uh, uw, h * cfg_.scale, w * cfg_.scale);
		return out;
	}

	template <typename S>
	void SrModel<S>::backward_example(ParameterSet<S> &params, const Trace &tr, const MatrixR<S> &dsr,
									   const std::vector<Tensor<S>> &dimportance) const
	{
		const Index r = cfg_.scale, hp = tr.padded_height, wp = tr.padded_width;
		if (dsr.rows() != tr.height * r * tr.width * r || dsr.cols() != cfg_.in_channels)
			throw InvalidArgument("backward: gradient does not match the traced output");
		if (static_cast<Index>(dimportance.size()) != moe_layers() && !dimportance.empty())
			throw InvalidArgument("backward: expected one importance gradient per MoE layer");

		const Index uh = hp * r, uw = wp * r;
		MatrixR<S> du = conv_back(params, head_, tr.head_in, uh, uw, crop_backward(dsr, uh, uw, tr.height * r, tr.width * r));
		Index h = uh, w = uw;
		for (std::size_t i = stages_.size(); i-- > 0;)
		{
			h /= stages_[i];
			w /= stages_[i];
			du = conv_back(params, upsample_convs_[i], tr.upsample_in[i], h, w, space_to_depth(du, h, w, stages_[i]));
		}
		// du is now d(features); features = body_conv(norm(x)) + shallow.
		const MatrixR<S> dshallow_global = du;
		MatrixR<S> dx = layer_norm_backward(tr.norm, params.value(norm_w_), conv_back(params, body_conv_, tr.body_conv_in, hp, wp, du),
											params.grad(norm_w_), params.grad(norm_b_));
		for (Index g = cfg_.groups; g-- > 0;)
		{
			const auto gi = static_cast<std::size_t>(g);
			const MatrixR<S> dgroup_in = dx;
			dx = conv_back(params, group_convs_[gi], tr.group_conv_in[gi], hp, wp, dx);
			for (Index b = cfg_.blocks_per_group; b-- > 0;)
			{
				const auto i = static_cast<std::size_t>(g * cfg_.blocks_per_group + b);
				const Block &blk = blocks_[i];
				const BlockTrace &bt = tr.blocks[i];
				const MatrixR<S> df =
					layer_norm_backward(bt.norm2, params.value(blk.norm2_w), dx, params.grad(blk.norm2_w), params.grad(blk.norm2_b));
				MatrixR<S> dx1 = dx;
				if (cfg_.ffn == FfnKind::moe)
					dx1 += blk.moe.backward(params, bt.moe, df, dimportance.empty() ? nullptr : &dimportance[i]);
				else
					dx1 += blk.mlp.backward(params, bt.mlp, df);
				const MatrixR<S> dmerged =
					layer_norm_backward(bt.norm1, params.value(blk.norm1_w), dx1, params.grad(blk.norm1_w), params.grad(blk.norm1_b));
				const auto order = window_order(hp, wp, cfg_.window(), blk.attention_cfg.shift);
				const MatrixR<S> dwin = blk.attention.backward(params, bt.attention, blk.attention_cfg.shift ? &tr.mask : nullptr,
															   gather_rows(dmerged, order));
				dx = dx1 + scatter_rows(dwin, order);
			}
			dx += dgroup_in;
		}
		dx += dshallow_global;
		conv_back(params, shallow_, tr.input, hp, wp, dx);
	}

	template <typename S>
	S SrModel<S>::moe_loss_of(const std::vector<Tensor<S>> &importance)
	{
		if (importance.empty())
			return S(0);
		S sum = S(0);
		for (const auto &imp : importance)
			sum += importance_loss(imp);
		return sum / static_cast<S>(importance.size());
	}

	namespace
	{
		template <typename S>
		void merge_routing(std::vector<typename SrModel<S>::ExampleOutput> &per, std::vector<GateDecision<S>> &decisions,
						   std::vector<Tensor<S>> &importance)
		{
			if (per.empty())
				return;
			const std::size_t layers = per[0].decisions.size();
			decisions.assign(layers, GateDecision<S>{});
			importance.assign(layers, Tensor<S>{});
			for (std::size_t l = 0; l < layers; ++l)
			{
				decisions[l].k = per[0].decisions[l].k;
				importance[l] = Tensor<S>(per[0].importance[l].shape());
				for (auto &ex : per)
				{
					auto &d = ex.decisions[l];
					decisions[l].indices.insert(decisions[l].indices.end(), d.indices.begin(), d.indices.end());
					decisions[l].weights.insert(decisions[l].weights.end(), d.weights.begin(), d.weights.end());
					importance[l].flat() += ex.importance[l].flat();
				}
			}
		}

		template <typename S>
		void check_input(const Tensor<S> &lr, Index channels)
		{
			if (lr.rank() != 4 || lr.dim(1) != channels)
				throw InvalidArgument("forward: expected input B x " + std::to_string(channels) + " x H x W, got " + shape_string(lr.shape()));
		}
	} // namespace

	template <typename S>
	typename SrModel<S>::Output SrModel<S>::forward(const ParameterSet<S> &params, const Tensor<S> &lr, int threads) const
	{
		check_input(lr, cfg_.in_channels);
		const Index batch = lr.dim(0), h = lr.dim(2), w = lr.dim(3), r = cfg_.scale;
		std::vector<ExampleOutput> per(static_cast<std::size_t>(batch));
		parallel_for(batch, threads, [&](Index b) {
			per[static_cast<std::size_t>(b)] = forward_example(params, lr.data() + b * lr.dim(1) * h * w, h, w, nullptr);
		});
		Output out;
		out.sr = Tensor<S>({batch, cfg_.in_channels, h * r, w * r});
		for (Index b = 0; b < batch; ++b)
			tokens_to_planes(per[static_cast<std::size_t>(b)].sr, out.sr.data() + b * cfg_.in_channels * h * r * w * r);
		merge_routing<S>(per, out.decisions, out.importance);
		out.moe_loss = moe_loss_of(out.importance);
		return out;
	}

	template <typename S>
	Tensor<S> SrModel<S>::extract_features(const ParameterSet<S> &params, const Tensor<S> &lr, int threads) const
	{
		check_input(lr, cfg_.in_channels);
		const Index batch = lr.dim(0), h = lr.dim(2), w = lr.dim(3);
		const Index hp = padded_size(h, cfg_.window()), wp = padded_size(w, cfg_.window()), t = cfg_.embed_dim;
		Tensor<S> out({batch, t, hp, wp});
		parallel_for(batch, threads, [&](Index b) {
			const auto ex = forward_example(params, lr.data() + b * lr.dim(1) * h * w, h, w, nullptr, true);
			tokens_to_planes(ex.features, out.data() + b * t * hp * wp);
		});
		return out;
	}

	template <typename S>
	Tensor<S> SrModel<S>::upsample(const ParameterSet<S> &params, const Tensor<S> &features) const
	{
		if (features.rank() != 4 || features.dim(1) != cfg_.embed_dim)
			throw InvalidArgument("upsample: expected B x T x H x W features, got " + shape_string(features.shape()));
		const Index batch = features.dim(0), t = cfg_.embed_dim, r = cfg_.scale;
		Tensor<S> out({batch, t, features.dim(2) * r, features.dim(3) * r});
		for (Index b = 0; b < batch; ++b)
		{
			Index h = features.dim(2), w = features.dim(3);
			const MatrixR<S> u = upsample_tokens(params, planes_to_tokens(features.data() + b * t * h * w, t, h, w), h, w, nullptr);
			tokens_to_planes(u, out.data() + b * t * h * w);
		}
		return out;
	}

	template <typename S>
	BatchLoss<S> batch_loss(const SrModel<S> &model, ParameterSet<S> &params, const Tensor<S> &lr, const Tensor<S> &hr,
							const LossWeights &weights, bool with_grad, int threads)
	{
		const ModelConfig &cfg = model.config();
		check_input(lr, cfg.in_channels);
		const Index batch = lr.dim(0), cin = cfg.in_channels, h = lr.dim(2), w = lr.dim(3), r = cfg.scale;
		require_shape(hr, {batch, cin, h * r, w * r}, "batch_loss: hr");
		weights.validate();

		using Model = SrModel<S>;
		std::vector<typename Model::ExampleOutput> per(static_cast<std::size_t>(batch));
		std::vector<typename Model::Trace> traces(with_grad ? static_cast<std::size_t>(batch) : 0);
		std::vector<LossBreakdown<S>> terms(static_cast<std::size_t>(batch));
		std::vector<Tensor<S>> dpred(static_cast<std::size_t>(batch));
		const Shape img{cin, h * r, w * r};
		parallel_for(batch, threads, [&](Index b) {
			const auto bi = static_cast<std::size_t>(b);
			per[bi] = model.forward_example(params, lr.data() + b * cin * h * w, h, w, with_grad ? &traces[bi] : nullptr);
			Tensor<S> pred(img);
			tokens_to_planes(per[bi].sr, pred.data());
			const Tensor<S> gt(img, std::vector<S>(hr.data() + b * pred.size(), hr.data() + (b + 1) * pred.size()));
			terms[bi] = total_loss(pred, gt, S(0), weights);
			if (with_grad)
				dpred[bi] = total_loss_backward(pred, gt, weights);
		});

		BatchLoss<S> out;
		const S inv_b = S(1) / static_cast<S>(batch);
		for (const auto &t : terms)
		{
			out.ncc += t.ncc * inv_b;
			out.ssim += t.ssim * inv_b;
			out.mse += t.mse * inv_b;
		}
		std::vector<GateDecision<S>> decisions;
		std::vector<Tensor<S>> importance;
		merge_routing<S>(per, decisions, importance);
		out.moe = Model::moe_loss_of(importance);
		out.total = static_cast<S>(weights.alpha) * out.ncc + static_cast<S>(weights.beta) * out.ssim +
					static_cast<S>(weights.gamma) * out.moe + static_cast<S>(weights.mse) * out.mse;
		if (!std::isfinite(static_cast<double>(out.total)))
			throw NumericError("non-finite loss (ncc " + std::to_string(out.ncc) + ", ssim " + std::to_string(out.ssim) + ", moe " +
							   std::to_string(out.moe) + ")");
		if (!with_grad)
			return out;

		std::vector<Tensor<S>> dimportance;
		if (weights.gamma > 0.0)
			for (const auto &imp : importance)
			{
				Tensor<S> g = importance_loss_grad(imp);
				g.flat() *= static_cast<S>(weights.gamma) / static_cast<S>(importance.size());
				dimportance.push_back(std::move(g));
			}

		// Per-example gradient buffers, reduced in example order afterwards.
		std::vector<ParameterSet<S>> local(static_cast<std::size_t>(batch));
		parallel_for(batch, threads, [&](Index b) {
			const auto bi = static_cast<std::size_t>(b);
			ParameterSet<S> &p = local[bi];
			p = params;
			p.zero_grad();
			MatrixR<S> dsr(h * r * w * r, cin);
			for (Index c = 0; c < cin; ++c)
				for (Index i = 0; i < h * r * w * r; ++i)
					dsr(i, c) = dpred[bi][c * h * r * w * r + i] * inv_b;
			model.backward_example(p, traces[bi], dsr, dimportance);
			traces[bi] = {};
		});
		for (auto &p : local)
			params.accumulate_grad(p);
		return out;
	}

	template class SrModel<float>;
	template class SrModel<double>;
	template MatrixR<float> gather_rows(const MatrixR<float> &, const std::vector<Index> &);
	template MatrixR<double> gather_rows(const MatrixR<double> &, const std::vector<Index> &);
	template MatrixR<float> scatter_rows(const MatrixR<float> &, const std::vector<Index> &);
	template MatrixR<double> scatter_rows(const MatrixR<double> &, const std::vector<Index> &);
	template BatchLoss<float> batch_loss(const SrModel<float> &, ParameterSet<float> &, const Tensor<float> &, const Tensor<float> &,
										 const LossWeights &, bool, int);
	template BatchLoss<double> batch_loss(const SrModel<double> &, ParameterSet<double> &, const Tensor<double> &,
										  const Tensor<double> &, const LossWeights &, bool, int);
} // namespace mose
