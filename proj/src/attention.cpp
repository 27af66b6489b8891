#include "mose/attention.hpp"

#include <cmath>

namespace mose
{
	void AttentionConfig::validate() const
	{
		if (channels < 1 || heads < 1 || channels % heads != 0)
			throw InvalidArgument("attention: channels (" + std::to_string(channels) + ") must be divisible by heads (" + std::to_string(heads) + ")");
		if (window < 2)
			throw InvalidArgument("attention: window size must be >= 2");
		if (shift != 0 && shift != window / 2)
			throw InvalidArgument("attention: shift must be 0 or window/2");
		if (pe_logcpb && cpb_hidden < 1)
			throw InvalidArgument("attention: log-CPB hidden width must be positive");
	}

	template <typename S>
	Tensor<S> window_partition(const Tensor<S> &x, Index m)
	{
		require_rank(x, 4, "window_partition");
		const Index b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
		if (m < 1 || h % m != 0 || w % m != 0)
			throw InvalidArgument("window_partition: " + std::to_string(h) + "x" + std::to_string(w) + " is not divisible by window " + std::to_string(m));
		const Index nh = h / m, nw = w / m;
		Tensor<S> out({b * nh * nw, m * m, c});
		for (Index n = 0; n < b; ++n)
			for (Index wy = 0; wy < nh; ++wy)
				for (Index wx = 0; wx < nw; ++wx)
				{
					const Index win = (n * nh + wy) * nw + wx;
					for (Index i = 0; i < m; ++i)
						std::copy_n(&x(n, wy * m + i, wx * m, 0), m * c, &out(win, i * m, 0));
				}
		return out;
	}

	template <typename S>
	Tensor<S> window_reverse(const Tensor<S> &windows, Index m, Index h, Index w)
	{
		require_rank(windows, 3, "window_reverse");
		if (m < 1 || h % m != 0 || w % m != 0 || windows.dim(1) != m * m)
			throw InvalidArgument("window_reverse: inconsistent window geometry");
		const Index nh = h / m, nw = w / m, c = windows.dim(2);
		if (windows.dim(0) % (nh * nw) != 0)
			throw InvalidArgument("window_reverse: window count does not tile the grid");
		const Index b = windows.dim(0) / (nh * nw);
		Tensor<S> x({b, h, w, c});
		for (Index n = 0; n < b; ++n)
			for (Index wy = 0; wy < nh; ++wy)
				for (Index wx = 0; wx < nw; ++wx)
				{
					const Index win = (n * nh + wy) * nw + wx;
					for (Index i = 0; i < m; ++i)
						std::copy_n(&windows(win, i * m, 0), m * c, &x(n, wy * m + i, wx * m, 0));
				}
		return x;
	}

	namespace
	{
		template <typename S>
		Tensor<S> roll(const Tensor<S> &x, Index dy, Index dx)
		{
			require_rank(x, 4, "cyclic_shift");
			const Index b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
			Tensor<S> out(x.shape());
			if (h == 0 || w == 0)
				return out;
			for (Index n = 0; n < b; ++n)
				for (Index y = 0; y < h; ++y)
					for (Index xx = 0; xx < w; ++xx)
					{
						const Index sy = ((y - dy) % h + h) % h;
						const Index sx = ((xx - dx) % w + w) % w;
						std::copy_n(&x(n, sy, sx, 0), c, &out(n, y, xx, 0));
					}
			return out;
		}
	} // namespace

	template <typename S>
	Tensor<S> cyclic_shift(const Tensor<S> &x, Index shift)
	{
		return roll(x, -shift, -shift);
	}

	template <typename S>
	Tensor<S> cyclic_unshift(const Tensor<S> &x, Index shift)
	{
		return roll(x, shift, shift);
	}

	template <typename S>
	Tensor<S> shifted_window_mask(Index h, Index w, Index m, Index shift)
	{
		if (h % m != 0 || w % m != 0)
			throw InvalidArgument("shifted_window_mask: grid not divisible by window");
		Tensor<S> labels({1, h, w, 1});
		auto region = [&](Index v, Index n) { return v < n - m ? 0 : (v < n - shift ? 1 : 2); };
		for (Index y = 0; y < h; ++y)
			for (Index x = 0; x < w; ++x)
				labels(0, y, x, 0) = static_cast<S>(region(y, h) * 3 + region(x, w));
		const Tensor<S> win = window_partition(labels, m);
		const Index nw = win.dim(0), t = m * m;
		Tensor<S> mask({nw, t, t});
		for (Index k = 0; k < nw; ++k)
			for (Index i = 0; i < t; ++i)
				for (Index j = 0; j < t; ++j)
					mask(k, i, j) = win(k, i, 0) == win(k, j, 0) ? S(0) : static_cast<S>(kMaskLogit);
		return mask;
	}

	std::vector<Index> relative_position_index(Index m)
	{
		const Index t = m * m, side = 2 * m - 1;
		std::vector<Index> idx(static_cast<std::size_t>(t * t));
		for (Index i = 0; i < t; ++i)
			for (Index j = 0; j < t; ++j)
			{
				const Index dy = i / m - j / m + m - 1;
				const Index dx = i % m - j % m + m - 1;
				idx[static_cast<std::size_t>(i * t + j)] = dy * side + dx;
			}
		return idx;
	}

	template <typename S>
	Tensor<S> rpe_gather(const Tensor<S> &table, Index m)
	{
		const Index side = 2 * m - 1;
		require_rank(table, 2, "rpe_gather");
		if (table.dim(0) != side * side)
			throw InvalidArgument("rpe_gather: table needs (2M-1)^2 = " + std::to_string(side * side) + " rows");
		const Index heads = table.dim(1), t = m * m;
		const auto idx = relative_position_index(m);
		Tensor<S> bias({heads, t, t});
		for (Index h = 0; h < heads; ++h)
			for (Index p = 0; p < t * t; ++p)
				bias[h * t * t + p] = table(idx[static_cast<std::size_t>(p)], h);
		return bias;
	}

	template <typename S>
	Tensor<S> logcpb_coords(Index m)
	{
		const Index side = 2 * m - 1;
		Tensor<S> coords({side * side, 2});
		const double norm = std::log2(8.0);
		auto f = [&](Index d) {
			const double t = 8.0 * static_cast<double>(d) / static_cast<double>(m - 1);
			const double sign = t > 0 ? 1.0 : (t < 0 ? -1.0 : 0.0);
			return static_cast<S>(sign * std::log2(1.0 + std::abs(t)) / norm);
		};
		for (Index dy = 0; dy < side; ++dy)
			for (Index dx = 0; dx < side; ++dx)
			{
				coords(dy * side + dx, 0) = f(dy - (m - 1));
				coords(dy * side + dx, 1) = f(dx - (m - 1));
			}
		return coords;
	}

	namespace
	{
		// Per-offset log-CPB bias, (2M-1)^2 x heads, with the pre-ReLU activations.
		template <typename S>
		MatrixR<S> cpb_table(const Tensor<S> &w1, const Tensor<S> &b1, const Tensor<S> &w2, Index m, MatrixR<S> *pre_out)
		{
			const Tensor<S> coords = logcpb_coords<S>(m);
			MatrixR<S> pre = coords.matrix() * w1.matrix(w1.dim(0), 2).transpose();
			pre.rowwise() += b1.matrix(1, b1.size()).row(0);
			const MatrixR<S> hidden = pre.cwiseMax(S(0));
			if (pre_out)
				*pre_out = pre;
			return hidden * w2.matrix(w2.dim(0), w2.dim(1)).transpose();
		}

		template <typename S>
		Tensor<S> gather_table(const MatrixR<S> &table, const std::vector<Index> &idx, Index t)
		{
			const Index heads = table.cols();
			Tensor<S> bias({heads, t, t});
			for (Index h = 0; h < heads; ++h)
				for (Index p = 0; p < t * t; ++p)
					bias[h * t * t + p] = table(idx[static_cast<std::size_t>(p)], h);
			return bias;
		}
	} // namespace

	template <typename S>
	Tensor<S> logcpb_bias(const Tensor<S> &w1, const Tensor<S> &b1, const Tensor<S> &w2, Index m)
	{
		return gather_table(cpb_table(w1, b1, w2, m, static_cast<MatrixR<S> *>(nullptr)), relative_position_index(m), m * m);
	}

	template <typename S>
	WindowAttention<S>::WindowAttention(const AttentionConfig &cfg, const std::string &prefix, ParameterSet<S> &params, Rng &rng)
		: cfg_(cfg), rel_index_(relative_position_index(cfg.window))
	{
		cfg_.validate();
		const Index c = cfg.channels, h = cfg.heads, m = cfg.window, side = 2 * m - 1;
		constexpr double kStd = 0.02;
		qkv_w_ = params.add(prefix + ".qkv.weight", trunc_normal_init<S>({3 * c, c}, kStd, rng));
		qkv_b_ = params.add(prefix + ".qkv.bias", Tensor<S>({3 * c}));
		proj_w_ = params.add(prefix + ".proj.weight", trunc_normal_init<S>({c, c}, kStd, rng));
		proj_b_ = params.add(prefix + ".proj.bias", Tensor<S>({c}));
		if (cfg.cosine)
			tau_ = params.add(prefix + ".tau", Tensor<S>::filled({h}, static_cast<S>(kInitTemperature)));
		if (cfg.pe_rpe)
			rpe_ = params.add(prefix + ".rpe", trunc_normal_init<S>({side * side, h}, kStd, rng));
		if (cfg.pe_lepe)
			lepe_ = params.add(prefix + ".lepe", Tensor<S>({c, m * m}));
		if (cfg.pe_logcpb)
		{
			// Non-zero first-layer bias keeps the zero-offset coordinate off the ReLU kink.
			cpb_w1_ = params.add(prefix + ".cpb.fc1.weight", trunc_normal_init<S>({cfg.cpb_hidden, 2}, kStd, rng));
			cpb_b1_ = params.add(prefix + ".cpb.fc1.bias", trunc_normal_init<S>({cfg.cpb_hidden}, kStd, rng));
			cpb_w2_ = params.add(prefix + ".cpb.fc2.weight", trunc_normal_init<S>({h, cfg.cpb_hidden}, kStd, rng));
		}
	}

	template <typename S>
	Tensor<S> WindowAttention<S>::position_bias(const ParameterSet<S> &params, Cache *cache) const
	{
		const Index t = cfg_.tokens();
		Tensor<S> bias({cfg_.heads, t, t});
		if (cfg_.pe_rpe)
			bias.flat() += rpe_gather(params.value(rpe_), cfg_.window).flat();
		if (cfg_.pe_logcpb)
		{
			MatrixR<S> pre;
			const MatrixR<S> table = cpb_table(params.value(cpb_w1_), params.value(cpb_b1_), params.value(cpb_w2_), cfg_.window, &pre);
			bias.flat() += gather_table(table, rel_index_, t).flat();
			if (cache)
				cache->cpb_hidden_pre = Tensor<S>({pre.rows(), pre.cols()}, std::vector<S>(pre.data(), pre.data() + pre.size()));
		}
		return bias;
	}

	template <typename S>
	MatrixR<S> WindowAttention<S>::forward(const ParameterSet<S> &params, const MatrixR<S> &x, const Tensor<S> *mask, Cache *cache) const
	{
		const Index c = cfg_.channels, heads = cfg_.heads, d = cfg_.head_dim(), t = cfg_.tokens();
		if (x.cols() != c || x.rows() % t != 0)
			throw InvalidArgument("window_attention: input " + std::to_string(x.rows()) + "x" + std::to_string(x.cols()) +
								  " is not a stack of " + std::to_string(t) + "-token windows with " + std::to_string(c) + " channels");
		const Index nwin = x.rows() / t;
		if (mask && (mask->rank() != 3 || mask->dim(1) != t || mask->dim(2) != t || mask->dim(0) < 1 || nwin % mask->dim(0) != 0))
			throw InvalidArgument("window_attention: mask shape " + shape_string(mask->shape()) + " incompatible with " + std::to_string(nwin) + " windows");

		const Tensor<S> bias = position_bias(params, cache);
		const bool any_bias = cfg_.pe_rpe || cfg_.pe_logcpb;
		MatrixR<S> qkv = linear_forward(x, params.value(qkv_w_), &params.value(qkv_b_));

		std::vector<S> scale(static_cast<std::size_t>(heads));
		for (Index h = 0; h < heads; ++h)
			scale[h] = cfg_.cosine ? S(1) / std::max(params.value(tau_)[h], static_cast<S>(kMinTemperature))
								   : S(1) / std::sqrt(static_cast<S>(d));

		MatrixR<S> qn(x.rows(), c), kn(x.rows(), c), qnorm(x.rows(), heads), knorm(x.rows(), heads);
		for (Index h = 0; h < heads; ++h)
		{
			auto q = qkv.middleCols(h * d, d);
			auto k = qkv.middleCols(c + h * d, d);
			if (cfg_.cosine)
			{
				qnorm.col(h) = q.rowwise().norm();
				knorm.col(h) = k.rowwise().norm();
				for (Index r = 0; r < x.rows(); ++r)
				{
					qn.block(r, h * d, 1, d) = q.row(r) / std::max(qnorm(r, h), S(1e-12));
					kn.block(r, h * d, 1, d) = k.row(r) / std::max(knorm(r, h), S(1e-12));
				}
			}
			else
			{
				qn.middleCols(h * d, d) = q;
				kn.middleCols(h * d, d) = k;
			}
		}

		MatrixR<S> out(x.rows(), c);
		if (cache)
			cache->attn.resize(nwin * heads * t, t);
		MatrixR<S> logits(t, t);
		for (Index w = 0; w < nwin; ++w)
			for (Index h = 0; h < heads; ++h)
			{
				logits.noalias() = scale[h] * (qn.block(w * t, h * d, t, d) * kn.block(w * t, h * d, t, d).transpose());
				if (any_bias)
					logits += Eigen::Map<const MatrixR<S>>(bias.data() + h * t * t, t, t);
				if (mask)
					logits += Eigen::Map<const MatrixR<S>>(mask->data() + (w % mask->dim(0)) * t * t, t, t);
				if (!logits.allFinite())
					throw NumericError("window_attention: non-finite logits");
				const VectorX<S> row_max = logits.rowwise().maxCoeff();
				logits.colwise() -= row_max;
				logits.array() = logits.array().exp();
				const VectorX<S> row_sum = logits.rowwise().sum();
				logits = row_sum.cwiseInverse().asDiagonal() * logits;
				out.block(w * t, h * d, t, d).noalias() = logits * qkv.block(w * t, 2 * c + h * d, t, d);
				if (cache)
					cache->attn.block((w * heads + h) * t, 0, t, t) = logits;
			}

		MatrixR<S> y = linear_forward(out, params.value(proj_w_), &params.value(proj_b_));
		if (cfg_.pe_lepe)
		{
			const auto lepe = params.value(lepe_).matrix(c, t).transpose();
			for (Index w = 0; w < nwin; ++w)
				y.middleRows(w * t, t) += lepe;
		}
		if (cache)
		{
			cache->x = x;
			cache->qkv = std::move(qkv);
			cache->qn = std::move(qn);
			cache->kn = std::move(kn);
			cache->qnorm = std::move(qnorm);
			cache->knorm = std::move(knorm);
			cache->heads_out = std::move(out);
			cache->scale = std::move(scale);
		}
		return y;
	}

	template <typename S>
	MatrixR<S> WindowAttention<S>::backward(ParameterSet<S> &params, const Cache &cache, const Tensor<S> *mask, const MatrixR<S> &dy) const
	{
		(void)mask; // additive constant: no gradient
		const Index c = cfg_.channels, heads = cfg_.heads, d = cfg_.head_dim(), t = cfg_.tokens();
		const Index nwin = dy.rows() / t;

		if (cfg_.pe_lepe)
		{
			auto dlepe = params.grad(lepe_).matrix(c, t);
			for (Index w = 0; w < nwin; ++w)
				dlepe += dy.middleRows(w * t, t).transpose();
		}
		const MatrixR<S> dout = linear_backward(cache.heads_out, params.value(proj_w_), dy, params.grad(proj_w_), &params.grad(proj_b_));

		MatrixR<S> dqkv = MatrixR<S>::Zero(dy.rows(), 3 * c);
		MatrixR<S> dqn = MatrixR<S>::Zero(dy.rows(), c), dkn = MatrixR<S>::Zero(dy.rows(), c);
		std::vector<MatrixR<S>> dbias(static_cast<std::size_t>(heads), MatrixR<S>::Zero(t, t));
		std::vector<S> dscale(static_cast<std::size_t>(heads), S(0));
		MatrixR<S> dattn(t, t), dlogits(t, t);

		for (Index w = 0; w < nwin; ++w)
			for (Index h = 0; h < heads; ++h)
			{
				const auto attn = cache.attn.block((w * heads + h) * t, 0, t, t);
				const auto v = cache.qkv.block(w * t, 2 * c + h * d, t, d);
				const auto dout_h = dout.block(w * t, h * d, t, d);
				dattn.noalias() = dout_h * v.transpose();
				dqkv.block(w * t, 2 * c + h * d, t, d).noalias() += attn.transpose() * dout_h;
				const VectorX<S> inner = (dattn.array() * attn.array()).rowwise().sum();
				dlogits = attn.array() * (dattn.colwise() - inner).array();
				dbias[h] += dlogits;

				const auto qn = cache.qn.block(w * t, h * d, t, d);
				const auto kn = cache.kn.block(w * t, h * d, t, d);
				if (cfg_.cosine)
					dscale[h] += (dlogits.array() * (qn * kn.transpose()).array()).sum();
				dqn.block(w * t, h * d, t, d).noalias() += cache.scale[h] * (dlogits * kn);
				dkn.block(w * t, h * d, t, d).noalias() += cache.scale[h] * (dlogits.transpose() * qn);
			}

		// Back through the row normalization q / |q|.
		for (Index h = 0; h < heads; ++h)
		{
			auto dq = dqkv.middleCols(h * d, d);
			auto dk = dqkv.middleCols(c + h * d, d);
			if (!cfg_.cosine)
			{
				dq = dqn.middleCols(h * d, d);
				dk = dkn.middleCols(h * d, d);
				continue;
			}
			auto renorm = [&](auto &&dst, const MatrixR<S> &g, const MatrixR<S> &unit, const MatrixR<S> &norms) {
				for (Index r = 0; r < dy.rows(); ++r)
				{
					const auto gr = g.row(r).segment(h * d, d);
					const S n = norms(r, h);
					if (n > S(1e-12))
					{
						const auto ur = unit.row(r).segment(h * d, d);
						dst.row(r) = (gr - ur * gr.dot(ur)) / n;
					}
					else
						dst.row(r) = gr / S(1e-12);
				}
			};
			renorm(dq, dqn, cache.qn, cache.qnorm);
			renorm(dk, dkn, cache.kn, cache.knorm);
		}

		if (cfg_.cosine)
		{
			auto &dtau = params.grad(tau_);
			const auto &tau = params.value(tau_);
			for (Index h = 0; h < heads; ++h)
				if (tau[h] > static_cast<S>(kMinTemperature))
					dtau[h] += dscale[h] * (-S(1) / (tau[h] * tau[h]));
		}

		if (cfg_.pe_rpe || cfg_.pe_logcpb)
		{
			const Index side = 2 * cfg_.window - 1;
			MatrixR<S> dtable = MatrixR<S>::Zero(side * side, heads);
			for (Index h = 0; h < heads; ++h)
				for (Index p = 0; p < t * t; ++p)
					dtable(rel_index_[static_cast<std::size_t>(p)], h) += dbias[h].data()[p];
			if (cfg_.pe_rpe)
				params.grad(rpe_).matrix(side * side, heads) += dtable;
			if (cfg_.pe_logcpb)
			{
				const Tensor<S> coords = logcpb_coords<S>(cfg_.window);
				const auto pre = cache.cpb_hidden_pre.matrix();
				const MatrixR<S> hidden = pre.cwiseMax(S(0));
				const auto &w2 = params.value(cpb_w2_);
				params.grad(cpb_w2_).matrix(heads, cfg_.cpb_hidden).noalias() += dtable.transpose() * hidden;
				MatrixR<S> dhidden = dtable * w2.matrix(heads, cfg_.cpb_hidden);
				dhidden = dhidden.cwiseProduct((pre.array() > S(0)).template cast<S>().matrix());
				params.grad(cpb_w1_).matrix(cfg_.cpb_hidden, 2).noalias() += dhidden.transpose() * coords.matrix();
				params.grad(cpb_b1_).matrix(1, cfg_.cpb_hidden) += dhidden.colwise().sum();
			}
		}

		return linear_backward(cache.x, params.value(qkv_w_), dqkv, params.grad(qkv_w_), &params.grad(qkv_b_));
	}

	template <typename S>
	Tensor<S> window_attention(const Tensor<S> &windows, const WindowAttention<S> &layer, const ParameterSet<S> &params, const Tensor<S> *mask)
	{
		require_rank(windows, 3, "window_attention");
		const MatrixR<S> y = layer.forward(params, windows.matrix(), mask, nullptr);
		return Tensor<S>(windows.shape(), std::vector<S>(y.data(), y.data() + y.size()));
	}

#define MOSE_INSTANTIATE_ATTENTION(S)                                                                                 \
	template Tensor<S> window_partition<S>(const Tensor<S> &, Index);                                                 \
	template Tensor<S> window_reverse<S>(const Tensor<S> &, Index, Index, Index);                                     \
	template Tensor<S> cyclic_shift<S>(const Tensor<S> &, Index);                                                     \
	template Tensor<S> cyclic_unshift<S>(const Tensor<S> &, Index);                                                   \
	template Tensor<S> shifted_window_mask<S>(Index, Index, Index, Index);                                            \
	template Tensor<S> rpe_gather<S>(const Tensor<S> &, Index);                                                       \
	template Tensor<S> logcpb_coords<S>(Index);                                                                       \
	template Tensor<S> logcpb_bias<S>(const Tensor<S> &, const Tensor<S> &, const Tensor<S> &, Index);                \
	template class WindowAttention<S>;                                                                                \
	template Tensor<S> window_attention<S>(const Tensor<S> &, const WindowAttention<S> &, const ParameterSet<S> &,    \
										   const Tensor<S> *);

	MOSE_INSTANTIATE_ATTENTION(float)
	MOSE_INSTANTIATE_ATTENTION(double)
} // namespace mose
