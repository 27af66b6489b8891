#include "mose/moe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mose
{
	void MoeConfig::validate() const
	{
		if (experts < 1 || active < 1 || active > experts)
			throw InvalidArgument("moe: need 1 <= active (" + std::to_string(active) + ") <= experts (" + std::to_string(experts) + ")");
		if (expert_hidden < 1 || channels < 1)
			throw InvalidArgument("moe: channels and expert_hidden must be positive");
	}

	template <typename S>
	GateDecision<S> gate_topk(const Tensor<S> &pooled, const Tensor<S> &gate_weight, Index k)
	{
		require_rank(pooled, 2, "gate_topk pooled");
		require_rank(gate_weight, 2, "gate_topk W_g");
		const Index b = pooled.dim(0), c = pooled.dim(1), e = gate_weight.dim(1);
		if (gate_weight.dim(0) != c)
			throw InvalidArgument("gate_topk: W_g rows " + std::to_string(gate_weight.dim(0)) + " != channels " + std::to_string(c));
		if (k < 1 || k > e)
			throw InvalidArgument("gate_topk: k = " + std::to_string(k) + " must be in [1, " + std::to_string(e) + "]");

		const MatrixR<S> logits = pooled.matrix() * gate_weight.matrix();
		if (!logits.allFinite())
			throw NumericError("gate_topk: non-finite gate logits");

		GateDecision<S> out;
		out.k = k;
		out.indices.reserve(static_cast<std::size_t>(b * k));
		out.weights.reserve(static_cast<std::size_t>(b * k));
		std::vector<Index> order(static_cast<std::size_t>(e));
		for (Index row = 0; row < b; ++row)
		{
			std::iota(order.begin(), order.end(), Index{0});
			std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](Index a, Index bb) {
				const S la = logits(row, a), lb = logits(row, bb);
				return la > lb || (la == lb && a < bb);
			});
			const S top = logits(row, order[0]);
			S total = 0;
			std::vector<S> w(static_cast<std::size_t>(k));
			for (Index j = 0; j < k; ++j)
				total += (w[j] = std::exp(logits(row, order[j]) - top));
			for (Index j = 0; j < k; ++j)
			{
				out.indices.push_back(order[j]);
				out.weights.push_back(w[j] / total);
			}
		}
		return out;
	}

	template <typename S>
	S importance_loss(const Tensor<S> &importance)
	{
		if (importance.size() < 1)
			throw InvalidArgument("importance_loss: empty importance vector");
		const auto v = importance.flat();
		const S mean = v.mean();
		if (!(v.maxCoeff() > S(0)) || !(mean > S(0)))
			throw InvalidArgument("importance_loss: importance has no positive entry (empty batch?)");
		const S var = (v.array() - mean).square().mean();
		return var / (mean * mean);
	}

	template <typename S>
	Tensor<S> importance_loss_grad(const Tensor<S> &importance)
	{
		const S loss = importance_loss(importance);
		const auto v = importance.flat();
		const S n = static_cast<S>(v.size());
		const S mean = v.mean();
		Tensor<S> g(importance.shape());
		// d(var/mean^2)/dI_i = 2 (I_i - mean) / (n mean^2) - 2 loss / (n mean)
		g.flat() = (S(2) / (n * mean * mean)) * (v.array() - mean).matrix() - VectorX<S>::Constant(v.size(), S(2) * loss / (n * mean));
		return g;
	}

	Index mlp_param_count(Index channels, Index hidden)
	{
		return channels * hidden + hidden + hidden * channels + channels;
	}

	ParamCount moe_param_count(const MoeConfig &cfg)
	{
		cfg.validate();
		const Index expert = mlp_param_count(cfg.channels, cfg.expert_hidden);
		const Index shared = cfg.channels * cfg.experts + (cfg.smart_merger ? 9 * cfg.active + 1 : 0);
		return {cfg.active * expert + shared, cfg.experts * expert + shared};
	}

	template <typename S>
	FeedForward<S>::FeedForward(Index channels, Index hidden, const std::string &prefix, ParameterSet<S> &params, Rng &rng)
	{
		w1_ = params.add(prefix + ".fc1.weight", trunc_normal_init<S>({hidden, channels}, 0.02, rng));
		b1_ = params.add(prefix + ".fc1.bias", Tensor<S>({hidden}));
		w2_ = params.add(prefix + ".fc2.weight", trunc_normal_init<S>({channels, hidden}, 0.02, rng));
		b2_ = params.add(prefix + ".fc2.bias", Tensor<S>({channels}));
	}

	template <typename S>
	MatrixR<S> FeedForward<S>::forward(const ParameterSet<S> &params, const MatrixR<S> &x, Cache *cache) const
	{
		MatrixR<S> pre = linear_forward(x, params.value(w1_), &params.value(b1_));
		MatrixR<S> act = gelu(pre);
		MatrixR<S> y = linear_forward(act, params.value(w2_), &params.value(b2_));
		if (cache)
		{
			cache->x = x;
			cache->pre = std::move(pre);
			cache->act = std::move(act);
		}
		return y;
	}

	template <typename S>
	MatrixR<S> FeedForward<S>::backward(ParameterSet<S> &params, const Cache &cache, const MatrixR<S> &dy) const
	{
		const MatrixR<S> dact = linear_backward(cache.act, params.value(w2_), dy, params.grad(w2_), &params.grad(b2_));
		const MatrixR<S> dpre = gelu_backward(cache.pre, dact);
		return linear_backward(cache.x, params.value(w1_), dpre, params.grad(w1_), &params.grad(b1_));
	}

	namespace
	{
		// Visits every (tap, output row segment, input row segment) of a 3x3 pad-1 stencil.
		template <typename Fn>
		void for_each_tap_segment(Index height, Index width, Fn &&fn)
		{
			for (Index ky = 0; ky < 3; ++ky)
				for (Index kx = 0; kx < 3; ++kx)
				{
					const Index x0 = std::max<Index>(0, 1 - kx);
					const Index x1 = std::min<Index>(width, width + 1 - kx);
					if (x1 <= x0)
						continue;
					for (Index y = 0; y < height; ++y)
					{
						const Index sy = y + ky - 1;
						if (sy < 0 || sy >= height)
							continue;
						fn(ky * 3 + kx, y * width + x0, sy * width + x0 + kx - 1, x1 - x0);
					}
				}
		}
	} // namespace

	template <typename S>
	MatrixR<S> smart_merge(const std::vector<MatrixR<S>> &inputs, Index height, Index width, const Tensor<S> &kernel, const Tensor<S> &bias)
	{
		const Index k = static_cast<Index>(inputs.size());
		require_shape(kernel, {1, k, 3, 3}, "smart merger kernel");
		if (k == 0 || inputs[0].rows() != height * width)
			throw InvalidArgument("smart_merge: inputs do not match the token grid");
		MatrixR<S> out = MatrixR<S>::Constant(inputs[0].rows(), inputs[0].cols(), bias[0]);
		for (Index j = 0; j < k; ++j)
			for_each_tap_segment(height, width, [&](Index tap, Index dst, Index src, Index len) {
				out.middleRows(dst, len) += kernel[j * 9 + tap] * inputs[j].middleRows(src, len);
			});
		return out;
	}

	template <typename S>
	std::vector<MatrixR<S>> smart_merge_backward(const std::vector<MatrixR<S>> &inputs, Index height, Index width, const Tensor<S> &kernel,
												 const MatrixR<S> &dy, Tensor<S> &dkernel, Tensor<S> &dbias)
	{
		const Index k = static_cast<Index>(inputs.size());
		dbias[0] += dy.sum();
		std::vector<MatrixR<S>> din(inputs.size(), MatrixR<S>::Zero(dy.rows(), dy.cols()));
		for (Index j = 0; j < k; ++j)
			for_each_tap_segment(height, width, [&](Index tap, Index dst, Index src, Index len) {
				dkernel[j * 9 + tap] += (dy.middleRows(dst, len).array() * inputs[j].middleRows(src, len).array()).sum();
				din[j].middleRows(src, len) += kernel[j * 9 + tap] * dy.middleRows(dst, len);
			});
		return din;
	}

	template <typename S>
	MoeLayer<S>::MoeLayer(const MoeConfig &cfg, const std::string &prefix, ParameterSet<S> &params, Rng &rng) : cfg_(cfg)
	{
		cfg_.validate();
		gate_ = params.add(prefix + ".gate", trunc_normal_init<S>({cfg.channels, cfg.experts}, 0.02, rng));
		for (Index e = 0; e < cfg.experts; ++e)
			experts_.emplace_back(cfg.channels, cfg.expert_hidden, prefix + ".experts." + std::to_string(e), params, rng);
		if (cfg.smart_merger)
		{
			// Starts as the plain mean of the gated experts.
			Tensor<S> kernel({1, cfg.active, 3, 3});
			for (Index j = 0; j < cfg.active; ++j)
				kernel(0, j, 1, 1) = S(1) / static_cast<S>(cfg.active);
			sm_w_ = params.add(prefix + ".sm.weight", std::move(kernel));
			sm_b_ = params.add(prefix + ".sm.bias", Tensor<S>({1}));
		}
	}

	template <typename S>
	typename MoeLayer<S>::Result MoeLayer<S>::forward(const ParameterSet<S> &params, const MatrixR<S> &x, Index batch, Index height,
													  Index width, Cache *cache) const
	{
		const Index n = height * width, c = cfg_.channels, k = cfg_.active;
		if (x.cols() != c || x.rows() != batch * n)
			throw InvalidArgument("moe_forward: input has " + std::to_string(x.rows()) + " tokens, expected B*H*W = " +
								  std::to_string(batch * n));

		Tensor<S> pooled({batch, c});
		for (Index b = 0; b < batch; ++b)
			pooled.matrix().row(b) = x.middleRows(b * n, n).colwise().mean();

		Result result;
		result.decision = gate_topk(pooled, params.value(gate_), k);
		result.importance = Tensor<S>({cfg_.experts});
		result.y.resize(x.rows(), c);

		if (cache)
		{
			cache->batch = batch;
			cache->height = height;
			cache->width = width;
			cache->pooled = pooled.matrix();
			cache->decision = result.decision;
			cache->expert_cache.assign(static_cast<std::size_t>(batch * k), {});
			cache->expert_out.assign(static_cast<std::size_t>(batch * k), {});
		}

		std::vector<MatrixR<S>> scaled(static_cast<std::size_t>(k));
		for (Index b = 0; b < batch; ++b)
		{
			const MatrixR<S> xb = x.middleRows(b * n, n);
			for (Index j = 0; j < k; ++j)
			{
				const Index e = result.decision.index(b, j);
				const S w = result.decision.weight(b, j);
				result.importance[e] += w;
				typename FeedForward<S>::Cache *ec = cache ? &cache->expert_cache[b * k + j] : nullptr;
				MatrixR<S> out = experts_[e].forward(params, xb, ec);
				scaled[j] = w * out;
				if (cache)
					cache->expert_out[b * k + j] = std::move(out);
			}
			if (cfg_.smart_merger)
				result.y.middleRows(b * n, n) = smart_merge(scaled, height, width, params.value(sm_w_), params.value(sm_b_));
			else
			{
				auto yb = result.y.middleRows(b * n, n);
				yb = scaled[0];
				for (Index j = 1; j < k; ++j)
					yb += scaled[j];
			}
		}
		return result;
	}

	template <typename S>
	MatrixR<S> MoeLayer<S>::backward(ParameterSet<S> &params, const Cache &cache, const MatrixR<S> &dy, const Tensor<S> *dimportance) const
	{
		const Index n = cache.height * cache.width, k = cfg_.active;
		const auto &dec = cache.decision;
		const auto gate = params.value(gate_).matrix();
		auto dgate = params.grad(gate_).matrix();
		MatrixR<S> dx = MatrixR<S>::Zero(dy.rows(), dy.cols());

		std::vector<MatrixR<S>> scaled(static_cast<std::size_t>(k));
		std::vector<MatrixR<S>> dscaled;
		std::vector<S> dw(static_cast<std::size_t>(k));
		for (Index b = 0; b < cache.batch; ++b)
		{
			const MatrixR<S> dyb = dy.middleRows(b * n, n);
			if (cfg_.smart_merger)
			{
				for (Index j = 0; j < k; ++j)
					scaled[j] = dec.weight(b, j) * cache.expert_out[b * k + j];
				dscaled = smart_merge_backward(scaled, cache.height, cache.width, params.value(sm_w_), dyb, params.grad(sm_w_), params.grad(sm_b_));
			}
			else
				dscaled.assign(static_cast<std::size_t>(k), dyb);

			auto dxb = dx.middleRows(b * n, n);
			for (Index j = 0; j < k; ++j)
			{
				const Index e = dec.index(b, j);
				const S w = dec.weight(b, j);
				dw[j] = (dscaled[j].array() * cache.expert_out[b * k + j].array()).sum();
				if (dimportance)
					dw[j] += (*dimportance)[e];
				dxb += experts_[e].backward(params, cache.expert_cache[b * k + j], w * dscaled[j]);
			}

			// Softmax over the kept logits; dropped experts receive no gradient.
			S inner = 0;
			for (Index j = 0; j < k; ++j)
				inner += dec.weight(b, j) * dw[j];
			RowVectorX<S> dpooled = RowVectorX<S>::Zero(cfg_.channels);
			for (Index j = 0; j < k; ++j)
			{
				const Index e = dec.index(b, j);
				const S dlogit = dec.weight(b, j) * (dw[j] - inner);
				dgate.col(e) += dlogit * cache.pooled.row(b).transpose();
				dpooled += dlogit * gate.col(e).transpose();
			}
			dxb.rowwise() += dpooled / static_cast<S>(n);
		}
		return dx;
	}

	template <typename S>
	typename MoeLayer<S>::Result moe_forward(const Tensor<S> &x, const MoeLayer<S> &layer, const ParameterSet<S> &params, Index height, Index width)
	{
		require_rank(x, 3, "moe_forward");
		if (x.dim(1) != height * width)
			throw InvalidArgument("moe_forward: N = " + std::to_string(x.dim(1)) + " but H*W = " + std::to_string(height * width));
		return layer.forward(params, x.matrix(), x.dim(0), height, width, nullptr);
	}

#define MOSE_INSTANTIATE_MOE(S)                                                                                             \
	template GateDecision<S> gate_topk<S>(const Tensor<S> &, const Tensor<S> &, Index);                                     \
	template S importance_loss<S>(const Tensor<S> &);                                                                       \
	template Tensor<S> importance_loss_grad<S>(const Tensor<S> &);                                                          \
	template class FeedForward<S>;                                                                                          \
	template MatrixR<S> smart_merge<S>(const std::vector<MatrixR<S>> &, Index, Index, const Tensor<S> &, const Tensor<S> &); \
	template std::vector<MatrixR<S>> smart_merge_backward<S>(const std::vector<MatrixR<S>> &, Index, Index, const Tensor<S> &, \
															 const MatrixR<S> &, Tensor<S> &, Tensor<S> &);                 \
	template class MoeLayer<S>;                                                                                             \
	template typename MoeLayer<S>::Result moe_forward<S>(const Tensor<S> &, const MoeLayer<S> &, const ParameterSet<S> &,    \
														 Index, Index);

	MOSE_INSTANTIATE_MOE(float)
	MOSE_INSTANTIATE_MOE(double)
} // namespace mose
