#pragma once

#include "mose/ops.hpp"
#include "mose/parameters.hpp"
#include "mose/rng.hpp"

#include <string>
#include <vector>

namespace mose
{
	struct MoeConfig
	{
		Index channels = 90;
		Index experts = 8;
		Index active = 2;
		// Default is the embedding width: half the weights of the 2C-hidden dense MLP.
		Index expert_hidden = 90;
		bool smart_merger = true;

		void validate() const;
	};

	/// Per-example routing: `k` expert ids per row, sorted by descending weight
	/// (ties toward the lower id), and their softmaxed weights.
	template <typename S>
	struct GateDecision
	{
		Index k = 0;
		std::vector<Index> indices;
		std::vector<S> weights;

		Index rows() const { return k ? static_cast<Index>(indices.size()) / k : 0; }
		Index index(Index row, Index j) const { return indices[static_cast<std::size_t>(row * k + j)]; }
		S weight(Index row, Index j) const { return weights[static_cast<std::size_t>(row * k + j)]; }
	};

	/// Softmax(KeepTopK(x W_g, k)) for each row of pooled (B x C); W_g is C x E.
	template <typename S>
	GateDecision<S> gate_topk(const Tensor<S> &pooled, const Tensor<S> &gate_weight, Index k);

	/// Squared coefficient of variation, population variance over mean^2.
	template <typename S>
	S importance_loss(const Tensor<S> &importance);

	/// d importance_loss / d importance.
	template <typename S>
	Tensor<S> importance_loss_grad(const Tensor<S> &importance);

	struct ParamCount
	{
		Index active = 0;
		Index sparse = 0;
	};

	/// Parameters of one C -> hidden -> C GELU perceptron (weights and biases).
	Index mlp_param_count(Index channels, Index hidden);

	/// Active / sparse parameters of one MoE-SM layer: experts, bias-free gate and merger.
	ParamCount moe_param_count(const MoeConfig &cfg);

	/// fc1 -> GELU -> fc2 under "<prefix>.fc1.*", "<prefix>.fc2.*".
	template <typename S>
	class FeedForward
	{
	public:
		struct Cache
		{
			MatrixR<S> x, pre, act;
		};

		FeedForward() = default;
		FeedForward(Index channels, Index hidden, const std::string &prefix, ParameterSet<S> &params, Rng &rng);

		MatrixR<S> forward(const ParameterSet<S> &params, const MatrixR<S> &x, Cache *cache) const;
		MatrixR<S> backward(ParameterSet<S> &params, const Cache &cache, const MatrixR<S> &dy) const;

	private:
		std::size_t w1_ = 0, b1_ = 0, w2_ = 0, b2_ = 0;
	};

	/// 3x3, pad 1 convolution with k input maps and one output map, applied to
	/// every channel of an H x W token grid with the same kernel ([1, k, 3, 3]).
	template <typename S>
	MatrixR<S> smart_merge(const std::vector<MatrixR<S>> &inputs, Index height, Index width, const Tensor<S> &kernel, const Tensor<S> &bias);

	/// Accumulates kernel/bias gradients; returns one gradient per input map stack.
	template <typename S>
	std::vector<MatrixR<S>> smart_merge_backward(const std::vector<MatrixR<S>> &inputs, Index height, Index width, const Tensor<S> &kernel,
												 const MatrixR<S> &dy, Tensor<S> &dkernel, Tensor<S> &dbias);

	/// Mixture-of-experts layer with per-example Top-K routing and a Smart
	/// Merger. Parameters under "<prefix>.{gate, experts.{e}.fc1, experts.{e}.fc2, sm}".
	template <typename S>
	class MoeLayer
	{
	public:
		struct Result
		{
			MatrixR<S> y;
			GateDecision<S> decision;
			Tensor<S> importance; // E, sum of gate weights over the batch
		};

		struct Cache
		{
			Index batch = 0, height = 0, width = 0;
			MatrixR<S> pooled; // B x C
			GateDecision<S> decision;
			// [b * k + j]: cache and raw output of the j-th ranked expert of example b.
			std::vector<typename FeedForward<S>::Cache> expert_cache;
			std::vector<MatrixR<S>> expert_out;
		};

		MoeLayer() = default;
		MoeLayer(const MoeConfig &cfg, const std::string &prefix, ParameterSet<S> &params, Rng &rng);

		const MoeConfig &config() const { return cfg_; }
		std::size_t gate_index() const { return gate_; }
		std::size_t merger_index() const { return sm_w_; }

		/// x: (B * H * W) x C, example-major, raster order inside each example.
		Result forward(const ParameterSet<S> &params, const MatrixR<S> &x, Index batch, Index height, Index width, Cache *cache) const;

		/// dimportance (E, may be null) is the loss gradient w.r.t. this call's importance vector.
		MatrixR<S> backward(ParameterSet<S> &params, const Cache &cache, const MatrixR<S> &dy, const Tensor<S> *dimportance) const;

	private:
		MoeConfig cfg_;
		std::size_t gate_ = 0, sm_w_ = 0, sm_b_ = 0;
		std::vector<FeedForward<S>> experts_;
	};

	/// Tensor form: x is B x N x C with N = H * W.
	template <typename S>
	typename MoeLayer<S>::Result moe_forward(const Tensor<S> &x, const MoeLayer<S> &layer, const ParameterSet<S> &params, Index height, Index width);
} // namespace mose
