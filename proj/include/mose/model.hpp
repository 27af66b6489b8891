#pragma once

#include "mose/attention.hpp"
#include "mose/config.hpp"
#include "mose/moe.hpp"

#include <optional>
#include <string>
#include <vector>

namespace mose
{
	/// Pixel-shuffle factors applied in sequence for an overall scale r.
	std::vector<Index> upsample_stages(Index scale);

	/// Side length after internal padding: the next multiple of 2M, so every
	/// shifted window pattern tiles whole window pairs (120 -> 128 at M=8).
	inline Index padded_size(Index side, Index window) { return (side + 2 * window - 1) / (2 * window) * (2 * window); }

	/// Row order that takes an H x W token grid to shifted, window-partitioned
	/// order: windowed.row(r) == grid.row(order[r]).
	std::vector<Index> window_order(Index height, Index width, Index window, Index shift);

	template <typename S>
	MatrixR<S> gather_rows(const MatrixR<S> &x, const std::vector<Index> &order);

	/// Inverse of gather_rows (and its adjoint).
	template <typename S>
	MatrixR<S> scatter_rows(const MatrixR<S> &x, const std::vector<Index> &order);

	/// Shallow conv, groups of S2ML blocks with per-group conv and residual,
	/// final norm + conv with the global residual, pixel-shuffle upsampler and
	/// a reconstruction conv. Parameters are registered at construction.
	template <typename S>
	class SrModel
	{
	public:
		struct Conv
		{
			std::size_t weight = 0, bias = 0;
		};

		struct Block
		{
			std::string prefix;
			AttentionConfig attention_cfg;
			std::size_t norm1_w = 0, norm1_b = 0, norm2_w = 0, norm2_b = 0;
			WindowAttention<S> attention;
			MoeLayer<S> moe;	   // used when the ffn kind is moe
			FeedForward<S> mlp; // used when the ffn kind is mlp
		};

		struct BlockTrace
		{
			typename WindowAttention<S>::Cache attention;
			LayerNormCache<S> norm1, norm2;
			typename MoeLayer<S>::Cache moe;
			typename FeedForward<S>::Cache mlp;
		};

		/// Everything one example's backward pass needs.
		struct Trace
		{
			Index height = 0, width = 0, padded_height = 0, padded_width = 0;
			Tensor<S> mask; // shifted-window mask, empty when no block shifts
			MatrixR<S> input;
			std::vector<BlockTrace> blocks;
			std::vector<MatrixR<S>> group_conv_in;
			LayerNormCache<S> norm;
			MatrixR<S> body_conv_in;
			std::vector<MatrixR<S>> upsample_in;
			MatrixR<S> head_in;
		};

		struct ExampleOutput
		{
			MatrixR<S> sr;		 // (rH * rW) x Cin tokens
			MatrixR<S> features; // (Hp * Wp) x T tokens
			// One entry per MoE layer, in block order.
			std::vector<GateDecision<S>> decisions;
			std::vector<Tensor<S>> importance;
		};

		struct Output
		{
			Tensor<S> sr; // B x Cin x rH x rW
			S moe_loss = S(0);
			// Per MoE layer: batch routing (B rows) and summed importance (E).
			std::vector<GateDecision<S>> decisions;
			std::vector<Tensor<S>> importance;
		};

		SrModel(const ModelConfig &cfg, ParameterSet<S> &params, Rng &rng);

		const ModelConfig &config() const { return cfg_; }
		const std::vector<Block> &blocks() const { return blocks_; }
		Index moe_layers() const { return cfg_.ffn == FfnKind::moe ? static_cast<Index>(blocks_.size()) : 0; }
		const Conv &group_conv(Index g) const { return group_convs_.at(static_cast<std::size_t>(g)); }

		/// lr: B x Cin x H x W. Examples run on up to `threads` workers.
		Output forward(const ParameterSet<S> &params, const Tensor<S> &lr, int threads = 1) const;

		/// Deep features after the global residual: B x T x Hp x Wp, with Hp, Wp
		/// the padded input size (see padded_size).
		Tensor<S> extract_features(const ParameterSet<S> &params, const Tensor<S> &lr, int threads = 1) const;

		/// Upsampler alone on B x T x H x W features.
		Tensor<S> upsample(const ParameterSet<S> &params, const Tensor<S> &features) const;

		/// Single example from Cin x H x W planes. With features_only the pass stops at the tap.
		ExampleOutput forward_example(const ParameterSet<S> &params, const S *planes, Index height, Index width, Trace *trace,
									  bool features_only = false) const;

		/// Accumulates parameter gradients given d(sr tokens) and, per MoE layer,
		/// the loss gradient w.r.t. the batch importance vector.
		void backward_example(ParameterSet<S> &params, const Trace &trace, const MatrixR<S> &dsr,
							  const std::vector<Tensor<S>> &dimportance) const;

		/// Mean over MoE layers of the importance loss of each layer's batch importance.
		static S moe_loss_of(const std::vector<Tensor<S>> &importance);

	private:
		MatrixR<S> upsample_tokens(const ParameterSet<S> &params, MatrixR<S> x, Index &height, Index &width, Trace *trace) const;
		MatrixR<S> block_forward(const ParameterSet<S> &params, const Block &block, const MatrixR<S> &x, Index height, Index width,
								 const Tensor<S> *mask, BlockTrace *trace, ExampleOutput &out) const;

		ModelConfig cfg_;
		Conv shallow_, body_conv_, head_;
		std::size_t norm_w_ = 0, norm_b_ = 0;
		std::vector<Block> blocks_;
		std::vector<Conv> group_convs_;
		std::vector<Conv> upsample_convs_;
		std::vector<Index> stages_;
	};

	/// Loss terms for a batch, averaged over examples.
	template <typename S>
	struct BatchLoss
	{
		S total = S(0), ncc = S(0), ssim = S(0), moe = S(0), mse = S(0);
	};

	/// Forward + total loss over a batch. With with_grad, gradients are
	/// accumulated into params (callers zero them first). Examples run on
	/// per-worker gradient buffers reduced in example order, so the result does
	/// not depend on the thread count.
	template <typename S>
	BatchLoss<S> batch_loss(const SrModel<S> &model, ParameterSet<S> &params, const Tensor<S> &lr, const Tensor<S> &hr,
							const LossWeights &weights, bool with_grad, int threads = 1);
} // namespace mose
