#pragma once

#include "mose/ops.hpp"
#include "mose/parameters.hpp"
#include "mose/rng.hpp"

#include <string>
#include <vector>

namespace mose
{
	struct AttentionConfig
	{
		Index channels = 90;
		Index heads = 6;
		Index window = 8;
		bool pe_rpe = true;
		bool pe_logcpb = false;
		bool pe_lepe = true;
		Index shift = 0;
		Index cpb_hidden = 256;
		// Scaled cosine attention with learnable per-head temperature; false
		// selects plain q.k / sqrt(d) logits.
		bool cosine = true;

		Index head_dim() const { return channels / heads; }
		Index tokens() const { return window * window; }
		void validate() const;
	};

	/// Lower bound on the cosine-attention temperature.
	inline constexpr double kMinTemperature = 0.01;
	inline constexpr double kInitTemperature = 0.07;
	/// Additive logit for query/key pairs that straddle a shifted-window seam.
	inline constexpr double kMaskLogit = -100.0;

	/// B x H x W x C -> (B * H/M * W/M) x M^2 x C, windows in raster order per example.
	template <typename S>
	Tensor<S> window_partition(const Tensor<S> &x, Index window);

	/// Inverse of window_partition for a B x H x W x C layout.
	template <typename S>
	Tensor<S> window_reverse(const Tensor<S> &windows, Index window, Index height, Index width);

	/// Toroidal roll by (-shift, -shift) over the H and W axes of B x H x W x C.
	template <typename S>
	Tensor<S> cyclic_shift(const Tensor<S> &x, Index shift);

	/// Roll by (+shift, +shift); exact inverse of cyclic_shift.
	template <typename S>
	Tensor<S> cyclic_unshift(const Tensor<S> &x, Index shift);

	/// Per-window additive mask (nW x M^2 x M^2) for a shifted H x W grid:
	/// 0 for pairs from the same pre-shift region, kMaskLogit otherwise.
	template <typename S>
	Tensor<S> shifted_window_mask(Index height, Index width, Index window, Index shift);

	/// For each (query i, key j) of an M x M window, the row of the
	/// (2M-1)^2 relative-offset table holding offset pos_i - pos_j.
	std::vector<Index> relative_position_index(Index window);

	/// Gathers a (2M-1)^2 x h table into an h x M^2 x M^2 bias.
	template <typename S>
	Tensor<S> rpe_gather(const Tensor<S> &table, Index window);

	/// (2M-1)^2 x 2 log-spaced coordinates sign(t) log2(1+|t|) / log2(8), t = 8 d / (M-1).
	template <typename S>
	Tensor<S> logcpb_coords(Index window);

	/// Two-layer perceptron bias: relu(coords W1^T + b1) W2^T, gathered to h x M^2 x M^2.
	template <typename S>
	Tensor<S> logcpb_bias(const Tensor<S> &fc1_weight, const Tensor<S> &fc1_bias, const Tensor<S> &fc2_weight, Index window);

	/// Multi-head self-attention inside M x M windows with composable positional
	/// encodings. Parameters live under "<prefix>.{qkv,proj,tau,rpe,lepe,cpb.*}".
	template <typename S>
	class WindowAttention
	{
	public:
		struct Cache
		{
			MatrixR<S> x;
			MatrixR<S> qkv;
			MatrixR<S> qn, kn;			// normalized (cosine) or raw q, k
			MatrixR<S> qnorm, knorm;	// rows x heads
			MatrixR<S> attn;			// (windows * heads * M^2) x M^2
			MatrixR<S> heads_out;		// concatenated head outputs before projection
			std::vector<S> scale;		// per-head logit multiplier
			Tensor<S> cpb_hidden_pre;	// (2M-1)^2 x hidden, pre-ReLU
		};

		WindowAttention() = default;
		WindowAttention(const AttentionConfig &cfg, const std::string &prefix, ParameterSet<S> &params, Rng &rng);

		const AttentionConfig &config() const { return cfg_; }

		/// windows: (nW * M^2) x C. mask (optional): nWm x M^2 x M^2, applied to
		/// window w as mask[w % nWm].
		MatrixR<S> forward(const ParameterSet<S> &params, const MatrixR<S> &windows, const Tensor<S> *mask, Cache *cache) const;

		/// Accumulates parameter gradients into params; returns d(windows).
		MatrixR<S> backward(ParameterSet<S> &params, const Cache &cache, const Tensor<S> *mask, const MatrixR<S> &dy) const;

		/// Sum of the enabled per-head biases (RPE, log-CPB), h x M^2 x M^2.
		Tensor<S> position_bias(const ParameterSet<S> &params, Cache *cache) const;

	private:
		AttentionConfig cfg_;
		std::size_t qkv_w_ = 0, qkv_b_ = 0, proj_w_ = 0, proj_b_ = 0, tau_ = 0;
		std::size_t rpe_ = 0, lepe_ = 0, cpb_w1_ = 0, cpb_b1_ = 0, cpb_w2_ = 0;
		std::vector<Index> rel_index_;
	};

	/// Free-function form over an nW x M^2 x C tensor.
	template <typename S>
	Tensor<S> window_attention(const Tensor<S> &windows, const WindowAttention<S> &layer, const ParameterSet<S> &params, const Tensor<S> *mask);
} // namespace mose
