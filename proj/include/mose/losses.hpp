#pragma once

#include "mose/tensor.hpp"

namespace mose
{
	enum class SsimBorder
	{
		reflect, // same-size map, image mirrored by window/2 for the local moments
		valid	 // only positions where the whole window fits
	};

	struct LossWeights
	{
		double alpha = 1.0; // NCC
		double beta = 1.0;	// SSIM
		double gamma = 0.1; // MoE importance balance
		double mse = 0.0;	// ablation only
		// Border handling of the SSIM term. Valid-only SSIM leaves the outer
		// window/2 pixels tied to the loss through NCC alone, which is blind
		// to per-band gain and offset, so training defaults to reflect.
		SsimBorder ssim_border = SsimBorder::reflect;
		void validate() const;
	};

	/// Windowed SSIM settings on data with dynamic range 1.
	struct SsimParams
	{
		Index window = 11;
		SsimBorder border = SsimBorder::valid;
		double sigma = 1.5;
		double c1 = 0.01 * 0.01;
		double c2 = 0.03 * 0.03;
		double c3 = 0.03 * 0.03 / 2.0;
		double delta = 1.0, epsilon = 1.0, eta = 1.0;

		/// Unit exponents with C3 = C2/2: the luminance x contrast-structure product form.
		bool fused() const { return delta == 1.0 && epsilon == 1.0 && eta == 1.0 && c3 == c2 / 2.0; }
		void validate() const;
	};

	/// Denominator guard of the correlation coefficient.
	inline constexpr double kNccEpsilon = 1e-8;

	/// Normalized window x window Gaussian weights (row-major).
	template <typename S>
	Tensor<S> gaussian_window(Index window, double sigma);

	struct NccStats
	{
		double value = 0.0;
		bool degenerate = false; // one of the inputs had zero variance
	};

	/// Pearson correlation of two equally-shaped planes.
	template <typename S>
	S ncc_per_channel(const Tensor<S> &pred, const Tensor<S> &gt);

	template <typename S>
	NccStats ncc_stats(const S *pred, const S *gt, Index n);

	/// 1 - (mean channel NCC + 1) / 2 over S x H x W inputs.
	template <typename S>
	S ncc_loss(const Tensor<S> &pred, const Tensor<S> &gt);

	template <typename S>
	Tensor<S> ncc_loss_backward(const Tensor<S> &pred, const Tensor<S> &gt);

	/// Per-position SSIM index: H x W with reflect borders, (H-w+1) x (W-w+1) when valid.
	template <typename S>
	Tensor<S> ssim_map(const Tensor<S> &pred, const Tensor<S> &gt, const SsimParams &params = {});

	/// Mean of ssim_map.
	template <typename S>
	S ssim_per_channel(const Tensor<S> &pred, const Tensor<S> &gt, const SsimParams &params = {});

	/// Mean over channels of 1 - SSIM.
	template <typename S>
	S ssim_loss(const Tensor<S> &pred, const Tensor<S> &gt, const SsimParams &params = {});

	/// Gradient w.r.t. pred; requires params.fused().
	template <typename S>
	Tensor<S> ssim_loss_backward(const Tensor<S> &pred, const Tensor<S> &gt, const SsimParams &params = {});

	template <typename S>
	S mse_loss(const Tensor<S> &pred, const Tensor<S> &gt);

	template <typename S>
	Tensor<S> mse_loss_backward(const Tensor<S> &pred, const Tensor<S> &gt);

	template <typename S>
	struct LossBreakdown
	{
		S total = 0, ncc = 0, ssim = 0, moe = 0, mse = 0;
		Index degenerate_ncc_channels = 0;
	};

	/// alpha L_NCC + beta L_SSIM + gamma L_MoE (+ mse L_MSE) for one S x H x W prediction.
	template <typename S>
	LossBreakdown<S> total_loss(const Tensor<S> &pred, const Tensor<S> &gt, S moe_loss, const LossWeights &weights);

	/// d(total - gamma L_MoE)/d pred.
	template <typename S>
	Tensor<S> total_loss_backward(const Tensor<S> &pred, const Tensor<S> &gt, const LossWeights &weights);
} // namespace mose
