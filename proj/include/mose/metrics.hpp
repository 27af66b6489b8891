#pragma once

#include "mose/losses.hpp"

#include <limits>

namespace mose
{
	/// 10 log10(1 / MSE) over all channels jointly, for data in [0, 1].
	/// Identical inputs give +infinity.
	template <typename S>
	double psnr(const Tensor<S> &pred, const Tensor<S> &gt);

	/// Channel mean of windowed SSIM with default parameters.
	template <typename S>
	double ssim_metric(const Tensor<S> &pred, const Tensor<S> &gt);

	/// Channel mean of the correlation coefficient.
	template <typename S>
	double ncc_metric(const Tensor<S> &pred, const Tensor<S> &gt);

	/// Positive rational resampling factor num / den.
	struct Scale
	{
		Index num = 1;
		Index den = 1;
		double value() const { return static_cast<double>(num) / static_cast<double>(den); }
	};

	/// Keys cubic convolution kernel; a = -0.5 is Catmull-Rom.
	double cubic_kernel(double t, double a = -0.5);

	/// Separable Catmull-Rom resampling of an H x W or S x H x W image with
	/// edge-clamped taps; pixel centers map as (dst + 0.5) / scale - 0.5.
	template <typename S>
	Tensor<S> bicubic_resize(const Tensor<S> &img, Scale scale);
} // namespace mose
