#include "mose/metrics.hpp"

#include <cmath>

namespace mose
{
	template <typename S>
	double psnr(const Tensor<S> &pred, const Tensor<S> &gt)
	{
		const double mse = static_cast<double>(mse_loss(pred.template cast<double>(), gt.template cast<double>()));
		if (mse == 0.0)
			return std::numeric_limits<double>::infinity();
		return -10.0 * std::log10(mse);
	}

	template <typename S>
	double ssim_metric(const Tensor<S> &pred, const Tensor<S> &gt)
	{
		return 1.0 - static_cast<double>(ssim_loss(pred, gt));
	}

	template <typename S>
	double ncc_metric(const Tensor<S> &pred, const Tensor<S> &gt)
	{
		// L_NCC = (1 - NCC) / 2
		return 1.0 - 2.0 * static_cast<double>(ncc_loss(pred.template cast<double>(), gt.template cast<double>()));
	}

	double cubic_kernel(double t, double a)
	{
		t = std::abs(t);
		if (t <= 1.0)
			return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
		if (t < 2.0)
			return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
		return 0.0;
	}

	namespace
	{
		struct Taps
		{
			Index index[4];
			double weight[4];
		};

		std::vector<Taps> axis_taps(Index in, Index out, Scale scale)
		{
			std::vector<Taps> taps(static_cast<std::size_t>(out));
			const double inv = static_cast<double>(scale.den) / static_cast<double>(scale.num);
			for (Index o = 0; o < out; ++o)
			{
				const double src = (static_cast<double>(o) + 0.5) * inv - 0.5;
				const double base = std::floor(src);
				double total = 0.0;
				for (int k = 0; k < 4; ++k)
				{
					const double pos = base - 1.0 + k;
					taps[o].index[k] = std::clamp<Index>(static_cast<Index>(pos), 0, in - 1);
					total += taps[o].weight[k] = cubic_kernel(src - pos);
				}
				for (double &w : taps[o].weight)
					w /= total;
			}
			return taps;
		}
	} // namespace

	template <typename S>
	Tensor<S> bicubic_resize(const Tensor<S> &img, Scale scale)
	{
		if (scale.num < 1 || scale.den < 1)
			throw InvalidArgument("bicubic_resize: scale must be a positive ratio");
		if (img.rank() != 2 && img.rank() != 3)
			throw InvalidArgument("bicubic_resize: expected H x W or S x H x W, got " + shape_string(img.shape()));
		const bool planar = img.rank() == 3;
		const Index c = planar ? img.dim(0) : 1;
		const Index h = img.dim(planar ? 1 : 0), w = img.dim(planar ? 2 : 1);
		const Index oh = h * scale.num / scale.den, ow = w * scale.num / scale.den;
		if (oh < 1 || ow < 1)
			throw InvalidArgument("bicubic_resize: output would be " + std::to_string(oh) + "x" + std::to_string(ow));

		const auto ty = axis_taps(h, oh, scale), tx = axis_taps(w, ow, scale);
		Tensor<S> out(planar ? Shape{c, oh, ow} : Shape{oh, ow});
		std::vector<double> rows(static_cast<std::size_t>(h * ow));
		for (Index s = 0; s < c; ++s)
		{
			const S *src = img.data() + s * h * w;
			for (Index y = 0; y < h; ++y)
				for (Index x = 0; x < ow; ++x)
				{
					double acc = 0.0;
					for (int k = 0; k < 4; ++k)
						acc += tx[x].weight[k] * static_cast<double>(src[y * w + tx[x].index[k]]);
					rows[y * ow + x] = acc;
				}
			S *dst = out.data() + s * oh * ow;
			for (Index y = 0; y < oh; ++y)
				for (Index x = 0; x < ow; ++x)
				{
					double acc = 0.0;
					for (int k = 0; k < 4; ++k)
						acc += ty[y].weight[k] * rows[ty[y].index[k] * ow + x];
					dst[y * ow + x] = static_cast<S>(acc);
				}
		}
		return out;
	}

#define MOSE_INSTANTIATE_METRICS(S)                                      \
	template double psnr<S>(const Tensor<S> &, const Tensor<S> &);        \
	template double ssim_metric<S>(const Tensor<S> &, const Tensor<S> &); \
	template double ncc_metric<S>(const Tensor<S> &, const Tensor<S> &);  \
	template Tensor<S> bicubic_resize<S>(const Tensor<S> &, Scale);

	MOSE_INSTANTIATE_METRICS(float)
	MOSE_INSTANTIATE_METRICS(double)
} // namespace mose
