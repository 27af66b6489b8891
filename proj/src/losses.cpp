#include "mose/losses.hpp"
#include "mose/ops.hpp"

#include <array>
#include <cmath>

namespace mose
{
	void LossWeights::validate() const
	{
		for (double w : {alpha, beta, gamma, mse})
			if (!(w >= 0.0) || !std::isfinite(w))
				throw InvalidArgument("loss weights must be finite and non-negative");
	}

	void SsimParams::validate() const
	{
		if (window < 1 || window % 2 == 0)
			throw InvalidArgument("ssim: window must be a positive odd size");
		if (!(sigma > 0.0))
			throw InvalidArgument("ssim: sigma must be positive");
		if (!(c1 > 0.0) || !(c2 > 0.0) || !(c3 > 0.0))
			throw InvalidArgument("ssim: stabilizing constants must be positive");
	}

	namespace
	{
		template <typename S>
		using Plane = Eigen::Map<const MatrixR<S>>;

		template <typename S>
		void require_same(const Tensor<S> &a, const Tensor<S> &b, const char *what)
		{
			if (a.shape() != b.shape())
				throw InvalidArgument(std::string(what) + ": shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
		}

		// (channels, height, width) of a rank-2 or rank-3 image tensor.
		template <typename S>
		std::array<Index, 3> image_dims(const Tensor<S> &t, const char *what)
		{
			if (t.rank() == 2)
				return {1, t.dim(0), t.dim(1)};
			if (t.rank() == 3)
				return {t.dim(0), t.dim(1), t.dim(2)};
			throw InvalidArgument(std::string(what) + ": expected H x W or S x H x W, got " + shape_string(t.shape()));
		}

		template <typename S>
		VectorX<S> gaussian_1d(Index window, double sigma)
		{
			VectorX<S> g(window);
			const double half = static_cast<double>(window - 1) / 2.0;
			double total = 0.0;
			std::vector<double> raw(static_cast<std::size_t>(window));
			for (Index i = 0; i < window; ++i)
				total += raw[i] = std::exp(-(i - half) * (i - half) / (2.0 * sigma * sigma));
			for (Index i = 0; i < window; ++i)
				g[i] = static_cast<S>(raw[i] / total);
			return g;
		}

		// Valid-region separable filtering with a symmetric kernel.
		template <typename S>
		MatrixR<S> filter_valid(const MatrixR<S> &in, const VectorX<S> &g)
		{
			const Index w = g.size(), oh = in.rows() - w + 1, ow = in.cols() - w + 1;
			MatrixR<S> tmp = MatrixR<S>::Zero(in.rows(), ow);
			for (Index k = 0; k < w; ++k)
				tmp += g[k] * in.middleCols(k, ow);
			MatrixR<S> out = MatrixR<S>::Zero(oh, ow);
			for (Index k = 0; k < w; ++k)
				out += g[k] * tmp.middleRows(k, oh);
			return out;
		}

		// Adjoint of filter_valid.
		template <typename S>
		MatrixR<S> filter_valid_adjoint(const MatrixR<S> &grad, Index height, Index width, const VectorX<S> &g)
		{
			const Index w = g.size(), oh = grad.rows(), ow = grad.cols();
			MatrixR<S> tmp = MatrixR<S>::Zero(height, ow);
			for (Index k = 0; k < w; ++k)
				tmp.middleRows(k, oh) += g[k] * grad;
			MatrixR<S> out = MatrixR<S>::Zero(height, width);
			for (Index k = 0; k < w; ++k)
				out.middleCols(k, ow) += g[k] * tmp;
			return out;
		}

		// Mirror padding by `pad` on every side (edge sample not repeated).
		template <typename S>
		MatrixR<S> mirror_pad(const MatrixR<S> &in, Index pad)
		{
			const Index h = in.rows(), w = in.cols();
			MatrixR<S> out(h + 2 * pad, w + 2 * pad);
			for (Index y = 0; y < out.rows(); ++y)
				for (Index x = 0; x < out.cols(); ++x)
					out(y, x) = in(reflect_index(y - pad, h), reflect_index(x - pad, w));
			return out;
		}

		// Adjoint of mirror_pad: folds the border back onto its sources.
		template <typename S>
		MatrixR<S> mirror_fold(const MatrixR<S> &grad, Index pad)
		{
			const Index h = grad.rows() - 2 * pad, w = grad.cols() - 2 * pad;
			MatrixR<S> out = MatrixR<S>::Zero(h, w);
			for (Index y = 0; y < grad.rows(); ++y)
				for (Index x = 0; x < grad.cols(); ++x)
					out(reflect_index(y - pad, h), reflect_index(x - pad, w)) += grad(y, x);
			return out;
		}

		// Local Gaussian mean under the configured border rule, and its adjoint.
		template <typename S>
		MatrixR<S> local_mean(const MatrixR<S> &in, const VectorX<S> &g, SsimBorder border)
		{
			return border == SsimBorder::valid ? filter_valid(in, g) : filter_valid(mirror_pad(in, g.size() / 2), g);
		}

		template <typename S>
		MatrixR<S> local_mean_adjoint(const MatrixR<S> &grad, Index height, Index width, const VectorX<S> &g, SsimBorder border)
		{
			if (border == SsimBorder::valid)
				return filter_valid_adjoint(grad, height, width, g);
			const Index pad = g.size() / 2;
			return mirror_fold(filter_valid_adjoint(grad, height + 2 * pad, width + 2 * pad, g), pad);
		}

		template <typename S>
		struct LocalMoments
		{
			MatrixR<S> mx, my, vx, vy, cxy;
		};

		template <typename S>
		LocalMoments<S> local_moments(const MatrixR<S> &x, const MatrixR<S> &y, const VectorX<S> &g, SsimBorder b)
		{
			LocalMoments<S> m;
			m.mx = local_mean(x, g, b);
			m.my = local_mean(y, g, b);
			m.vx = local_mean<S>(x.cwiseProduct(x), g, b) - m.mx.cwiseProduct(m.mx);
			m.vy = local_mean<S>(y.cwiseProduct(y), g, b) - m.my.cwiseProduct(m.my);
			m.cxy = local_mean<S>(x.cwiseProduct(y), g, b) - m.mx.cwiseProduct(m.my);
			return m;
		}

		template <typename S>
		MatrixR<S> ssim_plane(const MatrixR<S> &x, const MatrixR<S> &y, const SsimParams &p)
		{
			const VectorX<S> g = gaussian_1d<S>(p.window, p.sigma);
			const auto m = local_moments(x, y, g, p.border);
			const S c1 = static_cast<S>(p.c1), c2 = static_cast<S>(p.c2), c3 = static_cast<S>(p.c3);
			const auto lum = (S(2) * m.mx.array() * m.my.array() + c1) / (m.mx.array().square() + m.my.array().square() + c1);
			if (p.fused())
				return (lum * (S(2) * m.cxy.array() + c2) / (m.vx.array() + m.vy.array() + c2)).matrix();
			const auto sx = m.vx.array().max(S(0)).sqrt();
			const auto sy = m.vy.array().max(S(0)).sqrt();
			const auto con = (S(2) * sx * sy + c2) / (m.vx.array() + m.vy.array() + c2);
			const auto str = (m.cxy.array() + c3) / (sx * sy + c3);
			// Structure (and luminance, for signed inputs) can go negative; keep the
			// sign so fractional exponents stay real.
			const auto spow = [](const auto &t, double e) {
				return (t.sign() * t.abs().pow(static_cast<S>(e))).eval();
			};
			return (spow(lum, p.delta) * spow(con, p.epsilon) * spow(str, p.eta)).matrix();
		}

		// d mean(ssim map) / d x for the fused form.
		template <typename S>
		MatrixR<S> ssim_plane_grad(const MatrixR<S> &x, const MatrixR<S> &y, const SsimParams &p)
		{
			const VectorX<S> g = gaussian_1d<S>(p.window, p.sigma);
			const auto m = local_moments(x, y, g, p.border);
			const S c1 = static_cast<S>(p.c1), c2 = static_cast<S>(p.c2);
			const auto a1 = (S(2) * m.mx.array() * m.my.array() + c1).eval();
			const auto a2 = (S(2) * m.cxy.array() + c2).eval();
			const auto b1 = (m.mx.array().square() + m.my.array().square() + c1).eval();
			const auto b2 = (m.vx.array() + m.vy.array() + c2).eval();
			const auto ssim = (a1 * a2 / (b1 * b2)).eval();
			const S inv_n = S(1) / static_cast<S>(ssim.size());

			// Partials w.r.t. the filtered moments E[x], E[x^2], E[xy].
			const MatrixR<S> d_ex = (inv_n * ssim * (S(2) * m.my.array() / a1 - S(2) * m.my.array() / a2 - S(2) * m.mx.array() / b1 +
													 S(2) * m.mx.array() / b2))
										.matrix();
			const MatrixR<S> d_exx = (-inv_n * ssim / b2).matrix();
			const MatrixR<S> d_exy = (inv_n * S(2) * ssim / a2).matrix();

			const Index h = x.rows(), w = x.cols();
			MatrixR<S> dx = local_mean_adjoint(d_ex, h, w, g, p.border);
			dx += (S(2) * x.array() * local_mean_adjoint(d_exx, h, w, g, p.border).array()).matrix();
			dx += (y.array() * local_mean_adjoint(d_exy, h, w, g, p.border).array()).matrix();
			return dx;
		}

		template <typename S>
		void check_ssim_input(const Tensor<S> &pred, const Tensor<S> &gt, const SsimParams &p, const char *what)
		{
			require_same(pred, gt, what);
			p.validate();
			const auto [c, h, w] = image_dims(pred, what);
			(void)c;
			if (h < p.window || w < p.window)
				throw InvalidArgument(std::string(what) + ": image " + std::to_string(h) + "x" + std::to_string(w) +
									  " is smaller than the " + std::to_string(p.window) + "x" + std::to_string(p.window) + " window");
		}
	} // namespace

	template <typename S>
	Tensor<S> gaussian_window(Index window, double sigma)
	{
		const VectorX<S> g = gaussian_1d<S>(window, sigma);
		Tensor<S> out({window, window});
		out.matrix() = g * g.transpose();
		return out;
	}

	template <typename S>
	NccStats ncc_stats(const S *pred, const S *gt, Index n)
	{
		Eigen::Map<const VectorX<S>> p(pred, n), g(gt, n);
		const VectorX<S> a = p.array() - p.mean();
		const VectorX<S> b = g.array() - g.mean();
		const double saa = static_cast<double>(a.squaredNorm()), sbb = static_cast<double>(b.squaredNorm());
		const double denom = std::sqrt(saa * sbb);
		return {static_cast<double>(a.dot(b)) / (denom + kNccEpsilon), denom == 0.0};
	}

	template <typename S>
	S ncc_per_channel(const Tensor<S> &pred, const Tensor<S> &gt)
	{
		require_same(pred, gt, "ncc_per_channel");
		if (pred.size() < 2)
			throw InvalidArgument("ncc_per_channel: need at least 2 pixels");
		return static_cast<S>(ncc_stats(pred.data(), gt.data(), pred.size()).value);
	}

	template <typename S>
	S ncc_loss(const Tensor<S> &pred, const Tensor<S> &gt)
	{
		require_same(pred, gt, "ncc_loss");
		const auto [c, h, w] = image_dims(pred, "ncc_loss");
		double total = 0.0;
		for (Index s = 0; s < c; ++s)
			total += ncc_stats(pred.data() + s * h * w, gt.data() + s * h * w, h * w).value;
		return static_cast<S>(1.0 - 0.5 * (total / static_cast<double>(c) + 1.0));
	}

	template <typename S>
	Tensor<S> ncc_loss_backward(const Tensor<S> &pred, const Tensor<S> &gt)
	{
		require_same(pred, gt, "ncc_loss");
		const auto [c, h, w] = image_dims(pred, "ncc_loss");
		const Index n = h * w;
		Tensor<S> grad(pred.shape());
		const S dncc = S(-0.5) / static_cast<S>(c);
		for (Index s = 0; s < c; ++s)
		{
			Eigen::Map<const VectorX<S>> p(pred.data() + s * n, n), g(gt.data() + s * n, n);
			Eigen::Map<VectorX<S>> d(grad.data() + s * n, n);
			const VectorX<S> a = p.array() - p.mean();
			const VectorX<S> b = g.array() - g.mean();
			const S saa = a.squaredNorm(), sbb = b.squaredNorm(), sab = a.dot(b);
			const S root = std::sqrt(saa * sbb);
			const S denom = root + static_cast<S>(kNccEpsilon);
			// Centering terms vanish because a and b sum to zero.
			d = b / denom;
			if (root > S(0))
				d -= (sab * sbb / (root * denom * denom)) * a;
			d *= dncc;
		}
		return grad;
	}

	template <typename S>
	Tensor<S> ssim_map(const Tensor<S> &pred, const Tensor<S> &gt, const SsimParams &params)
	{
		check_ssim_input(pred, gt, params, "ssim_map");
		const auto [c, h, w] = image_dims(pred, "ssim_map");
		if (c != 1)
			throw InvalidArgument("ssim_map: expects a single plane");
		const MatrixR<S> m = ssim_plane<S>(Plane<S>(pred.data(), h, w), Plane<S>(gt.data(), h, w), params);
		return Tensor<S>({m.rows(), m.cols()}, std::vector<S>(m.data(), m.data() + m.size()));
	}

	template <typename S>
	S ssim_per_channel(const Tensor<S> &pred, const Tensor<S> &gt, const SsimParams &params)
	{
		check_ssim_input(pred, gt, params, "ssim_per_channel");
		const auto [c, h, w] = image_dims(pred, "ssim_per_channel");
		if (c != 1)
			throw InvalidArgument("ssim_per_channel: expects a single plane");
		return ssim_plane<S>(Plane<S>(pred.data(), h, w), Plane<S>(gt.data(), h, w), params).mean();
	}

	template <typename S>
	S ssim_loss(const Tensor<S> &pred, const Tensor<S> &gt, const SsimParams &params)
	{
		check_ssim_input(pred, gt, params, "ssim_loss");
		const auto [c, h, w] = image_dims(pred, "ssim_loss");
		S total = 0;
		for (Index s = 0; s < c; ++s)
			total += S(1) - ssim_plane<S>(Plane<S>(pred.data() + s * h * w, h, w), Plane<S>(gt.data() + s * h * w, h, w), params).mean();
		return total / static_cast<S>(c);
	}

	template <typename S>
	Tensor<S> ssim_loss_backward(const Tensor<S> &pred, const Tensor<S> &gt, const SsimParams &params)
	{
		check_ssim_input(pred, gt, params, "ssim_loss");
		if (!params.fused())
			throw InvalidArgument("ssim_loss_backward: gradient implemented for unit exponents with C3 = C2/2 only");
		const auto [c, h, w] = image_dims(pred, "ssim_loss");
		Tensor<S> grad(pred.shape());
		for (Index s = 0; s < c; ++s)
		{
			const MatrixR<S> d = ssim_plane_grad<S>(Plane<S>(pred.data() + s * h * w, h, w), Plane<S>(gt.data() + s * h * w, h, w), params);
			Eigen::Map<MatrixR<S>>(grad.data() + s * h * w, h, w) = -d / static_cast<S>(c);
		}
		return grad;
	}

	template <typename S>
	S mse_loss(const Tensor<S> &pred, const Tensor<S> &gt)
	{
		require_same(pred, gt, "mse_loss");
		if (pred.size() == 0)
			throw InvalidArgument("mse_loss: empty input");
		return (pred.flat() - gt.flat()).squaredNorm() / static_cast<S>(pred.size());
	}

	template <typename S>
	Tensor<S> mse_loss_backward(const Tensor<S> &pred, const Tensor<S> &gt)
	{
		require_same(pred, gt, "mse_loss");
		Tensor<S> grad(pred.shape());
		grad.flat() = (S(2) / static_cast<S>(pred.size())) * (pred.flat() - gt.flat());
		return grad;
	}

	template <typename S>
	LossBreakdown<S> total_loss(const Tensor<S> &pred, const Tensor<S> &gt, S moe_loss, const LossWeights &weights)
	{
		weights.validate();
		require_same(pred, gt, "total_loss");
		LossBreakdown<S> out;
		const auto [c, h, w] = image_dims(pred, "total_loss");
		double ncc_sum = 0.0;
		for (Index s = 0; s < c; ++s)
		{
			const NccStats st = ncc_stats(pred.data() + s * h * w, gt.data() + s * h * w, h * w);
			ncc_sum += st.value;
			out.degenerate_ncc_channels += st.degenerate ? 1 : 0;
		}
		out.ncc = static_cast<S>(1.0 - 0.5 * (ncc_sum / static_cast<double>(c) + 1.0));
		if (weights.beta > 0.0)
			out.ssim = ssim_loss(pred, gt, SsimParams{.border = weights.ssim_border});
		if (weights.mse > 0.0)
			out.mse = mse_loss(pred, gt);
		out.moe = moe_loss;
		out.total = static_cast<S>(weights.alpha) * out.ncc + static_cast<S>(weights.beta) * out.ssim +
					static_cast<S>(weights.gamma) * out.moe + static_cast<S>(weights.mse) * out.mse;
		return out;
	}

	template <typename S>
	Tensor<S> total_loss_backward(const Tensor<S> &pred, const Tensor<S> &gt, const LossWeights &weights)
	{
		Tensor<S> grad(pred.shape());
		if (weights.alpha > 0.0)
			grad.flat() += static_cast<S>(weights.alpha) * ncc_loss_backward(pred, gt).flat();
		if (weights.beta > 0.0)
			grad.flat() += static_cast<S>(weights.beta) * ssim_loss_backward(pred, gt, SsimParams{.border = weights.ssim_border}).flat();
		if (weights.mse > 0.0)
			grad.flat() += static_cast<S>(weights.mse) * mse_loss_backward(pred, gt).flat();
		return grad;
	}

#define MOSE_INSTANTIATE_LOSSES(S)                                                                             \
	template Tensor<S> gaussian_window<S>(Index, double);                                                      \
	template NccStats ncc_stats<S>(const S *, const S *, Index);                                               \
	template S ncc_per_channel<S>(const Tensor<S> &, const Tensor<S> &);                                       \
	template S ncc_loss<S>(const Tensor<S> &, const Tensor<S> &);                                              \
	template Tensor<S> ncc_loss_backward<S>(const Tensor<S> &, const Tensor<S> &);                             \
	template Tensor<S> ssim_map<S>(const Tensor<S> &, const Tensor<S> &, const SsimParams &);                  \
	template S ssim_per_channel<S>(const Tensor<S> &, const Tensor<S> &, const SsimParams &);                  \
	template S ssim_loss<S>(const Tensor<S> &, const Tensor<S> &, const SsimParams &);                         \
	template Tensor<S> ssim_loss_backward<S>(const Tensor<S> &, const Tensor<S> &, const SsimParams &);        \
	template S mse_loss<S>(const Tensor<S> &, const Tensor<S> &);                                              \
	template Tensor<S> mse_loss_backward<S>(const Tensor<S> &, const Tensor<S> &);                             \
	template LossBreakdown<S> total_loss<S>(const Tensor<S> &, const Tensor<S> &, S, const LossWeights &);      \
	template Tensor<S> total_loss_backward<S>(const Tensor<S> &, const Tensor<S> &, const LossWeights &);

	MOSE_INSTANTIATE_LOSSES(float)
	MOSE_INSTANTIATE_LOSSES(double)
} // namespace mose
