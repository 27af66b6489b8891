#include "mose/ops.hpp"

#include <cmath>
#include <numbers>

namespace mose
{
	namespace
	{
		constexpr double kLayerNormEps = 1e-5;

		// Weight [Cout, Cin, 3, 3] -> Cout x (9*Cin) with column tap*Cin + ci.
		template <typename S>
		MatrixR<S> tap_major(const Tensor<S> &weight)
		{
			const Index cout = weight.dim(0), cin = weight.dim(1);
			MatrixR<S> w(cout, 9 * cin);
			for (Index o = 0; o < cout; ++o)
				for (Index ci = 0; ci < cin; ++ci)
					for (Index t = 0; t < 9; ++t)
						w(o, t * cin + ci) = weight[(o * cin + ci) * 9 + t];
			return w;
		}

		template <typename S>
		MatrixR<S> im2col(const MatrixR<S> &x, Index height, Index width)
		{
			const Index cin = x.cols();
			MatrixR<S> cols(height * width, 9 * cin);
			for (Index y = 0; y < height; ++y)
				for (Index xx = 0; xx < width; ++xx)
				{
					S *dst = cols.data() + (y * width + xx) * 9 * cin;
					for (Index ky = 0; ky < 3; ++ky)
					{
						const Index sy = y + ky - 1;
						for (Index kx = 0; kx < 3; ++kx, dst += cin)
						{
							const Index sx = xx + kx - 1;
							if (sy < 0 || sy >= height || sx < 0 || sx >= width)
								std::fill(dst, dst + cin, S(0));
							else
								std::copy_n(x.data() + (sy * width + sx) * cin, cin, dst);
						}
					}
				}
			return cols;
		}

		template <typename S>
		void check_conv(const MatrixR<S> &x, Index height, Index width, const Tensor<S> &weight)
		{
			if (weight.rank() != 4 || weight.dim(2) != 3 || weight.dim(3) != 3)
				throw InvalidArgument("conv3x3: weight must be [Cout, Cin, 3, 3], got " + shape_string(weight.shape()));
			if (x.rows() != height * width || x.cols() != weight.dim(1))
				throw InvalidArgument("conv3x3: input " + std::to_string(x.rows()) + "x" + std::to_string(x.cols()) +
									  " does not match grid " + std::to_string(height) + "x" + std::to_string(width) +
									  " with " + std::to_string(weight.dim(1)) + " channels");
		}
	} // namespace

	template <typename S>
	MatrixR<S> linear_forward(const MatrixR<S> &x, const Tensor<S> &weight, const Tensor<S> *bias)
	{
		const Index out = weight.dim(0), in = weight.dim(1);
		if (x.cols() != in)
			throw InvalidArgument("linear: input has " + std::to_string(x.cols()) + " features, weight expects " + std::to_string(in));
		MatrixR<S> y = x * weight.matrix(out, in).transpose();
		if (bias)
			y.rowwise() += bias->matrix(1, out).row(0);
		return y;
	}

	template <typename S>
	MatrixR<S> linear_backward(const MatrixR<S> &x, const Tensor<S> &weight, const MatrixR<S> &dy,
							   Tensor<S> &dweight, Tensor<S> *dbias)
	{
		const Index out = weight.dim(0), in = weight.dim(1);
		dweight.matrix(out, in).noalias() += dy.transpose() * x;
		if (dbias)
			dbias->matrix(1, out) += dy.colwise().sum();
		return dy * weight.matrix(out, in);
	}

	template <typename S>
	MatrixR<S> layer_norm_forward(const MatrixR<S> &x, const Tensor<S> &gamma, const Tensor<S> &beta, LayerNormCache<S> &cache)
	{
		const Index c = x.cols();
		const VectorX<S> mean = x.rowwise().mean();
		cache.xhat = x.colwise() - mean;
		const VectorX<S> var = cache.xhat.array().square().rowwise().sum() / static_cast<S>(c);
		cache.inv_std = (var.array() + static_cast<S>(kLayerNormEps)).rsqrt();
		cache.xhat = cache.inv_std.asDiagonal() * cache.xhat;
		MatrixR<S> y = cache.xhat * gamma.matrix(c, 1).asDiagonal();
		y.rowwise() += beta.matrix(1, c).row(0);
		return y;
	}

	template <typename S>
	MatrixR<S> layer_norm_backward(const LayerNormCache<S> &cache, const Tensor<S> &gamma, const MatrixR<S> &dy,
								   Tensor<S> &dgamma, Tensor<S> &dbeta)
	{
		const Index c = dy.cols();
		dgamma.matrix(1, c) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
		dbeta.matrix(1, c) += dy.colwise().sum();
		const MatrixR<S> dxhat = dy * gamma.matrix(c, 1).asDiagonal();
		const VectorX<S> mean_d = dxhat.rowwise().mean();
		const VectorX<S> mean_dx = (dxhat.array() * cache.xhat.array()).rowwise().mean();
		MatrixR<S> dx = dxhat.colwise() - mean_d;
		dx -= mean_dx.asDiagonal() * cache.xhat;
		return cache.inv_std.asDiagonal() * dx;
	}

	template <typename S>
	MatrixR<S> gelu(const MatrixR<S> &x)
	{
		const S r2 = static_cast<S>(std::numbers::sqrt2);
		return x.unaryExpr([r2](S v) { return S(0.5) * v * (S(1) + std::erf(v / r2)); });
	}

	template <typename S>
	MatrixR<S> gelu_backward(const MatrixR<S> &x, const MatrixR<S> &dy)
	{
		const S r2 = static_cast<S>(std::numbers::sqrt2);
		const S inv_sqrt_2pi = static_cast<S>(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
		const MatrixR<S> d = x.unaryExpr([=](S v) {
			return S(0.5) * (S(1) + std::erf(v / r2)) + v * inv_sqrt_2pi * std::exp(S(-0.5) * v * v);
		});
		return dy.cwiseProduct(d);
	}

	template <typename S>
	MatrixR<S> conv3x3_forward(const MatrixR<S> &x, Index height, Index width, const Tensor<S> &weight, const Tensor<S> &bias)
	{
		check_conv(x, height, width, weight);
		const Index cout = weight.dim(0);
		MatrixR<S> y = im2col(x, height, width) * tap_major(weight).transpose();
		y.rowwise() += bias.matrix(1, cout).row(0);
		return y;
	}

	template <typename S>
	MatrixR<S> conv3x3_backward(const MatrixR<S> &x, Index height, Index width, const Tensor<S> &weight, const MatrixR<S> &dy,
								Tensor<S> &dweight, Tensor<S> &dbias)
	{
		check_conv(x, height, width, weight);
		const Index cout = weight.dim(0), cin = weight.dim(1);
		const MatrixR<S> cols = im2col(x, height, width);
		const MatrixR<S> dw = dy.transpose() * cols;
		for (Index o = 0; o < cout; ++o)
			for (Index ci = 0; ci < cin; ++ci)
				for (Index t = 0; t < 9; ++t)
					dweight[(o * cin + ci) * 9 + t] += dw(o, t * cin + ci);
		dbias.matrix(1, cout) += dy.colwise().sum();

		const MatrixR<S> dcols = dy * tap_major(weight);
		MatrixR<S> dx = MatrixR<S>::Zero(x.rows(), cin);
		for (Index y = 0; y < height; ++y)
			for (Index xx = 0; xx < width; ++xx)
			{
				const Index p = y * width + xx;
				for (Index ky = 0; ky < 3; ++ky)
				{
					const Index sy = y + ky - 1;
					if (sy < 0 || sy >= height)
						continue;
					for (Index kx = 0; kx < 3; ++kx)
					{
						const Index sx = xx + kx - 1;
						if (sx < 0 || sx >= width)
							continue;
						dx.row(sy * width + sx) += dcols.block(p, (ky * 3 + kx) * cin, 1, cin);
					}
				}
			}
		return dx;
	}

	Index reflect_index(Index i, Index n)
	{
		if (n <= 1)
			return 0;
		const Index period = 2 * (n - 1);
		i %= period;
		if (i < 0)
			i += period;
		return i < n ? i : period - i;
	}

	template <typename S>
	MatrixR<S> pad_reflect(const MatrixR<S> &x, Index height, Index width, Index out_height, Index out_width)
	{
		if (x.rows() != height * width || out_height < height || out_width < width)
			throw InvalidArgument("pad_reflect: bad geometry");
		MatrixR<S> y(out_height * out_width, x.cols());
		for (Index r = 0; r < out_height; ++r)
			for (Index c = 0; c < out_width; ++c)
				y.row(r * out_width + c) = x.row(reflect_index(r, height) * width + reflect_index(c, width));
		return y;
	}

	template <typename S>
	MatrixR<S> crop(const MatrixR<S> &x, Index height, Index width, Index out_height, Index out_width)
	{
		if (x.rows() != height * width || out_height > height || out_width > width)
			throw InvalidArgument("crop: bad geometry");
		MatrixR<S> y(out_height * out_width, x.cols());
		for (Index r = 0; r < out_height; ++r)
			y.middleRows(r * out_width, out_width) = x.middleRows(r * width, out_width);
		return y;
	}

	template <typename S>
	MatrixR<S> crop_backward(const MatrixR<S> &dy, Index height, Index width, Index out_height, Index out_width)
	{
		MatrixR<S> dx = MatrixR<S>::Zero(height * width, dy.cols());
		for (Index r = 0; r < out_height; ++r)
			dx.middleRows(r * width, out_width) = dy.middleRows(r * out_width, out_width);
		return dx;
	}

	template <typename S>
	MatrixR<S> depth_to_space(const MatrixR<S> &x, Index height, Index width, Index r)
	{
		if (r < 1 || x.cols() % (r * r) != 0 || x.rows() != height * width)
			throw InvalidArgument("depth_to_space: channels must be divisible by r^2");
		const Index c = x.cols() / (r * r);
		const Index out_w = width * r;
		MatrixR<S> y(height * width * r * r, c);
		for (Index yy = 0; yy < height; ++yy)
			for (Index xx = 0; xx < width; ++xx)
				for (Index i = 0; i < r; ++i)
					for (Index j = 0; j < r; ++j)
					{
						auto dst = y.row((yy * r + i) * out_w + xx * r + j);
						const auto src = x.row(yy * width + xx);
						for (Index ch = 0; ch < c; ++ch)
							dst(ch) = src(ch * r * r + i * r + j);
					}
		return y;
	}

	template <typename S>
	MatrixR<S> space_to_depth(const MatrixR<S> &y, Index height, Index width, Index r)
	{
		const Index c = y.cols();
		const Index out_w = width * r;
		MatrixR<S> x(height * width, c * r * r);
		for (Index yy = 0; yy < height; ++yy)
			for (Index xx = 0; xx < width; ++xx)
				for (Index i = 0; i < r; ++i)
					for (Index j = 0; j < r; ++j)
					{
						const auto src = y.row((yy * r + i) * out_w + xx * r + j);
						auto dst = x.row(yy * width + xx);
						for (Index ch = 0; ch < c; ++ch)
							dst(ch * r * r + i * r + j) = src(ch);
					}
		return x;
	}

	template <typename S>
	Tensor<S> depth_to_space(const Tensor<S> &x, Index r)
	{
		require_rank(x, 4, "depth_to_space");
		const Index b = x.dim(0), cr = x.dim(1), h = x.dim(2), w = x.dim(3);
		if (r < 1 || cr % (r * r) != 0)
			throw InvalidArgument("depth_to_space: channels " + std::to_string(cr) + " not divisible by r^2");
		const Index c = cr / (r * r);
		Tensor<S> y({b, c, h * r, w * r});
		for (Index n = 0; n < b; ++n)
			for (Index ch = 0; ch < c; ++ch)
				for (Index i = 0; i < r; ++i)
					for (Index j = 0; j < r; ++j)
						for (Index yy = 0; yy < h; ++yy)
							for (Index xx = 0; xx < w; ++xx)
								y(n, ch, yy * r + i, xx * r + j) = x(n, ch * r * r + i * r + j, yy, xx);
		return y;
	}

	template <typename S>
	MatrixR<S> planes_to_tokens(const S *planes, Index channels, Index height, Index width)
	{
		Eigen::Map<const MatrixR<S>> m(planes, channels, height * width);
		return m.transpose();
	}

	template <typename S>
	void tokens_to_planes(const MatrixR<S> &tokens, S *planes)
	{
		Eigen::Map<MatrixR<S>> m(planes, tokens.cols(), tokens.rows());
		m = tokens.transpose();
	}

#define MOSE_INSTANTIATE_OPS(S)                                                                                              \
	template MatrixR<S> linear_forward<S>(const MatrixR<S> &, const Tensor<S> &, const Tensor<S> *);                        \
	template MatrixR<S> linear_backward<S>(const MatrixR<S> &, const Tensor<S> &, const MatrixR<S> &, Tensor<S> &,          \
										   Tensor<S> *);                                                                     \
	template MatrixR<S> layer_norm_forward<S>(const MatrixR<S> &, const Tensor<S> &, const Tensor<S> &, LayerNormCache<S> &); \
	template MatrixR<S> layer_norm_backward<S>(const LayerNormCache<S> &, const Tensor<S> &, const MatrixR<S> &, Tensor<S> &, \
											   Tensor<S> &);                                                                 \
	template MatrixR<S> gelu<S>(const MatrixR<S> &);                                                                         \
	template MatrixR<S> gelu_backward<S>(const MatrixR<S> &, const MatrixR<S> &);                                            \
	template MatrixR<S> conv3x3_forward<S>(const MatrixR<S> &, Index, Index, const Tensor<S> &, const Tensor<S> &);          \
	template MatrixR<S> conv3x3_backward<S>(const MatrixR<S> &, Index, Index, const Tensor<S> &, const MatrixR<S> &,         \
											Tensor<S> &, Tensor<S> &);                                                       \
	template MatrixR<S> pad_reflect<S>(const MatrixR<S> &, Index, Index, Index, Index);                                      \
	template MatrixR<S> crop<S>(const MatrixR<S> &, Index, Index, Index, Index);                                             \
	template MatrixR<S> crop_backward<S>(const MatrixR<S> &, Index, Index, Index, Index);                                    \
	template MatrixR<S> depth_to_space<S>(const MatrixR<S> &, Index, Index, Index);                                          \
	template MatrixR<S> space_to_depth<S>(const MatrixR<S> &, Index, Index, Index);                                          \
	template Tensor<S> depth_to_space<S>(const Tensor<S> &, Index);                                                          \
	template MatrixR<S> planes_to_tokens<S>(const S *, Index, Index, Index);                                                 \
	template void tokens_to_planes<S>(const MatrixR<S> &, S *);

	MOSE_INSTANTIATE_OPS(float)
	MOSE_INSTANTIATE_OPS(double)
} // namespace mose
