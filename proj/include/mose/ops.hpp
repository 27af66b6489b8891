#pragma once

// Layer primitives on token matrices. A feature map of H x W pixels and C
// channels is stored as an (H*W) x C row-major matrix in raster order, which
// is the B x H x W x C tensor layout of one example.

#include "mose/tensor.hpp"

namespace mose
{
	/// y = x * W^T + b, with W stored [out, in] and b [out] (b may be empty).
	template <typename S>
	MatrixR<S> linear_forward(const MatrixR<S> &x, const Tensor<S> &weight, const Tensor<S> *bias);

	/// Accumulates dW (and db when non-null); returns dx.
	template <typename S>
	MatrixR<S> linear_backward(const MatrixR<S> &x, const Tensor<S> &weight, const MatrixR<S> &dy,
							   Tensor<S> &dweight, Tensor<S> *dbias);

	template <typename S>
	struct LayerNormCache
	{
		MatrixR<S> xhat;
		VectorX<S> inv_std;
	};

	/// Per-token normalization over channels, eps 1e-5, affine gamma/beta.
	template <typename S>
	MatrixR<S> layer_norm_forward(const MatrixR<S> &x, const Tensor<S> &gamma, const Tensor<S> &beta, LayerNormCache<S> &cache);

	template <typename S>
	MatrixR<S> layer_norm_backward(const LayerNormCache<S> &cache, const Tensor<S> &gamma, const MatrixR<S> &dy,
								   Tensor<S> &dgamma, Tensor<S> &dbeta);

	/// Exact GELU, 0.5 x (1 + erf(x / sqrt 2)).
	template <typename S>
	MatrixR<S> gelu(const MatrixR<S> &x);

	template <typename S>
	MatrixR<S> gelu_backward(const MatrixR<S> &x, const MatrixR<S> &dy);

	/// 3x3 convolution, stride 1, zero padding 1. weight [Cout, Cin, 3, 3], bias [Cout].
	template <typename S>
	MatrixR<S> conv3x3_forward(const MatrixR<S> &x, Index height, Index width, const Tensor<S> &weight, const Tensor<S> &bias);

	template <typename S>
	MatrixR<S> conv3x3_backward(const MatrixR<S> &x, Index height, Index width, const Tensor<S> &weight, const MatrixR<S> &dy,
								Tensor<S> &dweight, Tensor<S> &dbias);

	/// Maps i in [0, 2n) style overhang back into [0, n) by mirroring without
	/// repeating the edge sample; n == 1 degenerates to replication.
	Index reflect_index(Index i, Index n);

	/// Reflect-pads at the bottom/right to out_height x out_width.
	template <typename S>
	MatrixR<S> pad_reflect(const MatrixR<S> &x, Index height, Index width, Index out_height, Index out_width);

	/// Keeps the top-left out_height x out_width region.
	template <typename S>
	MatrixR<S> crop(const MatrixR<S> &x, Index height, Index width, Index out_height, Index out_width);

	/// Adjoint of crop: scatters into a zero map of height x width.
	template <typename S>
	MatrixR<S> crop_backward(const MatrixR<S> &dy, Index height, Index width, Index out_height, Index out_width);

	/// Pixel shuffle: channel c*r*r + i*r + j at (y, x) moves to channel c at (y*r + i, x*r + j).
	template <typename S>
	MatrixR<S> depth_to_space(const MatrixR<S> &x, Index height, Index width, Index r);

	/// Inverse rearrangement of depth_to_space (and therefore its adjoint).
	template <typename S>
	MatrixR<S> space_to_depth(const MatrixR<S> &y, Index height, Index width, Index r);

	/// Tensor-level pixel shuffle on B x C*r*r x H x W, returning B x C x rH x rW.
	template <typename S>
	Tensor<S> depth_to_space(const Tensor<S> &x, Index r);

	/// C x H x W planes <-> (H*W) x C tokens.
	template <typename S>
	MatrixR<S> planes_to_tokens(const S *planes, Index channels, Index height, Index width);

	template <typename S>
	void tokens_to_planes(const MatrixR<S> &tokens, S *planes);
} // namespace mose
