#pragma once

#include "mose/rng.hpp"
#include "mose/tensor.hpp"

#include <cmath>
#include <functional>

namespace mose::test
{
	template <typename S = double>
	MatrixR<S> random_matrix(Index rows, Index cols, Rng &rng, double scale = 1.0)
	{
		MatrixR<S> m(rows, cols);
		for (Index i = 0; i < m.size(); ++i)
			m.data()[i] = static_cast<S>(scale * rng.normal());
		return m;
	}

	template <typename S = double>
	Tensor<S> random_tensor(Shape shape, Rng &rng, double scale = 1.0)
	{
		Tensor<S> t(std::move(shape));
		for (auto &v : t.values())
			v = static_cast<S>(scale * rng.normal());
		return t;
	}

	template <typename S = double>
	Tensor<S> random_unit(Shape shape, Rng &rng)
	{
		Tensor<S> t(std::move(shape));
		for (auto &v : t.values())
			v = static_cast<S>(rng.uniform());
		return t;
	}

	/// Max over entries of |analytic - numeric| / max(1, |numeric|), where the
	/// numeric derivative is a central difference of f at x.
	inline double fd_error(const std::function<double(const MatrixR<double> &)> &f, MatrixR<double> x, const MatrixR<double> &analytic,
						   double eps = 1e-5)
	{
		double worst = 0.0;
		for (Index i = 0; i < x.size(); ++i)
		{
			const double keep = x.data()[i];
			x.data()[i] = keep + eps;
			const double up = f(x);
			x.data()[i] = keep - eps;
			const double down = f(x);
			x.data()[i] = keep;
			const double num = (up - down) / (2 * eps);
			worst = std::max(worst, std::abs(analytic.data()[i] - num) / std::max(1.0, std::abs(num)));
		}
		return worst;
	}

	/// <dy, y> as a scalar probe of a matrix-valued map.
	inline double dot(const MatrixR<double> &a, const MatrixR<double> &b) { return (a.array() * b.array()).sum(); }
} // namespace mose::test
