#include "mose/rng.hpp"

#include <cmath>
#include <numbers>

namespace mose
{
	std::string shape_string(const Shape &shape)
	{
		std::string s = "[";
		for (std::size_t i = 0; i < shape.size(); ++i)
		{
			if (i)
				s += ", ";
			s += std::to_string(shape[i]);
		}
		return s + "]";
	}

	std::uint64_t Rng::below(std::uint64_t n)
	{
		if (n == 0)
			throw InvalidArgument("Rng::below requires n > 0");
		// Lemire-style rejection keeps the draw unbiased.
		const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
		std::uint64_t x;
		do
			x = next_u64();
		while (x >= limit);
		return x % n;
	}

	double Rng::normal()
	{
		double u1 = uniform();
		while (u1 <= 0.0)
			u1 = uniform();
		const double u2 = uniform();
		return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
	}

	Rng Rng::split(std::uint64_t stream) const
	{
		Rng child(0);
		child.key_ = mix(key_ ^ mix(stream + kGolden));
		return child;
	}

	Rng Rng::split(std::string_view name) const
	{
		// FNV-1a over the name bytes.
		std::uint64_t h = 0xcbf29ce484222325ULL;
		for (unsigned char c : name)
			h = (h ^ c) * 0x100000001b3ULL;
		return split(h);
	}

	template <typename Scalar>
	Tensor<Scalar> trunc_normal_init(const Shape &shape, double std, Rng &rng)
	{
		if (!(std > 0.0) || !std::isfinite(std))
			throw InvalidArgument("trunc_normal_init: std must be positive, got " + std::to_string(std));
		Tensor<Scalar> t(shape);
		for (auto &v : t.values())
		{
			double z;
			do
				z = rng.normal();
			while (std::abs(z) > 2.0);
			v = static_cast<Scalar>(z * std);
		}
		return t;
	}

	template Tensor<float> trunc_normal_init<float>(const Shape &, double, Rng &);
	template Tensor<double> trunc_normal_init<double>(const Shape &, double, Rng &);
} // namespace mose
