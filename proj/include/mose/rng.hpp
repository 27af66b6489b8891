#pragma once

#include "mose/tensor.hpp"

#include <cstdint>
#include <string_view>

namespace mose
{
	/// Counter-based generator: output n is a bijective 64-bit mix of (key, n).
	/// Streams are split by hashing a stream id into a fresh key, so results
	/// never depend on how many draws another stream has consumed.
	class Rng
	{
	public:
		explicit Rng(std::uint64_t seed = 0) : key_(mix(seed ^ 0x5851f42d4c957f2dULL)) {}

		std::uint64_t next_u64() { return mix(key_ + kGolden * ++counter_); }

		/// Uniform in [0, 1) with 53 bits of resolution.
		double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
		double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

		/// Uniform integer in [0, n). n must be positive.
		std::uint64_t below(std::uint64_t n);

		/// Standard normal via Box-Muller (one value per call, no cached spare).
		double normal();

		Rng split(std::uint64_t stream) const;
		Rng split(std::string_view name) const;

		std::uint64_t counter() const { return counter_; }

		static std::uint64_t mix(std::uint64_t z)
		{
			z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
			z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
			return z ^ (z >> 31);
		}

	private:
		static constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;
		std::uint64_t key_;
		std::uint64_t counter_ = 0;
	};

	/// Normal(0, std) samples truncated to [-2 std, 2 std] by rejection.
	template <typename Scalar>
	Tensor<Scalar> trunc_normal_init(const Shape &shape, double std, Rng &rng);

	template <typename Scalar>
	Tensor<Scalar> uniform_tensor(const Shape &shape, double lo, double hi, Rng &rng)
	{
		Tensor<Scalar> t(shape);
		for (auto &v : t.values())
			v = static_cast<Scalar>(rng.uniform(lo, hi));
		return t;
	}
} // namespace mose
