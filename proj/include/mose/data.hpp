#pragma once

#include "mose/raster.hpp"
#include "mose/rng.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace mose
{
	struct PairSample
	{
		RasterImage lr, hr;
		Index scale = 1;
		std::string id; // file stem or generation index

		/// hr must be exactly scale x lr in both axes with the same band count.
		void validate() const;
		/// Builds a pair and infers the scale; mismatched dims are a DataError.
		static PairSample make(RasterImage lr, RasterImage hr);
	};

	/// Procedural HR fields (random low-frequency sinusoids plus a few sharp
	/// steps, normalized per band) and their bicubic 1/r reductions.
	std::vector<PairSample> synth_pairs(Index n, Index hr_size, Index scale, Rng &rng, Index bands = 4);

	/// Writes NNNN_lr.msr / NNNN_hr.msr pairs into dir (created if needed).
	void save_corpus(const std::string &dir, const std::vector<PairSample> &pairs);

	/// Loads every *_lr.msr / *_hr.msr pair in dir, sorted by file name.
	std::vector<PairSample> load_corpus(const std::string &dir);

	/// Per-epoch shuffled batches over [0, n). Epoch e uses a permutation
	/// seeded by (seed, e); the last partial batch is kept.
	class Batcher
	{
	public:
		Batcher(Index samples, Index batch_size, std::uint64_t seed);

		Index batches_per_epoch() const { return (samples_ + batch_size_ - 1) / batch_size_; }
		std::vector<Index> permutation(Index epoch) const;
		std::vector<std::vector<Index>> epoch(Index epoch) const;
		/// Batch consumed by global step `step` (0-based), walking epochs in order.
		std::vector<Index> batch_for_step(Index step) const;

	private:
		Index samples_, batch_size_;
		std::uint64_t seed_;
	};

	/// Stacks the selected lr (or hr) rasters into B x S x H x W.
	Tensor<float> stack_lr(const std::vector<PairSample> &pairs, const std::vector<Index> &indices);
	Tensor<float> stack_hr(const std::vector<PairSample> &pairs, const std::vector<Index> &indices);
} // namespace mose
