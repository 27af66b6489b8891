#include "mose/data.hpp"

#include "mose/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <numbers>

namespace mose
{
	void PairSample::validate() const
	{
		lr.validate();
		hr.validate();
		if (lr.bands != hr.bands)
			throw DataError("pair: lr has " + std::to_string(lr.bands) + " bands, hr has " + std::to_string(hr.bands));
		if (scale < 1 || hr.height != lr.height * scale || hr.width != lr.width * scale)
			throw DataError("pair: hr " + std::to_string(hr.height) + "x" + std::to_string(hr.width) + " is not " + std::to_string(scale) +
							"x lr " + std::to_string(lr.height) + "x" + std::to_string(lr.width));
	}

	PairSample PairSample::make(RasterImage lr, RasterImage hr)
	{
		PairSample p{std::move(lr), std::move(hr), 1, {}};
		p.lr.validate();
		p.scale = p.hr.height / p.lr.height;
		p.validate();
		return p;
	}

	namespace
	{
		// Frequencies are drawn up to `f_max` cycles per HR pixel.
		Tensor<float> procedural_field(Index bands, Index size, double f_max, Rng &rng)
		{
			constexpr double two_pi = 2.0 * std::numbers::pi;
			Tensor<float> field({bands, size, size});
			for (Index b = 0; b < bands; ++b)
			{
				Rng br = rng.split(static_cast<std::uint64_t>(b));
				struct Wave
				{
					double fx, fy, phase, amp;
				};
				struct Step
				{
					double nx, ny, offset, amp;
				};
				std::vector<Wave> waves(4);
				for (auto &w : waves)
				{
					const double f = br.uniform(0.1, 1.0) * f_max * static_cast<double>(size), theta = br.uniform(0.0, two_pi);
					w = {f * std::cos(theta), f * std::sin(theta), br.uniform(0.0, two_pi), br.uniform(0.3, 1.0)};
				}
				std::vector<Step> steps(3);
				for (auto &s : steps)
				{
					const double theta = br.uniform(0.0, two_pi);
					s = {std::cos(theta), std::sin(theta), br.uniform(-0.3, 0.3), br.uniform(-1.0, 1.0)};
				}
				for (Index y = 0; y < size; ++y)
					for (Index x = 0; x < size; ++x)
					{
						const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(size) - 0.5;
						const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(size) - 0.5;
						double acc = 0.0;
						for (const auto &w : waves)
							acc += w.amp * std::sin(two_pi * (w.fx * u + w.fy * v) + w.phase);
						for (const auto &s : steps)
							acc += s.nx * u + s.ny * v > s.offset ? s.amp : 0.0;
						field(b, y, x) = static_cast<float>(acc);
					}
			}
			return field;
		}
	} // namespace

	std::vector<PairSample> synth_pairs(Index n, Index hr_size, Index scale, Rng &rng, Index bands)
	{
		if (n < 1 || bands < 1)
			throw InvalidArgument("synth_pairs: need at least one pair and one band");
		if (scale < 1 || hr_size < scale || hr_size % scale != 0)
			throw InvalidArgument("synth_pairs: size " + std::to_string(hr_size) + " is not divisible by scale " + std::to_string(scale));
		std::vector<PairSample> pairs;
		pairs.reserve(static_cast<std::size_t>(n));
		for (Index i = 0; i < n; ++i)
		{
			Rng r = rng.split(static_cast<std::uint64_t>(i));
			// Up to 80% of the LR Nyquist rate: nothing aliases, but bicubic attenuates the top band.
			RasterImage hr = normalize_bands(procedural_field(bands, hr_size, 0.8 * 0.5 / static_cast<double>(scale), r));
			Tensor<float> lr = bicubic_resize(hr.tensor(), Scale{1, scale});
			for (auto &v : lr.values())
				v = std::clamp(v, 0.0f, 1.0f);
			RasterImage lr_img = RasterImage::from_tensor(lr, hr.band_stats);
			pairs.push_back(PairSample::make(std::move(lr_img), std::move(hr)));
			char id[32];
			std::snprintf(id, sizeof id, "%04lld", static_cast<long long>(i));
			pairs.back().id = id;
		}
		return pairs;
	}

	void save_corpus(const std::string &dir, const std::vector<PairSample> &pairs)
	{
		std::filesystem::create_directories(dir);
		for (std::size_t i = 0; i < pairs.size(); ++i)
		{
			char stem[32];
			std::snprintf(stem, sizeof stem, "%04zu", i);
			// Fixed-width indices keep file order equal to generation order.
			write_msr((std::filesystem::path(dir) / (std::string(stem) + "_lr.msr")).string(), pairs[i].lr);
			write_msr((std::filesystem::path(dir) / (std::string(stem) + "_hr.msr")).string(), pairs[i].hr);
		}
	}

	std::vector<PairSample> load_corpus(const std::string &dir)
	{
		namespace fs = std::filesystem;
		if (!fs::is_directory(dir))
			throw DataError("corpus directory '" + dir + "' does not exist");
		std::map<std::string, std::pair<std::string, std::string>> stems; // sorted by stem
		for (const auto &entry : fs::directory_iterator(dir))
		{
			const std::string name = entry.path().filename().string();
			auto ends = [&](const std::string &suffix) {
				return name.size() > suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
			};
			if (ends("_lr.msr"))
				stems[name.substr(0, name.size() - 7)].first = entry.path().string();
			else if (ends("_hr.msr"))
				stems[name.substr(0, name.size() - 7)].second = entry.path().string();
		}
		if (stems.empty())
			throw DataError("corpus directory '" + dir + "' holds no *_lr.msr / *_hr.msr pairs");
		std::vector<PairSample> pairs;
		for (const auto &[stem, paths] : stems)
		{
			if (paths.first.empty() || paths.second.empty())
				throw DataError("corpus: '" + stem + "' is missing its " + (paths.first.empty() ? "lr" : "hr") + " partner");
			try
			{
				pairs.push_back(PairSample::make(read_msr(paths.first), read_msr(paths.second)));
				pairs.back().id = stem;
			}
			catch (const FormatError &)
			{
				throw;
			}
			catch (const DataError &e)
			{
				throw DataError("corpus pair '" + stem + "': " + e.what());
			}
		}
		const Index r = pairs.front().scale;
		for (std::size_t i = 1; i < pairs.size(); ++i)
			if (pairs[i].scale != r || pairs[i].lr.bands != pairs.front().lr.bands || pairs[i].lr.height != pairs.front().lr.height ||
				pairs[i].lr.width != pairs.front().lr.width)
				throw DataError("corpus: pairs differ in scale, band count or size");
		return pairs;
	}

	Batcher::Batcher(Index samples, Index batch_size, std::uint64_t seed) : samples_(samples), batch_size_(batch_size), seed_(seed)
	{
		if (samples < 1)
			throw DataError("batcher: empty corpus");
		if (batch_size < 1)
			throw InvalidArgument("batcher: batch size must be positive");
	}

	std::vector<Index> Batcher::permutation(Index epoch) const
	{
		std::vector<Index> perm(static_cast<std::size_t>(samples_));
		std::iota(perm.begin(), perm.end(), Index{0});
		Rng rng = Rng(seed_).split("batcher").split(static_cast<std::uint64_t>(epoch));
		for (Index i = samples_ - 1; i > 0; --i)
			std::swap(perm[static_cast<std::size_t>(i)], perm[rng.below(static_cast<std::uint64_t>(i + 1))]);
		return perm;
	}

	std::vector<std::vector<Index>> Batcher::epoch(Index e) const
	{
		const auto perm = permutation(e);
		std::vector<std::vector<Index>> out;
		for (Index start = 0; start < samples_; start += batch_size_)
			out.emplace_back(perm.begin() + start, perm.begin() + std::min(samples_, start + batch_size_));
		return out;
	}

	std::vector<Index> Batcher::batch_for_step(Index step) const
	{
		const Index per = batches_per_epoch();
		const auto batches = epoch(step / per);
		return batches[static_cast<std::size_t>(step % per)];
	}

	namespace
	{
		Tensor<float> stack(const std::vector<PairSample> &pairs, const std::vector<Index> &indices, bool hr)
		{
			if (indices.empty())
				throw InvalidArgument("stack: empty batch");
			const RasterImage &first = hr ? pairs.at(static_cast<std::size_t>(indices[0])).hr : pairs.at(static_cast<std::size_t>(indices[0])).lr;
			const Index per = first.bands * first.height * first.width;
			Tensor<float> out({static_cast<Index>(indices.size()), first.bands, first.height, first.width});
			for (std::size_t i = 0; i < indices.size(); ++i)
			{
				const RasterImage &img = hr ? pairs.at(static_cast<std::size_t>(indices[i])).hr : pairs.at(static_cast<std::size_t>(indices[i])).lr;
				if (img.bands != first.bands || img.height != first.height || img.width != first.width)
					throw DataError("stack: batch mixes image sizes");
				std::copy(img.pixels.begin(), img.pixels.end(), out.data() + static_cast<Index>(i) * per);
			}
			return out;
		}
	} // namespace

	Tensor<float> stack_lr(const std::vector<PairSample> &pairs, const std::vector<Index> &indices) { return stack(pairs, indices, false); }
	Tensor<float> stack_hr(const std::vector<PairSample> &pairs, const std::vector<Index> &indices) { return stack(pairs, indices, true); }
} // namespace mose
