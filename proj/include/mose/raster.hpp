#pragma once

#include "mose/tensor.hpp"

#include <string>
#include <string_view>
#include <vector>

namespace mose
{
	/// Per-band radiometric range; normalized = (raw - min) / (max - min).
	struct BandStats
	{
		float min = 0.0f;
		float max = 1.0f;
	};

	/// Planar band-major f32 image in the normalized [0, 1] domain.
	struct RasterImage
	{
		Index bands = 0, height = 0, width = 0;
		std::vector<float> pixels;
		std::vector<BandStats> band_stats;

		/// Throws DataError when sizes disagree or stats are not finite with max > min.
		void validate() const;
		Tensor<float> tensor() const; // bands x height x width
		static RasterImage from_tensor(const Tensor<float> &planes, std::vector<BandStats> stats);
	};

	inline constexpr char kMsrMagic[4] = {'M', 'S', 'R', '1'};
	inline constexpr std::uint32_t kMsrFloat32 = 1;

	/// Exact byte count of an MSR file: 20-byte header, 8 bytes of stats per band, f32 payload.
	inline Index msr_file_size(Index bands, Index height, Index width) { return 20 + 8 * bands + 4 * bands * height * width; }

	std::string encode_msr(const RasterImage &img);
	/// Throws FormatError carrying the byte offset of the first inconsistency.
	RasterImage decode_msr(std::string_view bytes);

	void write_msr(const std::string &path, const RasterImage &img);
	RasterImage read_msr(const std::string &path);

	/// Per-band min-max normalization of raw planes. A constant band gets
	/// max = min + 1 so the stats stay invertible.
	RasterImage normalize_bands(const Tensor<float> &raw);

	/// Back to the raw radiometric domain.
	Tensor<float> denormalize_bands(const RasterImage &img);

	/// PNG preview of 1-4 bands (gray, gray+alpha, RGB, RGBA) at 8 or 16 bits,
	/// normalized values clamped to [0, 1].
	void write_png(const std::string &path, const RasterImage &img, int bit_depth = 8);

	/// Imports a PNG as a normalized raster with unit band stats.
	RasterImage read_png(const std::string &path);

	/// Writes bytes to a temporary sibling and renames it over `path` on success.
	void write_file_atomic(const std::string &path, std::string_view bytes);
	std::string read_file(const std::string &path);
} // namespace mose
