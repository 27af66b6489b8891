#include "mose/raster.hpp"

#include <png.h>

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>

namespace mose
{
	static_assert(std::endian::native == std::endian::little, "MSR and checkpoint IO assume a little-endian host");

	void RasterImage::validate() const
	{
		if (bands < 1 || height < 1 || width < 1)
			throw DataError("raster: empty image " + std::to_string(bands) + "x" + std::to_string(height) + "x" + std::to_string(width));
		if (static_cast<Index>(pixels.size()) != bands * height * width)
			throw DataError("raster: pixel count does not match " + std::to_string(bands) + "x" + std::to_string(height) + "x" +
							std::to_string(width));
		if (static_cast<Index>(band_stats.size()) != bands)
			throw DataError("raster: expected " + std::to_string(bands) + " band stats, got " + std::to_string(band_stats.size()));
		for (std::size_t b = 0; b < band_stats.size(); ++b)
			if (!std::isfinite(band_stats[b].min) || !std::isfinite(band_stats[b].max) || !(band_stats[b].max > band_stats[b].min))
				throw DataError("raster: band " + std::to_string(b) + " stats must be finite with max > min");
	}

	Tensor<float> RasterImage::tensor() const { return Tensor<float>({bands, height, width}, pixels); }

	RasterImage RasterImage::from_tensor(const Tensor<float> &planes, std::vector<BandStats> stats)
	{
		require_rank(planes, 3, "raster");
		RasterImage img{planes.dim(0), planes.dim(1), planes.dim(2), std::vector<float>(planes.values().begin(), planes.values().end()),
						std::move(stats)};
		img.validate();
		return img;
	}

	namespace
	{
		void put_u32(std::string &out, std::uint32_t v)
		{
			char b[4];
			std::memcpy(b, &v, 4);
			out.append(b, 4);
		}

		void put_f32(std::string &out, float v)
		{
			char b[4];
			std::memcpy(b, &v, 4);
			out.append(b, 4);
		}

		struct Reader
		{
			std::string_view bytes;
			std::size_t pos = 0;

			void need(std::size_t n, const char *what) const
			{
				if (bytes.size() - pos < n)
					throw FormatError(std::string("truncated ") + what, pos);
			}
			std::uint32_t u32(const char *what)
			{
				need(4, what);
				std::uint32_t v;
				std::memcpy(&v, bytes.data() + pos, 4);
				pos += 4;
				return v;
			}
			float f32(const char *what)
			{
				need(4, what);
				float v;
				std::memcpy(&v, bytes.data() + pos, 4);
				pos += 4;
				return v;
			}
		};

		std::uint32_t to_u32(Index v, const char *what)
		{
			if (v < 0 || v > static_cast<Index>(UINT32_MAX))
				throw InvalidArgument(std::string(what) + " does not fit in 32 bits");
			return static_cast<std::uint32_t>(v);
		}
	} // namespace

	std::string encode_msr(const RasterImage &img)
	{
		img.validate();
		std::string out;
		out.reserve(static_cast<std::size_t>(msr_file_size(img.bands, img.height, img.width)));
		out.append(kMsrMagic, 4);
		put_u32(out, to_u32(img.height, "height"));
		put_u32(out, to_u32(img.width, "width"));
		put_u32(out, to_u32(img.bands, "bands"));
		put_u32(out, kMsrFloat32);
		for (const auto &s : img.band_stats)
		{
			put_f32(out, s.min);
			put_f32(out, s.max);
		}
		out.append(reinterpret_cast<const char *>(img.pixels.data()), img.pixels.size() * sizeof(float));
		return out;
	}

	RasterImage decode_msr(std::string_view bytes)
	{
		Reader r{bytes};
		r.need(4, "magic");
		if (std::memcmp(bytes.data(), kMsrMagic, 4) != 0)
			throw FormatError("bad MSR magic", 0);
		r.pos = 4;
		RasterImage img;
		img.height = r.u32("height");
		img.width = r.u32("width");
		img.bands = r.u32("band count");
		const std::size_t dtype_at = r.pos;
		if (r.u32("dtype") != kMsrFloat32)
			throw FormatError("unsupported MSR dtype (only 1 = f32)", dtype_at);
		if (img.bands < 1 || img.height < 1 || img.width < 1)
			throw FormatError("MSR header declares an empty image", 4);
		for (Index b = 0; b < img.bands; ++b)
		{
			BandStats s;
			s.min = r.f32("band stats");
			s.max = r.f32("band stats");
			if (!std::isfinite(s.min) || !std::isfinite(s.max) || !(s.max > s.min))
				throw FormatError("band " + std::to_string(b) + " stats must be finite with max > min", r.pos - 8);
			img.band_stats.push_back(s);
		}
		const auto count = static_cast<std::size_t>(img.bands * img.height * img.width);
		r.need(count * sizeof(float), "pixel payload");
		img.pixels.resize(count);
		std::memcpy(img.pixels.data(), bytes.data() + r.pos, count * sizeof(float));
		r.pos += count * sizeof(float);
		if (r.pos != bytes.size())
			throw FormatError("trailing bytes after MSR payload", r.pos);
		return img;
	}

	void write_file_atomic(const std::string &path, std::string_view bytes)
	{
		namespace fs = std::filesystem;
		const fs::path target(path);
		fs::path tmp = target;
		tmp += ".tmp";
		{
			std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
			if (!out)
				throw DataError("cannot write '" + tmp.string() + "'");
			out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
			out.flush();
			if (!out)
			{
				out.close();
				std::error_code ec;
				fs::remove(tmp, ec);
				throw DataError("write failed for '" + tmp.string() + "'");
			}
		}
		std::error_code ec;
		fs::rename(tmp, target, ec);
		if (ec)
		{
			fs::remove(tmp, ec);
			throw DataError("cannot rename into '" + path + "'");
		}
	}

	std::string read_file(const std::string &path)
	{
		std::ifstream in(path, std::ios::binary);
		if (!in)
			throw DataError("cannot open '" + path + "'");
		std::ostringstream ss;
		ss << in.rdbuf();
		return ss.str();
	}

	void write_msr(const std::string &path, const RasterImage &img) { write_file_atomic(path, encode_msr(img)); }

	RasterImage read_msr(const std::string &path)
	{
		try
		{
			return decode_msr(read_file(path));
		}
		catch (const FormatError &e)
		{
			throw FormatError(path + ": " + e.what(), e.offset());
		}
	}

	RasterImage normalize_bands(const Tensor<float> &raw)
	{
		require_rank(raw, 3, "normalize_bands");
		raw.check_finite("raw raster");
		const Index bands = raw.dim(0), n = raw.dim(1) * raw.dim(2);
		RasterImage img{bands, raw.dim(1), raw.dim(2), std::vector<float>(raw.values().begin(), raw.values().end()), {}};
		for (Index b = 0; b < bands; ++b)
		{
			auto band = Eigen::Map<Eigen::VectorXf>(img.pixels.data() + b * n, n);
			BandStats s{band.minCoeff(), band.maxCoeff()};
			if (!(s.max > s.min))
				s.max = s.min + 1.0f;
			const double lo = s.min, span = static_cast<double>(s.max) - lo;
			for (Index i = 0; i < n; ++i)
				band[i] = static_cast<float>((static_cast<double>(band[i]) - lo) / span);
			img.band_stats.push_back(s);
		}
		return img;
	}

	Tensor<float> denormalize_bands(const RasterImage &img)
	{
		img.validate();
		Tensor<float> out({img.bands, img.height, img.width});
		const Index n = img.height * img.width;
		for (Index b = 0; b < img.bands; ++b)
		{
			const BandStats s = img.band_stats[static_cast<std::size_t>(b)];
			const double lo = s.min, span = static_cast<double>(s.max) - lo;
			for (Index i = 0; i < n; ++i)
				out[b * n + i] = static_cast<float>(lo + span * static_cast<double>(img.pixels[static_cast<std::size_t>(b * n + i)]));
		}
		return out;
	}

	namespace
	{
		struct FileCloser
		{
			void operator()(std::FILE *f) const { std::fclose(f); }
		};

		[[noreturn]] void png_fail(png_structp png, png_const_charp msg)
		{
			auto *err = static_cast<std::string *>(png_get_error_ptr(png));
			*err = msg;
			png_longjmp(png, 1);
		}

		int color_type_for(Index bands)
		{
			switch (bands)
			{
			case 1:
				return PNG_COLOR_TYPE_GRAY;
			case 2:
				return PNG_COLOR_TYPE_GRAY_ALPHA;
			case 3:
				return PNG_COLOR_TYPE_RGB;
			case 4:
				return PNG_COLOR_TYPE_RGBA;
			default:
				throw InvalidArgument("png: only 1-4 bands can be previewed, got " + std::to_string(bands));
			}
		}
	} // namespace

	void write_png(const std::string &path, const RasterImage &img, int bit_depth)
	{
		img.validate();
		if (bit_depth != 8 && bit_depth != 16)
			throw InvalidArgument("png: bit depth must be 8 or 16");
		const int color = color_type_for(img.bands);
		const Index n = img.height * img.width, bytes_per = bit_depth / 8;
		const double maxval = bit_depth == 8 ? 255.0 : 65535.0;
		std::vector<unsigned char> rows(static_cast<std::size_t>(n * img.bands * bytes_per));
		for (Index p = 0; p < n; ++p)
			for (Index b = 0; b < img.bands; ++b)
			{
				const double v = std::clamp(static_cast<double>(img.pixels[static_cast<std::size_t>(b * n + p)]), 0.0, 1.0);
				const auto q = static_cast<unsigned>(std::lround(v * maxval));
				unsigned char *dst = rows.data() + (p * img.bands + b) * bytes_per;
				if (bytes_per == 1)
					dst[0] = static_cast<unsigned char>(q);
				else
				{
					dst[0] = static_cast<unsigned char>(q >> 8); // PNG samples are big-endian
					dst[1] = static_cast<unsigned char>(q & 0xff);
				}
			}

		const std::string tmp = path + ".tmp";
		std::string err;
		{
			std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(tmp.c_str(), "wb"));
			if (!fp)
				throw DataError("cannot write '" + tmp + "'");
			png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_fail, nullptr);
			png_infop info = png ? png_create_info_struct(png) : nullptr;
			if (!png || !info)
			{
				png_destroy_write_struct(&png, nullptr);
				throw DataError("png: out of memory");
			}
			if (setjmp(png_jmpbuf(png)))
			{
				png_destroy_write_struct(&png, &info);
				fp.reset();
				std::remove(tmp.c_str());
				throw DataError("png write failed: " + err);
			}
			png_init_io(png, fp.get());
			png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), bit_depth, color,
						 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
			png_write_info(png, info);
			const std::size_t stride = static_cast<std::size_t>(img.width * img.bands * bytes_per);
			for (Index y = 0; y < img.height; ++y)
				png_write_row(png, rows.data() + static_cast<std::size_t>(y) * stride);
			png_write_end(png, nullptr);
			png_destroy_write_struct(&png, &info);
		}
		std::error_code ec;
		std::filesystem::rename(tmp, path, ec);
		if (ec)
		{
			std::remove(tmp.c_str());
			throw DataError("cannot rename into '" + path + "'");
		}
	}

	RasterImage read_png(const std::string &path)
	{
		std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.c_str(), "rb"));
		if (!fp)
			throw DataError("cannot open '" + path + "'");
		unsigned char sig[8];
		if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8))
			throw FormatError(path + ": not a PNG file", 0);
		std::string err;
		png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_fail, nullptr);
		png_infop info = png ? png_create_info_struct(png) : nullptr;
		if (!png || !info)
		{
			png_destroy_read_struct(&png, nullptr, nullptr);
			throw DataError("png: out of memory");
		}
		RasterImage img;
		std::vector<unsigned char> buf;
		if (setjmp(png_jmpbuf(png)))
		{
			png_destroy_read_struct(&png, &info, nullptr);
			throw DataError(path + ": png read failed: " + err);
		}
		png_init_io(png, fp.get());
		png_set_sig_bytes(png, 8);
		png_read_info(png, info);
		// Palette and sub-byte gray expand to plain 8-bit samples; 16-bit stays 16-bit.
		png_set_expand(png);
		png_read_update_info(png, info);
		const int depth = png_get_bit_depth(png, info);
		img.bands = png_get_channels(png, info);
		img.height = png_get_image_height(png, info);
		img.width = png_get_image_width(png, info);
		const std::size_t stride = png_get_rowbytes(png, info);
		buf.resize(stride * static_cast<std::size_t>(img.height));
		std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
		for (Index y = 0; y < img.height; ++y)
			rows[static_cast<std::size_t>(y)] = buf.data() + static_cast<std::size_t>(y) * stride;
		png_read_image(png, rows.data());
		png_destroy_read_struct(&png, &info, nullptr);

		if (img.bands < 1 || img.bands > 4)
			throw DataError(path + ": unsupported channel count " + std::to_string(img.bands));
		const Index n = img.height * img.width;
		const double maxval = depth == 16 ? 65535.0 : 255.0;
		img.pixels.resize(static_cast<std::size_t>(n * img.bands));
		for (Index p = 0; p < n; ++p)
			for (Index b = 0; b < img.bands; ++b)
			{
				const Index i = p * img.bands + b;
				const double v = depth == 16 ? (buf[static_cast<std::size_t>(2 * i)] << 8) | buf[static_cast<std::size_t>(2 * i + 1)]
											 : buf[static_cast<std::size_t>(i)];
				img.pixels[static_cast<std::size_t>(b * n + p)] = static_cast<float>(v / maxval);
			}
		img.band_stats.assign(static_cast<std::size_t>(img.bands), BandStats{});
		return img;
	}
} // namespace mose
