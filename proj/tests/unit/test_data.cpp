#include "helpers.hpp"

#include "mose/checkpoint.hpp"
#include "mose/data.hpp"
#include "mose/metrics.hpp"

#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <set>

#include <unistd.h>

using namespace mose;
namespace fs = std::filesystem;

namespace
{
	struct TempDir
	{
		fs::path path;
		explicit TempDir(const std::string &tag)
		{
			path = fs::temp_directory_path() / ("mose_test_" + tag + "_" + std::to_string(::getpid()));
			fs::remove_all(path);
			fs::create_directories(path);
		}
		~TempDir() { fs::remove_all(path); }
		std::string operator/(const std::string &name) const { return (path / name).string(); }
	};

	RasterImage random_raster(Index bands, Index h, Index w, Rng &rng)
	{
		Tensor<float> raw({bands, h, w});
		for (auto &v : raw.values())
			v = static_cast<float>(rng.uniform(-50.0, 900.0));
		return normalize_bands(raw);
	}
} // namespace

TEST_CASE("msr roundtrip and size")
{
	TempDir dir("msr");
	Rng rng(1);
	const auto img = random_raster(4, 64, 64, rng);
	write_msr(dir / "a.msr", img);
	CHECK(static_cast<Index>(fs::file_size(dir / "a.msr")) == msr_file_size(4, 64, 64));
	CHECK(msr_file_size(4, 64, 64) == 65588);
	const auto back = read_msr(dir / "a.msr");
	CHECK(back.bands == 4);
	CHECK(back.pixels == img.pixels);
	CHECK(back.band_stats.size() == 4);
	for (std::size_t b = 0; b < 4; ++b)
	{
		CHECK(back.band_stats[b].min == img.band_stats[b].min);
		CHECK(back.band_stats[b].max == img.band_stats[b].max);
	}
	CHECK(encode_msr(back) == encode_msr(img));
	CHECK_FALSE(fs::exists(dir / "a.msr.tmp"));
}

TEST_CASE("msr format errors carry offsets")
{
	Rng rng(2);
	const std::string good = encode_msr(random_raster(2, 3, 5, rng));

	std::string bad = good;
	bad[0] = 'X';
	try
	{
		decode_msr(bad);
		FAIL("expected a format error");
	}
	catch (const FormatError &e)
	{
		CHECK(e.offset() == 0);
	}

	bad = good;
	bad[16] = 2; // dtype
	CHECK_THROWS_AS(decode_msr(bad), FormatError);
	try
	{
		decode_msr(bad);
	}
	catch (const FormatError &e)
	{
		CHECK(e.offset() == 16);
	}

	CHECK_THROWS_AS(decode_msr(good.substr(0, good.size() - 3)), FormatError);
	CHECK_THROWS_AS(decode_msr(good.substr(0, 10)), FormatError);
	CHECK_THROWS_AS(decode_msr(good + "x"), FormatError);

	// min == max in band 1.
	bad = good;
	std::memcpy(bad.data() + 32, bad.data() + 28, 4);
	CHECK_THROWS_AS(decode_msr(bad), FormatError);

	CHECK_THROWS_AS(read_msr("/nonexistent/file.msr"), DataError);
}

TEST_CASE("normalization roundtrip")
{
	Rng rng(3);
	Tensor<float> raw({3, 6, 7});
	for (auto &v : raw.values())
		v = static_cast<float>(rng.uniform(100.0, 4000.0));
	// A constant band still gets a valid range.
	for (Index i = 0; i < 42; ++i)
		raw[84 + i] = 17.0f;
	const auto img = normalize_bands(raw);
	CHECK_NOTHROW(img.validate());
	for (float v : img.pixels)
	{
		CHECK(v >= 0.0f);
		CHECK(v <= 1.0f);
	}
	const auto back = denormalize_bands(img);
	for (Index i = 0; i < raw.size(); ++i)
		CHECK(std::abs(back[i] - raw[i]) <= 1e-6 * std::max(1.0f, std::abs(raw[i])) * 4);
}

TEST_CASE("png preview roundtrip")
{
	TempDir dir("png");
	Rng rng(4);
	for (Index bands : {1, 2, 3, 4})
		for (int depth : {8, 16})
		{
			CAPTURE(bands);
			CAPTURE(depth);
			const auto img = random_raster(bands, 9, 11, rng);
			write_png(dir / "p.png", img, depth);
			const auto back = read_png(dir / "p.png");
			CHECK(back.bands == bands);
			CHECK(back.height == 9);
			CHECK(back.width == 11);
			const double step = depth == 8 ? 1.0 / 255.0 : 1.0 / 65535.0;
			for (std::size_t i = 0; i < img.pixels.size(); ++i)
				CHECK(std::abs(back.pixels[i] - img.pixels[i]) <= step / 2 + 1e-6);
		}
	CHECK_THROWS_AS(write_png(dir / "x.png", random_raster(5, 4, 4, rng)), InvalidArgument);
	write_msr(dir / "not.png", random_raster(1, 4, 4, rng));
	CHECK_THROWS_AS(read_png(dir / "not.png"), FormatError);
}

TEST_CASE("synthetic pairs")
{
	Rng a(5), b(5);
	const auto pairs = synth_pairs(3, 64, 2, a);
	CHECK(pairs.size() == 3);
	CHECK(pairs[0].lr.height == 32);
	CHECK(pairs[0].hr.width == 64);
	CHECK(pairs[0].scale == 2);
	CHECK(pairs[0].lr.bands == 4);
	const auto again = synth_pairs(3, 64, 2, b);
	for (std::size_t i = 0; i < 3; ++i)
	{
		CHECK(pairs[i].hr.pixels == again[i].hr.pixels);
		CHECK(pairs[i].lr.pixels == again[i].lr.pixels);
		// Information was lost: bicubic upsampling is strictly worse than hr itself.
		const auto up = bicubic_resize(pairs[i].lr.tensor(), Scale{2, 1});
		CHECK(psnr(up, pairs[i].hr.tensor()) < psnr(pairs[i].hr.tensor(), pairs[i].hr.tensor()));
		CHECK(std::isfinite(psnr(up, pairs[i].hr.tensor())));
	}
	CHECK(synth_pairs(1, 48, 3, a)[0].lr.height == 16);
	CHECK_THROWS_AS(synth_pairs(1, 65, 2, a), InvalidArgument);
}

TEST_CASE("corpus save and load")
{
	TempDir dir("corpus");
	Rng rng(6);
	const auto pairs = synth_pairs(3, 32, 2, rng, 2);
	save_corpus(dir.path.string(), pairs);
	const auto back = load_corpus(dir.path.string());
	REQUIRE(back.size() == 3);
	for (std::size_t i = 0; i < 3; ++i)
	{
		CHECK(back[i].hr.pixels == pairs[i].hr.pixels);
		CHECK(back[i].lr.pixels == pairs[i].lr.pixels);
	}
	CHECK(back[1].id == "0001");

	// An hr that is not r x lr is a load error, not a silent crop.
	write_msr(dir / "0001_hr.msr", random_raster(2, 30, 32, rng));
	CHECK_THROWS_AS(load_corpus(dir.path.string()), DataError);
	fs::remove(dir / "0001_hr.msr");
	CHECK_THROWS_AS(load_corpus(dir.path.string()), DataError);
	CHECK_THROWS_AS(load_corpus((dir.path / "missing").string()), DataError);
}

TEST_CASE("batcher")
{
	const Batcher b(10, 8, 42);
	const auto epoch = b.epoch(0);
	REQUIRE(epoch.size() == 2);
	CHECK(epoch[0].size() == 8);
	CHECK(epoch[1].size() == 2);
	std::multiset<Index> seen;
	for (const auto &batch : epoch)
		seen.insert(batch.begin(), batch.end());
	CHECK(seen == std::multiset<Index>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
	CHECK(Batcher(10, 8, 42).permutation(3) == b.permutation(3));
	CHECK(b.permutation(0) != b.permutation(1));
	CHECK(b.batch_for_step(3) == b.epoch(1)[1]);
	CHECK_THROWS_AS(Batcher(0, 8, 1), DataError);
}

TEST_CASE("config parsing")
{
	const auto cfg = parse_config(R"({"embed_dim": 32, "attention": {"heads": 4}, "ffn": {"kind": "mlp"}, "loss": {"ssim_border": "valid"}})");
	CHECK(cfg.embed_dim == 32);
	CHECK(cfg.attention.heads == 4);
	CHECK(cfg.ffn == FfnKind::mlp);
	CHECK(cfg.loss.ssim_border == SsimBorder::valid);
	CHECK(cfg.groups == 4);
	CHECK(cfg.moe.expert_hidden == 32);

	CHECK_THROWS_AS(parse_config(R"({"embed_dimm": 32})"), InvalidArgument);
	CHECK_THROWS_AS(parse_config(R"({"attention": {"head": 4}})"), InvalidArgument);
	CHECK_THROWS_AS(parse_config(R"({"embed_dim": "wide"})"), InvalidArgument);
	CHECK_THROWS_AS(parse_config(R"({"scale": 5})"), InvalidArgument);
	CHECK_THROWS_AS(parse_config("{not json"), InvalidArgument);
	CHECK_THROWS_AS(parse_config(R"({"embed_dim": 30, "attention": {"heads": 4}})"), InvalidArgument);

	// Serialization is a fixed point.
	const auto toy = toy_config(3);
	CHECK(config_to_json(parse_config(config_to_json(toy))) == config_to_json(toy));
}

TEST_CASE("checkpoint roundtrip")
{
	TempDir dir("ckpt");
	const auto cfg = toy_config(2);
	ParameterSet<float> p;
	Rng rng(7);
	SrModel<float> model(cfg, p, rng);
	for (auto &e : p)
		for (auto &v : e.value.values())
			v += static_cast<float>(0.01 * rng.normal());
	AdamState<float> adam;
	adam.reset(p);
	adam.step = 12;
	adam.m[3].flat().setConstant(0.5f);
	const TrainState state{34, 9, {{0.0f, 2.0f}, {1.0f, 3.0f}, {-1.0f, 1.0f}, {5.0f, 6.0f}}};
	save_checkpoint(dir / "a.msck", cfg, p, &adam, state);

	const auto ck = load_checkpoint(dir / "a.msck");
	CHECK(config_to_json(ck.config) == config_to_json(cfg));
	CHECK(ck.state.step == 34);
	CHECK(ck.state.seed == 9);
	CHECK(ck.state.band_stats[3].max == 6.0f);
	CHECK(ck.adam.step == 12);
	REQUIRE(ck.params.size() == p.size());
	for (std::size_t i = 0; i < p.size(); ++i)
	{
		CHECK(ck.params.entry(i).name == p.entry(i).name);
		CHECK(ck.params.value(i) == p.value(i));
		CHECK(ck.adam.m[i] == adam.m[i]);
	}
	const auto lr = test::random_unit<float>({1, 4, 16, 16}, rng);
	CHECK(model.forward(ck.params, lr).sr == model.forward(p, lr).sr);

	// Re-saving is byte-identical.
	save_checkpoint(dir / "b.msck", ck.config, ck.params, &ck.adam, ck.state);
	CHECK(read_file(dir / "a.msck") == read_file(dir / "b.msck"));

	// Without optimizer state.
	save_checkpoint(dir / "c.msck", cfg, p, nullptr, state);
	CHECK(load_checkpoint(dir / "c.msck").adam.m.empty());
}

TEST_CASE("checkpoint errors")
{
	TempDir dir("ckpt_err");
	const auto cfg = toy_config(2);
	ParameterSet<float> p;
	Rng rng(8);
	SrModel<float> model(cfg, p, rng);
	save_checkpoint(dir / "a.msck", cfg, p, nullptr, {});
	const std::string good = read_file(dir / "a.msck");

	write_file_atomic(dir / "t.msck", good.substr(0, good.size() - 5));
	CHECK_THROWS_AS(load_checkpoint(dir / "t.msck"), FormatError);
	std::string bad = good;
	bad[1] = 'X';
	write_file_atomic(dir / "m.msck", bad);
	CHECK_THROWS_AS(load_checkpoint(dir / "m.msck"), FormatError);

	// Drop one entry: the file decodes but the layout is incomplete.
	auto file = decode_checkpoint(good);
	file.entries.pop_back();
	write_file_atomic(dir / "d.msck", encode_checkpoint(file));
	CHECK_THROWS_AS(load_checkpoint(dir / "d.msck"), FormatError);

	file = decode_checkpoint(good);
	file.entries.front().second = Tensor<float>({1});
	write_file_atomic(dir / "s.msck", encode_checkpoint(file));
	CHECK_THROWS_AS(load_checkpoint(dir / "s.msck"), FormatError);

	CHECK_THROWS_AS(load_checkpoint(dir / "none.msck"), DataError);
}
