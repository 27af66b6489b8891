#include "cli.hpp"

#include "mose/checkpoint.hpp"
#include "mose/data.hpp"

#include <doctest.h>

#include <filesystem>
#include <sstream>

#include <unistd.h>

using namespace mose;
namespace fs = std::filesystem;

namespace
{
	struct Run
	{
		int code;
		std::string out, err;
	};

	Run mose_run(std::vector<std::string> args)
	{
		std::ostringstream out, err;
		const int code = cli::run(args, out, err);
		return {code, out.str(), err.str()};
	}

	// A synthetic corpus and toy config shared by the cases below.
	struct Workspace
	{
		fs::path root;
		Workspace()
		{
			root = fs::temp_directory_path() / ("mose_cli_" + std::to_string(::getpid()));
			fs::remove_all(root);
			fs::create_directories(root);
			write_file_atomic(path("toy.json"), config_to_json(toy_config(2), 2));
			REQUIRE(mose_run({"synth", "--out", path("data"), "--count", "3", "--size", "32", "--seed", "1"}).code == 0);
		}
		~Workspace() { fs::remove_all(root); }
		std::string path(const std::string &name) const { return (root / name).string(); }
	};

	std::string slurp(const std::string &p) { return read_file(p); }
} // namespace

TEST_CASE("usage errors exit 1")
{
	CHECK(mose_run({}).code == cli::kUsage);
	CHECK(mose_run({"frobnicate"}).code == cli::kUsage);
	CHECK(mose_run({"train"}).code == cli::kUsage);
	CHECK(mose_run({"audit", "--config", "/nonexistent.json"}).code != cli::kOk);
	const auto help = mose_run({"--help"});
	CHECK(help.code == cli::kOk);
}

TEST_CASE("audit prints closed-form counts")
{
	Workspace ws;
	const auto r = mose_run({"audit", "--config", ws.path("toy.json")});
	REQUIRE(r.code == 0);
	// Toy: T=16, E=4, k=2, hidden 16, merger on.
	const Index per = 16 * 4 + 2 * (16 * 16 + 16 + 16 * 16 + 16) + 9 * 2 + 1;
	CHECK(r.out.find("blocks.0.0") != std::string::npos);
	CHECK(r.out.find("blocks.0.1") != std::string::npos);
	CHECK(r.out.find(std::to_string(per)) != std::string::npos);
	CHECK(r.out.find("model total") != std::string::npos);
}

TEST_CASE("train, resume, eval and sr")
{
	Workspace ws;
	const auto a = mose_run({"train", "--config", ws.path("toy.json"), "--data", ws.path("data"), "--out", ws.path("a"), "--steps", "3",
							 "--seed", "4", "--threads", "1"});
	REQUIRE(a.code == 0);
	CHECK(fs::exists(ws.path("a/final.msck")));
	const auto log = slurp(ws.path("a/train_log.csv"));
	CHECK(log.starts_with("step,l_total,l_ncc,l_ssim,l_moe,l_mse\n"));
	CHECK(std::count(log.begin(), log.end(), '\n') == 4);

	// Same seed, different thread count: same bytes.
	REQUIRE(mose_run({"train", "--config", ws.path("toy.json"), "--data", ws.path("data"), "--out", ws.path("b"), "--steps", "3", "--seed",
					  "4", "--threads", "2"})
				.code == 0);
	CHECK(slurp(ws.path("a/final.msck")) == slurp(ws.path("b/final.msck")));

	const auto res = mose_run({"train", "--resume", ws.path("a/final.msck"), "--data", ws.path("data"), "--out", ws.path("a"), "--steps", "2"});
	REQUIRE(res.code == 0);
	CHECK(load_checkpoint(ws.path("a/final.msck")).state.step == 5);
	const auto log2 = slurp(ws.path("a/train_log.csv"));
	CHECK(std::count(log2.begin(), log2.end(), '\n') == 6);
	CHECK(mose_run({"train", "--resume", ws.path("a/final.msck"), "--data", ws.path("data"), "--out", ws.path("a"), "--seed", "9"}).code ==
		  cli::kUsage);

	const auto ev = mose_run({"eval", "--ckpt", ws.path("a/final.msck"), "--data", ws.path("data"), "--report", ws.path("report.csv")});
	REQUIRE(ev.code == 0);
	const auto report = slurp(ws.path("report.csv"));
	CHECK(report.starts_with("image_id,psnr_db,ssim,ncc,bicubic_psnr_db,bicubic_ssim,bicubic_ncc\n0000,"));
	CHECK(report.find("\nmean,") != std::string::npos);

	// Same-size pairs cannot be evaluated as super-resolution.
	REQUIRE(mose_run({"synth", "--out", ws.path("flat"), "--count", "1", "--size", "16", "--scale", "1"}).code == 0);
	CHECK(mose_run({"eval", "--ckpt", ws.path("a/final.msck"), "--data", ws.path("flat"), "--report", ws.path("r1.csv")}).code ==
		  cli::kUsage);
	CHECK_FALSE(fs::exists(ws.path("r1.csv")));

	const auto sr = mose_run({"sr", "--ckpt", ws.path("a/final.msck"), "--in", ws.path("data/0000_lr.msr"), "--out", ws.path("up.msr"),
							  "--png", ws.path("up.png")});
	REQUIRE(sr.code == 0);
	const auto up = read_msr(ws.path("up.msr"));
	CHECK(up.height == 32);
	CHECK(up.width == 32);
	CHECK(fs::exists(ws.path("up.png")));

	const auto missing = mose_run({"sr", "--ckpt", ws.path("nope.msck"), "--in", ws.path("data/0000_lr.msr"), "--out", ws.path("x.msr")});
	CHECK(missing.code == cli::kData);
	CHECK_FALSE(fs::exists(ws.path("x.msr")));
	CHECK(mose_run({"eval", "--ckpt", ws.path("a/final.msck"), "--data", ws.path("void"), "--report", ws.path("v.csv")}).code == cli::kData);
}

TEST_CASE("gradcheck command")
{
	Workspace ws;
	const auto ok = mose_run({"gradcheck", "--config", ws.path("toy.json"), "--max-probes", "2", "--threads", "1"});
	CHECK(ok.code == 0);
	CHECK(ok.out.find("PASS") != std::string::npos);
	const auto bad = mose_run({"gradcheck", "--config", ws.path("toy.json"), "--max-probes", "2", "--inject-fault"});
	CHECK(bad.code == cli::kNumeric);
	CHECK(bad.out.find("FAIL") != std::string::npos);
}
