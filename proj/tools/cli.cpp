#include "cli.hpp"

#include "mose/checkpoint.hpp"
#include "mose/data.hpp"
#include "mose/metrics.hpp"
#include "mose/parallel.hpp"
#include "mose/verify.hpp"

#include <CLI11.hpp>

#include <array>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>

namespace mose::cli
{
	namespace fs = std::filesystem;

	int resolve_threads(int flag)
	{
		if (std::getenv("MOSE_THREADS"))
			return default_threads();
		return flag > 0 ? flag : default_threads();
	}

	namespace
	{
		std::string fmt(double v)
		{
			if (std::isinf(v))
				return v > 0 ? "inf" : "-inf";
			char buf[64];
			std::snprintf(buf, sizeof buf, "%.9g", v);
			return buf;
		}

		// Per-band range over every HR raster; stored with checkpoints.
		std::vector<BandStats> corpus_stats(const std::vector<PairSample> &pairs)
		{
			std::vector<BandStats> stats = pairs.front().hr.band_stats;
			for (const auto &p : pairs)
				for (std::size_t b = 0; b < stats.size(); ++b)
				{
					stats[b].min = std::min(stats[b].min, p.hr.band_stats[b].min);
					stats[b].max = std::max(stats[b].max, p.hr.band_stats[b].max);
				}
			return stats;
		}

		void check_corpus(const std::vector<PairSample> &pairs, const ModelConfig &cfg)
		{
			const PairSample &p = pairs.front();
			if (p.lr.bands != cfg.in_channels)
				throw DataError("corpus has " + std::to_string(p.lr.bands) + " bands, the model expects " + std::to_string(cfg.in_channels));
			if (p.scale != cfg.scale)
				throw DataError("corpus pairs are " + std::to_string(p.scale) + "x, the model upscales " + std::to_string(cfg.scale) + "x");
		}

		Tensor<float> clamp01(Tensor<float> t)
		{
			for (auto &v : t.values())
				v = std::clamp(v, 0.0f, 1.0f);
			return t;
		}

		// One example of a B x S x H x W batch.
		Tensor<float> example(const Tensor<float> &batch, Index b)
		{
			const Index per = batch.size() / batch.dim(0);
			return Tensor<float>({batch.dim(1), batch.dim(2), batch.dim(3)},
								 std::vector<float>(batch.data() + b * per, batch.data() + (b + 1) * per));
		}

		std::string checkpoint_name(Index step)
		{
			char buf[32];
			std::snprintf(buf, sizeof buf, "ckpt_%06lld.msck", static_cast<long long>(step));
			return buf;
		}

		constexpr const char *kLogHeader = "step,l_total,l_ncc,l_ssim,l_moe,l_mse";

		// Rows of an earlier log up to and including `last_step`, for resumed runs.
		std::vector<std::string> previous_rows(const fs::path &log, Index last_step)
		{
			std::vector<std::string> rows;
			if (!fs::exists(log))
				return rows;
			std::istringstream in(read_file(log.string()));
			std::string line;
			std::getline(in, line);
			while (std::getline(in, line))
			{
				if (line.empty())
					continue;
				if (std::stoll(line.substr(0, line.find(','))) <= last_step)
					rows.push_back(line);
			}
			return rows;
		}

		void write_log(const fs::path &log, const std::vector<std::string> &rows)
		{
			std::string text = std::string(kLogHeader) + "\n";
			for (const auto &r : rows)
				text += r + "\n";
			write_file_atomic(log.string(), text);
		}

		struct TrainArgs
		{
			std::string config, data, out, resume;
			std::optional<std::uint64_t> seed;
			Index steps = 0;
			int threads = 0;
		};

		int cmd_train(const TrainArgs &a, std::ostream &out)
		{
			std::optional<ModelCheckpoint> resumed;
			if (!a.resume.empty())
				resumed = load_checkpoint(a.resume);
			ModelConfig cfg;
			if (!a.config.empty())
			{
				cfg = load_config(a.config);
				if (resumed && config_to_json(cfg) != config_to_json(resumed->config))
					throw InvalidArgument("--config differs from the configuration stored in " + a.resume);
			}
			else if (resumed)
				cfg = resumed->config;
			else
				throw InvalidArgument("train needs --config (or --resume)");

			std::uint64_t seed = a.seed.value_or(0);
			if (resumed)
			{
				if (a.seed && *a.seed != resumed->state.seed)
					throw InvalidArgument("--seed differs from the seed stored in " + a.resume);
				seed = resumed->state.seed;
			}

			const auto pairs = load_corpus(a.data);
			check_corpus(pairs, cfg);
			const int threads = resolve_threads(a.threads);

			ParameterSet<float> params;
			Rng init = Rng(seed).split("init");
			SrModel<float> model(cfg, params, init);
			AdamState<float> adam;
			Index start = 0;
			if (resumed)
			{
				for (std::size_t i = 0; i < params.size(); ++i)
					params.assign(i, resumed->params.value(i));
				adam = resumed->adam;
				start = resumed->state.step;
			}
			const Adam optimizer = Adam::from(cfg.train);
			const Batcher batcher(static_cast<Index>(pairs.size()), cfg.train.batch_size, seed);
			// Zero steps means the reference schedule: 70 epochs.
			const Index steps = a.steps > 0 ? a.steps : 70 * batcher.batches_per_epoch();

			fs::create_directories(a.out);
			const fs::path log = fs::path(a.out) / "train_log.csv";
			std::vector<std::string> rows = resumed ? previous_rows(log, start) : std::vector<std::string>{};
			TrainState state{start, seed, corpus_stats(pairs)};

			out << "training " << params.scalar_count() << " parameters on " << pairs.size() << " pairs, steps " << start + 1 << ".."
				<< start + steps << ", " << threads << " thread(s)\n";
			for (Index s = start; s < start + steps; ++s)
			{
				const auto batch = batcher.batch_for_step(s);
				const auto report = train_step(model, params, adam, optimizer, stack_lr(pairs, batch), stack_hr(pairs, batch), cfg.loss, threads);
				state.step = s + 1;
				rows.push_back(std::to_string(state.step) + "," + fmt(report.total) + "," + fmt(report.ncc) + "," + fmt(report.ssim) + "," +
							   fmt(report.moe) + "," + fmt(report.mse));
				if (state.step % 50 == 0 || s + 1 == start + steps)
					out << "step " << state.step << " loss " << fmt(report.total) << " (ncc " << fmt(report.ncc) << ", ssim " << fmt(report.ssim)
						<< ", moe " << fmt(report.moe) << ")\n";
				if (cfg.train.checkpoint_every > 0 && state.step % cfg.train.checkpoint_every == 0)
				{
					save_checkpoint((fs::path(a.out) / checkpoint_name(state.step)).string(), cfg, params, &adam, state);
					write_log(log, rows);
				}
			}
			save_checkpoint((fs::path(a.out) / "final.msck").string(), cfg, params, &adam, state);
			write_log(log, rows);
			out << "wrote " << (fs::path(a.out) / "final.msck").string() << "\n";
			return kOk;
		}

		// The model only holds parameter indices, so a layout built from the same
		// config addresses a loaded parameter set directly.
		SrModel<float> layout_for(const ModelConfig &cfg)
		{
			ParameterSet<float> scratch;
			Rng rng(0);
			return SrModel<float>(cfg, scratch, rng);
		}

		struct EvalArgs
		{
			std::string ckpt, data, report;
			int threads = 0;
		};

		int cmd_eval(const EvalArgs &a, std::ostream &out)
		{
			const auto ck = load_checkpoint(a.ckpt);
			const auto pairs = load_corpus(a.data);
			if (pairs.front().scale == 1)
				throw InvalidArgument("eval needs pairs with hr larger than lr; " + a.data + " holds same-size (r=1) pairs");
			check_corpus(pairs, ck.config);
			const int threads = resolve_threads(a.threads);
			const SrModel<float> model = layout_for(ck.config);
			const Index r = ck.config.scale;

			std::string text = "image_id,psnr_db,ssim,ncc,bicubic_psnr_db,bicubic_ssim,bicubic_ncc\n";
			std::array<double, 6> sum{};
			const Index n = static_cast<Index>(pairs.size());
			const Index chunk = std::max<Index>(threads, 1);
			for (Index start = 0; start < n; start += chunk)
			{
				std::vector<Index> idx(static_cast<std::size_t>(std::min(chunk, n - start)));
				std::iota(idx.begin(), idx.end(), start);
				const Tensor<float> sr = model.forward(ck.params, stack_lr(pairs, idx), threads).sr;
				for (std::size_t j = 0; j < idx.size(); ++j)
				{
					const PairSample &p = pairs[static_cast<std::size_t>(idx[j])];
					const Tensor<float> gt = p.hr.tensor();
					const Tensor<float> pred = clamp01(example(sr, static_cast<Index>(j)));
					const Tensor<float> base = clamp01(bicubic_resize(p.lr.tensor(), Scale{r, 1}));
					const std::array<double, 6> m{psnr(pred, gt), ssim_metric(pred, gt), ncc_metric(pred, gt),
												  psnr(base, gt), ssim_metric(base, gt), ncc_metric(base, gt)};
					text += p.id;
					for (std::size_t c = 0; c < m.size(); ++c)
					{
						text += "," + fmt(m[c]);
						sum[c] += m[c];
					}
					text += "\n";
				}
			}
			text += "mean";
			for (double v : sum)
				text += "," + fmt(v / static_cast<double>(n));
			text += "\n";
			write_file_atomic(a.report, text);
			out << "mean psnr " << fmt(sum[0] / static_cast<double>(n)) << " dB (bicubic " << fmt(sum[3] / static_cast<double>(n))
				<< "), ssim " << fmt(sum[1] / static_cast<double>(n)) << " (bicubic " << fmt(sum[4] / static_cast<double>(n)) << ") over "
				<< n << " images\n";
			return kOk;
		}

		struct SrArgs
		{
			std::string ckpt, in, out, png;
			int threads = 0;
		};

		int cmd_sr(const SrArgs &a, std::ostream &out)
		{
			const auto ck = load_checkpoint(a.ckpt);
			const RasterImage img = read_msr(a.in);
			if (img.bands != ck.config.in_channels)
				throw DataError(a.in + " has " + std::to_string(img.bands) + " bands, the model expects " + std::to_string(ck.config.in_channels));
			const SrModel<float> model = layout_for(ck.config);
			const Tensor<float> planes = img.tensor();
			Tensor<float> batch({1, planes.dim(0), planes.dim(1), planes.dim(2)}, std::vector<float>(planes.values().begin(), planes.values().end()));
			const Tensor<float> sr = clamp01(example(model.forward(ck.params, batch, resolve_threads(a.threads)).sr, 0));
			// Outputs live in the input's normalized domain, so they carry its stats.
			const RasterImage result = RasterImage::from_tensor(sr, img.band_stats);
			write_msr(a.out, result);
			if (!a.png.empty())
				write_png(a.png, result, 8);
			out << "wrote " << a.out << " (" << result.bands << "x" << result.height << "x" << result.width << ")\n";
			return kOk;
		}

		int cmd_audit(const std::string &config, std::ostream &out)
		{
			const ModelConfig cfg = load_config(config);
			ParameterSet<float> params;
			Rng rng(0);
			const SrModel<float> model(cfg, params, rng);

			const bool moe = cfg.ffn == FfnKind::moe;
			const std::string kind = !moe ? "mlp" : cfg.moe.smart_merger ? "moe-sm" : "moe";
			ParamCount layer;
			if (moe)
				layer = moe_param_count(cfg.moe);
			else
				layer.active = layer.sparse = mlp_param_count(cfg.embed_dim, cfg.mlp_ratio * cfg.embed_dim);

			out << std::left << std::setw(16) << "layer" << std::setw(10) << "ffn" << std::right << std::setw(12) << "apc" << std::setw(12)
				<< "spc" << "\n";
			ParamCount ffn_total;
			for (const auto &b : model.blocks())
			{
				// Cross-check the closed form against what the layer registered.
				const std::string sub = b.prefix + (moe ? ".moe." : ".mlp.");
				Index registered = 0;
				for (const auto &e : params)
					if (e.name.starts_with(sub))
						registered += e.value.size();
				if (registered != layer.sparse)
					throw std::logic_error("audit: " + sub + " registers " + std::to_string(registered) + " parameters, expected " +
										   std::to_string(layer.sparse));
				out << std::left << std::setw(16) << b.prefix << std::setw(10) << kind << std::right << std::setw(12) << layer.active
					<< std::setw(12) << layer.sparse << "\n";
				ffn_total.active += layer.active;
				ffn_total.sparse += layer.sparse;
			}
			const Index total = params.scalar_count();
			const Index inactive = ffn_total.sparse - ffn_total.active;
			out << std::left << std::setw(26) << "ffn total" << std::right << std::setw(12) << ffn_total.active << std::setw(12)
				<< ffn_total.sparse << "\n";
			out << std::left << std::setw(26) << "model total" << std::right << std::setw(12) << total - inactive << std::setw(12) << total
				<< "\n";
			return kOk;
		}

		struct GradArgs
		{
			std::string config;
			std::uint64_t seed = 0;
			Index probes = 0;
			bool inject_fault = false;
			int threads = 0;
		};

		int cmd_gradcheck(const GradArgs &a, std::ostream &out)
		{
			constexpr double tolerance = 1e-4;
			ModelGradCheckOptions opt;
			opt.seed = a.seed;
			opt.batch = 1;
			opt.lr_size = 16;
			opt.inject_fault = a.inject_fault;
			opt.check.eps = 1e-5;
			opt.check.max_probes_per_entry = a.probes;
			opt.check.threads = resolve_threads(a.threads);
			const auto res = model_grad_check(load_config(a.config), opt);
			const auto &r = res.report;
			const bool ok = r.max_error < tolerance;
			out << "parameters " << res.parameters << ", probes " << r.probes << "\n";
			out << "max relative error " << fmt(r.max_error) << " (tolerance " << fmt(tolerance) << ")\n";
			out << "worst parameter " << r.worst_entry << "[" << r.worst_index << "] analytic " << fmt(r.worst_analytic) << " numeric "
				<< fmt(r.worst_numeric) << "\n";
			out << (ok ? "PASS" : "FAIL") << "\n";
			return ok ? kOk : kNumeric;
		}

		struct SynthArgs
		{
			std::string out;
			Index count = 8, size = 64, scale = 2, bands = 4;
			std::uint64_t seed = 0;
		};

		int cmd_synth(const SynthArgs &a, std::ostream &out)
		{
			Rng rng = Rng(a.seed).split("data");
			const auto pairs = synth_pairs(a.count, a.size, a.scale, rng, a.bands);
			save_corpus(a.out, pairs);
			out << "wrote " << pairs.size() << " pairs (" << a.bands << " bands, " << a.size / a.scale << " -> " << a.size << ") to " << a.out
				<< "\n";
			return kOk;
		}
	} // namespace

	int run(const std::vector<std::string> &args, std::ostream &out, std::ostream &err)
	{
		CLI::App app{"multispectral super-resolution: windowed attention with a mixture of experts"};
		app.name("mose");
		app.require_subcommand(1);

		TrainArgs train;
		std::uint64_t train_seed = 0;
		auto *t = app.add_subcommand("train", "train a model on an lr/hr corpus");
		t->add_option("--config", train.config, "model config (JSON)")->check(CLI::ExistingFile);
		t->add_option("--data", train.data, "corpus directory")->required();
		t->add_option("--out", train.out, "output directory")->required();
		auto *seed_opt = t->add_option("--seed", train_seed, "initialization and shuffling seed");
		t->add_option("--steps", train.steps, "optimizer steps (0: 70 epochs)")->check(CLI::NonNegativeNumber);
		t->add_option("--resume", train.resume, "continue from a checkpoint");
		t->add_option("--threads", train.threads, "worker threads (0: all cores)")->check(CLI::NonNegativeNumber);

		EvalArgs eval;
		auto *e = app.add_subcommand("eval", "PSNR/SSIM/NCC of a checkpoint and the bicubic baseline");
		e->add_option("--ckpt", eval.ckpt, "checkpoint")->required();
		e->add_option("--data", eval.data, "corpus directory")->required();
		e->add_option("--report", eval.report, "CSV report path")->required();
		e->add_option("--threads", eval.threads, "worker threads (0: all cores)")->check(CLI::NonNegativeNumber);

		SrArgs sr;
		auto *s = app.add_subcommand("sr", "super-resolve one MSR raster");
		s->add_option("--ckpt", sr.ckpt, "checkpoint")->required();
		s->add_option("--in", sr.in, "input .msr")->required();
		s->add_option("--out", sr.out, "output .msr")->required();
		s->add_option("--png", sr.png, "optional 8-bit PNG preview");
		s->add_option("--threads", sr.threads, "worker threads (0: all cores)")->check(CLI::NonNegativeNumber);

		std::string audit_config;
		auto *au = app.add_subcommand("audit", "active / sparse parameter counts");
		au->add_option("--config", audit_config, "model config (JSON)")->required();

		GradArgs grad;
		auto *g = app.add_subcommand("gradcheck", "finite-difference check of the full model in f64");
		g->add_option("--config", grad.config, "model config (JSON)")->required();
		g->add_option("--seed", grad.seed, "seed for weights and data");
		g->add_option("--max-probes", grad.probes, "probes per parameter entry (0: every scalar)")->check(CLI::NonNegativeNumber);
		g->add_option("--threads", grad.threads, "worker threads (0: all cores)")->check(CLI::NonNegativeNumber);
		g->add_flag("--inject-fault", grad.inject_fault)->group(""); // test hook

		SynthArgs synth;
		auto *sy = app.add_subcommand("synth", "generate a synthetic lr/hr corpus");
		sy->add_option("--out", synth.out, "output directory")->required();
		sy->add_option("--count", synth.count, "pairs")->check(CLI::PositiveNumber);
		sy->add_option("--size", synth.size, "hr side length")->check(CLI::PositiveNumber);
		sy->add_option("--scale", synth.scale, "upscaling factor")->check(CLI::PositiveNumber);
		sy->add_option("--bands", synth.bands, "spectral bands")->check(CLI::PositiveNumber);
		sy->add_option("--seed", synth.seed, "generation seed");

		std::vector<std::string> reversed(args.rbegin(), args.rend());
		try
		{
			app.parse(reversed);
		}
		catch (const CLI::ParseError &ex)
		{
			std::ostringstream o, x;
			const int code = app.exit(ex, o, x);
			out << o.str();
			err << x.str();
			return code == 0 ? kOk : kUsage;
		}

		try
		{
			if (*t)
			{
				if (*seed_opt)
					train.seed = train_seed;
				return cmd_train(train, out);
			}
			if (*e)
				return cmd_eval(eval, out);
			if (*s)
				return cmd_sr(sr, out);
			if (*au)
				return cmd_audit(audit_config, out);
			if (*g)
				return cmd_gradcheck(grad, out);
			return cmd_synth(synth, out);
		}
		catch (const InvalidArgument &ex)
		{
			err << "error: " << ex.what() << "\n";
			return kUsage;
		}
		catch (const DataError &ex)
		{
			err << "data error: " << ex.what() << "\n";
			return kData;
		}
		catch (const fs::filesystem_error &ex)
		{
			err << "data error: " << ex.what() << "\n";
			return kData;
		}
		catch (const NumericError &ex)
		{
			err << "numeric error: " << ex.what() << "\n";
			return kNumeric;
		}
		catch (const std::exception &ex)
		{
			err << "error: " << ex.what() << "\n";
			return kUsage;
		}
	}
} // namespace mose::cli
