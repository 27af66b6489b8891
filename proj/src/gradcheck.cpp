#include "mose/gradcheck.hpp"
#include "mose/parallel.hpp"

#include <algorithm>
#include <cmath>

namespace mose
{
	namespace
	{
		struct Probe
		{
			std::size_t entry;
			Index index;
		};

		template <typename Scalar>
		Scalar checked_eval(const Objective<Scalar> &f, ParameterSet<Scalar> &params, bool with_grad, const Probe *probe)
		{
			const Scalar v = f(params, with_grad);
			if (!std::isfinite(static_cast<double>(v)))
			{
				std::string where = probe ? params.entry(probe->entry).name + "[" + std::to_string(probe->index) + "]" : "base point";
				throw NumericError("grad_check: objective is non-finite at probe " + where);
			}
			return v;
		}
	} // namespace

	template <typename Scalar>
	GradCheckReport grad_check(const Objective<Scalar> &f, ParameterSet<Scalar> params, const GradCheckOptions &options)
	{
		if (!(options.eps > 0.0))
			throw InvalidArgument("grad_check: eps must be positive");

		params.zero_grad();
		checked_eval(f, params, true, nullptr);

		std::vector<Probe> probes;
		for (std::size_t e = 0; e < params.size(); ++e)
		{
			const Index n = params.value(e).size();
			// Evenly spaced probes when capped, every scalar otherwise.
			const Index m = options.max_probes_per_entry > 0 ? std::min(n, options.max_probes_per_entry) : n;
			for (Index k = 0; k < m; ++k)
				probes.push_back({e, k * n / m});
		}

		std::vector<double> numeric(probes.size());
		const int workers = std::max(1, std::min<int>(options.threads, static_cast<int>(probes.size())));
		const Scalar eps = static_cast<Scalar>(options.eps);

		parallel_for(workers, workers, [&](Index w) {
			ParameterSet<Scalar> local = params;
			for (std::size_t p = static_cast<std::size_t>(w); p < probes.size(); p += static_cast<std::size_t>(workers))
			{
				Scalar &slot = local.value(probes[p].entry)[probes[p].index];
				const Scalar saved = slot;
				slot = saved + eps;
				const Scalar plus = checked_eval(f, local, false, &probes[p]);
				slot = saved - eps;
				const Scalar minus = checked_eval(f, local, false, &probes[p]);
				slot = saved;
				numeric[p] = (static_cast<double>(plus) - static_cast<double>(minus)) / (2.0 * options.eps);
			}
		});

		GradCheckReport report;
		report.probes = static_cast<Index>(probes.size());
		for (std::size_t p = 0; p < probes.size(); ++p)
		{
			const double analytic = static_cast<double>(params.grad(probes[p].entry)[probes[p].index]);
			const double err = std::abs(analytic - numeric[p]) / std::max(1.0, std::abs(numeric[p]));
			const std::string &name = params.entry(probes[p].entry).name;
			if (report.per_entry.empty() || report.per_entry.back().first != name)
				report.per_entry.emplace_back(name, 0.0);
			report.per_entry.back().second = std::max(report.per_entry.back().second, err);
			if (err > report.max_error || report.worst_index < 0)
			{
				report.max_error = err;
				report.worst_entry = params.entry(probes[p].entry).name;
				report.worst_index = probes[p].index;
				report.worst_analytic = analytic;
				report.worst_numeric = numeric[p];
			}
		}
		return report;
	}

	template GradCheckReport grad_check<float>(const Objective<float> &, ParameterSet<float>, const GradCheckOptions &);
	template GradCheckReport grad_check<double>(const Objective<double> &, ParameterSet<double>, const GradCheckOptions &);
} // namespace mose
