#pragma once

#include "mose/parameters.hpp"

#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace mose
{
	/// Scalar objective over a parameter set. When `with_grad` is true it must
	/// accumulate d(objective)/d(param) into the grad slots of `params`.
	template <typename Scalar>
	using Objective = std::function<Scalar(ParameterSet<Scalar> &params, bool with_grad)>;

	struct GradCheckOptions
	{
		double eps = 1e-5;
		// 0 probes every scalar; otherwise at most this many per entry (evenly strided).
		Index max_probes_per_entry = 0;
		int threads = 1;
	};

	struct GradCheckReport
	{
		double max_error = 0.0;
		std::string worst_entry;
		Index worst_index = -1;
		double worst_analytic = 0.0;
		double worst_numeric = 0.0;
		Index probes = 0;
		// Worst error per probed entry, in registration order.
		std::vector<std::pair<std::string, double>> per_entry;
	};

	/// Compares analytic gradients with central differences. The error of one
	/// scalar is |analytic - numeric| / max(1, |numeric|); the report holds the max.
	/// Throws NumericError if the objective is non-finite at any probe point.
	template <typename Scalar>
	GradCheckReport grad_check(const Objective<Scalar> &f, ParameterSet<Scalar> params, const GradCheckOptions &options = {});
} // namespace mose
