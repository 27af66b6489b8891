#pragma once

#include "mose/config.hpp"
#include "mose/gradcheck.hpp"

#include <cstdint>

namespace mose
{
	struct ModelGradCheckOptions
	{
		std::uint64_t seed = 0;
		Index batch = 2;
		Index lr_size = 16;
		GradCheckOptions check;
		// Test hook: negate the analytic gradient of the reconstruction conv.
		bool inject_fault = false;
	};

	struct ModelGradCheckResult
	{
		GradCheckReport report;
		Index parameters = 0;
	};

	/// End-to-end f64 finite-difference check of the total loss (NCC, SSIM,
	/// importance and, when weighted, MSE) over a synthetic batch. Parameters
	/// are moved off their initial values first so that zero-initialized tables
	/// and the merger are probed at a generic point.
	ModelGradCheckResult model_grad_check(const ModelConfig &cfg, const ModelGradCheckOptions &options);
} // namespace mose
