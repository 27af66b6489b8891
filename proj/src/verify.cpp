#include "mose/verify.hpp"

#include "mose/data.hpp"
#include "mose/model.hpp"

namespace mose
{
	ModelGradCheckResult model_grad_check(const ModelConfig &cfg, const ModelGradCheckOptions &options)
	{
		Rng rng(options.seed);
		ParameterSet<double> params;
		Rng init = rng.split("init");
		SrModel<double> model(cfg, params, init);
		Rng jitter = rng.split("jitter");
		for (auto &e : params)
		{
			// Temperatures stay well above their clamp.
			const double std = e.name.ends_with(".tau") ? 0.005 : 0.05;
			for (auto &v : e.value.values())
				v += std * jitter.normal();
		}

		Rng data_rng = rng.split("data");
		const auto pairs = synth_pairs(options.batch, options.lr_size * cfg.scale, cfg.scale, data_rng, cfg.in_channels);
		std::vector<Index> all(static_cast<std::size_t>(options.batch));
		std::iota(all.begin(), all.end(), Index{0});
		const Tensor<double> lr = stack_lr(pairs, all).cast<double>();
		const Tensor<double> hr = stack_hr(pairs, all).cast<double>();

		const std::size_t fault = params.index_of("head.weight");
		Objective<double> f = [&](ParameterSet<double> &p, bool with_grad) {
			const double loss = batch_loss(model, p, lr, hr, cfg.loss, with_grad, 1).total;
			if (with_grad && options.inject_fault)
				p.grad(fault).flat() *= -1.0;
			return loss;
		};
		ModelGradCheckResult out;
		out.parameters = params.scalar_count();
		out.report = grad_check(f, params, options.check);
		return out;
	}
} // namespace mose
