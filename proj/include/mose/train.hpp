#pragma once

#include "mose/model.hpp"

#include <cstdint>

namespace mose
{
	template <typename S>
	struct AdamState
	{
		Index step = 0;
		std::vector<Tensor<S>> m, v; // one per parameter entry, same order

		void reset(const ParameterSet<S> &params)
		{
			step = 0;
			m.clear();
			v.clear();
			for (const auto &e : params)
			{
				m.emplace_back(e.value.shape());
				v.emplace_back(e.value.shape());
			}
		}
	};

	struct Adam
	{
		double lr = 1e-4;
		double beta1 = 0.9;
		double beta2 = 0.999;
		double eps = 1e-8;

		static Adam from(const TrainConfig &t) { return {t.lr, t.beta1, t.beta2, t.adam_eps}; }

		/// One bias-corrected update from the accumulated gradients.
		template <typename S>
		void step(ParameterSet<S> &params, AdamState<S> &state) const
		{
			if (state.m.size() != params.size())
				state.reset(params);
			++state.step;
			const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
			const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
			const S b1 = static_cast<S>(beta1), b2 = static_cast<S>(beta2);
			const S step_size = static_cast<S>(lr / c1), inv_c2 = static_cast<S>(1.0 / c2);
			for (std::size_t i = 0; i < params.size(); ++i)
			{
				auto g = params.grad(i).flat().array();
				auto m = state.m[i].flat().array();
				auto v = state.v[i].flat().array();
				m = b1 * m + (S(1) - b1) * g;
				v = b2 * v + (S(1) - b2) * g.square();
				params.value(i).flat().array() -= step_size * m / ((v * inv_c2).sqrt() + static_cast<S>(eps));
			}
		}
	};

	struct LossReport
	{
		Index step = 0;
		double total = 0, ncc = 0, ssim = 0, moe = 0, mse = 0;
	};

	/// Zero grads, forward + loss + backward over the batch, Adam update.
	/// A non-finite loss or gradient throws NumericError before any parameter moves.
	template <typename S>
	LossReport train_step(const SrModel<S> &model, ParameterSet<S> &params, AdamState<S> &state, const Adam &adam, const Tensor<S> &lr,
						  const Tensor<S> &hr, const LossWeights &weights, int threads = 1);
} // namespace mose
