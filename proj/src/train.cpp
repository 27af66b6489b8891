#include "mose/train.hpp"

namespace mose
{
	template <typename S>
	LossReport train_step(const SrModel<S> &model, ParameterSet<S> &params, AdamState<S> &state, const Adam &adam, const Tensor<S> &lr,
						  const Tensor<S> &hr, const LossWeights &weights, int threads)
	{
		params.zero_grad();
		const BatchLoss<S> loss = batch_loss(model, params, lr, hr, weights, true, threads);
		for (const auto &e : params)
			if (!e.grad.all_finite())
				throw NumericError("non-finite gradient for '" + e.name + "' at step " + std::to_string(state.step + 1));
		adam.step(params, state);
		return {state.step, static_cast<double>(loss.total), static_cast<double>(loss.ncc), static_cast<double>(loss.ssim),
				static_cast<double>(loss.moe), static_cast<double>(loss.mse)};
	}

	template LossReport train_step(const SrModel<float> &, ParameterSet<float> &, AdamState<float> &, const Adam &, const Tensor<float> &,
								   const Tensor<float> &, const LossWeights &, int);
	template LossReport train_step(const SrModel<double> &, ParameterSet<double> &, AdamState<double> &, const Adam &,
								   const Tensor<double> &, const Tensor<double> &, const LossWeights &, int);
} // namespace mose
