#pragma once

#include "mose/attention.hpp"
#include "mose/losses.hpp"
#include "mose/moe.hpp"

#include <string>

namespace mose
{
	enum class FfnKind
	{
		moe,
		mlp
	};

	struct TrainConfig
	{
		double lr = 1e-4;
		double beta1 = 0.9;
		double beta2 = 0.999;
		double adam_eps = 1e-8;
		Index batch_size = 8;
		Index checkpoint_every = 100;
	};

	struct ModelConfig
	{
		Index in_channels = 4;
		Index embed_dim = 90;
		Index groups = 4;
		Index blocks_per_group = 6;
		Index scale = 4;
		// channels and shift are derived from embed_dim and block parity.
		AttentionConfig attention;
		FfnKind ffn = FfnKind::moe;
		// channels derived from embed_dim.
		MoeConfig moe;
		Index mlp_ratio = 2;
		LossWeights loss;
		TrainConfig train;

		/// Fills derived fields and checks every invariant.
		void finalize();

		AttentionConfig block_attention(Index block) const;
		Index window() const { return attention.window; }
	};

	/// Parses a JSON config document. Unknown keys are errors; absent keys keep defaults.
	ModelConfig parse_config(const std::string &json_text);
	ModelConfig load_config(const std::string &path);

	/// Complete JSON echo with every field spelled out.
	std::string config_to_json(const ModelConfig &cfg, int indent = -1);

	/// Desk-scale configuration: T=16, one group of two blocks, M=8, E=4, k=2.
	ModelConfig toy_config(Index scale = 2);
} // namespace mose
