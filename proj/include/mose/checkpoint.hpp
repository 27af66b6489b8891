#pragma once

#include "mose/raster.hpp"
#include "mose/train.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace mose
{
	inline constexpr char kCheckpointMagic[4] = {'M', 'S', 'C', 'K'};
	inline constexpr std::uint32_t kCheckpointVersion = 1;

	/// Raw container: a JSON blob plus named f32 tensors in file order.
	struct CheckpointFile
	{
		std::string json;
		std::vector<std::pair<std::string, Tensor<float>>> entries;
	};

	std::string encode_checkpoint(const CheckpointFile &file);
	CheckpointFile decode_checkpoint(std::string_view bytes);

	/// Training state stored beside the weights.
	struct TrainState
	{
		Index step = 0;
		std::uint64_t seed = 0;
		std::vector<BandStats> band_stats; // corpus normalization, for denormalizing outputs
	};

	/// A model snapshot: config, parameters, optional Adam moments, training state.
	struct ModelCheckpoint
	{
		ModelConfig config;
		ParameterSet<float> params;
		AdamState<float> adam; // empty when the file carries no optimizer state
		TrainState state;
	};

	/// Serializes params (and Adam moments when state.m is populated) in
	/// registration order. Written through a temp file and renamed.
	void save_checkpoint(const std::string &path, const ModelConfig &cfg, const ParameterSet<float> &params, const AdamState<float> *adam,
						 const TrainState &state);

	/// Rebuilds the parameter layout from the stored config and fills every
	/// entry; missing, extra or mis-shaped entries are FormatErrors.
	ModelCheckpoint load_checkpoint(const std::string &path);
} // namespace mose
