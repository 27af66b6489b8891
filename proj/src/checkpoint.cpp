#include "mose/checkpoint.hpp"

#include <json.hpp>

#include <cstring>

namespace mose
{
	using nlohmann::json;

	namespace
	{
		const std::string kMomentPrefix = "optim.m.";
		const std::string kVariancePrefix = "optim.v.";

		void put_u32(std::string &out, std::uint32_t v)
		{
			char b[4];
			std::memcpy(b, &v, 4);
			out.append(b, 4);
		}

		std::uint32_t checked_u32(std::size_t v, const char *what)
		{
			if (v > UINT32_MAX)
				throw InvalidArgument(std::string("checkpoint: ") + what + " does not fit in 32 bits");
			return static_cast<std::uint32_t>(v);
		}

		struct Cursor
		{
			std::string_view bytes;
			std::size_t pos = 0;

			void need(std::size_t n, const std::string &what) const
			{
				if (bytes.size() - pos < n)
					throw FormatError("checkpoint: truncated " + what, pos);
			}
			std::uint32_t u32(const std::string &what)
			{
				need(4, what);
				std::uint32_t v;
				std::memcpy(&v, bytes.data() + pos, 4);
				pos += 4;
				return v;
			}
			std::string_view take(std::size_t n, const std::string &what)
			{
				need(n, what);
				auto s = bytes.substr(pos, n);
				pos += n;
				return s;
			}
		};
	} // namespace

	std::string encode_checkpoint(const CheckpointFile &file)
	{
		std::string out(kCheckpointMagic, 4);
		put_u32(out, kCheckpointVersion);
		put_u32(out, checked_u32(file.json.size(), "JSON blob"));
		out += file.json;
		put_u32(out, checked_u32(file.entries.size(), "entry count"));
		for (const auto &[name, t] : file.entries)
		{
			put_u32(out, checked_u32(name.size(), "entry name"));
			out += name;
			put_u32(out, checked_u32(static_cast<std::size_t>(t.rank()), "rank"));
			for (Index e : t.shape())
				put_u32(out, checked_u32(static_cast<std::size_t>(e), "extent"));
			out.append(reinterpret_cast<const char *>(t.data()), static_cast<std::size_t>(t.size()) * sizeof(float));
		}
		return out;
	}

	CheckpointFile decode_checkpoint(std::string_view bytes)
	{
		Cursor c{bytes};
		if (c.take(4, "magic") != std::string_view(kCheckpointMagic, 4))
			throw FormatError("checkpoint: bad magic", 0);
		const std::size_t version_at = c.pos;
		if (const auto v = c.u32("version"); v != kCheckpointVersion)
			throw FormatError("checkpoint: unsupported version " + std::to_string(v), version_at);
		CheckpointFile file;
		file.json = std::string(c.take(c.u32("JSON length"), "JSON blob"));
		const std::uint32_t count = c.u32("entry count");
		for (std::uint32_t i = 0; i < count; ++i)
		{
			std::string name(c.take(c.u32("entry name length"), "entry name"));
			const std::size_t rank_at = c.pos;
			const std::uint32_t rank = c.u32("rank of " + name);
			if (rank > 8)
				throw FormatError("checkpoint: implausible rank for '" + name + "'", rank_at);
			Shape shape;
			std::size_t n = 1;
			for (std::uint32_t a = 0; a < rank; ++a)
			{
				shape.push_back(c.u32("extents of " + name));
				n *= static_cast<std::size_t>(shape.back());
				if (n > bytes.size())
					throw FormatError("checkpoint: extents of '" + name + "' exceed the file size", c.pos - 4);
			}
			const auto payload = c.take(n * sizeof(float), "payload of " + name);
			std::vector<float> data(n);
			std::memcpy(data.data(), payload.data(), payload.size());
			file.entries.emplace_back(std::move(name), Tensor<float>(std::move(shape), std::move(data)));
		}
		if (c.pos != bytes.size())
			throw FormatError("checkpoint: trailing bytes", c.pos);
		return file;
	}

	void save_checkpoint(const std::string &path, const ModelConfig &cfg, const ParameterSet<float> &params, const AdamState<float> *adam,
						 const TrainState &state)
	{
		json stats = json::array();
		for (const auto &s : state.band_stats)
			stats.push_back({s.min, s.max});
		json meta = {{"config", json::parse(config_to_json(cfg))},
					 {"state",
					  {{"step", state.step},
					   {"seed", state.seed},
					   {"adam_step", adam ? adam->step : 0},
					   {"band_stats", stats}}}};
		CheckpointFile file;
		file.json = meta.dump();
		for (const auto &e : params)
			file.entries.emplace_back(e.name, e.value);
		if (adam && adam->m.size() == params.size())
		{
			std::size_t i = 0;
			for (const auto &e : params)
				file.entries.emplace_back(kMomentPrefix + e.name, adam->m[i++]);
			i = 0;
			for (const auto &e : params)
				file.entries.emplace_back(kVariancePrefix + e.name, adam->v[i++]);
		}
		write_file_atomic(path, encode_checkpoint(file));
	}

	ModelCheckpoint load_checkpoint(const std::string &path)
	{
		CheckpointFile file;
		try
		{
			file = decode_checkpoint(read_file(path));
		}
		catch (const FormatError &e)
		{
			throw FormatError(path + ": " + e.what(), e.offset());
		}
		ModelCheckpoint ck;
		json meta;
		try
		{
			meta = json::parse(file.json);
			ck.config = parse_config(meta.at("config").dump());
			const json &st = meta.at("state");
			ck.state.step = st.at("step").get<Index>();
			ck.state.seed = st.at("seed").get<std::uint64_t>();
			ck.adam.step = st.at("adam_step").get<Index>();
			for (const auto &s : st.at("band_stats"))
				ck.state.band_stats.push_back({s.at(0).get<float>(), s.at(1).get<float>()});
		}
		catch (const json::exception &e)
		{
			throw FormatError(path + ": malformed checkpoint metadata: " + e.what(), 12);
		}
		catch (const InvalidArgument &e)
		{
			throw FormatError(path + ": stored config is invalid: " + e.what(), 12);
		}

		Rng rng(0);
		SrModel<float> layout(ck.config, ck.params, rng);
		std::vector<bool> seen(ck.params.size(), false);
		std::vector<Tensor<float>> m(ck.params.size()), v(ck.params.size());
		std::size_t moments = 0;
		for (auto &[name, t] : file.entries)
		{
			std::vector<Tensor<float>> *slot = nullptr;
			std::string base = name;
			if (name.starts_with(kMomentPrefix))
			{
				slot = &m;
				base = name.substr(kMomentPrefix.size());
			}
			else if (name.starts_with(kVariancePrefix))
			{
				slot = &v;
				base = name.substr(kVariancePrefix.size());
			}
			if (!ck.params.contains(base))
				throw FormatError(path + ": unexpected entry '" + name + "'", 0);
			const std::size_t i = ck.params.index_of(base);
			if (t.shape() != ck.params.value(i).shape())
				throw FormatError(path + ": entry '" + name + "' has shape " + shape_string(t.shape()) + ", expected " +
									  shape_string(ck.params.value(i).shape()),
								  0);
			if (slot)
			{
				(*slot)[i] = std::move(t);
				++moments;
			}
			else
			{
				ck.params.assign(i, std::move(t));
				seen[i] = true;
			}
		}
		for (std::size_t i = 0; i < seen.size(); ++i)
			if (!seen[i])
				throw FormatError(path + ": missing parameter '" + ck.params.entry(i).name + "'", 0);
		if (moments == 2 * ck.params.size())
		{
			ck.adam.m = std::move(m);
			ck.adam.v = std::move(v);
		}
		else if (moments != 0)
			throw FormatError(path + ": optimizer state is incomplete", 0);
		else
			ck.adam.step = 0;
		return ck;
	}
} // namespace mose
