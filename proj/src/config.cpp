#include "mose/config.hpp"

#include <json.hpp>

#include <fstream>
#include <set>
#include <sstream>

namespace mose
{
	using nlohmann::json;

	namespace
	{
		void reject_unknown(const json &obj, const std::set<std::string> &known, const std::string &where)
		{
			if (!obj.is_object())
				throw InvalidArgument("config: '" + where + "' must be a JSON object");
			for (const auto &[key, value] : obj.items())
				if (!known.count(key))
					throw InvalidArgument("config: unknown key '" + (where.empty() ? key : where + "." + key) + "'");
		}

		template <typename T>
		void read(const json &obj, const char *key, T &out, const std::string &where)
		{
			auto it = obj.find(key);
			if (it == obj.end())
				return;
			try
			{
				out = it->get<T>();
			}
			catch (const json::exception &)
			{
				throw InvalidArgument("config: key '" + where + key + "' has the wrong type");
			}
		}
	} // namespace

	void ModelConfig::finalize()
	{
		if (in_channels < 1 || embed_dim < 1 || groups < 1 || blocks_per_group < 1)
			throw InvalidArgument("config: in_channels, embed_dim, groups and blocks_per_group must be positive");
		if (scale < 2 || scale > 4)
			throw InvalidArgument("config: scale must be 2, 3 or 4");
		if (mlp_ratio < 1)
			throw InvalidArgument("config: mlp_ratio must be positive");
		attention.channels = embed_dim;
		attention.shift = 0;
		attention.validate();
		block_attention(1).validate();
		moe.channels = embed_dim;
		if (ffn == FfnKind::moe)
			moe.validate();
		loss.validate();
		if (!(train.lr > 0.0) || train.batch_size < 1 || train.checkpoint_every < 0)
			throw InvalidArgument("config: train.lr and train.batch_size must be positive");
		if (!(train.beta1 >= 0.0 && train.beta1 < 1.0) || !(train.beta2 >= 0.0 && train.beta2 < 1.0) || !(train.adam_eps > 0.0))
			throw InvalidArgument("config: Adam betas must lie in [0, 1) and eps must be positive");
	}

	AttentionConfig ModelConfig::block_attention(Index block) const
	{
		AttentionConfig a = attention;
		a.channels = embed_dim;
		a.shift = block % 2 == 0 ? 0 : attention.window / 2;
		return a;
	}

	ModelConfig parse_config(const std::string &text)
	{
		json doc;
		try
		{
			doc = json::parse(text);
		}
		catch (const json::parse_error &e)
		{
			throw InvalidArgument(std::string("config: invalid JSON: ") + e.what());
		}
		ModelConfig cfg;
		bool expert_hidden_given = false;
		reject_unknown(doc, {"in_channels", "embed_dim", "groups", "blocks_per_group", "scale", "attention", "ffn", "loss", "train"}, "");
		read(doc, "in_channels", cfg.in_channels, "");
		read(doc, "embed_dim", cfg.embed_dim, "");
		read(doc, "groups", cfg.groups, "");
		read(doc, "blocks_per_group", cfg.blocks_per_group, "");
		read(doc, "scale", cfg.scale, "");
		if (doc.contains("attention"))
		{
			const json &a = doc["attention"];
			reject_unknown(a, {"heads", "window", "rpe", "logcpb", "lepe", "cpb_hidden", "cosine"}, "attention");
			read(a, "heads", cfg.attention.heads, "attention.");
			read(a, "window", cfg.attention.window, "attention.");
			read(a, "rpe", cfg.attention.pe_rpe, "attention.");
			read(a, "logcpb", cfg.attention.pe_logcpb, "attention.");
			read(a, "lepe", cfg.attention.pe_lepe, "attention.");
			read(a, "cpb_hidden", cfg.attention.cpb_hidden, "attention.");
			read(a, "cosine", cfg.attention.cosine, "attention.");
		}
		if (doc.contains("ffn"))
		{
			const json &f = doc["ffn"];
			reject_unknown(f, {"kind", "experts", "active", "expert_hidden", "smart_merger", "mlp_ratio"}, "ffn");
			std::string kind = "moe";
			read(f, "kind", kind, "ffn.");
			if (kind == "moe")
				cfg.ffn = FfnKind::moe;
			else if (kind == "mlp")
				cfg.ffn = FfnKind::mlp;
			else
				throw InvalidArgument("config: ffn.kind must be \"moe\" or \"mlp\", got \"" + kind + "\"");
			read(f, "experts", cfg.moe.experts, "ffn.");
			read(f, "active", cfg.moe.active, "ffn.");
			expert_hidden_given = f.contains("expert_hidden");
			read(f, "expert_hidden", cfg.moe.expert_hidden, "ffn.");
			read(f, "smart_merger", cfg.moe.smart_merger, "ffn.");
			read(f, "mlp_ratio", cfg.mlp_ratio, "ffn.");
		}
		if (!expert_hidden_given)
			cfg.moe.expert_hidden = cfg.embed_dim;
		if (doc.contains("loss"))
		{
			const json &l = doc["loss"];
			reject_unknown(l, {"alpha", "beta", "gamma", "mse", "ssim_border"}, "loss");
			read(l, "alpha", cfg.loss.alpha, "loss.");
			read(l, "beta", cfg.loss.beta, "loss.");
			read(l, "gamma", cfg.loss.gamma, "loss.");
			read(l, "mse", cfg.loss.mse, "loss.");
			if (l.contains("ssim_border"))
			{
				std::string border;
				read(l, "ssim_border", border, "loss.");
				if (border == "reflect")
					cfg.loss.ssim_border = SsimBorder::reflect;
				else if (border == "valid")
					cfg.loss.ssim_border = SsimBorder::valid;
				else
					throw InvalidArgument("config: loss.ssim_border must be \"reflect\" or \"valid\", got \"" + border + "\"");
			}
		}
		if (doc.contains("train"))
		{
			const json &t = doc["train"];
			reject_unknown(t, {"lr", "beta1", "beta2", "adam_eps", "batch_size", "checkpoint_every"}, "train");
			read(t, "lr", cfg.train.lr, "train.");
			read(t, "beta1", cfg.train.beta1, "train.");
			read(t, "beta2", cfg.train.beta2, "train.");
			read(t, "adam_eps", cfg.train.adam_eps, "train.");
			read(t, "batch_size", cfg.train.batch_size, "train.");
			read(t, "checkpoint_every", cfg.train.checkpoint_every, "train.");
		}
		cfg.finalize();
		return cfg;
	}

	ModelConfig load_config(const std::string &path)
	{
		std::ifstream in(path);
		if (!in)
			throw InvalidArgument("config: cannot open '" + path + "'");
		std::stringstream ss;
		ss << in.rdbuf();
		return parse_config(ss.str());
	}

	std::string config_to_json(const ModelConfig &cfg, int indent)
	{
		json doc = {
			{"in_channels", cfg.in_channels},
			{"embed_dim", cfg.embed_dim},
			{"groups", cfg.groups},
			{"blocks_per_group", cfg.blocks_per_group},
			{"scale", cfg.scale},
			{"attention",
			 {{"heads", cfg.attention.heads},
			  {"window", cfg.attention.window},
			  {"rpe", cfg.attention.pe_rpe},
			  {"logcpb", cfg.attention.pe_logcpb},
			  {"lepe", cfg.attention.pe_lepe},
			  {"cpb_hidden", cfg.attention.cpb_hidden},
			  {"cosine", cfg.attention.cosine}}},
			{"ffn",
			 {{"kind", cfg.ffn == FfnKind::moe ? "moe" : "mlp"},
			  {"experts", cfg.moe.experts},
			  {"active", cfg.moe.active},
			  {"expert_hidden", cfg.moe.expert_hidden},
			  {"smart_merger", cfg.moe.smart_merger},
			  {"mlp_ratio", cfg.mlp_ratio}}},
			{"loss", {{"alpha", cfg.loss.alpha}, {"beta", cfg.loss.beta}, {"gamma", cfg.loss.gamma}, {"mse", cfg.loss.mse},
					  {"ssim_border", cfg.loss.ssim_border == SsimBorder::reflect ? "reflect" : "valid"}}},
			{"train",
			 {{"lr", cfg.train.lr},
			  {"beta1", cfg.train.beta1},
			  {"beta2", cfg.train.beta2},
			  {"adam_eps", cfg.train.adam_eps},
			  {"batch_size", cfg.train.batch_size},
			  {"checkpoint_every", cfg.train.checkpoint_every}}},
		};
		return doc.dump(indent);
	}

	ModelConfig toy_config(Index scale)
	{
		ModelConfig cfg;
		cfg.embed_dim = 16;
		cfg.groups = 1;
		cfg.blocks_per_group = 2;
		cfg.scale = scale;
		cfg.attention.heads = 2;
		cfg.attention.window = 8;
		cfg.attention.cpb_hidden = 16;
		cfg.moe.experts = 4;
		cfg.moe.active = 2;
		cfg.moe.expert_hidden = 16;
		cfg.train.lr = 1e-3;
		cfg.finalize();
		return cfg;
	}
} // namespace mose
