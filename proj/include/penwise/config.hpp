#pragma once

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

#include "penwise/corrector.hpp"
#include "penwise/datapipe.hpp"
#include "penwise/decode.hpp"
#include "penwise/encoder.hpp"
#include "penwise/error.hpp"
#include "penwise/lm.hpp"
#include "penwise/polish.hpp"

namespace penwise {

inline constexpr const char* kConfigEnvVar = "PENWISE_CONFIG";

struct Bm25Config {
    double k1 = 1.2;
    double b = 0.75;
};

/// Archive and data paths for the service. Empty means "not configured".
struct ModelPaths {
    std::string lm;
    std::string infill;
    /// Skeleton-to-sentence model for global expansion.
    std::string expand;
    std::string crf;
    std::string null_detector;
    std::string embeddings;
    std::string corpus;
};

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::string model_version = "dev";
    std::size_t threads = 4;
    std::size_t max_candidates = 10;
    ModelPaths models;
};

/// Every tunable in one tree; defaults are what a missing key means.
struct PenwiseConfig {
    EncoderConfig encoder;
    TrainConfig train;
    DecoderConfig decoder;
    CrfConfig crf;
    NullTaskConfig null_detector;
    PolishConfig polish;
    ExpandConfig expand;
    FilterThresholds filter;
    Bm25Config bm25;
    ServiceConfig service;
};

namespace detail {

/// Walks one JSON object, remembering which keys were read so that the
/// rest can be reported as unknown.
class Section {
  public:
    Section(const nlohmann::json& j, std::string path) : m_json(j), m_path(std::move(path))
    {
        if (!j.is_object()) throw ConfigError(where_self() + " must be an object");
    }

    std::string key_path(const std::string& key) const { return m_path.empty() ? key : m_path + "." + key; }

    template <typename T>
    void read(const std::string& key, T& out)
    {
        m_seen.insert(key);
        auto it = m_json.find(key);
        if (it == m_json.end()) return;
        try {
            if constexpr (std::is_same_v<T, bool>) {
                if (!it->is_boolean()) throw ConfigError(key_path(key) + " must be true or false");
                out = it->template get<bool>();
            } else if constexpr (std::is_integral_v<T>) {
                if (!it->is_number_integer()) throw ConfigError(key_path(key) + " must be an integer");
                if constexpr (std::is_unsigned_v<T>) {
                    if (it->template get<long long>() < 0) throw ConfigError(key_path(key) + " must be >= 0");
                }
                out = it->template get<T>();
            } else if constexpr (std::is_floating_point_v<T>) {
                if (!it->is_number()) throw ConfigError(key_path(key) + " must be a number");
                out = it->template get<T>();
            } else {
                if (!it->is_string()) throw ConfigError(key_path(key) + " must be a string");
                out = it->template get<T>();
            }
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(key_path(key) + ": " + e.what());
        }
    }

    std::optional<Section> child(const std::string& key)
    {
        m_seen.insert(key);
        auto it = m_json.find(key);
        if (it == m_json.end()) return std::nullopt;
        return Section(*it, key_path(key));
    }

    void finish() const
    {
        for (auto it = m_json.begin(); it != m_json.end(); ++it) {
            if (!m_seen.count(it.key())) throw ConfigError("unknown key " + key_path(it.key()));
        }
    }

  private:
    std::string where_self() const { return m_path.empty() ? "config" : m_path; }

    const nlohmann::json& m_json;
    std::string m_path;
    std::set<std::string> m_seen;
};

inline void require(bool ok, const std::string& key, const std::string& rule, double value)
{
    if (!ok) {
        std::ostringstream os;
        os << key << " = " << value << " is out of range: " << rule;
        throw ConfigError(os.str());
    }
}

inline std::string resolve(const std::filesystem::path& base, const std::string& p)
{
    if (p.empty() || std::filesystem::path(p).is_absolute()) return p;
    return (base / p).lexically_normal().string();
}

}  // namespace detail

/// Range checks with the offending key in every message.
inline void validate_config(const PenwiseConfig& c)
{
    using detail::require;
    const auto& e = c.encoder;
    require(e.d_model > 0, "encoder.d_model", "must be >= 1", double(e.d_model));
    require(e.layers > 0, "encoder.layers", "must be >= 1", double(e.layers));
    require(e.heads > 0 && e.d_model % e.heads == 0, "encoder.heads", "must divide encoder.d_model", double(e.heads));
    require(e.max_len >= 2, "encoder.max_len", "must be >= 2", double(e.max_len));
    require(e.ffn_mult > 0, "encoder.ffn_mult", "must be >= 1", double(e.ffn_mult));

    const auto& t = c.train;
    require(t.rho >= -1.0 && t.rho <= 1.0, "train.rho", "margin must lie in [-1, 1]", t.rho);
    require(t.epochs > 0, "train.epochs", "must be >= 1", double(t.epochs));
    require(t.batch_size > 0, "train.batch_size", "must be >= 1", double(t.batch_size));
    require(t.learning_rate > 0.0, "train.learning_rate", "must be > 0", t.learning_rate);
    require(t.clip_norm > 0.0, "train.clip_norm", "must be > 0", t.clip_norm);

    const auto& d = c.decoder;
    require(d.alpha >= 0.0 && d.alpha <= 1.0, "decoder.alpha",
            "degeneration-penalty weight must lie in [0, 1]", d.alpha);
    require(d.k >= 1, "decoder.k", "must be >= 1", double(d.k));
    require(d.beam_width >= 1, "decoder.beam_width", "must be >= 1", double(d.beam_width));
    require(d.nucleus_p > 0.0 && d.nucleus_p <= 1.0, "decoder.nucleus_p", "must lie in (0, 1]", d.nucleus_p);
    require(d.max_new_tokens >= 1, "decoder.max_new_tokens", "must be >= 1", double(d.max_new_tokens));

    const auto& r = c.crf;
    require(r.gamma >= 0.0, "crf.gamma", "focal exponent must be >= 0", r.gamma);
    require(r.viterbi_k >= 1, "crf.viterbi_k", "must be >= 1", double(r.viterbi_k));
    require(r.rank >= 1, "crf.rank", "must be >= 1", double(r.rank));
    require(r.epochs > 0, "crf.epochs", "must be >= 1", double(r.epochs));
    require(r.batch_size > 0, "crf.batch_size", "must be >= 1", double(r.batch_size));
    require(r.learning_rate > 0.0, "crf.learning_rate", "must be > 0", r.learning_rate);

    const auto& n = c.null_detector;
    require(n.insert_rate > 0.0 && n.insert_rate < 1.0, "null_detector.insert_rate", "must lie in (0, 1)",
            n.insert_rate);
    require(n.mask_rate > 0.0 && n.mask_rate < 1.0, "null_detector.mask_rate", "must lie in (0, 1)", n.mask_rate);
    require(n.epochs > 0, "null_detector.epochs", "must be >= 1", double(n.epochs));
    require(n.batch_size > 0, "null_detector.batch_size", "must be >= 1", double(n.batch_size));
    require(n.learning_rate > 0.0, "null_detector.learning_rate", "must be > 0", n.learning_rate);
    require(n.tau_ins >= 0.0 && n.tau_ins <= 1.0, "null_detector.tau_ins", "must lie in [0, 1]", n.tau_ins);
    require(n.tau_del >= 0.0 && n.tau_del <= 1.0, "null_detector.tau_del", "must lie in [0, 1]", n.tau_del);

    const auto& p = c.polish;
    require(p.lambda >= 0.0 && p.lambda <= 1.0, "polish.lambda", "must lie in [0, 1]", p.lambda);
    require(p.window >= 1, "polish.window", "must be >= 1", double(p.window));
    require(p.top_m >= 1, "polish.top_m", "must be >= 1", double(p.top_m));
    require(p.graph_topn >= 1, "polish.graph_topn", "must be >= 1", double(p.graph_topn));
    require(c.expand.max_sites >= 1, "expand.max_sites", "must be >= 1", double(c.expand.max_sites));

    require(std::isfinite(c.filter.min_wmd), "filter.min_wmd", "must be finite", c.filter.min_wmd);
    require(std::isfinite(c.filter.min_sem), "filter.min_sem", "must be finite", c.filter.min_sem);
    require(c.bm25.k1 >= 0.0, "bm25.k1", "must be >= 0", c.bm25.k1);
    require(c.bm25.b >= 0.0 && c.bm25.b <= 1.0, "bm25.b", "must lie in [0, 1]", c.bm25.b);

    const auto& s = c.service;
    require(s.port >= 0 && s.port <= 65535, "service.port", "must lie in [0, 65535]", s.port);
    require(s.threads >= 1, "service.threads", "must be >= 1", double(s.threads));
    require(s.max_candidates >= 1, "service.max_candidates", "must be >= 1", double(s.max_candidates));
    if (s.model_version.empty()) throw ConfigError("service.model_version must not be empty");
}

/// Strict JSON: unknown keys and wrong types are errors. Relative model
/// paths resolve against `base_dir`.
inline PenwiseConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = {})
{
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    PenwiseConfig c;
    detail::Section root(j, "");
    if (auto s = root.child("encoder")) {
        s->read("d_model", c.encoder.d_model);
        s->read("layers", c.encoder.layers);
        s->read("heads", c.encoder.heads);
        s->read("max_len", c.encoder.max_len);
        s->read("ffn_mult", c.encoder.ffn_mult);
        s->finish();
    }
    if (auto s = root.child("train")) {
        std::string objective = c.train.objective == Objective::mle ? "mle" : "simctg";
        s->read("objective", objective);
        if (objective == "mle") {
            c.train.objective = Objective::mle;
        } else if (objective == "simctg") {
            c.train.objective = Objective::simctg;
        } else {
            throw ConfigError("train.objective must be \"mle\" or \"simctg\", got \"" + objective + "\"");
        }
        s->read("rho", c.train.rho);
        s->read("epochs", c.train.epochs);
        s->read("batch_size", c.train.batch_size);
        s->read("learning_rate", c.train.learning_rate);
        s->read("clip_norm", c.train.clip_norm);
        s->read("seed", c.train.seed);
        s->finish();
    }
    if (auto s = root.child("decoder")) {
        std::string strategy = to_string(c.decoder.strategy);
        s->read("strategy", strategy);
        auto parsed = strategy_from_string(strategy);
        if (!parsed) throw ConfigError("decoder.strategy: unknown strategy \"" + strategy + "\"");
        c.decoder.strategy = *parsed;
        s->read("k", c.decoder.k);
        s->read("alpha", c.decoder.alpha);
        s->read("beam_width", c.decoder.beam_width);
        s->read("nucleus_p", c.decoder.nucleus_p);
        s->read("max_new_tokens", c.decoder.max_new_tokens);
        s->read("seed", c.decoder.seed);
        s->read("cached_prefix", c.decoder.cached_prefix);
        s->finish();
    }
    if (auto s = root.child("crf")) {
        std::string losses = to_string(c.crf.losses);
        s->read("losses", losses);
        auto parsed = crf_objective_from_string(losses);
        if (!parsed) throw ConfigError("crf.losses must be \"dp\", \"crf\" or \"both\", got \"" + losses + "\"");
        c.crf.losses = *parsed;
        s->read("gamma", c.crf.gamma);
        s->read("viterbi_k", c.crf.viterbi_k);
        s->read("focal", c.crf.focal);
        s->read("rank", c.crf.rank);
        s->read("epochs", c.crf.epochs);
        s->read("batch_size", c.crf.batch_size);
        s->read("learning_rate", c.crf.learning_rate);
        s->read("seed", c.crf.seed);
        s->finish();
    }
    if (auto s = root.child("null_detector")) {
        s->read("insert_rate", c.null_detector.insert_rate);
        s->read("mask_rate", c.null_detector.mask_rate);
        s->read("epochs", c.null_detector.epochs);
        s->read("batch_size", c.null_detector.batch_size);
        s->read("learning_rate", c.null_detector.learning_rate);
        s->read("seed", c.null_detector.seed);
        s->read("tau_ins", c.null_detector.tau_ins);
        s->read("tau_del", c.null_detector.tau_del);
        s->finish();
    }
    if (auto s = root.child("polish")) {
        s->read("lambda", c.polish.lambda);
        s->read("window", c.polish.window);
        s->read("top_m", c.polish.top_m);
        s->read("graph_topn", c.polish.graph_topn);
        s->finish();
    }
    if (auto s = root.child("expand")) {
        s->read("max_sites", c.expand.max_sites);
        s->finish();
    }
    if (auto s = root.child("filter")) {
        s->read("min_lex", c.filter.min_lex);
        s->read("min_wmd", c.filter.min_wmd);
        s->read("min_sem", c.filter.min_sem);
        s->finish();
    }
    if (auto s = root.child("bm25")) {
        s->read("k1", c.bm25.k1);
        s->read("b", c.bm25.b);
        s->finish();
    }
    if (auto s = root.child("service")) {
        s->read("host", c.service.host);
        s->read("port", c.service.port);
        s->read("model_version", c.service.model_version);
        s->read("threads", c.service.threads);
        s->read("max_candidates", c.service.max_candidates);
        if (auto m = s->child("models")) {
            auto& p = c.service.models;
            for (auto [key, slot] : {std::pair<const char*, std::string*>{"lm", &p.lm},
                                     {"infill", &p.infill},
                                     {"expand", &p.expand},
                                     {"crf", &p.crf},
                                     {"null_detector", &p.null_detector},
                                     {"embeddings", &p.embeddings},
                                     {"corpus", &p.corpus}}) {
                m->read(key, *slot);
                *slot = detail::resolve(base_dir, *slot);
            }
            m->finish();
        }
        s->finish();
    }
    root.finish();
    c.expand.decoder = c.decoder;
    validate_config(c);
    return c;
}

inline PenwiseConfig load_config(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw IoError("config: cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), std::filesystem::path(path).parent_path());
}

/// Path from the PENWISE_CONFIG environment variable, if set.
inline std::optional<std::string> config_path_from_env()
{
    const char* p = std::getenv(kConfigEnvVar);
    if (p == nullptr || *p == '\0') return std::nullopt;
    return std::string(p);
}

/// The fully materialized tree, including defaults, as JSON.
inline nlohmann::json config_to_json(const PenwiseConfig& c)
{
    const auto& m = c.service.models;
    return {
        {"encoder",
         {{"d_model", c.encoder.d_model},
          {"layers", c.encoder.layers},
          {"heads", c.encoder.heads},
          {"max_len", c.encoder.max_len},
          {"ffn_mult", c.encoder.ffn_mult}}},
        {"train",
         {{"objective", c.train.objective == Objective::mle ? "mle" : "simctg"},
          {"rho", c.train.rho},
          {"epochs", c.train.epochs},
          {"batch_size", c.train.batch_size},
          {"learning_rate", c.train.learning_rate},
          {"clip_norm", c.train.clip_norm},
          {"seed", c.train.seed}}},
        {"decoder",
         {{"strategy", to_string(c.decoder.strategy)},
          {"k", c.decoder.k},
          {"alpha", c.decoder.alpha},
          {"beam_width", c.decoder.beam_width},
          {"nucleus_p", c.decoder.nucleus_p},
          {"max_new_tokens", c.decoder.max_new_tokens},
          {"seed", c.decoder.seed},
          {"cached_prefix", c.decoder.cached_prefix}}},
        {"crf",
         {{"losses", to_string(c.crf.losses)},
          {"gamma", c.crf.gamma},
          {"viterbi_k", c.crf.viterbi_k},
          {"focal", c.crf.focal},
          {"rank", c.crf.rank},
          {"epochs", c.crf.epochs},
          {"batch_size", c.crf.batch_size},
          {"learning_rate", c.crf.learning_rate},
          {"seed", c.crf.seed}}},
        {"null_detector",
         {{"insert_rate", c.null_detector.insert_rate},
          {"mask_rate", c.null_detector.mask_rate},
          {"epochs", c.null_detector.epochs},
          {"batch_size", c.null_detector.batch_size},
          {"learning_rate", c.null_detector.learning_rate},
          {"seed", c.null_detector.seed},
          {"tau_ins", c.null_detector.tau_ins},
          {"tau_del", c.null_detector.tau_del}}},
        {"polish",
         {{"lambda", c.polish.lambda},
          {"window", c.polish.window},
          {"top_m", c.polish.top_m},
          {"graph_topn", c.polish.graph_topn}}},
        {"expand", {{"max_sites", c.expand.max_sites}}},
        {"filter", {{"min_lex", c.filter.min_lex}, {"min_wmd", c.filter.min_wmd}, {"min_sem", c.filter.min_sem}}},
        {"bm25", {{"k1", c.bm25.k1}, {"b", c.bm25.b}}},
        {"service",
         {{"host", c.service.host},
          {"port", c.service.port},
          {"model_version", c.service.model_version},
          {"threads", c.service.threads},
          {"max_candidates", c.service.max_candidates},
          {"models",
           {{"lm", m.lm},
            {"infill", m.infill},
            {"expand", m.expand},
            {"crf", m.crf},
            {"null_detector", m.null_detector},
            {"embeddings", m.embeddings},
            {"corpus", m.corpus}}}}},
    };
}

}  // namespace penwise
