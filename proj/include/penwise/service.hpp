#pragma once

// Suggestion engine behind the HTTP service: request and response schemas,
// model loading, and one handler per suggestion kind.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "penwise/bm25.hpp"
#include "penwise/config.hpp"
#include "penwise/corrector.hpp"
#include "penwise/decode.hpp"
#include "penwise/embeddings.hpp"
#include "penwise/error.hpp"
#include "penwise/infill.hpp"
#include "penwise/lm.hpp"
#include "penwise/polish.hpp"
#include "penwise/store.hpp"
#include "penwise/vocab.hpp"

namespace penwise {

enum class SuggestKind : std::uint8_t { complete, polish, correct, infill, expand, retrieve };

inline constexpr std::array<std::string_view, 6> kSuggestKindNames = {"complete", "polish", "correct",
                                                                      "infill",   "expand", "retrieve"};

inline std::string to_string(SuggestKind k) { return std::string(kSuggestKindNames[static_cast<std::size_t>(k)]); }

inline std::optional<SuggestKind> suggest_kind_from_string(std::string_view s)
{
    for (std::size_t i = 0; i < kSuggestKindNames.size(); ++i) {
        if (kSuggestKindNames[i] == s) return static_cast<SuggestKind>(i);
    }
    return std::nullopt;
}

/// A request that does not fit the schema. `field` is the JSON path of the
/// offending value ("" for the body as a whole).
class RequestError : public ValidationError {
  public:
    RequestError(std::string field, const std::string& message)
        : ValidationError(field.empty() ? message : field + ": " + message), m_field(std::move(field))
    {
    }
    const std::string& field() const { return m_field; }

  private:
    std::string m_field;
};

/// The kind is valid but the server was started without the model it needs.
class KindUnavailable : public ValidationError {
  public:
    using ValidationError::ValidationError;
};

/// A configured model file could not be loaded.
class ModelLoadError : public Error {
  public:
    using Error::Error;
};

/// Per-request decoder settings layered over the server defaults.
struct DecoderOverrides {
    std::optional<Strategy> strategy;
    std::optional<std::size_t> k;
    std::optional<double> alpha;
    std::optional<std::size_t> beam_width;
    std::optional<double> nucleus_p;
    std::optional<std::size_t> max_new_tokens;

    bool empty() const { return !strategy && !k && !alpha && !beam_width && !nucleus_p && !max_new_tokens; }

    DecoderConfig apply(DecoderConfig base) const
    {
        if (strategy) base.strategy = *strategy;
        if (k) base.k = *k;
        if (alpha) base.alpha = *alpha;
        if (beam_width) base.beam_width = *beam_width;
        if (nucleus_p) base.nucleus_p = *nucleus_p;
        if (max_new_tokens) base.max_new_tokens = *max_new_tokens;
        return base;
    }
};

struct SuggestRequest {
    SuggestKind kind = SuggestKind::complete;
    std::string text;
    /// Word span, polish only.
    std::optional<Span> span;
    /// Keyword phrases in order, infill only.
    std::optional<std::vector<std::string>> keywords;
    DecoderOverrides decoder;
    std::size_t n = 3;
    /// Overrides the seed derived from the request body.
    std::optional<std::uint64_t> seed;
};

enum class Provenance : std::uint8_t { generated, retrieved };

inline std::string to_string(Provenance p) { return p == Provenance::generated ? "generated" : "retrieved"; }

/// A correction edit over words of the request text. Positions index the
/// original words; an insert goes before word `pos`.
struct WordEdit {
    EditKind kind = EditKind::substitute;
    std::size_t pos = 0;
    std::optional<std::string> old_word;
    std::optional<std::string> new_word;
    double score = 0.0;

    bool operator==(const WordEdit&) const = default;
};

struct SuggestCandidate {
    std::string text;
    double score = 0.0;
    Provenance provenance = Provenance::generated;
    std::optional<std::vector<WordEdit>> edits;
};

struct SuggestResponse {
    std::vector<SuggestCandidate> candidates;
    std::string model_version;
    double latency_ms = 0.0;
};

// ---------------------------------------------------------------------------
// JSON

namespace detail {

inline std::size_t read_count(const nlohmann::json& j, const std::string& field, std::size_t min)
{
    if (!j.is_number_integer()) throw RequestError(field, "must be an integer");
    if (j.is_number_unsigned() ? j.get<std::uint64_t>() < min : j.get<std::int64_t>() < static_cast<std::int64_t>(min)) {
        throw RequestError(field, "must be >= " + std::to_string(min));
    }
    return j.get<std::size_t>();
}

inline double read_real(const nlohmann::json& j, const std::string& field)
{
    if (!j.is_number()) throw RequestError(field, "must be a number");
    return j.get<double>();
}

inline void reject_unknown(const nlohmann::json& j, const std::string& prefix, std::initializer_list<const char*> known)
{
    for (const auto& [key, value] : j.items()) {
        if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
            throw RequestError(prefix + key, "unknown field");
        }
    }
}

inline DecoderOverrides parse_decoder_overrides(const nlohmann::json& j)
{
    if (!j.is_object()) throw RequestError("decoder", "must be an object");
    reject_unknown(j, "decoder.", {"strategy", "k", "alpha", "beam_width", "nucleus_p", "max_new_tokens"});
    DecoderOverrides d;
    if (j.contains("strategy")) {
        const auto& s = j["strategy"];
        if (!s.is_string()) throw RequestError("decoder.strategy", "must be a string");
        d.strategy = strategy_from_string(s.get<std::string>());
        if (!d.strategy) throw RequestError("decoder.strategy", "unknown strategy \"" + s.get<std::string>() + "\"");
    }
    if (j.contains("k")) d.k = read_count(j["k"], "decoder.k", 1);
    if (j.contains("alpha")) {
        d.alpha = read_real(j["alpha"], "decoder.alpha");
        if (!(*d.alpha >= 0.0 && *d.alpha <= 1.0)) throw RequestError("decoder.alpha", "must lie in [0, 1]");
    }
    if (j.contains("beam_width")) d.beam_width = read_count(j["beam_width"], "decoder.beam_width", 1);
    if (j.contains("nucleus_p")) {
        d.nucleus_p = read_real(j["nucleus_p"], "decoder.nucleus_p");
        if (!(*d.nucleus_p > 0.0 && *d.nucleus_p <= 1.0)) throw RequestError("decoder.nucleus_p", "must lie in (0, 1]");
    }
    if (j.contains("max_new_tokens")) d.max_new_tokens = read_count(j["max_new_tokens"], "decoder.max_new_tokens", 1);
    return d;
}

}  // namespace detail

/// Validates a request body. `max_n` caps the candidate count.
inline SuggestRequest parse_request(const nlohmann::json& j, std::size_t max_n = 100)
{
    if (!j.is_object()) throw RequestError("", "request body must be a JSON object");
    detail::reject_unknown(j, "", {"kind", "text", "span", "keywords", "decoder", "n", "seed"});
    SuggestRequest r;
    if (!j.contains("kind")) throw RequestError("kind", "is required");
    if (!j["kind"].is_string()) throw RequestError("kind", "must be a string");
    const auto kind = suggest_kind_from_string(j["kind"].get<std::string>());
    if (!kind) throw RequestError("kind", "unknown kind \"" + j["kind"].get<std::string>() + "\"");
    r.kind = *kind;

    if (j.contains("text")) {
        if (!j["text"].is_string()) throw RequestError("text", "must be a string");
        r.text = j["text"].get<std::string>();
    } else if (r.kind != SuggestKind::infill) {
        throw RequestError("text", "is required");
    }
    if (r.kind != SuggestKind::infill && tokenize(r.text).empty()) {
        throw RequestError("text", "must contain at least one word");
    }

    if (j.contains("span")) {
        if (r.kind != SuggestKind::polish) throw RequestError("span", "only allowed for kind \"polish\"");
        const auto& s = j["span"];
        if (!s.is_object()) throw RequestError("span", "must be an object {start, len}");
        detail::reject_unknown(s, "span.", {"start", "len"});
        if (!s.contains("start")) throw RequestError("span.start", "is required");
        if (!s.contains("len")) throw RequestError("span.len", "is required");
        r.span = Span{detail::read_count(s["start"], "span.start", 0), detail::read_count(s["len"], "span.len", 1)};
    } else if (r.kind == SuggestKind::polish) {
        throw RequestError("span", "is required for kind \"polish\"");
    }

    if (j.contains("keywords")) {
        if (r.kind != SuggestKind::infill) throw RequestError("keywords", "only allowed for kind \"infill\"");
        const auto& k = j["keywords"];
        if (!k.is_array() || k.empty()) throw RequestError("keywords", "must be a nonempty array of strings");
        r.keywords.emplace();
        for (std::size_t i = 0; i < k.size(); ++i) {
            const std::string field = "keywords[" + std::to_string(i) + "]";
            if (!k[i].is_string()) throw RequestError(field, "must be a string");
            if (tokenize(k[i].get<std::string>()).empty()) throw RequestError(field, "must contain a word");
            r.keywords->push_back(k[i].get<std::string>());
        }
    } else if (r.kind == SuggestKind::infill) {
        throw RequestError("keywords", "is required for kind \"infill\"");
    }

    if (j.contains("decoder")) r.decoder = detail::parse_decoder_overrides(j["decoder"]);
    if (j.contains("n")) {
        r.n = detail::read_count(j["n"], "n", 1);
        if (r.n > max_n) throw RequestError("n", "must be <= " + std::to_string(max_n));
    }
    if (j.contains("seed")) {
        if (!j["seed"].is_number_unsigned()) throw RequestError("seed", "must be a nonnegative integer");
        r.seed = j["seed"].get<std::uint64_t>();
    }
    return r;
}

/// Parses and validates raw body text; malformed JSON is a RequestError
/// on the whole body.
inline SuggestRequest parse_request_text(const std::string& body, std::size_t max_n = 100)
{
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::parse_error& e) {
        throw RequestError("", std::string("malformed JSON: ") + e.what());
    }
    return parse_request(j, max_n);
}

/// Canonical form: every field the request set, nothing else.
inline nlohmann::json request_to_json(const SuggestRequest& r, bool with_seed = true)
{
    nlohmann::json j{{"kind", to_string(r.kind)}, {"text", r.text}, {"n", r.n}};
    if (r.span) j["span"] = {{"start", r.span->start}, {"len", r.span->length}};
    if (r.keywords) j["keywords"] = *r.keywords;
    if (!r.decoder.empty()) {
        nlohmann::json d = nlohmann::json::object();
        const auto& o = r.decoder;
        if (o.strategy) d["strategy"] = to_string(*o.strategy);
        if (o.k) d["k"] = *o.k;
        if (o.alpha) d["alpha"] = *o.alpha;
        if (o.beam_width) d["beam_width"] = *o.beam_width;
        if (o.nucleus_p) d["nucleus_p"] = *o.nucleus_p;
        if (o.max_new_tokens) d["max_new_tokens"] = *o.max_new_tokens;
        j["decoder"] = d;
    }
    if (with_seed && r.seed) j["seed"] = *r.seed;
    return j;
}

/// Seed for a request: the explicit one, else a hash of the canonical body
/// and the model version.
inline std::uint64_t request_seed(const SuggestRequest& r, const std::string& model_version)
{
    if (r.seed) return *r.seed;
    return fnv1a64(request_to_json(r, false).dump() + "\n" + model_version);
}

inline nlohmann::json edit_to_json(const WordEdit& e)
{
    return {{"kind", to_string(e.kind)},
            {"pos", e.pos},
            {"old", e.old_word ? nlohmann::json(*e.old_word) : nlohmann::json(nullptr)},
            {"new", e.new_word ? nlohmann::json(*e.new_word) : nlohmann::json(nullptr)},
            {"score", e.score}};
}

inline nlohmann::json response_to_json(const SuggestResponse& r)
{
    nlohmann::json cands = nlohmann::json::array();
    for (const auto& c : r.candidates) {
        nlohmann::json jc{{"text", c.text}, {"score", c.score}, {"provenance", to_string(c.provenance)}};
        if (c.edits) {
            jc["edits"] = nlohmann::json::array();
            for (const auto& e : *c.edits) jc["edits"].push_back(edit_to_json(e));
        }
        cands.push_back(std::move(jc));
    }
    return {{"candidates", cands}, {"model_version", r.model_version}, {"latency_ms", r.latency_ms}};
}

/// Checks a response body against the schema: field types, the provenance
/// and edit vocabularies, score ordering and, when given, the candidate cap.
/// Throws RequestError naming the first offending path.
inline void validate_response_json(const nlohmann::json& j, std::optional<std::size_t> n = std::nullopt)
{
    if (!j.is_object()) throw RequestError("", "response must be an object");
    detail::reject_unknown(j, "", {"candidates", "model_version", "latency_ms"});
    if (!j.contains("model_version") || !j["model_version"].is_string()) {
        throw RequestError("model_version", "must be a string");
    }
    if (!j.contains("latency_ms") || !j["latency_ms"].is_number() || j["latency_ms"].get<double>() < 0.0) {
        throw RequestError("latency_ms", "must be a nonnegative number");
    }
    if (!j.contains("candidates") || !j["candidates"].is_array()) throw RequestError("candidates", "must be an array");
    const auto& cands = j["candidates"];
    if (n && cands.size() > *n) {
        throw RequestError("candidates", std::to_string(cands.size()) + " candidates for n = " + std::to_string(*n));
    }
    for (std::size_t i = 0; i < cands.size(); ++i) {
        const std::string at = "candidates[" + std::to_string(i) + "]";
        const auto& c = cands[i];
        if (!c.is_object()) throw RequestError(at, "must be an object");
        detail::reject_unknown(c, at + ".", {"text", "score", "provenance", "edits"});
        if (!c.contains("text") || !c["text"].is_string()) throw RequestError(at + ".text", "must be a string");
        if (!c.contains("score") || !c["score"].is_number()) throw RequestError(at + ".score", "must be a number");
        if (!c.contains("provenance") || !c["provenance"].is_string()
            || (c["provenance"] != "generated" && c["provenance"] != "retrieved")) {
            throw RequestError(at + ".provenance", "must be \"generated\" or \"retrieved\"");
        }
        if (i > 0 && c["score"].get<double>() > cands[i - 1]["score"].get<double>()) {
            throw RequestError(at + ".score", "candidates are not sorted by score descending");
        }
        if (!c.contains("edits")) continue;
        if (!c["edits"].is_array()) throw RequestError(at + ".edits", "must be an array");
        for (std::size_t e = 0; e < c["edits"].size(); ++e) {
            const std::string eat = at + ".edits[" + std::to_string(e) + "]";
            const auto& ed = c["edits"][e];
            if (!ed.is_object()) throw RequestError(eat, "must be an object");
            detail::reject_unknown(ed, eat + ".", {"kind", "pos", "old", "new", "score"});
            if (!ed.contains("kind") || !ed["kind"].is_string()) throw RequestError(eat + ".kind", "must be a string");
            const std::string kind = ed["kind"].get<std::string>();
            if (kind != "substitute" && kind != "insert" && kind != "delete") {
                throw RequestError(eat + ".kind", "must be substitute, insert or delete");
            }
            if (!ed.contains("pos") || !ed["pos"].is_number_unsigned()) {
                throw RequestError(eat + ".pos", "must be a nonnegative integer");
            }
            const bool want_old = kind != "insert", want_new = kind != "delete";
            if (!ed.contains("old") || (want_old ? !ed["old"].is_string() : !ed["old"].is_null())) {
                throw RequestError(eat + ".old", want_old ? "must be a string" : "must be null");
            }
            if (!ed.contains("new") || (want_new ? !ed["new"].is_string() : !ed["new"].is_null())) {
                throw RequestError(eat + ".new", want_new ? "must be a string" : "must be null");
            }
            if (!ed.contains("score") || !ed["score"].is_number()) throw RequestError(eat + ".score", "must be a number");
        }
    }
}

/// Applies word edits addressed against `words`.
inline Words apply_word_edits(const Words& words, const std::vector<WordEdit>& edits)
{
    Vocab local = Vocab::from_words(words);
    std::vector<Edit> ids;
    for (const auto& e : edits) {
        Edit x{e.kind, e.pos, std::nullopt, std::nullopt, e.score};
        if (e.old_word) x.old_token = local.add(*e.old_word);
        if (e.new_word) x.new_token = local.add(*e.new_word);
        ids.push_back(x);
    }
    return local.decode(apply_edits(local.encode(words), ids));
}

// ---------------------------------------------------------------------------
// Engine

/// Every model the service can use; absent ones disable their kinds.
struct EngineModels {
    std::optional<LmModel> lm;
    std::optional<LmModel> expand;
    std::optional<LmModel> infill;
    std::optional<CrfModel> crf;
    std::optional<NullDetectorModel> null_detector;
    std::optional<EmbeddingTable> embeddings;
    std::optional<Bm25Index> corpus;
};

struct EngineSettings {
    DecoderConfig decoder;
    PolishConfig polish;
    NullThresholds null_thresholds;
    std::size_t viterbi_k = 8;
    std::string model_version = "dev";
    std::size_t max_candidates = 10;
};

inline EngineSettings settings_from_config(const PenwiseConfig& c)
{
    EngineSettings s;
    s.decoder = c.decoder;
    s.polish = c.polish;
    s.null_thresholds = {c.null_detector.tau_ins, c.null_detector.tau_del};
    s.viterbi_k = c.crf.viterbi_k;
    s.model_version = c.service.model_version;
    s.max_candidates = c.service.max_candidates;
    return s;
}

namespace detail {

inline bool is_archive(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    char magic[4] = {};
    in.read(magic, 4);
    return in.gcount() == 4 && std::string_view(magic, 4) == kArchiveMagic;
}

template <typename F>
auto load_one(const char* name, const std::string& path, F&& load)
{
    try {
        return load(path);
    } catch (const Error& e) {
        throw ModelLoadError(std::string("models.") + name + " (" + path + "): " + e.what());
    }
}

/// Mean log-probability of `tokens` following `prompt`.
inline double continuation_score(const LmModel& model, const TokenSeq& prompt, const TokenSeq& tokens)
{
    if (tokens.empty()) return 0.0;
    NoGradGuard guard;
    TokenSeq full = prompt;
    full.insert(full.end(), tokens.begin(), tokens.end());
    Tensor lp = log_softmax_rows(model.logits(slice_rows(model.encode(full), prompt.size() - 1, tokens.size())));
    double total = 0.0;
    for (std::size_t i = 0; i < tokens.size(); ++i) total += lp.at(i, tokens[i]);
    return total / static_cast<double>(tokens.size());
}

inline double mean_score(const std::vector<WordEdit>& edits)
{
    double total = 0.0;
    for (const auto& e : edits) total += e.score;
    return edits.empty() ? 1.0 : total / static_cast<double>(edits.size());
}

/// Score descending, ties by text; duplicates keep their best entry.
inline void finish_candidates(std::vector<SuggestCandidate>& cands, std::size_t n)
{
    std::stable_sort(cands.begin(), cands.end(), [](const SuggestCandidate& a, const SuggestCandidate& b) {
        return a.score != b.score ? a.score > b.score : a.text < b.text;
    });
    std::set<std::string> seen;
    std::vector<SuggestCandidate> out;
    for (auto& c : cands) {
        if (out.size() == n) break;
        if (seen.insert(c.text).second) out.push_back(std::move(c));
    }
    cands = std::move(out);
}

}  // namespace detail

/// Loads every configured path. Archives are recognised by their magic;
/// embeddings may also be a text table and the corpus a sentence-per-line
/// file.
inline EngineModels load_models(const ModelPaths& p, const Bm25Config& bm25 = {})
{
    EngineModels m;
    if (!p.lm.empty()) m.lm = detail::load_one("lm", p.lm, load_lm);
    if (!p.expand.empty()) m.expand = detail::load_one("expand", p.expand, load_lm);
    if (!p.infill.empty()) m.infill = detail::load_one("infill", p.infill, load_lm);
    if (!p.crf.empty()) m.crf = detail::load_one("crf", p.crf, load_crf);
    if (!p.null_detector.empty()) m.null_detector = detail::load_one("null_detector", p.null_detector, load_null_detector);
    if (!p.embeddings.empty()) {
        m.embeddings = detail::load_one("embeddings", p.embeddings, [](const std::string& path) {
            return detail::is_archive(path) ? load_embeddings_archive(path) : EmbeddingTable::load(path);
        });
    }
    if (!p.corpus.empty()) {
        m.corpus = detail::load_one("corpus", p.corpus, [&](const std::string& path) {
            if (detail::is_archive(path)) return load_bm25(path);
            std::ifstream in(path);
            std::vector<Words> docs;
            for (std::string line; std::getline(in, line);) {
                Words w = tokenize(line);
                if (!w.empty()) docs.push_back(std::move(w));
            }
            return Bm25Index(std::move(docs), bm25.k1, bm25.b);
        });
    }
    return m;
}

/// Serves suggestions from immutable models. All methods are const and
/// safe to call from many threads at once.
class SuggestEngine {
  public:
    SuggestEngine(EngineModels models, EngineSettings settings)
        : m_models(std::move(models)), m_settings(std::move(settings))
    {
        m_settings.polish.validate();
        if (m_models.embeddings) {
            m_graph = build_graph(*m_models.embeddings, m_settings.polish.graph_topn);
        }
    }

    const EngineSettings& settings() const { return m_settings; }
    const EngineModels& models() const { return m_models; }

    /// Names of the loaded models, in a fixed order.
    std::vector<std::string> model_names() const
    {
        std::vector<std::string> out;
        if (m_models.lm) out.push_back("lm");
        if (m_models.expand) out.push_back("expand");
        if (m_models.infill) out.push_back("infill");
        if (m_models.crf) out.push_back("crf");
        if (m_models.null_detector) out.push_back("null_detector");
        if (m_models.embeddings) out.push_back("embeddings");
        if (m_models.corpus) out.push_back("corpus");
        return out;
    }

    bool supports(SuggestKind k) const
    {
        switch (k) {
        case SuggestKind::complete: return m_models.lm.has_value();
        case SuggestKind::polish: return m_models.embeddings.has_value();
        case SuggestKind::correct: return m_models.crf || m_models.null_detector;
        case SuggestKind::infill: return m_models.infill.has_value();
        case SuggestKind::expand: return m_models.expand.has_value();
        case SuggestKind::retrieve: return m_models.corpus.has_value();
        }
        return false;
    }

    /// Per-model details for GET /v1/models.
    nlohmann::json describe() const
    {
        nlohmann::json models = nlohmann::json::array();
        auto lm_entry = [&](const char* name, const LmModel& m) {
            models.push_back({{"name", name}, {"vocab_size", m.vocab().size()}, {"max_len", m.max_len()}});
        };
        if (m_models.lm) lm_entry("lm", *m_models.lm);
        if (m_models.expand) lm_entry("expand", *m_models.expand);
        if (m_models.infill) lm_entry("infill", *m_models.infill);
        if (m_models.crf) {
            models.push_back({{"name", "crf"}, {"vocab_size", m_models.crf->vocab().size()}});
        }
        if (m_models.null_detector) {
            models.push_back({{"name", "null_detector"}, {"vocab_size", m_models.null_detector->mlm.vocab().size()}});
        }
        if (m_models.embeddings) {
            models.push_back({{"name", "embeddings"},
                              {"phrases", m_models.embeddings->size()},
                              {"dim", m_models.embeddings->dim()}});
        }
        if (m_models.corpus) models.push_back({{"name", "corpus"}, {"documents", m_models.corpus->size()}});
        nlohmann::json kinds = nlohmann::json::array();
        for (std::size_t i = 0; i < kSuggestKindNames.size(); ++i) {
            if (supports(static_cast<SuggestKind>(i))) kinds.push_back(kSuggestKindNames[i]);
        }
        return {{"model_version", m_settings.model_version}, {"models", models}, {"kinds", kinds}};
    }

    SuggestResponse suggest(const SuggestRequest& req) const
    {
        const auto t0 = std::chrono::steady_clock::now();
        if (!supports(req.kind)) {
            throw KindUnavailable("kind \"" + to_string(req.kind) + "\" is not served: its model is not configured");
        }
        if (req.n == 0 || req.n > m_settings.max_candidates) {
            throw RequestError("n", "must lie in [1, " + std::to_string(m_settings.max_candidates) + "]");
        }
        NoGradGuard guard;
        DecoderConfig dc = req.decoder.apply(m_settings.decoder);
        dc.seed = request_seed(req, m_settings.model_version);
        const Words words = tokenize(req.text);

        SuggestResponse out;
        out.model_version = m_settings.model_version;
        switch (req.kind) {
        case SuggestKind::complete: out.candidates = complete(words, dc, req.n); break;
        case SuggestKind::polish: out.candidates = polish_span(words, *req.span, req.n); break;
        case SuggestKind::correct: out.candidates = correct(words); break;
        case SuggestKind::infill: out.candidates = infill(*req.keywords, dc, req.n); break;
        case SuggestKind::expand: out.candidates = expand(words, dc, req.n); break;
        case SuggestKind::retrieve: out.candidates = retrieve(words, req.n); break;
        }
        detail::finish_candidates(out.candidates, req.n);
        const auto us = std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::steady_clock::now() - t0);
        out.latency_ms = static_cast<double>(us.count()) / 1000.0;
        return out;
    }

  private:
    static void check_decoder(const LmModel& m, const DecoderConfig& dc)
    {
        try {
            dc.validate(m.vocab().size());
        } catch (const InvalidArgument& e) {
            throw RequestError("decoder", e.what());
        }
    }

    /// Caps the budget so prompt plus output fits the model.
    static DecoderConfig fit_budget(const LmModel& m, std::size_t prompt_len, DecoderConfig dc, const char* field)
    {
        if (prompt_len >= m.max_len()) {
            throw RequestError(field, std::to_string(prompt_len) + " prompt tokens leave no room under max_len "
                                          + std::to_string(m.max_len()));
        }
        dc.max_new_tokens = std::min(dc.max_new_tokens, m.max_len() - prompt_len);
        return dc;
    }

    /// Runs `n` decodes with seeds seed, seed + 1, ... Deterministic
    /// strategies give one distinct answer.
    template <typename Accept>
    std::vector<SuggestCandidate> sample(const LmModel& m, const TokenSeq& prompt, const DecoderConfig& dc,
                                         std::size_t n, Accept&& accept) const
    {
        std::vector<SuggestCandidate> out;
        std::set<TokenSeq> seen;
        for (std::size_t i = 0; i < n; ++i) {
            DecoderConfig c = dc;
            c.seed = dc.seed + i;
            DecodeResult r = decode(m, prompt, c, stop_at(Vocab::special(Special::cls)));
            auto tokens = accept(r);
            if (!tokens || tokens->empty() || !seen.insert(*tokens).second) continue;
            out.push_back({detokenize(m.vocab().decode(*tokens)), detail::continuation_score(m, prompt, *tokens),
                           Provenance::generated, std::nullopt});
        }
        return out;
    }

    std::vector<SuggestCandidate> complete(const Words& words, const DecoderConfig& dc0, std::size_t n) const
    {
        const LmModel& m = *m_models.lm;
        check_decoder(m, dc0);
        TokenSeq prefix = m.vocab().encode(words);
        // Long text keeps its tail so that half the window stays free.
        const std::size_t room = m.max_len() - std::min(dc0.max_new_tokens, m.max_len() / 2);
        if (prefix.size() > room) prefix.erase(prefix.begin(), prefix.end() - static_cast<std::ptrdiff_t>(room));
        const DecoderConfig dc = fit_budget(m, prefix.size(), dc0, "text");
        return sample(m, prefix, dc, n, [](const DecodeResult& r) {
            // The continuation stops at the first special token.
            TokenSeq t;
            for (TokenId id : r.tokens) {
                if (Vocab::is_special(id)) break;
                t.push_back(id);
            }
            return std::optional<TokenSeq>(t);
        });
    }

    std::vector<SuggestCandidate> expand(const Words& words, const DecoderConfig& dc0, std::size_t n) const
    {
        const LmModel& m = *m_models.expand;
        check_decoder(m, dc0);
        TokenSeq skeleton = m.vocab().encode(words);
        for (TokenId t : skeleton) {
            if (t == Vocab::special(Special::sep) || t == Vocab::special(Special::cls)) {
                throw RequestError("text", "may not contain [SEP] or [CLS]");
            }
        }
        const TokenSeq prompt = conditional_format({skeleton}, Frame::prefix_sep, m.max_len());
        const DecoderConfig dc = fit_budget(m, prompt.size(), dc0, "text");
        return sample(m, prompt, dc, n, [](const DecodeResult& r) -> std::optional<TokenSeq> {
            if (!r.finished) return std::nullopt;
            TokenSeq t(r.tokens.begin(), r.tokens.end() - 1);
            if (std::any_of(t.begin(), t.end(), [](TokenId id) { return Vocab::is_special(id); })) return std::nullopt;
            return t;
        });
    }

    std::vector<SuggestCandidate> infill(const std::vector<std::string>& keywords, const DecoderConfig& dc0,
                                         std::size_t n) const
    {
        const LmModel& m = *m_models.infill;
        check_decoder(m, dc0);
        std::vector<TokenSeq> kws;
        for (std::size_t i = 0; i < keywords.size(); ++i) {
            TokenSeq k;
            for (const auto& w : tokenize(keywords[i])) {
                auto id = m.vocab().find(w);
                if (!id || Vocab::is_special(*id)) {
                    throw RequestError("keywords[" + std::to_string(i) + "]",
                                       "\"" + w + "\" is not in the model vocabulary");
                }
                k.push_back(*id);
            }
            kws.push_back(std::move(k));
        }
        const DecoderConfig dc = fit_budget(m, keyword_frame(kws).size() + 1, dc0, "keywords");
        std::vector<SuggestCandidate> out;
        for (const auto& c : infill_candidates(m, kws, dc, n).accepted) {
            out.push_back({detokenize(m.vocab().decode(c.sentence)), c.score, Provenance::generated, std::nullopt});
        }
        return out;
    }

    std::vector<SuggestCandidate> polish_span(const Words& words, Span span, std::size_t n) const
    {
        if (span.start + span.length > words.size()) {
            throw RequestError("span", "[" + std::to_string(span.start) + ", +" + std::to_string(span.length)
                                           + ") lies outside a text of " + std::to_string(words.size()) + " words");
        }
        PolishConfig cfg = m_settings.polish;
        cfg.top_m = n;
        std::vector<SuggestCandidate> out;
        for (const auto& c : penwise::polish(words, span, *m_graph, *m_models.embeddings, cfg)) {
            out.push_back({c.phrase, c.score, Provenance::generated, std::nullopt});
        }
        return out;
    }

    /// Substitutions first, then insert/delete proposals on the substituted
    /// text. Substitutions keep positions, so every edit addresses the
    /// original words. Each proposal yields its own candidate on top of the
    /// substitutions.
    std::vector<SuggestCandidate> correct(const Words& words) const
    {
        std::vector<WordEdit> subs;
        Words stage = words;
        if (m_models.crf) {
            const CrfModel& crf = *m_models.crf;
            const Vocab& v = crf.vocab();
            const std::size_t k = std::min(m_settings.viterbi_k, v.size());
            for (const auto& e : correct_substitutions(crf, v.encode(words), k).edits) {
                if (Vocab::is_special(*e.new_token)) continue;
                subs.push_back({EditKind::substitute, e.position, words[e.position], v.token(*e.new_token), e.score});
                stage[e.position] = v.token(*e.new_token);
            }
        }
        std::vector<WordEdit> proposals;
        if (m_models.null_detector) {
            const NullDetectorModel& nd = *m_models.null_detector;
            const Vocab& v = nd.mlm.vocab();
            for (const auto& e : null_detect(nd, v.encode(stage), m_settings.null_thresholds)) {
                if (e.kind == EditKind::insert) {
                    proposals.push_back({EditKind::insert, e.position, std::nullopt, v.token(*e.new_token), e.score});
                } else {
                    proposals.push_back({EditKind::remove, e.position, words[e.position], std::nullopt, e.score});
                }
            }
        }
        std::vector<SuggestCandidate> out;
        auto add = [&](std::vector<WordEdit> edits) {
            std::stable_sort(edits.begin(), edits.end(), [](const WordEdit& a, const WordEdit& b) {
                return a.pos != b.pos ? a.pos < b.pos : a.kind < b.kind;
            });
            out.push_back({detokenize(apply_word_edits(words, edits)), detail::mean_score(edits),
                           Provenance::generated, edits});
        };
        if (subs.empty() && proposals.empty()) add({});
        if (!subs.empty()) add(subs);
        for (const auto& p : proposals) {
            std::vector<WordEdit> edits;
            for (const auto& s : subs) {
                // Deleting a substituted word deletes the original.
                if (!(p.kind == EditKind::remove && s.pos == p.pos)) edits.push_back(s);
            }
            edits.push_back(p);
            add(std::move(edits));
        }
        return out;
    }

    std::vector<SuggestCandidate> retrieve(const Words& words, std::size_t n) const
    {
        const Bm25Index& idx = *m_models.corpus;
        std::vector<SuggestCandidate> out;
        if (idx.size() == 0) return out;
        std::set<Words> seen{words};
        for (const auto& hit : idx.search(words, idx.size())) {
            if (out.size() == n || hit.score <= 0.0) break;
            if (!seen.insert(idx.doc(hit.doc)).second) continue;
            out.push_back({detokenize(idx.doc(hit.doc)), hit.score, Provenance::retrieved, std::nullopt});
        }
        return out;
    }

    EngineModels m_models;
    EngineSettings m_settings;
    std::optional<SimilarityGraph> m_graph;
};

}  // namespace penwise
