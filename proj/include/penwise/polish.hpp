#pragma once

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "penwise/decode.hpp"
#include "penwise/embeddings.hpp"
#include "penwise/error.hpp"
#include "penwise/infill.hpp"
#include "penwise/lm.hpp"
#include "penwise/rng.hpp"
#include "penwise/tensor.hpp"
#include "penwise/vocab.hpp"

namespace penwise {

// ---------------------------------------------------------------------------
// Similarity graph

struct Neighbor {
    std::size_t node = 0;
    double sim = 0.0;
};

/// Phrase k-NN graph under cosine similarity. Immutable once built.
class SimilarityGraph {
  public:
    SimilarityGraph() = default;
    SimilarityGraph(std::vector<std::string> phrases, std::vector<std::vector<Neighbor>> neighbors, std::size_t topn)
        : m_phrases(std::move(phrases)), m_neighbors(std::move(neighbors)), m_topn(topn)
    {
        for (std::size_t i = 0; i < m_phrases.size(); ++i) {
            m_index.emplace(m_phrases[i], i);
        }
    }

    std::size_t size() const { return m_phrases.size(); }
    std::size_t topn() const { return m_topn; }
    const std::string& phrase(std::size_t i) const { return m_phrases.at(i); }
    const std::vector<Neighbor>& neighbors(std::size_t i) const { return m_neighbors.at(i); }

    std::optional<std::size_t> find(const std::string& phrase) const
    {
        auto it = m_index.find(phrase);
        return it == m_index.end() ? std::nullopt : std::optional<std::size_t>(it->second);
    }

  private:
    std::vector<std::string> m_phrases;
    std::vector<std::vector<Neighbor>> m_neighbors;
    std::map<std::string, std::size_t> m_index;
    std::size_t m_topn = 0;
};

/// Brute-force cosine k-NN over every phrase in `emb`. Neighbours sort by
/// similarity descending, then phrase text ascending.
inline SimilarityGraph build_graph(const EmbeddingTable& emb, std::size_t topn)
{
    const std::size_t n = emb.size();
    if (n < 2) {
        throw InvalidArgument("build_graph: need at least 2 phrases, got " + std::to_string(n));
    }
    if (topn == 0) {
        throw InvalidArgument("build_graph: topn must be positive");
    }
    for (std::size_t i = 0; i < n; ++i) {
        const auto& v = emb.vector(i);
        if (std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; })) {
            throw DegenerateInput("build_graph: zero vector for '" + emb.phrases()[i] + "'");
        }
    }
    std::vector<std::vector<Neighbor>> adj(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (i != j) {
                adj[i].push_back({j, cosine(emb.vector(i), emb.vector(j))});
            }
        }
        const auto& names = emb.phrases();
        std::sort(adj[i].begin(), adj[i].end(), [&](const Neighbor& a, const Neighbor& b) {
            if (a.sim != b.sim) return a.sim > b.sim;
            return names[a.node] < names[b.node];
        });
        adj[i].resize(std::min(adj[i].size(), topn));
    }
    return SimilarityGraph(emb.phrases(), std::move(adj), topn);
}

// ---------------------------------------------------------------------------
// Context fit and ranking

/// Mean cosine between the input vectors of the context phrases and the
/// output vector of `candidate`.
inline double s2_score(const std::string& candidate, const std::vector<std::string>& context,
                       const EmbeddingTable& in_emb, const EmbeddingTable& out_emb)
{
    if (context.empty()) {
        throw InvalidArgument("s2_score: empty context");
    }
    const auto& w = out_emb.at(candidate);
    double total = 0.0;
    for (const auto& c : context) {
        total += cosine(in_emb.at(c), w);
    }
    return total / static_cast<double>(context.size());
}

struct PolishConfig {
    double lambda = 0.5;
    std::size_t window = 4;
    std::size_t top_m = 5;
    std::size_t graph_topn = 10;

    void validate() const
    {
        if (!(lambda >= 0.0 && lambda <= 1.0)) {
            throw ConfigError("polish.lambda must be in [0, 1], got " + std::to_string(lambda));
        }
        if (window == 0) throw ConfigError("polish.window must be >= 1");
        if (top_m == 0) throw ConfigError("polish.top_m must be >= 1");
        if (graph_topn == 0) throw ConfigError("polish.graph_topn must be >= 1");
    }
};

struct ScoredCandidate {
    std::string phrase;
    double s1 = 0.0;
    double s2 = 0.0;
    double score = 0.0;
};

inline double combine_scores(double lambda, double s1, double s2) { return lambda * s1 + (1.0 - lambda) * s2; }

/// Score descending, ties by phrase text.
inline void rank_candidates(std::vector<ScoredCandidate>& cands)
{
    std::sort(cands.begin(), cands.end(), [](const ScoredCandidate& a, const ScoredCandidate& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.phrase < b.phrase;
    });
}

/// Up to `window` words either side of the span. Words without a vector
/// carry no signal and are left out.
inline std::vector<std::string> polish_context(const Words& sentence, Span span, std::size_t window,
                                               const EmbeddingTable& emb)
{
    std::vector<std::string> out;
    const std::size_t lo = span.start > window ? span.start - window : 0;
    const std::size_t hi = std::min(sentence.size(), span.start + span.length + window);
    for (std::size_t i = lo; i < hi; ++i) {
        if (i >= span.start && i < span.start + span.length) continue;
        if (emb.contains(sentence[i])) out.push_back(sentence[i]);
    }
    return out;
}

/// Replacement candidates for sentence[span], ranked by a blend of
/// similarity to the original phrase and fit with its context. A phrase
/// absent from the graph yields no candidates. With no usable context
/// words, S2 is 0 for every candidate.
inline std::vector<ScoredCandidate> polish(const Words& sentence, Span span, const SimilarityGraph& graph,
                                           const EmbeddingTable& emb, const PolishConfig& cfg)
{
    cfg.validate();
    if (span.length == 0 || span.start + span.length > sentence.size()) {
        throw InvalidArgument("polish: span [" + std::to_string(span.start) + ", +" + std::to_string(span.length)
                              + ") outside a sentence of " + std::to_string(sentence.size()) + " words");
    }
    Words phrase_words(sentence.begin() + static_cast<std::ptrdiff_t>(span.start),
                       sentence.begin() + static_cast<std::ptrdiff_t>(span.start + span.length));
    const auto node = graph.find(detokenize(phrase_words));
    if (!node) {
        return {};
    }
    const auto context = polish_context(sentence, span, cfg.window, emb);
    std::vector<ScoredCandidate> out;
    for (const auto& nb : graph.neighbors(*node)) {
        ScoredCandidate c;
        c.phrase = graph.phrase(nb.node);
        c.s1 = nb.sim;
        c.s2 = context.empty() ? 0.0 : s2_score(c.phrase, context, emb, emb);
        c.score = combine_scores(cfg.lambda, c.s1, c.s2);
        out.push_back(std::move(c));
    }
    rank_candidates(out);
    out.resize(std::min(out.size(), cfg.top_m));
    return out;
}

// ---------------------------------------------------------------------------
// Global expansion: skeleton pairs

struct AnnotatedSentence {
    Words tokens;
    std::vector<Span> modifiers;
    Words pos;
};

/// JSON lines {tokens:[...], modifiers:[[start,len],...], pos:[...]}. The
/// pos list is optional but must align with tokens when present. Modifier
/// spans may nest; together they must leave at least one token.
inline std::vector<AnnotatedSentence> parse_annotations(std::istream& in)
{
    std::vector<AnnotatedSentence> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto where = "annotations line " + std::to_string(lineno) + ": ";
        AnnotatedSentence a;
        try {
            const auto j = nlohmann::json::parse(line);
            a.tokens = j.at("tokens").get<Words>();
            for (const auto& m : j.value("modifiers", nlohmann::json::array())) {
                const auto pair = m.get<std::vector<std::size_t>>();
                if (pair.size() != 2) throw ParseError(where + "modifier must be [start, len]");
                a.modifiers.push_back({pair[0], pair[1]});
            }
            a.pos = j.value("pos", Words{});
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(where + e.what());
        }
        if (a.tokens.empty()) throw ParseError(where + "empty tokens");
        if (!a.pos.empty() && a.pos.size() != a.tokens.size()) {
            throw ParseError(where + "pos has " + std::to_string(a.pos.size()) + " tags for "
                             + std::to_string(a.tokens.size()) + " tokens");
        }
        std::vector<bool> covered(a.tokens.size(), false);
        for (const auto& m : a.modifiers) {
            if (m.length == 0 || m.start + m.length > a.tokens.size()) {
                throw ParseError(where + "modifier [" + std::to_string(m.start) + ", " + std::to_string(m.length)
                                 + "] out of range");
            }
            std::fill(covered.begin() + static_cast<std::ptrdiff_t>(m.start),
                      covered.begin() + static_cast<std::ptrdiff_t>(m.start + m.length), true);
        }
        if (std::all_of(covered.begin(), covered.end(), [](bool c) { return c; })) {
            throw ParseError(where + "modifiers cover the whole sentence");
        }
        out.push_back(std::move(a));
    }
    return out;
}

struct SkeletonPair {
    Words skeleton;
    Words sentence;
};

/// Drops each modifier span independently with probability `drop_rate`.
inline SkeletonPair make_skeleton(const AnnotatedSentence& a, Rng& rng, double drop_rate)
{
    std::vector<bool> drop(a.tokens.size(), false);
    for (const auto& m : a.modifiers) {
        if (rng.bernoulli(drop_rate)) {
            std::fill(drop.begin() + static_cast<std::ptrdiff_t>(m.start),
                      drop.begin() + static_cast<std::ptrdiff_t>(m.start + m.length), true);
        }
    }
    SkeletonPair p{{}, a.tokens};
    for (std::size_t i = 0; i < a.tokens.size(); ++i) {
        if (!drop[i]) p.skeleton.push_back(a.tokens[i]);
    }
    return p;
}

inline std::vector<SkeletonPair> skeleton_pairs(const std::vector<AnnotatedSentence>& parsed, Rng& rng,
                                                double drop_rate)
{
    if (!(drop_rate >= 0.0 && drop_rate <= 1.0)) {
        throw InvalidArgument("skeleton_pairs: drop_rate must be in [0, 1]");
    }
    std::vector<SkeletonPair> out;
    for (const auto& a : parsed) {
        out.push_back(make_skeleton(a, rng, drop_rate));
    }
    return out;
}

/// "T [SEP] S [CLS]" training sequence for the expansion language model.
inline TokenSeq expansion_training_string(const Vocab& vocab, const SkeletonPair& p, std::size_t max_len)
{
    return conditional_format({vocab.encode(p.skeleton), vocab.encode(p.sentence)}, Frame::pair_sep_cls, max_len);
}

// ---------------------------------------------------------------------------
// Local expansion

struct ExpandConfig {
    std::size_t max_sites = 2;
    DecoderConfig decoder;

    void validate() const
    {
        if (max_sites == 0) throw ConfigError("expand.max_sites must be >= 1");
    }
};

namespace detail {

inline bool is_noun(const std::string& tag) { return tag == "NOUN" || tag == "PROPN"; }

inline bool is_clause_break(const std::string& token, const std::string& tag)
{
    static const std::set<std::string> marks{".", ",", ";", ":", "!", "?"};
    return tag == "PUNCT" || marks.count(token) != 0;
}

}  // namespace detail

/// Gap indices (0..n, "before token g") where a modifier may go. After
/// every clause-final noun comes first, then before every noun that starts
/// its noun run without an adjective in front, both left to right, capped
/// at `max_sites` and returned ascending.
inline std::vector<std::size_t> select_sites(const Words& tokens, const Words& pos, std::size_t max_sites)
{
    if (tokens.size() != pos.size()) {
        throw InvalidArgument("select_sites: " + std::to_string(pos.size()) + " tags for "
                              + std::to_string(tokens.size()) + " tokens");
    }
    std::vector<std::size_t> ranked;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const bool clause_end = i + 1 == tokens.size() || detail::is_clause_break(tokens[i + 1], pos[i + 1]);
        if (detail::is_noun(pos[i]) && clause_end) ranked.push_back(i + 1);
    }
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (!detail::is_noun(pos[i])) continue;
        if (i > 0 && (pos[i - 1] == "ADJ" || detail::is_noun(pos[i - 1]))) continue;
        ranked.push_back(i);
    }
    std::vector<std::size_t> out;
    for (auto g : ranked) {
        if (out.size() == max_sites) break;
        if (std::find(out.begin(), out.end(), g) == out.end()) out.push_back(g);
    }
    std::sort(out.begin(), out.end());
    return out;
}

/// The sentence with a [MASK] placeholder at each gap.
inline Words expansion_probe(const Words& tokens, const std::vector<std::size_t>& gaps)
{
    const std::string mask(kSpecialNames[static_cast<std::size_t>(Special::mask)]);
    Words out;
    std::size_t next = 0;
    for (std::size_t i = 0; i <= tokens.size(); ++i) {
        if (next < gaps.size() && gaps[next] == i) {
            out.push_back(mask);
            ++next;
        }
        if (i < tokens.size()) out.push_back(tokens[i]);
    }
    return out;
}

struct Expansion {
    Words probe;
    Words expanded;
    /// Inserted runs, in positions of `expanded`; empty answers are omitted.
    std::vector<Span> inserted;
};

/// Selects sites, then asks the infilling model for a modifier at each.
/// Original tokens keep their order; only insertions happen.
inline Expansion local_expand(const Words& tokens, const Words& pos, const LmModel& infill_model,
                              const ExpandConfig& cfg)
{
    cfg.validate();
    if (tokens.empty()) {
        throw InvalidArgument("local_expand: empty sentence");
    }
    const auto gaps = select_sites(tokens, pos, cfg.max_sites);
    Expansion out;
    out.probe = expansion_probe(tokens, gaps);
    if (gaps.empty()) {
        out.expanded = tokens;
        return out;
    }
    const Vocab& vocab = infill_model.vocab();
    const TokenId blank = Vocab::special(Special::blank), ans = Vocab::special(Special::ans);
    TokenSeq frame;
    for (const auto& w : out.probe) {
        frame.push_back(w == kSpecialNames[static_cast<std::size_t>(Special::mask)] ? blank : vocab.encode({w})[0]);
    }
    const InfillCandidate filled = infill_frame(infill_model, frame, cfg.decoder);
    std::vector<Words> answers(1);
    for (TokenId t : filled.raw) {
        if (t == ans) {
            answers.emplace_back();
        } else {
            answers.back().push_back(vocab.token(t));
        }
    }
    std::size_t next = 0;
    for (std::size_t i = 0; i <= tokens.size(); ++i) {
        if (next < gaps.size() && gaps[next] == i) {
            const auto& a = answers[next++];
            if (!a.empty()) {
                out.inserted.push_back({out.expanded.size(), a.size()});
                out.expanded.insert(out.expanded.end(), a.begin(), a.end());
            }
        }
        if (i < tokens.size()) out.expanded.push_back(tokens[i]);
    }
    return out;
}

}  // namespace penwise
