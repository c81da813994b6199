#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "penwise/embeddings.hpp"
#include "penwise/error.hpp"
#include "penwise/tensor.hpp"
#include "penwise/transport.hpp"
#include "penwise/vocab.hpp"

namespace penwise {

// ---------------------------------------------------------------------------
// Distances

/// Unit-cost edit distance (insert, delete, substitute).
template <typename Seq>
std::size_t levenshtein(const Seq& a, const Seq& b)
{
    std::vector<std::size_t> row(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) row[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        std::size_t diag = row[0];
        row[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            const std::size_t up = row[j];
            row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
            diag = up;
        }
    }
    return row[b.size()];
}

/// Normalized bag of words: distinct tokens in first-seen order and their
/// relative frequencies.
struct Nbow {
    Words words;
    std::vector<double> weights;
};

inline Nbow nbow(const Words& sentence)
{
    if (sentence.empty()) {
        throw InvalidArgument("nbow: empty sentence");
    }
    Nbow out;
    std::map<std::string, std::size_t> slot;
    for (const auto& w : sentence) {
        auto [it, fresh] = slot.emplace(w, out.words.size());
        if (fresh) {
            out.words.push_back(w);
            out.weights.push_back(0.0);
        }
        out.weights[it->second] += 1.0;
    }
    for (auto& x : out.weights) {
        x /= static_cast<double>(sentence.size());
    }
    return out;
}

inline double euclidean(const std::vector<double>& u, const std::vector<double>& v)
{
    double s = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        s += (u[i] - v[i]) * (u[i] - v[i]);
    }
    return std::sqrt(s);
}

/// Word mover's distance: exact transport cost between the two nBOW
/// histograms with Euclidean ground cost between word vectors.
inline double wmd(const Words& a, const Words& b, const EmbeddingTable& emb)
{
    const Nbow na = nbow(a), nb = nbow(b);
    std::vector<std::vector<double>> cost(na.words.size(), std::vector<double>(nb.words.size()));
    for (std::size_t i = 0; i < na.words.size(); ++i) {
        for (std::size_t j = 0; j < nb.words.size(); ++j) {
            cost[i][j] = euclidean(emb.at(na.words[i]), emb.at(nb.words[j]));
        }
    }
    return std::max(0.0, optimal_transport(na.weights, nb.weights, cost).cost);
}

/// Distance between nBOW-weighted centroids; a lower bound on wmd.
inline double word_centroid_distance(const Words& a, const Words& b, const EmbeddingTable& emb)
{
    auto centroid = [&](const Nbow& h) {
        std::vector<double> c(emb.dim(), 0.0);
        for (std::size_t i = 0; i < h.words.size(); ++i) {
            const auto& v = emb.at(h.words[i]);
            for (std::size_t j = 0; j < c.size(); ++j) c[j] += h.weights[i] * v[j];
        }
        return c;
    };
    return euclidean(centroid(nbow(a)), centroid(nbow(b)));
}

/// Cosine of mean-pooled sentence vectors.
inline double semantic_similarity(const Words& a, const Words& b, const EmbeddingTable& emb)
{
    return cosine(emb.mean_pool(a), emb.mean_pool(b));
}

// ---------------------------------------------------------------------------
// Pairs

enum class PairSource { back_translation, retrieval, dataset };

inline std::string to_string(PairSource s)
{
    switch (s) {
    case PairSource::back_translation: return "back_translation";
    case PairSource::retrieval: return "retrieval";
    case PairSource::dataset: return "dataset";
    }
    return "?";
}

inline PairSource pair_source_from_string(const std::string& s)
{
    if (s == "back_translation") return PairSource::back_translation;
    if (s == "retrieval") return PairSource::retrieval;
    if (s == "dataset") return PairSource::dataset;
    throw InvalidArgument("unknown pair source '" + s + "'");
}

struct SentencePair {
    Words s;
    Words t;
    PairSource source = PairSource::dataset;
    std::size_t lex_dist = 0;
    double wmd = 0.0;
    double sem_sim = 0.0;
};

struct FilterThresholds {
    std::size_t min_lex = 2;
    double min_wmd = 0.05;
    double min_sem = 0.6;

    void validate() const
    {
        if (!std::isfinite(min_wmd) || !std::isfinite(min_sem)) {
            throw ConfigError("filter thresholds must be finite");
        }
    }
};

struct FilterReport {
    std::size_t kept = 0;
    std::size_t rejected_lex = 0;
    std::size_t rejected_wmd = 0;
    std::size_t rejected_sem = 0;

    nlohmann::json to_json() const
    {
        return {{"kept", kept}, {"rejected_by", {{"lex", rejected_lex}, {"wmd", rejected_wmd}, {"sem", rejected_sem}}}};
    }
};

struct FilterResult {
    std::vector<SentencePair> kept;
    FilterReport report;
};

/// Fills lex_dist, wmd and sem_sim of `p`. A sentence whose word vectors
/// cancel out has no direction and scores sem_sim 0.
inline void score_pair(SentencePair& p, const EmbeddingTable& emb)
{
    p.lex_dist = levenshtein(p.s, p.t);
    p.wmd = wmd(p.s, p.t, emb);
    try {
        p.sem_sim = semantic_similarity(p.s, p.t, emb);
    } catch (const DegenerateInput&) {
        p.sem_sim = 0.0;
    }
}

/// Keeps pairs that are far apart on the surface but close in meaning.
/// A rejected pair is charged to the first failing test in the order
/// lex, wmd, sem. Output preserves input order.
inline FilterResult filter_pairs(std::vector<SentencePair> pairs, const FilterThresholds& th,
                                 const EmbeddingTable& emb)
{
    th.validate();
    FilterResult out;
    for (auto& p : pairs) {
        score_pair(p, emb);
        if (p.lex_dist < th.min_lex) {
            ++out.report.rejected_lex;
        } else if (p.wmd < th.min_wmd) {
            ++out.report.rejected_wmd;
        } else if (p.sem_sim < th.min_sem) {
            ++out.report.rejected_sem;
        } else {
            ++out.report.kept;
            out.kept.push_back(std::move(p));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Retrieval mining

struct RetrievalHit {
    std::size_t index = 0;
    double similarity = 0.0;
};

/// Exact cosine nearest neighbours over mean-pooled sentence vectors.
class SentenceIndex {
  public:
    SentenceIndex(std::vector<Words> corpus, const EmbeddingTable& emb) : m_corpus(std::move(corpus))
    {
        for (const auto& s : m_corpus) {
            m_vectors.push_back(emb.mean_pool(s));
        }
    }

    std::size_t size() const { return m_corpus.size(); }
    const Words& sentence(std::size_t i) const { return m_corpus.at(i); }

    /// Best `topn` sentences, similarity descending, ties by corpus order.
    /// Sentences identical to the query are skipped.
    std::vector<RetrievalHit> search(const Words& query, std::size_t topn, const EmbeddingTable& emb) const
    {
        const auto q = emb.mean_pool(query);
        std::vector<RetrievalHit> hits;
        for (std::size_t i = 0; i < m_corpus.size(); ++i) {
            if (m_corpus[i] == query) continue;
            hits.push_back({i, cosine(q, m_vectors[i])});
        }
        std::stable_sort(hits.begin(), hits.end(),
                         [](const RetrievalHit& a, const RetrievalHit& b) { return a.similarity > b.similarity; });
        hits.resize(std::min(hits.size(), topn));
        return hits;
    }

  private:
    std::vector<Words> m_corpus;
    std::vector<std::vector<double>> m_vectors;
};

inline std::vector<SentencePair> mine_retrieval(const SentenceIndex& index, const Words& query, std::size_t topn,
                                                const EmbeddingTable& emb)
{
    std::vector<SentencePair> out;
    for (const auto& h : index.search(query, topn, emb)) {
        SentencePair p{query, index.sentence(h.index), PairSource::retrieval};
        p.sem_sim = h.similarity;
        out.push_back(std::move(p));
    }
    return out;
}

inline std::vector<SentencePair> mine_retrieval(const std::vector<Words>& corpus, const Words& query,
                                                std::size_t topn, const EmbeddingTable& emb)
{
    return mine_retrieval(SentenceIndex(corpus, emb), query, topn, emb);
}

// ---------------------------------------------------------------------------
// Back-translation

/// Wire contract: {text, from, to} -> {text}.
class TranslationClient {
  public:
    virtual ~TranslationClient() = default;
    virtual std::string translate(const std::string& text, const std::string& from, const std::string& to) const = 0;
};

/// In-process client that rewrites words through two fixed tables: one for
/// requests into the pivot language and one for requests out of it. Words
/// missing from a table pass through unchanged, so empty tables give the
/// identity.
class MockTranslationClient : public TranslationClient {
  public:
    MockTranslationClient() = default;
    MockTranslationClient(std::string pivot, std::map<std::string, std::string> outbound,
                          std::map<std::string, std::string> inbound)
        : m_pivot(std::move(pivot)), m_outbound(std::move(outbound)), m_inbound(std::move(inbound))
    {}

    std::string translate(const std::string& text, const std::string&, const std::string& to) const override
    {
        const auto& table = to == m_pivot ? m_outbound : m_inbound;
        Words out;
        for (const auto& w : tokenize(text)) {
            auto it = table.find(w);
            out.push_back(it == table.end() ? w : it->second);
        }
        return detokenize(out);
    }

  private:
    std::string m_pivot;
    std::map<std::string, std::string> m_outbound;
    std::map<std::string, std::string> m_inbound;
};

/// Always unreachable.
class FailingTranslationClient : public TranslationClient {
  public:
    std::string translate(const std::string&, const std::string&, const std::string&) const override
    {
        throw TransportError("translation: endpoint unreachable");
    }
};

/// Round trip s -> pivot -> source; the result pairs s with the round trip.
inline SentencePair backtranslate(const TranslationClient& client, const Words& s, const std::string& pivot,
                                  const std::string& source_lang = "en")
{
    const std::string t1 = client.translate(detokenize(s), source_lang, pivot);
    const std::string t2 = client.translate(t1, pivot, source_lang);
    return {s, tokenize(t2), PairSource::back_translation};
}

// ---------------------------------------------------------------------------
// Files

inline nlohmann::json pair_to_json(const SentencePair& p)
{
    return {{"s", detokenize(p.s)}, {"t", detokenize(p.t)}, {"source", to_string(p.source)}};
}

inline std::string write_pairs_jsonl(const std::vector<SentencePair>& pairs)
{
    std::string out;
    for (const auto& p : pairs) {
        out += pair_to_json(p).dump() + "\n";
    }
    return out;
}

inline std::vector<SentencePair> read_pairs_jsonl(std::istream& in)
{
    std::vector<SentencePair> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto where = "pairs line " + std::to_string(lineno) + ": ";
        try {
            const auto j = nlohmann::json::parse(line);
            SentencePair p{tokenize(j.at("s").get<std::string>()), tokenize(j.at("t").get<std::string>())};
            p.source = pair_source_from_string(j.value("source", std::string("dataset")));
            out.push_back(std::move(p));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(where + e.what());
        } catch (const InvalidArgument& e) {
            throw ParseError(where + e.what());
        }
    }
    return out;
}

/// LCQMC / BQ layout: "sentence1<TAB>sentence2<TAB>label" per line. Only
/// label-1 rows (paraphrases) are returned. Sentences are split into
/// characters, since the corpora are unsegmented Chinese.
inline std::vector<SentencePair> load_lcqmc_tsv(std::istream& in, TokenizerKind kind = TokenizerKind::character)
{
    std::vector<SentencePair> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::stringstream ss(line);
        for (std::string c; std::getline(ss, c, '\t');) cols.push_back(c);
        if (cols.size() != 3 || (cols[2] != "0" && cols[2] != "1")) {
            throw ParseError("lcqmc line " + std::to_string(lineno) + ": expected 's1<TAB>s2<TAB>0|1'");
        }
        if (cols[2] == "1") {
            out.push_back({tokenize(cols[0], kind), tokenize(cols[1], kind), PairSource::dataset});
        }
    }
    return out;
}

}  // namespace penwise
