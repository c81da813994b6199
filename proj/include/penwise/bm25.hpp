#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "penwise/error.hpp"
#include "penwise/metrics.hpp"
#include "penwise/vocab.hpp"

namespace penwise {

struct Posting {
    std::size_t doc = 0;
    std::size_t tf = 0;

    bool operator==(const Posting&) const = default;
};

struct ScoredDoc {
    std::size_t doc = 0;
    double score = 0.0;
};

/// Okapi BM25 over whitespace-tokenized documents. The idf is
/// ln(1 + (N - df + 0.5) / (df + 0.5)), which never goes negative.
class Bm25Index {
  public:
    Bm25Index() = default;

    explicit Bm25Index(std::vector<Words> docs, double k1 = 1.2, double b = 0.75)
        : m_docs(std::move(docs)), m_k1(k1), m_b(b)
    {
        if (!(k1 >= 0.0) || !(b >= 0.0 && b <= 1.0)) {
            throw InvalidArgument("bm25: need k1 >= 0 and b in [0, 1]");
        }
        double total = 0.0;
        for (std::size_t d = 0; d < m_docs.size(); ++d) {
            std::map<std::string, std::size_t> tf;
            for (const auto& w : m_docs[d]) {
                ++tf[w];
            }
            for (const auto& [w, n] : tf) {
                m_postings[w].push_back({d, n});
            }
            m_lengths.push_back(m_docs[d].size());
            total += static_cast<double>(m_docs[d].size());
        }
        m_avgdl = m_docs.empty() ? 0.0 : total / static_cast<double>(m_docs.size());
    }

    std::size_t size() const { return m_docs.size(); }
    const Words& doc(std::size_t i) const { return m_docs.at(i); }
    const std::vector<Words>& docs() const { return m_docs; }
    double avgdl() const { return m_avgdl; }
    double k1() const { return m_k1; }
    double b() const { return m_b; }
    const std::map<std::string, std::vector<Posting>>& postings() const { return m_postings; }

    double idf(const std::string& term) const
    {
        auto it = m_postings.find(term);
        const double df = it == m_postings.end() ? 0.0 : static_cast<double>(it->second.size());
        const double n = static_cast<double>(m_docs.size());
        return std::log(1.0 + (n - df + 0.5) / (df + 0.5));
    }

    /// Score of every document for the distinct terms of `query`.
    std::vector<double> score_all(const Words& query) const
    {
        if (query.empty()) {
            throw InvalidArgument("bm25: empty query");
        }
        std::vector<double> scores(m_docs.size(), 0.0);
        for (const auto& term : std::set<std::string>(query.begin(), query.end())) {
            auto it = m_postings.find(term);
            if (it == m_postings.end()) {
                continue;
            }
            const double w = idf(term);
            for (const auto& p : it->second) {
                const double tf = static_cast<double>(p.tf);
                const double norm = 1.0 - m_b + m_b * static_cast<double>(m_lengths[p.doc]) / m_avgdl;
                scores[p.doc] += w * tf * (m_k1 + 1.0) / (tf + m_k1 * norm);
            }
        }
        return scores;
    }

    /// Top `topn` documents, score descending, ties by lower id.
    std::vector<ScoredDoc> search(const Words& query, std::size_t topn) const
    {
        if (topn == 0) {
            throw InvalidArgument("bm25: topn must be positive");
        }
        const auto scores = score_all(query);
        std::vector<ScoredDoc> out;
        for (std::size_t d = 0; d < scores.size(); ++d) {
            out.push_back({d, scores[d]});
        }
        std::stable_sort(out.begin(), out.end(), [](const ScoredDoc& a, const ScoredDoc& b) { return a.score > b.score; });
        out.resize(std::min(out.size(), topn));
        return out;
    }

  private:
    std::vector<Words> m_docs;
    double m_k1 = 1.2;
    double m_b = 0.75;
    std::map<std::string, std::vector<Posting>> m_postings;
    std::vector<std::size_t> m_lengths;
    double m_avgdl = 0.0;
};

/// Retrieval baseline for keywords-to-sentence: the best-scoring documents
/// that contain every keyword in order.
inline std::vector<ScoredDoc> bm25_keyword_search(const Bm25Index& index, const std::vector<Words>& keywords,
                                                  std::size_t topn)
{
    Words query;
    for (const auto& k : keywords) {
        query.insert(query.end(), k.begin(), k.end());
    }
    std::vector<ScoredDoc> out;
    if (index.size() == 0) {
        return out;
    }
    for (const auto& sd : index.search(query, index.size())) {
        if (sd.score > 0.0 && contains_in_order(index.doc(sd.doc), keywords)) {
            out.push_back(sd);
            if (out.size() == topn) {
                break;
            }
        }
    }
    return out;
}

}  // namespace penwise
