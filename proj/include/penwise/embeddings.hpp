#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "penwise/error.hpp"
#include "penwise/vocab.hpp"

namespace penwise {

/// Phrase vectors of one fixed dimension, kept in insertion order.
/// Phrases may contain spaces ("a lot of").
class EmbeddingTable {
  public:
    EmbeddingTable() = default;
    explicit EmbeddingTable(std::size_t dim) : m_dim(dim) {}

    void add(const std::string& phrase, std::vector<double> vec)
    {
        if (phrase.empty()) {
            throw InvalidArgument("embeddings: empty phrase");
        }
        if (m_dim == 0) {
            m_dim = vec.size();
        }
        if (vec.size() != m_dim || m_dim == 0) {
            throw InvalidArgument("embeddings: '" + phrase + "' has dimension " + std::to_string(vec.size())
                                  + ", table has " + std::to_string(m_dim));
        }
        if (m_index.count(phrase)) {
            throw InvalidArgument("embeddings: duplicate phrase '" + phrase + "'");
        }
        m_index.emplace(phrase, m_phrases.size());
        m_phrases.push_back(phrase);
        m_vectors.push_back(std::move(vec));
    }

    std::size_t dim() const { return m_dim; }
    std::size_t size() const { return m_phrases.size(); }
    bool contains(const std::string& phrase) const { return m_index.count(phrase) != 0; }
    const std::vector<std::string>& phrases() const { return m_phrases; }
    const std::vector<double>& vector(std::size_t i) const { return m_vectors.at(i); }

    const std::vector<double>& at(const std::string& phrase) const
    {
        auto it = m_index.find(phrase);
        if (it == m_index.end()) {
            throw LookupError("embeddings: no vector for '" + phrase + "'");
        }
        return m_vectors[it->second];
    }

    /// Every vector multiplied by `c`.
    EmbeddingTable scaled(double c) const
    {
        EmbeddingTable out(m_dim);
        for (std::size_t i = 0; i < size(); ++i) {
            auto v = m_vectors[i];
            for (auto& x : v) {
                x *= c;
            }
            out.add(m_phrases[i], std::move(v));
        }
        return out;
    }

    /// Mean of the word vectors of `words`.
    std::vector<double> mean_pool(const Words& words) const
    {
        if (words.empty()) {
            throw InvalidArgument("embeddings: cannot pool an empty sentence");
        }
        std::vector<double> out(m_dim, 0.0);
        for (const auto& w : words) {
            const auto& v = at(w);
            for (std::size_t j = 0; j < m_dim; ++j) {
                out[j] += v[j];
            }
        }
        for (auto& x : out) {
            x /= static_cast<double>(words.size());
        }
        return out;
    }

    /// Text form: one "phrase<TAB>v1 v2 ... vd" line per entry.
    std::string serialize() const
    {
        std::ostringstream os;
        os.precision(17);
        for (std::size_t i = 0; i < size(); ++i) {
            os << m_phrases[i] << '\t';
            for (std::size_t j = 0; j < m_dim; ++j) {
                os << (j ? " " : "") << m_vectors[i][j];
            }
            os << '\n';
        }
        return os.str();
    }

    static EmbeddingTable parse(std::istream& in)
    {
        EmbeddingTable t;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (!line.empty() && line.back() == '\r') {
                line.pop_back();
            }
            if (line.empty()) {
                continue;
            }
            const auto where = "embeddings line " + std::to_string(lineno) + ": ";
            const auto tab = line.find('\t');
            if (tab == std::string::npos || tab == 0) {
                throw ParseError(where + "expected 'phrase<TAB>values'");
            }
            std::istringstream vs(line.substr(tab + 1));
            std::vector<double> vec;
            std::string tok;
            while (vs >> tok) {
                try {
                    std::size_t used = 0;
                    vec.push_back(std::stod(tok, &used));
                    if (used != tok.size()) {
                        throw std::invalid_argument(tok);
                    }
                } catch (const std::exception&) {
                    throw ParseError(where + "bad number '" + tok + "'");
                }
            }
            try {
                t.add(line.substr(0, tab), std::move(vec));
            } catch (const InvalidArgument& e) {
                throw ParseError(where + e.what());
            }
        }
        return t;
    }

    static EmbeddingTable load(const std::string& path)
    {
        std::ifstream in(path);
        if (!in) {
            throw IoError("embeddings: cannot open " + path);
        }
        return parse(in);
    }

  private:
    std::size_t m_dim = 0;
    std::vector<std::string> m_phrases;
    std::vector<std::vector<double>> m_vectors;
    std::map<std::string, std::size_t> m_index;
};

}  // namespace penwise
