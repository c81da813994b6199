#pragma once

// Linear-chain CRF over a restricted label lattice.
//
// Emissions S are [T, V]; transitions M are [V, V] with M(u, v) scoring
// label u followed by label v. A lattice lists the labels kept at each
// position; the full lattice gives the exact partition function.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "penwise/error.hpp"
#include "penwise/tensor.hpp"
#include "penwise/vocab.hpp"

namespace penwise {

struct Lattice {
    /// Kept labels per position, ascending.
    std::vector<std::vector<TokenId>> labels;

    std::size_t length() const { return labels.size(); }
};

namespace detail {

inline double log_sum_exp(const std::vector<double>& xs)
{
    double mx = -std::numeric_limits<double>::infinity();
    for (double x : xs) {
        mx = std::max(mx, x);
    }
    if (!std::isfinite(mx)) {
        return mx;
    }
    double s = 0.0;
    for (double x : xs) {
        s += std::exp(x - mx);
    }
    return mx + std::log(s);
}

inline void check_crf_shapes(const Tensor& emissions, const Tensor& transitions)
{
    require_rank2(emissions, "crf");
    require_rank2(transitions, "crf");
    const std::size_t v = emissions.cols();
    if (emissions.rows() == 0) {
        throw InvalidArgument("crf: empty sequence");
    }
    if (transitions.rows() != v || transitions.cols() != v) {
        throw InvalidArgument("crf: transitions must be " + std::to_string(v) + "x" + std::to_string(v) + ", got "
                              + shape_str(transitions.shape()));
    }
}

inline void check_lattice(const Lattice& lat, std::size_t t_len, std::size_t v)
{
    if (lat.length() != t_len) {
        throw InvalidArgument("crf: lattice covers " + std::to_string(lat.length()) + " positions, sequence has "
                              + std::to_string(t_len));
    }
    for (const auto& step : lat.labels) {
        if (step.empty()) {
            throw InvalidArgument("crf: lattice step with no labels");
        }
        for (TokenId y : step) {
            if (y >= v) {
                throw InvalidArgument("crf: lattice label " + std::to_string(y) + " out of range");
            }
        }
    }
}

}  // namespace detail

inline Lattice full_lattice(std::size_t length, std::size_t vocab_size)
{
    Lattice lat;
    std::vector<TokenId> all(vocab_size);
    for (std::size_t v = 0; v < vocab_size; ++v) {
        all[v] = static_cast<TokenId>(v);
    }
    lat.labels.assign(length, all);
    return lat;
}

/// Top-k lattice. Position t ranks the greedy-chain label first (argmax of
/// s_t(v) + M(g_{t-1}, v)), then the rest by s_t(v) + max_u M(u, v), ties to
/// the lower id. Kept sets are nested in k, so k = 1 is the greedy chain and
/// k = V is the full lattice. `force` adds a label sequence to every step.
inline Lattice truncated_lattice(const Tensor& emissions, const Tensor& transitions, std::size_t k,
                                 const std::optional<TokenSeq>& force = std::nullopt)
{
    detail::check_crf_shapes(emissions, transitions);
    const std::size_t t_len = emissions.rows();
    const std::size_t v = emissions.cols();
    if (k == 0 || k > v) {
        throw InvalidArgument("crf: k must lie in [1, " + std::to_string(v) + "], got " + std::to_string(k));
    }
    if (force && force->size() != t_len) {
        throw InvalidArgument("crf: forced path length mismatch");
    }
    std::vector<double> best_in(v, -std::numeric_limits<double>::infinity());
    for (std::size_t u = 0; u < v; ++u) {
        for (std::size_t w = 0; w < v; ++w) {
            best_in[w] = std::max(best_in[w], transitions.at(u, w));
        }
    }
    Lattice lat;
    lat.labels.resize(t_len);
    std::optional<TokenId> prev;
    for (std::size_t t = 0; t < t_len; ++t) {
        std::vector<double> chain(v), rank(v);
        for (std::size_t w = 0; w < v; ++w) {
            const double s = emissions.at(t, w);
            chain[w] = prev ? s + transitions.at(*prev, w) : s;
            rank[w] = t == 0 ? s : s + best_in[w];
        }
        TokenId g = 0;
        for (std::size_t w = 1; w < v; ++w) {
            if (chain[w] > chain[g]) {
                g = static_cast<TokenId>(w);
            }
        }
        std::vector<TokenId> order;
        for (std::size_t w = 0; w < v; ++w) {
            if (w != g) {
                order.push_back(static_cast<TokenId>(w));
            }
        }
        std::stable_sort(order.begin(), order.end(), [&](TokenId a, TokenId b) { return rank[a] > rank[b]; });
        auto& kept = lat.labels[t];
        kept.push_back(g);
        kept.insert(kept.end(), order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k - 1));
        if (force && std::find(kept.begin(), kept.end(), (*force)[t]) == kept.end()) {
            kept.push_back((*force)[t]);
        }
        std::sort(kept.begin(), kept.end());
        prev = g;
    }
    return lat;
}

/// log Z over every path of the lattice. Backward yields node and edge
/// marginals as gradients of the emissions and transitions.
inline Tensor crf_log_partition(const Tensor& emissions, const Tensor& transitions, const Lattice& lat)
{
    detail::check_crf_shapes(emissions, transitions);
    const std::size_t t_len = emissions.rows();
    const std::size_t v = emissions.cols();
    detail::check_lattice(lat, t_len, v);

    const auto& L = lat.labels;
    std::vector<std::vector<double>> alpha(t_len), beta(t_len);
    alpha[0].resize(L[0].size());
    for (std::size_t i = 0; i < L[0].size(); ++i) {
        alpha[0][i] = emissions.at(0, L[0][i]);
    }
    std::vector<double> buf;
    for (std::size_t t = 1; t < t_len; ++t) {
        alpha[t].resize(L[t].size());
        for (std::size_t j = 0; j < L[t].size(); ++j) {
            buf.clear();
            for (std::size_t i = 0; i < L[t - 1].size(); ++i) {
                buf.push_back(alpha[t - 1][i] + transitions.at(L[t - 1][i], L[t][j]));
            }
            alpha[t][j] = emissions.at(t, L[t][j]) + detail::log_sum_exp(buf);
        }
    }
    beta[t_len - 1].assign(L[t_len - 1].size(), 0.0);
    for (std::size_t t = t_len - 1; t-- > 0;) {
        beta[t].resize(L[t].size());
        for (std::size_t i = 0; i < L[t].size(); ++i) {
            buf.clear();
            for (std::size_t j = 0; j < L[t + 1].size(); ++j) {
                buf.push_back(transitions.at(L[t][i], L[t + 1][j]) + emissions.at(t + 1, L[t + 1][j])
                              + beta[t + 1][j]);
            }
            beta[t][i] = detail::log_sum_exp(buf);
        }
    }
    const double log_z = detail::log_sum_exp(alpha[t_len - 1]);
    if (!std::isfinite(log_z)) {
        throw NumericFailure("crf: non-finite log partition");
    }

    auto backward = [L, alpha = std::move(alpha), beta = std::move(beta), log_z, t_len,
                     v](const detail::Node& o) {
        const double g = o.grad[0];
        const auto& pe = o.parents[0];
        const auto& pm = o.parents[1];
        if (double* ge = detail::grad_of(pe)) {
            for (std::size_t t = 0; t < t_len; ++t) {
                for (std::size_t i = 0; i < L[t].size(); ++i) {
                    ge[t * v + L[t][i]] += g * std::exp(alpha[t][i] + beta[t][i] - log_z);
                }
            }
        }
        if (double* gm = detail::grad_of(pm)) {
            for (std::size_t t = 1; t < t_len; ++t) {
                for (std::size_t i = 0; i < L[t - 1].size(); ++i) {
                    for (std::size_t j = 0; j < L[t].size(); ++j) {
                        const TokenId a = L[t - 1][i], b = L[t][j];
                        const double lp = alpha[t - 1][i] + pm->value[a * v + b] + pe->value[t * v + b]
                                          + beta[t][j] - log_z;
                        gm[a * v + b] += g * std::exp(lp);
                    }
                }
            }
        }
    };
    return detail::record(Shape{}, {log_z}, {emissions, transitions}, std::move(backward));
}

/// Unnormalized score of one label sequence.
inline Tensor crf_path_score(const Tensor& emissions, const Tensor& transitions, const TokenSeq& labels)
{
    detail::check_crf_shapes(emissions, transitions);
    if (labels.size() != emissions.rows()) {
        throw InvalidArgument("crf: " + std::to_string(labels.size()) + " labels for " + std::to_string(emissions.rows())
                              + " positions");
    }
    const std::size_t v = emissions.cols();
    std::vector<std::size_t> cols(labels.begin(), labels.end());
    Tensor s = sum(pick_per_row(emissions, cols));
    if (labels.size() == 1) {
        return s;
    }
    std::vector<std::size_t> edges;
    for (std::size_t t = 1; t < labels.size(); ++t) {
        edges.push_back(static_cast<std::size_t>(labels[t - 1]) * v + labels[t]);
    }
    return add(s, sum(pick(transitions, edges)));
}

/// Plain double version of the path score, summed left to right.
inline double path_score_value(const Tensor& emissions, const Tensor& transitions, const TokenSeq& labels)
{
    double s = emissions.at(0, labels[0]);
    for (std::size_t t = 1; t < labels.size(); ++t) {
        s += transitions.at(labels[t - 1], labels[t]) + emissions.at(t, labels[t]);
    }
    return s;
}

/// log P(labels) with Z taken over the given lattice.
inline Tensor crf_log_prob(const Tensor& emissions, const Tensor& transitions, const TokenSeq& labels,
                           const Lattice& lat)
{
    return sub(crf_path_score(emissions, transitions, labels), crf_log_partition(emissions, transitions, lat));
}

struct ViterbiPath {
    TokenSeq labels;
    double score = 0.0;
};

/// Highest-scoring path in the lattice. Among equal scores the path that is
/// lexicographically smallest by label id wins.
inline ViterbiPath viterbi(const Tensor& emissions, const Tensor& transitions, const Lattice& lat)
{
    detail::check_crf_shapes(emissions, transitions);
    const std::size_t t_len = emissions.rows();
    detail::check_lattice(lat, t_len, emissions.cols());
    const auto& L = lat.labels;
    // best[t][i]: best score of a suffix starting at position t with label L[t][i].
    std::vector<std::vector<double>> best(t_len);
    best[t_len - 1].resize(L[t_len - 1].size());
    for (std::size_t i = 0; i < L[t_len - 1].size(); ++i) {
        best[t_len - 1][i] = emissions.at(t_len - 1, L[t_len - 1][i]);
    }
    for (std::size_t t = t_len - 1; t-- > 0;) {
        best[t].resize(L[t].size());
        for (std::size_t i = 0; i < L[t].size(); ++i) {
            double m = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < L[t + 1].size(); ++j) {
                m = std::max(m, transitions.at(L[t][i], L[t + 1][j]) + best[t + 1][j]);
            }
            best[t][i] = emissions.at(t, L[t][i]) + m;
        }
    }
    ViterbiPath out;
    std::size_t pick_i = 0;
    for (std::size_t i = 1; i < L[0].size(); ++i) {
        if (best[0][i] > best[0][pick_i]) {
            pick_i = i;
        }
    }
    out.labels.push_back(L[0][pick_i]);
    for (std::size_t t = 1; t < t_len; ++t) {
        const TokenId prev = out.labels.back();
        std::size_t bj = 0;
        double bv = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < L[t].size(); ++j) {
            const double val = transitions.at(prev, L[t][j]) + best[t][j];
            if (val > bv) {
                bv = val;
                bj = j;
            }
        }
        out.labels.push_back(L[t][bj]);
    }
    out.score = path_score_value(emissions, transitions, out.labels);
    return out;
}

struct CrfLossTerms {
    Tensor dp;
    Tensor crf;
    Tensor dp_focal;
    Tensor crf_focal;
    Tensor total;
    Tensor total_focal;
};

/// All six training losses for one sentence. The CRF term normalizes over
/// the top-k lattice with the gold path forced in; k = V is exact.
inline CrfLossTerms crf_loss_terms(const Tensor& emissions, const Tensor& transitions, const TokenSeq& gold,
                                   double gamma, std::size_t k)
{
    if (gamma < 0.0) {
        throw InvalidArgument("crf: gamma must be nonnegative, got " + std::to_string(gamma));
    }
    detail::check_crf_shapes(emissions, transitions);
    if (gold.size() != emissions.rows()) {
        throw InvalidArgument("crf: target length " + std::to_string(gold.size()) + " != input length "
                              + std::to_string(emissions.rows()));
    }
    for (TokenId y : gold) {
        if (y >= emissions.cols()) {
            throw InvalidArgument("crf: target label " + std::to_string(y) + " out of range");
        }
    }
    Lattice lat;
    {
        NoGradGuard guard;
        lat = truncated_lattice(emissions, transitions, k, gold);
    }
    std::vector<std::size_t> cols(gold.begin(), gold.end());
    Tensor dp_logp = pick_per_row(log_softmax_rows(emissions), cols);
    Tensor crf_logp = crf_log_prob(emissions, transitions, gold, lat);
    CrfLossTerms out;
    out.dp = scale(sum(dp_logp), -1.0);
    out.crf = scale(crf_logp, -1.0);
    out.dp_focal = sum(focal_nll(dp_logp, gamma));
    out.crf_focal = sum(focal_nll(crf_logp, gamma));
    out.total = add(out.dp, out.crf);
    out.total_focal = add(out.dp_focal, out.crf_focal);
    return out;
}

}  // namespace penwise
