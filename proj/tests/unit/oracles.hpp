#pragma once

// Brute-force references for the CRF and the 3x3 transport problem.

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "penwise/crf.hpp"

namespace penwise::testing {

// Every label sequence of length t over v labels.
inline std::vector<TokenSeq> all_paths(std::size_t t, std::size_t v)
{
    std::vector<TokenSeq> out{{}};
    for (std::size_t i = 0; i < t; ++i) {
        std::vector<TokenSeq> next;
        for (const auto& p : out) {
            for (TokenId y = 0; y < v; ++y) {
                auto q = p;
                q.push_back(y);
                next.push_back(q);
            }
        }
        out = std::move(next);
    }
    return out;
}

inline double brute_log_z(const Tensor& s, const Tensor& m)
{
    std::vector<double> all;
    for (const auto& p : all_paths(s.rows(), s.cols())) all.push_back(path_score_value(s, m, p));
    double mx = *std::max_element(all.begin(), all.end());
    double acc = 0.0;
    for (double x : all) acc += std::exp(x - mx);
    return mx + std::log(acc);
}

inline TokenSeq brute_argmax(const Tensor& s, const Tensor& m)
{
    TokenSeq best;
    double bv = -1e300;
    for (const auto& p : all_paths(s.rows(), s.cols())) {
        const double v = path_score_value(s, m, p);
        if (v > bv) {
            bv = v;
            best = p;
        }
    }
    return best;
}

// Minimum cost over all basic feasible solutions of a 3x3 transport
// problem: pick 5 cells, solve the 5 independent marginal equations,
// keep nonnegative solutions.
inline double vertex_oracle(const std::array<double, 3>& a, const std::array<double, 3>& b,
                            const std::array<std::array<double, 3>, 3>& c)
{
    double best = INFINITY;
    for (int mask = 0; mask < (1 << 9); ++mask) {
        if (__builtin_popcount(static_cast<unsigned>(mask)) != 5) continue;
        std::vector<int> cells;
        for (int k = 0; k < 9; ++k)
            if (mask & (1 << k)) cells.push_back(k);
        // Equations: rows 0..2 sum to a, columns 0..1 sum to b.
        double m[5][6] = {};
        for (int e = 0; e < 5; ++e) {
            for (int v = 0; v < 5; ++v) {
                const int r = cells[v] / 3, col = cells[v] % 3;
                m[e][v] = e < 3 ? (r == e ? 1.0 : 0.0) : (col == e - 3 ? 1.0 : 0.0);
            }
            m[e][5] = e < 3 ? a[e] : b[e - 3];
        }
        bool singular = false;
        for (int p = 0; p < 5 && !singular; ++p) {
            int piv = p;
            for (int r = p + 1; r < 5; ++r)
                if (std::abs(m[r][p]) > std::abs(m[piv][p])) piv = r;
            if (std::abs(m[piv][p]) < 1e-12) {
                singular = true;
                break;
            }
            std::swap(m[p], m[piv]);
            for (int r = 0; r < 5; ++r) {
                if (r == p) continue;
                const double f = m[r][p] / m[p][p];
                for (int k = p; k < 6; ++k) m[r][k] -= f * m[p][k];
            }
        }
        if (singular) continue;
        double cost = 0.0;
        bool feasible = true;
        for (int v = 0; v < 5; ++v) {
            const double x = m[v][5] / m[v][v];
            if (x < -1e-12) feasible = false;
            cost += x * c[static_cast<std::size_t>(cells[v] / 3)][static_cast<std::size_t>(cells[v] % 3)];
        }
        if (feasible) best = std::min(best, cost);
    }
    return best;
}

}  // namespace penwise::testing
