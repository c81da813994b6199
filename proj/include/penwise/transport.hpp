#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "penwise/error.hpp"

namespace penwise {

struct TransportPlan {
    double cost = 0.0;
    /// flow[i][j]: mass moved from supply i to demand j.
    std::vector<std::vector<double>> flow;
};

inline constexpr std::size_t kMaxTransportSupport = 64;

/// Exact balanced optimal transport between histograms `a` and `b` under
/// ground cost `cost[i][j]` >= 0. Solved as min-cost flow by successive
/// shortest augmenting paths; every augmentation saturates a supply, a
/// demand or a residual edge, so the loop is finite and the answer is a
/// vertex of the transport polytope.
inline TransportPlan optimal_transport(const std::vector<double>& a, const std::vector<double>& b,
                                       const std::vector<std::vector<double>>& cost)
{
    const std::size_t n = a.size(), m = b.size();
    if (n == 0 || m == 0) {
        throw InvalidArgument("transport: empty histogram");
    }
    if (n > kMaxTransportSupport || m > kMaxTransportSupport) {
        throw InvalidArgument("transport: support " + std::to_string(n) + "x" + std::to_string(m) + " exceeds "
                              + std::to_string(kMaxTransportSupport) + "x" + std::to_string(kMaxTransportSupport));
    }
    if (cost.size() != n) {
        throw InvalidArgument("transport: cost matrix has wrong row count");
    }
    double sa = 0.0, sb = 0.0;
    for (double x : a) {
        if (!(x >= 0.0)) throw InvalidArgument("transport: negative or NaN supply");
        sa += x;
    }
    for (double x : b) {
        if (!(x >= 0.0)) throw InvalidArgument("transport: negative or NaN demand");
        sb += x;
    }
    if (std::abs(sa - sb) > 1e-9 * std::max(1.0, sa)) {
        throw InvalidArgument("transport: unbalanced histograms");
    }
    for (const auto& row : cost) {
        if (row.size() != m) throw InvalidArgument("transport: cost matrix has wrong column count");
        for (double c : row) {
            if (!(c >= 0.0) || !std::isfinite(c)) throw InvalidArgument("transport: cost must be finite and >= 0");
        }
    }

    // Nodes: 0 source, 1..n supplies, n+1..n+m demands, n+m+1 sink.
    struct Arc {
        std::size_t to;
        double cap;
        double cost;
        std::size_t rev;
    };
    const std::size_t nodes = n + m + 2, src = 0, sink = n + m + 1;
    std::vector<std::vector<Arc>> g(nodes);
    auto add = [&](std::size_t u, std::size_t v, double cap, double c) {
        g[u].push_back({v, cap, c, g[v].size()});
        g[v].push_back({u, 0.0, -c, g[u].size() - 1});
    };
    const double unbounded = 2.0 * std::max(sa, sb) + 1.0;
    for (std::size_t i = 0; i < n; ++i) add(src, 1 + i, a[i], 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) add(1 + i, 1 + n + j, unbounded, cost[i][j]);
    for (std::size_t j = 0; j < m; ++j) add(1 + n + j, sink, b[j], 0.0);

    const double inf = std::numeric_limits<double>::infinity();
    double remaining = std::min(sa, sb);
    const double tiny = 1e-15 * std::max(1.0, sa);
    while (remaining > tiny) {
        // Bellman-Ford; residual graphs of a min-cost flow carry no negative cycles.
        std::vector<double> dist(nodes, inf);
        std::vector<std::size_t> prev_node(nodes, nodes), prev_arc(nodes, 0);
        dist[src] = 0.0;
        for (std::size_t round = 0; round + 1 < nodes; ++round) {
            bool changed = false;
            for (std::size_t u = 0; u < nodes; ++u) {
                if (dist[u] == inf) continue;
                for (std::size_t k = 0; k < g[u].size(); ++k) {
                    const Arc& e = g[u][k];
                    if (e.cap > tiny && dist[u] + e.cost < dist[e.to] - 1e-15) {
                        dist[e.to] = dist[u] + e.cost;
                        prev_node[e.to] = u;
                        prev_arc[e.to] = k;
                        changed = true;
                    }
                }
            }
            if (!changed) break;
        }
        if (dist[sink] == inf) break;
        double push = remaining;
        for (std::size_t v = sink; v != src; v = prev_node[v]) {
            push = std::min(push, g[prev_node[v]][prev_arc[v]].cap);
        }
        for (std::size_t v = sink; v != src; v = prev_node[v]) {
            Arc& e = g[prev_node[v]][prev_arc[v]];
            e.cap -= push;
            g[v][e.rev].cap += push;
        }
        remaining -= push;
    }

    TransportPlan plan;
    plan.flow.assign(n, std::vector<double>(m, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
        for (const Arc& e : g[1 + i]) {
            if (e.to > n && e.to <= n + m) {
                const double moved = g[e.to][e.rev].cap;  // reverse residual = flow
                plan.flow[i][e.to - 1 - n] = moved;
                plan.cost += moved * cost[i][e.to - 1 - n];
            }
        }
    }
    return plan;
}

}  // namespace penwise
