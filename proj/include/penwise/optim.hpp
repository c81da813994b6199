#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "penwise/error.hpp"
#include "penwise/tensor.hpp"

namespace penwise {

struct AdamConfig {
    double learning_rate = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    /// Global gradient-norm clip; 0 disables.
    double clip_norm = 1.0;
};

/// Adam with bias correction. Moment buffers mirror the parameter shapes.
class Adam {
  public:
    Adam(ParamList params, AdamConfig cfg) : m_params(std::move(params)), m_cfg(cfg)
    {
        if (!(cfg.learning_rate > 0.0)) {
            throw InvalidArgument("adam: learning_rate must be positive");
        }
        for (const auto& [name, t] : m_params) {
            m_first.emplace_back(t.size(), 0.0);
            m_second.emplace_back(t.size(), 0.0);
        }
    }

    void zero_grad()
    {
        for (auto& [name, t] : m_params) {
            t.zero_grad();
        }
    }

    void step()
    {
        ++m_steps;
        double clip = 1.0;
        if (m_cfg.clip_norm > 0.0) {
            double ss = 0.0;
            for (const auto& [name, t] : m_params) {
                if (t.has_grad()) {
                    for (double g : t.grad()) {
                        ss += g * g;
                    }
                }
            }
            const double norm = std::sqrt(ss);
            if (norm > m_cfg.clip_norm) {
                clip = m_cfg.clip_norm / norm;
            }
        }
        const double bc1 = 1.0 - std::pow(m_cfg.beta1, static_cast<double>(m_steps));
        const double bc2 = 1.0 - std::pow(m_cfg.beta2, static_cast<double>(m_steps));
        for (std::size_t p = 0; p < m_params.size(); ++p) {
            Tensor& t = m_params[p].second;
            if (!t.has_grad()) {
                continue;
            }
            auto values = t.mutable_data();
            auto grads = t.grad();
            auto& m = m_first[p];
            auto& v = m_second[p];
            for (std::size_t i = 0; i < values.size(); ++i) {
                const double g = grads[i] * clip;
                m[i] = m_cfg.beta1 * m[i] + (1.0 - m_cfg.beta1) * g;
                v[i] = m_cfg.beta2 * v[i] + (1.0 - m_cfg.beta2) * g * g;
                values[i] -= m_cfg.learning_rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + m_cfg.eps);
            }
        }
    }

    std::size_t step_count() const { return m_steps; }
    const AdamConfig& config() const { return m_cfg; }

  private:
    ParamList m_params;
    AdamConfig m_cfg;
    std::vector<std::vector<double>> m_first;
    std::vector<std::vector<double>> m_second;
    std::size_t m_steps = 0;
};

}  // namespace penwise
