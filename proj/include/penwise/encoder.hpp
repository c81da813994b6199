#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "penwise/error.hpp"
#include "penwise/rng.hpp"
#include "penwise/tensor.hpp"
#include "penwise/vocab.hpp"

namespace penwise {

struct EncoderConfig {
    std::size_t d_model = 64;
    std::size_t layers = 2;
    std::size_t heads = 2;
    std::size_t max_len = 128;
    std::size_t ffn_mult = 4;

    void validate() const
    {
        if (d_model == 0 || layers == 0 || heads == 0 || ffn_mult == 0) {
            throw InvalidArgument("encoder: d_model, layers, heads and ffn_mult must be positive");
        }
        if (d_model % heads != 0) {
            throw InvalidArgument("encoder: d_model must be divisible by heads");
        }
        if (max_len < 2) {
            throw InvalidArgument("encoder: max_len must be at least 2");
        }
    }
};

struct EncoderLayer {
    Tensor wq, wk, wv, wo;
    Tensor ln1_gain, ln1_bias;
    Tensor ff1_w, ff1_b, ff2_w, ff2_b;
    Tensor ln2_gain, ln2_bias;
};

/// Keys and values of every layer for an already-encoded causal prefix.
struct EncoderCache {
    std::vector<Tensor> keys;
    std::vector<Tensor> values;
    std::size_t length = 0;
};

/// Post-norm transformer encoder: token plus position embeddings, then per
/// layer H = LN(SelfAttn(H) + H) followed by H = LN(FFN(H) + H).
class Encoder {
  public:
    Encoder() = default;

    Encoder(std::size_t vocab_size, EncoderConfig cfg, Rng& rng) : m_cfg(cfg), m_vocab_size(vocab_size)
    {
        cfg.validate();
        const std::size_t d = cfg.d_model;
        const std::size_t f = cfg.ffn_mult * d;
        const double wstd = 1.0 / std::sqrt(static_cast<double>(d));
        m_tok = Tensor::randn({vocab_size, d}, rng, 0.1);
        m_pos = Tensor::randn({cfg.max_len, d}, rng, 0.1);
        for (std::size_t l = 0; l < cfg.layers; ++l) {
            EncoderLayer layer;
            layer.wq = Tensor::randn({d, d}, rng, wstd);
            layer.wk = Tensor::randn({d, d}, rng, wstd);
            layer.wv = Tensor::randn({d, d}, rng, wstd);
            layer.wo = Tensor::randn({d, d}, rng, wstd);
            layer.ln1_gain = Tensor::filled({d}, 1.0);
            layer.ln1_bias = Tensor::filled({d}, 0.0);
            layer.ff1_w = Tensor::randn({d, f}, rng, wstd);
            layer.ff1_b = Tensor::filled({f}, 0.0);
            layer.ff2_w = Tensor::randn({f, d}, rng, 1.0 / std::sqrt(static_cast<double>(f)));
            layer.ff2_b = Tensor::filled({d}, 0.0);
            layer.ln2_gain = Tensor::filled({d}, 1.0);
            layer.ln2_bias = Tensor::filled({d}, 0.0);
            m_layers.push_back(std::move(layer));
        }
    }

    const EncoderConfig& config() const { return m_cfg; }
    std::size_t vocab_size() const { return m_vocab_size; }

    void check_input(const TokenSeq& ids, std::size_t start = 0) const
    {
        if (ids.empty()) {
            throw InvalidArgument("encoder: empty input");
        }
        if (start + ids.size() > m_cfg.max_len) {
            throw LengthError("encoder: sequence of length " + std::to_string(start + ids.size())
                              + " exceeds max_len " + std::to_string(m_cfg.max_len));
        }
        for (auto id : ids) {
            if (id >= m_vocab_size) {
                throw InvalidArgument("encoder: token id " + std::to_string(id) + " outside vocabulary of "
                                      + std::to_string(m_vocab_size));
            }
        }
    }

    /// Final-layer representations, one row per input token.
    Tensor forward(const TokenSeq& ids, bool causal) const { return run(ids, causal, nullptr); }

    /// Causal forward that also records keys/values for later extension.
    Tensor prefill(const TokenSeq& ids, EncoderCache& cache) const
    {
        cache = EncoderCache{};
        return run(ids, true, &cache);
    }

    /// Encodes `ids` as a continuation of the cached prefix, updating the
    /// cache. Produces the same rows, bit for bit, as a full causal forward.
    Tensor extend(const TokenSeq& ids, EncoderCache& cache) const { return run(ids, true, &cache); }

    ParamList parameters(const std::string& prefix = "") const
    {
        ParamList out{{prefix + "tok_emb", m_tok}, {prefix + "pos_emb", m_pos}};
        for (std::size_t l = 0; l < m_layers.size(); ++l) {
            const auto& L = m_layers[l];
            const std::string p = prefix + "layer" + std::to_string(l) + ".";
            out.emplace_back(p + "wq", L.wq);
            out.emplace_back(p + "wk", L.wk);
            out.emplace_back(p + "wv", L.wv);
            out.emplace_back(p + "wo", L.wo);
            out.emplace_back(p + "ln1_gain", L.ln1_gain);
            out.emplace_back(p + "ln1_bias", L.ln1_bias);
            out.emplace_back(p + "ff1_w", L.ff1_w);
            out.emplace_back(p + "ff1_b", L.ff1_b);
            out.emplace_back(p + "ff2_w", L.ff2_w);
            out.emplace_back(p + "ff2_b", L.ff2_b);
            out.emplace_back(p + "ln2_gain", L.ln2_gain);
            out.emplace_back(p + "ln2_bias", L.ln2_bias);
        }
        return out;
    }

    /// Mutable access used when loading persisted weights.
    std::vector<Tensor*> parameter_slots()
    {
        std::vector<Tensor*> out{&m_tok, &m_pos};
        for (auto& L : m_layers) {
            for (Tensor* t : {&L.wq, &L.wk, &L.wv, &L.wo, &L.ln1_gain, &L.ln1_bias, &L.ff1_w, &L.ff1_b, &L.ff2_w,
                              &L.ff2_b, &L.ln2_gain, &L.ln2_bias}) {
                out.push_back(t);
            }
        }
        return out;
    }

  private:
    Tensor run(const TokenSeq& ids, bool causal, EncoderCache* cache) const
    {
        const std::size_t start = cache ? cache->length : 0;
        check_input(ids, start);
        const std::size_t t = ids.size();
        const std::size_t heads = m_cfg.heads;
        const std::size_t dh = m_cfg.d_model / heads;
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
        std::vector<std::size_t> rows(ids.begin(), ids.end());
        Tensor h = add(gather_rows(m_tok, rows), slice_rows(m_pos, start, t));
        const std::optional<std::size_t> mask = causal ? std::optional<std::size_t>(start) : std::nullopt;
        if (cache && cache->keys.empty()) {
            cache->keys.resize(m_layers.size());
            cache->values.resize(m_layers.size());
        }
        for (std::size_t l = 0; l < m_layers.size(); ++l) {
            const auto& L = m_layers[l];
            Tensor q = matmul(h, L.wq);
            Tensor k = matmul(h, L.wk);
            Tensor v = matmul(h, L.wv);
            if (cache) {
                if (start > 0) {
                    k = concat_rows({cache->keys[l], k});
                    v = concat_rows({cache->values[l], v});
                }
                cache->keys[l] = k;
                cache->values[l] = v;
            }
            std::vector<Tensor> outs;
            for (std::size_t hd = 0; hd < heads; ++hd) {
                Tensor qh = heads == 1 ? q : slice_cols(q, hd * dh, dh);
                Tensor kh = heads == 1 ? k : slice_cols(k, hd * dh, dh);
                Tensor vh = heads == 1 ? v : slice_cols(v, hd * dh, dh);
                Tensor att = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt), mask);
                outs.push_back(matmul(att, vh));
            }
            Tensor o = heads == 1 ? outs.front() : concat_cols(outs);
            Tensor h1 = layer_norm_rows(add(matmul(o, L.wo), h), L.ln1_gain, L.ln1_bias);
            Tensor ff = add_row(matmul(gelu(add_row(matmul(h1, L.ff1_w), L.ff1_b)), L.ff2_w), L.ff2_b);
            h = layer_norm_rows(add(ff, h1), L.ln2_gain, L.ln2_bias);
        }
        if (cache) {
            cache->length = start + t;
        }
        return h;
    }

    EncoderConfig m_cfg;
    std::size_t m_vocab_size = 0;
    Tensor m_tok;
    Tensor m_pos;
    std::vector<EncoderLayer> m_layers;
};

}  // namespace penwise
