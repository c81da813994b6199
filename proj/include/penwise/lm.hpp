#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "penwise/encoder.hpp"
#include "penwise/error.hpp"
#include "penwise/optim.hpp"
#include "penwise/rng.hpp"
#include "penwise/tensor.hpp"
#include "penwise/vocab.hpp"

namespace penwise {

/// Final-layer token representations, shape [T, d].
using HiddenStates = Tensor;

/// Causal self-attention language model with an untied output projection.
class LmModel {
  public:
    LmModel() = default;

    LmModel(Vocab vocab, EncoderConfig cfg, std::uint64_t seed) : m_vocab(std::move(vocab))
    {
        Rng rng(seed);
        m_encoder = Encoder(m_vocab.size(), cfg, rng);
        m_out = Tensor::randn({cfg.d_model, m_vocab.size()}, rng, 1.0 / std::sqrt(static_cast<double>(cfg.d_model)));
    }

    const Vocab& vocab() const { return m_vocab; }
    const Encoder& encoder() const { return m_encoder; }
    Encoder& encoder() { return m_encoder; }
    const EncoderConfig& config() const { return m_encoder.config(); }
    std::size_t max_len() const { return m_encoder.config().max_len; }

    const Tensor& output_projection() const { return m_out; }
    Tensor& output_projection() { return m_out; }

    /// Graph-recording representations (for losses).
    Tensor hidden(const TokenSeq& tokens) const { return m_encoder.forward(tokens, true); }

    /// Representations without recording a graph.
    HiddenStates encode(const TokenSeq& tokens) const
    {
        NoGradGuard guard;
        return m_encoder.forward(tokens, true);
    }

    Tensor logits(const Tensor& hidden_rows) const { return matmul(hidden_rows, m_out); }

    /// p(v | prefix) over the whole vocabulary.
    std::vector<double> next_dist(const TokenSeq& prefix) const
    {
        NoGradGuard guard;
        Tensor h = m_encoder.forward(prefix, true);
        return distribution_from_row(slice_rows(h, h.rows() - 1, 1));
    }

    /// Softmax over the logits of a single [1, d] representation row.
    std::vector<double> distribution_from_row(const Tensor& row) const
    {
        NoGradGuard guard;
        Tensor p = softmax_rows(logits(row));
        return {p.data().begin(), p.data().end()};
    }

    ParamList parameters() const
    {
        ParamList out = m_encoder.parameters();
        out.emplace_back("out_proj", m_out);
        return out;
    }

    std::vector<Tensor*> parameter_slots()
    {
        auto out = m_encoder.parameter_slots();
        out.push_back(&m_out);
        return out;
    }

  private:
    Vocab m_vocab;
    Encoder m_encoder;
    Tensor m_out;
};

namespace detail {

inline void check_trainable(const TokenSeq& seq, const char* op)
{
    if (seq.size() < 2) {
        throw InvalidArgument(std::string(op) + ": sequences need at least 2 tokens");
    }
}

/// Negative mean log-probability of tokens 2..T given their prefixes.
inline Tensor sequence_nll(const LmModel& model, const Tensor& hidden, const TokenSeq& seq)
{
    const std::size_t t = seq.size();
    Tensor lp = log_softmax_rows(model.logits(slice_rows(hidden, 0, t - 1)));
    std::vector<std::size_t> targets(seq.begin() + 1, seq.end());
    return scale(sum(pick_per_row(lp, targets)), -1.0 / static_cast<double>(t - 1));
}

inline Tensor sequence_cl(const Tensor& hidden, double rho)
{
    Tensor unit = normalize_rows(hidden);
    return pairwise_hinge_mean(matmul_nt(unit, unit), rho);
}

inline void check_rho(double rho)
{
    if (!(rho >= -1.0 && rho <= 1.0)) {
        throw InvalidArgument("rho must lie in [-1, 1], got " + std::to_string(rho));
    }
}

}  // namespace detail

/// MLE objective: per sequence the mean negative log-likelihood of every
/// predicted token (positions 2..T), averaged over the batch.
inline Tensor loss_mle(const LmModel& model, const std::vector<TokenSeq>& batch)
{
    if (batch.empty()) {
        throw InvalidArgument("loss_mle: empty batch");
    }
    std::vector<Tensor> terms;
    for (const auto& seq : batch) {
        detail::check_trainable(seq, "loss_mle");
        terms.push_back(detail::sequence_nll(model, model.hidden(seq), seq));
    }
    return scale(add_all(terms), 1.0 / static_cast<double>(batch.size()));
}

/// Contrastive token-representation objective for one sequence.
inline Tensor loss_cl(const LmModel& model, const TokenSeq& seq, double rho)
{
    detail::check_trainable(seq, "loss_cl");
    detail::check_rho(rho);
    return detail::sequence_cl(model.hidden(seq), rho);
}

struct SimCtgTerms {
    Tensor mle;
    Tensor cl;
    Tensor total;
};

/// MLE + contrastive terms from one forward pass per sequence; the
/// contrastive term is averaged over the batch like the MLE term.
inline SimCtgTerms simctg_terms(const LmModel& model, const std::vector<TokenSeq>& batch, double rho)
{
    if (batch.empty()) {
        throw InvalidArgument("loss_simctg: empty batch");
    }
    detail::check_rho(rho);
    std::vector<Tensor> mle_terms;
    std::vector<Tensor> cl_terms;
    for (const auto& seq : batch) {
        detail::check_trainable(seq, "loss_simctg");
        Tensor h = model.hidden(seq);
        mle_terms.push_back(detail::sequence_nll(model, h, seq));
        cl_terms.push_back(detail::sequence_cl(h, rho));
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    SimCtgTerms out;
    out.mle = scale(add_all(mle_terms), inv);
    out.cl = scale(add_all(cl_terms), inv);
    out.total = add(out.mle, out.cl);
    return out;
}

inline Tensor loss_simctg(const LmModel& model, const std::vector<TokenSeq>& batch, double rho)
{
    return simctg_terms(model, batch, rho).total;
}

enum class Objective : std::uint8_t { mle, simctg };

struct TrainConfig {
    double rho = 0.5;
    Objective objective = Objective::mle;
    std::size_t epochs = 10;
    std::size_t batch_size = 8;
    std::uint64_t seed = 0;
    double learning_rate = 3e-3;
    double clip_norm = 1.0;

    void validate() const
    {
        detail::check_rho(rho);
        if (epochs == 0 || batch_size == 0) {
            throw InvalidArgument("train: epochs and batch_size must be positive");
        }
        if (!(learning_rate > 0.0)) {
            throw InvalidArgument("train: learning_rate must be positive");
        }
    }
};

struct TrainReport {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::vector<double> epoch_losses;
    std::size_t steps = 0;
};

/// Objective value over a whole corpus, without recording gradients.
inline double corpus_loss(const LmModel& model, const std::vector<TokenSeq>& corpus, const TrainConfig& cfg)
{
    NoGradGuard guard;
    double total = 0.0;
    for (const auto& seq : corpus) {
        const std::vector<TokenSeq> one{seq};
        total += cfg.objective == Objective::simctg ? loss_simctg(model, one, cfg.rho).item()
                                                    : loss_mle(model, one).item();
    }
    return total / static_cast<double>(corpus.size());
}

/// Trains from scratch with Adam. The result depends only on
/// (corpus, vocab, encoder config, cfg).
inline LmModel train_lm(const std::vector<TokenSeq>& corpus, const Vocab& vocab, const EncoderConfig& enc,
                        const TrainConfig& cfg, TrainReport* report = nullptr)
{
    cfg.validate();
    if (corpus.empty()) {
        throw InvalidArgument("train: empty corpus");
    }
    for (const auto& seq : corpus) {
        detail::check_trainable(seq, "train");
        if (seq.size() > enc.max_len) {
            throw LengthError("train: sequence of length " + std::to_string(seq.size()) + " exceeds max_len "
                              + std::to_string(enc.max_len));
        }
    }
    const Rng root(cfg.seed);
    LmModel model(vocab, enc, root.split(0).next_u64());
    Adam opt(model.parameters(), AdamConfig{cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.clip_norm});
    Rng order_rng = root.split(1);

    TrainReport rep;
    if (report) {
        rep.initial_loss = corpus_loss(model, corpus, cfg);
    }
    std::vector<std::size_t> order(corpus.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        order_rng.shuffle(order);
        double epoch_total = 0.0;
        std::size_t batches = 0;
        for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
            std::vector<TokenSeq> batch;
            for (std::size_t i = b; i < std::min(order.size(), b + cfg.batch_size); ++i) {
                batch.push_back(corpus[order[i]]);
            }
            opt.zero_grad();
            Tensor loss = cfg.objective == Objective::simctg ? loss_simctg(model, batch, cfg.rho)
                                                             : loss_mle(model, batch);
            loss.backward();
            opt.step();
            epoch_total += loss.item();
            ++batches;
        }
        rep.epoch_losses.push_back(epoch_total / static_cast<double>(batches));
    }
    rep.steps = opt.step_count();
    if (report) {
        rep.final_loss = corpus_loss(model, corpus, cfg);
        *report = rep;
    }
    return model;
}

enum class Frame : std::uint8_t {
    /// T [SEP] S [CLS]
    pair_sep_cls,
    /// T [SEP]
    prefix_sep,
};

/// Concatenates parts with the separator and end specials of the frame.
inline TokenSeq conditional_format(const std::vector<TokenSeq>& parts, Frame frame, std::size_t max_len)
{
    const TokenId sep = Vocab::special(Special::sep);
    const TokenId cls = Vocab::special(Special::cls);
    const std::size_t want = frame == Frame::pair_sep_cls ? 2 : 1;
    if (parts.size() != want) {
        throw InvalidArgument("conditional_format: frame expects " + std::to_string(want) + " parts");
    }
    for (const auto& part : parts) {
        for (auto id : part) {
            if (id == sep || id == cls) {
                throw InvalidArgument("conditional_format: parts may not contain [SEP] or [CLS]");
            }
        }
    }
    TokenSeq out = parts[0];
    out.push_back(sep);
    if (frame == Frame::pair_sep_cls) {
        out.insert(out.end(), parts[1].begin(), parts[1].end());
        out.push_back(cls);
    }
    if (out.size() > max_len) {
        throw LengthError("conditional_format: framed length " + std::to_string(out.size()) + " exceeds "
                          + std::to_string(max_len));
    }
    return out;
}

/// Inverse of conditional_format.
inline std::vector<TokenSeq> conditional_unformat(const TokenSeq& seq, Frame frame)
{
    const TokenId sep = Vocab::special(Special::sep);
    const TokenId cls = Vocab::special(Special::cls);
    auto it = std::find(seq.begin(), seq.end(), sep);
    if (it == seq.end()) {
        throw InvalidArgument("conditional_unformat: no [SEP]");
    }
    TokenSeq first(seq.begin(), it);
    if (frame == Frame::prefix_sep) {
        if (it + 1 != seq.end()) {
            throw InvalidArgument("conditional_unformat: tokens after [SEP] in prefix frame");
        }
        return {first};
    }
    if (seq.back() != cls || seq.size() < first.size() + 2) {
        throw InvalidArgument("conditional_unformat: missing trailing [CLS]");
    }
    TokenSeq second(it + 1, seq.end() - 1);
    return {first, second};
}

}  // namespace penwise
