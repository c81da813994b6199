#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "penwise/crf.hpp"
#include "penwise/encoder.hpp"
#include "penwise/error.hpp"
#include "penwise/optim.hpp"
#include "penwise/rng.hpp"
#include "penwise/tensor.hpp"
#include "penwise/vocab.hpp"

namespace penwise {

enum class CrfObjective : std::uint8_t { dp, crf, both };

inline std::string to_string(CrfObjective o)
{
    switch (o) {
    case CrfObjective::dp: return "dp";
    case CrfObjective::crf: return "crf";
    case CrfObjective::both: return "both";
    }
    return "?";
}

inline std::optional<CrfObjective> crf_objective_from_string(std::string_view s)
{
    for (auto o : {CrfObjective::dp, CrfObjective::crf, CrfObjective::both}) {
        if (to_string(o) == s) {
            return o;
        }
    }
    return std::nullopt;
}

struct CrfConfig {
    /// Focal exponent; 0 recovers plain NLL.
    double gamma = 2.0;
    std::size_t viterbi_k = 8;
    CrfObjective losses = CrfObjective::both;
    bool focal = false;
    /// Inner dimension of the low-rank transition factors.
    std::size_t rank = 8;
    std::size_t epochs = 10;
    std::size_t batch_size = 16;
    double learning_rate = 3e-3;
    std::uint64_t seed = 0;

    void validate(std::size_t vocab_size) const
    {
        if (!(gamma >= 0.0)) {
            throw InvalidArgument("crf: gamma must be nonnegative");
        }
        if (viterbi_k == 0 || viterbi_k > vocab_size) {
            throw InvalidArgument("crf: viterbi_k must lie in [1, |V|=" + std::to_string(vocab_size) + "]");
        }
        if (rank == 0 || rank > vocab_size) {
            throw InvalidArgument("crf: rank must lie in [1, |V|]");
        }
        if (epochs == 0 || batch_size == 0 || !(learning_rate > 0.0)) {
            throw InvalidArgument("crf: epochs, batch_size and learning_rate must be positive");
        }
    }
};

/// Bidirectional encoder, per-position emission head and low-rank
/// transitions M = E1 E2^T.
class CrfModel {
  public:
    CrfModel() = default;

    CrfModel(Vocab vocab, EncoderConfig enc, std::size_t rank, std::uint64_t seed) : m_vocab(std::move(vocab))
    {
        if (rank == 0 || rank > m_vocab.size()) {
            throw InvalidArgument("crf: rank must lie in [1, |V|]");
        }
        Rng rng(seed);
        m_encoder = Encoder(m_vocab.size(), enc, rng);
        const std::size_t v = m_vocab.size();
        m_emit_w = Tensor::randn({enc.d_model, v}, rng, 1.0 / std::sqrt(static_cast<double>(enc.d_model)));
        m_emit_b = Tensor::filled({v}, 0.0);
        m_e1 = Tensor::randn({v, rank}, rng, 0.1);
        m_e2 = Tensor::randn({v, rank}, rng, 0.1);
    }

    const Vocab& vocab() const { return m_vocab; }
    const Encoder& encoder() const { return m_encoder; }
    std::size_t rank() const { return m_e1.cols(); }
    Tensor& e1() { return m_e1; }
    Tensor& e2() { return m_e2; }

    /// Per-position label scores [T, V].
    Tensor emissions(const TokenSeq& x) const
    {
        return add_row(matmul(m_encoder.forward(x, false), m_emit_w), m_emit_b);
    }

    /// Transition scores [V, V].
    Tensor transitions() const { return matmul_nt(m_e1, m_e2); }

    ParamList parameters() const
    {
        ParamList out = m_encoder.parameters();
        out.emplace_back("emit_w", m_emit_w);
        out.emplace_back("emit_b", m_emit_b);
        out.emplace_back("e1", m_e1);
        out.emplace_back("e2", m_e2);
        return out;
    }

    std::vector<Tensor*> parameter_slots()
    {
        auto out = m_encoder.parameter_slots();
        for (Tensor* t : {&m_emit_w, &m_emit_b, &m_e1, &m_e2}) {
            out.push_back(t);
        }
        return out;
    }

  private:
    Vocab m_vocab;
    Encoder m_encoder;
    Tensor m_emit_w;
    Tensor m_emit_b;
    Tensor m_e1;
    Tensor m_e2;
};

namespace detail {

inline void check_same_length(const TokenSeq& x, const TokenSeq& y)
{
    if (x.size() != y.size()) {
        throw InvalidArgument("crf: input length " + std::to_string(x.size()) + " != target length "
                              + std::to_string(y.size()));
    }
}

}  // namespace detail

/// log P(Y | X). `exact` normalizes over every path, otherwise over the
/// top-k lattice that also contains Y.
inline Tensor crf_log_likelihood(const CrfModel& m, const TokenSeq& x, const TokenSeq& y, bool exact, std::size_t k)
{
    detail::check_same_length(x, y);
    Tensor s = m.emissions(x);
    Tensor tr = m.transitions();
    Lattice lat;
    {
        NoGradGuard guard;
        lat = exact ? full_lattice(x.size(), m.vocab().size()) : truncated_lattice(s, tr, k, y);
    }
    return crf_log_prob(s, tr, y, lat);
}

inline CrfLossTerms crf_losses(const CrfModel& m, const TokenSeq& x, const TokenSeq& y, const CrfConfig& cfg)
{
    detail::check_same_length(x, y);
    return crf_loss_terms(m.emissions(x), m.transitions(), y, cfg.gamma, cfg.viterbi_k);
}

/// The term the configuration trains on.
inline Tensor crf_objective(const CrfLossTerms& t, const CrfConfig& cfg)
{
    switch (cfg.losses) {
    case CrfObjective::dp: return cfg.focal ? t.dp_focal : t.dp;
    case CrfObjective::crf: return cfg.focal ? t.crf_focal : t.crf;
    case CrfObjective::both: return cfg.focal ? t.total_focal : t.total;
    }
    throw InvalidArgument("crf: unknown objective");
}

inline TokenSeq viterbi_decode(const CrfModel& m, const TokenSeq& x, std::size_t k)
{
    NoGradGuard guard;
    m.encoder().check_input(x);
    Tensor s = m.emissions(x);
    Tensor tr = m.transitions();
    return viterbi(s, tr, truncated_lattice(s, tr, k)).labels;
}

struct CrfTrainReport {
    std::vector<double> epoch_losses;
};

/// Trains on same-length (source, target) pairs.
inline CrfModel train_crf(const std::vector<std::pair<TokenSeq, TokenSeq>>& pairs, const Vocab& vocab,
                          const EncoderConfig& enc, const CrfConfig& cfg, CrfTrainReport* report = nullptr)
{
    cfg.validate(vocab.size());
    if (pairs.empty()) {
        throw InvalidArgument("crf: empty training set");
    }
    for (const auto& [x, y] : pairs) {
        detail::check_same_length(x, y);
        if (x.empty() || x.size() > enc.max_len) {
            throw LengthError("crf: training sentence length " + std::to_string(x.size()) + " outside [1, "
                              + std::to_string(enc.max_len) + "]");
        }
    }
    const Rng root(cfg.seed);
    CrfModel model(vocab, enc, cfg.rank, root.split(0).next_u64());
    Adam opt(model.parameters(), AdamConfig{cfg.learning_rate, 0.9, 0.999, 1e-8, 1.0});
    Rng order_rng = root.split(1);
    std::vector<std::size_t> order(pairs.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    CrfTrainReport rep;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        order_rng.shuffle(order);
        double total = 0.0;
        for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), b + cfg.batch_size);
            opt.zero_grad();
            const Tensor transitions = model.transitions();
            std::vector<Tensor> terms;
            for (std::size_t i = b; i < end; ++i) {
                const auto& [x, y] = pairs[order[i]];
                terms.push_back(crf_objective(crf_loss_terms(model.emissions(x), transitions, y, cfg.gamma,
                                                             cfg.viterbi_k),
                                              cfg));
            }
            Tensor loss = scale(add_all(terms), 1.0 / static_cast<double>(terms.size()));
            loss.backward();
            opt.step();
            total += loss.item() * static_cast<double>(terms.size());
        }
        rep.epoch_losses.push_back(total / static_cast<double>(pairs.size()));
    }
    if (report) {
        *report = rep;
    }
    return model;
}

enum class EditKind : std::uint8_t { substitute, insert, remove };

inline std::string to_string(EditKind k)
{
    switch (k) {
    case EditKind::substitute: return "substitute";
    case EditKind::insert: return "insert";
    case EditKind::remove: return "delete";
    }
    return "?";
}

/// Positions index the original sentence. An insert at position g goes
/// before original token g (g may equal the sentence length).
struct Edit {
    EditKind kind = EditKind::substitute;
    std::size_t position = 0;
    std::optional<TokenId> old_token;
    std::optional<TokenId> new_token;
    double score = 0.0;

    bool operator==(const Edit&) const = default;
};

inline void validate_edit(const Edit& e, std::size_t length)
{
    const bool ok = (e.kind == EditKind::substitute && e.old_token && e.new_token && e.position < length)
                    || (e.kind == EditKind::insert && !e.old_token && e.new_token && e.position <= length)
                    || (e.kind == EditKind::remove && e.old_token && !e.new_token && e.position < length);
    if (!ok) {
        throw InvalidArgument("edit: malformed " + to_string(e.kind) + " at position " + std::to_string(e.position));
    }
}

/// Applies edits addressed against `sentence`. Inserts at one gap keep
/// their listed order.
inline TokenSeq apply_edits(const TokenSeq& sentence, const std::vector<Edit>& edits)
{
    std::vector<std::vector<TokenId>> before(sentence.size() + 1);
    std::vector<std::optional<TokenId>> replace(sentence.size());
    std::vector<bool> removed(sentence.size(), false);
    for (const auto& e : edits) {
        validate_edit(e, sentence.size());
        if (e.kind != EditKind::insert && *e.old_token != sentence[e.position]) {
            throw InvalidArgument("edit: old token mismatch at position " + std::to_string(e.position));
        }
        switch (e.kind) {
        case EditKind::insert: before[e.position].push_back(*e.new_token); break;
        case EditKind::remove: removed[e.position] = true; break;
        case EditKind::substitute: replace[e.position] = e.new_token; break;
        }
    }
    TokenSeq out;
    for (std::size_t i = 0; i <= sentence.size(); ++i) {
        out.insert(out.end(), before[i].begin(), before[i].end());
        if (i < sentence.size() && !removed[i]) {
            out.push_back(replace[i].value_or(sentence[i]));
        }
    }
    return out;
}

struct Correction {
    TokenSeq corrected;
    std::vector<Edit> edits;
};

/// Same-length correction by truncated Viterbi. Each edit's score is the
/// per-position probability of its new token.
inline Correction correct_substitutions(const CrfModel& m, const TokenSeq& sentence, std::size_t k)
{
    NoGradGuard guard;
    Correction out;
    out.corrected = viterbi_decode(m, sentence, k);
    Tensor probs = softmax_rows(m.emissions(sentence));
    for (std::size_t i = 0; i < sentence.size(); ++i) {
        if (out.corrected[i] != sentence[i]) {
            out.edits.push_back(
                Edit{EditKind::substitute, i, sentence[i], out.corrected[i], probs.at(i, out.corrected[i])});
        }
    }
    return out;
}

/// Bidirectional masked-token predictor.
class MaskedLm {
  public:
    MaskedLm() = default;

    MaskedLm(Vocab vocab, EncoderConfig enc, std::uint64_t seed) : m_vocab(std::move(vocab))
    {
        Rng rng(seed);
        m_encoder = Encoder(m_vocab.size(), enc, rng);
        m_out = Tensor::randn({enc.d_model, m_vocab.size()}, rng, 1.0 / std::sqrt(static_cast<double>(enc.d_model)));
        m_out_b = Tensor::filled({m_vocab.size()}, 0.0);
    }

    const Vocab& vocab() const { return m_vocab; }
    const Encoder& encoder() const { return m_encoder; }

    /// Graph-recording logits [T, V].
    Tensor logits(const TokenSeq& x) const { return add_row(matmul(m_encoder.forward(x, false), m_out), m_out_b); }

    /// Distribution at `position` of `x`.
    std::vector<double> predict(const TokenSeq& x, std::size_t position) const
    {
        if (position >= x.size()) {
            throw InvalidArgument("masked lm: position " + std::to_string(position) + " out of range");
        }
        NoGradGuard guard;
        m_encoder.check_input(x);
        Tensor p = softmax_rows(slice_rows(logits(x), position, 1));
        return {p.data().begin(), p.data().end()};
    }

    ParamList parameters() const
    {
        ParamList out = m_encoder.parameters();
        out.emplace_back("mlm_out", m_out);
        out.emplace_back("mlm_out_b", m_out_b);
        return out;
    }

    std::vector<Tensor*> parameter_slots()
    {
        auto out = m_encoder.parameter_slots();
        out.push_back(&m_out);
        out.push_back(&m_out_b);
        return out;
    }

  private:
    Vocab m_vocab;
    Encoder m_encoder;
    Tensor m_out;
    Tensor m_out_b;
};

struct MaskedInstance {
    TokenSeq input;
    std::size_t position = 0;
    TokenId target = 0;

    bool operator==(const MaskedInstance&) const = default;
};

/// [MASK] inserted before token `gap`; the target is [null].
inline MaskedInstance gap_instance(const TokenSeq& sentence, std::size_t gap)
{
    if (gap > sentence.size()) {
        throw InvalidArgument("gap_instance: gap " + std::to_string(gap) + " out of range");
    }
    MaskedInstance out;
    out.input = sentence;
    out.input.insert(out.input.begin() + static_cast<std::ptrdiff_t>(gap), Vocab::special(Special::mask));
    out.position = gap;
    out.target = Vocab::special(Special::null);
    return out;
}

/// Token `pos` replaced by [MASK]; the target is the token itself.
inline MaskedInstance word_instance(const TokenSeq& sentence, std::size_t pos)
{
    if (pos >= sentence.size()) {
        throw InvalidArgument("word_instance: position " + std::to_string(pos) + " out of range");
    }
    MaskedInstance out;
    out.input = sentence;
    out.target = sentence[pos];
    out.input[pos] = Vocab::special(Special::mask);
    out.position = pos;
    return out;
}

struct NullTaskConfig {
    double insert_rate = 0.5;
    double mask_rate = 0.5;
    std::size_t epochs = 10;
    std::size_t batch_size = 16;
    double learning_rate = 3e-3;
    std::uint64_t seed = 0;
    double tau_ins = 0.5;
    double tau_del = 0.5;

    void validate() const
    {
        if (!(insert_rate > 0.0 && insert_rate < 1.0) || !(mask_rate > 0.0 && mask_rate < 1.0)) {
            throw InvalidArgument("null tasks: insert_rate and mask_rate must lie in (0, 1)");
        }
        if (epochs == 0 || batch_size == 0 || !(learning_rate > 0.0)) {
            throw InvalidArgument("null tasks: epochs, batch_size and learning_rate must be positive");
        }
        if (!(tau_ins >= 0.0 && tau_ins <= 1.0) || !(tau_del >= 0.0 && tau_del <= 1.0)) {
            throw InvalidArgument("null tasks: thresholds must lie in [0, 1]");
        }
    }
};

/// One pass of task construction: per sentence, a gap instance with
/// probability insert_rate and a masked-word instance with probability
/// mask_rate, each at a uniformly drawn location.
inline std::vector<MaskedInstance> draw_null_instances(const std::vector<TokenSeq>& corpus, double insert_rate,
                                                       double mask_rate, Rng& rng)
{
    std::vector<MaskedInstance> out;
    for (const auto& s : corpus) {
        if (s.empty()) {
            continue;
        }
        if (rng.bernoulli(insert_rate)) {
            out.push_back(gap_instance(s, rng.below(s.size() + 1)));
        }
        if (rng.bernoulli(mask_rate)) {
            out.push_back(word_instance(s, rng.below(s.size())));
        }
    }
    return out;
}

struct NullDetectorModel {
    MaskedLm mlm;
    double insert_rate = 0.5;
    double mask_rate = 0.5;
};

inline Tensor masked_nll(const MaskedLm& m, const std::vector<MaskedInstance>& batch)
{
    std::vector<Tensor> terms;
    for (const auto& inst : batch) {
        Tensor lp = log_softmax_rows(slice_rows(m.logits(inst.input), inst.position, 1));
        terms.push_back(pick(lp, {inst.target}));
    }
    return scale(add_all(terms), -1.0 / static_cast<double>(batch.size()));
}

namespace detail {

inline MaskedLm train_masked(const std::vector<TokenSeq>& corpus, const Vocab& vocab, const EncoderConfig& enc,
                             const NullTaskConfig& cfg, double insert_rate, double mask_rate)
{
    if (corpus.empty()) {
        throw InvalidArgument("masked lm: empty corpus");
    }
    for (const auto& s : corpus) {
        if (s.empty() || s.size() + 1 > enc.max_len) {
            throw LengthError("masked lm: sentence length " + std::to_string(s.size())
                              + " needs room for one inserted [MASK] within max_len");
        }
    }
    const Rng root(cfg.seed);
    MaskedLm model(vocab, enc, root.split(0).next_u64());
    Adam opt(model.parameters(), AdamConfig{cfg.learning_rate, 0.9, 0.999, 1e-8, 1.0});
    Rng draw_rng = root.split(1);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto inst = draw_null_instances(corpus, insert_rate, mask_rate, draw_rng);
        draw_rng.shuffle(inst);
        for (std::size_t b = 0; b < inst.size(); b += cfg.batch_size) {
            const auto first = inst.begin() + static_cast<std::ptrdiff_t>(b);
            const auto last = inst.begin() + static_cast<std::ptrdiff_t>(std::min(inst.size(), b + cfg.batch_size));
            opt.zero_grad();
            Tensor loss = masked_nll(model, std::vector<MaskedInstance>(first, last));
            loss.backward();
            opt.step();
        }
    }
    return model;
}

}  // namespace detail

/// Trains the detector on freshly drawn instances every epoch.
inline NullDetectorModel train_null_tasks(const std::vector<TokenSeq>& corpus, const Vocab& vocab,
                                          const EncoderConfig& enc, const NullTaskConfig& cfg)
{
    cfg.validate();
    return {detail::train_masked(corpus, vocab, enc, cfg, cfg.insert_rate, cfg.mask_rate), cfg.insert_rate,
            cfg.mask_rate};
}

/// Plain masked-word model (no [null] task); mask_rate comes from `cfg`.
inline MaskedLm train_masked_lm(const std::vector<TokenSeq>& corpus, const Vocab& vocab, const EncoderConfig& enc,
                                const NullTaskConfig& cfg)
{
    cfg.validate();
    return detail::train_masked(corpus, vocab, enc, cfg, 0.0, cfg.mask_rate);
}

struct NullThresholds {
    double tau_ins = 0.5;
    double tau_del = 0.5;
};

/// Insert/delete proposals by probing every gap and every word. Proposals
/// that would produce the same sentence as a higher-scored one are dropped.
inline std::vector<Edit> null_detect(const NullDetectorModel& m, const TokenSeq& sentence,
                                     NullThresholds th = NullThresholds{})
{
    if (sentence.empty()) {
        throw InvalidArgument("null_detect: empty sentence");
    }
    const TokenId null_id = Vocab::special(Special::null);
    const Vocab& vocab = m.mlm.vocab();
    std::vector<Edit> proposals;
    for (std::size_t g = 0; g <= sentence.size(); ++g) {
        const auto inst = gap_instance(sentence, g);
        const auto p = m.mlm.predict(inst.input, inst.position);
        if (std::max_element(p.begin(), p.end()) - p.begin() == null_id) {
            continue;
        }
        TokenId best = 0;
        double best_p = -1.0;
        for (std::size_t v = 0; v < p.size(); ++v) {
            if (!vocab.is_special(static_cast<TokenId>(v)) && p[v] > best_p) {
                best_p = p[v];
                best = static_cast<TokenId>(v);
            }
        }
        if (best_p > th.tau_ins) {
            proposals.push_back(Edit{EditKind::insert, g, std::nullopt, best, best_p});
        }
    }
    for (std::size_t i = 0; i < sentence.size(); ++i) {
        const auto inst = word_instance(sentence, i);
        const auto p = m.mlm.predict(inst.input, inst.position);
        if (std::max_element(p.begin(), p.end()) - p.begin() == null_id && p[null_id] > th.tau_del) {
            proposals.push_back(Edit{EditKind::remove, i, sentence[i], std::nullopt, p[null_id]});
        }
    }
    std::stable_sort(proposals.begin(), proposals.end(), [](const Edit& a, const Edit& b) { return a.score > b.score; });
    std::vector<Edit> kept;
    std::vector<TokenSeq> results;
    for (const auto& e : proposals) {
        TokenSeq r = apply_edits(sentence, {e});
        if (std::find(results.begin(), results.end(), r) == results.end()) {
            results.push_back(std::move(r));
            kept.push_back(e);
        }
    }
    std::sort(kept.begin(), kept.end(), [](const Edit& a, const Edit& b) {
        return a.position != b.position ? a.position < b.position : a.kind < b.kind;
    });
    return kept;
}

}  // namespace penwise
