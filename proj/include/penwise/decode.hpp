#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "penwise/encoder.hpp"
#include "penwise/error.hpp"
#include "penwise/lm.hpp"
#include "penwise/metrics.hpp"
#include "penwise/rng.hpp"
#include "penwise/tensor.hpp"

namespace penwise {

enum class Strategy : std::uint8_t { greedy, beam, nucleus, contrastive };

inline std::string to_string(Strategy s)
{
    switch (s) {
    case Strategy::greedy: return "greedy";
    case Strategy::beam: return "beam";
    case Strategy::nucleus: return "nucleus";
    case Strategy::contrastive: return "contrastive";
    }
    return "?";
}

inline std::optional<Strategy> strategy_from_string(std::string_view s)
{
    for (auto v : {Strategy::greedy, Strategy::beam, Strategy::nucleus, Strategy::contrastive}) {
        if (to_string(v) == s) {
            return v;
        }
    }
    return std::nullopt;
}

struct DecoderConfig {
    Strategy strategy = Strategy::contrastive;
    /// Candidate-set size for contrastive search.
    std::size_t k = 5;
    /// Weight of the degeneration penalty against model confidence.
    double alpha = 0.6;
    std::size_t beam_width = 4;
    double nucleus_p = 0.9;
    std::size_t max_new_tokens = 32;
    std::uint64_t seed = 0;
    /// Reuse the encoded prefix instead of re-encoding context + candidate.
    bool cached_prefix = true;

    void validate(std::size_t vocab_size) const
    {
        if (!(alpha >= 0.0 && alpha <= 1.0)) {
            throw InvalidArgument("decoder: alpha must lie in [0, 1]");
        }
        if (k < 1 || k > vocab_size) {
            throw InvalidArgument("decoder: k must lie in [1, |V|]");
        }
        if (beam_width < 1) {
            throw InvalidArgument("decoder: beam_width must be positive");
        }
        if (!(nucleus_p > 0.0 && nucleus_p <= 1.0)) {
            throw InvalidArgument("decoder: nucleus_p must lie in (0, 1]");
        }
        if (max_new_tokens == 0) {
            throw InvalidArgument("decoder: max_new_tokens must be positive");
        }
    }
};

struct CandidateScore {
    TokenId token = 0;
    double confidence = 0.0;
    double penalty = 0.0;
    double score = 0.0;
};

struct DecodeStep {
    std::vector<CandidateScore> candidates;
    TokenId chosen = 0;
};

struct DecodeTrace {
    std::vector<DecodeStep> steps;
};

struct DecodeResult {
    /// Newly generated tokens, including the terminating token if one fired.
    TokenSeq tokens;
    DecodeTrace trace;
    /// True when the stop rule fired before the budget ran out.
    bool finished = false;
};

/// Called after each appended token with everything generated so far.
using StopRule = std::function<bool(const TokenSeq& generated)>;

inline StopRule stop_at(TokenId token)
{
    return [token](const TokenSeq& gen) { return !gen.empty() && gen.back() == token; };
}

/// Top-k token ids by probability; ties go to the lower id.
inline std::vector<TokenId> top_k(const std::vector<double>& probs, std::size_t k)
{
    std::vector<TokenId> ids(probs.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        ids[i] = static_cast<TokenId>(i);
    }
    k = std::min(k, ids.size());
    std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(),
                      [&](TokenId a, TokenId b) { return probs[a] > probs[b] || (probs[a] == probs[b] && a < b); });
    ids.resize(k);
    return ids;
}

inline TokenId argmax(const std::vector<double>& probs)
{
    std::size_t best = 0;
    for (std::size_t i = 1; i < probs.size(); ++i) {
        if (probs[i] > probs[best]) {
            best = i;
        }
    }
    return static_cast<TokenId>(best);
}

/// Scores candidates by (1 - alpha) * confidence - alpha * penalty and
/// returns the index of the winner; ties go to the lowest token id.
inline std::size_t contrastive_rank(std::vector<CandidateScore>& candidates, double alpha)
{
    if (candidates.empty()) {
        throw InvalidArgument("contrastive_rank: no candidates");
    }
    std::size_t best = 0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        auto& c = candidates[i];
        c.score = (1.0 - alpha) * c.confidence - alpha * c.penalty;
        const auto& b = candidates[best];
        if (i > 0 && (c.score > b.score || (c.score == b.score && c.token < b.token))) {
            best = i;
        }
    }
    return best;
}

/// Largest cosine between `candidate` and any row of `history`; 0 when the
/// history is empty.
inline double degeneration_penalty(std::span<const double> candidate, const Tensor& history, std::size_t rows)
{
    if (rows == 0) {
        return 0.0;
    }
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < rows; ++j) {
        best = std::max(best, cosine(candidate, history.row(j)));
    }
    return best;
}

struct ContrastiveStepResult {
    TokenId token = 0;
    DecodeStep table;
};

/// One contrastive-search step by full re-encoding of context + v for each
/// candidate v. Reference route for the cached path used by decode().
inline ContrastiveStepResult contrastive_step(const LmModel& model, const TokenSeq& context, std::size_t k,
                                              double alpha)
{
    if (context.empty()) {
        throw InvalidArgument("contrastive_step: empty context");
    }
    const std::vector<double> probs = model.next_dist(context);
    const HiddenStates ctx_h = model.encode(context);
    std::vector<CandidateScore> cands;
    for (TokenId v : top_k(probs, k)) {
        TokenSeq ext = context;
        ext.push_back(v);
        const HiddenStates h = model.encode(ext);
        CandidateScore c;
        c.token = v;
        c.confidence = probs[v];
        c.penalty = degeneration_penalty(h.row(h.rows() - 1), ctx_h, ctx_h.rows());
        cands.push_back(c);
    }
    const std::size_t best = contrastive_rank(cands, alpha);
    ContrastiveStepResult out;
    out.token = cands[best].token;
    out.table.candidates = std::move(cands);
    out.table.chosen = out.token;
    return out;
}

namespace detail {

inline void check_decode(const LmModel& model, const TokenSeq& prefix, const DecoderConfig& cfg)
{
    if (cfg.max_new_tokens == 0) {
        throw InvalidArgument("decode: budget must be positive");
    }
    cfg.validate(model.vocab().size());
    if (prefix.empty()) {
        throw InvalidArgument("decode: empty prefix");
    }
    if (prefix.size() + cfg.max_new_tokens > model.max_len()) {
        throw LengthError("decode: prefix (" + std::to_string(prefix.size()) + ") + max_new_tokens ("
                          + std::to_string(cfg.max_new_tokens) + ") exceeds max_len "
                          + std::to_string(model.max_len()));
    }
    model.encoder().check_input(prefix);
}

inline Tensor last_row(const Tensor& h) { return slice_rows(h, h.rows() - 1, 1); }

inline DecodeResult decode_greedy_or_nucleus(const LmModel& model, const TokenSeq& prefix,
                                             const DecoderConfig& cfg, const StopRule& stop)
{
    NoGradGuard guard;
    Rng rng(cfg.seed);
    EncoderCache cache;
    std::vector<double> probs = model.distribution_from_row(last_row(model.encoder().prefill(prefix, cache)));
    DecodeResult out;
    for (std::size_t step = 0; step < cfg.max_new_tokens; ++step) {
        TokenId chosen = 0;
        if (cfg.strategy == Strategy::greedy) {
            chosen = argmax(probs);
        } else {
            auto order = top_k(probs, probs.size());
            double mass = 0.0;
            std::size_t keep = 0;
            while (keep < order.size()) {
                mass += probs[order[keep]];
                ++keep;
                if (mass >= cfg.nucleus_p) {
                    break;
                }
            }
            double u = rng.uniform() * mass;
            chosen = order[keep - 1];
            for (std::size_t i = 0; i < keep; ++i) {
                u -= probs[order[i]];
                if (u < 0.0) {
                    chosen = order[i];
                    break;
                }
            }
        }
        out.trace.steps.push_back(DecodeStep{{CandidateScore{chosen, probs[chosen], 0.0, probs[chosen]}}, chosen});
        out.tokens.push_back(chosen);
        if (stop(out.tokens)) {
            out.finished = true;
            break;
        }
        if (step + 1 < cfg.max_new_tokens) {
            probs = model.distribution_from_row(model.encoder().extend({chosen}, cache));
        }
    }
    return out;
}

inline DecodeResult decode_contrastive(const LmModel& model, const TokenSeq& prefix, const DecoderConfig& cfg,
                                       const StopRule& stop)
{
    NoGradGuard guard;
    DecodeResult out;
    if (!cfg.cached_prefix) {
        TokenSeq context = prefix;
        for (std::size_t step = 0; step < cfg.max_new_tokens; ++step) {
            auto res = contrastive_step(model, context, cfg.k, cfg.alpha);
            context.push_back(res.token);
            out.tokens.push_back(res.token);
            out.trace.steps.push_back(std::move(res.table));
            if (stop(out.tokens)) {
                out.finished = true;
                break;
            }
        }
        return out;
    }
    EncoderCache cache;
    std::vector<Tensor> history{model.encoder().prefill(prefix, cache)};
    std::vector<double> probs = model.distribution_from_row(last_row(history.front()));
    for (std::size_t step = 0; step < cfg.max_new_tokens; ++step) {
        const Tensor ctx_h = history.size() == 1 ? history.front() : concat_rows(history);
        history = {ctx_h};
        std::vector<CandidateScore> cands;
        std::vector<EncoderCache> cand_caches;
        std::vector<Tensor> cand_rows;
        for (TokenId v : top_k(probs, cfg.k)) {
            EncoderCache c = cache;
            Tensor row = model.encoder().extend({v}, c);
            CandidateScore s;
            s.token = v;
            s.confidence = probs[v];
            s.penalty = degeneration_penalty(row.row(0), ctx_h, ctx_h.rows());
            cands.push_back(s);
            cand_caches.push_back(std::move(c));
            cand_rows.push_back(row);
        }
        const std::size_t best = contrastive_rank(cands, cfg.alpha);
        const TokenId chosen = cands[best].token;
        out.tokens.push_back(chosen);
        out.trace.steps.push_back(DecodeStep{cands, chosen});
        if (stop(out.tokens)) {
            out.finished = true;
            break;
        }
        cache = std::move(cand_caches[best]);
        history.push_back(cand_rows[best]);
        probs = model.distribution_from_row(cand_rows[best]);
    }
    return out;
}

inline DecodeResult decode_beam(const LmModel& model, const TokenSeq& prefix, const DecoderConfig& cfg,
                                const StopRule& stop)
{
    NoGradGuard guard;
    struct Hyp {
        TokenSeq tokens;
        double logp = 0.0;
        EncoderCache cache;
        std::vector<double> probs;
        bool finished = false;
    };
    std::vector<Hyp> beams(1);
    beams[0].probs = model.distribution_from_row(last_row(model.encoder().prefill(prefix, beams[0].cache)));
    for (std::size_t step = 0; step < cfg.max_new_tokens; ++step) {
        struct Cand {
            double logp;
            std::size_t beam;
            TokenId token;
            bool carried;
        };
        std::vector<Cand> cands;
        for (std::size_t b = 0; b < beams.size(); ++b) {
            if (beams[b].finished) {
                cands.push_back({beams[b].logp, b, 0, true});
                continue;
            }
            for (TokenId v : top_k(beams[b].probs, cfg.beam_width)) {
                cands.push_back({beams[b].logp + std::log(beams[b].probs[v]), b, v, false});
            }
        }
        std::stable_sort(cands.begin(), cands.end(), [](const Cand& x, const Cand& y) {
            if (x.logp != y.logp) {
                return x.logp > y.logp;
            }
            if (x.beam != y.beam) {
                return x.beam < y.beam;
            }
            return x.token < y.token;
        });
        cands.resize(std::min(cands.size(), cfg.beam_width));
        std::vector<Hyp> next;
        for (const auto& c : cands) {
            Hyp h = beams[c.beam];
            if (!c.carried) {
                h.tokens.push_back(c.token);
                h.logp = c.logp;
                h.finished = stop(h.tokens);
                if (!h.finished && step + 1 < cfg.max_new_tokens) {
                    h.probs = model.distribution_from_row(model.encoder().extend({c.token}, h.cache));
                }
            }
            next.push_back(std::move(h));
        }
        beams = std::move(next);
        if (std::all_of(beams.begin(), beams.end(), [](const Hyp& h) { return h.finished; })) {
            break;
        }
    }
    const Hyp& best = beams.front();
    DecodeResult out;
    out.tokens = best.tokens;
    out.finished = best.finished;
    for (auto t : best.tokens) {
        out.trace.steps.push_back(DecodeStep{{CandidateScore{t, 0.0, 0.0, 0.0}}, t});
    }
    return out;
}

}  // namespace detail

/// Generates a continuation of `prefix`. By default generation ends at [CLS].
inline DecodeResult decode(const LmModel& model, const TokenSeq& prefix, const DecoderConfig& cfg,
                           const StopRule& stop = stop_at(Vocab::special(Special::cls)))
{
    detail::check_decode(model, prefix, cfg);
    switch (cfg.strategy) {
    case Strategy::greedy:
    case Strategy::nucleus: return detail::decode_greedy_or_nucleus(model, prefix, cfg, stop);
    case Strategy::contrastive: return detail::decode_contrastive(model, prefix, cfg, stop);
    case Strategy::beam: return detail::decode_beam(model, prefix, cfg, stop);
    }
    throw InvalidArgument("decode: unknown strategy");
}

struct RepetitionReport {
    std::map<std::size_t, double> distinct;
    std::vector<std::size_t> skipped;
    /// Longest contiguous n-gram that occurs at least twice (overlap allowed).
    TokenSeq longest_repeat;
};

inline RepetitionReport repetition_report(const TokenSeq& tokens, const std::vector<std::size_t>& n_values)
{
    if (tokens.empty()) {
        throw InvalidArgument("repetition_report: empty token sequence");
    }
    RepetitionReport rep;
    for (auto n : n_values) {
        if (n == 0 || n > tokens.size()) {
            rep.skipped.push_back(n);
            continue;
        }
        rep.distinct[n] = distinct_n(std::vector<TokenSeq>{tokens}, n);
    }
    const std::size_t len = tokens.size();
    std::vector<std::size_t> prev(len + 1, 0), cur(len + 1, 0);
    std::size_t best_len = 0, best_end = 0;
    for (std::size_t i = 1; i <= len; ++i) {
        std::fill(cur.begin(), cur.end(), 0);
        for (std::size_t j = i + 1; j <= len; ++j) {
            if (tokens[i - 1] == tokens[j - 1]) {
                cur[j] = prev[j - 1] + 1;
                if (cur[j] > best_len) {
                    best_len = cur[j];
                    best_end = i;
                }
            }
        }
        std::swap(prev, cur);
    }
    rep.longest_repeat.assign(tokens.begin() + static_cast<std::ptrdiff_t>(best_end - best_len),
                              tokens.begin() + static_cast<std::ptrdiff_t>(best_end));
    return rep;
}

}  // namespace penwise
