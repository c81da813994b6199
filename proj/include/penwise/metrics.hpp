#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <utility>
#include <vector>

#include "penwise/error.hpp"
#include "penwise/lm.hpp"
#include "penwise/tensor.hpp"

namespace penwise {

/// Unique n-grams over total n-grams, pooled across all outputs.
/// Returns 0 when there are no n-grams at all.
template <typename Seq>
double distinct_n(const std::vector<Seq>& outputs, std::size_t n)
{
    if (n == 0) {
        throw InvalidArgument("distinct_n: n must be at least 1");
    }
    using Item = typename Seq::value_type;
    std::set<std::vector<Item>> unique;
    std::size_t total = 0;
    for (const auto& seq : outputs) {
        if (seq.size() < n) {
            continue;
        }
        for (std::size_t i = 0; i + n <= seq.size(); ++i) {
            unique.emplace(seq.begin() + static_cast<std::ptrdiff_t>(i),
                           seq.begin() + static_cast<std::ptrdiff_t>(i + n));
            ++total;
        }
    }
    return total == 0 ? 0.0 : static_cast<double>(unique.size()) / static_cast<double>(total);
}

/// Fraction of output tokens that are not keyword tokens. Keyword tokens
/// are matched greedily, left to right, in their given order.
template <typename Seq>
double novelty(const Seq& keyword_tokens, const Seq& output)
{
    if (output.empty()) {
        throw InvalidArgument("novelty: empty output");
    }
    std::size_t next = 0;
    std::size_t matched = 0;
    for (const auto& tok : output) {
        if (next < keyword_tokens.size() && tok == keyword_tokens[next]) {
            ++matched;
            ++next;
        }
    }
    return static_cast<double>(output.size() - matched) / static_cast<double>(output.size());
}

/// True when every keyword occurs contiguously in `sentence`, in order and
/// without overlapping one another.
template <typename Seq>
bool contains_in_order(const Seq& sentence, const std::vector<Seq>& keywords)
{
    std::size_t pos = 0;
    for (const auto& kw : keywords) {
        if (kw.empty()) {
            continue;
        }
        auto it = std::search(sentence.begin() + static_cast<std::ptrdiff_t>(pos), sentence.end(), kw.begin(),
                              kw.end());
        if (it == sentence.end()) {
            return false;
        }
        pos = static_cast<std::size_t>(it - sentence.begin()) + kw.size();
    }
    return true;
}

struct Prf {
    double accuracy = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

inline double harmonic_f1(double p, double r) { return (p + r) > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

struct SentencePrf {
    Prf detection;
    Prf correction;
};

namespace detail {

template <typename Seq>
std::set<std::size_t> diff_positions(const Seq& a, const Seq& b)
{
    std::set<std::size_t> out;
    const std::size_t n = std::max(a.size(), b.size());
    for (std::size_t i = 0; i < n; ++i) {
        if (i >= a.size() || i >= b.size() || !(a[i] == b[i])) {
            out.insert(i);
        }
    }
    return out;
}

inline double ratio(std::size_t num, std::size_t den)
{
    return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace detail

/// Sentence-level detection and correction scores.
///
/// A hypothesis flags the positions where it differs from the source.
/// Detection counts a flagged sentence as a true positive when the flagged
/// set equals the gold error positions; correction when the hypothesis
/// equals the target. Precision is over flagged sentences, recall over
/// sentences with gold errors, accuracy over all sentences.
template <typename Seq>
SentencePrf sentence_prf(const std::vector<std::pair<Seq, Seq>>& gold, const std::vector<Seq>& hyp)
{
    if (gold.size() != hyp.size()) {
        throw InvalidArgument("sentence_prf: " + std::to_string(gold.size()) + " gold pairs but "
                              + std::to_string(hyp.size()) + " hypotheses");
    }
    std::size_t flagged = 0, errored = 0;
    std::size_t det_tp = 0, det_ok = 0, cor_tp = 0, cor_ok = 0;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        const auto& [src, tgt] = gold[i];
        const auto gold_pos = detail::diff_positions(src, tgt);
        const auto hyp_pos = detail::diff_positions(src, hyp[i]);
        const bool is_flagged = !hyp_pos.empty();
        const bool is_errored = !gold_pos.empty();
        flagged += is_flagged ? 1 : 0;
        errored += is_errored ? 1 : 0;
        const bool det_match = hyp_pos == gold_pos;
        const bool cor_match = hyp[i] == tgt;
        det_ok += det_match ? 1 : 0;
        cor_ok += cor_match ? 1 : 0;
        if (is_flagged && is_errored && det_match) {
            ++det_tp;
        }
        if (is_flagged && is_errored && cor_match) {
            ++cor_tp;
        }
    }
    SentencePrf out;
    out.detection.accuracy = detail::ratio(det_ok, gold.size());
    out.detection.precision = detail::ratio(det_tp, flagged);
    out.detection.recall = detail::ratio(det_tp, errored);
    out.detection.f1 = harmonic_f1(out.detection.precision, out.detection.recall);
    out.correction.accuracy = detail::ratio(cor_ok, gold.size());
    out.correction.precision = detail::ratio(cor_tp, flagged);
    out.correction.recall = detail::ratio(cor_tp, errored);
    out.correction.f1 = harmonic_f1(out.correction.precision, out.correction.recall);
    return out;
}

struct GenDiagnostics {
    /// distinct-2 of the continuation
    double div = 0.0;
    /// cosine of mean-pooled prefix and continuation representations
    double coh = 0.0;
    /// exp of the continuation's mean NLL given the prefix
    double gen_ppl = 0.0;
};

inline std::vector<double> mean_pool(const Tensor& rows)
{
    std::vector<double> out(rows.cols(), 0.0);
    for (std::size_t i = 0; i < rows.rows(); ++i) {
        for (std::size_t j = 0; j < rows.cols(); ++j) {
            out[j] += rows.at(i, j);
        }
    }
    for (auto& v : out) {
        v /= static_cast<double>(rows.rows());
    }
    return out;
}

inline GenDiagnostics gen_diagnostics(const TokenSeq& prefix, const TokenSeq& continuation, const LmModel& eval_model)
{
    if (continuation.empty() || prefix.empty()) {
        throw InvalidArgument("gen_diagnostics: prefix and continuation must be nonempty");
    }
    GenDiagnostics out;
    out.div = distinct_n(std::vector<TokenSeq>{continuation}, 2);
    out.coh = cosine(mean_pool(eval_model.encode(prefix)), mean_pool(eval_model.encode(continuation)));

    NoGradGuard guard;
    TokenSeq full = prefix;
    full.insert(full.end(), continuation.begin(), continuation.end());
    Tensor h = eval_model.encode(full);
    Tensor lp = log_softmax_rows(eval_model.logits(slice_rows(h, prefix.size() - 1, continuation.size())));
    double nll = 0.0;
    for (std::size_t i = 0; i < continuation.size(); ++i) {
        nll -= lp.at(i, continuation[i]);
    }
    out.gen_ppl = std::exp(nll / static_cast<double>(continuation.size()));
    return out;
}

}  // namespace penwise
