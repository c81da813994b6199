#pragma once

// Keywords-to-sentence as text infilling. Training strings look like
//   input [SEP] output
// where the input carries one [blank] per masked segment and the output
// lists the masked segments in order, each closed by [ans].

#include <algorithm>
#include <set>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "penwise/corrector.hpp"
#include "penwise/decode.hpp"
#include "penwise/error.hpp"
#include "penwise/lm.hpp"
#include "penwise/metrics.hpp"
#include "penwise/rng.hpp"
#include "penwise/vocab.hpp"

namespace penwise {

/// Decoding hit its budget before every [blank] was answered.
class IncompleteGeneration : public Error {
  public:
    IncompleteGeneration(const std::string& what, TokenSeq partial, DecodeTrace trace)
        : Error(what), m_partial(std::move(partial)), m_trace(std::move(trace))
    {
    }
    const TokenSeq& partial() const { return m_partial; }
    const DecodeTrace& trace() const { return m_trace; }

  private:
    TokenSeq m_partial;
    DecodeTrace m_trace;
};

struct Span {
    std::size_t start = 0;
    std::size_t length = 0;

    bool operator==(const Span&) const = default;
};

/// Masks each token independently with probability `rate`; maximal runs
/// form the segments. At least one token always stays visible.
struct RandomSegments {
    std::uint64_t seed = 0;
    double rate = 0.5;
};

/// Masks exactly these segments.
struct MaskedSpans {
    std::vector<Span> spans;
};

using MaskStrategy = std::variant<RandomSegments, MaskedSpans>;

struct InfillExample {
    TokenSeq source;
    TokenSeq input;
    TokenSeq output;
    std::vector<Span> spans;
};

/// Masked segments that leave exactly the `kept` spans visible.
inline std::vector<Span> complement_spans(std::size_t length, std::vector<Span> kept)
{
    std::sort(kept.begin(), kept.end(), [](const Span& a, const Span& b) { return a.start < b.start; });
    std::vector<Span> out;
    std::size_t pos = 0;
    for (const auto& k : kept) {
        if (k.length == 0 || k.start < pos || k.start + k.length > length) {
            throw InvalidArgument("complement_spans: kept spans must be nonempty, disjoint and in range");
        }
        if (k.start > pos) {
            out.push_back({pos, k.start - pos});
        }
        pos = k.start + k.length;
    }
    if (pos < length) {
        out.push_back({pos, length - pos});
    }
    return out;
}

namespace detail {

inline std::vector<Span> random_spans(std::size_t length, const RandomSegments& rs)
{
    if (!(rs.rate > 0.0 && rs.rate < 1.0)) {
        throw InvalidArgument("make_example: rate must lie in (0, 1)");
    }
    Rng rng(rs.seed);
    std::vector<bool> masked(length);
    for (std::size_t i = 0; i < length; ++i) {
        masked[i] = rng.bernoulli(rs.rate);
    }
    if (std::all_of(masked.begin(), masked.end(), [](bool b) { return b; })) {
        masked[rng.below(length)] = false;
    }
    std::vector<Span> out;
    for (std::size_t i = 0; i < length;) {
        if (!masked[i]) {
            ++i;
            continue;
        }
        std::size_t j = i;
        while (j < length && masked[j]) {
            ++j;
        }
        out.push_back({i, j - i});
        i = j;
    }
    return out;
}

inline void check_infill_tokens(const TokenSeq& sentence)
{
    for (TokenId t : sentence) {
        if (t == Vocab::special(Special::blank) || t == Vocab::special(Special::ans)
            || t == Vocab::special(Special::sep)) {
            throw InvalidArgument("make_example: sentence already contains [blank], [ans] or [SEP]");
        }
    }
}

}  // namespace detail

inline InfillExample make_example(const TokenSeq& sentence, const MaskStrategy& strategy)
{
    if (sentence.empty()) {
        throw InvalidArgument("make_example: empty sentence");
    }
    detail::check_infill_tokens(sentence);
    std::vector<Span> spans;
    if (const auto* rs = std::get_if<RandomSegments>(&strategy)) {
        spans = detail::random_spans(sentence.size(), *rs);
    } else {
        spans = std::get<MaskedSpans>(strategy).spans;
        std::sort(spans.begin(), spans.end(), [](const Span& a, const Span& b) { return a.start < b.start; });
    }
    std::size_t masked = 0, pos = 0;
    for (const auto& s : spans) {
        if (s.length == 0 || s.start + s.length > sentence.size()) {
            throw InvalidArgument("make_example: span out of range or empty");
        }
        if (s.start < pos) {
            throw InvalidArgument("make_example: overlapping spans at position " + std::to_string(s.start));
        }
        pos = s.start + s.length;
        masked += s.length;
    }
    if (masked >= sentence.size()) {
        throw InvalidArgument("make_example: spans mask the whole sentence");
    }
    InfillExample ex;
    ex.source = sentence;
    ex.spans = spans;
    const TokenId blank = Vocab::special(Special::blank);
    const TokenId ans = Vocab::special(Special::ans);
    pos = 0;
    for (const auto& s : spans) {
        ex.input.insert(ex.input.end(), sentence.begin() + static_cast<std::ptrdiff_t>(pos),
                        sentence.begin() + static_cast<std::ptrdiff_t>(s.start));
        ex.input.push_back(blank);
        ex.output.insert(ex.output.end(), sentence.begin() + static_cast<std::ptrdiff_t>(s.start),
                         sentence.begin() + static_cast<std::ptrdiff_t>(s.start + s.length));
        ex.output.push_back(ans);
        pos = s.start + s.length;
    }
    ex.input.insert(ex.input.end(), sentence.begin() + static_cast<std::ptrdiff_t>(pos), sentence.end());
    return ex;
}

/// input [SEP] output
inline TokenSeq training_string(const InfillExample& ex)
{
    TokenSeq out = ex.input;
    out.push_back(Vocab::special(Special::sep));
    out.insert(out.end(), ex.output.begin(), ex.output.end());
    return out;
}

/// `copies` randomly masked training strings per sentence. Strings longer
/// than `max_len` are skipped.
inline std::vector<TokenSeq> infill_training_corpus(const std::vector<TokenSeq>& corpus, std::size_t copies,
                                                    double rate, std::uint64_t seed, std::size_t max_len)
{
    Rng rng(seed);
    std::vector<TokenSeq> out;
    for (const auto& s : corpus) {
        for (std::size_t c = 0; c < copies; ++c) {
            TokenSeq t = training_string(make_example(s, RandomSegments{rng.next_u64(), rate}));
            if (t.size() <= max_len) out.push_back(std::move(t));
        }
    }
    return out;
}

inline std::size_t count_token(const TokenSeq& seq, TokenId t)
{
    return static_cast<std::size_t>(std::count(seq.begin(), seq.end(), t));
}

/// Replaces the i-th [blank] of `input` with the i-th [ans]-terminated
/// segment of `output`.
inline TokenSeq reassemble(const TokenSeq& input, const TokenSeq& output)
{
    const TokenId blank = Vocab::special(Special::blank);
    const TokenId ans = Vocab::special(Special::ans);
    const std::size_t blanks = count_token(input, blank);
    const std::size_t answers = count_token(output, ans);
    if (blanks != answers) {
        throw MalformedOutput("reassemble: " + std::to_string(blanks) + " [blank] but " + std::to_string(answers)
                              + " [ans]");
    }
    if (!output.empty() && output.back() != ans) {
        throw MalformedOutput("reassemble: tokens after the last [ans]");
    }
    TokenSeq out;
    auto seg = output.begin();
    for (TokenId t : input) {
        if (t != blank) {
            out.push_back(t);
            continue;
        }
        auto end = std::find(seg, output.end(), ans);
        out.insert(out.end(), seg, end);
        seg = end + 1;
    }
    return out;
}

/// "[blank] k1 [blank] k2 ... [blank]"
inline TokenSeq keyword_frame(const std::vector<TokenSeq>& keywords)
{
    if (keywords.empty()) {
        throw InvalidArgument("infill: no keywords");
    }
    const TokenId blank = Vocab::special(Special::blank);
    TokenSeq out{blank};
    for (const auto& k : keywords) {
        if (k.empty()) {
            throw InvalidArgument("infill: empty keyword");
        }
        detail::check_infill_tokens(k);
        out.insert(out.end(), k.begin(), k.end());
        out.push_back(blank);
    }
    return out;
}

struct InfillCandidate {
    TokenSeq sentence;
    /// Raw generated output (segments and [ans] markers).
    TokenSeq raw;
    /// Mean log-probability of the generated tokens.
    double score = 0.0;
};

/// One infilling decode. Throws IncompleteGeneration when the budget runs
/// out first and MalformedOutput when the answer cannot be reassembled or
/// drops a keyword.
/// Fills every [blank] of an arbitrary frame. The answer may not contain
/// specials; the frame's own tokens survive by construction.
inline InfillCandidate infill_frame(const LmModel& model, const TokenSeq& frame, const DecoderConfig& cfg)
{
    TokenSeq prompt = frame;
    prompt.push_back(Vocab::special(Special::sep));
    const TokenId ans = Vocab::special(Special::ans);
    const std::size_t blanks = count_token(frame, Vocab::special(Special::blank));
    if (blanks == 0) {
        throw InvalidArgument("infill: frame has no [blank]");
    }
    StopRule balanced = [ans, blanks](const TokenSeq& gen) { return count_token(gen, ans) == blanks; };
    DecodeResult res = decode(model, prompt, cfg, balanced);
    if (!res.finished) {
        throw IncompleteGeneration("infill: budget of " + std::to_string(cfg.max_new_tokens) + " tokens exhausted with "
                                       + std::to_string(count_token(res.tokens, ans)) + "/" + std::to_string(blanks)
                                       + " answers",
                                   res.tokens, res.trace);
    }
    InfillCandidate out;
    out.raw = res.tokens;
    out.sentence = reassemble(frame, res.tokens);
    for (TokenId t : out.sentence) {
        if (Vocab::is_special(t)) {
            throw MalformedOutput("infill: special token " + std::string(kSpecialNames[t]) + " in answer");
        }
    }
    TokenSeq full = prompt;
    full.insert(full.end(), res.tokens.begin(), res.tokens.end());
    {
        NoGradGuard guard;
        Tensor lp = log_softmax_rows(model.logits(slice_rows(model.encode(full), prompt.size() - 1, res.tokens.size())));
        double total = 0.0;
        for (std::size_t i = 0; i < res.tokens.size(); ++i) {
            total += lp.at(i, res.tokens[i]);
        }
        out.score = total / static_cast<double>(res.tokens.size());
    }
    return out;
}

inline InfillCandidate infill_generate(const LmModel& model, const std::vector<TokenSeq>& keywords,
                                       const DecoderConfig& cfg)
{
    InfillCandidate out = infill_frame(model, keyword_frame(keywords), cfg);
    if (!contains_in_order(out.sentence, keywords)) {
        throw MalformedOutput("infill: answer lost a keyword or its order");
    }
    return out;
}

struct InfillBatch {
    /// Distinct accepted candidates, best score first.
    std::vector<InfillCandidate> accepted;
    std::size_t incomplete = 0;
    std::size_t malformed = 0;
};

/// Runs `n` decodes with seeds cfg.seed, cfg.seed + 1, ... and keeps the
/// distinct sentences that pass validation.
inline InfillBatch infill_candidates(const LmModel& model, const std::vector<TokenSeq>& keywords,
                                     const DecoderConfig& cfg, std::size_t n)
{
    if (n == 0) {
        throw InvalidArgument("infill: candidate count must be positive");
    }
    InfillBatch out;
    std::set<TokenSeq> seen;
    for (std::size_t i = 0; i < n; ++i) {
        DecoderConfig c = cfg;
        c.seed = cfg.seed + i;
        try {
            auto cand = infill_generate(model, keywords, c);
            if (seen.insert(cand.sentence).second) {
                out.accepted.push_back(std::move(cand));
            }
        } catch (const IncompleteGeneration&) {
            ++out.incomplete;
        } catch (const MalformedOutput&) {
            ++out.malformed;
        }
    }
    std::stable_sort(out.accepted.begin(), out.accepted.end(),
                     [](const InfillCandidate& a, const InfillCandidate& b) { return a.score > b.score; });
    return out;
}

/// Single-token baseline: every [blank] becomes the argmax real word of a
/// masked model, filled left to right with later blanks still masked.
inline TokenSeq mlm_fill(const MaskedLm& model, const TokenSeq& input)
{
    const TokenId blank = Vocab::special(Special::blank);
    const TokenId mask = Vocab::special(Special::mask);
    if (count_token(input, blank) == 0) {
        throw InvalidArgument("mlm_fill: input has no [blank]");
    }
    TokenSeq work = input;
    std::replace(work.begin(), work.end(), blank, mask);
    for (std::size_t i = 0; i < work.size(); ++i) {
        if (input[i] != blank) {
            continue;
        }
        const auto p = model.predict(work, i);
        TokenId best = 0;
        double bp = -1.0;
        for (std::size_t v = 0; v < p.size(); ++v) {
            if (!Vocab::is_special(static_cast<TokenId>(v)) && p[v] > bp) {
                bp = p[v];
                best = static_cast<TokenId>(v);
            }
        }
        work[i] = best;
    }
    return work;
}

}  // namespace penwise
