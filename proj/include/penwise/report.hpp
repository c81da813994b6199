#pragma once

// Evaluation report over a set of generated outputs, with optional keyword,
// correction and language-model inputs. Sections without inputs are null.

#include <map>
#include <optional>
#include <utility>
#include <vector>

#include <json.hpp>

#include "penwise/error.hpp"
#include "penwise/lm.hpp"
#include "penwise/metrics.hpp"
#include "penwise/vocab.hpp"

namespace penwise {

struct EvalInputs {
    std::vector<Words> outputs;
    std::vector<std::size_t> distinct_orders{1, 2};
    /// Keyword tokens per output, in order.
    std::optional<std::vector<Words>> keywords;
    /// (source, target) per test sentence, with the system's outputs.
    std::optional<std::vector<std::pair<Words, Words>>> gold;
    std::optional<std::vector<Words>> hypotheses;
    /// Prefix per output, scored under `eval_model`.
    std::optional<std::vector<Words>> prefixes;
    const LmModel* eval_model = nullptr;
};

struct EvalReport {
    std::size_t samples = 0;
    std::map<std::size_t, double> distinct;
    std::optional<double> novelty;
    std::optional<SentencePrf> prf;
    std::optional<double> gen_ppl;
    std::optional<double> coherence;
};

inline EvalReport evaluate(const EvalInputs& in)
{
    EvalReport r;
    r.samples = in.outputs.size();
    for (std::size_t n : in.distinct_orders) {
        if (n == 0) throw InvalidArgument("evaluate: distinct order must be >= 1");
        r.distinct[n] = distinct_n(in.outputs, n);
    }
    auto check_aligned = [&](std::size_t size, const char* what) {
        if (size != in.outputs.size()) {
            throw InvalidArgument(std::string("evaluate: ") + what + " has " + std::to_string(size)
                                  + " entries for " + std::to_string(in.outputs.size()) + " outputs");
        }
    };
    if (in.keywords) {
        check_aligned(in.keywords->size(), "keywords");
        double total = 0.0;
        for (std::size_t i = 0; i < in.outputs.size(); ++i) total += novelty((*in.keywords)[i], in.outputs[i]);
        r.novelty = in.outputs.empty() ? 0.0 : total / static_cast<double>(in.outputs.size());
    }
    if (in.gold || in.hypotheses) {
        if (!in.gold || !in.hypotheses) throw InvalidArgument("evaluate: gold pairs and hypotheses go together");
        r.prf = sentence_prf(*in.gold, *in.hypotheses);
    }
    if (in.prefixes) {
        if (in.eval_model == nullptr) throw InvalidArgument("evaluate: prefixes need an evaluation model");
        check_aligned(in.prefixes->size(), "prefixes");
        double ppl = 0.0, coh = 0.0;
        const Vocab& v = in.eval_model->vocab();
        for (std::size_t i = 0; i < in.outputs.size(); ++i) {
            const auto d = gen_diagnostics(v.encode((*in.prefixes)[i]), v.encode(in.outputs[i]), *in.eval_model);
            ppl += d.gen_ppl;
            coh += d.coh;
        }
        const double n = static_cast<double>(std::max<std::size_t>(in.outputs.size(), 1));
        r.gen_ppl = ppl / n;
        r.coherence = coh / n;
    }
    return r;
}

inline nlohmann::json prf_to_json(const Prf& p)
{
    return {{"accuracy", p.accuracy}, {"precision", p.precision}, {"recall", p.recall}, {"f1", p.f1}};
}

/// Fixed key set; absent sections are null.
inline nlohmann::json report_to_json(const EvalReport& r)
{
    nlohmann::json distinct = nlohmann::json::object();
    for (const auto& [n, v] : r.distinct) distinct[std::to_string(n)] = v;
    auto opt = [](const std::optional<double>& x) { return x ? nlohmann::json(*x) : nlohmann::json(nullptr); };
    return {{"samples", r.samples},
            {"distinct", distinct},
            {"novelty", opt(r.novelty)},
            {"detection", r.prf ? prf_to_json(r.prf->detection) : nlohmann::json(nullptr)},
            {"correction", r.prf ? prf_to_json(r.prf->correction) : nlohmann::json(nullptr)},
            {"gen_ppl", opt(r.gen_ppl)},
            {"coherence", opt(r.coherence)}};
}

}  // namespace penwise
