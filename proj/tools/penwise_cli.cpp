// penwise command line: thin wrappers over the library, one per subcommand.
// Exit codes: 0 success, 2 invalid input or flags, 1 anything else.

#include <csignal>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "penwise/config.hpp"
#include "penwise/datapipe.hpp"
#include "penwise/http_translation.hpp"
#include "penwise/report.hpp"
#include "penwise/server.hpp"
#include "penwise/service.hpp"
#include "penwise/store.hpp"

using namespace penwise;

namespace {

std::vector<std::string> read_lines(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::vector<std::string> out;
    for (std::string line; std::getline(in, line);) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!tokenize(line).empty()) out.push_back(line);
    }
    return out;
}

std::vector<Words> read_sentences(const std::string& path)
{
    std::vector<Words> out;
    for (const auto& line : read_lines(path)) out.push_back(tokenize(line));
    return out;
}

/// "a b\tc d" lines.
std::vector<std::pair<Words, Words>> read_tsv_pairs(const std::string& path)
{
    std::vector<std::pair<Words, Words>> out;
    std::size_t n = 0;
    for (const auto& line : read_lines(path)) {
        ++n;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw ParseError(path + ": line " + std::to_string(n) + " has no tab");
        out.emplace_back(tokenize(line.substr(0, tab)), tokenize(line.substr(tab + 1)));
    }
    return out;
}

/// Writes to `path`, or to stdout when it is empty.
void emit(const std::string& path, const std::string& text)
{
    if (path.empty()) {
        std::cout << text;
    } else {
        write_file_atomic(path, text);
    }
}

std::vector<std::string> split_list(const std::string& s, char sep)
{
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, sep);) {
        if (!tokenize(item).empty()) out.push_back(item);
    }
    return out;
}

const std::map<std::string, Strategy> kStrategies{
    {"greedy", Strategy::greedy}, {"beam", Strategy::beam}, {"nucleus", Strategy::nucleus},
    {"contrastive", Strategy::contrastive}};

/// Decoder flags shared by decode, infill and expand.
struct DecoderFlags {
    std::optional<std::string> strategy;
    std::optional<std::size_t> k;
    std::optional<double> alpha;
    std::optional<std::size_t> beam_width;
    std::optional<double> top_p;
    std::optional<std::size_t> max_new;
    std::optional<std::uint64_t> seed;

    void add(CLI::App* app)
    {
        app->add_option("--strategy", strategy, "greedy, beam, nucleus or contrastive")
            ->check(CLI::IsMember({"greedy", "beam", "nucleus", "contrastive"}));
        app->add_option("--k", k, "contrastive candidate-set size")->check(CLI::PositiveNumber);
        app->add_option("--alpha", alpha, "degeneration-penalty weight")->check(CLI::Range(0.0, 1.0));
        app->add_option("--beam-width", beam_width, "beam width")->check(CLI::PositiveNumber);
        app->add_option("--top-p", top_p, "nucleus mass")->check(CLI::Range(0.0, 1.0));
        app->add_option("--max-new", max_new, "token budget")->check(CLI::PositiveNumber);
        app->add_option("--seed", seed, "sampling seed");
    }

    DecoderOverrides overrides() const
    {
        DecoderOverrides o;
        if (strategy) o.strategy = kStrategies.at(*strategy);
        o.k = k;
        o.alpha = alpha;
        o.beam_width = beam_width;
        o.nucleus_p = top_p;
        o.max_new_tokens = max_new;
        return o;
    }

    DecoderConfig apply(DecoderConfig base) const
    {
        base = overrides().apply(base);
        if (seed) base.seed = *seed;
        return base;
    }
};

nlohmann::json trace_to_json(const Vocab& v, const TokenSeq& prefix, const DecodeResult& r)
{
    nlohmann::json steps = nlohmann::json::array();
    for (const auto& s : r.trace.steps) {
        nlohmann::json cands = nlohmann::json::array();
        for (const auto& c : s.candidates) {
            cands.push_back({{"token", v.token(c.token)},
                             {"id", c.token},
                             {"confidence", c.confidence},
                             {"penalty", c.penalty},
                             {"score", c.score}});
        }
        steps.push_back({{"chosen", v.token(s.chosen)}, {"candidates", cands}});
    }
    return {{"prefix", v.decode(prefix)}, {"tokens", v.decode(r.tokens)}, {"finished", r.finished}, {"steps", steps}};
}

/// Runs one request through an engine built from the given models.
SuggestResponse suggest_with(EngineModels models, const PenwiseConfig& cfg, const SuggestRequest& req)
{
    EngineSettings s = settings_from_config(cfg);
    s.max_candidates = std::max(s.max_candidates, req.n);
    return SuggestEngine(std::move(models), s).suggest(req);
}

void print_candidates(const SuggestResponse& r)
{
    for (const auto& c : r.candidates) std::cout << c.text << "\t" << c.score << "\n";
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"penwise: writing-assistant engine"};
    app.require_subcommand(1);
    app.fallthrough();
    std::string config_path;
    app.add_option("--config", config_path, "JSON config file (default: $" + std::string(kConfigEnvVar) + ")");

    // train
    auto* train = app.add_subcommand("train", "train a model and save it as an archive");
    std::string task = "lm", corpus_path, out_path;
    std::optional<std::string> objective;
    std::optional<double> rho, lr, mask_rate, insert_rate, gamma, drop_rate = 0.5;
    std::optional<std::size_t> epochs, batch, d_model, layers, heads, max_len, rank;
    std::optional<std::uint64_t> train_seed;
    std::optional<std::string> losses;
    bool focal = false;
    std::size_t copies = 4;
    train->add_option("--task", task, "lm, infill, expand, crf or null")
        ->check(CLI::IsMember({"lm", "infill", "expand", "crf", "null"}));
    train->add_option("--corpus", corpus_path,
                      "sentences, one per line (crf: noisy<TAB>clean, expand: annotation JSON lines)")
        ->required();
    train->add_option("--out", out_path, "archive to write")->required();
    train->add_option("--objective", objective, "mle or simctg")->check(CLI::IsMember({"mle", "simctg"}));
    train->add_option("--rho", rho, "contrastive margin")->check(CLI::Range(-1.0, 1.0));
    train->add_option("--epochs", epochs)->check(CLI::PositiveNumber);
    train->add_option("--batch-size", batch)->check(CLI::PositiveNumber);
    train->add_option("--lr", lr)->check(CLI::PositiveNumber);
    train->add_option("--seed", train_seed);
    train->add_option("--d-model", d_model)->check(CLI::PositiveNumber);
    train->add_option("--layers", layers)->check(CLI::PositiveNumber);
    train->add_option("--heads", heads)->check(CLI::PositiveNumber);
    train->add_option("--max-len", max_len)->check(CLI::PositiveNumber);
    train->add_option("--copies", copies, "infill: masked copies per sentence")->check(CLI::PositiveNumber);
    train->add_option("--mask-rate", mask_rate, "infill segments or null-task masking")->check(CLI::Range(0.0, 1.0));
    train->add_option("--insert-rate", insert_rate, "null task")->check(CLI::Range(0.0, 1.0));
    train->add_option("--drop-rate", drop_rate, "expand: modifier drop probability")->check(CLI::Range(0.0, 1.0));
    train->add_option("--losses", losses, "crf: dp, crf or both")->check(CLI::IsMember({"dp", "crf", "both"}));
    train->add_flag("--focal", focal, "crf: focal weighting");
    train->add_option("--gamma", gamma, "crf: focal exponent")->check(CLI::NonNegativeNumber);
    train->add_option("--rank", rank, "crf: transition rank")->check(CLI::PositiveNumber);

    // decode
    auto* dec = app.add_subcommand("decode", "continue a prefix with a language model");
    std::string model_path, prefix, trace_path;
    DecoderFlags dflags;
    dec->add_option("--model", model_path, "lm archive")->required();
    dec->add_option("--prefix", prefix, "text to continue")->required();
    dec->add_option("--trace", trace_path, "write the decode trace as JSON");
    dflags.add(dec);

    // correct
    auto* cor = app.add_subcommand("correct", "propose corrections, one sentence per line");
    std::string crf_path, null_path, in_path, edits_out;
    cor->add_option("--model", crf_path, "crf archive");
    cor->add_option("--null-model", null_path, "null-detector archive");
    cor->add_option("--in", in_path, "input sentences")->required();
    cor->add_option("--out", edits_out, "edits JSON lines (default stdout)");

    // infill
    auto* inf = app.add_subcommand("infill", "sentences containing the keywords in order");
    std::string infill_model, keywords;
    std::size_t n = 3;
    DecoderFlags iflags;
    inf->add_option("--model", infill_model, "infill lm archive")->required();
    inf->add_option("--keywords", keywords, "comma-separated keyword phrases")->required();
    inf->add_option("--n", n, "candidate count")->check(CLI::PositiveNumber);
    iflags.add(inf);

    // polish
    auto* pol = app.add_subcommand("polish", "replacement candidates for a span");
    std::string emb_path, text, span_text;
    std::optional<double> lambda;
    std::optional<std::size_t> window;
    pol->add_option("--embeddings", emb_path, "embedding table (text or archive)")->required();
    pol->add_option("--text", text)->required();
    pol->add_option("--span", span_text, "start:len in words")->required();
    pol->add_option("--n", n, "candidate count")->check(CLI::PositiveNumber);
    pol->add_option("--lambda", lambda, "weight of similarity to the original")->check(CLI::Range(0.0, 1.0));
    pol->add_option("--window", window, "context words per side")->check(CLI::PositiveNumber);

    // expand
    auto* exp = app.add_subcommand("expand", "expand a sentence (global, or local with --pos)");
    std::string expand_model, pos_tags;
    std::optional<std::size_t> max_sites;
    DecoderFlags eflags;
    exp->add_option("--model", expand_model, "expansion lm archive (infill lm with --pos)")->required();
    exp->add_option("--text", text)->required();
    exp->add_option("--pos", pos_tags, "space-separated POS tags: local expansion");
    exp->add_option("--max-sites", max_sites)->check(CLI::PositiveNumber);
    exp->add_option("--n", n, "candidate count")->check(CLI::PositiveNumber);
    eflags.add(exp);

    // mine
    auto* mine = app.add_subcommand("mine", "mine and filter paraphrase pairs");
    std::string queries_path, pairs_out, translator, pivot = "de";
    std::size_t topn = 3;
    std::optional<std::size_t> min_lex;
    std::optional<double> min_wmd, min_sem;
    mine->add_option("--corpus", corpus_path, "sentences, one per line")->required();
    mine->add_option("--embeddings", emb_path, "embedding table (text or archive)")->required();
    mine->add_option("--queries", queries_path, "query sentences (default: the corpus)");
    mine->add_option("--topn", topn, "neighbours per query")->check(CLI::PositiveNumber);
    mine->add_option("--translator", translator, "host:port of a translation service for back-translation");
    mine->add_option("--pivot", pivot, "pivot language for back-translation");
    mine->add_option("--out", pairs_out, "kept pairs as JSON lines")->required();
    mine->add_option("--min-lex", min_lex);
    mine->add_option("--min-wmd", min_wmd);
    mine->add_option("--min-sem", min_sem);

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "metrics report as JSON");
    std::string outputs_path, kw_path, gold_path, hyp_path, prefixes_path, eval_model, orders = "1,2";
    ev->add_option("--outputs", outputs_path, "generated sentences, one per line")->required();
    ev->add_option("--keywords", kw_path, "comma-separated keywords per output line");
    ev->add_option("--gold", gold_path, "source<TAB>target per test sentence");
    ev->add_option("--hyp", hyp_path, "system output per test sentence");
    ev->add_option("--prefixes", prefixes_path, "prefix per output line");
    ev->add_option("--model", eval_model, "evaluation lm archive");
    ev->add_option("--distinct", orders, "n-gram orders, comma-separated");

    // serve
    auto* srv = app.add_subcommand("serve", "run the HTTP suggestion service");
    std::optional<std::string> host;
    std::optional<int> port;
    std::optional<std::size_t> threads;
    srv->add_option("--host", host);
    srv->add_option("--port", port)->check(CLI::Range(0, 65535));
    srv->add_option("--threads", threads)->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        PenwiseConfig cfg;
        if (!config_path.empty()) {
            cfg = load_config(config_path);
        } else if (auto env = config_path_from_env()) {
            cfg = load_config(*env);
        }

        if (train->parsed()) {
            EncoderConfig enc = cfg.encoder;
            if (d_model) enc.d_model = *d_model;
            if (layers) enc.layers = *layers;
            if (heads) enc.heads = *heads;
            if (max_len) enc.max_len = *max_len;
            enc.validate();
            nlohmann::json summary{{"task", task}, {"out", out_path}};
            if (task == "crf") {
                const auto raw = read_tsv_pairs(corpus_path);
                std::vector<Words> all;
                for (const auto& [s, t] : raw) {
                    all.push_back(s);
                    all.push_back(t);
                }
                const Vocab v = Vocab::from_corpus(all);
                std::vector<std::pair<TokenSeq, TokenSeq>> pairs;
                for (const auto& [s, t] : raw) pairs.emplace_back(v.encode(s), v.encode(t));
                CrfConfig cc = cfg.crf;
                if (epochs) cc.epochs = *epochs;
                if (batch) cc.batch_size = *batch;
                if (lr) cc.learning_rate = *lr;
                if (train_seed) cc.seed = *train_seed;
                if (losses) cc.losses = *crf_objective_from_string(*losses);
                if (focal) cc.focal = true;
                if (gamma) cc.gamma = *gamma;
                if (rank) cc.rank = *rank;
                cc.viterbi_k = std::min(cc.viterbi_k, v.size());
                cc.rank = std::min(cc.rank, v.size());
                CrfTrainReport rep;
                save(train_crf(pairs, v, enc, cc, &rep), out_path);
                summary["examples"] = pairs.size();
                summary["vocab_size"] = v.size();
                summary["epoch_losses"] = rep.epoch_losses;
            } else if (task == "null") {
                const auto sentences = read_sentences(corpus_path);
                const Vocab v = Vocab::from_corpus(sentences);
                NullTaskConfig nc = cfg.null_detector;
                if (epochs) nc.epochs = *epochs;
                if (batch) nc.batch_size = *batch;
                if (lr) nc.learning_rate = *lr;
                if (train_seed) nc.seed = *train_seed;
                if (mask_rate) nc.mask_rate = *mask_rate;
                if (insert_rate) nc.insert_rate = *insert_rate;
                std::vector<TokenSeq> corpus;
                for (const auto& s : sentences) corpus.push_back(v.encode(s));
                save(train_null_tasks(corpus, v, enc, nc), out_path);
                summary["examples"] = corpus.size();
                summary["vocab_size"] = v.size();
            } else {
                TrainConfig tc = cfg.train;
                if (objective) tc.objective = *objective == "simctg" ? Objective::simctg : Objective::mle;
                if (rho) tc.rho = *rho;
                if (epochs) tc.epochs = *epochs;
                if (batch) tc.batch_size = *batch;
                if (lr) tc.learning_rate = *lr;
                if (train_seed) tc.seed = *train_seed;
                std::vector<TokenSeq> corpus;
                Vocab v;
                if (task == "expand") {
                    std::ifstream in(corpus_path);
                    if (!in) throw IoError("cannot open " + corpus_path);
                    const auto parsed = parse_annotations(in);
                    std::vector<Words> words;
                    for (const auto& a : parsed) words.push_back(a.tokens);
                    v = Vocab::from_corpus(words);
                    Rng rng(tc.seed);
                    for (const auto& p : skeleton_pairs(parsed, rng, drop_rate.value_or(0.5))) {
                        corpus.push_back(expansion_training_string(v, p, enc.max_len));
                    }
                } else {
                    const auto sentences = read_sentences(corpus_path);
                    v = Vocab::from_corpus(sentences);
                    std::vector<TokenSeq> encoded;
                    for (const auto& s : sentences) encoded.push_back(v.encode(s));
                    if (task == "infill") {
                        corpus = infill_training_corpus(encoded, copies, mask_rate.value_or(0.4), tc.seed, enc.max_len);
                    } else {
                        // Sentences end in [CLS] so that generation learns to stop.
                        for (auto s : encoded) {
                            s.push_back(Vocab::special(Special::cls));
                            corpus.push_back(std::move(s));
                        }
                    }
                }
                TrainReport rep;
                save(train_lm(corpus, v, enc, tc, &rep), out_path);
                summary["examples"] = corpus.size();
                summary["vocab_size"] = v.size();
                summary["initial_loss"] = rep.initial_loss;
                summary["final_loss"] = rep.final_loss;
            }
            std::cout << summary.dump() << "\n";
        } else if (dec->parsed()) {
            const LmModel m = load_lm(model_path);
            DecoderConfig dc = dflags.apply(cfg.decoder);
            const TokenSeq p = m.vocab().encode(tokenize(prefix));
            // The configured budget shrinks to fit the model; an explicit --max-new does not.
            if (!dflags.max_new && p.size() < m.max_len()) dc.max_new_tokens = std::min(dc.max_new_tokens, m.max_len() - p.size());
            const DecodeResult r = decode(m, p, dc, stop_at(Vocab::special(Special::cls)));
            TokenSeq shown = r.tokens;
            if (r.finished && !shown.empty()) shown.pop_back();
            std::cout << detokenize(m.vocab().decode(shown)) << "\n";
            if (!trace_path.empty()) write_file_atomic(trace_path, trace_to_json(m.vocab(), p, r).dump(2) + "\n");
        } else if (cor->parsed()) {
            EngineModels models;
            if (!crf_path.empty()) models.crf = load_crf(crf_path);
            if (!null_path.empty()) models.null_detector = load_null_detector(null_path);
            if (!models.crf && !models.null_detector) throw InvalidArgument("correct: give --model, --null-model or both");
            EngineSettings s = settings_from_config(cfg);
            const SuggestEngine engine(std::move(models), s);
            std::string out;
            for (const auto& line : read_lines(in_path)) {
                SuggestRequest req;
                req.kind = SuggestKind::correct;
                req.text = line;
                req.n = 1;
                const auto best = engine.suggest(req).candidates.at(0);
                nlohmann::json edits = nlohmann::json::array();
                for (const auto& e : *best.edits) edits.push_back(edit_to_json(e));
                out += nlohmann::json{{"text", line}, {"edits", edits}, {"corrected", best.text}}.dump() + "\n";
            }
            emit(edits_out, out);
        } else if (inf->parsed()) {
            EngineModels models;
            models.infill = load_lm(infill_model);
            SuggestRequest req;
            req.kind = SuggestKind::infill;
            req.keywords = split_list(keywords, ',');
            if (req.keywords->empty()) throw InvalidArgument("--keywords: no keywords given");
            req.decoder = iflags.overrides();
            req.n = n;
            req.seed = iflags.seed;
            print_candidates(suggest_with(std::move(models), cfg, req));
        } else if (pol->parsed()) {
            if (lambda) cfg.polish.lambda = *lambda;
            if (window) cfg.polish.window = *window;
            const auto colon = span_text.find(':');
            std::size_t start = 0, len = 0;
            try {
                if (colon == std::string::npos) throw std::invalid_argument("no colon");
                start = std::stoul(span_text.substr(0, colon));
                len = std::stoul(span_text.substr(colon + 1));
            } catch (const std::logic_error&) {
                throw InvalidArgument("--span: expected start:len, got \"" + span_text + "\"");
            }
            EngineModels models;
            models.embeddings = detail::is_archive(emb_path) ? load_embeddings_archive(emb_path)
                                                             : EmbeddingTable::load(emb_path);
            SuggestRequest req;
            req.kind = SuggestKind::polish;
            req.text = text;
            req.span = Span{start, len};
            req.n = n;
            print_candidates(suggest_with(std::move(models), cfg, req));
        } else if (exp->parsed()) {
            if (max_sites) cfg.expand.max_sites = *max_sites;
            if (!pos_tags.empty()) {
                ExpandConfig ec = cfg.expand;
                ec.decoder = eflags.apply(cfg.decoder);
                const Expansion e = local_expand(tokenize(text), tokenize(pos_tags), load_lm(expand_model), ec);
                std::cout << detokenize(e.expanded) << "\n";
            } else {
                EngineModels models;
                models.expand = load_lm(expand_model);
                SuggestRequest req;
                req.kind = SuggestKind::expand;
                req.text = text;
                req.decoder = eflags.overrides();
                req.n = n;
                req.seed = eflags.seed;
                print_candidates(suggest_with(std::move(models), cfg, req));
            }
        } else if (mine->parsed()) {
            const EmbeddingTable emb = detail::is_archive(emb_path) ? load_embeddings_archive(emb_path)
                                                                    : EmbeddingTable::load(emb_path);
            FilterThresholds th = cfg.filter;
            if (min_lex) th.min_lex = *min_lex;
            if (min_wmd) th.min_wmd = *min_wmd;
            if (min_sem) th.min_sem = *min_sem;
            const auto corpus = read_sentences(corpus_path);
            const auto queries = queries_path.empty() ? corpus : read_sentences(queries_path);
            const SentenceIndex index(corpus, emb);
            std::vector<SentencePair> pairs;
            for (const auto& q : queries) {
                for (auto& p : mine_retrieval(index, q, topn, emb)) pairs.push_back(std::move(p));
            }
            if (!translator.empty()) {
                const auto colon = translator.rfind(':');
                if (colon == std::string::npos) throw InvalidArgument("--translator: expected host:port");
                int tport = 0;
                try {
                    tport = std::stoi(translator.substr(colon + 1));
                } catch (const std::logic_error&) {
                    throw InvalidArgument("--translator: bad port in \"" + translator + "\"");
                }
                const HttpTranslationClient client(translator.substr(0, colon), tport);
                for (const auto& q : queries) pairs.push_back(backtranslate(client, q, pivot));
            }
            const FilterResult r = filter_pairs(std::move(pairs), th, emb);
            write_file_atomic(pairs_out, write_pairs_jsonl(r.kept));
            std::cout << r.report.to_json().dump() << "\n";
        } else if (ev->parsed()) {
            EvalInputs in;
            in.outputs = read_sentences(outputs_path);
            in.distinct_orders.clear();
            for (const auto& o : split_list(orders, ',')) {
                try {
                    in.distinct_orders.push_back(std::stoul(o));
                } catch (const std::logic_error&) {
                    throw InvalidArgument("--distinct: bad order \"" + o + "\"");
                }
            }
            if (!kw_path.empty()) {
                in.keywords.emplace();
                for (const auto& line : read_lines(kw_path)) {
                    Words flat;
                    for (const auto& k : split_list(line, ',')) {
                        for (auto& w : tokenize(k)) flat.push_back(std::move(w));
                    }
                    in.keywords->push_back(std::move(flat));
                }
            }
            if (!gold_path.empty()) in.gold = read_tsv_pairs(gold_path);
            if (!hyp_path.empty()) in.hypotheses = read_sentences(hyp_path);
            std::optional<LmModel> lm;
            if (!eval_model.empty()) lm = load_lm(eval_model);
            if (!prefixes_path.empty()) {
                in.prefixes = read_sentences(prefixes_path);
                in.eval_model = lm ? &*lm : nullptr;
            }
            std::cout << report_to_json(evaluate(in)).dump(2) << "\n";
        } else if (srv->parsed()) {
            ServiceConfig sc = cfg.service;
            if (host) sc.host = *host;
            if (port) sc.port = *port;
            if (threads) sc.threads = *threads;
            // Signals are taken by sigwait below, not by worker threads.
            sigset_t stop_signals;
            sigemptyset(&stop_signals);
            sigaddset(&stop_signals, SIGINT);
            sigaddset(&stop_signals, SIGTERM);
            pthread_sigmask(SIG_BLOCK, &stop_signals, nullptr);

            SuggestServer server(sc.threads);
            const int bound = server.bind(sc.host, sc.port);
            std::thread loop([&] { server.run(); });
            // stop() before the loop starts listening would be lost.
            server.wait_until_ready();
            std::cerr << "penwise: listening on " << sc.host << ":" << bound << "\n";
            try {
                server.install(std::make_shared<const SuggestEngine>(load_models(sc.models, cfg.bm25),
                                                                     settings_from_config(cfg)));
            } catch (...) {
                server.stop();
                loop.join();
                throw;
            }
            std::cerr << "penwise: models loaded, version " << sc.model_version << "\n";
            int sig = 0;
            sigwait(&stop_signals, &sig);
            server.stop();
            loop.join();
        }
        return 0;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
