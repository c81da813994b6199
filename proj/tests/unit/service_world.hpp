#pragma once

// A deterministic toy world with one small model per suggestion kind.
// Shared by the service tests and the acceptance binary.

#include <string>
#include <vector>

#include "penwise/service.hpp"

namespace penwise::testing {

inline const std::vector<std::string>& world_sentences()
{
    static const std::vector<std::string> s{
        "the cat sat on the mat",     "the dog sat on the rug",        "the big cat ran to the park",
        "the small dog ran to the house", "a cat saw the red bird",    "a dog saw the big bird",
        "the bird sat on the house",  "the red cat ran to the mat",
    };
    return s;
}

inline EncoderConfig world_encoder()
{
    EncoderConfig e;
    e.d_model = 16;
    e.layers = 1;
    e.heads = 2;
    e.max_len = 24;
    e.ffn_mult = 2;
    return e;
}

inline TrainConfig world_train(std::size_t epochs)
{
    TrainConfig t;
    t.epochs = epochs;
    t.batch_size = 8;
    t.learning_rate = 1e-2;
    t.seed = 11;
    return t;
}

inline Vocab world_vocab()
{
    std::vector<Words> corpus;
    for (const auto& s : world_sentences()) corpus.push_back(tokenize(s));
    corpus.push_back({"teh", "dgo"});
    return Vocab::from_corpus(corpus);
}

inline EmbeddingTable world_embeddings()
{
    EmbeddingTable e;
    // Size adjectives share the last axis; the sign of the first is the size.
    e.add("big", {1.0, 0.0, 0.0, 1.0});
    e.add("large", {0.9, 0.0, 0.1, 1.1});
    e.add("huge", {1.2, 0.1, 0.0, 1.0});
    e.add("small", {-1.0, 0.0, 0.0, 1.0});
    e.add("tiny", {-1.1, 0.0, 0.1, 1.0});
    e.add("cat", {0.0, 1.0, 0.1, 0.0});
    e.add("dog", {0.0, 0.9, 0.2, 0.0});
    e.add("sat", {0.0, 0.1, 1.0, 0.0});
    e.add("ran", {0.0, 0.0, 0.9, 0.1});
    e.add("mat", {0.0, 0.6, 0.4, 0.1});
    e.add("park", {0.0, 0.4, 0.4, 0.2});
    return e;
}

inline EngineModels world_models()
{
    const Vocab v = world_vocab();
    const EncoderConfig enc = world_encoder();
    const TokenId cls = Vocab::special(Special::cls);
    std::vector<TokenSeq> clean;
    for (const auto& s : world_sentences()) clean.push_back(v.encode(tokenize(s)));

    EngineModels m;
    {
        std::vector<TokenSeq> corpus;
        for (auto s : clean) {
            s.push_back(cls);
            for (int c = 0; c < 4; ++c) corpus.push_back(s);
        }
        m.lm = train_lm(corpus, v, enc, world_train(30));
    }
    m.infill = train_lm(infill_training_corpus(clean, 8, 0.4, 5, enc.max_len), v, enc, world_train(20));
    {
        const std::set<std::string> modifiers{"the", "a", "big", "small", "red"};
        std::vector<TokenSeq> corpus;
        for (const auto& s : world_sentences()) {
            Words skeleton;
            for (const auto& w : tokenize(s)) {
                if (!modifiers.count(w)) skeleton.push_back(w);
            }
            const TokenSeq t = conditional_format({v.encode(skeleton), v.encode(tokenize(s))}, Frame::pair_sep_cls,
                                                  enc.max_len);
            for (int c = 0; c < 4; ++c) corpus.push_back(t);
        }
        m.expand = train_lm(corpus, v, enc, world_train(30));
    }
    {
        std::vector<std::pair<TokenSeq, TokenSeq>> pairs;
        for (const auto& s : clean) {
            pairs.emplace_back(s, s);
            for (std::size_t i = 0; i < s.size(); ++i) {
                TokenSeq noisy = s;
                if (s[i] == v.id("the")) noisy[i] = v.id("teh");
                else if (s[i] == v.id("dog")) noisy[i] = v.id("dgo");
                else continue;
                pairs.emplace_back(noisy, s);
            }
        }
        CrfConfig cc;
        cc.rank = 4;
        cc.viterbi_k = 4;
        cc.epochs = 15;
        cc.batch_size = 8;
        cc.learning_rate = 1e-2;
        cc.seed = 3;
        m.crf = train_crf(pairs, v, enc, cc);
    }
    {
        NullTaskConfig nc;
        nc.epochs = 15;
        nc.batch_size = 8;
        nc.learning_rate = 1e-2;
        nc.seed = 4;
        std::vector<TokenSeq> corpus;
        for (int c = 0; c < 4; ++c) corpus.insert(corpus.end(), clean.begin(), clean.end());
        m.null_detector = train_null_tasks(corpus, v, enc, nc);
    }
    m.embeddings = world_embeddings();
    {
        std::vector<Words> docs;
        for (const auto& s : world_sentences()) docs.push_back(tokenize(s));
        m.corpus = Bm25Index(docs);
    }
    return m;
}

inline EngineSettings world_settings()
{
    EngineSettings s;
    s.decoder.max_new_tokens = 12;
    s.polish.graph_topn = 3;
    s.viterbi_k = 4;
    s.model_version = "world-1";
    s.max_candidates = 5;
    return s;
}

/// One request per kind, in kind order.
inline std::vector<std::string> world_requests()
{
    return {
        R"({"kind": "complete", "text": "the cat", "n": 3})",
        R"({"kind": "polish", "text": "the big cat sat on the mat", "span": {"start": 1, "len": 1}, "n": 3})",
        R"({"kind": "correct", "text": "teh cat sat on the mat", "n": 3})",
        R"({"kind": "infill", "keywords": ["cat", "mat"], "n": 3, "decoder": {"strategy": "nucleus", "nucleus_p": 0.9}})",
        R"({"kind": "expand", "text": "cat sat on mat", "n": 2})",
        R"({"kind": "retrieve", "text": "cat sat on the rug", "n": 3})",
    };
}

}  // namespace penwise::testing
