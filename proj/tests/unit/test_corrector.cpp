#include <gtest/gtest.h>

#include <cmath>

#include "penwise/corrector.hpp"
#include "penwise/metrics.hpp"
#include "test_support.hpp"

using namespace penwise;
using namespace penwise::testing;

namespace {

std::vector<TokenSeq> random_sentences(const Vocab& v, const std::string& alphabet, std::size_t count,
                                       std::uint64_t seed)
{
    Rng rng(seed);
    std::vector<TokenSeq> out;
    for (std::size_t i = 0; i < count; ++i) {
        TokenSeq s(3 + rng.below(3));
        for (auto& t : s) t = v.id(std::string(1, alphabet[rng.below(alphabet.size())]));
        out.push_back(s);
    }
    return out;
}

CrfConfig small_crf(std::size_t epochs)
{
    CrfConfig cfg;
    cfg.rank = 4;
    cfg.viterbi_k = 4;
    cfg.epochs = epochs;
    cfg.batch_size = 8;
    cfg.learning_rate = 1e-2;
    return cfg;
}

}  // namespace

TEST(Edits, ApplyAndValidate)
{
    const TokenSeq s{8, 9, 10};
    EXPECT_EQ(apply_edits(s, {}), s);
    EXPECT_EQ(apply_edits(s, {{EditKind::substitute, 1, 9, 11, 0}}), (TokenSeq{8, 11, 10}));
    EXPECT_EQ(apply_edits(s, {{EditKind::insert, 3, std::nullopt, 12, 0}}), (TokenSeq{8, 9, 10, 12}));
    EXPECT_EQ(apply_edits(s, {{EditKind::remove, 0, 8, std::nullopt, 0}, {EditKind::insert, 0, std::nullopt, 12, 0}}),
              (TokenSeq{12, 9, 10}));
    EXPECT_THROW(apply_edits(s, {{EditKind::insert, 1, 9, 12, 0}}), InvalidArgument);
    EXPECT_THROW(apply_edits(s, {{EditKind::remove, 1, std::nullopt, std::nullopt, 0}}), InvalidArgument);
    EXPECT_THROW(apply_edits(s, {{EditKind::substitute, 1, 10, 11, 0}}), InvalidArgument);
}

TEST(CrfTraining, IdentityModelLeavesCleanTextAlone)
{
    Vocab v = letter_vocab(4);
    auto clean = random_sentences(v, "abcd", 150, 1);
    std::vector<std::pair<TokenSeq, TokenSeq>> pairs;
    for (const auto& s : clean) pairs.emplace_back(s, s);
    CrfTrainReport rep;
    CrfModel m = train_crf(pairs, v, tiny_config(16, 1, 2, 8), small_crf(8), &rep);
    EXPECT_LT(rep.epoch_losses.back(), rep.epoch_losses.front());
    for (const auto& s : random_sentences(v, "abcd", 30, 2)) {
        auto c = correct_substitutions(m, s, 4);
        EXPECT_TRUE(c.edits.empty());
        EXPECT_EQ(c.corrected, s);
    }
}

TEST(CrfTraining, LearnsConfusionPair)
{
    Vocab v = letter_vocab(5);  // "e" is the confusable spelling of "a"
    auto clean = random_sentences(v, "abcd", 200, 3);
    std::vector<std::pair<TokenSeq, TokenSeq>> pairs;
    for (const auto& s : clean) {
        TokenSeq noisy = s;
        for (auto& t : noisy)
            if (t == v.id("a")) t = v.id("e");
        pairs.emplace_back(noisy, s);
        pairs.emplace_back(s, s);
    }
    CrfModel m = train_crf(pairs, v, tiny_config(16, 1, 2, 8), small_crf(10));
    auto c = correct_substitutions(m, ids(v, "b e c"), 4);
    EXPECT_EQ(c.corrected, ids(v, "b a c"));
    ASSERT_EQ(c.edits.size(), 1u);
    EXPECT_EQ(c.edits[0].position, 1u);
    EXPECT_EQ(c.edits[0].old_token, v.id("e"));
    EXPECT_EQ(c.edits[0].new_token, v.id("a"));
    EXPECT_EQ(apply_edits(ids(v, "b e c"), c.edits), c.corrected);
}

TEST(CrfTraining, RejectsBadInput)
{
    Vocab v = letter_vocab(2);
    EXPECT_THROW(train_crf({}, v, tiny_config(), small_crf(1)), InvalidArgument);
    EXPECT_THROW(train_crf({{{8, 9}, {8}}}, v, tiny_config(), small_crf(1)), InvalidArgument);
    CrfConfig bad = small_crf(1);
    bad.viterbi_k = 99;
    EXPECT_THROW(train_crf({{{8}, {8}}}, v, tiny_config(), bad), InvalidArgument);
}

TEST(NullTasks, InstanceConstruction)
{
    Vocab v = letter_vocab(2);
    const TokenSeq ab = ids(v, "a b");
    auto gap = gap_instance(ab, 1);
    EXPECT_EQ(v.decode(gap.input), (Words{"a", "[MASK]", "b"}));
    EXPECT_EQ(gap.position, 1u);
    EXPECT_EQ(gap.target, Vocab::special(Special::null));
    auto word = word_instance(ab, 0);
    EXPECT_EQ(v.decode(word.input), (Words{"[MASK]", "b"}));
    EXPECT_EQ(word.target, v.id("a"));
    EXPECT_THROW(gap_instance(ab, 3), InvalidArgument);
    EXPECT_THROW(word_instance(ab, 2), InvalidArgument);
}

TEST(NullTasks, TaskCountsFollowConfiguredRates)
{
    std::vector<TokenSeq> corpus(10000, TokenSeq{8, 9, 10});
    Rng rng(5);
    const double pi = 0.3, pm = 0.6;
    auto inst = draw_null_instances(corpus, pi, pm, rng);
    std::size_t gaps = 0, words = 0;
    for (const auto& i : inst) (i.target == Vocab::special(Special::null) ? gaps : words) += 1;
    const double n = 10000.0;
    EXPECT_LE(std::abs(gaps - n * pi), 3.0 * std::sqrt(n * pi * (1 - pi)));
    EXPECT_LE(std::abs(words - n * pm), 3.0 * std::sqrt(n * pm * (1 - pm)));
    Rng again(5);
    EXPECT_EQ(draw_null_instances(corpus, pi, pm, again), inst);
}

TEST(NullDetect, AllNullPredictionsProposeNoInsertions)
{
    Vocab v = letter_vocab(3);
    NullDetectorModel m{MaskedLm(v, tiny_config(), 1)};
    auto params = m.mlm.parameters();
    for (auto& [name, t] : params) {
        if (name == "mlm_out") std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0);
        if (name == "mlm_out_b") t.mutable_data()[Vocab::special(Special::null)] = 50.0;
    }
    for (const auto& e : null_detect(m, ids(v, "a b c"))) EXPECT_NE(e.kind, EditKind::insert);
    EXPECT_THROW(null_detect(m, {}), InvalidArgument);
}

TEST(NullDetect, ProposesMissingMiddleWord)
{
    Vocab v = letter_vocab(3);
    NullTaskConfig cfg;
    cfg.epochs = 60;
    cfg.batch_size = 8;
    cfg.learning_rate = 1e-2;
    auto m = train_null_tasks(std::vector<TokenSeq>(40, ids(v, "a b c")), v, tiny_config(16, 1, 2, 8), cfg);
    auto edits = null_detect(m, ids(v, "a c"));
    const Edit want{EditKind::insert, 1, std::nullopt, v.id("b"), 0};
    bool found = false;
    for (const auto& e : edits) found = found || (e.kind == want.kind && e.position == 1 && e.new_token == want.new_token);
    EXPECT_TRUE(found);
}

TEST(NullDetect, ProposesDeletingDoubledWord)
{
    Vocab v = letter_vocab(3);
    NullTaskConfig cfg;
    cfg.epochs = 60;
    cfg.batch_size = 8;
    cfg.learning_rate = 1e-2;
    std::vector<TokenSeq> corpus(20, ids(v, "a b"));
    corpus.insert(corpus.end(), 20, ids(v, "a b c"));
    auto m = train_null_tasks(corpus, v, tiny_config(16, 1, 2, 8), cfg);
    auto edits = null_detect(m, ids(v, "a a b"));
    bool found = false;
    for (const auto& e : edits) found = found || (e.kind == EditKind::remove && e.position <= 1);
    EXPECT_TRUE(found);
    for (const auto& e : edits) {
        if (e.kind == EditKind::remove) EXPECT_EQ(apply_edits(ids(v, "a a b"), {e}), ids(v, "a b"));
    }
}

TEST(NullTasks, RejectsBadConfig)
{
    Vocab v = letter_vocab(2);
    NullTaskConfig cfg;
    EXPECT_THROW(train_null_tasks({}, v, tiny_config(), cfg), InvalidArgument);
    cfg.insert_rate = 1.0;
    EXPECT_THROW(train_null_tasks({{8}}, v, tiny_config(), cfg), InvalidArgument);
}
