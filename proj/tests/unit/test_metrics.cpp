#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <string>

#include "penwise/metrics.hpp"
#include "test_support.hpp"

using namespace penwise;
using namespace penwise::testing;

namespace {
using Pair = std::pair<Words, Words>;
}

TEST(Distinct, HandFixtures)
{
    EXPECT_EQ(distinct_n(std::vector<Words>{tokenize("a b"), tokenize("a b")}, 1), 0.5);
    EXPECT_EQ(distinct_n(std::vector<Words>{tokenize("a b c d e")}, 2), 1.0);
    EXPECT_NEAR(distinct_n(std::vector<Words>{tokenize("a b a b a b")}, 2), 0.4, 1e-12);
    EXPECT_EQ(distinct_n(std::vector<Words>{}, 2), 0.0);
    EXPECT_EQ(distinct_n(std::vector<Words>{tokenize("a")}, 2), 0.0);
    EXPECT_THROW(distinct_n(std::vector<Words>{tokenize("a")}, 0), InvalidArgument);
}

TEST(Distinct, RangeAndUniquenessProperty)
{
    Rng rng(4);
    for (int trial = 0; trial < 300; ++trial) {
        std::vector<TokenSeq> outs(1 + rng.below(3));
        for (auto& s : outs) {
            s.resize(2 + rng.below(8));
            for (auto& t : s) t = static_cast<TokenId>(rng.below(4));
        }
        const std::size_t n = 1 + rng.below(2);
        const double d = distinct_n(outs, n);
        std::set<TokenSeq> uniq;
        std::size_t total = 0;
        for (const auto& s : outs)
            for (std::size_t i = 0; i + n <= s.size(); ++i, ++total)
                uniq.insert(TokenSeq(s.begin() + static_cast<long>(i), s.begin() + static_cast<long>(i + n)));
        EXPECT_GT(d, 0.0);
        EXPECT_LE(d, 1.0);
        EXPECT_EQ(d == 1.0, uniq.size() == total);
    }
}

TEST(Novelty, HandFixtures)
{
    EXPECT_EQ(novelty(tokenize("a b c"), tokenize("a b c")), 0.0);
    EXPECT_NEAR(novelty(tokenize("k1 k2"), tokenize("w k1 w w k2 w w w w w")), 0.8, 1e-12);
    // Out-of-order keyword occurrences are not matched.
    EXPECT_NEAR(novelty(tokenize("k2 k1"), tokenize("k1 x k2")), 2.0 / 3.0, 1e-12);
    EXPECT_THROW(novelty(tokenize("a"), Words{}), InvalidArgument);
}

TEST(Novelty, AlwaysInUnitInterval)
{
    Rng rng(9);
    for (int trial = 0; trial < 200; ++trial) {
        TokenSeq kw(rng.below(5)), out(1 + rng.below(8));
        for (auto& t : kw) t = static_cast<TokenId>(rng.below(3));
        for (auto& t : out) t = static_cast<TokenId>(rng.below(3));
        const double v = novelty(kw, out);
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(ContainsInOrder, ContiguousNonOverlapping)
{
    EXPECT_TRUE(contains_in_order(tokenize("she saw red flowers"), std::vector<Words>{tokenize("she"), tokenize("red flowers")}));
    EXPECT_FALSE(contains_in_order(tokenize("she saw red flowers"), std::vector<Words>{tokenize("flowers"), tokenize("she")}));
    EXPECT_FALSE(contains_in_order(tokenize("a b"), std::vector<Words>{tokenize("a b"), tokenize("b")}));
}

TEST(SentencePrf, PerfectSystem)
{
    std::vector<Pair> gold{{tokenize("a x c"), tokenize("a b c")}, {tokenize("d e"), tokenize("d e")}};
    auto r = sentence_prf(gold, std::vector<Words>{tokenize("a b c"), tokenize("d e")});
    for (const Prf& p : {r.detection, r.correction}) {
        EXPECT_EQ(p.accuracy, 1.0);
        EXPECT_EQ(p.precision, 1.0);
        EXPECT_EQ(p.recall, 1.0);
        EXPECT_EQ(p.f1, 1.0);
    }
}

TEST(SentencePrf, SystemThatNeverEdits)
{
    std::vector<Pair> gold{{tokenize("a x c"), tokenize("a b c")}, {tokenize("d e"), tokenize("d e")}};
    auto r = sentence_prf(gold, std::vector<Words>{tokenize("a x c"), tokenize("d e")});
    EXPECT_EQ(r.detection.recall, 0.0);
    EXPECT_EQ(r.detection.accuracy, 0.5);
    EXPECT_EQ(r.detection.f1, 0.0);
}

// One hit, one miss, one false alarm, one clean pass.
TEST(SentencePrf, FourSentenceHandCase)
{
    std::vector<Pair> gold{{tokenize("a x c"), tokenize("a b c")},
                           {tokenize("d y f"), tokenize("d e f")},
                           {tokenize("g h"), tokenize("g h")},
                           {tokenize("i j"), tokenize("i j")}};
    std::vector<Words> hyp{tokenize("a b c"), tokenize("d y f"), tokenize("g q"), tokenize("i j")};
    auto r = sentence_prf(gold, hyp);
    EXPECT_NEAR(r.detection.precision, 0.5, 1e-9);
    EXPECT_NEAR(r.detection.recall, 0.5, 1e-9);
    EXPECT_NEAR(r.detection.f1, 0.5, 1e-9);
    EXPECT_NEAR(r.detection.accuracy, 0.5, 1e-9);
    EXPECT_NEAR(r.correction.precision, 0.5, 1e-9);
    EXPECT_NEAR(r.correction.recall, 0.5, 1e-9);
    EXPECT_THROW(sentence_prf(gold, std::vector<Words>{}), InvalidArgument);
}

TEST(SentencePrf, DetectedButWronglyCorrected)
{
    std::vector<Pair> gold{{tokenize("a x c"), tokenize("a b c")}};
    auto r = sentence_prf(gold, std::vector<Words>{tokenize("a z c")});
    EXPECT_EQ(r.detection.f1, 1.0);
    EXPECT_EQ(r.correction.f1, 0.0);
}

TEST(HarmonicF1, IdentityAndBounds)
{
    Rng rng(12);
    EXPECT_EQ(harmonic_f1(0.0, 0.0), 0.0);
    for (int i = 0; i < 500; ++i) {
        const double p = rng.uniform() + 1e-6, r = rng.uniform() + 1e-6;
        const double f = harmonic_f1(p, r);
        EXPECT_NEAR(f, 2.0 / (1.0 / p + 1.0 / r), 1e-12);
        EXPECT_GE(f, std::min(p, r) - 1e-15);
        EXPECT_LE(f, std::max(p, r) + 1e-15);
    }
}

TEST(GenDiagnostics, UniformModelPerplexityIsVocabSize)
{
    LmModel m(letter_vocab(4), tiny_config(), 3);
    for (auto& x : m.output_projection().mutable_data()) x = 0.0;
    auto d = gen_diagnostics({8, 9}, {10, 11, 10}, m);
    EXPECT_NEAR(d.gen_ppl, static_cast<double>(m.vocab().size()), 1e-12);
}

TEST(GenDiagnostics, RepeatedTokenAndSelfCoherence)
{
    LmModel m(letter_vocab(4), tiny_config(), 3);
    auto rep = gen_diagnostics({8, 9}, TokenSeq(12, 10), m);
    EXPECT_LT(rep.div, 0.1);
    EXPECT_GE(rep.gen_ppl, 1.0);
    auto self = gen_diagnostics({8, 9, 10}, {8, 9, 10}, m);
    EXPECT_NEAR(self.coh, 1.0, 1e-12);
    EXPECT_THROW(gen_diagnostics({8}, {}, m), InvalidArgument);
}
