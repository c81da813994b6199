#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "penwise/store.hpp"
#include "test_support.hpp"

using namespace penwise;
using namespace penwise::testing;

namespace {

std::string temp_path(const std::string& name)
{
    return (std::filesystem::temp_directory_path() / ("penwise_store_" + name)).string();
}

std::string hex(const std::string& bytes)
{
    static const char* digits = "0123456789abcdef";
    std::string out;
    for (unsigned char c : bytes) {
        out.push_back(digits[c >> 4]);
        out.push_back(digits[c & 15]);
    }
    return out;
}

LmModel trained_lm()
{
    Vocab v = letter_vocab(5);
    TrainConfig tc;
    tc.epochs = 3;
    tc.batch_size = 4;
    return train_lm(std::vector<TokenSeq>(8, ids(v, "a b c d e")), v, tiny_config(8, 2, 2, 16), tc);
}

}  // namespace

TEST(Archive, GoldenBytesAreLittleEndian)
{
    Archive a{ArchiveKind::embeddings};
    a.strings = {"a"};
    a.tensors.push_back({"vectors", Dtype::f32, {1, 2}, {1.0, -0.5}});
    // Reference bytes and FNV-1a checksum computed outside the library.
    EXPECT_EQ(hex(encode_archive(a)),
              "454644310100000004010000000100000061000000000100000007000000766563746f7273010201000000000000000200"
              "0000000000000000803f000000bfdbbfc27a201a3268");
    auto back = decode_archive(encode_archive(a));
    EXPECT_EQ(back.strings, a.strings);
    EXPECT_EQ(back.tensor("vectors").values, (std::vector<double>{1.0, -0.5}));
}

TEST(Archive, LmRoundTripPreservesNextDist)
{
    const LmModel m = trained_lm();
    const auto path = temp_path("lm.efd");
    save(m, path);
    const LmModel back = load_lm(path);
    EXPECT_EQ(back.vocab().tokens(), m.vocab().tokens());
    for (const char* p : {"a", "a b", "c d e", "e e a b"}) {
        const auto x = m.next_dist(ids(m.vocab(), p)), y = back.next_dist(ids(m.vocab(), p));
        for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(x[i], y[i], 1e-6) << p;
    }
    // Stored precision is a fixed point: a second save is byte-identical.
    EXPECT_EQ(encode_archive(to_archive(back)), read_file(path));
    std::filesystem::remove(path);
}

TEST(Archive, CrfNullDetectorEmbeddingsAndBm25RoundTrip)
{
    Vocab v = letter_vocab(4);
    CrfModel crf(v, tiny_config(), 3, 5);
    auto crf_back = crf_from_archive(decode_archive(encode_archive(to_archive(crf))));
    EXPECT_EQ(crf_back.rank(), 3u);
    const TokenSeq x = ids(v, "a b c d");
    const auto s0 = crf.emissions(x), s1 = crf_back.emissions(x);
    for (std::size_t i = 0; i < s0.size(); ++i) EXPECT_NEAR(s0[i], s1[i], 1e-5);
    EXPECT_EQ(viterbi_decode(crf, x, 4), viterbi_decode(crf_back, x, 4));

    NullDetectorModel nd{MaskedLm(v, tiny_config(), 2), 0.3, 0.6};
    auto nd_back = null_detector_from_archive(decode_archive(encode_archive(to_archive(nd))));
    EXPECT_EQ(nd_back.insert_rate, 0.3);
    EXPECT_EQ(nd_back.mask_rate, 0.6);
    const auto p0 = nd.mlm.predict(x, 1), p1 = nd_back.mlm.predict(x, 1);
    for (std::size_t i = 0; i < p0.size(); ++i) EXPECT_NEAR(p0[i], p1[i], 1e-6);

    EmbeddingTable e;
    e.add("a lot", {0.25, -1.5});
    e.add("many", {1.0, 2.0});
    auto e_back = embeddings_from_archive(decode_archive(encode_archive(to_archive(e))));
    EXPECT_EQ(e_back.phrases(), e.phrases());
    EXPECT_EQ(e_back.at("a lot"), e.at("a lot"));

    Bm25Index idx({tokenize("the cat sat"), tokenize("the dog"), {}}, 1.5, 0.5);
    auto idx_back = bm25_from_archive(decode_archive(encode_archive(to_archive(idx))));
    EXPECT_EQ(idx_back.docs(), idx.docs());
    EXPECT_EQ(idx_back.k1(), 1.5);
    EXPECT_EQ(idx_back.score_all(tokenize("cat dog")), idx.score_all(tokenize("cat dog")));
}

TEST(Archive, CorruptionIsAlwaysRejected)
{
    Vocab v = letter_vocab(2);
    const std::string good = encode_archive(to_archive(LmModel(v, tiny_config(4, 1, 1, 4), 3)));
    for (std::size_t i = 0; i < good.size(); ++i) {
        std::string bad = good;
        bad[i] = static_cast<char>(bad[i] ^ 0x01);
        EXPECT_THROW(decode_archive(bad), FormatError) << "byte " << i;
    }
    for (std::size_t len : {std::size_t{0}, std::size_t{3}, std::size_t{4}, std::size_t{11}, good.size() / 2,
                            good.size() - 1}) {
        EXPECT_THROW(decode_archive(good.substr(0, len)), FormatError) << "length " << len;
    }
    EXPECT_THROW(decode_archive(good.substr(0, good.size() - 1)), ChecksumError);
    EXPECT_THROW(decode_archive(good + "x"), ChecksumError);
}

TEST(Archive, WrongMagicNamesWhatWasFound)
{
    std::string bad = encode_archive(to_archive(EmbeddingTable::parse(*std::make_unique<std::istringstream>("a\t1"))));
    bad.replace(0, 4, "GIF8");
    try {
        decode_archive(bad);
        FAIL();
    } catch (const ChecksumError&) {
        FAIL() << "magic must be checked first";
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("GIF8"), std::string::npos) << e.what();
    }
}

TEST(Archive, KindMismatchAndIoErrors)
{
    Vocab v = letter_vocab(2);
    const Archive lm = to_archive(LmModel(v, tiny_config(4, 1, 1, 4), 3));
    EXPECT_THROW(crf_from_archive(lm), FormatError);
    EXPECT_THROW(save(LmModel(v, tiny_config(4, 1, 1, 4), 3), "/nonexistent-dir/x.efd"), IoError);
    EXPECT_THROW(load_lm("/nonexistent-dir/x.efd"), IoError);
    Archive dup{ArchiveKind::embeddings};
    dup.tensors = {{"t", Dtype::f32, {1}, {1.0}}, {"t", Dtype::f32, {1}, {2.0}}};
    EXPECT_THROW(encode_archive(dup), InvalidArgument);
    Archive nan{ArchiveKind::embeddings};
    nan.tensors = {{"t", Dtype::f32, {1}, {std::nan("")}}};
    EXPECT_THROW(encode_archive(nan), NumericFailure);
}
