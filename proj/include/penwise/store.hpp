#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "penwise/bm25.hpp"
#include "penwise/corrector.hpp"
#include "penwise/embeddings.hpp"
#include "penwise/error.hpp"
#include "penwise/lm.hpp"
#include "penwise/vocab.hpp"

namespace penwise {

// Layout (all integers little-endian; see docs/archive_format.md):
//   "EFD1" | u32 version | u8 kind
//   u32 n | n x str                       string table (vocabulary, phrases, terms)
//   u32 n | n x (str key, str value)      metadata
//   u32 n | n x tensor                    tensor = str name, u8 dtype, u8 rank,
//                                                  rank x u64 dim, payload
//   u64 FNV-1a of every preceding byte
// where str = u32 byte length + UTF-8 bytes, and payloads are f32 or u32.

inline constexpr std::string_view kArchiveMagic = "EFD1";
inline constexpr std::uint32_t kArchiveVersion = 1;

enum class ArchiveKind : std::uint8_t { lm = 1, crf = 2, null_detector = 3, embeddings = 4, bm25 = 5 };

inline std::string to_string(ArchiveKind k)
{
    switch (k) {
    case ArchiveKind::lm: return "lm";
    case ArchiveKind::crf: return "crf";
    case ArchiveKind::null_detector: return "null_detector";
    case ArchiveKind::embeddings: return "embeddings";
    case ArchiveKind::bm25: return "bm25";
    }
    return "unknown";
}

enum class Dtype : std::uint8_t { f32 = 1, u32 = 2 };

struct ArchiveTensor {
    std::string name;
    Dtype dtype = Dtype::f32;
    std::vector<std::uint64_t> shape;
    /// Payload widened to double for f32; for u32 the values are exact.
    std::vector<double> values;

    std::size_t count() const
    {
        std::size_t n = 1;
        for (auto d : shape) n *= static_cast<std::size_t>(d);
        return n;
    }
};

struct Archive {
    ArchiveKind kind = ArchiveKind::lm;
    std::uint32_t version = kArchiveVersion;
    Words strings;
    std::vector<std::pair<std::string, std::string>> metadata;
    std::vector<ArchiveTensor> tensors;

    const std::string& meta(const std::string& key) const
    {
        for (const auto& [k, v] : metadata) {
            if (k == key) return v;
        }
        throw FormatError("archive: missing metadata key '" + key + "'");
    }

    const ArchiveTensor& tensor(const std::string& name) const
    {
        for (const auto& t : tensors) {
            if (t.name == name) return t;
        }
        throw FormatError("archive: missing tensor '" + name + "'");
    }
};

inline std::uint64_t fnv1a64(std::string_view bytes)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

namespace detail {

class ByteWriter {
  public:
    void u8(std::uint8_t v) { m_out.push_back(static_cast<char>(v)); }
    void u32(std::uint32_t v)
    {
        for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v)
    {
        for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f32(float f)
    {
        std::uint32_t bits;
        std::memcpy(&bits, &f, sizeof bits);
        u32(bits);
    }
    void str(std::string_view s)
    {
        u32(static_cast<std::uint32_t>(s.size()));
        m_out.append(s);
    }
    void raw(std::string_view s) { m_out.append(s); }
    std::string& bytes() { return m_out; }

  private:
    std::string m_out;
};

class ByteReader {
  public:
    explicit ByteReader(std::string_view in) : m_in(in) {}

    std::uint8_t u8()
    {
        need(1);
        return static_cast<std::uint8_t>(m_in[m_pos++]);
    }
    std::uint32_t u32()
    {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
        return v;
    }
    std::uint64_t u64()
    {
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
        return v;
    }
    float f32()
    {
        const std::uint32_t bits = u32();
        float f;
        std::memcpy(&f, &bits, sizeof f);
        return f;
    }
    std::string str()
    {
        const std::uint32_t n = u32();
        need(n);
        std::string s(m_in.substr(m_pos, n));
        m_pos += n;
        return s;
    }
    bool done() const { return m_pos == m_in.size(); }
    std::size_t remaining() const { return m_in.size() - m_pos; }

  private:
    void need(std::size_t n) const
    {
        if (m_in.size() - m_pos < n) {
            throw FormatError("archive: truncated at byte " + std::to_string(m_pos));
        }
    }

    std::string_view m_in;
    std::size_t m_pos = 0;
};

inline std::string printable(std::string_view s)
{
    std::string out;
    for (unsigned char c : s) {
        if (c >= 0x20 && c < 0x7f) {
            out.push_back(static_cast<char>(c));
        } else {
            char buf[5];
            std::snprintf(buf, sizeof buf, "\\x%02x", c);
            out += buf;
        }
    }
    return out;
}

inline std::string fmt_double(double x)
{
    std::ostringstream os;
    os.precision(17);
    os << x;
    return os.str();
}

inline double parse_double(const Archive& a, const std::string& key)
{
    const auto& v = a.meta(key);
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw FormatError("archive: metadata '" + key + "' is not a number: '" + v + "'");
    }
}

inline std::size_t parse_size(const Archive& a, const std::string& key)
{
    const auto& v = a.meta(key);
    try {
        std::size_t used = 0;
        const unsigned long long n = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return static_cast<std::size_t>(n);
    } catch (const std::exception&) {
        throw FormatError("archive: metadata '" + key + "' is not a count: '" + v + "'");
    }
}

}  // namespace detail

inline std::string encode_archive(const Archive& a)
{
    detail::ByteWriter w;
    w.raw(kArchiveMagic);
    w.u32(a.version);
    w.u8(static_cast<std::uint8_t>(a.kind));
    w.u32(static_cast<std::uint32_t>(a.strings.size()));
    for (const auto& s : a.strings) w.str(s);
    w.u32(static_cast<std::uint32_t>(a.metadata.size()));
    for (const auto& [k, v] : a.metadata) {
        w.str(k);
        w.str(v);
    }
    w.u32(static_cast<std::uint32_t>(a.tensors.size()));
    std::map<std::string, int> seen;
    for (const auto& t : a.tensors) {
        if (seen[t.name]++) throw InvalidArgument("archive: duplicate tensor '" + t.name + "'");
        if (t.values.size() != t.count()) throw InvalidArgument("archive: tensor '" + t.name + "' size mismatch");
        w.str(t.name);
        w.u8(static_cast<std::uint8_t>(t.dtype));
        w.u8(static_cast<std::uint8_t>(t.shape.size()));
        for (auto d : t.shape) w.u64(d);
        for (double x : t.values) {
            if (!std::isfinite(x)) throw NumericFailure("archive: non-finite value in tensor '" + t.name + "'");
            if (t.dtype == Dtype::f32) {
                w.f32(static_cast<float>(x));
            } else {
                w.u32(static_cast<std::uint32_t>(x));
            }
        }
    }
    const std::uint64_t sum = fnv1a64(w.bytes());
    w.u64(sum);
    return std::move(w.bytes());
}

/// Validates magic, then checksum, then structure. No partial object is
/// ever returned.
inline Archive decode_archive(std::string_view bytes)
{
    if (bytes.size() < kArchiveMagic.size() || bytes.substr(0, kArchiveMagic.size()) != kArchiveMagic) {
        throw FormatError("archive: bad magic '" + detail::printable(bytes.substr(0, kArchiveMagic.size()))
                          + "', expected '" + std::string(kArchiveMagic) + "'");
    }
    if (bytes.size() < kArchiveMagic.size() + 8) {
        throw ChecksumError("archive: too short to carry a checksum (" + std::to_string(bytes.size()) + " bytes)");
    }
    const std::string_view body = bytes.substr(0, bytes.size() - 8);
    detail::ByteReader tail(bytes.substr(bytes.size() - 8));
    const std::uint64_t stored = tail.u64();
    if (stored != fnv1a64(body)) {
        throw ChecksumError("archive: checksum mismatch (file truncated or corrupted)");
    }
    detail::ByteReader r(body.substr(kArchiveMagic.size()));
    Archive a;
    a.version = r.u32();
    if (a.version != kArchiveVersion) {
        throw FormatError("archive: unsupported format version " + std::to_string(a.version));
    }
    const std::uint8_t kind = r.u8();
    if (kind < 1 || kind > 5) throw FormatError("archive: unknown model kind " + std::to_string(kind));
    a.kind = static_cast<ArchiveKind>(kind);
    for (std::uint32_t n = r.u32(), i = 0; i < n; ++i) a.strings.push_back(r.str());
    for (std::uint32_t n = r.u32(), i = 0; i < n; ++i) {
        auto k = r.str();
        a.metadata.emplace_back(std::move(k), r.str());
    }
    std::map<std::string, int> seen;
    for (std::uint32_t n = r.u32(), i = 0; i < n; ++i) {
        ArchiveTensor t;
        t.name = r.str();
        if (seen[t.name]++) throw FormatError("archive: duplicate tensor '" + t.name + "'");
        const std::uint8_t dt = r.u8();
        if (dt != 1 && dt != 2) throw FormatError("archive: tensor '" + t.name + "' has unknown dtype");
        t.dtype = static_cast<Dtype>(dt);
        const std::uint8_t rank = r.u8();
        std::uint64_t count = 1;
        for (std::uint8_t k = 0; k < rank; ++k) {
            t.shape.push_back(r.u64());
            count *= t.shape.back();
        }
        if (count > r.remaining() / 4) {
            throw FormatError("archive: tensor '" + t.name + "' declares more data than the file holds");
        }
        t.values.resize(static_cast<std::size_t>(count));
        for (auto& x : t.values) {
            x = t.dtype == Dtype::f32 ? static_cast<double>(r.f32()) : static_cast<double>(r.u32());
        }
        a.tensors.push_back(std::move(t));
    }
    if (!r.done()) throw FormatError("archive: trailing bytes after the tensor table");
    return a;
}

inline void write_file_atomic(const std::string& path, std::string_view bytes)
{
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + path);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("short write to " + path);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw IoError("cannot write " + path);
    }
}

inline std::string read_file(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void save_archive(const Archive& a, const std::string& path) { write_file_atomic(path, encode_archive(a)); }
inline Archive load_archive(const std::string& path) { return decode_archive(read_file(path)); }

// ---------------------------------------------------------------------------
// Model conversions

namespace detail {

inline ArchiveTensor pack(const std::string& name, const Tensor& t)
{
    ArchiveTensor out{name, Dtype::f32, {}, {t.data().begin(), t.data().end()}};
    for (auto d : t.shape()) out.shape.push_back(d);
    return out;
}

inline void pack_params(Archive& a, const ParamList& params)
{
    for (const auto& [name, t] : params) a.tensors.push_back(pack(name, t));
}

/// Copies every named parameter out of the archive; the archive must hold
/// exactly these names with matching shapes.
inline void unpack_params(const Archive& a, const ParamList& params)
{
    if (a.tensors.size() != params.size()) {
        throw FormatError("archive: expected " + std::to_string(params.size()) + " tensors, found "
                          + std::to_string(a.tensors.size()));
    }
    for (auto [name, t] : params) {
        const auto& src = a.tensor(name);
        std::vector<std::uint64_t> want(t.shape().begin(), t.shape().end());
        if (src.shape != want || src.dtype != Dtype::f32) {
            throw FormatError("archive: tensor '" + name + "' has the wrong shape or dtype");
        }
        std::copy(src.values.begin(), src.values.end(), t.mutable_data().begin());
    }
}

inline void put_encoder(Archive& a, const EncoderConfig& c)
{
    a.metadata.push_back({"encoder.d_model", std::to_string(c.d_model)});
    a.metadata.push_back({"encoder.layers", std::to_string(c.layers)});
    a.metadata.push_back({"encoder.heads", std::to_string(c.heads)});
    a.metadata.push_back({"encoder.max_len", std::to_string(c.max_len)});
    a.metadata.push_back({"encoder.ffn_mult", std::to_string(c.ffn_mult)});
}

inline EncoderConfig get_encoder(const Archive& a)
{
    EncoderConfig c;
    c.d_model = parse_size(a, "encoder.d_model");
    c.layers = parse_size(a, "encoder.layers");
    c.heads = parse_size(a, "encoder.heads");
    c.max_len = parse_size(a, "encoder.max_len");
    c.ffn_mult = parse_size(a, "encoder.ffn_mult");
    try {
        c.validate();
    } catch (const InvalidArgument& e) {
        throw FormatError(std::string("archive: ") + e.what());
    }
    return c;
}

inline Vocab get_vocab(const Archive& a)
{
    if (a.strings.size() < kSpecialNames.size()) throw FormatError("archive: vocabulary misses special tokens");
    for (std::size_t i = 0; i < kSpecialNames.size(); ++i) {
        if (a.strings[i] != kSpecialNames[i]) {
            throw FormatError("archive: vocabulary slot " + std::to_string(i) + " holds '" + a.strings[i]
                              + "' instead of " + std::string(kSpecialNames[i]));
        }
    }
    Vocab v;
    for (std::size_t i = kSpecialNames.size(); i < a.strings.size(); ++i) {
        if (v.add(a.strings[i]) != i) throw FormatError("archive: duplicate vocabulary entry '" + a.strings[i] + "'");
    }
    return v;
}

inline void expect_kind(const Archive& a, ArchiveKind want)
{
    if (a.kind != want) {
        throw FormatError("archive: holds a " + to_string(a.kind) + " model, expected " + to_string(want));
    }
}

}  // namespace detail

inline Archive to_archive(const LmModel& m)
{
    Archive a{ArchiveKind::lm};
    a.strings = m.vocab().tokens();
    detail::put_encoder(a, m.config());
    detail::pack_params(a, m.parameters());
    return a;
}

inline LmModel lm_from_archive(const Archive& a)
{
    detail::expect_kind(a, ArchiveKind::lm);
    LmModel m(detail::get_vocab(a), detail::get_encoder(a), 0);
    detail::unpack_params(a, m.parameters());
    return m;
}

inline Archive to_archive(const CrfModel& m)
{
    Archive a{ArchiveKind::crf};
    a.strings = m.vocab().tokens();
    detail::put_encoder(a, m.encoder().config());
    a.metadata.push_back({"crf.rank", std::to_string(m.rank())});
    detail::pack_params(a, m.parameters());
    return a;
}

inline CrfModel crf_from_archive(const Archive& a)
{
    detail::expect_kind(a, ArchiveKind::crf);
    const Vocab v = detail::get_vocab(a);
    const std::size_t rank = detail::parse_size(a, "crf.rank");
    if (rank == 0 || rank > v.size()) throw FormatError("archive: crf.rank out of range");
    CrfModel m(v, detail::get_encoder(a), rank, 0);
    detail::unpack_params(a, m.parameters());
    return m;
}

inline Archive to_archive(const NullDetectorModel& m)
{
    Archive a{ArchiveKind::null_detector};
    a.strings = m.mlm.vocab().tokens();
    detail::put_encoder(a, m.mlm.encoder().config());
    a.metadata.push_back({"null.insert_rate", detail::fmt_double(m.insert_rate)});
    a.metadata.push_back({"null.mask_rate", detail::fmt_double(m.mask_rate)});
    detail::pack_params(a, m.mlm.parameters());
    return a;
}

inline NullDetectorModel null_detector_from_archive(const Archive& a)
{
    detail::expect_kind(a, ArchiveKind::null_detector);
    NullDetectorModel m{MaskedLm(detail::get_vocab(a), detail::get_encoder(a), 0)};
    m.insert_rate = detail::parse_double(a, "null.insert_rate");
    m.mask_rate = detail::parse_double(a, "null.mask_rate");
    detail::unpack_params(a, m.mlm.parameters());
    return m;
}

inline Archive to_archive(const EmbeddingTable& e)
{
    Archive a{ArchiveKind::embeddings};
    a.strings = e.phrases();
    ArchiveTensor t{"vectors", Dtype::f32, {e.size(), e.dim()}, {}};
    for (std::size_t i = 0; i < e.size(); ++i) {
        t.values.insert(t.values.end(), e.vector(i).begin(), e.vector(i).end());
    }
    a.tensors.push_back(std::move(t));
    return a;
}

inline EmbeddingTable embeddings_from_archive(const Archive& a)
{
    detail::expect_kind(a, ArchiveKind::embeddings);
    const auto& t = a.tensor("vectors");
    if (t.shape.size() != 2 || t.shape[0] != a.strings.size() || t.dtype != Dtype::f32) {
        throw FormatError("archive: embedding matrix does not match the phrase list");
    }
    const auto d = static_cast<std::size_t>(t.shape[1]);
    EmbeddingTable e(d);
    for (std::size_t i = 0; i < a.strings.size(); ++i) {
        e.add(a.strings[i], {t.values.begin() + static_cast<std::ptrdiff_t>(i * d),
                             t.values.begin() + static_cast<std::ptrdiff_t>((i + 1) * d)});
    }
    return e;
}

/// Documents are stored as term ids into the string table, plus lengths.
inline Archive to_archive(const Bm25Index& idx)
{
    Archive a{ArchiveKind::bm25};
    std::map<std::string, std::size_t> ids;
    ArchiveTensor terms{"doc_terms", Dtype::u32, {}, {}}, lengths{"doc_lengths", Dtype::u32, {idx.size()}, {}};
    for (const auto& doc : idx.docs()) {
        lengths.values.push_back(static_cast<double>(doc.size()));
        for (const auto& w : doc) {
            auto [it, fresh] = ids.emplace(w, a.strings.size());
            if (fresh) a.strings.push_back(w);
            terms.values.push_back(static_cast<double>(it->second));
        }
    }
    terms.shape = {terms.values.size()};
    a.metadata.push_back({"bm25.k1", detail::fmt_double(idx.k1())});
    a.metadata.push_back({"bm25.b", detail::fmt_double(idx.b())});
    a.tensors.push_back(std::move(terms));
    a.tensors.push_back(std::move(lengths));
    return a;
}

inline Bm25Index bm25_from_archive(const Archive& a)
{
    detail::expect_kind(a, ArchiveKind::bm25);
    const auto& terms = a.tensor("doc_terms");
    const auto& lengths = a.tensor("doc_lengths");
    std::vector<Words> docs;
    std::size_t at = 0;
    for (double len : lengths.values) {
        Words doc;
        for (std::size_t k = 0; k < static_cast<std::size_t>(len); ++k, ++at) {
            if (at >= terms.values.size() || terms.values[at] >= static_cast<double>(a.strings.size())) {
                throw FormatError("archive: bm25 document table is inconsistent");
            }
            doc.push_back(a.strings[static_cast<std::size_t>(terms.values[at])]);
        }
        docs.push_back(std::move(doc));
    }
    if (at != terms.values.size()) throw FormatError("archive: bm25 document table is inconsistent");
    return Bm25Index(std::move(docs), detail::parse_double(a, "bm25.k1"), detail::parse_double(a, "bm25.b"));
}

template <typename T>
void save(const T& object, const std::string& path)
{
    save_archive(to_archive(object), path);
}

inline LmModel load_lm(const std::string& path) { return lm_from_archive(load_archive(path)); }
inline CrfModel load_crf(const std::string& path) { return crf_from_archive(load_archive(path)); }
inline NullDetectorModel load_null_detector(const std::string& path)
{
    return null_detector_from_archive(load_archive(path));
}
inline EmbeddingTable load_embeddings_archive(const std::string& path)
{
    return embeddings_from_archive(load_archive(path));
}
inline Bm25Index load_bm25(const std::string& path) { return bm25_from_archive(load_archive(path)); }

}  // namespace penwise
