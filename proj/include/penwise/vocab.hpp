#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "penwise/error.hpp"

namespace penwise {

using TokenId = std::uint32_t;
using TokenSeq = std::vector<TokenId>;
using Words = std::vector<std::string>;

enum class Special : std::uint8_t { pad, sep, cls, mask, blank, ans, null, unk };

inline constexpr std::array<std::string_view, 8> kSpecialNames = {
    "[PAD]", "[SEP]", "[CLS]", "[MASK]", "[blank]", "[ans]", "[null]", "[UNK]",
};

enum class TokenizerKind : std::uint8_t { whitespace, character };

inline std::optional<Special> special_from_name(std::string_view name)
{
    for (std::size_t i = 0; i < kSpecialNames.size(); ++i) {
        if (kSpecialNames[i] == name) {
            return static_cast<Special>(i);
        }
    }
    return std::nullopt;
}

/// Splits text into tokens. Whitespace mode splits on runs of spaces/tabs;
/// character mode yields UTF-8 code points but keeps bracketed special
/// names such as "[blank]" whole.
inline Words tokenize(std::string_view text, TokenizerKind kind = TokenizerKind::whitespace)
{
    Words out;
    if (kind == TokenizerKind::whitespace) {
        std::size_t i = 0;
        while (i < text.size()) {
            while (i < text.size() && (text[i] == ' ' || text[i] == '\t' || text[i] == '\n' || text[i] == '\r')) {
                ++i;
            }
            std::size_t j = i;
            while (j < text.size() && !(text[j] == ' ' || text[j] == '\t' || text[j] == '\n' || text[j] == '\r')) {
                ++j;
            }
            if (j > i) {
                out.emplace_back(text.substr(i, j - i));
            }
            i = j;
        }
        return out;
    }
    std::size_t i = 0;
    while (i < text.size()) {
        if (text[i] == '[') {
            const auto close = text.find(']', i);
            if (close != std::string_view::npos && special_from_name(text.substr(i, close - i + 1))) {
                out.emplace_back(text.substr(i, close - i + 1));
                i = close + 1;
                continue;
            }
        }
        const auto lead = static_cast<unsigned char>(text[i]);
        std::size_t len = 1;
        if (lead >= 0xF0) {
            len = 4;
        } else if (lead >= 0xE0) {
            len = 3;
        } else if (lead >= 0xC0) {
            len = 2;
        }
        len = std::min(len, text.size() - i);
        if (text[i] != ' ' && text[i] != '\t' && text[i] != '\n' && text[i] != '\r') {
            out.emplace_back(text.substr(i, len));
        }
        i += len;
    }
    return out;
}

inline std::string detokenize(const Words& words, TokenizerKind kind = TokenizerKind::whitespace)
{
    std::string out;
    for (std::size_t i = 0; i < words.size(); ++i) {
        if (i > 0 && kind == TokenizerKind::whitespace) {
            out += ' ';
        }
        out += words[i];
    }
    return out;
}

/// Token inventory. The special tokens always occupy ids 0..7 in the order
/// of kSpecialNames; ordinary tokens follow in insertion order.
class Vocab {
  public:
    Vocab()
    {
        for (auto name : kSpecialNames) {
            add(name);
        }
    }

    static Vocab from_words(const Words& words)
    {
        Vocab v;
        for (const auto& w : words) {
            v.add(w);
        }
        return v;
    }

    /// Vocabulary over every token of the given sentences, first-seen order.
    static Vocab from_corpus(const std::vector<Words>& corpus)
    {
        Vocab v;
        for (const auto& sentence : corpus) {
            for (const auto& w : sentence) {
                v.add(w);
            }
        }
        return v;
    }

    TokenId add(std::string_view token)
    {
        if (auto it = m_index.find(std::string(token)); it != m_index.end()) {
            return it->second;
        }
        const auto id = static_cast<TokenId>(m_tokens.size());
        m_tokens.emplace_back(token);
        m_index.emplace(m_tokens.back(), id);
        return id;
    }

    std::optional<TokenId> find(std::string_view token) const
    {
        if (auto it = m_index.find(std::string(token)); it != m_index.end()) {
            return it->second;
        }
        return std::nullopt;
    }

    TokenId id(std::string_view token) const
    {
        if (auto found = find(token)) {
            return *found;
        }
        throw LookupError("vocab: unknown token '" + std::string(token) + "'");
    }

    const std::string& token(TokenId id) const
    {
        if (id >= m_tokens.size()) {
            throw InvalidArgument("vocab: id " + std::to_string(id) + " out of range");
        }
        return m_tokens[id];
    }

    static constexpr TokenId special(Special s) { return static_cast<TokenId>(s); }
    static constexpr bool is_special(TokenId id) { return id < kSpecialNames.size(); }

    std::size_t size() const { return m_tokens.size(); }
    const std::vector<std::string>& tokens() const { return m_tokens; }

    /// Maps words to ids; words outside the vocabulary become [UNK].
    TokenSeq encode(const Words& words) const
    {
        TokenSeq out;
        out.reserve(words.size());
        for (const auto& w : words) {
            auto found = find(w);
            out.push_back(found ? *found : special(Special::unk));
        }
        return out;
    }

    Words decode(const TokenSeq& ids) const
    {
        Words out;
        out.reserve(ids.size());
        for (auto id : ids) {
            out.push_back(token(id));
        }
        return out;
    }

    /// Text form: a "#specials" header block listing the special tokens,
    /// then "#tokens" and one ordinary token per line.
    std::string serialize() const
    {
        std::string out = "#specials\n";
        for (std::size_t i = 0; i < kSpecialNames.size(); ++i) {
            out += m_tokens[i] + "\n";
        }
        out += "#tokens\n";
        for (std::size_t i = kSpecialNames.size(); i < m_tokens.size(); ++i) {
            out += m_tokens[i] + "\n";
        }
        return out;
    }

    static Vocab parse(std::string_view text)
    {
        std::istringstream in{std::string(text)};
        std::string line;
        int section = 0;  // 0 = before header, 1 = specials, 2 = tokens
        std::size_t line_no = 0;
        std::vector<std::string> specials;
        Vocab v;
        while (std::getline(in, line)) {
            ++line_no;
            if (!line.empty() && line.back() == '\r') {
                line.pop_back();
            }
            if (line == "#specials") {
                section = 1;
                continue;
            }
            if (line == "#tokens") {
                if (section != 1) {
                    throw ParseError("vocab line " + std::to_string(line_no) + ": #tokens before #specials");
                }
                section = 2;
                continue;
            }
            if (line.empty()) {
                continue;
            }
            if (section == 0) {
                throw ParseError("vocab line " + std::to_string(line_no) + ": expected #specials header");
            }
            if (section == 1) {
                if (!special_from_name(line)) {
                    throw ParseError("vocab line " + std::to_string(line_no) + ": '" + line + "' is not a special token");
                }
                specials.push_back(line);
                continue;
            }
            if (special_from_name(line)) {
                throw ParseError("vocab line " + std::to_string(line_no) + ": special '" + line
                                 + "' outside the header block");
            }
            if (v.find(line)) {
                throw ParseError("vocab line " + std::to_string(line_no) + ": duplicate token '" + line + "'");
            }
            v.add(line);
        }
        if (specials.size() != kSpecialNames.size()) {
            throw ParseError("vocab: header must declare each of the " + std::to_string(kSpecialNames.size())
                             + " special tokens exactly once");
        }
        for (std::size_t i = 0; i < specials.size(); ++i) {
            if (specials[i] != kSpecialNames[i]) {
                throw ParseError("vocab: special #" + std::to_string(i) + " must be " + std::string(kSpecialNames[i]));
            }
        }
        return v;
    }

    void save(const std::string& path) const
    {
        std::ofstream out(path, std::ios::binary);
        if (!out) {
            throw IoError("vocab: cannot write " + path);
        }
        out << serialize();
    }

    static Vocab load(const std::string& path)
    {
        std::ifstream in(path, std::ios::binary);
        if (!in) {
            throw IoError("vocab: cannot read " + path);
        }
        std::stringstream buf;
        buf << in.rdbuf();
        return parse(buf.str());
    }

    bool operator==(const Vocab& other) const { return m_tokens == other.m_tokens; }

  private:
    std::vector<std::string> m_tokens;
    std::unordered_map<std::string, TokenId> m_index;
};

}  // namespace penwise
