#pragma once

#include <string>
#include <vector>

#include "penwise/lm.hpp"
#include "penwise/vocab.hpp"

namespace penwise::testing {

/// Vocabulary of the specials plus single-letter words "a", "b", ...
inline Vocab letter_vocab(std::size_t words)
{
    Vocab v;
    for (std::size_t i = 0; i < words; ++i) {
        v.add(std::string(1, static_cast<char>('a' + i)));
    }
    return v;
}

inline EncoderConfig tiny_config(std::size_t d = 8, std::size_t layers = 1, std::size_t heads = 2,
                                 std::size_t max_len = 16)
{
    EncoderConfig cfg;
    cfg.d_model = d;
    cfg.layers = layers;
    cfg.heads = heads;
    cfg.max_len = max_len;
    cfg.ffn_mult = 2;
    return cfg;
}

inline TokenSeq ids(const Vocab& v, const std::string& text) { return v.encode(tokenize(text)); }

/// Forces every final representation to the constant row `value` by zeroing
/// the last layer-norm gain and setting its bias.
inline void pin_hidden_states(LmModel& model, const std::vector<double>& value)
{
    auto params = model.encoder().parameters();
    const std::string last = "layer" + std::to_string(model.config().layers - 1) + ".";
    for (auto& [name, t] : params) {
        if (name == last + "ln2_gain") {
            for (auto& x : t.mutable_data()) x = 0.0;
        }
        if (name == last + "ln2_bias") {
            std::copy(value.begin(), value.end(), t.mutable_data().begin());
        }
    }
}

}  // namespace penwise::testing
