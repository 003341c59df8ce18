#pragma once

#include "clipcap/errors.hpp"
#include "clipcap/rng.hpp"

#include <concepts>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace clipcap::text {

using Tokens = std::vector<std::string>;

// Lowercases, strips ASCII punctuation and collapses whitespace runs to a
// single space. Throws EmptyText when nothing is left.
std::string normalize(std::string_view raw);

std::string join(std::span<const std::string> tokens);

// Normalized caption text and its whitespace tokens; tokens are never empty
// and join back to text exactly.
class Caption {
public:
    static Caption parse(std::string_view raw);
    static Caption from_tokens(Tokens tokens);

    const std::string& text() const noexcept { return text_; }
    const Tokens& tokens() const noexcept { return tokens_; }
    std::size_t size() const noexcept { return tokens_.size(); }

    friend bool operator==(const Caption& a, const Caption& b) { return a.text_ == b.text_; }

private:
    Caption(std::string text, Tokens tokens) : text_(std::move(text)), tokens_(std::move(tokens)) {}

    std::string text_;
    Tokens tokens_;
};

class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kUnk = 3;
    static constexpr int kNumSpecial = 4;

    // Words with frequency >= min_freq, ordered by descending frequency with
    // lexicographic tie-breaking, after the four special tokens.
    static Vocabulary build(std::span<const Caption> corpus, int min_freq);
    // Rebuilds from a stored token list (specials included, in id order).
    static Vocabulary from_tokens(std::vector<std::string> tokens, std::vector<long long> counts, int min_freq);

    int size() const noexcept { return static_cast<int>(tokens_.size()); }
    int id(const std::string& token) const;  // kUnk when absent
    bool contains(const std::string& token) const { return index_.count(token) != 0; }
    const std::string& token(int id) const;

    std::vector<int> encode(const Caption& caption) const;
    // Stops at EOS, skips PAD/BOS.
    std::string decode(std::span<const int> ids) const;

    const std::vector<std::string>& tokens() const noexcept { return tokens_; }
    const std::vector<long long>& counts() const noexcept { return counts_; }
    // Non-special entries; the pool insert/swap corruptions draw from.
    std::span<const std::string> words() const noexcept {
        return std::span<const std::string>(tokens_).subspan(kNumSpecial);
    }
    int min_freq() const noexcept { return min_freq_; }

    friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
        return a.tokens_ == b.tokens_ && a.counts_ == b.counts_ && a.min_freq_ == b.min_freq_;
    }

private:
    std::vector<std::string> tokens_;
    std::vector<long long> counts_;  // 0 for specials
    std::unordered_map<std::string, int> index_;
    int min_freq_ = 1;
};

struct NegativeGenConfig {
    int n_max_gram = 3;
    int n_max_repeat = 3;
    int n_max_tokens = 3;
    std::uint64_t rng_seed = 0;

    void validate() const;
};

enum class NegativeOp { repeat, remove, insert, swap, shuffle };

std::string_view to_string(NegativeOp op);
NegativeOp negative_op_from_string(std::string_view name);

// Anything that can produce inclusive uniform integers like Python's
// random.randint. Rng satisfies it; tests script exact draw sequences.
template <class S>
concept RandomSource = requires(S& s, std::int64_t lo, std::int64_t hi) {
    { s.randint(lo, hi) } -> std::convertible_to<std::int64_t>;
};

namespace detail {
inline std::size_t draw(RandomSource auto& src, std::size_t lo, std::size_t hi) {
    return static_cast<std::size_t>(src.randint(static_cast<std::int64_t>(lo), static_cast<std::int64_t>(hi)));
}
}  // namespace detail

// The five corruptions below mirror the reference negative-text generator
// draw for draw, including its index bounds.

// Duplicates one random n-gram at 1..n_max_repeat random insertion points
// (0..len inclusive, so appending is possible).
Tokens repeat_ngram(Tokens tokens, int n_max_gram, int n_max_repeat, RandomSource auto& src) {
    const std::size_t n_gram = detail::draw(src, 1, static_cast<std::size_t>(n_max_gram));
    const std::size_t repeat_idx = detail::draw(src, 0, tokens.size() - n_gram);
    const Tokens repeated(tokens.begin() + static_cast<std::ptrdiff_t>(repeat_idx),
                          tokens.begin() + static_cast<std::ptrdiff_t>(repeat_idx + n_gram));
    const std::size_t n_repeat = detail::draw(src, 1, static_cast<std::size_t>(n_max_repeat));
    for (std::size_t r = 0; r < n_repeat; ++r) {
        const std::size_t insert_idx = detail::draw(src, 0, tokens.size());
        tokens.insert(tokens.begin() + static_cast<std::ptrdiff_t>(insert_idx), repeated.begin(), repeated.end());
    }
    return tokens;
}

Tokens remove_ngram(Tokens tokens, int n_max_gram, RandomSource auto& src) {
    const std::size_t n_gram = detail::draw(src, 1, static_cast<std::size_t>(n_max_gram));
    const std::size_t remove_idx = detail::draw(src, 0, tokens.size() - n_gram);
    tokens.erase(tokens.begin() + static_cast<std::ptrdiff_t>(remove_idx),
                 tokens.begin() + static_cast<std::ptrdiff_t>(remove_idx + n_gram));
    return tokens;
}

// Insertion points range over 0..len-1: a token is never appended at the end.
Tokens insert_tokens(Tokens tokens, std::span<const std::string> vocab, int n_max_tokens, RandomSource auto& src) {
    const std::size_t n_insert = detail::draw(src, 1, static_cast<std::size_t>(n_max_tokens));
    for (std::size_t r = 0; r < n_insert; ++r) {
        const std::size_t insert_idx = detail::draw(src, 0, tokens.size() - 1);
        const std::string& tok = vocab[detail::draw(src, 0, vocab.size() - 1)];
        tokens.insert(tokens.begin() + static_cast<std::ptrdiff_t>(insert_idx), tok);
    }
    return tokens;
}

// Replacement draws are rejected until they differ from the replaced token and
// from the original token at that position, so revisiting a position cannot
// undo an earlier swap. The caller guarantees vocab holds at least three words.
Tokens swap_tokens(Tokens tokens, std::span<const std::string> vocab, int n_max_tokens, RandomSource auto& src) {
    const Tokens original = tokens;
    const std::size_t n_swap = detail::draw(src, 1, static_cast<std::size_t>(n_max_tokens));
    for (std::size_t r = 0; r < n_swap; ++r) {
        const std::size_t idx = detail::draw(src, 0, tokens.size() - 1);
        const std::string* tok = &vocab[detail::draw(src, 0, vocab.size() - 1)];
        while (*tok == tokens[idx] || *tok == original[idx]) tok = &vocab[detail::draw(src, 0, vocab.size() - 1)];
        tokens[idx] = *tok;
    }
    return tokens;
}

// Fisher-Yates from the back, the same draw order as random.shuffle.
Tokens shuffle_tokens(Tokens tokens, RandomSource auto& src) {
    for (std::size_t i = tokens.size(); i-- > 1;) {
        const std::size_t j = detail::draw(src, 0, i);
        std::swap(tokens[i], tokens[j]);
    }
    return tokens;
}

Tokens apply_negative_op(NegativeOp op, Tokens tokens, std::span<const std::string> vocab,
                         const NegativeGenConfig& cfg, RandomSource auto& src) {
    switch (op) {
        case NegativeOp::repeat: return repeat_ngram(std::move(tokens), cfg.n_max_gram, cfg.n_max_repeat, src);
        case NegativeOp::remove: return remove_ngram(std::move(tokens), cfg.n_max_gram, src);
        case NegativeOp::insert: return insert_tokens(std::move(tokens), vocab, cfg.n_max_tokens, src);
        case NegativeOp::swap: return swap_tokens(std::move(tokens), vocab, cfg.n_max_tokens, src);
        case NegativeOp::shuffle: return shuffle_tokens(std::move(tokens), src);
    }
    return tokens;
}

struct NegativeSample {
    Caption caption;
    NegativeOp op;
};

// Picks one of the five corruptions uniformly and applies it. Throws
// CaptionTooShort when the caption has fewer than n_max_gram + 1 tokens.
NegativeSample generate_negative(const Caption& caption, const Vocabulary& vocab, const NegativeGenConfig& cfg,
                                 Rng& rng);

}  // namespace clipcap::text
