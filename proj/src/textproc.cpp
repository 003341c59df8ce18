#include "clipcap/textproc.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <sstream>

namespace clipcap::text {

std::string normalize(std::string_view raw) {
    std::string out;
    out.reserve(raw.size());
    bool pending_space = false;
    for (char ch : raw) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isspace(c)) {
            pending_space = !out.empty();
            continue;
        }
        if (std::ispunct(c)) continue;
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        out.push_back(static_cast<char>(std::tolower(c)));
    }
    if (out.empty()) throw EmptyText("nothing left after normalizing '" + std::string(raw) + "'");
    return out;
}

std::string join(std::span<const std::string> tokens) {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) out.push_back(' ');
        out += tokens[i];
    }
    return out;
}

Caption Caption::parse(std::string_view raw) {
    std::string text = normalize(raw);
    Tokens tokens;
    std::istringstream in(text);
    for (std::string w; in >> w;) tokens.push_back(std::move(w));
    return Caption(std::move(text), std::move(tokens));
}

Caption Caption::from_tokens(Tokens tokens) {
    if (tokens.empty()) throw EmptyText("caption has no tokens");
    std::string text = join(tokens);
    // Tokens may come from corrupted or generated sequences; re-normalize so
    // the invariants hold even for odd inputs.
    if (normalize(text) != text) return parse(text);
    return Caption(std::move(text), std::move(tokens));
}

Vocabulary Vocabulary::build(std::span<const Caption> corpus, int min_freq) {
    if (corpus.empty()) throw EmptyCorpus("cannot build a vocabulary from an empty corpus");
    std::map<std::string, long long> freq;
    for (const auto& c : corpus) {
        for (const auto& w : c.tokens()) ++freq[w];
    }
    std::vector<std::pair<std::string, long long>> kept;
    for (auto& [w, n] : freq) {
        if (n >= min_freq) kept.emplace_back(w, n);
    }
    std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
        return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    std::vector<std::string> tokens{"<pad>", "<bos>", "<eos>", "<unk>"};
    std::vector<long long> counts(kNumSpecial, 0);
    for (auto& [w, n] : kept) {
        tokens.push_back(w);
        counts.push_back(n);
    }
    return from_tokens(std::move(tokens), std::move(counts), min_freq);
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens, std::vector<long long> counts, int min_freq) {
    if (tokens.size() < kNumSpecial || counts.size() != tokens.size()) {
        throw ParseError("vocabulary needs the four special tokens and one count per token");
    }
    Vocabulary v;
    v.tokens_ = std::move(tokens);
    v.counts_ = std::move(counts);
    v.min_freq_ = min_freq;
    for (int i = 0; i < static_cast<int>(v.tokens_.size()); ++i) {
        if (!v.index_.emplace(v.tokens_[static_cast<std::size_t>(i)], i).second) {
            throw ParseError("duplicate vocabulary token '" + v.tokens_[static_cast<std::size_t>(i)] + "'");
        }
    }
    return v;
}

int Vocabulary::id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
    if (id < 0 || id >= size()) throw std::out_of_range("token id out of range");
    return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(const Caption& caption) const {
    std::vector<int> ids;
    ids.reserve(caption.size());
    for (const auto& w : caption.tokens()) ids.push_back(id(w));
    return ids;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
    Tokens words;
    for (int id : ids) {
        if (id == kEos) break;
        if (id == kPad || id == kBos) continue;
        words.push_back(token(id));
    }
    return join(words);
}

void NegativeGenConfig::validate() const {
    if (n_max_gram < 1 || n_max_repeat < 1 || n_max_tokens < 1) {
        throw ConfigInvalid("negative generator maxima must all be >= 1");
    }
}

std::string_view to_string(NegativeOp op) {
    switch (op) {
        case NegativeOp::repeat: return "repeat";
        case NegativeOp::remove: return "remove";
        case NegativeOp::insert: return "insert";
        case NegativeOp::swap: return "swap";
        case NegativeOp::shuffle: return "shuffle";
    }
    return "unknown";
}

NegativeOp negative_op_from_string(std::string_view name) {
    for (auto op : {NegativeOp::repeat, NegativeOp::remove, NegativeOp::insert, NegativeOp::swap,
                    NegativeOp::shuffle}) {
        if (to_string(op) == name) return op;
    }
    throw ParseError("unknown negative operation '" + std::string(name) + "'");
}

NegativeSample generate_negative(const Caption& caption, const Vocabulary& vocab, const NegativeGenConfig& cfg,
                                 Rng& rng) {
    cfg.validate();
    if (caption.size() < static_cast<std::size_t>(cfg.n_max_gram) + 1) {
        throw CaptionTooShort("caption '" + caption.text() + "' has " + std::to_string(caption.size()) +
                              " tokens; need at least " + std::to_string(cfg.n_max_gram + 1));
    }
    if (vocab.words().size() < 3) throw EmptyCorpus("negative generation needs at least three vocabulary words");
    static constexpr NegativeOp kOps[] = {NegativeOp::repeat, NegativeOp::remove, NegativeOp::insert,
                                          NegativeOp::swap, NegativeOp::shuffle};
    const NegativeOp op = kOps[rng.randint(0, 4)];
    Tokens out = apply_negative_op(op, caption.tokens(), vocab.words(), cfg, rng);
    return {Caption::from_tokens(std::move(out)), op};
}

}  // namespace clipcap::text
