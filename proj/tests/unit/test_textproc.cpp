#include "clipcap/textproc.hpp"

#include "scripted.hpp"

#include <doctest.h>

#include <algorithm>
#include <set>

using namespace clipcap;
using namespace clipcap::text;

namespace {

Tokens toks(std::initializer_list<const char*> words) { return Tokens(words.begin(), words.end()); }

// Transcription of the reference generator (swap also rejects the original
// token at a revisited position), kept separate from the
// library so the two can be compared draw for draw.
Tokens reference_negative(Tokens t, const std::vector<std::string>& vocab, int n_gram_max, int n_repeat_max,
                          int n_tok_max, Rng& rng, int& op_out) {
    auto randint = [&](std::int64_t a, std::int64_t b) { return static_cast<std::size_t>(rng.randint(a, b)); };
    auto choice = [&]() -> const std::string& { return vocab[randint(0, static_cast<std::int64_t>(vocab.size()) - 1)]; };
    const int op = static_cast<int>(rng.randint(0, 4));
    op_out = op;
    const auto len = [&] { return static_cast<std::int64_t>(t.size()); };
    if (op == 0) {
        const auto n = static_cast<std::int64_t>(randint(1, n_gram_max));
        const auto idx = randint(0, len() - n);
        Tokens gram(t.begin() + static_cast<long>(idx), t.begin() + static_cast<long>(idx) + n);
        const auto reps = randint(1, n_repeat_max);
        for (std::size_t r = 0; r < reps; ++r) {
            const auto at = randint(0, len());
            t.insert(t.begin() + static_cast<long>(at), gram.begin(), gram.end());
        }
    } else if (op == 1) {
        const auto n = static_cast<std::int64_t>(randint(1, n_gram_max));
        const auto idx = randint(0, len() - n);
        t.erase(t.begin() + static_cast<long>(idx), t.begin() + static_cast<long>(idx) + n);
    } else if (op == 2) {
        const auto k = randint(1, n_tok_max);
        for (std::size_t r = 0; r < k; ++r) {
            const auto at = randint(0, len() - 1);
            const std::string w = choice();
            t.insert(t.begin() + static_cast<long>(at), w);
        }
    } else if (op == 3) {
        const Tokens orig = t;
        const auto k = randint(1, n_tok_max);
        for (std::size_t r = 0; r < k; ++r) {
            const auto at = randint(0, len() - 1);
            std::string w = choice();
            while (w == t[at] || w == orig[at]) w = choice();
            t[at] = w;
        }
    } else {
        for (std::size_t i = t.size() - 1; i > 0; --i) std::swap(t[i], t[randint(0, static_cast<std::int64_t>(i))]);
    }
    return t;
}

std::vector<Caption> corpus(std::initializer_list<const char*> texts) {
    std::vector<Caption> out;
    for (const char* t : texts) out.push_back(Caption::parse(t));
    return out;
}

}  // namespace

TEST_CASE("normalize lowercases, strips punctuation and collapses whitespace") {
    CHECK(normalize("A Blue  Car.") == "a blue car");
    CHECK(normalize("dog") == "dog");
    CHECK(normalize("\tTwo\n lines ") == "two lines");
    CHECK_THROWS_AS(normalize("  !!  "), EmptyText);
    CHECK_THROWS_AS(normalize(""), EmptyText);
}

TEST_CASE("caption tokens rejoin to the text") {
    const Caption c = Caption::parse("A man, riding  a HORSE!");
    CHECK(c.text() == "a man riding a horse");
    CHECK(join(c.tokens()) == c.text());
    CHECK(c.size() == 5);
    CHECK_THROWS_AS(Caption::from_tokens({}), EmptyText);
}

TEST_CASE("vocabulary build follows frequency then lexicographic order") {
    const auto c = corpus({"a cat", "a dog"});
    const Vocabulary v1 = Vocabulary::build(c, 1);
    CHECK(v1.tokens() == std::vector<std::string>{"<pad>", "<bos>", "<eos>", "<unk>", "a", "cat", "dog"});
    const Vocabulary v2 = Vocabulary::build(c, 2);
    CHECK(v2.tokens() == std::vector<std::string>{"<pad>", "<bos>", "<eos>", "<unk>", "a"});
    CHECK(Vocabulary::build(c, 1) == v1);
    CHECK_THROWS_AS(Vocabulary::build(std::vector<Caption>{}, 1), EmptyCorpus);

    for (int id = 0; id < v1.size(); ++id) CHECK(v1.id(v1.token(id)) == id);
    CHECK(v1.id("zebra") == Vocabulary::kUnk);
    const std::vector<int> ids{Vocabulary::kBos, v1.id("a"), v1.id("dog"), Vocabulary::kEos, v1.id("cat")};
    CHECK(v1.decode(ids) == "a dog");
}

TEST_CASE("remove deletes one n-gram at the drawn index") {
    Scripted src{2, 1};  // n_gram = 2, index = 1
    CHECK(remove_ngram(toks({"a", "b", "c", "d"}), 3, src) == toks({"a", "d"}));
    CHECK(src.exhausted());
}

TEST_CASE("swap rejects replacements equal to the current token") {
    const std::vector<std::string> vocab{"a", "x"};
    Scripted src{1, 0, 0, 1};  // one swap, index 0, draw "a" (rejected), draw "x"
    CHECK(swap_tokens(toks({"a", "b", "c"}), vocab, 3, src) == toks({"x", "b", "c"}));
    CHECK(src.exhausted());
}

TEST_CASE("swap never restores the original token at a revisited position") {
    const std::vector<std::string> vocab{"a", "x", "y"};
    // Two swaps at index 0: a -> x, then "a" is rejected and "y" accepted.
    Scripted src{2, 0, 1, 0, 0, 2};
    CHECK(swap_tokens(toks({"a", "b", "c"}), vocab, 3, src) == toks({"y", "b", "c"}));
    CHECK(src.exhausted());
}

TEST_CASE("shuffle of a singleton is the identity") {
    Scripted src{};
    CHECK(shuffle_tokens(toks({"a"}), src) == toks({"a"}));
}

TEST_CASE("repeat may append at the end while insert never does") {
    Scripted rep{1, 3, 1, 4};  // unigram "d" repeated once at position 4 = len
    CHECK(repeat_ngram(toks({"a", "b", "c", "d"}), 3, 3, rep) == toks({"a", "b", "c", "d", "d"}));
    const std::vector<std::string> vocab{"x", "y"};
    Scripted ins{1, 3, 1};  // one token, position 3 = len - 1, word "y"
    CHECK(insert_tokens(toks({"a", "b", "c", "d"}), vocab, 3, ins) == toks({"a", "b", "c", "y", "d"}));
}

TEST_CASE("generate_negative matches the reference generator draw for draw") {
    const auto c = corpus({"a big red cube on grass", "there is a small blue ball", "a cone that is green"});
    const Vocabulary vocab = Vocabulary::build(c, 1);
    const std::vector<std::string> words(vocab.words().begin(), vocab.words().end());
    const NegativeGenConfig cfg;
    for (std::uint64_t seed = 0; seed < 500; ++seed) {
        const Caption& cap = c[seed % c.size()];
        Rng a(seed), b(seed);
        const NegativeSample got = generate_negative(cap, vocab, cfg, a);
        int op = -1;
        const Tokens want = reference_negative(cap.tokens(), words, 3, 3, 3, b, op);
        REQUIRE(got.caption.tokens() == want);
        CHECK(static_cast<int>(got.op) == op);
    }
}

TEST_CASE("generate_negative length laws, closure and swap inequality") {
    const auto c = corpus({"a b c d", "a big red cube on grass", "the red cube is left of the blue ball"});
    const Vocabulary vocab = Vocabulary::build(c, 1);
    const NegativeGenConfig cfg;
    Rng rng(7);
    std::set<NegativeOp> seen;
    for (int i = 0; i < 3000; ++i) {
        const Caption& cap = c[static_cast<std::size_t>(i) % c.size()];
        const auto L = static_cast<long>(cap.size());
        const NegativeSample neg = generate_negative(cap, vocab, cfg, rng);
        const auto M = static_cast<long>(neg.caption.size());
        seen.insert(neg.op);
        switch (neg.op) {
            case NegativeOp::repeat: {
                bool ok = false;
                for (long k = 1; k <= 3; ++k)
                    for (long n = 1; n <= 3; ++n) ok = ok || M == L + k * n;
                CHECK(ok);
                break;
            }
            case NegativeOp::remove: CHECK((M >= L - 3 && M <= L - 1)); break;
            case NegativeOp::insert: CHECK((M >= L + 1 && M <= L + 3)); break;
            case NegativeOp::swap: CHECK(M == L); CHECK(neg.caption.tokens() != cap.tokens()); break;
            case NegativeOp::shuffle: {
                CHECK(M == L);
                auto a = cap.tokens(), b = neg.caption.tokens();
                std::sort(a.begin(), a.end());
                std::sort(b.begin(), b.end());
                CHECK(a == b);
                break;
            }
        }
        for (const auto& t : neg.caption.tokens()) {
            const bool from_input = std::find(cap.tokens().begin(), cap.tokens().end(), t) != cap.tokens().end();
            CHECK((from_input || vocab.contains(t)));
        }
    }
    CHECK(seen.size() == 5);
}

TEST_CASE("CaptionTooShort exactly below n_max_gram + 1 tokens") {
    const auto c = corpus({"a b c d e f"});
    const Vocabulary vocab = Vocabulary::build(c, 1);
    Rng rng(1);
    for (int n = 1; n <= 4; ++n) {
        NegativeGenConfig cfg;
        cfg.n_max_gram = n;
        for (int len = 1; len <= 6; ++len) {
            Tokens t(c[0].tokens().begin(), c[0].tokens().begin() + len);
            const Caption cap = Caption::from_tokens(t);
            if (len < n + 1) {
                CHECK_THROWS_AS(generate_negative(cap, vocab, cfg, rng), CaptionTooShort);
            } else {
                CHECK_NOTHROW(generate_negative(cap, vocab, cfg, rng));
            }
        }
    }
    NegativeGenConfig bad;
    bad.n_max_tokens = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigInvalid);
}

TEST_CASE("negative generation is a pure function of the seed") {
    const auto c = corpus({"a big red cube on grass"});
    const Vocabulary vocab = Vocabulary::build(c, 1);
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        Rng a(seed), b(seed);
        CHECK(generate_negative(c[0], vocab, {}, a).caption == generate_negative(c[0], vocab, {}, b).caption);
    }
    CHECK(negative_op_from_string("shuffle") == NegativeOp::shuffle);
    CHECK_THROWS_AS(negative_op_from_string("rotate"), ParseError);
}
