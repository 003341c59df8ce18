#include "clipcap/errors.hpp"
#include "clipcap/metrics.hpp"
#include "clipcap/rng.hpp"

#include "../common/oracles.hpp"

#include <doctest.h>

#include <cmath>

using namespace clipcap;
using namespace clipcap::metrics;

namespace {

const std::vector<std::string> kWords{"a", "ab", "b", "ba", "car", "cars", "red", "the", "mat", "on"};

std::string random_sentence(Rng& rng, int lo, int hi) {
    const auto n = rng.randint(lo, hi);
    std::string s;
    for (std::int64_t i = 0; i < n; ++i) {
        if (i) s += ' ';
        s += kWords[static_cast<std::size_t>(rng.randint(0, static_cast<std::int64_t>(kWords.size()) - 1))];
    }
    return s;
}

}  // namespace

TEST_CASE("bleu4 examples") {
    CHECK(bleu4({{"1", "a man rides a horse"}}, {{"1", {"a man rides a horse"}}}) == doctest::Approx(100.0));
    CHECK(bleu4({{"1", "x y z w"}}, {{"1", {"a b c d"}}}) == 0.0);
    const CandidateMap c{{"1", "the cat sat"}};
    const ReferenceMap r{{"1", {"the cat sat on the mat"}}};
    CHECK(bleu4(c, r) == doctest::Approx(oracle::bleu4(c, r)).epsilon(1e-12));
    CHECK_THROWS_AS(bleu4({{"1", "a b"}}, {}), MissingReferences);
}

TEST_CASE("bleu4 matches the oracle on random corpora") {
    Rng rng(11);
    for (int t = 0; t < 50; ++t) {
        CandidateMap c;
        ReferenceMap r;
        for (int i = 0; i < 4; ++i) {
            const std::string id = std::to_string(i);
            c[id] = random_sentence(rng, 4, 9);
            for (int k = 0; k < 3; ++k) r[id].push_back(random_sentence(rng, 4, 9));
            r[id].push_back(c[id]);  // keep 4-gram matches non-zero
        }
        CHECK(bleu4(c, r) == doctest::Approx(oracle::bleu4(c, r)).epsilon(1e-12));
    }
}

TEST_CASE("cider_d examples and oracle") {
    const ReferenceMap refs{{"1", {"a red car parked"}}, {"2", {"the blue mat on floor"}}, {"3", {"two dogs run fast"}}};
    CandidateMap same;
    for (const auto& [id, r] : refs) same[id] = r[0];
    CHECK(cider_d(same, refs) == doctest::Approx(10.0).epsilon(1e-12));

    CandidateMap disjoint{{"1", "zz"}, {"2", "yy"}, {"3", "xx"}};
    CHECK(cider_d(disjoint, refs) == 0.0);

    ReferenceMap doubled;
    for (const auto& [id, r] : refs) doubled[id] = {r[0], r[0]};
    const CandidateMap partial{{"1", "a red mat"}, {"2", "the blue car"}, {"3", "two dogs"}};
    CHECK(cider_d(partial, doubled) == doctest::Approx(cider_d(partial, refs)).epsilon(1e-12));

    CHECK_THROWS_AS(cider_d({{"1", "a"}}, {{"1", {"a"}}}), CorpusTooSmall);

    Rng rng(3);
    for (int t = 0; t < 100; ++t) {
        const int n = static_cast<int>(rng.randint(2, 5));
        CandidateMap c;
        ReferenceMap r;
        for (int i = 0; i < n; ++i) {
            const std::string id = std::to_string(i);
            c[id] = random_sentence(rng, 1, 10);
            const auto k = rng.randint(1, 4);
            for (std::int64_t j = 0; j < k; ++j) r[id].push_back(random_sentence(rng, 1, 10));
        }
        CHECK(std::abs(cider_d(c, r) - oracle::cider_d(c, r)) < 1e-9);
    }
}

TEST_CASE("rouge_l examples") {
    CHECK(rouge_l({{"1", "a b c d"}}, {{"1", {"a b c d"}}}) == doctest::Approx(100.0));
    CHECK(rouge_l({{"1", "a b"}}, {{"1", {"c d"}}}) == 0.0);
    CHECK(rouge_l({{"1", "a b c d"}}, {{"1", {"a x c d"}}}) == doctest::Approx(75.0));
}

TEST_CASE("word_recall examples") {
    CHECK(word_recall({{"1", "a blue car parked"}}, {{"1", {"blue car", "red truck"}}}) == doctest::Approx(50.0));
    CHECK(word_recall({{"1", "a blue car"}}, {{"1", {"blue car", "a car"}}}) == doctest::Approx(100.0));
    CHECK(word_recall({{"1", "cars on road"}}, {{"1", {"car"}}}) == doctest::Approx(100.0));
    CHECK(word_recall({{"1", "cars on road"}}, {{"1", {"car"}}}, WordMatch::token) == 0.0);
    CHECK_THROWS_AS(word_recall({{"2", "x"}}, {{"1", {"car"}}}), MissingPrediction);
}

TEST_CASE("word_recall equals the oracle exactly on random cases") {
    Rng rng(5);
    for (int t = 0; t < 100; ++t) {
        CandidateMap p;
        PhraseMap g;
        for (int i = 0; i < 3; ++i) {
            const std::string id = std::to_string(i);
            p[id] = random_sentence(rng, 1, 6);
            const auto k = rng.randint(1, 4);
            for (std::int64_t j = 0; j < k; ++j) g[id].push_back(random_sentence(rng, 1, 3));
        }
        CHECK(word_recall(p, g) == oracle::word_recall(p, g));
    }
}

TEST_CASE("retrieval_recall examples") {
    const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(4, 4);
    CHECK(retrieval_recall(eye, eye, {1}).at(1) == doctest::Approx(100.0));
    const Eigen::MatrixXd same = Eigen::MatrixXd::Ones(4, 3);
    const auto r = retrieval_recall(same, same, {1, 4});
    CHECK(r.at(1) == doctest::Approx(25.0));
    CHECK(r.at(4) == doctest::Approx(100.0));
    CHECK_THROWS_AS(retrieval_recall(eye, Eigen::MatrixXd::Identity(4, 3), {1}), DimensionMismatch);

    Rng rng(9);
    double mean = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        Eigen::MatrixXd a(100, 16), b(100, 16);
        for (int i = 0; i < 100; ++i)
            for (int j = 0; j < 16; ++j) a(i, j) = rng.normal(), b(i, j) = rng.normal();
        mean += retrieval_recall(a, b, {1}).at(1) / 20.0;
    }
    CHECK(std::abs(mean - 1.0) < 1.0);
}

TEST_CASE("repetition_rate examples") {
    CHECK(repetition_rate("a b c d") == 0.0);
    CHECK(repetition_rate("a a a a") == doctest::Approx(2.0 / 3.0));
    CHECK(repetition_rate("position position position") == doctest::Approx(0.5));
    CHECK(repetition_rate("word") == 0.0);
}

TEST_CASE("metrics are invariant to image order") {
    const CandidateMap c{{"b", "a red car on the mat"}, {"a", "the cat"}, {"c", "two dogs run"}};
    const ReferenceMap r{{"a", {"the cat sat"}}, {"b", {"a red car"}}, {"c", {"dogs run fast"}}};
    CandidateMap c2;
    ReferenceMap r2;
    const std::map<std::string, std::string> rename{{"a", "3"}, {"b", "1"}, {"c", "2"}};
    for (const auto& [id, s] : c) c2[rename.at(id)] = s;
    for (const auto& [id, s] : r) r2[rename.at(id)] = s;
    CHECK(cider_d(c, r) == doctest::Approx(cider_d(c2, r2)));
    CHECK(rouge_l(c, r) == doctest::Approx(rouge_l(c2, r2)));
}
