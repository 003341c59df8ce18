#include "clipcap/dual_encoder.hpp"
#include "clipcap/errors.hpp"

#include "../common/gradcheck.hpp"
#include "../common/tiny.hpp"

#include <doctest.h>

#include <array>
#include <cmath>

using namespace clipcap;
using namespace clipcap::dual;

TEST_CASE("clip_s examples") {
    const ClipScoreConfig w;
    Eigen::VectorXd a(3), b(3);
    a << 1, 2, 3;
    CHECK(clip_s(a, a, w) == doctest::Approx(2.5).epsilon(1e-12));
    b << 3, 0, -1;
    CHECK(clip_s(a, b, w) == 0.0);
    Eigen::VectorXd u(2), v(2);
    u << 1, 0;
    v << -0.3, std::sqrt(1 - 0.09);
    CHECK(clip_s(u, v, w) == 0.0);
    CHECK(clip_s(3.0 * a, 0.5 * a, w) == doctest::Approx(2.5).epsilon(1e-12));
    CHECK_THROWS_AS(clip_s(a, Eigen::VectorXd::Zero(3), w), ZeroEmbedding);
    CHECK_THROWS_AS(clip_s(a, Eigen::VectorXd::Ones(2), w), DimensionMismatch);
}

TEST_CASE("image tower: zero input with zero bias gives zero embedding, width checked") {
    auto enc = tiny::encoder(1);
    const ImageRecord zero{"z", Eigen::VectorXd::Zero(4)};
    CHECK(encode_image(enc, zero).norm() == 0.0);
    Rng rng(2);
    const auto img = tiny::image(rng, 4);
    CHECK(encode_image(enc, img) == encode_image(enc, img));
    CHECK_THROWS_AS(encode_image(enc, tiny::image(rng, 5)), DimensionMismatch);
}

TEST_CASE("text tower is pure and order sensitive") {
    auto enc = tiny::encoder(3, 6);
    const auto c = tiny::caption({"w0", "w1", "w2"});
    CHECK(encode_text(enc, c) == encode_text(enc, c));
    CHECK(encode_text(enc, tiny::caption({"w5"})).size() == 4);
    Rng rng(4);
    int tested = 0;
    while (tested < 100) {
        text::Tokens toks;
        const auto n = rng.randint(2, 6);
        for (std::int64_t i = 0; i < n; ++i) toks.push_back("w" + std::to_string(rng.randint(0, 5)));
        const text::Tokens rev(toks.rbegin(), toks.rend());
        if (rev == toks) continue;
        ++tested;
        const Eigen::VectorXd a = encode_text(enc, text::Caption::from_tokens(toks));
        const Eigen::VectorXd b = encode_text(enc, text::Caption::from_tokens(rev));
        CHECK((a - b).norm() > 1e-12);
    }
}

TEST_CASE("contrastive loss closed forms") {
    const ag::Var uniform = ag::constant(ag::Matrix::Constant(4, 4, 0.7));
    CHECK(contrastive_loss_from_logits(uniform).item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    const ag::Var separable = ag::constant(ag::Matrix::Identity(2, 2) * 100.0);
    CHECK(contrastive_loss_from_logits(separable).item() < 1e-12);
    CHECK_THROWS_AS(contrastive_loss_from_logits(ag::constant(ag::Matrix::Ones(1, 1))), BatchTooSmall);

    auto enc = tiny::encoder(5);
    Rng rng(6);
    const auto img = tiny::image(rng, 4);
    const auto cap = tiny::caption({"w0"});
    const std::array<Pair, 1> one{Pair{&img, &cap}};
    CHECK_THROWS_AS(contrastive_loss(enc, one), BatchTooSmall);
}

TEST_CASE("contrastive and grammar gradients pass finite differences") {
    auto enc = tiny::encoder(7);
    CHECK(enc.params().parameter_count() <= 1000);
    Rng rng(8);
    std::vector<ImageRecord> imgs;
    for (int i = 0; i < 3; ++i) imgs.push_back(tiny::image(rng, 4, "i" + std::to_string(i)));
    const std::vector<text::Caption> caps{tiny::caption({"w0", "w1"}), tiny::caption({"w2", "w3", "w0"}),
                                          tiny::caption({"w1"})};
    std::vector<Pair> batch;
    for (int i = 0; i < 3; ++i) batch.push_back({&imgs[i], &caps[i]});
    CHECK(gradcheck::check(enc.params(), [&] { return contrastive_loss(enc, batch); }).max_rel_error < 1e-4);

    const std::array<int, 3> labels{1, 0, 1};
    for (bool one_sided : {false, true}) {
        auto loss = [&] {
            std::vector<ag::Var> embs;
            for (const auto& c : caps) embs.push_back(text_embedding(enc, enc.text_ids(c)));
            return grammar_bce(grammar_probabilities(enc, ag::concat_rows(embs)), labels, one_sided);
        };
        CHECK(gradcheck::check(enc.params(), loss).max_rel_error < 1e-4);
    }
}

TEST_CASE("grammar score is strictly inside the unit interval") {
    auto enc = tiny::encoder(9);
    for (const auto& c : {tiny::caption({"w0"}), tiny::caption({"w1", "w2", "w3"})}) {
        const double g = grammar_score(enc, c);
        CHECK(g > 0.0);
        CHECK(g < 1.0);
        CHECK(g == grammar_score(enc, c));
    }
}

TEST_CASE("grammar finetuning freezes the image tower; zero epochs is the identity") {
    auto enc = tiny::encoder(10, 6);
    Rng rng(11);
    std::vector<ImageCaptions> data;
    for (int i = 0; i < 6; ++i) {
        data.push_back({tiny::image(rng, 4, "i" + std::to_string(i)),
                        {tiny::caption({"w0", "w1", "w2", "w3"}), tiny::caption({"w5", "w4", "w3", "w2", "w1"})}});
    }
    GrammarFinetuneConfig cfg;
    cfg.epochs = 0;
    CHECK(grammar_finetune(enc, data, cfg).params().equals(enc.params()));
    cfg.epochs = 2;
    cfg.batch_size = 4;
    const DualEncoder tuned = grammar_finetune(enc, data, cfg);
    for (const auto& name : enc.image_tower_names())
        CHECK((tuned.params().at(name).value().array() == enc.params().at(name).value().array()).all());
    CHECK_FALSE(tuned.params().equals(enc.params()));
}
