#include "clipcap/errors.hpp"
#include "clipcap/rl_trainer.hpp"

#include "../common/gradcheck.hpp"
#include "../common/tiny.hpp"

#include <doctest.h>

#include <cmath>

using namespace clipcap;
using namespace clipcap::rl;

namespace {

// Rewrites the image tower so every image embeds to `target`.
void pin_image_embedding(dual::DualEncoder& enc, const Eigen::VectorXd& target) {
    enc.params().at("image.w").mutable_value().setZero();
    enc.params().at("image.b").mutable_value() = target.transpose();
}

std::vector<ImageRecord> images(int n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<ImageRecord> out;
    for (int i = 0; i < n; ++i) out.push_back(tiny::image(rng, 4, "i" + std::to_string(i)));
    return out;
}

bool all_grads_zero(const ParamStore& p) {
    for (const auto& [name, var] : p.entries())
        if (var.grad().size() != 0 && (var.grad().array() != 0.0).any()) return false;
    return true;
}

}  // namespace

TEST_CASE("reward examples") {
    auto enc = tiny::encoder(1, 4);
    const auto cap = tiny::caption({"w0", "w1"});
    const auto img = images(1, 2)[0];
    const Eigen::VectorXd t = dual::encode_text(enc, cap);

    pin_image_embedding(enc, t);
    RewardModel model{RewardConfig{}, &enc, nullptr};
    CHECK(compute_reward(model, img, cap, nullptr).combined == doctest::Approx(2.5).epsilon(1e-12));

    // clip_s = 1.0 needs cosine 0.4; the zeroed output layer gives g = 0.5.
    Eigen::VectorXd u = Eigen::VectorXd::Unit(t.size(), 0);
    u -= u.dot(t.normalized()) * t.normalized();
    pin_image_embedding(enc, 0.4 * t.normalized() + std::sqrt(1.0 - 0.16) * u.normalized());
    enc.params().at("grammar.w2").mutable_value().setZero();
    model.config.kind = RewardKind::clip_s_grammar;
    const RewardBreakdown b = compute_reward(model, img, cap, nullptr);
    CHECK(b.clip_s == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(*b.grammar == 0.5);
    CHECK(b.combined == doctest::Approx(2.5).epsilon(1e-12));
    CHECK(b.combined == model.config.lambda * b.clip_s + *b.grammar);

    const metrics::CiderD stats(
        metrics::ReferenceMap{{"a", {"w0 w1 w2 w3"}}, {"b", {"w2 w3 w1"}}, {"c", {"w3 w1 w2 w2 w0"}}});
    RewardModel cider{RewardConfig{RewardKind::cider}, nullptr, &stats};
    const auto four = tiny::caption({"w0", "w1", "w2", "w3"});
    const std::vector<text::Caption> refs{four};
    CHECK(compute_reward(cider, img, four, &refs).combined == doctest::Approx(10.0).epsilon(1e-12));
    CHECK_THROWS_AS(compute_reward(cider, img, cap, nullptr), MissingReferences);
    RewardModel no_encoder{RewardConfig{}, nullptr, nullptr};
    CHECK_THROWS_AS(compute_reward(no_encoder, img, cap, nullptr), ConfigInvalid);
    CHECK(reward_kind_from_string("cider_clip_s") == RewardKind::cider_plus_clip_s);
    CHECK_THROWS_AS(reward_kind_from_string("bleu"), ConfigInvalid);
}

TEST_CASE("scst null test: identical beam and greedy decodes give bitwise-zero gradients") {
    auto model = tiny::captioner(3, 4);
    const auto enc = tiny::encoder(4, 4);
    const auto imgs = images(6, 5);
    std::vector<ScstSample> batch;
    for (const auto& i : imgs) batch.push_back({&i, nullptr});
    ScstConfig cfg;
    cfg.beam_size = 1;
    for (auto& [name, var] : model.params().entries()) var.node()->grad = ag::Matrix::Ones(var.rows(), var.cols());
    Rng rng(6);
    const ScstResult r = scst_step(model, batch, RewardModel{RewardConfig{RewardKind::clip_s_grammar}, &enc, nullptr},
                                   cfg, rng);
    CHECK(r.loss == 0.0);
    CHECK(all_grads_zero(model.params()));
    for (const auto& b : r.breakdowns) CHECK(b.advantage == 0.0);
}

TEST_CASE("scst surrogate gradient matches finite differences with frozen decodes") {
    auto model = tiny::captioner(7, 4);
    CHECK(model.params().parameter_count() <= 1000);
    // Discourage empty decodes so no sample is dropped.
    model.params().at("out.b").mutable_value()(0, text::Vocabulary::kEos) = -4.0;
    const auto enc = tiny::encoder(8, 4);
    const auto imgs = images(4, 9);
    std::vector<ScstSample> batch;
    for (const auto& i : imgs) batch.push_back({&i, nullptr});
    ScstConfig cfg;
    cfg.estimator = Estimator::sample;
    Rng rng(10);
    const ScstResult r = scst_step(model, batch, RewardModel{RewardConfig{}, &enc, nullptr}, cfg, rng);
    REQUIRE(r.dropped == 0);
    const gradcheck::Grads analytic = gradcheck::gradients(model.params());
    auto surrogate = [&] {
        ag::Var total = ag::constant_scalar(0.0);
        for (std::size_t i = 0; i < imgs.size(); ++i)
            total = ag::add(total, ag::scale(sequence_logprob(model, imgs[i], r.sampled[i].tokens),
                                             -r.breakdowns[i].advantage));
        return total;
    };
    CHECK(surrogate().item() == doctest::Approx(r.loss).epsilon(1e-12));
    CHECK(gradcheck::compare(model.params(), analytic, surrogate).max_rel_error < 1e-4);
}

TEST_CASE("a positive-advantage step raises the log-probability of the sampled caption") {
    const auto enc = tiny::encoder(11, 4);
    const RewardModel reward{RewardConfig{}, &enc, nullptr};
    ScstConfig cfg;
    cfg.estimator = Estimator::sample;
    bool found = false;
    for (std::uint64_t seed = 0; seed < 200 && !found; ++seed) {
        auto model = tiny::captioner(12, 4);
        const auto img = images(1, 100 + seed)[0];
        const std::vector<ScstSample> batch{{&img, nullptr}};
        Rng rng(seed);
        const ScstResult r = scst_step(model, batch, reward, cfg, rng);
        if (r.breakdowns.empty() || r.breakdowns[0].advantage <= 0.0) continue;
        found = true;
        const auto& seq = r.sampled[0].tokens;
        const double before = sequence_logprob(model, img, seq).item();
        Optimizer sgd(OptimizerConfig{OptimizerConfig::Kind::sgd, 1e-3}, [&] {
            std::vector<std::string> n;
            for (const auto& [k, v] : model.params().entries()) n.push_back(k);
            return n;
        }());
        sgd.step(model.params());
        CHECK(sequence_logprob(model, img, seq).item() > before);
    }
    CHECK(found);
}

TEST_CASE("training prerequisites, zero epochs and named schedules") {
    const auto model = tiny::captioner(13, 4);
    const auto imgs = images(3, 14);
    std::vector<TrainExample> data;
    for (const auto& i : imgs) data.push_back({i, {tiny::caption({"w0", "w1"})}});
    TrainConfig cfg;
    cfg.schedule.mle_epochs = 0;
    cfg.schedule.rl_epochs = 0;
    CHECK(train(model, data, {}, cfg, nullptr).params().equals(model.params()));

    cfg.schedule.mle_epochs = 1;
    cfg.schedule.rl_epochs = 1;
    CHECK_THROWS_AS(train(model, data, {}, cfg, nullptr), ConfigInvalid);
    cfg.reward.kind = RewardKind::cider;
    data[1].references.clear();
    CHECK_THROWS_AS(train(model, data, {}, cfg, nullptr), MissingReferences);

    const Schedule paper = Schedule::named("paper-schedule");
    CHECK(paper.mle_epochs == 15);
    CHECK(paper.rl_epochs == 25);
    CHECK_THROWS_AS(Schedule::named("nope"), ConfigInvalid);
}

TEST_CASE("a short run reports every epoch and keeps the reward decomposition exact") {
    const auto model = tiny::captioner(15, 4);
    const auto enc = tiny::encoder(16, 4);
    const auto imgs = images(4, 17);
    std::vector<TrainExample> data;
    for (const auto& i : imgs) data.push_back({i, {tiny::caption({"w0", "w1"}), tiny::caption({"w2"})}});
    TrainConfig cfg;
    cfg.schedule.mle_epochs = 2;
    cfg.schedule.rl_epochs = 2;
    cfg.schedule.rl_batch = 2;
    cfg.reward.kind = RewardKind::clip_s_grammar;
    cfg.scst.estimator = Estimator::sample;
    std::vector<EpochReport> report;
    const auto trained = train(model, data, data, cfg, &enc, &report);
    REQUIRE(report.size() == 4);
    CHECK(report[0].phase == "mle");
    CHECK(report[3].phase == "rl");
    CHECK(report[3].val_metrics.contains("CIDEr"));
    CHECK_FALSE(trained.params().equals(model.params()));

    Rng rng(18);
    std::vector<ScstSample> batch;
    for (const auto& d : data) batch.push_back({&d.image, nullptr});
    auto copy = trained;
    const ScstResult r = scst_step(copy, batch, RewardModel{cfg.reward, &enc, nullptr}, cfg.scst, rng);
    for (const auto& b : r.breakdowns) CHECK(b.combined == cfg.reward.lambda * b.clip_s + *b.grammar);
}
