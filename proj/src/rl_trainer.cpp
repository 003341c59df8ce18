#include "clipcap/rl_trainer.hpp"

#include "clipcap/errors.hpp"

#include <algorithm>
#include <iostream>
#include <numeric>

namespace clipcap::rl {

namespace {

using nlohmann::json;
using text::Vocabulary;

std::optional<text::Caption> caption_of(const cap::Captioner& model, const cap::DecodeResult& r) {
    const std::vector<int> words = r.words();
    try {
        return text::Caption::parse(model.vocab().decode(words));
    } catch (const EmptyText&) {
        return std::nullopt;
    }
}

std::vector<std::string> texts_of(const std::vector<text::Caption>& caps) {
    std::vector<std::string> out;
    out.reserve(caps.size());
    for (const auto& c : caps) out.push_back(c.text());
    return out;
}

// Explicit zero matrices so callers can inspect every gradient.
void materialize_zero_grads(ParamStore& params) {
    for (auto& [name, var] : params.entries()) {
        var.zero_grad();
        var.node()->grad_buffer();
    }
}

}  // namespace

std::string_view to_string(RewardKind kind) {
    switch (kind) {
        case RewardKind::cider: return "cider";
        case RewardKind::clip_s: return "clip_s";
        case RewardKind::cider_plus_clip_s: return "cider_plus_clip_s";
        case RewardKind::clip_s_grammar: return "clip_s_grammar";
    }
    return "?";
}

RewardKind reward_kind_from_string(std::string_view name) {
    if (name == "cider") return RewardKind::cider;
    if (name == "clip_s") return RewardKind::clip_s;
    if (name == "cider_plus_clip_s" || name == "cider_clip_s") return RewardKind::cider_plus_clip_s;
    if (name == "clip_s_grammar") return RewardKind::clip_s_grammar;
    throw ConfigInvalid("unknown reward kind '" + std::string(name) + "'");
}

bool uses_cider(RewardKind kind) { return kind == RewardKind::cider || kind == RewardKind::cider_plus_clip_s; }
bool uses_encoder(RewardKind kind) { return kind != RewardKind::cider; }

void RewardConfig::validate() const {
    if (!(lambda > 0.0)) throw ConfigInvalid("lambda must be > 0");
    if (!(cider_mix >= 0.0)) throw ConfigInvalid("cider_mix must be >= 0");
    clip.validate();
}

json RewardConfig::to_json() const {
    return {{"kind", to_string(kind)}, {"lambda", lambda}, {"clip_w", clip.w}, {"cider_mix", cider_mix}};
}

RewardConfig RewardConfig::from_json(const json& j) {
    RewardConfig c;
    if (j.contains("kind")) c.kind = reward_kind_from_string(j.at("kind").get<std::string>());
    c.lambda = j.value("lambda", c.lambda);
    c.clip.w = j.value("clip_w", c.clip.w);
    c.cider_mix = j.value("cider_mix", c.cider_mix);
    c.validate();
    return c;
}

json RewardBreakdown::to_json() const {
    json j = {{"clip_s", clip_s}, {"combined", combined}, {"baseline", baseline}, {"advantage", advantage}};
    j["grammar"] = grammar ? json(*grammar) : json(nullptr);
    j["cider"] = cider ? json(*cider) : json(nullptr);
    return j;
}

RewardBreakdown compute_reward(const RewardModel& reward, const ImageRecord& image, const text::Caption& caption,
                               const std::vector<text::Caption>* references) {
    const RewardConfig& cfg = reward.config;
    RewardBreakdown b;
    if (uses_cider(cfg.kind)) {
        if (references == nullptr || references->empty()) {
            throw MissingReferences("reward '" + std::string(to_string(cfg.kind)) + "' needs references for image '" +
                                    image.image_id + "'");
        }
        if (reward.cider == nullptr) throw ConfigInvalid("CIDEr reward requested without corpus statistics");
        b.cider = reward.cider->score(caption.text(), texts_of(*references));
    }
    if (uses_encoder(cfg.kind)) {
        if (reward.encoder == nullptr) {
            throw ConfigInvalid("reward '" + std::string(to_string(cfg.kind)) + "' needs an encoder");
        }
        b.clip_s = dual::clip_s(*reward.encoder, cfg.clip, image, caption);
    }
    switch (cfg.kind) {
        case RewardKind::clip_s: b.combined = b.clip_s; break;
        case RewardKind::clip_s_grammar:
            b.grammar = dual::grammar_score(*reward.encoder, caption);
            b.combined = cfg.lambda * b.clip_s + *b.grammar;
            break;
        case RewardKind::cider: b.combined = *b.cider; break;
        case RewardKind::cider_plus_clip_s: b.combined = *b.cider + cfg.cider_mix * b.clip_s; break;
    }
    return b;
}

std::string_view to_string(Estimator e) { return e == Estimator::beam ? "beam" : "sample"; }

Estimator estimator_from_string(std::string_view name) {
    if (name == "beam") return Estimator::beam;
    if (name == "sample") return Estimator::sample;
    throw ConfigInvalid("unknown estimator '" + std::string(name) + "'");
}

json ScstConfig::to_json() const { return {{"beam_size", beam_size}, {"estimator", to_string(estimator)}}; }

ScstConfig ScstConfig::from_json(const json& j) {
    ScstConfig c;
    c.beam_size = j.value("beam_size", c.beam_size);
    if (j.contains("estimator")) c.estimator = estimator_from_string(j.at("estimator").get<std::string>());
    if (c.beam_size < 1) throw ConfigInvalid("beam_size must be >= 1");
    return c;
}

ScstResult scst_step(cap::Captioner& model, std::span<const ScstSample> batch, const RewardModel& reward,
                     const ScstConfig& cfg, Rng& rng) {
    ScstResult result;
    materialize_zero_grads(model.params());

    std::vector<ag::Var> terms;
    for (const auto& s : batch) {
        cap::DecodeResult greedy = cap::greedy_decode(model, *s.image);
        cap::DecodeResult sampled = cfg.estimator == Estimator::beam ? cap::beam_search(model, *s.image, cfg.beam_size)
                                                                     : cap::sample_decode(model, *s.image, rng);
        RewardBreakdown b;
        try {
            const auto greedy_caption = caption_of(model, greedy);
            const auto sampled_caption = caption_of(model, sampled);
            if (!greedy_caption || !sampled_caption) throw EmptyText("decoded caption is empty");
            const RewardBreakdown base = compute_reward(reward, *s.image, *greedy_caption, s.references);
            b = compute_reward(reward, *s.image, *sampled_caption, s.references);
            b.baseline = base.combined;
            b.advantage = b.combined - b.baseline;
        } catch (const Error& e) {
            std::cerr << "scst: dropping sample '" << s.image->image_id << "': " << e.what() << "\n";
            ++result.dropped;
            continue;
        }
        if (b.advantage != 0.0) {
            // The advantage is a constant: no gradient reaches the reward models.
            terms.push_back(ag::scale(cap::sequence_logprob(model, *s.image, sampled.tokens), -b.advantage));
        }
        result.breakdowns.push_back(b);
        result.sampled.push_back(std::move(sampled));
        result.greedy.push_back(std::move(greedy));
    }
    if (!terms.empty()) {
        ag::Var loss = terms.front();
        for (std::size_t i = 1; i < terms.size(); ++i) loss = ag::add(loss, terms[i]);
        materialize_zero_grads(model.params());
        loss.backward();
        result.loss = loss.item();
    }
    return result;
}

Schedule Schedule::named(const std::string& name) {
    Schedule s;
    s.name = name;
    if (name == "paper-schedule") {
        s.mle_epochs = 15;
        s.rl_epochs = 25;
    } else if (name == "toy") {
        s.mle_epochs = 15;
        s.rl_epochs = 10;
    } else {
        throw ConfigInvalid("unknown schedule '" + name + "' (known: paper-schedule, toy)");
    }
    return s;
}

void Schedule::validate() const {
    if (mle_epochs < 0 || rl_epochs < 0) throw ConfigInvalid("epoch counts must be >= 0");
    if (mle_batch < 1 || rl_batch < 1) throw ConfigInvalid("batch sizes must be >= 1");
    if (!(mle_lr > 0.0) || !(rl_lr > 0.0)) throw ConfigInvalid("learning rates must be > 0");
}

json Schedule::to_json() const {
    return {{"name", name},         {"mle_epochs", mle_epochs}, {"rl_epochs", rl_epochs}, {"mle_batch", mle_batch},
            {"rl_batch", rl_batch}, {"mle_lr", mle_lr},         {"rl_lr", rl_lr}};
}

Schedule Schedule::from_json(const json& j) {
    Schedule s = j.contains("name") && j.at("name") != "custom" ? named(j.at("name")) : Schedule{};
    s.mle_epochs = j.value("mle_epochs", s.mle_epochs);
    s.rl_epochs = j.value("rl_epochs", s.rl_epochs);
    s.mle_batch = j.value("mle_batch", s.mle_batch);
    s.rl_batch = j.value("rl_batch", s.rl_batch);
    s.mle_lr = j.value("mle_lr", s.mle_lr);
    s.rl_lr = j.value("rl_lr", s.rl_lr);
    s.validate();
    return s;
}

json TrainConfig::to_json() const {
    return {{"schedule", schedule.to_json()}, {"reward", reward.to_json()}, {"mle_only", mle_only},
            {"scst", scst.to_json()},         {"clip_norm", clip_norm},     {"seed", seed}};
}

json EpochReport::to_json() const {
    return {{"epoch", epoch},
            {"phase", phase},
            {"loss", loss},
            {"mean_reward", mean_reward},
            {"mean_advantage", mean_advantage},
            {"dropped", dropped},
            {"val_metrics", val_metrics}};
}

json validation_metrics(const cap::Captioner& model, std::span<const TrainExample> val, const dual::DualEncoder* encoder,
                        const dual::ClipScoreConfig& clip) {
    json out = json::object();
    if (val.empty()) return out;
    metrics::CandidateMap cands;
    metrics::ReferenceMap refs;
    double clip_sum = 0.0;
    int clip_n = 0;
    for (const auto& ex : val) {
        const cap::DecodeResult r = cap::greedy_decode(model, ex.image);
        const std::string text = model.vocab().decode(r.words());
        cands[ex.image.image_id] = text;
        refs[ex.image.image_id] = texts_of(ex.references);
        if (encoder != nullptr && !text.empty()) {
            clip_sum += dual::clip_s(*encoder, clip, ex.image, text::Caption::parse(text));
            ++clip_n;
        }
    }
    if (val.size() >= 2) out["CIDEr"] = metrics::cider_d(cands, refs);
    if (clip_n > 0) out["CLIP-S"] = clip_sum / clip_n;
    return out;
}

cap::Captioner train(cap::Captioner model, std::span<const TrainExample> train_set, std::span<const TrainExample> val_set,
                     const TrainConfig& cfg, const dual::DualEncoder* encoder, std::vector<EpochReport>* report,
                     const std::function<void(const EpochReport&, const cap::Captioner&)>& on_epoch) {
    cfg.schedule.validate();
    cfg.reward.validate();
    const bool run_rl = !cfg.mle_only && cfg.schedule.rl_epochs > 0;
    if (train_set.empty()) throw EmptyCorpus("training set is empty");

    // Prerequisites are checked before any parameter moves.
    std::optional<metrics::CiderD> cider;
    if (run_rl) {
        if (uses_encoder(cfg.reward.kind) && encoder == nullptr) {
            throw ConfigInvalid("reward '" + std::string(to_string(cfg.reward.kind)) + "' needs an encoder checkpoint");
        }
        if (uses_cider(cfg.reward.kind)) {
            std::vector<std::vector<std::string>> sets;
            for (const auto& ex : train_set) {
                if (ex.references.empty()) {
                    throw MissingReferences("image '" + ex.image.image_id + "' has no references for the CIDEr reward");
                }
                sets.push_back(texts_of(ex.references));
            }
            cider.emplace(sets);
        }
    }
    if (encoder != nullptr && encoder->config().d_img != model.config().d_img) {
        throw DimensionMismatch("encoder and captioner disagree on d_img");
    }

    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    std::vector<std::vector<std::vector<int>>> ids(train_set.size());
    for (std::size_t i = 0; i < train_set.size(); ++i) {
        for (std::size_t r = 0; r < train_set[i].references.size(); ++r) {
            ids[i].push_back(model.vocab().encode(train_set[i].references[r]));
            pairs.emplace_back(i, r);
        }
    }

    const auto all_names = [&] {
        std::vector<std::string> names;
        for (const auto& [name, var] : model.params().entries()) names.push_back(name);
        return names;
    }();

    int epoch = 0;
    auto finish_epoch = [&](EpochReport r) {
        r.val_metrics = validation_metrics(model, val_set, encoder, cfg.reward.clip);
        if (report != nullptr) report->push_back(r);
        if (on_epoch) on_epoch(r, model);
    };

    if (cfg.schedule.mle_epochs > 0) {
        Rng rng = Rng::substream(cfg.seed, "captioner.mle");
        Optimizer opt(OptimizerConfig{OptimizerConfig::Kind::adam, cfg.schedule.mle_lr, 0.9, 0.999, 1e-8, cfg.clip_norm},
                      all_names);
        for (int e = 0; e < cfg.schedule.mle_epochs; ++e) {
            std::shuffle(pairs.begin(), pairs.end(), rng.engine());
            double total = 0.0;
            for (std::size_t start = 0; start < pairs.size(); start += static_cast<std::size_t>(cfg.schedule.mle_batch)) {
                const std::size_t end = std::min(pairs.size(), start + static_cast<std::size_t>(cfg.schedule.mle_batch));
                model.params().zero_grad();
                ag::Var loss = cap::mle_loss(model, train_set[pairs[start].first].image, ids[pairs[start].first][pairs[start].second]);
                for (std::size_t k = start + 1; k < end; ++k) {
                    loss = ag::add(loss, cap::mle_loss(model, train_set[pairs[k].first].image, ids[pairs[k].first][pairs[k].second]));
                }
                loss = ag::scale(loss, 1.0 / static_cast<double>(end - start));
                loss.backward();
                opt.step(model.params());
                total += loss.item() * static_cast<double>(end - start);
            }
            EpochReport r;
            r.epoch = ++epoch;
            r.phase = "mle";
            r.loss = total / static_cast<double>(pairs.size());
            finish_epoch(std::move(r));
        }
    }

    if (run_rl) {
        Rng order_rng = Rng::substream(cfg.seed, "captioner.rl.order");
        Rng sample_rng = Rng::substream(cfg.seed, "captioner.rl.sample");
        Optimizer opt(OptimizerConfig{OptimizerConfig::Kind::adam, cfg.schedule.rl_lr, 0.9, 0.999, 1e-8, cfg.clip_norm},
                      all_names);
        const RewardModel reward{cfg.reward, encoder, cider ? &*cider : nullptr};
        std::vector<std::size_t> order(train_set.size());
        std::iota(order.begin(), order.end(), 0);
        for (int e = 0; e < cfg.schedule.rl_epochs; ++e) {
            std::shuffle(order.begin(), order.end(), order_rng.engine());
            EpochReport r;
            r.epoch = ++epoch;
            r.phase = "rl";
            int kept = 0;
            for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.schedule.rl_batch)) {
                const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.schedule.rl_batch));
                std::vector<ScstSample> batch;
                for (std::size_t k = start; k < end; ++k) {
                    batch.push_back({&train_set[order[k]].image, &train_set[order[k]].references});
                }
                const ScstResult res = scst_step(model, batch, reward, cfg.scst, sample_rng);
                opt.step(model.params());
                r.loss += res.loss;
                r.dropped += res.dropped;
                for (const auto& b : res.breakdowns) {
                    r.mean_reward += b.combined;
                    r.mean_advantage += b.advantage;
                    ++kept;
                }
            }
            if (kept > 0) {
                r.mean_reward /= kept;
                r.mean_advantage /= kept;
                r.loss /= kept;
            }
            finish_epoch(std::move(r));
        }
    }
    model.params().zero_grad();
    return model;
}

}  // namespace clipcap::rl
