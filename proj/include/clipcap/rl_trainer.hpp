#pragma once

// Self-critical policy-gradient training for the captioner. The reward of
// the greedy decode is the baseline; gradients flow only through the
// log-probability of the fixed sampled sequence.

#include "clipcap/captioner.hpp"
#include "clipcap/dual_encoder.hpp"
#include "clipcap/image.hpp"
#include "clipcap/metrics.hpp"
#include "clipcap/params.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace clipcap::rl {

enum class RewardKind { cider, clip_s, cider_plus_clip_s, clip_s_grammar };

std::string_view to_string(RewardKind kind);
// Accepts "cider", "clip_s", "cider_plus_clip_s" (or "cider_clip_s") and
// "clip_s_grammar".
RewardKind reward_kind_from_string(std::string_view name);

bool uses_cider(RewardKind kind);
bool uses_encoder(RewardKind kind);

struct RewardConfig {
    RewardKind kind = RewardKind::clip_s;
    double lambda = 2.0;      // weight of CLIP-S in the grammar-combined reward
    dual::ClipScoreConfig clip;
    double cider_mix = 1.0;   // weight of CLIP-S in cider_plus_clip_s

    void validate() const;
    nlohmann::json to_json() const;
    static RewardConfig from_json(const nlohmann::json& j);
};

struct RewardBreakdown {
    double clip_s = 0.0;
    std::optional<double> grammar;
    std::optional<double> cider;
    double combined = 0.0;
    double baseline = 0.0;
    double advantage = 0.0;

    nlohmann::json to_json() const;
};

// Frozen reward context: the encoder (for CLIP-S and the grammar head) and
// corpus CIDEr-D statistics. Either may be absent when the kind does not
// need it; compute_reward raises ConfigInvalid if a needed one is missing.
struct RewardModel {
    RewardConfig config;
    const dual::DualEncoder* encoder = nullptr;
    const metrics::CiderD* cider = nullptr;
};

// combined per kind:
//   clip_s            clip_s
//   clip_s_grammar    lambda * clip_s + g
//   cider             sentence CIDEr-D against the references
//   cider_plus_clip_s cider + cider_mix * clip_s
// MissingReferences when a CIDEr kind gets no references.
RewardBreakdown compute_reward(const RewardModel& reward, const ImageRecord& image, const text::Caption& caption,
                               const std::vector<text::Caption>* references);

enum class Estimator { beam, sample };
std::string_view to_string(Estimator e);
Estimator estimator_from_string(std::string_view name);

struct ScstConfig {
    int beam_size = 5;
    Estimator estimator = Estimator::beam;  // sample: multinomial draw instead of the beam output

    nlohmann::json to_json() const;
    static ScstConfig from_json(const nlohmann::json& j);
};

struct ScstSample {
    const ImageRecord* image = nullptr;
    const std::vector<text::Caption>* references = nullptr;
};

struct ScstResult {
    double loss = 0.0;  // sum over kept samples of -A * log P(sampled)
    std::vector<RewardBreakdown> breakdowns;  // kept samples only
    std::vector<cap::DecodeResult> sampled;
    std::vector<cap::DecodeResult> greedy;
    int dropped = 0;
};

// Decodes greedy and beam (or sample) for every image, scores both, and
// accumulates the surrogate gradient into the captioner parameters, whose
// previous gradients are cleared first. Samples whose reward fails are
// dropped and logged to stderr. Zero-advantage samples add nothing, so a
// batch where every advantage is zero leaves bitwise-zero gradients.
ScstResult scst_step(cap::Captioner& model, std::span<const ScstSample> batch, const RewardModel& reward,
                     const ScstConfig& cfg, Rng& rng);

struct Schedule {
    std::string name = "custom";
    int mle_epochs = 15;
    int rl_epochs = 25;
    int mle_batch = 16;
    int rl_batch = 16;
    double mle_lr = 1e-3;
    double rl_lr = 5e-5;

    // "paper-schedule" (15 MLE + 25 RL epochs) and "toy" (short run).
    static Schedule named(const std::string& name);
    void validate() const;
    nlohmann::json to_json() const;
    static Schedule from_json(const nlohmann::json& j);
};

struct TrainExample {
    ImageRecord image;
    std::vector<text::Caption> references;
};

struct TrainConfig {
    Schedule schedule;
    RewardConfig reward;
    bool mle_only = false;  // skip the RL phase regardless of rl_epochs
    ScstConfig scst;
    double clip_norm = 1.0;
    std::uint64_t seed = 0;

    nlohmann::json to_json() const;
};

struct EpochReport {
    int epoch = 0;  // 1-based over both phases
    std::string phase;  // "mle" or "rl"
    double loss = 0.0;
    double mean_reward = 0.0;
    double mean_advantage = 0.0;
    int dropped = 0;
    nlohmann::json val_metrics = nlohmann::json::object();

    nlohmann::json to_json() const;
};

// Greedy CIDEr-D (and CLIP-S when an encoder is given) on a validation split.
nlohmann::json validation_metrics(const cap::Captioner& model, std::span<const TrainExample> val,
                                  const dual::DualEncoder* encoder, const dual::ClipScoreConfig& clip);

// MLE phase then SCST phase. Reward prerequisites are checked before any
// update. on_epoch sees each report with the model as of that epoch.
cap::Captioner train(cap::Captioner model, std::span<const TrainExample> train_set, std::span<const TrainExample> val_set,
                     const TrainConfig& cfg, const dual::DualEncoder* encoder,
                     std::vector<EpochReport>* report = nullptr,
                     const std::function<void(const EpochReport&, const cap::Captioner&)>& on_epoch = {});

}  // namespace clipcap::rl
