#pragma once

// End-to-end toy-world runs shared by the ordering and degeneration checks.

#include "clipcap/captioner.hpp"
#include "clipcap/data_io.hpp"
#include "clipcap/dual_encoder.hpp"
#include "clipcap/rl_trainer.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace clipcap::toy {

struct PipelineConfig {
    int n_images = 500;
    int clip_epochs = 12;
    int grammar_epochs = 4;
    int mle_epochs = 15;
    int rl_epochs = 25;
    double rl_lr = 1e-3;
    rl::Estimator estimator = rl::Estimator::sample;
    int beam_size = 5;
    int alt_texts = 3;  // web-style keyword captions per image in the encoder corpus
    bool select_on_val = true;  // keep the RL epoch with the best mean validation reward
    bool verbose = false;
};

struct RunResult {
    std::uint64_t seed = 0;
    double grammar_accuracy = 0.0;            // held-out, after finetuning
    double reference_r1 = 0.0;                // salient references, mean over slots
    std::map<std::string, double> r1;         // per captioner: mle, clip_s, clip_s_grammar
    std::map<std::string, double> repetition; // mean repetition_rate per captioner
    std::map<std::string, std::vector<std::string>> samples;
    std::map<std::string, std::pair<double, double>> rl_reward;  // mean reward, first and last RL epoch
    std::map<std::string, int> selected_epoch;                    // RL epoch kept per captioner
    double seconds = 0.0;
};

// Captions the reward and retrieval encoders learn from: the salient
// references, every overall description and alt-text keyword captions.
std::vector<dual::ImageCaptions> encoder_corpus(const data::DatasetSplit& split, int alt_texts);
std::vector<rl::TrainExample> captioner_corpus(const data::DatasetSplit& split);

// Recall@1 of each caption set against the test images under a retrieval
// encoder (x100). Captions are indexed like split.examples.
double recall_at_1(const dual::DualEncoder& retrieval, const data::DatasetSplit& split,
                   const std::vector<std::string>& captions);

RunResult run_seed(std::uint64_t seed, const PipelineConfig& cfg);

}  // namespace clipcap::toy
