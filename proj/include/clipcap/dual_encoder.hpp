#pragma once

// Toy contrastive image-text encoder used as the reward model: a linear image
// tower, an order-sensitive text tower, a grammar head on the text embedding,
// the symmetric InfoNCE objective, and grammar finetuning with a frozen image
// tower.

#include "clipcap/autograd.hpp"
#include "clipcap/image.hpp"
#include "clipcap/params.hpp"
#include "clipcap/textproc.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace clipcap::dual {

struct EncoderConfig {
    int d_img = 64;
    int d_tok = 48;       // token/position embedding width
    int d_hidden = 64;    // width of the bigram mixing layer
    int d_emb = 32;
    int max_len = 64;     // longer captions are truncated before encoding
    int grammar_hidden = 32;
    double temperature = 0.07;
    double init_std = 0.1;

    void validate() const;
    nlohmann::json to_json() const;
    static EncoderConfig from_json(const nlohmann::json& j);
};

struct ClipScoreConfig {
    double w = 2.5;
    void validate() const;
};

// Parameter names are prefixed by tower: "image.", "text." and "grammar.".
class DualEncoder {
public:
    static DualEncoder init(const EncoderConfig& config, text::Vocabulary vocab, Rng& rng);
    DualEncoder(EncoderConfig config, text::Vocabulary vocab, ParamStore params);

    const EncoderConfig& config() const noexcept { return config_; }
    const text::Vocabulary& vocab() const noexcept { return vocab_; }
    const ParamStore& params() const noexcept { return params_; }
    ParamStore& params() noexcept { return params_; }

    std::vector<std::string> image_tower_names() const { return params_.names_with_prefix("image."); }
    std::vector<std::string> text_tower_names() const { return params_.names_with_prefix("text."); }
    std::vector<std::string> grammar_head_names() const { return params_.names_with_prefix("grammar."); }

    // [BOS] caption [EOS] ids, truncated to max_len.
    std::vector<int> text_ids(const text::Caption& caption) const;

private:
    EncoderConfig config_;
    text::Vocabulary vocab_;
    ParamStore params_;
};

// Differentiable forward passes.
ag::Var image_embeddings(const DualEncoder& enc, const ag::Matrix& features);  // B x d_img -> B x d_emb
ag::Var text_embedding(const DualEncoder& enc, std::span<const int> ids);       // -> 1 x d_emb
ag::Var grammar_probabilities(const DualEncoder& enc, const ag::Var& text_emb); // B x d_emb -> B x 1

// Inference helpers (no graph).
Eigen::VectorXd encode_image(const DualEncoder& enc, const ImageRecord& image);
Eigen::VectorXd encode_text(const DualEncoder& enc, const text::Caption& caption);

// w * max(cos(e_img, e_txt), 0). Throws ZeroEmbedding when either norm is 0.
double clip_s(const Eigen::VectorXd& image_emb, const Eigen::VectorXd& text_emb, const ClipScoreConfig& cfg);
double clip_s(const DualEncoder& enc, const ClipScoreConfig& cfg, const ImageRecord& image,
              const text::Caption& caption);

double grammar_score(const DualEncoder& enc, const text::Caption& caption);

// Symmetric cross-entropy over the rows and columns of an n x n logit matrix
// whose diagonal holds the matching pairs.
ag::Var contrastive_loss_from_logits(const ag::Var& logits);

struct Pair {
    const ImageRecord* image;
    const text::Caption* caption;
};

// Cosine similarities over the batch divided by the temperature, then the
// symmetric InfoNCE loss. Requires >= 2 pairs with distinct image ids.
ag::Var contrastive_loss(const DualEncoder& enc, std::span<const Pair> batch);

// Binary cross-entropy averaged over the batch. probs is B x 1. With
// one_sided set only the -y log g term is kept.
ag::Var grammar_bce(const ag::Var& probs, std::span<const int> labels, bool one_sided = false);

// Image with all of its reference captions.
struct ImageCaptions {
    ImageRecord image;
    std::vector<text::Caption> captions;
};

struct EpochStats {
    int epoch = 0;
    double loss = 0.0;
    double contrastive = 0.0;
    double grammar = 0.0;
    int batches = 0;
    int skipped_negatives = 0;
    nlohmann::json to_json() const;
};

struct ContrastiveTrainConfig {
    int epochs = 10;
    int batch_size = 32;
    OptimizerConfig optimizer{OptimizerConfig::Kind::adam, 3e-3};
    std::uint64_t seed = 0;
};

// Trains every tower on the contrastive objective. One pass over every
// (image, caption) pair per epoch, batches never repeat an image.
std::vector<EpochStats> train_contrastive(DualEncoder& enc, std::span<const ImageCaptions> data,
                                          const ContrastiveTrainConfig& cfg,
                                          const std::function<void(const EpochStats&)>& on_epoch = {});

struct GrammarFinetuneConfig {
    int epochs = 5;
    int batch_size = 32;
    OptimizerConfig optimizer{OptimizerConfig::Kind::adam, 1e-3};
    text::NegativeGenConfig negatives;
    bool one_sided_bce = false;
    std::uint64_t seed = 0;
};

// Jointly trains the text tower and grammar head on contrastive + grammar
// BCE, one fresh negative per reference caption per epoch. Image-tower
// parameters are never written.
DualEncoder grammar_finetune(DualEncoder enc, std::span<const ImageCaptions> data, const GrammarFinetuneConfig& cfg,
                             std::vector<EpochStats>* report = nullptr,
                             const std::function<void(const EpochStats&)>& on_epoch = {});

struct GrammarExample {
    text::Caption caption;
    int label;  // 1 for a reference caption, 0 for a corrupted one
};

// Threshold 0.5.
double grammar_accuracy(const DualEncoder& enc, std::span<const GrammarExample> examples);

// References and one fresh negative per reference (captions too short to
// corrupt are skipped).
std::vector<GrammarExample> make_grammar_examples(std::span<const ImageCaptions> data, const text::Vocabulary& vocab,
                                                  const text::NegativeGenConfig& cfg, Rng& rng);

}  // namespace clipcap::dual
