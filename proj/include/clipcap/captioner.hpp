#pragma once

// Transformer encoder-decoder captioner conditioned on one image feature
// vector (a length-1 encoder sequence). Training uses the differentiable
// forward pass; decoding uses an incremental key/value-cached path that
// reproduces the same log-probabilities.

#include "clipcap/autograd.hpp"
#include "clipcap/image.hpp"
#include "clipcap/params.hpp"
#include "clipcap/textproc.hpp"

#include <nlohmann/json.hpp>

#include <memory>
#include <span>
#include <string>
#include <vector>

namespace clipcap::cap {

struct CaptionerConfig {
    int d_img = 64;
    int d_model = 64;
    int n_heads = 4;
    int n_enc = 2;
    int n_dec = 2;
    int d_ff = 128;
    // Maximum decoder sequence length including BOS: prefixes hold at most
    // max_len - 1 tokens and at most max_len - 1 tokens are generated.
    int max_len = 20;
    int vocab_size = 0;
    double init_std = 0.02;

    // Six encoder and six decoder layers.
    static CaptionerConfig paper_shape(int d_img, int vocab_size);

    void validate() const;
    nlohmann::json to_json() const;
    static CaptionerConfig from_json(const nlohmann::json& j);
};

class Captioner {
public:
    static Captioner init(const CaptionerConfig& config, text::Vocabulary vocab, Rng& rng);
    Captioner(CaptionerConfig config, text::Vocabulary vocab, ParamStore params);

    const CaptionerConfig& config() const noexcept { return config_; }
    const text::Vocabulary& vocab() const noexcept { return vocab_; }
    const ParamStore& params() const noexcept { return params_; }
    ParamStore& params() noexcept { return params_; }

private:
    CaptionerConfig config_;
    text::Vocabulary vocab_;
    ParamStore params_;
};

enum class DecodeMethod { greedy, beam, sample };
std::string_view to_string(DecodeMethod m);

struct DecodeResult {
    std::vector<int> tokens;  // emitted ids, EOS included when emitted
    std::vector<double> token_logprobs;
    double total_logprob = 0.0;
    DecodeMethod method = DecodeMethod::greedy;
    int beam_size = 1;

    bool finished() const { return !tokens.empty() && tokens.back() == text::Vocabulary::kEos; }
    // Tokens without the trailing EOS.
    std::vector<int> words() const;
};

// Differentiable pieces.
ag::Var encode_image(const Captioner& model, const Eigen::VectorXd& features);  // 1 x d_model memory
// Log-probabilities for every prefix position: T x V. prefix[0] must be BOS.
ag::Var decoder_log_probs(const Captioner& model, const ag::Var& memory, std::span<const int> prefix);

// Plain-value view of decoder_log_probs. Throws PrefixTooLong when the prefix
// has max_len or more tokens and DimensionMismatch on feature width.
ag::Matrix logits(const Captioner& model, const ImageRecord& image, std::span<const int> prefix);

// Mean teacher-forced negative log-likelihood of caption + EOS.
ag::Var mle_loss(const Captioner& model, const ImageRecord& image, std::span<const int> caption_ids);

// Sum of log P(token_t | prefix) over a fixed emitted sequence (EOS included
// if present). Gradients flow to the captioner parameters.
ag::Var sequence_logprob(const Captioner& model, const ImageRecord& image, std::span<const int> emitted);

struct DecodeOptions {
    bool length_normalize = false;  // beam ranking by mean token log-prob
};

DecodeResult greedy_decode(const Captioner& model, const ImageRecord& image);
DecodeResult beam_search(const Captioner& model, const ImageRecord& image, int beam_size,
                         const DecodeOptions& options = {});
// Multinomial sampling from the model distribution (PAD/BOS excluded).
DecodeResult sample_decode(const Captioner& model, const ImageRecord& image, Rng& rng);

// Incremental decoder state for one hypothesis; exposed for tests.
class IncrementalDecoder {
public:
    IncrementalDecoder(const Captioner& model, const Eigen::VectorXd& features);

    // Feeds the next prefix token and returns log-probabilities over the
    // vocabulary for the following position.
    Eigen::VectorXd step(int token);
    int length() const noexcept { return length_; }

private:
    struct Weights;
    std::shared_ptr<const Weights> weights_;
    int max_len_ = 0;
    std::vector<ag::Matrix> self_k_;
    std::vector<ag::Matrix> self_v_;
    std::vector<Eigen::RowVectorXd> cross_out_;  // cross-attention output per layer (one memory slot)
    int length_ = 0;
};

}  // namespace clipcap::cap
