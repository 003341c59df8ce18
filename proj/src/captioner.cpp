#include "clipcap/captioner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace clipcap::cap {

namespace {

using text::Vocabulary;

std::string layer_name(const char* stack, int layer, const char* part) {
    return std::string(stack) + "." + std::to_string(layer) + "." + part;
}

void add_attention_params(ParamStore& p, const std::string& prefix, int d, double stddev, Rng& rng) {
    for (const char* m : {"wq", "wk", "wv", "wo"}) p.add(prefix + "." + m, random_matrix(rng, d, d, stddev));
    for (const char* b : {"bq", "bk", "bv", "bo"}) p.add(prefix + "." + b, ag::Matrix::Zero(1, d));
}

void add_norm_params(ParamStore& p, const std::string& prefix, int d) {
    p.add(prefix + ".g", ag::Matrix::Ones(1, d));
    p.add(prefix + ".b", ag::Matrix::Zero(1, d));
}

void add_ff_params(ParamStore& p, const std::string& prefix, int d, int d_ff, double stddev, Rng& rng) {
    p.add(prefix + ".w1", random_matrix(rng, d, d_ff, stddev));
    p.add(prefix + ".b1", ag::Matrix::Zero(1, d_ff));
    p.add(prefix + ".w2", random_matrix(rng, d_ff, d, stddev));
    p.add(prefix + ".b2", ag::Matrix::Zero(1, d));
}

ag::Var linear(const ParamStore& p, const ag::Var& x, const std::string& w, const std::string& b) {
    return ag::add_row(ag::matmul(x, p.at(w)), p.at(b));
}

ag::Var norm(const ParamStore& p, const ag::Var& x, const std::string& prefix) {
    return ag::layer_norm_rows(x, p.at(prefix + ".g"), p.at(prefix + ".b"));
}

ag::Var attention_block(const ParamStore& p, const std::string& prefix, const ag::Var& x, const ag::Var& memory,
                        int n_heads, bool causal) {
    ag::Var q = linear(p, x, prefix + ".wq", prefix + ".bq");
    ag::Var k = linear(p, memory, prefix + ".wk", prefix + ".bk");
    ag::Var v = linear(p, memory, prefix + ".wv", prefix + ".bv");
    return linear(p, ag::multi_head_attention(q, k, v, n_heads, causal), prefix + ".wo", prefix + ".bo");
}

ag::Var feed_forward(const ParamStore& p, const std::string& prefix, const ag::Var& x) {
    return linear(p, ag::gelu(linear(p, x, prefix + ".w1", prefix + ".b1")), prefix + ".w2", prefix + ".b2");
}

void check_features(const Captioner& model, const Eigen::VectorXd& features) {
    if (features.size() != model.config().d_img) {
        throw DimensionMismatch("captioner expects " + std::to_string(model.config().d_img) +
                                " image features, got " + std::to_string(features.size()));
    }
}

bool decodable(int token) { return token != Vocabulary::kPad && token != Vocabulary::kBos; }

// Plain-value helpers for the incremental path; each mirrors its graph op.
Eigen::RowVectorXd layer_norm_row(const Eigen::RowVectorXd& x, const ag::Matrix& g, const ag::Matrix& b) {
    const double mu = x.mean();
    Eigen::RowVectorXd centered = x.array() - mu;
    const double inv = 1.0 / std::sqrt(centered.array().square().mean() + 1e-5);
    return (centered.array() * inv * g.row(0).array() + b.row(0).array()).matrix();
}

Eigen::RowVectorXd gelu_row(const Eigen::RowVectorXd& x) {
    constexpr double c = 0.7978845608028654;
    constexpr double k = 0.044715;
    auto t = (c * (x.array() + k * x.array().cube())).tanh();
    return (0.5 * x.array() * (1.0 + t)).matrix();
}

Eigen::VectorXd log_softmax_vec(const Eigen::RowVectorXd& z) {
    const double m = z.maxCoeff();
    const double lse = m + std::log((z.array() - m).exp().sum());
    return (z.array() - lse).matrix().transpose();
}

}  // namespace

CaptionerConfig CaptionerConfig::paper_shape(int d_img, int vocab_size) {
    CaptionerConfig c;
    c.d_img = d_img;
    c.vocab_size = vocab_size;
    c.n_enc = 6;
    c.n_dec = 6;
    return c;
}

void CaptionerConfig::validate() const {
    if (n_enc < 1 || n_dec < 1) throw ConfigInvalid("captioner needs at least one encoder and one decoder layer");
    if (max_len < 2) throw ConfigInvalid("captioner max_len must be >= 2");
    if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0) throw ConfigInvalid("d_model must divide into n_heads");
    if (d_img < 1 || d_ff < 1) throw ConfigInvalid("captioner widths must be positive");
    if (vocab_size <= Vocabulary::kNumSpecial) throw ConfigInvalid("captioner vocabulary has no words");
}

nlohmann::json CaptionerConfig::to_json() const {
    return {{"d_img", d_img}, {"d_model", d_model}, {"n_heads", n_heads}, {"n_enc", n_enc},       {"n_dec", n_dec},
            {"d_ff", d_ff},   {"max_len", max_len}, {"vocab_size", vocab_size}, {"init_std", init_std}};
}

CaptionerConfig CaptionerConfig::from_json(const nlohmann::json& j) {
    CaptionerConfig c;
    c.d_img = j.at("d_img");
    c.d_model = j.at("d_model");
    c.n_heads = j.at("n_heads");
    c.n_enc = j.at("n_enc");
    c.n_dec = j.at("n_dec");
    c.d_ff = j.at("d_ff");
    c.max_len = j.at("max_len");
    c.vocab_size = j.at("vocab_size");
    c.init_std = j.value("init_std", c.init_std);
    c.validate();
    return c;
}

Captioner::Captioner(CaptionerConfig config, text::Vocabulary vocab, ParamStore params)
    : config_(config), vocab_(std::move(vocab)), params_(std::move(params)) {
    config_.validate();
    if (config_.vocab_size != vocab_.size()) throw ConfigInvalid("captioner vocab_size does not match vocabulary");
}

Captioner Captioner::init(const CaptionerConfig& config, text::Vocabulary vocab, Rng& rng) {
    config.validate();
    const int d = config.d_model;
    const double s = config.init_std;
    const double proj = 1.0 / std::sqrt(static_cast<double>(d));
    ParamStore p;
    p.add("vis.w", random_matrix(rng, config.d_img, d, 1.0 / std::sqrt(static_cast<double>(config.d_img))));
    p.add("vis.b", ag::Matrix::Zero(1, d));
    for (int l = 0; l < config.n_enc; ++l) {
        add_norm_params(p, layer_name("enc", l, "ln1"), d);
        add_attention_params(p, layer_name("enc", l, "attn"), d, proj, rng);
        add_norm_params(p, layer_name("enc", l, "ln2"), d);
        add_ff_params(p, layer_name("enc", l, "ff"), d, config.d_ff, proj, rng);
    }
    add_norm_params(p, "enc.ln", d);
    p.add("dec.tok_emb", random_matrix(rng, config.vocab_size, d, 1.0));
    p.add("dec.pos_emb", random_matrix(rng, config.max_len, d, s * 5.0));
    for (int l = 0; l < config.n_dec; ++l) {
        add_norm_params(p, layer_name("dec", l, "ln1"), d);
        add_attention_params(p, layer_name("dec", l, "self"), d, proj, rng);
        add_norm_params(p, layer_name("dec", l, "ln2"), d);
        add_attention_params(p, layer_name("dec", l, "cross"), d, proj, rng);
        add_norm_params(p, layer_name("dec", l, "ln3"), d);
        add_ff_params(p, layer_name("dec", l, "ff"), d, config.d_ff, proj, rng);
    }
    add_norm_params(p, "dec.ln", d);
    p.add("out.w", random_matrix(rng, d, config.vocab_size, proj));
    p.add("out.b", ag::Matrix::Zero(1, config.vocab_size));
    return Captioner(config, std::move(vocab), std::move(p));
}

std::string_view to_string(DecodeMethod m) {
    switch (m) {
        case DecodeMethod::greedy: return "greedy";
        case DecodeMethod::beam: return "beam";
        case DecodeMethod::sample: return "sample";
    }
    return "unknown";
}

std::vector<int> DecodeResult::words() const {
    std::vector<int> out = tokens;
    if (!out.empty() && out.back() == Vocabulary::kEos) out.pop_back();
    return out;
}

ag::Var encode_image(const Captioner& model, const Eigen::VectorXd& features) {
    check_features(model, features);
    const auto& p = model.params();
    const auto& cfg = model.config();
    ag::Matrix f = features.transpose();
    ag::Var x = linear(p, ag::constant(std::move(f)), "vis.w", "vis.b");
    for (int l = 0; l < cfg.n_enc; ++l) {
        ag::Var h = norm(p, x, layer_name("enc", l, "ln1"));
        x = ag::add(x, attention_block(p, layer_name("enc", l, "attn"), h, h, cfg.n_heads, false));
        x = ag::add(x, feed_forward(p, layer_name("enc", l, "ff"), norm(p, x, layer_name("enc", l, "ln2"))));
    }
    return norm(p, x, "enc.ln");
}

ag::Var decoder_log_probs(const Captioner& model, const ag::Var& memory, std::span<const int> prefix) {
    const auto& p = model.params();
    const auto& cfg = model.config();
    if (prefix.empty() || prefix.front() != Vocabulary::kBos) throw std::invalid_argument("prefix must start with BOS");
    if (static_cast<int>(prefix.size()) >= cfg.max_len) {
        throw PrefixTooLong("prefix of " + std::to_string(prefix.size()) + " tokens; max_len is " +
                            std::to_string(cfg.max_len));
    }
    std::vector<int> positions(prefix.size());
    std::iota(positions.begin(), positions.end(), 0);
    ag::Var x = ag::add(ag::gather_rows(p.at("dec.tok_emb"), prefix), ag::gather_rows(p.at("dec.pos_emb"), positions));
    for (int l = 0; l < cfg.n_dec; ++l) {
        ag::Var h = norm(p, x, layer_name("dec", l, "ln1"));
        x = ag::add(x, attention_block(p, layer_name("dec", l, "self"), h, h, cfg.n_heads, true));
        x = ag::add(x, attention_block(p, layer_name("dec", l, "cross"), norm(p, x, layer_name("dec", l, "ln2")),
                                       memory, cfg.n_heads, false));
        x = ag::add(x, feed_forward(p, layer_name("dec", l, "ff"), norm(p, x, layer_name("dec", l, "ln3"))));
    }
    return ag::log_softmax_rows(linear(p, norm(p, x, "dec.ln"), "out.w", "out.b"));
}

ag::Matrix logits(const Captioner& model, const ImageRecord& image, std::span<const int> prefix) {
    ag::NoGradGuard no_grad;
    return decoder_log_probs(model, encode_image(model, image.features), prefix).value();
}

ag::Var mle_loss(const Captioner& model, const ImageRecord& image, std::span<const int> caption_ids) {
    const int max_tokens = model.config().max_len - 2;
    if (static_cast<int>(caption_ids.size()) > max_tokens) {
        throw CaptionTooLong("caption of " + std::to_string(caption_ids.size()) + " tokens exceeds " +
                             std::to_string(max_tokens));
    }
    std::vector<int> prefix{Vocabulary::kBos};
    prefix.insert(prefix.end(), caption_ids.begin(), caption_ids.end());
    std::vector<int> targets(caption_ids.begin(), caption_ids.end());
    targets.push_back(Vocabulary::kEos);
    ag::Var logp = decoder_log_probs(model, encode_image(model, image.features), prefix);
    return ag::scale(ag::sum(ag::select_cols(logp, targets)), -1.0 / static_cast<double>(targets.size()));
}

ag::Var sequence_logprob(const Captioner& model, const ImageRecord& image, std::span<const int> emitted) {
    if (emitted.empty()) throw std::invalid_argument("sequence_logprob: empty sequence");
    std::vector<int> prefix{Vocabulary::kBos};
    prefix.insert(prefix.end(), emitted.begin(), emitted.end() - 1);
    std::vector<int> targets(emitted.begin(), emitted.end());
    ag::Var logp = decoder_log_probs(model, encode_image(model, image.features), prefix);
    return ag::sum(ag::select_cols(logp, targets));
}

// ---------------------------------------------------------------------------
// Incremental decoding

struct IncrementalDecoder::Weights {
    struct Attention {
        const ag::Matrix *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
    };
    struct Layer {
        const ag::Matrix *ln1g, *ln1b, *ln2g, *ln2b, *ln3g, *ln3b;
        Attention self_attn, cross;
        const ag::Matrix *w1, *b1, *w2, *b2;
    };
    const ag::Matrix *tok_emb, *pos_emb, *lng, *lnb, *out_w, *out_b;
    std::vector<Layer> layers;
    int n_heads;
    int d_model;

    explicit Weights(const Captioner& model) {
        const auto& p = model.params();
        auto m = [&](const std::string& n) { return &p.at(n).value(); };
        auto attn = [&](const std::string& pre) {
            return Attention{m(pre + ".wq"), m(pre + ".bq"), m(pre + ".wk"), m(pre + ".bk"),
                             m(pre + ".wv"), m(pre + ".bv"), m(pre + ".wo"), m(pre + ".bo")};
        };
        tok_emb = m("dec.tok_emb");
        pos_emb = m("dec.pos_emb");
        lng = m("dec.ln.g");
        lnb = m("dec.ln.b");
        out_w = m("out.w");
        out_b = m("out.b");
        n_heads = model.config().n_heads;
        d_model = model.config().d_model;
        for (int l = 0; l < model.config().n_dec; ++l) {
            Layer L{};
            L.ln1g = m(layer_name("dec", l, "ln1") + ".g");
            L.ln1b = m(layer_name("dec", l, "ln1") + ".b");
            L.ln2g = m(layer_name("dec", l, "ln2") + ".g");
            L.ln2b = m(layer_name("dec", l, "ln2") + ".b");
            L.ln3g = m(layer_name("dec", l, "ln3") + ".g");
            L.ln3b = m(layer_name("dec", l, "ln3") + ".b");
            L.self_attn = attn(layer_name("dec", l, "self"));
            L.cross = attn(layer_name("dec", l, "cross"));
            L.w1 = m(layer_name("dec", l, "ff") + ".w1");
            L.b1 = m(layer_name("dec", l, "ff") + ".b1");
            L.w2 = m(layer_name("dec", l, "ff") + ".w2");
            L.b2 = m(layer_name("dec", l, "ff") + ".b2");
            layers.push_back(L);
        }
    }
};

IncrementalDecoder::IncrementalDecoder(const Captioner& model, const Eigen::VectorXd& features)
    : weights_(std::make_shared<const Weights>(model)), max_len_(model.config().max_len) {
    const int d = model.config().d_model;
    Eigen::RowVectorXd memory;
    {
        ag::NoGradGuard no_grad;
        memory = encode_image(model, features).value().row(0);
    }
    for (const auto& L : weights_->layers) {
        self_k_.emplace_back(max_len_, d);
        self_v_.emplace_back(max_len_, d);
        // One memory slot: attention weight is exactly 1 whatever the query.
        Eigen::RowVectorXd v = memory * *L.cross.wv + L.cross.bv->row(0);
        cross_out_.push_back(v * *L.cross.wo + L.cross.bo->row(0));
    }
}

Eigen::VectorXd IncrementalDecoder::step(int token) {
    const Weights& w = *weights_;
    if (length_ >= max_len_ - 1) throw PrefixTooLong("incremental decoder is at max_len");
    const int pos = length_;
    const int dh = w.d_model / w.n_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    Eigen::RowVectorXd x = w.tok_emb->row(token) + w.pos_emb->row(pos);
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        const auto& L = w.layers[l];
        Eigen::RowVectorXd h = layer_norm_row(x, *L.ln1g, *L.ln1b);
        Eigen::RowVectorXd q = h * *L.self_attn.wq + L.self_attn.bq->row(0);
        self_k_[l].row(pos) = h * *L.self_attn.wk + L.self_attn.bk->row(0);
        self_v_[l].row(pos) = h * *L.self_attn.wv + L.self_attn.bv->row(0);
        Eigen::RowVectorXd attn(w.d_model);
        for (int head = 0; head < w.n_heads; ++head) {
            const int c0 = head * dh;
            Eigen::RowVectorXd scores =
                (q.segment(c0, dh) * self_k_[l].block(0, c0, pos + 1, dh).transpose()) * inv_sqrt;
            const double m = scores.maxCoeff();
            scores = (scores.array() - m).exp();
            scores /= scores.sum();
            attn.segment(c0, dh) = scores * self_v_[l].block(0, c0, pos + 1, dh);
        }
        x += attn * *L.self_attn.wo + L.self_attn.bo->row(0);
        x += cross_out_[l];
        Eigen::RowVectorXd f = layer_norm_row(x, *L.ln3g, *L.ln3b);
        x += gelu_row(f * *L.w1 + L.b1->row(0)) * *L.w2 + L.b2->row(0);
    }
    ++length_;
    Eigen::RowVectorXd z = layer_norm_row(x, *w.lng, *w.lnb) * *w.out_w + w.out_b->row(0);
    return log_softmax_vec(z);
}

// ---------------------------------------------------------------------------
// Decoding strategies

DecodeResult greedy_decode(const Captioner& model, const ImageRecord& image) {
    check_features(model, image.features);
    IncrementalDecoder dec(model, image.features);
    DecodeResult r;
    r.method = DecodeMethod::greedy;
    r.beam_size = 1;
    int token = Vocabulary::kBos;
    const int max_tokens = model.config().max_len - 1;
    while (static_cast<int>(r.tokens.size()) < max_tokens) {
        Eigen::VectorXd lp = dec.step(token);
        int best = -1;
        for (int v = 0; v < lp.size(); ++v) {
            if (decodable(v) && (best < 0 || lp(v) > lp(best))) best = v;
        }
        r.tokens.push_back(best);
        r.token_logprobs.push_back(lp(best));
        r.total_logprob += lp(best);
        token = best;
        if (best == Vocabulary::kEos) break;
    }
    return r;
}

namespace {

struct Hypothesis {
    std::vector<int> tokens;
    std::vector<double> logprobs;
    double score = 0.0;
    IncrementalDecoder state;
    Eigen::VectorXd next;
};

double rank_score(double score, std::size_t length, bool normalize) {
    return normalize ? score / static_cast<double>(std::max<std::size_t>(length, 1)) : score;
}

}  // namespace

DecodeResult beam_search(const Captioner& model, const ImageRecord& image, int beam_size, const DecodeOptions& options) {
    if (beam_size < 1) throw ConfigInvalid("beam_size must be >= 1");
    check_features(model, image.features);
    const int max_tokens = model.config().max_len - 1;
    const bool norm = options.length_normalize;

    std::vector<Hypothesis> live;
    {
        IncrementalDecoder dec(model, image.features);
        Eigen::VectorXd next = dec.step(Vocabulary::kBos);
        live.push_back(Hypothesis{{}, {}, 0.0, std::move(dec), std::move(next)});
    }
    struct Finished {
        std::vector<int> tokens;
        std::vector<double> logprobs;
        double score;
    };
    std::vector<Finished> finished;
    auto better_finished = [&](const Finished& a, const Finished& b) {
        const double ra = rank_score(a.score, a.tokens.size(), norm);
        const double rb = rank_score(b.score, b.tokens.size(), norm);
        if (ra != rb) return ra > rb;
        return a.tokens < b.tokens;
    };

    struct Candidate {
        double rank;
        double score;
        std::size_t beam;
        int token;
    };
    for (int t = 0; t < max_tokens && !live.empty(); ++t) {
        std::vector<Candidate> cands;
        for (std::size_t b = 0; b < live.size(); ++b) {
            const auto& h = live[b];
            for (int v = 0; v < h.next.size(); ++v) {
                if (!decodable(v)) continue;
                const double s = h.score + h.next(v);
                cands.push_back({rank_score(s, h.tokens.size() + 1, norm), s, b, v});
            }
        }
        const std::size_t keep = std::min<std::size_t>(cands.size(), static_cast<std::size_t>(beam_size));
        std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                          [](const Candidate& a, const Candidate& b) {
                              if (a.rank != b.rank) return a.rank > b.rank;
                              if (a.beam != b.beam) return a.beam < b.beam;
                              return a.token < b.token;
                          });
        const bool last_step = t == max_tokens - 1;
        std::vector<Hypothesis> next_live;
        for (std::size_t i = 0; i < keep; ++i) {
            const auto& c = cands[i];
            const auto& parent = live[c.beam];
            std::vector<int> toks = parent.tokens;
            std::vector<double> lps = parent.logprobs;
            toks.push_back(c.token);
            lps.push_back(parent.next(c.token));
            if (c.token == Vocabulary::kEos || last_step) {
                finished.push_back({std::move(toks), std::move(lps), c.score});
                continue;
            }
            IncrementalDecoder state = parent.state;
            Eigen::VectorXd next = state.step(c.token);
            next_live.push_back(Hypothesis{std::move(toks), std::move(lps), c.score, std::move(state), std::move(next)});
        }
        live = std::move(next_live);
        // Unnormalized scores only fall as tokens are added, so no live beam
        // can overtake the best finished hypothesis once it leads.
        if (!norm && !finished.empty() && !live.empty()) {
            double best_finished = -std::numeric_limits<double>::infinity();
            for (const auto& f : finished) best_finished = std::max(best_finished, f.score);
            double best_live = -std::numeric_limits<double>::infinity();
            for (const auto& h : live) best_live = std::max(best_live, h.score);
            if (best_finished >= best_live) break;
        }
    }

    const Finished& best = *std::min_element(finished.begin(), finished.end(),
                                             [&](const Finished& a, const Finished& b) { return better_finished(a, b); });
    DecodeResult r;
    r.method = DecodeMethod::beam;
    r.beam_size = beam_size;
    r.tokens = best.tokens;
    r.token_logprobs = best.logprobs;
    for (double lp : r.token_logprobs) r.total_logprob += lp;
    return r;
}

DecodeResult sample_decode(const Captioner& model, const ImageRecord& image, Rng& rng) {
    check_features(model, image.features);
    IncrementalDecoder dec(model, image.features);
    DecodeResult r;
    r.method = DecodeMethod::sample;
    r.beam_size = 1;
    int token = Vocabulary::kBos;
    const int max_tokens = model.config().max_len - 1;
    while (static_cast<int>(r.tokens.size()) < max_tokens) {
        Eigen::VectorXd lp = dec.step(token);
        double total = 0.0;
        for (int v = 0; v < lp.size(); ++v) {
            if (decodable(v)) total += std::exp(lp(v));
        }
        double u = rng.uniform() * total;
        int pick = -1;
        for (int v = 0; v < lp.size(); ++v) {
            if (!decodable(v)) continue;
            pick = v;
            u -= std::exp(lp(v));
            if (u < 0.0) break;
        }
        r.tokens.push_back(pick);
        r.token_logprobs.push_back(lp(pick));
        r.total_logprob += lp(pick);
        token = pick;
        if (pick == Vocabulary::kEos) break;
    }
    return r;
}

}  // namespace clipcap::cap
