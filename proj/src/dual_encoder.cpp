#include "clipcap/dual_encoder.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <set>

namespace clipcap::dual {

namespace {

constexpr double kGrammarEps = 1e-7;

// Pairs grouped so each batch holds distinct images: round r visits caption r
// of every image that has one, in shuffled image order.
std::vector<std::vector<std::pair<std::size_t, std::size_t>>> epoch_batches(std::span<const ImageCaptions> data,
                                                                            int batch_size, Rng& rng) {
    std::size_t rounds = 0;
    for (const auto& d : data) rounds = std::max(rounds, d.captions.size());
    std::vector<std::vector<std::pair<std::size_t, std::size_t>>> batches;
    for (std::size_t r = 0; r < rounds; ++r) {
        std::vector<std::size_t> images;
        for (std::size_t i = 0; i < data.size(); ++i) {
            if (r < data[i].captions.size()) images.push_back(i);
        }
        std::shuffle(images.begin(), images.end(), rng.engine());
        const std::size_t first = batches.size();
        for (std::size_t start = 0; start < images.size(); start += static_cast<std::size_t>(batch_size)) {
            std::vector<std::pair<std::size_t, std::size_t>> batch;
            for (std::size_t k = start; k < std::min(images.size(), start + static_cast<std::size_t>(batch_size)); ++k) {
                batch.emplace_back(images[k], r);
            }
            if (batch.size() < 2 && batches.size() > first) {
                batches.back().insert(batches.back().end(), batch.begin(), batch.end());
            } else if (batch.size() >= 2) {
                batches.push_back(std::move(batch));
            }
        }
    }
    std::shuffle(batches.begin(), batches.end(), rng.engine());
    return batches;
}

ag::Matrix stack_features(std::span<const Pair> batch, int d_img) {
    ag::Matrix feats(static_cast<ag::Index>(batch.size()), d_img);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        if (batch[i].image->features.size() != d_img) {
            throw DimensionMismatch("image '" + batch[i].image->image_id + "' has " +
                                    std::to_string(batch[i].image->features.size()) + " features, expected " +
                                    std::to_string(d_img));
        }
        feats.row(static_cast<ag::Index>(i)) = batch[i].image->features.transpose();
    }
    return feats;
}

ag::Var batch_text_embeddings(const DualEncoder& enc, std::span<const text::Caption* const> captions) {
    std::vector<ag::Var> rows;
    rows.reserve(captions.size());
    for (const auto* c : captions) rows.push_back(text_embedding(enc, enc.text_ids(*c)));
    return ag::concat_rows(rows);
}

ag::Var contrastive_from_embeddings(const DualEncoder& enc, const ag::Var& img, const ag::Var& txt) {
    ag::Var logits = ag::scale(ag::matmul(ag::l2_normalize_rows(img), ag::transpose(ag::l2_normalize_rows(txt))),
                               1.0 / enc.config().temperature);
    return contrastive_loss_from_logits(logits);
}

void check_distinct_images(std::span<const Pair> batch) {
    if (batch.size() < 2) throw BatchTooSmall("contrastive loss needs at least 2 pairs, got " + std::to_string(batch.size()));
    std::set<std::string> ids;
    for (const auto& p : batch) {
        if (!ids.insert(p.image->image_id).second) {
            throw ConfigInvalid("image '" + p.image->image_id + "' appears twice in one contrastive batch");
        }
    }
}

}  // namespace

void EncoderConfig::validate() const {
    if (d_img < 1 || d_tok < 1 || d_hidden < 1 || d_emb < 1 || grammar_hidden < 1 || max_len < 2) {
        throw ConfigInvalid("encoder dimensions must be positive and max_len >= 2");
    }
    if (!(temperature > 0.0)) throw ConfigInvalid("temperature must be > 0");
}

nlohmann::json EncoderConfig::to_json() const {
    return {{"d_img", d_img},         {"d_tok", d_tok},
            {"d_hidden", d_hidden},   {"d_emb", d_emb},
            {"max_len", max_len},     {"grammar_hidden", grammar_hidden},
            {"temperature", temperature}, {"init_std", init_std}};
}

EncoderConfig EncoderConfig::from_json(const nlohmann::json& j) {
    EncoderConfig c;
    c.d_img = j.at("d_img");
    c.d_tok = j.at("d_tok");
    c.d_hidden = j.at("d_hidden");
    c.d_emb = j.at("d_emb");
    c.max_len = j.at("max_len");
    c.grammar_hidden = j.at("grammar_hidden");
    c.temperature = j.at("temperature");
    c.init_std = j.value("init_std", c.init_std);
    c.validate();
    return c;
}

void ClipScoreConfig::validate() const {
    if (!(w > 0.0)) throw ConfigInvalid("CLIP-S weight w must be > 0");
}

DualEncoder::DualEncoder(EncoderConfig config, text::Vocabulary vocab, ParamStore params)
    : config_(config), vocab_(std::move(vocab)), params_(std::move(params)) {
    config_.validate();
}

DualEncoder DualEncoder::init(const EncoderConfig& config, text::Vocabulary vocab, Rng& rng) {
    config.validate();
    const double s = config.init_std;
    ParamStore p;
    p.add("image.w", random_matrix(rng, config.d_img, config.d_emb, 1.0 / std::sqrt(config.d_img)));
    p.add("image.b", ag::Matrix::Zero(1, config.d_emb));
    p.add("text.tok_emb", random_matrix(rng, vocab.size(), config.d_tok, s * 5.0));
    p.add("text.pos_emb", random_matrix(rng, config.max_len, config.d_tok, s));
    p.add("text.mix_cur", random_matrix(rng, config.d_tok, config.d_hidden, 1.0 / std::sqrt(config.d_tok)));
    p.add("text.mix_prev", random_matrix(rng, config.d_tok, config.d_hidden, 1.0 / std::sqrt(config.d_tok)));
    p.add("text.mix_b", ag::Matrix::Zero(1, config.d_hidden));
    p.add("text.proj_w", random_matrix(rng, config.d_hidden, config.d_emb, 1.0 / std::sqrt(config.d_hidden)));
    p.add("text.proj_b", ag::Matrix::Zero(1, config.d_emb));
    p.add("grammar.w1", random_matrix(rng, config.d_emb, config.grammar_hidden, 1.0 / std::sqrt(config.d_emb)));
    p.add("grammar.b1", ag::Matrix::Zero(1, config.grammar_hidden));
    p.add("grammar.w2", random_matrix(rng, config.grammar_hidden, 1, 1.0 / std::sqrt(config.grammar_hidden)));
    p.add("grammar.b2", ag::Matrix::Zero(1, 1));
    return DualEncoder(config, std::move(vocab), std::move(p));
}

std::vector<int> DualEncoder::text_ids(const text::Caption& caption) const {
    std::vector<int> ids;
    ids.reserve(caption.size() + 2);
    ids.push_back(text::Vocabulary::kBos);
    for (int id : vocab_.encode(caption)) ids.push_back(id);
    ids.push_back(text::Vocabulary::kEos);
    if (static_cast<int>(ids.size()) > config_.max_len) ids.resize(static_cast<std::size_t>(config_.max_len));
    return ids;
}

ag::Var image_embeddings(const DualEncoder& enc, const ag::Matrix& features) {
    if (features.cols() != enc.config().d_img) {
        throw DimensionMismatch("image features have width " + std::to_string(features.cols()) + ", expected " +
                                std::to_string(enc.config().d_img));
    }
    const auto& p = enc.params();
    return ag::add_row(ag::matmul(ag::constant(features), p.at("image.w")), p.at("image.b"));
}

ag::Var text_embedding(const DualEncoder& enc, std::span<const int> ids) {
    const auto& p = enc.params();
    if (ids.empty() || static_cast<int>(ids.size()) > enc.config().max_len) {
        throw std::invalid_argument("text_embedding: sequence length out of range");
    }
    std::vector<int> positions(ids.size());
    std::iota(positions.begin(), positions.end(), 0);
    ag::Var e = ag::add(ag::gather_rows(p.at("text.tok_emb"), ids), ag::gather_rows(p.at("text.pos_emb"), positions));
    ag::Var mixed = ag::add(ag::matmul(e, p.at("text.mix_cur")), ag::matmul(ag::shift_down(e), p.at("text.mix_prev")));
    ag::Var h = ag::tanh(ag::add_row(mixed, p.at("text.mix_b")));
    return ag::add_row(ag::matmul(ag::mean_rows(h), p.at("text.proj_w")), p.at("text.proj_b"));
}

ag::Var grammar_probabilities(const DualEncoder& enc, const ag::Var& text_emb) {
    const auto& p = enc.params();
    ag::Var hidden = ag::tanh(ag::add_row(ag::matmul(text_emb, p.at("grammar.w1")), p.at("grammar.b1")));
    ag::Var z = ag::add_row(ag::matmul(hidden, p.at("grammar.w2")), p.at("grammar.b2"));
    // Affine squash keeps the probability strictly inside (0, 1).
    return ag::add_scalar(ag::scale(ag::sigmoid(z), 1.0 - 2.0 * kGrammarEps), kGrammarEps);
}

Eigen::VectorXd encode_image(const DualEncoder& enc, const ImageRecord& image) {
    if (image.features.size() != enc.config().d_img) {
        throw DimensionMismatch("image '" + image.image_id + "' has " + std::to_string(image.features.size()) +
                                " features, expected " + std::to_string(enc.config().d_img));
    }
    ag::NoGradGuard no_grad;
    ag::Matrix f = image.features.transpose();
    return image_embeddings(enc, f).value().row(0).transpose();
}

Eigen::VectorXd encode_text(const DualEncoder& enc, const text::Caption& caption) {
    ag::NoGradGuard no_grad;
    return text_embedding(enc, enc.text_ids(caption)).value().row(0).transpose();
}

double clip_s(const Eigen::VectorXd& image_emb, const Eigen::VectorXd& text_emb, const ClipScoreConfig& cfg) {
    if (image_emb.size() != text_emb.size()) throw DimensionMismatch("embedding widths differ");
    const double ni = image_emb.norm();
    const double nt = text_emb.norm();
    if (ni == 0.0 || nt == 0.0) throw ZeroEmbedding(ni == 0.0 ? "image embedding has zero norm" : "text embedding has zero norm");
    const double cosine = image_emb.dot(text_emb) / (ni * nt);
    return cfg.w * std::clamp(cosine, 0.0, 1.0);
}

double clip_s(const DualEncoder& enc, const ClipScoreConfig& cfg, const ImageRecord& image,
              const text::Caption& caption) {
    return clip_s(encode_image(enc, image), encode_text(enc, caption), cfg);
}

double grammar_score(const DualEncoder& enc, const text::Caption& caption) {
    ag::NoGradGuard no_grad;
    return grammar_probabilities(enc, text_embedding(enc, enc.text_ids(caption))).item();
}

ag::Var contrastive_loss_from_logits(const ag::Var& logits) {
    if (logits.rows() != logits.cols()) throw std::invalid_argument("contrastive logits must be square");
    if (logits.rows() < 2) throw BatchTooSmall("contrastive loss needs at least 2 pairs");
    const double n = static_cast<double>(logits.rows());
    ag::Var image_to_text = ag::sum(ag::diagonal(ag::log_softmax_rows(logits)));
    ag::Var text_to_image = ag::sum(ag::diagonal(ag::log_softmax_rows(ag::transpose(logits))));
    return ag::scale(ag::add(image_to_text, text_to_image), -0.5 / n);
}

ag::Var contrastive_loss(const DualEncoder& enc, std::span<const Pair> batch) {
    check_distinct_images(batch);
    ag::Var img = image_embeddings(enc, stack_features(batch, enc.config().d_img));
    std::vector<const text::Caption*> caps;
    for (const auto& p : batch) caps.push_back(p.caption);
    return contrastive_from_embeddings(enc, img, batch_text_embeddings(enc, caps));
}

ag::Var grammar_bce(const ag::Var& probs, std::span<const int> labels, bool one_sided) {
    if (probs.cols() != 1 || probs.rows() != static_cast<ag::Index>(labels.size()) || labels.empty()) {
        throw std::invalid_argument("grammar_bce: one probability per label required");
    }
    ag::Matrix y(probs.rows(), 1);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] != 0 && labels[i] != 1) throw std::invalid_argument("grammar labels must be 0 or 1");
        y(static_cast<ag::Index>(i), 0) = labels[i];
    }
    ag::Var pos = ag::mul(ag::constant(y), ag::log(probs));
    ag::Var total = pos;
    if (!one_sided) {
        ag::Matrix one_minus_y = (1.0 - y.array()).matrix();
        ag::Var neg = ag::mul(ag::constant(one_minus_y), ag::log(ag::add_scalar(ag::scale(probs, -1.0), 1.0)));
        total = ag::add(pos, neg);
    }
    return ag::scale(ag::sum(total), -1.0 / static_cast<double>(labels.size()));
}

nlohmann::json EpochStats::to_json() const {
    return {{"epoch", epoch},         {"loss", loss},     {"contrastive", contrastive},
            {"grammar", grammar},     {"batches", batches}, {"skipped_negatives", skipped_negatives}};
}

std::vector<EpochStats> train_contrastive(DualEncoder& enc, std::span<const ImageCaptions> data,
                                          const ContrastiveTrainConfig& cfg,
                                          const std::function<void(const EpochStats&)>& on_epoch) {
    if (cfg.batch_size < 2) throw ConfigInvalid("contrastive batch size must be >= 2");
    Rng rng = Rng::substream(cfg.seed, "contrastive.batches");
    std::vector<std::string> names = enc.image_tower_names();
    for (auto& n : enc.text_tower_names()) names.push_back(n);
    Optimizer opt(cfg.optimizer, names);
    std::vector<EpochStats> report;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        EpochStats stats;
        stats.epoch = epoch;
        for (const auto& batch : epoch_batches(data, cfg.batch_size, rng)) {
            std::vector<Pair> pairs;
            for (auto [i, c] : batch) pairs.push_back({&data[i].image, &data[i].captions[c]});
            enc.params().zero_grad();
            ag::Var loss = contrastive_loss(enc, pairs);
            loss.backward();
            opt.step(enc.params());
            stats.loss += loss.item();
            stats.contrastive += loss.item();
            ++stats.batches;
        }
        if (stats.batches > 0) {
            stats.loss /= stats.batches;
            stats.contrastive /= stats.batches;
        }
        enc.params().zero_grad();
        report.push_back(stats);
        if (on_epoch) on_epoch(stats);
    }
    return report;
}

DualEncoder grammar_finetune(DualEncoder enc, std::span<const ImageCaptions> data, const GrammarFinetuneConfig& cfg,
                             std::vector<EpochStats>* report,
                             const std::function<void(const EpochStats&)>& on_epoch) {
    if (cfg.epochs <= 0) return enc;
    if (cfg.batch_size < 2) throw ConfigInvalid("finetune batch size must be >= 2");
    cfg.negatives.validate();
    Rng batch_rng = Rng::substream(cfg.seed, "grammar.batches");
    Rng neg_rng = Rng::substream(cfg.seed ^ cfg.negatives.rng_seed, "grammar.negatives");
    std::vector<std::string> names = enc.text_tower_names();
    for (auto& n : enc.grammar_head_names()) names.push_back(n);
    Optimizer opt(cfg.optimizer, names);

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        EpochStats stats;
        stats.epoch = epoch;
        for (const auto& batch : epoch_batches(data, cfg.batch_size, batch_rng)) {
            std::vector<Pair> pairs;
            for (auto [i, c] : batch) pairs.push_back({&data[i].image, &data[i].captions[c]});
            check_distinct_images(pairs);

            std::vector<text::Caption> negatives;
            for (const auto& p : pairs) {
                try {
                    negatives.push_back(text::generate_negative(*p.caption, enc.vocab(), cfg.negatives, neg_rng).caption);
                } catch (const CaptionTooShort& e) {
                    ++stats.skipped_negatives;
                }
            }

            enc.params().zero_grad();
            ag::Var img;
            {
                // Frozen image tower: its output enters the graph as a constant.
                ag::NoGradGuard no_grad;
                img = image_embeddings(enc, stack_features(pairs, enc.config().d_img));
            }
            std::vector<const text::Caption*> caps;
            for (const auto& p : pairs) caps.push_back(p.caption);
            ag::Var pos_emb = batch_text_embeddings(enc, caps);
            ag::Var contrastive = contrastive_from_embeddings(enc, ag::constant(img.value()), pos_emb);

            std::vector<ag::Var> all_emb{pos_emb};
            std::vector<int> labels(pairs.size(), 1);
            if (!negatives.empty()) {
                std::vector<const text::Caption*> neg_caps;
                for (const auto& n : negatives) neg_caps.push_back(&n);
                all_emb.push_back(batch_text_embeddings(enc, neg_caps));
                labels.insert(labels.end(), negatives.size(), 0);
            }
            ag::Var grammar = grammar_bce(grammar_probabilities(enc, ag::concat_rows(all_emb)), labels, cfg.one_sided_bce);
            ag::Var loss = ag::add(contrastive, grammar);
            loss.backward();
            opt.step(enc.params());

            stats.loss += loss.item();
            stats.contrastive += contrastive.item();
            stats.grammar += grammar.item();
            ++stats.batches;
        }
        if (stats.batches > 0) {
            stats.loss /= stats.batches;
            stats.contrastive /= stats.batches;
            stats.grammar /= stats.batches;
        }
        if (stats.skipped_negatives > 0) {
            std::cerr << "grammar finetune epoch " << epoch << ": skipped " << stats.skipped_negatives
                      << " captions too short to corrupt\n";
        }
        enc.params().zero_grad();
        if (report) report->push_back(stats);
        if (on_epoch) on_epoch(stats);
    }
    return enc;
}

double grammar_accuracy(const DualEncoder& enc, std::span<const GrammarExample> examples) {
    if (examples.empty()) return 0.0;
    std::size_t correct = 0;
    for (const auto& ex : examples) {
        const bool predicted = grammar_score(enc, ex.caption) >= 0.5;
        if (predicted == (ex.label == 1)) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(examples.size());
}

std::vector<GrammarExample> make_grammar_examples(std::span<const ImageCaptions> data, const text::Vocabulary& vocab,
                                                  const text::NegativeGenConfig& cfg, Rng& rng) {
    std::vector<GrammarExample> out;
    for (const auto& d : data) {
        for (const auto& c : d.captions) {
            try {
                auto neg = text::generate_negative(c, vocab, cfg, rng);
                out.push_back({c, 1});
                out.push_back({std::move(neg.caption), 0});
            } catch (const CaptionTooShort&) {
            }
        }
    }
    return out;
}

}  // namespace clipcap::dual
