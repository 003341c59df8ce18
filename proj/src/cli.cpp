#include "clipcap/cli.hpp"

#include "clipcap/captioner.hpp"
#include "clipcap/checkpoint.hpp"
#include "clipcap/data_io.hpp"
#include "clipcap/dual_encoder.hpp"
#include "clipcap/errors.hpp"
#include "clipcap/metrics.hpp"
#include "clipcap/rl_trainer.hpp"
#include "clipcap/rng.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

namespace clipcap::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Usage problems detected after parsing (e.g. a reward missing its encoder).
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct RunRecord {
    std::vector<fs::path> inputs;
    std::vector<fs::path> outputs;
    json seeds = json::object();
    fs::path manifest;
};

struct Command {
    CLI::App* app = nullptr;
    std::function<void(RunRecord&)> action;
};

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out << text;
}

void require_file(const fs::path& path, const std::string& what) {
    if (!fs::is_regular_file(path)) throw IoError(what + " '" + path.string() + "' does not exist");
}

// Caption corpora: "refs" (salient references), "refs+overall" (plus the
// overall annotations) and "web" (refs+overall plus alt-text keyword lists).
std::vector<dual::ImageCaptions> encoder_data(const data::DatasetSplit& split, const std::string& corpus,
                                              int alt_texts = 0) {
    if (corpus != "refs" && corpus != "refs+overall" && corpus != "web") {
        throw ConfigInvalid("--corpus must be refs, refs+overall or web");
    }
    if (alt_texts < 0) throw ConfigInvalid("--alt-texts must be >= 0");
    std::vector<dual::ImageCaptions> out;
    for (const auto& ex : split.examples) {
        dual::ImageCaptions ic{ex.image, ex.references};
        if (corpus != "refs") {
            for (const auto& o : ex.annotation.overall) ic.captions.push_back(text::Caption::parse(o));
        }
        if (corpus == "web") {
            for (auto& c : data::alt_text_captions(ex.scene, alt_texts)) ic.captions.push_back(std::move(c));
        }
        out.push_back(std::move(ic));
    }
    return out;
}

text::Vocabulary corpus_vocab(const std::vector<dual::ImageCaptions>& data, int min_freq) {
    std::vector<text::Caption> all;
    for (const auto& d : data) all.insert(all.end(), d.captions.begin(), d.captions.end());
    if (all.empty()) throw EmptyCorpus("no captions to build a vocabulary from");
    return text::Vocabulary::build(all, min_freq);
}

std::vector<rl::TrainExample> captioner_data(const data::DatasetSplit& split) {
    std::vector<rl::TrainExample> out;
    for (const auto& ex : split.examples) out.push_back({ex.image, ex.references});
    return out;
}

void write_report(const fs::path& path, const std::string& kind, const std::vector<json>& records) {
    data::JsonlWriter w(path, kind);
    for (const auto& r : records) w.write(r);
    w.close();
}

// Resolved option values (defaults < config file < flags), in declaration order.
std::vector<std::pair<std::string, std::string>> resolved_options(const CLI::App* app) {
    std::vector<std::pair<std::string, std::string>> out;
    for (const CLI::Option* opt : app->get_options()) {
        if (opt->get_lnames().empty()) continue;
        const std::string name = opt->get_lnames().front();
        if (name == "help") continue;
        if (opt->get_type_size() == 0) {
            if (opt->count() > 0) out.emplace_back(name, "true");
            continue;
        }
        std::string value;
        if (opt->count() > 0) {
            const auto& results = opt->results();
            for (std::size_t i = 0; i < results.size(); ++i) value += (i ? "," : "") + results[i];
        } else {
            value = opt->get_default_str();
        }
        if (!value.empty()) out.emplace_back(name, value);
    }
    return out;
}

void write_manifest(const std::string& command, const CLI::App* app, const RunRecord& rec) {
    json argv = json::array({command});
    json config = json::object();
    for (const auto& [name, value] : resolved_options(app)) {
        config[name] = value;
        argv.push_back("--" + name);
        const CLI::Option* opt = app->get_option("--" + name);
        if (opt->get_type_size() != 0) argv.push_back(value);
    }
    json inputs = json::array();
    for (const auto& p : rec.inputs) inputs.push_back({{"path", p.string()}, {"fnv1a64", file_digest(p)}});
    json outputs = json::array();
    for (const auto& p : rec.outputs) outputs.push_back({{"path", p.string()}, {"fnv1a64", file_digest(p)}});
    const json manifest = {{"format", "clipcap.manifest"}, {"version", 1},       {"command", command},
                           {"argv", argv},                 {"config", config},   {"seeds", rec.seeds},
                           {"inputs", inputs},             {"outputs", outputs}};
    write_text(rec.manifest, manifest.dump(2) + "\n");
}

std::vector<int> parse_ks(const std::string& text) {
    std::vector<int> ks;
    std::stringstream in(text);
    for (std::string item; std::getline(in, item, ',');) {
        try {
            std::size_t used = 0;
            const int k = std::stoi(item, &used);
            if (used != item.size() || k < 1) throw std::invalid_argument(item);
            ks.push_back(k);
        } catch (const std::logic_error&) {
            throw UsageError("--ks expects a comma-separated list of positive integers, got '" + text + "'");
        }
    }
    if (ks.empty()) throw UsageError("--ks is empty");
    return ks;
}

// ---------------------------------------------------------------------------
// Subcommands

Command add_generate_world(CLI::App& app) {
    auto* sub = app.add_subcommand("generate-world", "Generate the synthetic scene world (train/val/test splits)");
    struct Opts {
        int n = 0;
        std::uint64_t seed = 0;
        std::string out;
        int refs = 5;
        int annotators = 5;
        int d_img = 64;
    };
    auto o = std::make_shared<Opts>();
    sub->add_option("--n", o->n, "Number of scenes (>= 10)")->required();
    sub->add_option("--seed", o->seed, "Root seed");
    sub->add_option("--out", o->out, "Output directory")->required();
    sub->add_option("--refs-per-image", o->refs, "Salient references per scene");
    sub->add_option("--annotators", o->annotators, "Fine-grained annotators per criterion");
    sub->add_option("--d-img", o->d_img, "Image feature width");
    return {sub, [o](RunRecord& rec) {
                data::WorldConfig wc;
                wc.refs_per_image = o->refs;
                wc.annotators = o->annotators;
                wc.d_img = o->d_img;
                const data::World world = data::generate_world(o->n, wc, o->seed);
                const fs::path out(o->out);
                for (const data::DatasetSplit* split : {&world.train, &world.val, &world.test}) {
                    const fs::path split_path = out / (split->name + ".jsonl");
                    const fs::path caps_path = out / (split->name + ".captions.jsonl");
                    const fs::path fine_path = out / (split->name + ".fine_grained.jsonl");
                    data::save_split(split_path, *split, wc);
                    data::save_captions(caps_path, data::references_of(*split));
                    data::save_fine_grained(fine_path, data::annotations_of(*split));
                    rec.outputs.insert(rec.outputs.end(), {split_path, caps_path, fine_path});
                }
                rec.seeds["world"] = o->seed;
                rec.manifest = out / "manifest.json";
                std::cerr << "generate-world: " << world.train.examples.size() << " train, " << world.val.examples.size()
                          << " val, " << world.test.examples.size() << " test scenes -> " << out.string() << "\n";
            }};
}

Command add_generate_negatives(CLI::App& app) {
    auto* sub = app.add_subcommand("generate-negatives", "Export corrupted (ungrammatical) captions");
    struct Opts {
        std::string data, out;
        std::uint64_t seed = 0;
        int n_max_gram = 3, n_max_repeat = 3, n_max_tokens = 3;
    };
    auto o = std::make_shared<Opts>();
    sub->add_option("--data", o->data, "Split file")->required();
    sub->add_option("--out", o->out, "Output negatives file")->required();
    sub->add_option("--seed", o->seed, "Root seed");
    sub->add_option("--n-max-gram", o->n_max_gram, "Longest repeated/removed n-gram");
    sub->add_option("--n-max-repeat", o->n_max_repeat, "Most repetitions");
    sub->add_option("--n-max-tokens", o->n_max_tokens, "Most inserted/swapped tokens");
    return {sub, [o](RunRecord& rec) {
                require_file(o->data, "split file");
                const data::DatasetSplit split = data::load_split(o->data);
                const auto corpus = encoder_data(split, "refs");
                const text::Vocabulary vocab = corpus_vocab(corpus, 1);
                text::NegativeGenConfig cfg{o->n_max_gram, o->n_max_repeat, o->n_max_tokens, o->seed};
                cfg.validate();
                Rng rng = Rng::substream(o->seed, "negatives");
                data::JsonlWriter w(o->out, "negatives");
                int skipped = 0;
                for (const auto& ex : split.examples) {
                    for (const auto& ref : ex.references) {
                        try {
                            const auto neg = text::generate_negative(ref, vocab, cfg, rng);
                            w.write({{"image_id", ex.scene.image_id},
                                     {"original", ref.text()},
                                     {"negative", neg.caption.text()},
                                     {"operation", text::to_string(neg.op)}});
                        } catch (const CaptionTooShort&) {
                            ++skipped;
                        }
                    }
                }
                w.close();
                if (skipped) std::cerr << "generate-negatives: skipped " << skipped << " captions too short to corrupt\n";
                rec.inputs.push_back(o->data);
                rec.outputs.push_back(o->out);
                rec.seeds["negatives"] = o->seed;
                rec.manifest = o->out + ".manifest.json";
            }};
}

Command add_train_clip(CLI::App& app) {
    auto* sub = app.add_subcommand("train-clip", "Contrastively pretrain the dual encoder");
    struct Opts {
        std::string data, out, report, corpus = "web";
        int epochs = 10, batch = 32, min_freq = 1, alt_texts = 3;
        double lr = 3e-3;
        std::uint64_t seed = 0;
    };
    auto o = std::make_shared<Opts>();
    sub->add_option("--data", o->data, "Training split file")->required();
    sub->add_option("--out", o->out, "Output checkpoint")->required();
    sub->add_option("--epochs", o->epochs, "Training epochs");
    sub->add_option("--batch-size", o->batch, "Pairs per batch");
    sub->add_option("--lr", o->lr, "Adam learning rate");
    sub->add_option("--seed", o->seed, "Root seed");
    sub->add_option("--corpus", o->corpus, "Caption corpus: refs, refs+overall or web (adds alt-text keyword lists)");
    sub->add_option("--alt-texts", o->alt_texts, "Alt-text keyword lists per image for the web corpus");
    sub->add_option("--min-freq", o->min_freq, "Vocabulary frequency cutoff");
    sub->add_option("--report", o->report, "Per-epoch report (default: <out>.report.jsonl)");
    return {sub, [o](RunRecord& rec) {
                require_file(o->data, "split file");
                if (o->epochs < 0) throw ConfigInvalid("--epochs must be >= 0");
                const data::DatasetSplit split = data::load_split(o->data);
                const auto corpus = encoder_data(split, o->corpus, o->alt_texts);
                const text::Vocabulary vocab = corpus_vocab(corpus, o->min_freq);
                dual::EncoderConfig ecfg;
                ecfg.d_img = static_cast<int>(corpus.front().image.features.size());
                Rng init = Rng::substream(o->seed, "encoder.init");
                dual::DualEncoder enc = dual::DualEncoder::init(ecfg, vocab, init);
                dual::ContrastiveTrainConfig tcfg;
                tcfg.epochs = o->epochs;
                tcfg.batch_size = o->batch;
                tcfg.optimizer.lr = o->lr;
                tcfg.seed = Rng::substream(o->seed, "encoder.train").next_u64();
                std::vector<json> report;
                dual::train_contrastive(enc, corpus, tcfg, [&](const dual::EpochStats& s) {
                    json j = s.to_json();
                    j["phase"] = "contrastive";
                    report.push_back(j);
                    std::cerr << "train-clip: epoch " << s.epoch << " loss " << s.loss << "\n";
                });
                ckpt::save_encoder(o->out, enc, {{"stage", "contrastive"}, {"epochs", o->epochs}});
                const fs::path report_path = o->report.empty() ? o->out + ".report.jsonl" : o->report;
                write_report(report_path, "report", report);
                rec.inputs.push_back(o->data);
                rec.outputs.insert(rec.outputs.end(), {o->out, report_path});
                rec.seeds["encoder"] = o->seed;
                rec.manifest = o->out + ".manifest.json";
            }};
}

Command add_finetune_grammar(CLI::App& app) {
    auto* sub = app.add_subcommand("finetune-grammar", "Finetune the text tower and grammar head (image tower frozen)");
    struct Opts {
        std::string clip_ckpt, data, out, report, corpus = "refs+overall";
        int epochs = 5, batch = 32, n_max_gram = 3, n_max_repeat = 3, n_max_tokens = 3;
        double lr = 1e-3;
        bool one_sided = false;
        std::uint64_t seed = 0;
    };
    auto o = std::make_shared<Opts>();
    sub->add_option("--clip-ckpt", o->clip_ckpt, "Pretrained encoder checkpoint")->required();
    sub->add_option("--data", o->data, "Training split file")->required();
    sub->add_option("--out", o->out, "Output checkpoint")->required();
    sub->add_option("--epochs", o->epochs, "Finetuning epochs");
    sub->add_option("--batch-size", o->batch, "Captions per batch");
    sub->add_option("--lr", o->lr, "Adam learning rate");
    sub->add_option("--seed", o->seed, "Root seed");
    sub->add_option("--corpus", o->corpus, "Caption corpus: refs or refs+overall");
    sub->add_option("--n-max-gram", o->n_max_gram, "Negative generator: longest n-gram");
    sub->add_option("--n-max-repeat", o->n_max_repeat, "Negative generator: most repetitions");
    sub->add_option("--n-max-tokens", o->n_max_tokens, "Negative generator: most inserted/swapped tokens");
    sub->add_flag("--one-sided", o->one_sided, "Keep only the -y log g term of the grammar loss");
    sub->add_option("--report", o->report, "Per-epoch report (default: <out>.report.jsonl)");
    return {sub, [o](RunRecord& rec) {
                require_file(o->clip_ckpt, "encoder checkpoint");
                require_file(o->data, "split file");
                if (o->epochs < 0) throw ConfigInvalid("--epochs must be >= 0");
                ckpt::Checkpoint raw = ckpt::load(o->clip_ckpt, "dual_encoder");
                dual::DualEncoder enc(dual::EncoderConfig::from_json(raw.config), raw.vocab, raw.params);
                const data::DatasetSplit split = data::load_split(o->data);
                // Grammar positives must be sentences, so keyword lists are excluded.
                if (o->corpus == "web") throw ConfigInvalid("finetune-grammar --corpus must be refs or refs+overall");
                const auto corpus = encoder_data(split, o->corpus);
                dual::GrammarFinetuneConfig gcfg;
                gcfg.epochs = o->epochs;
                gcfg.batch_size = o->batch;
                gcfg.optimizer.lr = o->lr;
                gcfg.one_sided_bce = o->one_sided;
                gcfg.negatives = {o->n_max_gram, o->n_max_repeat, o->n_max_tokens, o->seed};
                gcfg.seed = Rng::substream(o->seed, "grammar.train").next_u64();
                std::vector<json> report;
                dual::DualEncoder tuned = dual::grammar_finetune(enc, corpus, gcfg, nullptr, [&](const dual::EpochStats& s) {
                    json j = s.to_json();
                    j["phase"] = "grammar";
                    report.push_back(j);
                    std::cerr << "finetune-grammar: epoch " << s.epoch << " loss " << s.loss << "\n";
                });
                json meta = raw.meta;
                if (o->epochs > 0) meta["grammar_epochs"] = o->epochs;
                ckpt::save_encoder(o->out, tuned, meta);
                const fs::path report_path = o->report.empty() ? o->out + ".report.jsonl" : o->report;
                write_report(report_path, "report", report);
                rec.inputs.insert(rec.inputs.end(), {o->clip_ckpt, o->data});
                rec.outputs.insert(rec.outputs.end(), {o->out, report_path});
                rec.seeds["grammar"] = o->seed;
                rec.manifest = o->out + ".manifest.json";
            }};
}

Command add_train_captioner(CLI::App& app) {
    auto* sub = app.add_subcommand("train-captioner", "Train the captioner with MLE then self-critical RL");
    struct Opts {
        std::string data, val, reward = "mle", clip_ckpt, schedule = "paper-schedule", init_ckpt, out_dir,
                                     run_id = "run", estimator = "beam", corpus = "refs+overall";
        int mle_epochs = -1, rl_epochs = -1, mle_batch = 16, rl_batch = 16, beam_size = 5, max_len = 20;
        double mle_lr = 1e-3, rl_lr = 5e-5, lambda = 2.0, cider_mix = 1.0, clip_w = 2.5;
        bool paper_shape = false;
        std::uint64_t seed = 0;
    };
    auto o = std::make_shared<Opts>();
    sub->add_option("--data", o->data, "Training split file")->required();
    sub->add_option("--val", o->val, "Validation split file");
    sub->add_option("--reward", o->reward, "mle, cider, clip_s, cider_clip_s or clip_s_grammar")
        ->check(CLI::IsMember({"mle", "cider", "clip_s", "cider_clip_s", "cider_plus_clip_s", "clip_s_grammar"}));
    sub->add_option("--clip-ckpt", o->clip_ckpt, "Reward encoder checkpoint (required for CLIP-S rewards)");
    sub->add_option("--schedule", o->schedule, "Named schedule: paper-schedule or toy");
    sub->add_option("--mle-epochs", o->mle_epochs, "Override the schedule's MLE epochs");
    sub->add_option("--rl-epochs", o->rl_epochs, "Override the schedule's RL epochs");
    sub->add_option("--mle-batch", o->mle_batch, "Captions per MLE batch");
    sub->add_option("--rl-batch", o->rl_batch, "Images per RL batch");
    sub->add_option("--mle-lr", o->mle_lr, "MLE learning rate");
    sub->add_option("--rl-lr", o->rl_lr, "RL learning rate");
    sub->add_option("--lambda", o->lambda, "CLIP-S weight in the grammar-combined reward");
    sub->add_option("--cider-mix", o->cider_mix, "CLIP-S weight in the CIDEr+CLIP-S reward");
    sub->add_option("--clip-w", o->clip_w, "CLIP-S scale w");
    sub->add_option("--estimator", o->estimator, "beam (default) or sample")->check(CLI::IsMember({"beam", "sample"}));
    sub->add_option("--beam-size", o->beam_size, "Beam width for the RL sequence");
    sub->add_option("--max-len", o->max_len, "Decoder length limit including BOS");
    sub->add_flag("--paper-shape", o->paper_shape, "Six encoder and six decoder layers");
    sub->add_option("--init-ckpt", o->init_ckpt, "Start from this captioner checkpoint");
    sub->add_option("--corpus", o->corpus, "Vocabulary corpus for a fresh captioner: refs or refs+overall");
    sub->add_option("--out-dir", o->out_dir, "Checkpoint root")->required();
    sub->add_option("--run-id", o->run_id, "Run directory name under --out-dir");
    sub->add_option("--seed", o->seed, "Root seed");
    return {sub, [o](RunRecord& rec) {
                const bool mle_only = o->reward == "mle";
                rl::TrainConfig cfg;
                if (!mle_only) {
                    cfg.reward.kind = rl::reward_kind_from_string(o->reward);
                    if (rl::uses_encoder(cfg.reward.kind) && o->clip_ckpt.empty()) {
                        throw UsageError("--reward " + o->reward + " requires --clip-ckpt");
                    }
                }
                cfg.schedule = rl::Schedule::named(o->schedule);
                if (o->mle_epochs >= 0) cfg.schedule.mle_epochs = o->mle_epochs;
                if (o->rl_epochs >= 0) cfg.schedule.rl_epochs = o->rl_epochs;
                cfg.schedule.mle_batch = o->mle_batch;
                cfg.schedule.rl_batch = o->rl_batch;
                cfg.schedule.mle_lr = o->mle_lr;
                cfg.schedule.rl_lr = o->rl_lr;
                cfg.reward.lambda = o->lambda;
                cfg.reward.cider_mix = o->cider_mix;
                cfg.reward.clip.w = o->clip_w;
                cfg.mle_only = mle_only;
                cfg.scst.beam_size = o->beam_size;
                cfg.scst.estimator = rl::estimator_from_string(o->estimator);
                cfg.seed = o->seed;
                cfg.schedule.validate();
                cfg.reward.validate();

                require_file(o->data, "split file");
                std::optional<dual::DualEncoder> encoder;
                if (!o->clip_ckpt.empty()) {
                    require_file(o->clip_ckpt, "encoder checkpoint");
                    encoder.emplace(ckpt::load_encoder(o->clip_ckpt));
                    rec.inputs.push_back(o->clip_ckpt);
                }
                const data::DatasetSplit train = data::load_split(o->data);
                rec.inputs.push_back(o->data);
                std::vector<rl::TrainExample> val;
                if (!o->val.empty()) {
                    require_file(o->val, "validation split");
                    val = captioner_data(data::load_split(o->val));
                    rec.inputs.push_back(o->val);
                }
                const auto train_set = captioner_data(train);

                std::optional<cap::Captioner> model;
                if (!o->init_ckpt.empty()) {
                    require_file(o->init_ckpt, "captioner checkpoint");
                    model.emplace(ckpt::load_captioner(o->init_ckpt));
                    rec.inputs.push_back(o->init_ckpt);
                } else {
                    const text::Vocabulary vocab = corpus_vocab(encoder_data(train, o->corpus), 1);
                    const int d_img = static_cast<int>(train.examples.front().image.features.size());
                    cap::CaptionerConfig ccfg =
                        o->paper_shape ? cap::CaptionerConfig::paper_shape(d_img, vocab.size()) : cap::CaptionerConfig{};
                    ccfg.d_img = d_img;
                    ccfg.vocab_size = vocab.size();
                    ccfg.max_len = o->max_len;
                    ccfg.validate();
                    Rng init = Rng::substream(o->seed, "captioner.init");
                    model.emplace(cap::Captioner::init(ccfg, vocab, init));
                }

                const fs::path run_dir = fs::path(o->out_dir) / o->run_id;
                fs::create_directories(run_dir);
                std::vector<json> report;
                const json meta = {{"train_config", cfg.to_json()}};
                cap::Captioner trained = rl::train(
                    *model, train_set, val, cfg, encoder ? &*encoder : nullptr, nullptr,
                    [&](const rl::EpochReport& r, const cap::Captioner& m) {
                        report.push_back(r.to_json());
                        const fs::path p = run_dir / (std::to_string(r.epoch) + ".ckpt");
                        ckpt::save_captioner(p, m, meta);
                        rec.outputs.push_back(p);
                        std::cerr << "train-captioner: epoch " << r.epoch << " [" << r.phase << "] loss " << r.loss
                                  << " reward " << r.mean_reward << " advantage " << r.mean_advantage << "\n";
                    });
                const fs::path final_path = run_dir / "final.ckpt";
                ckpt::save_captioner(final_path, trained, meta);
                const fs::path report_path = run_dir / "report.jsonl";
                write_report(report_path, "report", report);
                rec.outputs.insert(rec.outputs.end(), {final_path, report_path});
                rec.seeds["captioner"] = o->seed;
                rec.manifest = run_dir / "manifest.json";
            }};
}

Command add_generate(CLI::App& app) {
    auto* sub = app.add_subcommand("generate", "Caption every image of a split");
    struct Opts {
        std::string ckpt, data, out, method = "beam";
        int beam_size = 5;
        std::uint64_t seed = 0;
    };
    auto o = std::make_shared<Opts>();
    sub->add_option("--ckpt", o->ckpt, "Captioner checkpoint")->required();
    sub->add_option("--data", o->data, "Split file")->required();
    sub->add_option("--out", o->out, "Output generations file")->required();
    sub->add_option("--method", o->method, "greedy, beam or sample")->check(CLI::IsMember({"greedy", "beam", "sample"}));
    sub->add_option("--beam-size", o->beam_size, "Beam width");
    sub->add_option("--seed", o->seed, "Root seed (sampling only)");
    return {sub, [o](RunRecord& rec) {
                require_file(o->ckpt, "captioner checkpoint");
                require_file(o->data, "split file");
                const cap::Captioner model = ckpt::load_captioner(o->ckpt);
                const data::DatasetSplit split = data::load_split(o->data);
                Rng rng = Rng::substream(o->seed, "generate.sample");
                std::vector<data::GenerationRecord> records;
                for (const auto& ex : split.examples) {
                    cap::DecodeResult r = o->method == "greedy" ? cap::greedy_decode(model, ex.image)
                                          : o->method == "beam" ? cap::beam_search(model, ex.image, o->beam_size)
                                                                : cap::sample_decode(model, ex.image, rng);
                    records.push_back({ex.scene.image_id, model.vocab().decode(r.words()), r.total_logprob,
                                       std::string(cap::to_string(r.method))});
                }
                data::save_generations(o->out, records);
                rec.inputs.insert(rec.inputs.end(), {o->ckpt, o->data});
                rec.outputs.push_back(o->out);
                rec.seeds["generate"] = o->seed;
                rec.manifest = o->out + ".manifest.json";
            }};
}

Command add_evaluate(CLI::App& app) {
    auto* sub = app.add_subcommand("evaluate", "Score generations (n-gram, embedding, retrieval, fine-grained)");
    struct Opts {
        std::string gen, refs, fine, clip_ckpt, data, ks = "1,5,10", out;
    };
    auto o = std::make_shared<Opts>();
    sub->add_option("--gen", o->gen, "Generations file")->required();
    sub->add_option("--refs", o->refs, "Reference captions file");
    sub->add_option("--fine-grained", o->fine, "Fine-grained annotation file");
    sub->add_option("--clip-ckpt", o->clip_ckpt, "Encoder for CLIP-S, grammar and retrieval");
    sub->add_option("--data", o->data, "Split file with image features (needed with --clip-ckpt)");
    sub->add_option("--ks", o->ks, "Recall cutoffs, comma separated");
    sub->add_option("--out", o->out, "Write the report as JSON here");
    return {sub, [o](RunRecord& rec) {
                if (o->refs.empty() && o->fine.empty()) throw UsageError("evaluate needs --refs or --fine-grained");
                if (!o->clip_ckpt.empty() && o->data.empty()) throw UsageError("--clip-ckpt needs --data for image features");
                const std::vector<int> ks = parse_ks(o->ks);
                require_file(o->gen, "generations file");
                const auto gens = data::load_generations(o->gen);
                rec.inputs.push_back(o->gen);
                metrics::CandidateMap cands;
                for (const auto& g : gens) cands[g.image_id] = g.caption;

                auto check_ids = [&](const std::set<std::string>& ids, const std::string& source) {
                    std::vector<std::string> missing_gen, missing_src;
                    for (const auto& id : ids) {
                        if (!cands.count(id)) missing_gen.push_back(id);
                    }
                    for (const auto& [id, c] : cands) {
                        if (!ids.count(id)) missing_src.push_back(id);
                    }
                    if (missing_gen.empty() && missing_src.empty()) return;
                    std::string msg = "image ids differ between --gen and " + source + ":";
                    if (!missing_gen.empty()) {
                        msg += " missing from generations:";
                        for (const auto& id : missing_gen) msg += " " + id;
                    }
                    if (!missing_src.empty()) {
                        msg += " missing from " + source + ":";
                        for (const auto& id : missing_src) msg += " " + id;
                    }
                    throw MissingPrediction(msg);
                };

                metrics::EvalReport report;
                report.n_images = static_cast<int>(cands.size());
                report.config = {{"ks", ks}};
                double rep = 0.0;
                for (const auto& [id, c] : cands) rep += metrics::repetition_rate(c);
                report.values["RepRate"] = cands.empty() ? 0.0 : 100.0 * rep / static_cast<double>(cands.size());

                if (!o->refs.empty()) {
                    require_file(o->refs, "reference file");
                    const auto refs = data::load_captions(o->refs);
                    rec.inputs.push_back(o->refs);
                    std::set<std::string> ids;
                    metrics::ReferenceMap rmap;
                    for (const auto& [id, caps] : refs) {
                        ids.insert(id);
                        for (const auto& c : caps) rmap[id].push_back(c.text());
                        report.n_references += static_cast<int>(caps.size());
                    }
                    check_ids(ids, "--refs");
                    report.values["BLEU-4"] = metrics::bleu4(cands, rmap);
                    report.values["CIDEr"] = metrics::cider_d(cands, rmap);
                    report.values["ROUGE-L"] = metrics::rouge_l(cands, rmap);
                }
                if (!o->fine.empty()) {
                    require_file(o->fine, "fine-grained file");
                    const auto ann = data::load_fine_grained(o->fine);
                    rec.inputs.push_back(o->fine);
                    std::set<std::string> ids;
                    metrics::PhraseMap bg, obj, rel;
                    metrics::ReferenceMap overall;
                    for (const auto& [id, a] : ann) {
                        ids.insert(id);
                        bg[id] = a.background;
                        obj[id] = a.object;
                        rel[id] = a.relation;
                        overall[id] = a.overall;
                    }
                    check_ids(ids, "--fine-grained");
                    report.values["Rword-background"] = metrics::word_recall(cands, bg);
                    report.values["Rword-object"] = metrics::word_recall(cands, obj);
                    report.values["Rword-relation"] = metrics::word_recall(cands, rel);
                    report.values["CIDEr-overall"] = metrics::cider_d(cands, overall);
                }
                if (!o->clip_ckpt.empty()) {
                    require_file(o->clip_ckpt, "encoder checkpoint");
                    require_file(o->data, "split file");
                    const dual::DualEncoder enc = ckpt::load_encoder(o->clip_ckpt);
                    const data::DatasetSplit split = data::load_split(o->data);
                    rec.inputs.insert(rec.inputs.end(), {o->clip_ckpt, o->data});
                    std::set<std::string> ids;
                    for (const auto& ex : split.examples) ids.insert(ex.scene.image_id);
                    check_ids(ids, "--data");
                    const auto n = static_cast<Eigen::Index>(split.examples.size());
                    Eigen::MatrixXd img(n, enc.config().d_emb), txt(n, enc.config().d_emb);
                    double clip_sum = 0.0, grammar_sum = 0.0;
                    const dual::ClipScoreConfig clip;
                    for (Eigen::Index i = 0; i < n; ++i) {
                        const auto& ex = split.examples[static_cast<std::size_t>(i)];
                        const std::string& c = cands.at(ex.scene.image_id);
                        const text::Caption caption = text::Caption::parse(c.empty() ? "<unk>" : c);
                        img.row(i) = dual::encode_image(enc, ex.image).transpose();
                        txt.row(i) = dual::encode_text(enc, caption).transpose();
                        clip_sum += dual::clip_s(img.row(i).transpose(), txt.row(i).transpose(), clip);
                        grammar_sum += dual::grammar_score(enc, caption);
                    }
                    report.values["CLIP-S"] = clip_sum / static_cast<double>(n);
                    report.values["Grammar"] = grammar_sum / static_cast<double>(n);
                    for (const auto& [k, v] : metrics::retrieval_recall(txt, img, ks)) {
                        report.values["R@" + std::to_string(k)] = v;
                    }
                }
                std::cout << report.table();
                if (!o->out.empty()) {
                    write_text(o->out, report.to_json().dump(2) + "\n");
                    rec.outputs.push_back(o->out);
                    rec.manifest = o->out + ".manifest.json";
                }
            }};
}

int replay(const fs::path& manifest_path) {
    require_file(manifest_path, "manifest");
    std::ifstream in(manifest_path);
    json m;
    try {
        m = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ParseError(manifest_path.string() + ": " + e.what());
    }
    if (m.value("format", "") != "clipcap.manifest") throw ParseError(manifest_path.string() + ": not a manifest");
    for (const auto& input : m.at("inputs")) {
        const std::string path = input.at("path");
        require_file(path, "manifest input");
        if (file_digest(path) != input.at("fnv1a64").get<std::string>()) {
            throw IoError("input '" + path + "' changed since the manifest was written");
        }
    }
    const int code = run(m.at("argv").get<std::vector<std::string>>());
    if (code != 0) return code;
    int mismatches = 0;
    for (const auto& output : m.at("outputs")) {
        const std::string path = output.at("path");
        if (!fs::is_regular_file(path) || file_digest(path) != output.at("fnv1a64").get<std::string>()) {
            std::cerr << "replay: output '" << path << "' differs from the manifest\n";
            ++mismatches;
        }
    }
    if (mismatches) return 1;
    std::cerr << "replay: " << m.at("outputs").size() << " outputs reproduced byte-identically\n";
    return 0;
}

}  // namespace

std::string file_digest(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read '" + path.string() + "'");
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 16];
    while (in.read(buf, sizeof buf) || in.gcount() > 0) {
        h = fnv1a64(std::string_view(buf, static_cast<std::size_t>(in.gcount())), h);
        if (!in) break;
    }
    return hex64(h);
}

int run(const std::vector<std::string>& args) {
    CLI::App app{"clipcap: fine-grained image captioning with CLIP-style rewards"};
    app.require_subcommand(1);
    app.set_config("--config", "", "TOML config file; flags override its values");
    app.option_defaults()->always_capture_default();

    std::vector<Command> commands{add_generate_world(app), add_generate_negatives(app), add_train_clip(app),
                                  add_finetune_grammar(app), add_train_captioner(app), add_generate(app),
                                  add_evaluate(app)};
    std::string manifest;
    auto* replay_cmd = app.add_subcommand("replay", "Re-run a recorded command and verify its outputs");
    replay_cmd->add_option("--manifest", manifest, "Manifest written by an earlier run")->required();

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (replay_cmd->parsed()) return replay(manifest);
        for (const auto& cmd : commands) {
            if (!cmd.app->parsed()) continue;
            RunRecord rec;
            cmd.action(rec);
            if (!rec.manifest.empty()) write_manifest(cmd.app->get_name(), cmd.app, rec);
            return 0;
        }
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

}  // namespace clipcap::cli
