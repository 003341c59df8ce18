#include "clipcap/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <set>
#include <sstream>

namespace clipcap::metrics {

namespace {

text::Tokens tokenize(const std::string& s) { return text::Caption::parse(s).tokens(); }

using NgramCounts = std::map<std::string, int>;

// Keys are "n|w1 w2 .." so different orders never collide.
NgramCounts ngram_counts(const text::Tokens& toks, int max_n) {
    NgramCounts counts;
    for (int n = 1; n <= max_n; ++n) {
        for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= toks.size(); ++i) {
            std::string key = std::to_string(n) + "|";
            for (int k = 0; k < n; ++k) {
                if (k) key.push_back(' ');
                key += toks[i + static_cast<std::size_t>(k)];
            }
            ++counts[key];
        }
    }
    return counts;
}

int ngram_order(const std::string& key) { return key[0] - '0'; }

void check_references(const CandidateMap& candidates, const ReferenceMap& references) {
    for (const auto& [id, cand] : candidates) {
        auto it = references.find(id);
        if (it == references.end() || it->second.empty()) {
            throw MissingReferences("image '" + id + "' has no references");
        }
    }
}

std::size_t lcs_length(const text::Tokens& a, const text::Tokens& b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

struct TfIdf {
    std::array<std::map<std::string, double>, CiderD::kMaxN> vec;
    std::array<double, CiderD::kMaxN> norm{};
    std::size_t length = 0;
};

}  // namespace

double bleu4(const CandidateMap& candidates, const ReferenceMap& references) {
    check_references(candidates, references);
    if (candidates.empty()) throw MissingReferences("no candidates to score");
    std::array<double, 4> matched{}, total{};
    double cand_len = 0.0, ref_len = 0.0;
    for (const auto& [id, cand] : candidates) {
        const text::Tokens c = tokenize(cand);
        std::vector<text::Tokens> refs;
        for (const auto& r : references.at(id)) refs.push_back(tokenize(r));

        NgramCounts cc = ngram_counts(c, 4);
        NgramCounts max_ref;
        for (const auto& r : refs) {
            for (const auto& [g, n] : ngram_counts(r, 4)) max_ref[g] = std::max(max_ref[g], n);
        }
        for (const auto& [g, n] : cc) {
            auto it = max_ref.find(g);
            matched[static_cast<std::size_t>(ngram_order(g) - 1)] += it == max_ref.end() ? 0 : std::min(n, it->second);
        }
        for (int n = 1; n <= 4; ++n) {
            total[static_cast<std::size_t>(n - 1)] += std::max<double>(0.0, static_cast<double>(c.size()) - n + 1);
        }
        // Closest reference length, shorter on ties.
        std::size_t best = refs.front().size();
        for (const auto& r : refs) {
            const auto d = std::abs(static_cast<long>(r.size()) - static_cast<long>(c.size()));
            const auto bd = std::abs(static_cast<long>(best) - static_cast<long>(c.size()));
            if (d < bd || (d == bd && r.size() < best)) best = r.size();
        }
        cand_len += static_cast<double>(c.size());
        ref_len += static_cast<double>(best);
    }
    double log_sum = 0.0;
    for (std::size_t n = 0; n < 4; ++n) {
        if (matched[n] == 0.0 || total[n] == 0.0) return 0.0;
        log_sum += std::log(matched[n] / total[n]);
    }
    const double bp = cand_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
    return 100.0 * bp * std::exp(log_sum / 4.0);
}

CiderD::CiderD(const ReferenceMap& corpus) {
    std::vector<std::vector<std::string>> sets;
    for (const auto& [id, refs] : corpus) sets.push_back(refs);
    *this = CiderD(sets);
}

CiderD::CiderD(const std::vector<std::vector<std::string>>& reference_sets) {
    for (const auto& refs : reference_sets) {
        std::set<std::string> seen;
        for (const auto& r : refs) {
            for (const auto& [g, n] : ngram_counts(tokenize(r), kMaxN)) seen.insert(g);
        }
        for (const auto& g : seen) doc_freq_[g] += 1.0;
    }
    n_docs_ = reference_sets.size();
    log_n_docs_ = n_docs_ > 0 ? std::log(static_cast<double>(n_docs_)) : 0.0;
}

double CiderD::score(const std::string& candidate, const std::vector<std::string>& references) const {
    if (references.empty()) throw MissingReferences("CIDEr-D needs at least one reference");
    auto to_vec = [&](const text::Tokens& toks) {
        TfIdf t;
        for (const auto& [g, tf] : ngram_counts(toks, kMaxN)) {
            auto it = doc_freq_.find(g);
            const double df = std::log(std::max(1.0, it == doc_freq_.end() ? 0.0 : it->second));
            const auto n = static_cast<std::size_t>(ngram_order(g) - 1);
            const double v = tf * (log_n_docs_ - df);
            t.vec[n][g] = v;
            t.norm[n] += v * v;
        }
        for (auto& x : t.norm) x = std::sqrt(x);
        t.length = toks.size();
        return t;
    };
    const TfIdf hyp = to_vec(tokenize(candidate));
    double total = 0.0;
    for (const auto& r : references) {
        const TfIdf ref = to_vec(tokenize(r));
        const double delta = static_cast<double>(hyp.length) - static_cast<double>(ref.length);
        const double penalty = std::exp(-(delta * delta) / (2.0 * kSigma * kSigma));
        for (std::size_t n = 0; n < kMaxN; ++n) {
            double val = 0.0;
            for (const auto& [g, hv] : hyp.vec[n]) {
                auto it = ref.vec[n].find(g);
                if (it != ref.vec[n].end()) val += std::min(hv, it->second) * it->second;
            }
            if (hyp.norm[n] != 0.0 && ref.norm[n] != 0.0) val /= hyp.norm[n] * ref.norm[n];
            total += val * penalty;
        }
    }
    return 10.0 * total / kMaxN / static_cast<double>(references.size());
}

double cider_d(const CandidateMap& candidates, const ReferenceMap& references) {
    check_references(candidates, references);
    if (candidates.size() < 2) throw CorpusTooSmall("CIDEr-D needs at least 2 images, got " + std::to_string(candidates.size()));
    ReferenceMap used;
    for (const auto& [id, c] : candidates) used[id] = references.at(id);
    const CiderD scorer(used);
    double sum = 0.0;
    for (const auto& [id, c] : candidates) sum += scorer.score(c, used.at(id));
    return sum / static_cast<double>(candidates.size());
}

double rouge_l(const CandidateMap& candidates, const ReferenceMap& references) {
    check_references(candidates, references);
    if (candidates.empty()) throw MissingReferences("no candidates to score");
    constexpr double beta = 1.2;
    double sum = 0.0;
    for (const auto& [id, cand] : candidates) {
        const text::Tokens c = tokenize(cand);
        double prec_max = 0.0, rec_max = 0.0;
        for (const auto& r : references.at(id)) {
            const text::Tokens rt = tokenize(r);
            const double lcs = static_cast<double>(lcs_length(c, rt));
            prec_max = std::max(prec_max, lcs / static_cast<double>(c.size()));
            rec_max = std::max(rec_max, lcs / static_cast<double>(rt.size()));
        }
        if (prec_max != 0.0 && rec_max != 0.0) {
            sum += ((1.0 + beta * beta) * prec_max * rec_max) / (rec_max + beta * beta * prec_max);
        }
    }
    return 100.0 * sum / static_cast<double>(candidates.size());
}

double word_recall(const CandidateMap& predictions, const PhraseMap& phrases, WordMatch match) {
    if (phrases.empty()) throw EmptyEntry("no ground-truth phrases to score");
    double total = 0.0;
    for (const auto& [id, gt] : phrases) {
        auto it = predictions.find(id);
        if (it == predictions.end()) throw MissingPrediction("no prediction for image '" + id + "'");
        if (gt.empty()) throw EmptyEntry("image '" + id + "' has no phrases");
        const text::Caption pred = text::Caption::parse(it->second);
        std::set<std::string> pred_words(pred.tokens().begin(), pred.tokens().end());
        double score = 0.0;
        for (const auto& phrase : gt) {
            const text::Tokens words = tokenize(phrase);
            double hits = 0.0;
            for (const auto& w : words) {
                const bool found = match == WordMatch::substring ? pred.text().find(w) != std::string::npos
                                                                 : pred_words.count(w) != 0;
                if (found) hits += 1.0;
            }
            score += hits / static_cast<double>(words.size());
        }
        total += score / static_cast<double>(gt.size());
    }
    return total / static_cast<double>(phrases.size()) * 100.0;
}

std::map<int, double> retrieval_recall(const Eigen::MatrixXd& caption_emb, const Eigen::MatrixXd& image_emb,
                                       const std::vector<int>& ks) {
    if (caption_emb.cols() != image_emb.cols()) throw DimensionMismatch("caption and image embeddings differ in width");
    if (caption_emb.rows() != image_emb.rows()) throw DimensionMismatch("need exactly one caption per image");
    for (int k : ks) {
        if (k < 1) throw ConfigInvalid("recall@k needs k >= 1");
    }
    auto normalized = [](const Eigen::MatrixXd& m) {
        Eigen::VectorXd norms = m.rowwise().norm();
        if ((norms.array() == 0.0).any()) throw ZeroEmbedding("retrieval embedding with zero norm");
        return Eigen::MatrixXd(m.array().colwise() / norms.array());
    };
    const Eigen::MatrixXd sims = normalized(caption_emb) * normalized(image_emb).transpose();
    const Eigen::Index n = sims.rows();
    std::vector<Eigen::Index> ranks(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        const double own = sims(i, i);
        Eigen::Index rank = 0;
        for (Eigen::Index j = 0; j < n; ++j) {
            if (sims(i, j) > own || (sims(i, j) == own && j < i)) ++rank;
        }
        ranks[static_cast<std::size_t>(i)] = rank;
    }
    std::map<int, double> out;
    for (int k : ks) {
        const auto hits = std::count_if(ranks.begin(), ranks.end(), [k](Eigen::Index r) { return r < k; });
        out[k] = n == 0 ? 0.0 : 100.0 * static_cast<double>(hits) / static_cast<double>(n);
    }
    return out;
}

double repetition_rate(const text::Tokens& tokens) {
    if (tokens.size() < 2) return 0.0;
    std::set<std::pair<std::string, std::string>> distinct;
    for (std::size_t i = 0; i + 1 < tokens.size(); ++i) distinct.emplace(tokens[i], tokens[i + 1]);
    return 1.0 - static_cast<double>(distinct.size()) / static_cast<double>(tokens.size() - 1);
}

double repetition_rate(const std::string& caption) { return repetition_rate(tokenize(caption)); }

nlohmann::json EvalReport::to_json() const {
    nlohmann::json j;
    j["metrics"] = values;
    j["counts"] = {{"n_images", n_images}, {"n_references", n_references}};
    j["config"] = config.is_null() ? nlohmann::json::object() : config;
    return j;
}

std::string EvalReport::table() const {
    const std::vector<std::pair<std::string, std::vector<std::string>>> groups = {
        {"N-gram", {"BLEU-4", "CIDEr", "ROUGE-L"}},
        {"Embedding", {"CLIP-S", "Grammar"}},
        {"Retrieval", {}},
        {"FineCap", {"Rword-background", "Rword-object", "Rword-relation", "CIDEr-overall"}},
        {"Diagnostics", {"RepRate"}},
    };
    std::ostringstream out;
    out << std::fixed << std::setprecision(2);
    for (const auto& [group, keys] : groups) {
        std::vector<std::string> present;
        if (group == "Retrieval") {
            for (const auto& [k, v] : values) {
                if (k.rfind("R@", 0) == 0) present.push_back(k);
            }
            std::sort(present.begin(), present.end(), [](const std::string& a, const std::string& b) {
                return std::stoi(a.substr(2)) < std::stoi(b.substr(2));
            });
        } else {
            for (const auto& k : keys) {
                if (values.count(k)) present.push_back(k);
            }
        }
        if (present.empty()) continue;
        out << group << " |";
        for (const auto& k : present) out << ' ' << k << '=' << values.at(k);
        out << '\n';
    }
    out << "images=" << n_images << " references=" << n_references << '\n';
    return out.str();
}

}  // namespace clipcap::metrics
