#pragma once

// Caption evaluation. Inputs are keyed by image id; every text is passed
// through textproc::normalize before scoring. Scores are reported x100
// except CIDEr-D, which keeps its native x10 scale.

#include "clipcap/errors.hpp"
#include "clipcap/textproc.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <map>
#include <string>
#include <vector>

namespace clipcap::metrics {

using CandidateMap = std::map<std::string, std::string>;
using ReferenceMap = std::map<std::string, std::vector<std::string>>;
using PhraseMap = std::map<std::string, std::vector<std::string>>;

// Corpus BLEU-4 with clipped counts and the closest-reference brevity
// penalty. Zero when any n-gram order has no match.
double bleu4(const CandidateMap& candidates, const ReferenceMap& references);

// Document frequencies over a fixed reference corpus. Built once and reused
// for sentence-level scoring (the RL reward) or corpus averages.
class CiderD {
public:
    explicit CiderD(const ReferenceMap& corpus);
    CiderD(const std::vector<std::vector<std::string>>& reference_sets);

    // Per-sentence CIDEr-D x10 of a candidate against its references.
    double score(const std::string& candidate, const std::vector<std::string>& references) const;
    std::size_t corpus_size() const noexcept { return n_docs_; }

    static constexpr int kMaxN = 4;
    static constexpr double kSigma = 6.0;

private:
    std::map<std::string, double> doc_freq_;
    std::size_t n_docs_ = 0;
    double log_n_docs_ = 0.0;
};

// Mean per-image CIDEr-D with idf from the evaluation references. Needs at
// least two images.
double cider_d(const CandidateMap& candidates, const ReferenceMap& references);

// LCS F-measure with beta = 1.2, taking the best precision and best recall
// over references, averaged over images.
double rouge_l(const CandidateMap& candidates, const ReferenceMap& references);

enum class WordMatch { substring, token };

// Per phrase, the fraction of its words found in the predicted sentence;
// averaged over phrases, then images, x100. The default substring mode
// checks containment in the sentence string ("car" matches "cars").
double word_recall(const CandidateMap& predictions, const PhraseMap& phrases,
                   WordMatch match = WordMatch::substring);

// Text-to-image recall@k, x100. Row i of caption_emb is the caption for the
// image in row i of image_emb. Ties rank the lower image index first.
std::map<int, double> retrieval_recall(const Eigen::MatrixXd& caption_emb, const Eigen::MatrixXd& image_emb,
                                       const std::vector<int>& ks);

// 1 - distinct bigrams / total bigrams; 0 below two tokens.
double repetition_rate(const text::Tokens& tokens);
double repetition_rate(const std::string& caption);

struct EvalReport {
    std::map<std::string, double> values;
    int n_images = 0;
    int n_references = 0;
    nlohmann::json config;

    nlohmann::json to_json() const;
    // Columns grouped n-gram | embedding | retrieval | fine-grained.
    std::string table() const;
};

}  // namespace clipcap::metrics
