#pragma once

// Synthetic micro-world plus the on-disk formats the pipeline exchanges.
//
// Every text file is JSON Lines. The first line is a header object
//   {"format": "clipcap.<kind>", "version": 1, ...}
// and each following line is one record. Kinds and record fields:
//   captions     {"image_id", "captions": [str]}
//   fine_grained {"image_id", "background": [str], "object": [str],
//                 "relation": [str], "overall": [str],
//                 "annotators": {"background": n, "object": n, "relation": n, "overall": n}}
//   split        {"image_id", "scene": {...}, "features": [num], "references": [str],
//                 "distinctive": str, "fine_grained": {...}}   header adds "split", "d_img"
//   generations  {"image_id", "caption", "total_logprob", "method"}
//   embeddings   {"id", "kind": "image"|"caption", "vector": [num]}
//   negatives    {"image_id", "original", "negative", "operation"}
//   report       {"epoch", "phase", ...stage-specific fields}

#include "clipcap/errors.hpp"
#include "clipcap/image.hpp"
#include "clipcap/textproc.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace clipcap::data {

inline constexpr int kFormatVersion = 1;

struct SceneObject {
    std::string shape;
    std::string color;
    std::string size;
};

struct SceneRelation {
    int subject = 0;
    std::string predicate;
    int object = 0;
};

// Objects are ordered by size: objects[0] is the unique largest one.
struct SceneSpec {
    std::string image_id;
    std::string background;
    std::vector<SceneObject> objects;
    std::vector<SceneRelation> relations;
    std::uint64_t rng_seed = 0;

    void validate() const;
};

struct FineGrainedAnnotation {
    std::string image_id;
    std::vector<std::string> background;
    std::vector<std::string> object;
    std::vector<std::string> relation;
    std::vector<std::string> overall;
    std::map<std::string, int> annotators;  // per criterion

    void validate() const;
    friend bool operator==(const FineGrainedAnnotation&, const FineGrainedAnnotation&) = default;
};

struct SceneExample {
    SceneSpec scene;
    ImageRecord image;
    std::vector<text::Caption> references;  // salient-only
    text::Caption distinctive;
    FineGrainedAnnotation annotation;
};

struct DatasetSplit {
    std::string name;
    std::vector<SceneExample> examples;
};

struct WorldConfig {
    int d_img = 64;
    int refs_per_image = 5;
    int annotators = 5;
    int min_objects = 2;
    int max_objects = 3;
    double train_fraction = 0.7;
    double val_fraction = 0.1;
    std::uint64_t projection_seed = 20220704;
    std::vector<std::string> backgrounds{"grass", "sand", "snow", "water", "road", "wood"};
    std::vector<std::string> shapes{"cube", "ball", "cone", "cylinder", "star", "ring"};
    std::vector<std::string> colors{"red", "blue", "green", "yellow", "purple", "white"};
    std::vector<std::string> predicates{"left of", "right of", "above", "below", "behind", "in front of"};

    void validate() const;
    nlohmann::json to_json() const;
    static WorldConfig from_json(const nlohmann::json& j);
};

struct World {
    WorldConfig config;
    DatasetSplit train;
    DatasetSplit val;
    DatasetSplit test;
};

// Pure function of (n_images, config, seed). n_images must be >= 10.
World generate_world(int n_images, const WorldConfig& config, std::uint64_t seed);

// Fixed random projection of the scene's one-hot encoding.
Eigen::VectorXd render_features(const SceneSpec& scene, const WorldConfig& config);

text::Caption distinctive_caption(const SceneSpec& scene);
std::vector<text::Caption> salient_references(const SceneSpec& scene, int count, std::uint64_t seed);
FineGrainedAnnotation annotate(const SceneSpec& scene, int annotators);

// Web alt-text style keyword lists ("red cube grass red cube blue ball"):
// each object's name repeated by prominence (big 3, medium 2, small 1) plus
// the background, shuffled. Derived from scene.rng_seed.
std::vector<text::Caption> alt_text_captions(const SceneSpec& scene, int count);

// ---------------------------------------------------------------------------
// Files

using CaptionMap = std::map<std::string, std::vector<text::Caption>>;
using AnnotationMap = std::map<std::string, FineGrainedAnnotation>;

struct GenerationRecord {
    std::string image_id;
    std::string caption;
    double total_logprob = 0.0;
    std::string method;
};

struct EmbeddingRecord {
    std::string id;
    std::string kind;  // "image" or "caption"
    std::vector<double> vector;
};

void save_captions(const std::filesystem::path& path, const CaptionMap& captions);
CaptionMap load_captions(const std::filesystem::path& path);

void save_fine_grained(const std::filesystem::path& path, const AnnotationMap& annotations);
AnnotationMap load_fine_grained(const std::filesystem::path& path);
nlohmann::json annotation_to_json(const FineGrainedAnnotation& a);
FineGrainedAnnotation annotation_from_json(const nlohmann::json& j, const std::string& context);

void save_split(const std::filesystem::path& path, const DatasetSplit& split, const WorldConfig& config);
DatasetSplit load_split(const std::filesystem::path& path);

void save_generations(const std::filesystem::path& path, const std::vector<GenerationRecord>& records);
std::vector<GenerationRecord> load_generations(const std::filesystem::path& path);

void save_embeddings(const std::filesystem::path& path, const std::vector<EmbeddingRecord>& records);
std::vector<EmbeddingRecord> load_embeddings(const std::filesystem::path& path);

CaptionMap references_of(const DatasetSplit& split);
AnnotationMap annotations_of(const DatasetSplit& split);

// JSON Lines plumbing shared by every format above.
class JsonlWriter {
public:
    JsonlWriter(const std::filesystem::path& path, const std::string& kind, nlohmann::json header_extra = {});
    void write(const nlohmann::json& record);
    void close();

private:
    std::filesystem::path path_;
    std::string buffer_;
};

struct JsonlFile {
    nlohmann::json header;
    std::vector<nlohmann::json> records;
    std::vector<int> line_numbers;  // 1-based source line of each record
};

// Validates the header kind and version; ParseError carries path and line.
JsonlFile read_jsonl(const std::filesystem::path& path, const std::string& kind);

}  // namespace clipcap::data
