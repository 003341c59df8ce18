#include "clipcap/data_io.hpp"

#include "clipcap/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace clipcap::data {

namespace {

using nlohmann::json;

const std::vector<std::string> kSizes{"big", "medium", "small"};
const std::vector<std::string> kCriteria{"background", "object", "relation", "overall"};

int index_of(const std::vector<std::string>& v, const std::string& s) {
    auto it = std::find(v.begin(), v.end(), s);
    if (it == v.end()) throw ConfigInvalid("value '" + s + "' is not in the closed vocabulary");
    return static_cast<int>(it - v.begin());
}

std::string object_phrase(const SceneObject& o) { return o.size + " " + o.color + " " + o.shape; }
std::string short_name(const SceneObject& o) { return o.color + " " + o.shape; }

std::string image_id_for(int i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "img_%05d", i);
    return buf;
}

json scene_to_json(const SceneSpec& s) {
    json objects = json::array();
    for (const auto& o : s.objects) objects.push_back({{"shape", o.shape}, {"color", o.color}, {"size", o.size}});
    json relations = json::array();
    for (const auto& r : s.relations) {
        relations.push_back({{"subject", r.subject}, {"predicate", r.predicate}, {"object", r.object}});
    }
    return {{"background", s.background}, {"objects", objects}, {"relations", relations}, {"rng_seed", s.rng_seed}};
}

SceneSpec scene_from_json(const json& j, const std::string& image_id) {
    SceneSpec s;
    s.image_id = image_id;
    s.background = j.at("background");
    for (const auto& o : j.at("objects")) s.objects.push_back({o.at("shape"), o.at("color"), o.at("size")});
    for (const auto& r : j.at("relations")) s.relations.push_back({r.at("subject"), r.at("predicate"), r.at("object")});
    s.rng_seed = j.at("rng_seed");
    s.validate();
    return s;
}

std::string context(const std::filesystem::path& path, int line) {
    return path.string() + ":" + std::to_string(line);
}

std::vector<text::Caption> parse_captions(const json& arr, const std::string& where) {
    std::vector<text::Caption> out;
    for (const auto& c : arr) {
        try {
            out.push_back(text::Caption::parse(c.get<std::string>()));
        } catch (const EmptyText& e) {
            throw ParseError(where + ": empty caption text");
        }
    }
    return out;
}

std::vector<std::string> normalized_phrases(const json& arr, const std::string& where) {
    std::vector<std::string> out;
    for (const auto& p : arr) {
        try {
            out.push_back(text::normalize(p.get<std::string>()));
        } catch (const EmptyText&) {
            throw ParseError(where + ": empty phrase");
        }
    }
    return out;
}

}  // namespace

void SceneSpec::validate() const {
    if (objects.empty()) throw ConfigInvalid("scene '" + image_id + "' has no objects");
    for (const auto& r : relations) {
        const int n = static_cast<int>(objects.size());
        if (r.subject < 0 || r.subject >= n || r.object < 0 || r.object >= n) {
            throw ConfigInvalid("scene '" + image_id + "' has a relation with an invalid object index");
        }
    }
}

void FineGrainedAnnotation::validate() const {
    const std::pair<const char*, const std::vector<std::string>*> lists[] = {
        {"background", &background}, {"object", &object}, {"relation", &relation}, {"overall", &overall}};
    for (const auto& [name, list] : lists) {
        if (list->empty()) throw EmptyEntry("image '" + image_id + "' has no " + name + " phrases");
    }
}

void WorldConfig::validate() const {
    if (d_img < 1) throw ConfigInvalid("d_img must be >= 1");
    if (refs_per_image < 1 || annotators < 1) throw ConfigInvalid("refs_per_image and annotators must be >= 1");
    if (min_objects < 2 || max_objects < min_objects) {
        throw ConfigInvalid("need 2 <= min_objects <= max_objects so every scene has a relation");
    }
    if (train_fraction <= 0.0 || val_fraction <= 0.0 || train_fraction + val_fraction >= 1.0) {
        throw ConfigInvalid("split fractions must leave room for train, val and test");
    }
    if (backgrounds.empty() || predicates.empty()) throw ConfigInvalid("closed vocabularies must be non-empty");
    if (shapes.size() * colors.size() < static_cast<std::size_t>(max_objects)) {
        throw ConfigInvalid("not enough shape/color combinations for max_objects distinct objects");
    }
}

json WorldConfig::to_json() const {
    return {{"d_img", d_img},
            {"refs_per_image", refs_per_image},
            {"annotators", annotators},
            {"min_objects", min_objects},
            {"max_objects", max_objects},
            {"train_fraction", train_fraction},
            {"val_fraction", val_fraction},
            {"projection_seed", projection_seed},
            {"backgrounds", backgrounds},
            {"shapes", shapes},
            {"colors", colors},
            {"predicates", predicates}};
}

WorldConfig WorldConfig::from_json(const json& j) {
    WorldConfig c;
    c.d_img = j.value("d_img", c.d_img);
    c.refs_per_image = j.value("refs_per_image", c.refs_per_image);
    c.annotators = j.value("annotators", c.annotators);
    c.min_objects = j.value("min_objects", c.min_objects);
    c.max_objects = j.value("max_objects", c.max_objects);
    c.train_fraction = j.value("train_fraction", c.train_fraction);
    c.val_fraction = j.value("val_fraction", c.val_fraction);
    c.projection_seed = j.value("projection_seed", c.projection_seed);
    c.backgrounds = j.value("backgrounds", c.backgrounds);
    c.shapes = j.value("shapes", c.shapes);
    c.colors = j.value("colors", c.colors);
    c.predicates = j.value("predicates", c.predicates);
    c.validate();
    return c;
}

Eigen::VectorXd render_features(const SceneSpec& scene, const WorldConfig& config) {
    const int slot_width = 1 + static_cast<int>(config.shapes.size() + config.colors.size() + kSizes.size());
    const int pred_width = static_cast<int>(config.predicates.size());
    const int width = static_cast<int>(config.backgrounds.size()) + config.max_objects * slot_width +
                      (config.max_objects - 1) * pred_width;
    if (static_cast<int>(scene.objects.size()) > config.max_objects) {
        throw ConfigInvalid("scene '" + scene.image_id + "' has more objects than max_objects");
    }

    Eigen::VectorXd onehot = Eigen::VectorXd::Zero(width);
    onehot(index_of(config.backgrounds, scene.background)) = 1.0;
    int base = static_cast<int>(config.backgrounds.size());
    for (const auto& o : scene.objects) {
        onehot(base) = 1.0;
        onehot(base + 1 + index_of(config.shapes, o.shape)) = 1.0;
        onehot(base + 1 + static_cast<int>(config.shapes.size()) + index_of(config.colors, o.color)) = 1.0;
        onehot(base + 1 + static_cast<int>(config.shapes.size() + config.colors.size()) + index_of(kSizes, o.size)) = 1.0;
        base += slot_width;
    }
    base = static_cast<int>(config.backgrounds.size()) + config.max_objects * slot_width;
    for (const auto& r : scene.relations) {
        // Relation slots follow the subject index (chains 0-1, 1-2, ...).
        if (r.subject < config.max_objects - 1) onehot(base + r.subject * pred_width + index_of(config.predicates, r.predicate)) = 1.0;
    }

    Rng proj(config.projection_seed);
    Eigen::MatrixXd projection(config.d_img, width);
    const double stddev = 1.0 / std::sqrt(1.0 + config.max_objects * 4.0);
    for (Eigen::Index i = 0; i < projection.size(); ++i) projection.data()[i] = proj.normal(0.0, stddev);
    return projection * onehot;
}

text::Caption distinctive_caption(const SceneSpec& scene) {
    std::string s;
    for (std::size_t i = 0; i < scene.objects.size(); ++i) {
        if (i) s += " and ";
        s += "a " + object_phrase(scene.objects[i]);
    }
    s += " on " + scene.background;
    for (const auto& r : scene.relations) {
        s += " the " + short_name(scene.objects[static_cast<std::size_t>(r.subject)]) + " is " + r.predicate + " the " +
             short_name(scene.objects[static_cast<std::size_t>(r.object)]);
    }
    return text::Caption::parse(s);
}

std::vector<text::Caption> salient_references(const SceneSpec& scene, int count, std::uint64_t seed) {
    const SceneObject& o = scene.objects.front();
    std::vector<std::string> pool{
        "a " + o.size + " " + o.color + " " + o.shape,
        "there is a " + o.color + " " + o.shape,
        "a " + o.shape + " that is " + o.color,
        "a " + o.color + " " + o.shape + " is shown",
        "a " + o.color + " " + o.shape + " on " + scene.background,
        "a photo of a " + o.color + " " + o.shape,
    };
    Rng rng(seed);
    std::shuffle(pool.begin(), pool.end(), rng.engine());
    std::vector<text::Caption> out;
    for (int i = 0; i < count; ++i) out.push_back(text::Caption::parse(pool[static_cast<std::size_t>(i) % pool.size()]));
    return out;
}

FineGrainedAnnotation annotate(const SceneSpec& scene, int annotators) {
    FineGrainedAnnotation a;
    a.image_id = scene.image_id;
    const std::string& bg = scene.background;
    // Variants reuse words the distinctive caption already contains.
    const std::vector<std::string> bg_variants{bg, "the " + bg, "on " + bg, "on the " + bg};
    for (int k = 0; k < annotators; ++k) {
        a.background.push_back(bg_variants[static_cast<std::size_t>(k) % bg_variants.size()]);
        for (const auto& o : scene.objects) {
            switch (k % 3) {
                case 0: a.object.push_back(object_phrase(o)); break;
                case 1: a.object.push_back("a " + short_name(o)); break;
                default: a.object.push_back(short_name(o)); break;
            }
        }
        for (const auto& r : scene.relations) {
            const auto& s = scene.objects[static_cast<std::size_t>(r.subject)];
            const auto& t = scene.objects[static_cast<std::size_t>(r.object)];
            switch (k % 3) {
                case 0: a.relation.push_back(r.predicate); break;
                case 1: a.relation.push_back(s.shape + " " + r.predicate + " " + t.shape); break;
                default: a.relation.push_back(short_name(s) + " is " + r.predicate + " the " + short_name(t)); break;
            }
        }
        // Overall captions list the objects starting from a rotated position.
        SceneSpec rotated = scene;
        const std::size_t shift = static_cast<std::size_t>(k) % scene.objects.size();
        std::rotate(rotated.objects.begin(), rotated.objects.begin() + static_cast<std::ptrdiff_t>(shift),
                    rotated.objects.end());
        for (auto& r : rotated.relations) {
            const auto n = static_cast<int>(scene.objects.size());
            r.subject = (r.subject - static_cast<int>(shift) + n) % n;
            r.object = (r.object - static_cast<int>(shift) + n) % n;
        }
        a.overall.push_back(distinctive_caption(rotated).text());
    }
    for (const auto& c : kCriteria) a.annotators[c] = annotators;
    return a;
}

std::vector<text::Caption> alt_text_captions(const SceneSpec& scene, int count) {
    Rng rng = Rng::substream(scene.rng_seed, "alt_text");
    std::vector<text::Caption> out;
    for (int k = 0; k < count; ++k) {
        std::vector<std::string> chunks;
        for (const auto& o : scene.objects) {
            // Keyword repetition tracks prominence: big 3, medium 2, small 1.
            const int repeats = 3 - index_of(kSizes, o.size);
            for (int i = 0; i < repeats; ++i) chunks.push_back(short_name(o));
        }
        chunks.push_back(scene.background);
        std::shuffle(chunks.begin(), chunks.end(), rng.engine());
        std::string s;
        for (const auto& c : chunks) s += (s.empty() ? "" : " ") + c;
        out.push_back(text::Caption::parse(s));
    }
    return out;
}

World generate_world(int n_images, const WorldConfig& config, std::uint64_t seed) {
    config.validate();
    if (n_images < 10) throw ConfigInvalid("generate_world needs n_images >= 10, got " + std::to_string(n_images));
    Rng rng = Rng::substream(seed, "world.scenes");
    World world;
    world.config = config;
    world.train.name = "train";
    world.val.name = "val";
    world.test.name = "test";
    const int n_train = static_cast<int>(std::floor(n_images * config.train_fraction));
    const int n_val = std::max(1, static_cast<int>(std::floor(n_images * config.val_fraction)));

    for (int i = 0; i < n_images; ++i) {
        SceneSpec s;
        s.image_id = image_id_for(i);
        s.background = config.backgrounds[static_cast<std::size_t>(rng.randint(0, static_cast<long>(config.backgrounds.size()) - 1))];
        const int n_obj = static_cast<int>(rng.randint(config.min_objects, config.max_objects));
        std::set<std::pair<std::string, std::string>> used;
        while (static_cast<int>(s.objects.size()) < n_obj) {
            SceneObject o;
            o.shape = config.shapes[static_cast<std::size_t>(rng.randint(0, static_cast<long>(config.shapes.size()) - 1))];
            o.color = config.colors[static_cast<std::size_t>(rng.randint(0, static_cast<long>(config.colors.size()) - 1))];
            if (!used.emplace(o.shape, o.color).second) continue;
            o.size = s.objects.empty() ? "big" : kSizes[static_cast<std::size_t>(rng.randint(1, 2))];
            s.objects.push_back(o);
        }
        std::stable_sort(s.objects.begin() + 1, s.objects.end(), [](const SceneObject& a, const SceneObject& b) {
            return index_of(kSizes, a.size) < index_of(kSizes, b.size);
        });
        for (int k = 0; k + 1 < n_obj; ++k) {
            const auto p = static_cast<std::size_t>(rng.randint(0, static_cast<long>(config.predicates.size()) - 1));
            s.relations.push_back({k, config.predicates[p], k + 1});
        }
        s.rng_seed = rng.next_u64();
        s.validate();

        SceneExample ex{s, ImageRecord{s.image_id, render_features(s, config)},
                        salient_references(s, config.refs_per_image, s.rng_seed), distinctive_caption(s),
                        annotate(s, config.annotators)};

        DatasetSplit& target = i < n_train ? world.train : (i < n_train + n_val ? world.val : world.test);
        target.examples.push_back(std::move(ex));
    }
    if (world.test.examples.empty()) throw ConfigInvalid("split fractions leave the test split empty");
    return world;
}

// ---------------------------------------------------------------------------
// JSON Lines

JsonlWriter::JsonlWriter(const std::filesystem::path& path, const std::string& kind, json header_extra) : path_(path) {
    json header = {{"format", "clipcap." + kind}, {"version", kFormatVersion}};
    if (header_extra.is_object()) {
        for (auto& [k, v] : header_extra.items()) header[k] = v;
    }
    buffer_ = header.dump() + "\n";
}

void JsonlWriter::write(const json& record) { buffer_ += record.dump() + "\n"; }

void JsonlWriter::close() {
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
    std::ofstream out(path_, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path_.string() + "'");
    out << buffer_;
    if (!out) throw IoError("failed writing '" + path_.string() + "'");
}

JsonlFile read_jsonl(const std::filesystem::path& path, const std::string& kind) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    JsonlFile file;
    std::string line;
    int line_no = 0;
    bool have_header = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ParseError(context(path, line_no) + ": invalid JSON (" + e.what() + ")");
        }
        if (!j.is_object()) throw ParseError(context(path, line_no) + ": expected a JSON object");
        if (!have_header) {
            const std::string expected = "clipcap." + kind;
            if (j.value("format", std::string()) != expected) {
                throw ParseError(context(path, line_no) + ": expected header format '" + expected + "'");
            }
            const int version = j.value("version", -1);
            if (version != kFormatVersion) {
                throw ParseError(context(path, line_no) + ": unsupported " + kind + " version " + std::to_string(version));
            }
            file.header = std::move(j);
            have_header = true;
            continue;
        }
        file.records.push_back(std::move(j));
        file.line_numbers.push_back(line_no);
    }
    if (!have_header) throw ParseError(path.string() + ": missing header line");
    return file;
}

namespace {

template <class Fn>
void for_each_record(const JsonlFile& file, const std::filesystem::path& path, Fn&& fn) {
    for (std::size_t i = 0; i < file.records.size(); ++i) {
        const std::string where = context(path, file.line_numbers[i]);
        try {
            fn(file.records[i], where);
        } catch (const json::exception& e) {
            throw ParseError(where + ": " + e.what());
        }
    }
}

}  // namespace

void save_captions(const std::filesystem::path& path, const CaptionMap& captions) {
    JsonlWriter w(path, "captions");
    for (const auto& [id, caps] : captions) {
        json arr = json::array();
        for (const auto& c : caps) arr.push_back(c.text());
        w.write({{"image_id", id}, {"captions", arr}});
    }
    w.close();
}

CaptionMap load_captions(const std::filesystem::path& path) {
    CaptionMap out;
    const JsonlFile file = read_jsonl(path, "captions");
    for_each_record(file, path, [&](const json& r, const std::string& where) {
        const std::string id = r.at("image_id");
        const auto& arr = r.at("captions");
        if (!arr.is_array()) throw ParseError(where + ": 'captions' must be a list");
        if (arr.empty()) throw EmptyEntry(where + ": image '" + id + "' has no captions");
        if (out.count(id)) throw ParseError(where + ": duplicate image_id '" + id + "'");
        out[id] = parse_captions(arr, where);
    });
    return out;
}

json annotation_to_json(const FineGrainedAnnotation& a) {
    return {{"image_id", a.image_id}, {"background", a.background}, {"object", a.object},
            {"relation", a.relation}, {"overall", a.overall},       {"annotators", a.annotators}};
}

FineGrainedAnnotation annotation_from_json(const json& j, const std::string& where) {
    FineGrainedAnnotation a;
    a.image_id = j.at("image_id");
    for (const auto& c : kCriteria) {
        if (!j.contains(c)) throw ParseError(where + ": image '" + a.image_id + "' is missing criterion '" + c + "'");
        if (!j.at(c).is_array()) throw ParseError(where + ": criterion '" + c + "' must be a list");
    }
    a.background = normalized_phrases(j.at("background"), where);
    a.object = normalized_phrases(j.at("object"), where);
    a.relation = normalized_phrases(j.at("relation"), where);
    for (const auto& c : j.at("overall")) {
        try {
            a.overall.push_back(text::normalize(c.get<std::string>()));
        } catch (const EmptyText&) {
            throw ParseError(where + ": empty overall caption");
        }
    }
    if (j.contains("annotators")) {
        a.annotators = j.at("annotators").get<std::map<std::string, int>>();
    } else {
        for (const auto& c : kCriteria) a.annotators[c] = 5;
    }
    try {
        a.validate();
    } catch (const EmptyEntry& e) {
        throw EmptyEntry(where + ": " + e.what());
    }
    return a;
}

void save_fine_grained(const std::filesystem::path& path, const AnnotationMap& annotations) {
    JsonlWriter w(path, "fine_grained");
    for (const auto& [id, a] : annotations) w.write(annotation_to_json(a));
    w.close();
}

AnnotationMap load_fine_grained(const std::filesystem::path& path) {
    AnnotationMap out;
    const JsonlFile file = read_jsonl(path, "fine_grained");
    for_each_record(file, path, [&](const json& r, const std::string& where) {
        FineGrainedAnnotation a = annotation_from_json(r, where);
        if (out.count(a.image_id)) throw ParseError(where + ": duplicate image_id '" + a.image_id + "'");
        out[a.image_id] = std::move(a);
    });
    return out;
}

void save_split(const std::filesystem::path& path, const DatasetSplit& split, const WorldConfig& config) {
    JsonlWriter w(path, "split", {{"split", split.name}, {"d_img", config.d_img}, {"world", config.to_json()}});
    for (const auto& ex : split.examples) {
        json refs = json::array();
        for (const auto& c : ex.references) refs.push_back(c.text());
        std::vector<double> feats(ex.image.features.data(), ex.image.features.data() + ex.image.features.size());
        w.write({{"image_id", ex.scene.image_id},
                 {"scene", scene_to_json(ex.scene)},
                 {"features", feats},
                 {"references", refs},
                 {"distinctive", ex.distinctive.text()},
                 {"fine_grained", annotation_to_json(ex.annotation)}});
    }
    w.close();
}

DatasetSplit load_split(const std::filesystem::path& path) {
    const JsonlFile file = read_jsonl(path, "split");
    DatasetSplit split;
    split.name = file.header.value("split", std::string("unknown"));
    const int d_img = file.header.value("d_img", -1);
    for_each_record(file, path, [&](const json& r, const std::string& where) {
        const std::string id = r.at("image_id");
        SceneSpec scene = scene_from_json(r.at("scene"), id);
        const auto feats = r.at("features").get<std::vector<double>>();
        if (d_img >= 0 && static_cast<int>(feats.size()) != d_img) {
            throw ParseError(where + ": image '" + id + "' has " + std::to_string(feats.size()) + " features, header says " +
                             std::to_string(d_img));
        }
        if (r.at("references").empty()) throw EmptyEntry(where + ": image '" + id + "' has no references");
        split.examples.push_back(SceneExample{
            std::move(scene),
            ImageRecord{id, Eigen::Map<const Eigen::VectorXd>(feats.data(), static_cast<Eigen::Index>(feats.size()))},
            parse_captions(r.at("references"), where), text::Caption::parse(r.at("distinctive").get<std::string>()),
            annotation_from_json(r.at("fine_grained"), where)});
    });
    return split;
}

void save_generations(const std::filesystem::path& path, const std::vector<GenerationRecord>& records) {
    JsonlWriter w(path, "generations");
    for (const auto& r : records) {
        w.write({{"image_id", r.image_id}, {"caption", r.caption}, {"total_logprob", r.total_logprob}, {"method", r.method}});
    }
    w.close();
}

std::vector<GenerationRecord> load_generations(const std::filesystem::path& path) {
    std::vector<GenerationRecord> out;
    std::set<std::string> seen;
    const JsonlFile file = read_jsonl(path, "generations");
    for_each_record(file, path, [&](const json& r, const std::string& where) {
        GenerationRecord g{r.at("image_id"), r.at("caption"), r.at("total_logprob"), r.at("method")};
        if (!seen.insert(g.image_id).second) throw ParseError(where + ": duplicate image_id '" + g.image_id + "'");
        out.push_back(std::move(g));
    });
    return out;
}

void save_embeddings(const std::filesystem::path& path, const std::vector<EmbeddingRecord>& records) {
    JsonlWriter w(path, "embeddings");
    for (const auto& r : records) w.write({{"id", r.id}, {"kind", r.kind}, {"vector", r.vector}});
    w.close();
}

std::vector<EmbeddingRecord> load_embeddings(const std::filesystem::path& path) {
    std::vector<EmbeddingRecord> out;
    const JsonlFile file = read_jsonl(path, "embeddings");
    for_each_record(file, path, [&](const json& r, const std::string& where) {
        EmbeddingRecord e{r.at("id"), r.at("kind"), r.at("vector").get<std::vector<double>>()};
        if (e.kind != "image" && e.kind != "caption") throw ParseError(where + ": unknown embedding kind '" + e.kind + "'");
        out.push_back(std::move(e));
    });
    return out;
}

CaptionMap references_of(const DatasetSplit& split) {
    CaptionMap out;
    for (const auto& ex : split.examples) out[ex.scene.image_id] = ex.references;
    return out;
}

AnnotationMap annotations_of(const DatasetSplit& split) {
    AnnotationMap out;
    for (const auto& ex : split.examples) out[ex.scene.image_id] = ex.annotation;
    return out;
}

}  // namespace clipcap::data
