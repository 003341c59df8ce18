#include "clipcap/checkpoint.hpp"
#include "clipcap/cli.hpp"
#include "clipcap/data_io.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace clipcap;
namespace fs = std::filesystem;

namespace {

int run(std::initializer_list<std::string> args) { return cli::run(std::vector<std::string>(args)); }

fs::path fresh_dir(const std::string& name) {
    const fs::path d = fs::temp_directory_path() / "clipcap_cli" / name;
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

std::string read_all(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

// Small end-to-end run in `dir`; returns the exit codes in order.
std::vector<int> pipeline(const fs::path& dir) {
    const std::string d = dir.string();
    return {
        run({"generate-world", "--n", "16", "--seed", "4", "--d-img", "8", "--out", d + "/world"}),
        run({"train-clip", "--data", d + "/world/train.jsonl", "--out", d + "/clip.ckpt", "--epochs", "1", "--batch-size",
             "4", "--seed", "2"}),
        run({"finetune-grammar", "--clip-ckpt", d + "/clip.ckpt", "--data", d + "/world/train.jsonl", "--out",
             d + "/grammar.ckpt", "--epochs", "1", "--batch-size", "4", "--seed", "3"}),
        run({"train-captioner", "--data", d + "/world/train.jsonl", "--val", d + "/world/val.jsonl", "--reward",
             "clip_s_grammar", "--clip-ckpt", d + "/grammar.ckpt", "--mle-epochs", "1", "--rl-epochs", "1",
             "--max-len", "8", "--out-dir", d + "/runs", "--run-id", "r", "--seed", "5"}),
        run({"generate", "--ckpt", d + "/runs/r/final.ckpt", "--data", d + "/world/test.jsonl", "--out", d + "/gen.jsonl",
             "--method", "beam", "--beam-size", "2"}),
        run({"evaluate", "--gen", d + "/gen.jsonl", "--refs", d + "/world/test.captions.jsonl", "--fine-grained",
             d + "/world/test.fine_grained.jsonl", "--clip-ckpt", d + "/grammar.ckpt", "--data", d + "/world/test.jsonl",
             "--out", d + "/eval.json"}),
    };
}

}  // namespace

TEST_CASE("exit codes") {
    CHECK(run({}) == 2);
    CHECK(run({"no-such-command"}) == 2);
    CHECK(run({"generate-world", "--out", "x"}) == 2);
    CHECK(run({"generate-world", "--n", "abc", "--out", "x"}) == 2);
    const fs::path d = fresh_dir("codes");
    CHECK(run({"generate-world", "--n", "3", "--out", d.string()}) == 1);
    CHECK(run({"train-clip", "--data", (d / "missing.jsonl").string(), "--out", (d / "c.ckpt").string()}) == 1);
    CHECK(run({"train-captioner", "--data", (d / "missing.jsonl").string(), "--reward", "clip_s", "--out-dir",
               d.string()}) == 2);
}

TEST_CASE("full pipeline runs, is byte-identical across runs and replays") {
    const fs::path a = fresh_dir("a"), b = fresh_dir("b");
    for (int code : pipeline(a)) CHECK(code == 0);
    for (int code : pipeline(b)) CHECK(code == 0);
    for (const char* f : {"world/train.jsonl", "world/test.fine_grained.jsonl", "clip.ckpt", "grammar.ckpt",
                          "runs/r/final.ckpt", "runs/r/report.jsonl", "gen.jsonl", "eval.json"}) {
        INFO(f);
        CHECK(read_all(a / f) == read_all(b / f));
    }

    // The grammar stage leaves the image tower untouched.
    const auto clip = ckpt::load(a / "clip.ckpt", "dual_encoder");
    const auto tuned = ckpt::load(a / "grammar.ckpt", "dual_encoder");
    for (const auto& name : clip.params.names_with_prefix("image."))
        CHECK((clip.params.at(name).value().array() == tuned.params.at(name).value().array()).all());

    // Zero finetuning epochs copies the parameters.
    CHECK(run({"finetune-grammar", "--clip-ckpt", (a / "clip.ckpt").string(), "--data", (a / "world/train.jsonl").string(),
               "--out", (a / "zero.ckpt").string(), "--epochs", "0"}) == 0);
    CHECK(ckpt::load(a / "zero.ckpt", "dual_encoder").params.equals(clip.params));

    for (const char* m : {"world/manifest.json", "clip.ckpt.manifest.json", "runs/r/manifest.json", "gen.jsonl.manifest.json",
                          "eval.json.manifest.json"}) {
        INFO(m);
        CHECK(run({"replay", "--manifest", (a / m).string()}) == 0);
    }

    // A tampered output is reported.
    { std::ofstream(a / "gen.jsonl", std::ios::app) << "\n"; }
    CHECK(run({"replay", "--manifest", (a / "gen.jsonl.manifest.json").string()}) == 0);
    CHECK(read_all(a / "gen.jsonl") == read_all(b / "gen.jsonl"));
}

TEST_CASE("evaluating the references against themselves") {
    const fs::path d = fresh_dir("eval");
    REQUIRE(run({"generate-world", "--n", "12", "--seed", "1", "--d-img", "8", "--out", d.string()}) == 0);
    const auto refs = data::load_captions(d / "test.captions.jsonl");
    data::CaptionMap single;
    std::vector<data::GenerationRecord> gens;
    for (const auto& [id, caps] : refs) {
        single[id] = {caps.front()};
        gens.push_back({id, caps.front().text(), 0.0, "greedy"});
    }
    data::save_captions(d / "single.jsonl", single);
    data::save_generations(d / "gen.jsonl", gens);
    REQUIRE(run({"evaluate", "--gen", (d / "gen.jsonl").string(), "--refs", (d / "single.jsonl").string(), "--out",
                 (d / "eval.json").string()}) == 0);
    const auto report = nlohmann::json::parse(read_all(d / "eval.json"));
    CHECK(report["metrics"]["BLEU-4"].get<double>() == doctest::Approx(100.0));
    CHECK(report["metrics"]["CIDEr"].get<double>() == doctest::Approx(10.0));

    gens.pop_back();
    data::save_generations(d / "short.jsonl", gens);
    CHECK(run({"evaluate", "--gen", (d / "short.jsonl").string(), "--refs", (d / "single.jsonl").string()}) == 1);
    CHECK(run({"evaluate", "--refs", (d / "single.jsonl").string()}) == 2);
}

TEST_CASE("train-captioner prerequisites") {
    const fs::path d = fresh_dir("prereq");
    REQUIRE(run({"generate-world", "--n", "12", "--seed", "1", "--d-img", "8", "--out", d.string()}) == 0);
    CHECK(run({"train-captioner", "--data", (d / "train.jsonl").string(), "--reward", "clip_s_grammar", "--out-dir",
               (d / "runs").string()}) == 2);
    CHECK(run({"train-captioner", "--data", (d / "train.jsonl").string(), "--reward", "mle", "--mle-epochs", "1",
               "--max-len", "8", "--out-dir", (d / "runs").string(), "--run-id", "mle"}) == 0);
    CHECK(fs::exists(d / "runs" / "mle" / "final.ckpt"));
}
