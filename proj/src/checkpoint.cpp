#include "clipcap/checkpoint.hpp"

#include "clipcap/errors.hpp"

#include <array>
#include <cstring>
#include <fstream>

namespace clipcap::ckpt {

namespace {

using nlohmann::json;

constexpr std::array<char, 8> kMagic{'C', 'L', 'I', 'P', 'C', 'A', 'P', 'K'};

template <class T>
void write_pod(std::ostream& out, T value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof value);
}

template <class T>
T read_pod(std::istream& in, const std::filesystem::path& path) {
    T value{};
    if (!in.read(reinterpret_cast<char*>(&value), sizeof value)) throw ParseError(path.string() + ": truncated checkpoint");
    return value;
}

}  // namespace

json vocab_to_json(const text::Vocabulary& vocab) {
    return {{"tokens", vocab.tokens()}, {"counts", vocab.counts()}, {"min_freq", vocab.min_freq()}};
}

text::Vocabulary vocab_from_json(const json& j) {
    return text::Vocabulary::from_tokens(j.at("tokens").get<std::vector<std::string>>(),
                                         j.at("counts").get<std::vector<long long>>(), j.at("min_freq").get<int>());
}

void save(const std::filesystem::path& path, const Checkpoint& ckpt) {
    json tensors = json::array();
    std::size_t offset = 0;
    for (const auto& [name, var] : ckpt.params.entries()) {
        tensors.push_back({{"name", name}, {"rows", var.rows()}, {"cols", var.cols()}, {"offset", offset}});
        offset += static_cast<std::size_t>(var.value().size());
    }
    json header = {{"kind", ckpt.kind},
                   {"config", ckpt.config},
                   {"vocab", vocab_to_json(ckpt.vocab)},
                   {"meta", ckpt.meta.is_null() ? json::object() : ckpt.meta},
                   {"tensors", tensors}};
    const std::string text = header.dump();

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint '" + path.string() + "'");
    out.write(kMagic.data(), kMagic.size());
    write_pod<std::uint32_t>(out, kVersion);
    write_pod<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, var] : ckpt.params.entries()) {
        out.write(reinterpret_cast<const char*>(var.value().data()),
                  static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(var.value().size())));
    }
    if (!out) throw IoError("failed writing checkpoint '" + path.string() + "'");
}

Checkpoint load(const std::filesystem::path& path, const std::string& expected_kind) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
    std::array<char, 8> magic{};
    if (!in.read(magic.data(), magic.size()) || magic != kMagic) {
        throw ParseError(path.string() + ": not a clipcap checkpoint");
    }
    const auto version = read_pod<std::uint32_t>(in, path);
    if (version != kVersion) throw ParseError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
    const auto header_len = read_pod<std::uint64_t>(in, path);
    if (header_len > (1ULL << 30)) throw ParseError(path.string() + ": implausible header length");
    std::string text(header_len, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(header_len))) throw ParseError(path.string() + ": truncated header");

    Checkpoint ckpt{"", json::object(), text::Vocabulary{}, ParamStore{}, json::object()};
    try {
        const json header = json::parse(text);
        ckpt.kind = header.at("kind");
        if (!expected_kind.empty() && ckpt.kind != expected_kind) {
            throw ParseError(path.string() + ": expected a " + expected_kind + " checkpoint, found " + ckpt.kind);
        }
        ckpt.config = header.at("config");
        ckpt.vocab = vocab_from_json(header.at("vocab"));
        ckpt.meta = header.value("meta", json::object());
        for (const auto& t : header.at("tensors")) {
            const auto rows = t.at("rows").get<ag::Index>();
            const auto cols = t.at("cols").get<ag::Index>();
            ag::Matrix m(rows, cols);
            if (!in.read(reinterpret_cast<char*>(m.data()),
                         static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(m.size())))) {
                throw ParseError(path.string() + ": truncated tensor '" + t.at("name").get<std::string>() + "'");
            }
            ckpt.params.add(t.at("name"), std::move(m));
        }
    } catch (const json::exception& e) {
        throw ParseError(path.string() + ": bad checkpoint header (" + e.what() + ")");
    }
    return ckpt;
}

void save_encoder(const std::filesystem::path& path, const dual::DualEncoder& enc, json meta) {
    save(path, Checkpoint{"dual_encoder", enc.config().to_json(), enc.vocab(), enc.params(), std::move(meta)});
}

dual::DualEncoder load_encoder(const std::filesystem::path& path) {
    Checkpoint c = load(path, "dual_encoder");
    return dual::DualEncoder(dual::EncoderConfig::from_json(c.config), std::move(c.vocab), std::move(c.params));
}

void save_captioner(const std::filesystem::path& path, const cap::Captioner& model, json meta) {
    save(path, Checkpoint{"captioner", model.config().to_json(), model.vocab(), model.params(), std::move(meta)});
}

cap::Captioner load_captioner(const std::filesystem::path& path) {
    Checkpoint c = load(path, "captioner");
    return cap::Captioner(cap::CaptionerConfig::from_json(c.config), std::move(c.vocab), std::move(c.params));
}

}  // namespace clipcap::ckpt
