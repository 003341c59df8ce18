#pragma once

// Binary checkpoint container.
//
//   bytes 0..7   magic "CLIPCAPK"
//   uint32       format version (1)
//   uint64       header length H
//   H bytes      JSON header: {"kind", "config", "vocab": {"tokens", "counts", "min_freq"},
//                "meta", "tensors": [{"name", "rows", "cols", "offset"}]}
//   payload      row-major little-endian float64 values; offsets count doubles
//
// Tensors are written in name order, so equal models give equal files.

#include "clipcap/captioner.hpp"
#include "clipcap/dual_encoder.hpp"
#include "clipcap/params.hpp"
#include "clipcap/textproc.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>

namespace clipcap::ckpt {

inline constexpr std::uint32_t kVersion = 1;

struct Checkpoint {
    std::string kind;  // "dual_encoder" or "captioner"
    nlohmann::json config;
    text::Vocabulary vocab;
    ParamStore params;
    nlohmann::json meta;
};

void save(const std::filesystem::path& path, const Checkpoint& ckpt);
// Throws IoError when the file is missing and ParseError when it is malformed
// or holds a different kind than expected (empty expected_kind accepts any).
Checkpoint load(const std::filesystem::path& path, const std::string& expected_kind = "");

nlohmann::json vocab_to_json(const text::Vocabulary& vocab);
text::Vocabulary vocab_from_json(const nlohmann::json& j);

void save_encoder(const std::filesystem::path& path, const dual::DualEncoder& enc, nlohmann::json meta = {});
dual::DualEncoder load_encoder(const std::filesystem::path& path);

void save_captioner(const std::filesystem::path& path, const cap::Captioner& model, nlohmann::json meta = {});
cap::Captioner load_captioner(const std::filesystem::path& path);

}  // namespace clipcap::ckpt
