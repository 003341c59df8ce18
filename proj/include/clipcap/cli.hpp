#pragma once

// Command-line front end. Every subcommand writes a manifest next to its
// outputs recording the fully resolved arguments, seeds, and FNV-1a digests
// of inputs and outputs; `replay --manifest FILE` re-runs it.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace clipcap::cli {

// args excludes the program name.
int run(const std::vector<std::string>& args);

// Hex FNV-1a 64 digest of a file's bytes.
std::string file_digest(const std::filesystem::path& path);

}  // namespace clipcap::cli
