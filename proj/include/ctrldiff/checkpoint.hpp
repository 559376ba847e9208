#pragma once

// Checkpoint directories: manifest.json plus one raw little-endian float32
// file per tensor.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctrldiff/nn.hpp"

namespace ctrldiff {

struct Checkpoint {
    std::string kind;
    nlohmann::json config;
    std::vector<std::string> order;
    std::map<std::string, nn::Mat<float>> tensors;

    void add(const std::string& name, const nn::Mat<float>& m);
    const nn::Mat<float>& at(const std::string& name) const;
};

// Writes into a sibling temporary directory and renames it over `dir`.
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
// Throws IngestionError on a missing or malformed checkpoint; when
// expected_kind is non-empty the manifest kind must match.
Checkpoint load_checkpoint(const std::filesystem::path& dir, const std::string& expected_kind = "");

// Copies every transformer parameter into / out of the checkpoint with the
// given name prefix.
void store_transformer(Checkpoint& ckpt, const std::string& prefix, const nn::Transformer<float>& net);
void restore_transformer(const Checkpoint& ckpt, const std::string& prefix, nn::Transformer<float>& net);

// Atomic text / binary file write via rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);

}  // namespace ctrldiff
