#include "ctrldiff/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "ctrldiff/errors.hpp"

namespace fs = std::filesystem;

namespace ctrldiff {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

void Checkpoint::add(const std::string& name, const nn::Mat<float>& m) {
    if (tensors.count(name) == 0) {
        order.push_back(name);
    }
    tensors[name] = m;
}

const nn::Mat<float>& Checkpoint::at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) {
        throw IngestionError("checkpoint has no tensor '" + name + "'");
    }
    return it->second;
}

static fs::path temp_sibling(const fs::path& path) {
    fs::path tmp = path;
    tmp += ".tmp" + std::to_string(::getpid());
    return tmp;
}

void write_file_atomic(const fs::path& path, const std::string& bytes) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    const fs::path tmp = temp_sibling(path);
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw IngestionError("cannot write " + tmp.string());
        }
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            throw IngestionError("write failed for " + tmp.string());
        }
    }
    fs::rename(tmp, path);
}

void save_checkpoint(const fs::path& dir, const Checkpoint& ckpt) {
    const fs::path tmp = temp_sibling(dir);
    fs::remove_all(tmp);
    fs::create_directories(tmp);

    nlohmann::json manifest;
    manifest["format"] = "ctrldiff-checkpoint";
    manifest["version"] = 1;
    manifest["kind"] = ckpt.kind;
    manifest["config"] = ckpt.config;
    manifest["tensors"] = nlohmann::json::array();
    for (const auto& name : ckpt.order) {
        const auto& m = ckpt.tensors.at(name);
        const std::string file = name + ".bin";
        std::ofstream out(tmp / file, std::ios::binary);
        out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(float)));
        if (!out) {
            throw IngestionError("cannot write tensor " + name);
        }
        manifest["tensors"].push_back(
            {{"name", name}, {"shape", {m.rows(), m.cols()}}, {"dtype", "f32le"}, {"file", file}});
    }
    {
        std::ofstream out(tmp / "manifest.json");
        out << manifest.dump(2) << "\n";
    }
    if (fs::exists(dir)) {
        fs::remove_all(dir);
    }
    if (dir.has_parent_path()) {
        fs::create_directories(dir.parent_path());
    }
    fs::rename(tmp, dir);
}

Checkpoint load_checkpoint(const fs::path& dir, const std::string& expected_kind) {
    const fs::path manifest_path = dir / "manifest.json";
    std::ifstream in(manifest_path);
    if (!in) {
        throw IngestionError("no checkpoint manifest at " + manifest_path.string());
    }
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw IngestionError("malformed checkpoint manifest: " + std::string(e.what()));
    }
    Checkpoint ckpt;
    try {
        ckpt.kind = manifest.at("kind").get<std::string>();
        ckpt.config = manifest.at("config");
        if (!expected_kind.empty() && ckpt.kind != expected_kind) {
            throw IngestionError("checkpoint kind is '" + ckpt.kind + "', expected '" + expected_kind + "'");
        }
        for (const auto& t : manifest.at("tensors")) {
            if (t.at("dtype").get<std::string>() != "f32le") {
                throw IngestionError("unsupported tensor dtype " + t.at("dtype").dump());
            }
            const auto rows = t.at("shape").at(0).get<Eigen::Index>();
            const auto cols = t.at("shape").at(1).get<Eigen::Index>();
            nn::Mat<float> m(rows, cols);
            const fs::path file = dir / t.at("file").get<std::string>();
            std::ifstream bin(file, std::ios::binary);
            bin.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(float)));
            if (!bin || bin.peek() != std::char_traits<char>::eof()) {
                throw IngestionError("tensor file " + file.string() + " does not match its shape");
            }
            ckpt.add(t.at("name").get<std::string>(), m);
        }
    } catch (const nlohmann::json::exception& e) {
        throw IngestionError("malformed checkpoint manifest: " + std::string(e.what()));
    }
    return ckpt;
}

void store_transformer(Checkpoint& ckpt, const std::string& prefix, const nn::Transformer<float>& net) {
    net.visit([&](const std::string& name, const nn::Mat<float>& m) { ckpt.add(prefix + name, m); });
}

void restore_transformer(const Checkpoint& ckpt, const std::string& prefix, nn::Transformer<float>& net) {
    net.visit([&](const std::string& name, nn::Mat<float>& m) {
        const auto& src = ckpt.at(prefix + name);
        if (src.rows() != m.rows() || src.cols() != m.cols()) {
            throw IngestionError("tensor " + prefix + name + " has the wrong shape");
        }
        m = src;
    });
}

}  // namespace ctrldiff
