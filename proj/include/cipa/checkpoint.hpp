#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "cipa/net.hpp"
#include "cipa/optim.hpp"

namespace cipa {

// ---------------------------------------------------------------------------
// Checkpoint container: 8-byte magic, u64 little-endian JSON length, JSON
// index, then a blob of TSR1 records. The index maps each tensor name to its
// byte offset (relative to the blob start) and shape; the run config is
// echoed verbatim. Writes are atomic (temp file + rename), reloads are
// bit-exact.
// ---------------------------------------------------------------------------

namespace detail {
inline constexpr char kCkptMagic[8] = {'C', 'I', 'P', 'A', 'C', 'K', 'P', 'T'};
}

struct Checkpoint {
    std::size_t step = 0;
    nlohmann::json config;
    std::vector<std::pair<std::string, Tensor<float>>> tensors;

    const Tensor<float>* find(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return &t;
        return nullptr;
    }
};

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    std::ostringstream blob(std::ios::binary);
    nlohmann::json index = nlohmann::json::object();
    for (const auto& [name, tensor] : ckpt.tensors) {
        nlohmann::json entry;
        entry["offset"] = std::size_t(blob.tellp());
        entry["shape"] = tensor.shape();
        index[name] = entry;
        write_tsr(blob, tensor);
    }
    nlohmann::json meta;
    meta["format"] = 1;
    meta["step"] = ckpt.step;
    meta["config"] = ckpt.config;
    meta["tensors"] = index;
    const std::string meta_str = meta.dump();

    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("save_checkpoint: cannot open " + tmp.string());
        os.write(detail::kCkptMagic, 8);
        detail::put_u64(os, meta_str.size());
        os.write(meta_str.data(), std::streamsize(meta_str.size()));
        const std::string payload = blob.str();
        os.write(payload.data(), std::streamsize(payload.size()));
        if (!os) throw IoError("save_checkpoint: write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("load_checkpoint: cannot open " + path.string());
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, detail::kCkptMagic, 8) != 0)
        throw IoError("load_checkpoint: bad magic in " + path.string());
    const std::uint64_t meta_len = detail::get_u64(is);
    std::string meta_str(meta_len, '\0');
    is.read(meta_str.data(), std::streamsize(meta_len));
    if (!is) throw IoError("load_checkpoint: truncated index in " + path.string());
    nlohmann::json meta = nlohmann::json::parse(meta_str, nullptr, false);
    if (meta.is_discarded()) throw IoError("load_checkpoint: unparseable index");

    Checkpoint ckpt;
    ckpt.step = meta.at("step").get<std::size_t>();
    ckpt.config = meta.value("config", nlohmann::json::object());
    const std::streampos blob_start = is.tellg();
    // The index is name-sorted (nlohmann object order); offsets restore the
    // original record order on load.
    std::vector<std::pair<std::size_t, std::string>> order;
    for (auto it = meta.at("tensors").begin(); it != meta.at("tensors").end(); ++it)
        order.emplace_back(it.value().at("offset").get<std::size_t>(), it.key());
    std::sort(order.begin(), order.end());
    for (const auto& [offset, name] : order) {
        is.seekg(blob_start + std::streampos(offset));
        ckpt.tensors.emplace_back(name, read_tsr<float>(is, path.string() + ":" + name));
    }
    return ckpt;
}

// ---------------------------------------------------------------------------
// Model/optimizer snapshot round-trip.
// ---------------------------------------------------------------------------

inline Checkpoint snapshot(CipaNet<float>& net, const AdamWState<float>& opt,
                           const nlohmann::json& config_echo) {
    Checkpoint ckpt;
    ckpt.step = opt.step;
    ckpt.config = config_echo;
    std::size_t k = 0;
    net.visit_params([&](const std::string& name, Tensor<float>& t) {
        ckpt.tensors.emplace_back("param." + name, t.clone());
        ckpt.tensors.emplace_back("adam.m." + name,
                                  Tensor<float>::from_data(t.shape(), opt.m[k]));
        ckpt.tensors.emplace_back("adam.v." + name,
                                  Tensor<float>::from_data(t.shape(), opt.v[k]));
        ++k;
    });
    return ckpt;
}

// Restores parameters and moments in place; shapes must match the net.
inline void restore(CipaNet<float>& net, AdamWState<float>& opt, const Checkpoint& ckpt) {
    std::size_t k = 0;
    bool missing = false;
    std::string missing_name;
    net.visit_params([&](const std::string& name, Tensor<float>& t) {
        const Tensor<float>* p = ckpt.find("param." + name);
        const Tensor<float>* m = ckpt.find("adam.m." + name);
        const Tensor<float>* v = ckpt.find("adam.v." + name);
        if (!p || !m || !v) {
            missing = true;
            if (missing_name.empty()) missing_name = name;
            ++k;
            return;
        }
        if (p->shape() != t.shape())
            throw ContractError("restore: shape mismatch for " + name + ": checkpoint " +
                                shape_str(p->shape()) + " vs model " + shape_str(t.shape()));
        t.vec() = p->vec();
        opt.m[k] = m->vec();
        opt.v[k] = v->vec();
        ++k;
    });
    if (missing)
        throw ContractError("restore: checkpoint is missing tensor '" + missing_name +
                            "' (config mismatch?)");
    std::size_t ckpt_params = 0;
    for (const auto& [name, t] : ckpt.tensors)
        ckpt_params += name.rfind("param.", 0) == 0;
    if (ckpt_params != k)
        throw ContractError("restore: checkpoint holds " + std::to_string(ckpt_params) +
                            " parameter tensors but the model has " + std::to_string(k) +
                            " (config mismatch?)");
    opt.step = ckpt.step;
}

}  // namespace cipa
