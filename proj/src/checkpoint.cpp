#include <cmath>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <map>

#include "dacvlm/model.hpp"

namespace dacvlm {

using nlohmann::json;

namespace {

constexpr int kFormatVersion = 1;

json provenance_to_json(const Provenance& p) {
    json j;
    j["stage"] = p.stage;
    j["step"] = p.step;
    j["seed"] = p.seed;
    if (std::isfinite(p.heldout_ppl)) j["heldout_ppl"] = p.heldout_ppl;
    return j;
}

Provenance provenance_from_json(const json& j) {
    Provenance p;
    p.stage = j.value("stage", "unknown");
    p.step = j.value("step", std::int64_t{0});
    p.seed = j.value("seed", std::uint64_t{0});
    p.heldout_ppl = j.value("heldout_ppl", std::numeric_limits<double>::quiet_NaN());
    return p;
}

}  // namespace

void save_checkpoint(const Model& model, const std::string& path) {
    const auto params = model.named_params();
    json manifest;
    manifest["format_version"] = kFormatVersion;
    manifest["config"] = json::parse(model.config.to_json_string());
    manifest["provenance"] = provenance_to_json(model.provenance);
    json tensors = json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : params) {
        json entry;
        entry["name"] = name;
        entry["shape"] = t->shape;
        entry["offset"] = offset;
        entry["len"] = t->data.size() * sizeof(double);
        tensors.push_back(entry);
        offset += t->data.size() * sizeof(double);
    }
    manifest["tensors"] = tensors;

    const std::string mstr = manifest.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("save_checkpoint: cannot open " + path + " for writing");
    const std::uint64_t mlen = mstr.size();
    out.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
    out.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));
    for (const auto& [name, t] : params) {
        out.write(reinterpret_cast<const char*>(t->data.data()),
                  static_cast<std::streamsize>(t->data.size() * sizeof(double)));
    }
    if (!out) throw IoError("save_checkpoint: short write to " + path);
}

Model load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_checkpoint: cannot open " + path);
    std::uint64_t mlen = 0;
    in.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
    if (in.gcount() != sizeof(mlen)) throw IoError("load_checkpoint: truncated header");
    std::string mstr(mlen, '\0');
    in.read(mstr.data(), static_cast<std::streamsize>(mlen));
    if (in.gcount() != static_cast<std::streamsize>(mlen)) {
        throw IoError("load_checkpoint: truncated manifest");
    }
    json manifest;
    try {
        manifest = json::parse(mstr);
    } catch (const json::exception& e) {
        throw IoError(std::string("load_checkpoint: corrupt manifest: ") + e.what());
    }
    if (manifest.value("format_version", -1) != kFormatVersion) {
        throw IoError("load_checkpoint: unsupported format version");
    }

    const ModelConfig cfg = ModelConfig::from_json_string(manifest.at("config").dump());
    const Provenance prov = provenance_from_json(manifest.at("provenance"));

    // Manifest validation happens before any payload read.
    struct Entry {
        std::string name;
        std::vector<std::int64_t> shape;
        std::uint64_t offset = 0;
        std::uint64_t len = 0;
    };
    std::vector<Entry> entries;
    std::uint64_t expect_offset = 0;
    std::map<std::string, std::size_t> by_name;
    for (const auto& je : manifest.at("tensors")) {
        Entry e;
        e.name = je.at("name").get<std::string>();
        e.shape = je.at("shape").get<std::vector<std::int64_t>>();
        e.offset = je.at("offset").get<std::uint64_t>();
        e.len = je.at("len").get<std::uint64_t>();
        if (by_name.count(e.name)) {
            throw IoError("load_checkpoint: duplicate tensor name " + e.name);
        }
        if (e.offset != expect_offset) {
            throw IoError("load_checkpoint: non-contiguous payload at " + e.name);
        }
        if (e.len != static_cast<std::uint64_t>(shape_numel(e.shape)) * sizeof(double)) {
            throw IoError("load_checkpoint: shape/payload mismatch for " + e.name);
        }
        expect_offset += e.len;
        by_name[e.name] = entries.size();
        entries.push_back(std::move(e));
    }

    in.seekg(0, std::ios::end);
    const std::uint64_t file_size = static_cast<std::uint64_t>(in.tellg());
    if (file_size != sizeof(mlen) + mlen + expect_offset) {
        throw IoError("load_checkpoint: truncated payload (expected " +
                      std::to_string(sizeof(mlen) + mlen + expect_offset) + " bytes, have " +
                      std::to_string(file_size) + ")");
    }
    in.seekg(static_cast<std::streamoff>(sizeof(mlen) + mlen), std::ios::beg);

    Model model = Model::init(cfg, prov.seed);
    model.provenance = prov;
    const auto params = model.named_params();
    if (params.size() != entries.size()) {
        throw IoError("load_checkpoint: tensor count mismatch (file has " +
                      std::to_string(entries.size()) + ", config implies " +
                      std::to_string(params.size()) + ")");
    }
    for (const auto& [name, t] : params) {
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw IoError("load_checkpoint: missing tensor " + name);
        }
        const Entry& e = entries[it->second];
        if (e.shape != t->shape) {
            throw IoError("load_checkpoint: shape mismatch for " + name + ": file " +
                          shape_str(e.shape) + " vs config " + shape_str(t->shape));
        }
        in.seekg(static_cast<std::streamoff>(sizeof(mlen) + mlen + e.offset), std::ios::beg);
        in.read(reinterpret_cast<char*>(t->data.data()),
                static_cast<std::streamsize>(e.len));
        if (in.gcount() != static_cast<std::streamsize>(e.len)) {
            throw IoError("load_checkpoint: short read for " + name);
        }
    }
    return model;
}

Model load_checkpoint(const std::string& path, VariantKind expected_variant) {
    Model m = load_checkpoint(path);
    if (m.config.variant != expected_variant) {
        throw ConfigError("load_checkpoint: checkpoint variant '" +
                          variant_to_string(m.config.variant) + "' does not match expected '" +
                          variant_to_string(expected_variant) + "'");
    }
    return m;
}

}  // namespace dacvlm
