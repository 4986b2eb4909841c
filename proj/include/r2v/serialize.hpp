#pragma once

// Raw array container with a JSON manifest, plus checkpoint helpers for
// denoisers, control encoders, LoRA adapters, latents, and feature traces.
//
// File layout: 8-byte magic "R2VT0001", u64 little-endian manifest length,
// UTF-8 JSON manifest, then the concatenated float64 payload. The manifest
// records name, shape, dtype and byte offsets per entry alongside free-form
// metadata.

#include "r2v/denoiser.hpp"
#include "r2v/metrics.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>

namespace r2v {

using nlohmann::json;

inline void save_tensors(const std::string& path,
                         const std::vector<std::pair<std::string, Tensor>>& tensors,
                         const json& meta = json::object()) {
    json manifest;
    manifest["meta"] = meta;
    manifest["entries"] = json::array();
    uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        json e;
        e["name"] = name;
        e["shape"] = t.shape;
        e["dtype"] = "f64";
        e["offset"] = offset;
        e["bytes"] = static_cast<uint64_t>(t.numel()) * sizeof(double);
        manifest["entries"].push_back(e);
        offset += static_cast<uint64_t>(t.numel()) * sizeof(double);
    }
    std::string header = manifest.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("save_tensors: cannot open " + path);
    out.write("R2VT0001", 8);
    uint64_t len = header.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto& [name, t] : tensors) {
        out.write(reinterpret_cast<const char*>(t.ptr()),
                  static_cast<std::streamsize>(t.numel() * sizeof(double)));
    }
    if (!out) throw Error("save_tensors: write failed for " + path);
}

struct TensorFile {
    std::vector<std::pair<std::string, Tensor>> tensors;
    json meta;

    const Tensor& get(const std::string& name) const {
        for (const auto& [n, t] : tensors) {
            if (n == name) return t;
        }
        throw DependencyError("tensor file: missing entry " + name);
    }
    bool has(const std::string& name) const {
        for (const auto& [n, t] : tensors) {
            if (n == name) return true;
        }
        return false;
    }
};

inline TensorFile load_tensors(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DependencyError("load_tensors: cannot open " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::string(magic, 8) != "R2VT0001") {
        throw DependencyError("load_tensors: bad magic in " + path);
    }
    uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string header(len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(len));
    if (!in) throw DependencyError("load_tensors: truncated header in " + path);
    json manifest = json::parse(header, nullptr, false);
    if (manifest.is_discarded()) throw DependencyError("load_tensors: bad manifest in " + path);

    TensorFile tf;
    tf.meta = manifest.value("meta", json::object());
    for (const auto& e : manifest["entries"]) {
        std::vector<int64_t> shape = e["shape"].get<std::vector<int64_t>>();
        Tensor t(shape);
        in.read(reinterpret_cast<char*>(t.ptr()),
                static_cast<std::streamsize>(t.numel() * sizeof(double)));
        if (!in) throw DependencyError("load_tensors: truncated payload in " + path);
        tf.tensors.emplace_back(e["name"].get<std::string>(), std::move(t));
    }
    return tf;
}


inline std::vector<std::pair<std::string, Tensor>> params_to_tensors(
    const std::vector<std::pair<std::string, ad::Value>>& params) {
    std::vector<std::pair<std::string, Tensor>> out;
    out.reserve(params.size());
    for (const auto& [name, v] : params) out.emplace_back(name, v->val);
    return out;
}

// ---- spec <-> json ----

inline json spec_to_json(const DenoiserSpec& s) {
    json j;
    j["latent_channels"] = s.latent_channels;
    j["latent_h"] = s.latent_h;
    j["latent_w"] = s.latent_w;
    j["widths"] = s.widths;
    j["attn_at_level"] = std::vector<int>{s.attn_at_level[0] ? 1 : 0, s.attn_at_level[1] ? 1 : 0};
    j["context_dim"] = s.context_dim;
    j["time_embed_dim"] = s.time_embed_dim;
    j["groups"] = s.groups;
    j["video"] = s.video;
    j["max_frames"] = s.max_frames;
    return j;
}

inline DenoiserSpec spec_from_json(const json& j) {
    DenoiserSpec s;
    s.latent_channels = j.at("latent_channels").get<int64_t>();
    s.latent_h = j.at("latent_h").get<int64_t>();
    s.latent_w = j.at("latent_w").get<int64_t>();
    s.widths = j.at("widths").get<std::vector<int64_t>>();
    auto attn = j.at("attn_at_level").get<std::vector<int>>();
    s.attn_at_level = {attn.at(0) != 0, attn.at(1) != 0};
    s.context_dim = j.at("context_dim").get<int64_t>();
    s.time_embed_dim = j.at("time_embed_dim").get<int64_t>();
    s.groups = j.at("groups").get<int>();
    s.video = j.at("video").get<bool>();
    s.max_frames = j.at("max_frames").get<int64_t>();
    s.validate();
    return s;
}

// ---- checkpoints ----

inline void save_denoiser(const std::string& path, const Denoiser& model, const json& extra_meta) {
    json meta = extra_meta;
    meta["kind"] = "denoiser";
    meta["spec"] = spec_to_json(model.spec);
    meta["weights_hash"] = hash_hex(model.weights_hash());
    save_tensors(path, params_to_tensors(model.parameters()), meta);
}

inline Denoiser load_denoiser(const std::string& path) {
    TensorFile tf = load_tensors(path);
    if (tf.meta.value("kind", "") != "denoiser") {
        throw DependencyError("checkpoint is not a denoiser: " + path);
    }
    Denoiser model(spec_from_json(tf.meta.at("spec")), 0);
    for (const auto& [name, v] : model.parameters()) {
        const Tensor& t = tf.get(name);
        R2V_CHECK(t.shape == v->val.shape, "checkpoint: shape mismatch for " + name);
        v->val = t;
    }
    return model;
}

inline void save_control_encoder(const std::string& path, const ControlEncoder& enc,
                                 const json& extra_meta) {
    json meta = extra_meta;
    meta["kind"] = "control_encoder";
    meta["spec"] = spec_to_json(enc.spec);
    save_tensors(path, params_to_tensors(enc.parameters()), meta);
}

inline ControlEncoder load_control_encoder(const std::string& path) {
    TensorFile tf = load_tensors(path);
    if (tf.meta.value("kind", "") != "control_encoder") {
        throw DependencyError("checkpoint is not a control encoder: " + path);
    }
    ControlEncoder enc(spec_from_json(tf.meta.at("spec")), 0);
    for (const auto& [name, v] : enc.parameters()) {
        const Tensor& t = tf.get(name);
        R2V_CHECK(t.shape == v->val.shape, "checkpoint: shape mismatch for " + name);
        v->val = t;
    }
    return enc;
}

inline void save_lora(const std::string& path, const LoraAdapter& adapter, const json& extra_meta) {
    json meta = extra_meta;
    meta["kind"] = "lora";
    meta["rank"] = adapter.rank;
    meta["scale"] = adapter.scale;
    meta["seed"] = adapter.seed;
    std::vector<std::pair<std::string, Tensor>> tensors;
    for (const auto& [name, e] : adapter.entries) {
        tensors.emplace_back(name + ".A", e.A->val);
        tensors.emplace_back(name + ".B", e.B->val);
    }
    save_tensors(path, tensors, meta);
}

inline std::shared_ptr<LoraAdapter> load_lora(const std::string& path) {
    TensorFile tf = load_tensors(path);
    if (tf.meta.value("kind", "") != "lora") {
        throw DependencyError("checkpoint is not a LoRA adapter: " + path);
    }
    auto adapter = std::make_shared<LoraAdapter>();
    adapter->rank = tf.meta.at("rank").get<int64_t>();
    adapter->scale = tf.meta.at("scale").get<double>();
    adapter->seed = tf.meta.at("seed").get<uint64_t>();
    for (const auto& [name, t] : tf.tensors) {
        if (name.size() > 2 && name.substr(name.size() - 2) == ".A") {
            std::string target = name.substr(0, name.size() - 2);
            LoraEntry& e = adapter->entries[target];
            e.A = ad::param(t);
            e.A->needs_grad = false;
        } else if (name.size() > 2 && name.substr(name.size() - 2) == ".B") {
            std::string target = name.substr(0, name.size() - 2);
            LoraEntry& e = adapter->entries[target];
            e.B = ad::param(t);
            e.B->needs_grad = false;
        }
    }
    for (const auto& [target, e] : adapter->entries) {
        if (!e.A || !e.B) throw DependencyError("lora checkpoint missing a factor for " + target);
    }
    return adapter;
}

inline void save_depth_estimator(const std::string& path, const LearnedDepthEstimator& est,
                                 const json& extra_meta) {
    json meta = extra_meta;
    meta["kind"] = "depth_estimator";
    save_tensors(path, params_to_tensors(est.parameters()), meta);
}

inline LearnedDepthEstimator load_depth_estimator(const std::string& path, uint64_t seed = 0) {
    TensorFile tf = load_tensors(path);
    if (tf.meta.value("kind", "") != "depth_estimator") {
        throw DependencyError("checkpoint is not a depth estimator: " + path);
    }
    LearnedDepthEstimator est(seed, tf.get("c1.w").shape[0]);
    for (const auto& [name, v] : est.parameters()) {
        const Tensor& t = tf.get(name);
        R2V_CHECK(t.shape == v->val.shape, "checkpoint: shape mismatch for " + name);
        v->val = t;
    }
    return est;
}

// ---- latents and traces ----

inline void save_latent(const std::string& path, const Latent& z, const json& extra_meta) {
    json meta = extra_meta;
    meta["kind"] = "latent";
    meta["frame_indices"] = z.frame_indices;
    save_tensors(path, {{"data", z.data}}, meta);
}

inline Latent load_latent(const std::string& path) {
    TensorFile tf = load_tensors(path);
    if (tf.meta.value("kind", "") != "latent") {
        throw DependencyError("file is not a latent: " + path);
    }
    Latent z;
    z.data = tf.get("data");
    z.frame_indices = tf.meta.at("frame_indices").get<std::vector<int64_t>>();
    z.validate();
    return z;
}

// Traces spill to one container per trace: entries are keyed
// "<step>/<tap>/<field>" and the manifest lists steps and tap ids.
inline void save_trace(const std::string& path, const FeatureTrace& trace, const json& extra_meta) {
    json meta = extra_meta;
    meta["kind"] = "feature_trace";
    std::vector<std::pair<std::string, Tensor>> tensors;
    json steps = json::array();
    json taps = json::array();
    std::vector<int> seen_steps;
    std::vector<std::string> seen_taps;
    for (const auto& [key, rec] : trace.entries) {
        std::string base = std::to_string(key.first) + "/" + key.second;
        if (rec.kind == TapKind::Conv) {
            tensors.emplace_back(base + "/conv", rec.conv);
        } else {
            tensors.emplace_back(base + "/q", rec.q);
            tensors.emplace_back(base + "/k", rec.k);
        }
        if (std::find(seen_steps.begin(), seen_steps.end(), key.first) == seen_steps.end()) {
            seen_steps.push_back(key.first);
        }
        if (std::find(seen_taps.begin(), seen_taps.end(), key.second) == seen_taps.end()) {
            seen_taps.push_back(key.second);
        }
    }
    for (int s : seen_steps) steps.push_back(s);
    for (const auto& t : seen_taps) taps.push_back(t);
    meta["steps"] = steps;
    meta["tap_ids"] = taps;
    save_tensors(path, tensors, meta);
}

inline FeatureTrace load_trace(const std::string& path) {
    TensorFile tf = load_tensors(path);
    if (tf.meta.value("kind", "") != "feature_trace") {
        throw DependencyError("file is not a feature trace: " + path);
    }
    FeatureTrace trace;
    for (const auto& [name, t] : tf.tensors) {
        auto p1 = name.find('/');
        auto p2 = name.rfind('/');
        R2V_CHECK(p1 != std::string::npos && p2 != p1, "trace: bad entry name " + name);
        int step = std::stoi(name.substr(0, p1));
        std::string tap = name.substr(p1 + 1, p2 - p1 - 1);
        std::string field = name.substr(p2 + 1);
        auto it = trace.entries.find({step, tap});
        if (it == trace.entries.end()) {
            TapRecord rec;
            rec.kind = (field == "conv") ? TapKind::Conv : TapKind::SelfAttention;
            trace.entries[{step, tap}] = rec;
            it = trace.entries.find({step, tap});
        }
        if (field == "conv") {
            it->second.conv = t;
        } else if (field == "q") {
            it->second.q = t;
        } else if (field == "k") {
            it->second.k = t;
        }
    }
    return trace;
}

inline uint64_t file_hash(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DependencyError("file_hash: cannot open " + path);
    uint64_t h = 0xcbf29ce484222325ull;
    char buf[65536];
    while (in) {
        in.read(buf, sizeof(buf));
        h = fnv1a64(buf, static_cast<size_t>(in.gcount()), h);
    }
    return h;
}

}  // namespace r2v
