#pragma once

// Bit-exact file formats. All multi-byte binary fields are little-endian with
// fixed widths, so files written on one machine load on any other.
//
// Video container (.svqv):
//   magic "SVQV" (4 bytes) | version u8 = 1 | frame_count u32 | height u32 |
//   width u32 | payload: frame_count * height * width * 3 bytes, RGB
//   interleaved, row-major, frames consecutive. Header is 17 bytes.
//
// Checkpoint (.svqc):
//   magic "SVQC" (4 bytes) | header_len u32 | header (JSON, header_len bytes) |
//   body: concatenated 64-bit little-endian float blobs in index order.
//   The header carries the config snapshot, stage tag, dataset MOS ranges,
//   decoder parameters and the named-tensor index (shape + byte offset +
//   byte length per tensor).
//
// Manifest: a JSON document mapping dataset names to raw MOS ranges plus an
// item list; paths resolve relative to the manifest's directory.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "stvq/anchors.hpp"
#include "stvq/errors.hpp"
#include "stvq/model.hpp"
#include "stvq/tokenizer.hpp"

namespace stvq {

namespace detail {

inline void put_u32le(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline std::uint32_t get_u32le(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline void append_f64le(std::string& out, const double* src, std::size_t n) {
    static_assert(sizeof(double) == 8);
    const std::size_t base = out.size();
    out.resize(base + n * 8);
    std::memcpy(out.data() + base, src, n * 8);
    if constexpr (std::endian::native == std::endian::big) {
        for (std::size_t i = 0; i < n; ++i) {
            char* b = out.data() + base + i * 8;
            std::swap(b[0], b[7]);
            std::swap(b[1], b[6]);
            std::swap(b[2], b[5]);
            std::swap(b[3], b[4]);
        }
    }
}

inline void read_f64le(const unsigned char* src, double* dst, std::size_t n) {
    std::memcpy(dst, src, n * 8);
    if constexpr (std::endian::native == std::endian::big) {
        for (std::size_t i = 0; i < n; ++i) {
            char* b = reinterpret_cast<char*>(dst) + i * 8;
            std::swap(b[0], b[7]);
            std::swap(b[1], b[6]);
            std::swap(b[2], b[5]);
            std::swap(b[3], b[4]);
        }
    }
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in.is_open()) throw InputError("cannot open " + path.string());
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return data;
}

inline void write_file(const std::filesystem::path& path, const std::string& data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out.is_open()) throw InputError("cannot write " + path.string());
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out.good()) throw InputError("write failed for " + path.string());
}

} // namespace detail

// ---------------------------------------------------------------------------
// Video container
// ---------------------------------------------------------------------------

inline void write_container(const RawVideo& v, const std::filesystem::path& path) {
    if (v.frames == 0) throw InputError("container: empty video");
    if (v.pixels.size() != v.frames * v.height * v.width * 3)
        throw ContractError("container: payload size does not match dimensions");
    std::string out;
    out.reserve(17 + v.pixels.size());
    out += "SVQV";
    out.push_back(static_cast<char>(1)); // version
    detail::put_u32le(out, static_cast<std::uint32_t>(v.frames));
    detail::put_u32le(out, static_cast<std::uint32_t>(v.height));
    detail::put_u32le(out, static_cast<std::uint32_t>(v.width));
    out.append(reinterpret_cast<const char*>(v.pixels.data()), v.pixels.size());
    detail::write_file(path, out);
}

inline RawVideo read_container(const std::filesystem::path& path) {
    const std::string data = detail::read_file(path);
    if (data.size() < 17) throw FormatError("container: truncated header in " + path.string());
    if (data.compare(0, 4, "SVQV") != 0)
        throw FormatError("container: bad magic in " + path.string());
    const auto* p = reinterpret_cast<const unsigned char*>(data.data());
    if (p[4] != 1)
        throw FormatError("container: version mismatch (got " + std::to_string(p[4]) +
                          ", expected 1) in " + path.string());
    RawVideo v;
    v.frames = detail::get_u32le(p + 5);
    v.height = detail::get_u32le(p + 9);
    v.width = detail::get_u32le(p + 13);
    if (v.frames == 0) throw FormatError("container: zero frame count in " + path.string());
    const std::size_t expect = v.frames * v.height * v.width * 3;
    const std::size_t got = data.size() - 17;
    if (got < expect) throw FormatError("container: truncated payload in " + path.string());
    if (got > expect) throw FormatError("container: trailing bytes after payload in " + path.string());
    v.pixels.assign(p + 17, p + 17 + expect);
    return v;
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

enum class Split { train, test };

struct DatasetRange {
    double mos_min = 0.0;
    double mos_max = 0.0;
};

struct ManifestItem {
    std::string path;
    double mos = 0.0;
    std::string dataset;
    std::optional<Split> split;
};

struct Manifest {
    std::map<std::string, DatasetRange> datasets;
    std::vector<ManifestItem> items;
    std::vector<std::string> warnings; // clamp notices surfaced at load
    std::filesystem::path base_dir;

    std::filesystem::path resolve(const ManifestItem& item) const {
        std::filesystem::path p(item.path);
        return p.is_absolute() ? p : base_dir / p;
    }

    const DatasetRange& range_of(const std::string& dataset) const {
        auto it = datasets.find(dataset);
        if (it == datasets.end()) throw ConfigError("manifest: unknown dataset '" + dataset + "'");
        return it->second;
    }
};

inline Manifest load_manifest(const std::filesystem::path& path) {
    const std::string text = detail::read_file(path);
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("manifest " + path.string() + ": " + e.what());
    }
    Manifest m;
    m.base_dir = path.parent_path();
    try {
        if (!doc.contains("datasets") || !doc["datasets"].is_object())
            throw ParseError("manifest " + path.string() + ": missing 'datasets' object");
        for (auto& [name, r] : doc["datasets"].items()) {
            DatasetRange range{r.at("mos_min").get<double>(), r.at("mos_max").get<double>()};
            if (!(range.mos_max > range.mos_min))
                throw ParseError("manifest: dataset '" + name + "' has a degenerate MOS range");
            m.datasets[name] = range;
        }
        for (auto& it : doc.value("items", nlohmann::json::array())) {
            ManifestItem item;
            item.path = it.at("path").get<std::string>();
            item.mos = it.at("mos").get<double>();
            item.dataset = it.at("dataset").get<std::string>();
            if (it.contains("split")) {
                const std::string s = it["split"].get<std::string>();
                if (s == "train")
                    item.split = Split::train;
                else if (s == "test")
                    item.split = Split::test;
                else
                    throw ParseError("manifest: item '" + item.path + "' has unknown split '" + s + "'");
            }
            auto ds = m.datasets.find(item.dataset);
            if (ds == m.datasets.end())
                throw ParseError("manifest: item '" + item.path + "' references undeclared dataset '" +
                                 item.dataset + "'");
            if (item.mos < ds->second.mos_min || item.mos > ds->second.mos_max) {
                const double clamped =
                    std::min(ds->second.mos_max, std::max(ds->second.mos_min, item.mos));
                m.warnings.push_back("item '" + item.path + "': mos " + std::to_string(item.mos) +
                                     " outside [" + std::to_string(ds->second.mos_min) + ", " +
                                     std::to_string(ds->second.mos_max) + "], clamped to " +
                                     std::to_string(clamped));
                item.mos = clamped;
            }
            m.items.push_back(std::move(item));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("manifest " + path.string() + ": " + e.what());
    }
    return m;
}

inline void save_manifest(const Manifest& m, const std::filesystem::path& path) {
    nlohmann::json doc;
    doc["datasets"] = nlohmann::json::object();
    for (const auto& [name, r] : m.datasets)
        doc["datasets"][name] = {{"mos_min", r.mos_min}, {"mos_max", r.mos_max}};
    doc["items"] = nlohmann::json::array();
    for (const auto& item : m.items) {
        nlohmann::json j{{"path", item.path}, {"mos", item.mos}, {"dataset", item.dataset}};
        if (item.split) j["split"] = *item.split == Split::train ? "train" : "test";
        doc["items"].push_back(std::move(j));
    }
    detail::write_file(path, doc.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Config serialization (shared by checkpoints and the CLI config file)
// ---------------------------------------------------------------------------

inline nlohmann::json config_to_json(const ModelConfig& cfg) {
    return {{"n_frames", cfg.n_frames},
            {"crop", cfg.crop},
            {"patch", cfg.patch},
            {"embed_dim", cfg.embed_dim},
            {"heads", cfg.heads},
            {"blocks", cfg.blocks},
            {"anchors", cfg.anchors},
            {"lo", cfg.lo},
            {"hi", cfg.hi},
            {"mode", cfg.mode == NetMode::image ? "image" : "video"},
            {"clip", cfg.clip == ClipMode::equal_interval ? "equal_interval" : "middle_window"}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.n_frames = j.value("n_frames", cfg.n_frames);
    cfg.crop = j.value("crop", cfg.crop);
    cfg.patch = j.value("patch", cfg.patch);
    cfg.embed_dim = j.value("embed_dim", cfg.embed_dim);
    cfg.heads = j.value("heads", cfg.heads);
    cfg.blocks = j.value("blocks", cfg.blocks);
    cfg.anchors = j.value("anchors", cfg.anchors);
    cfg.lo = j.value("lo", cfg.lo);
    cfg.hi = j.value("hi", cfg.hi);
    if (j.contains("mode")) {
        const std::string m = j["mode"].get<std::string>();
        if (m == "image")
            cfg.mode = NetMode::image;
        else if (m == "video")
            cfg.mode = NetMode::video;
        else
            throw ParseError("config: unknown mode '" + m + "'");
    }
    if (j.contains("clip")) {
        const std::string c = j["clip"].get<std::string>();
        if (c == "equal_interval")
            cfg.clip = ClipMode::equal_interval;
        else if (c == "middle_window")
            cfg.clip = ClipMode::middle_window;
        else
            throw ParseError("config: unknown clip mode '" + c + "'");
    }
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------

struct Checkpoint {
    std::string stage; // "image" | "video"
    ModelWeights weights;
    std::vector<Tensor> velocity; // parallel to named_params order; may be empty
    std::optional<SvrDecoder> decoder;
    std::map<std::string, DatasetRange> datasets; // raw MOS ranges seen in training
};

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
    const auto params = named_params(ck.weights);
    if (!ck.velocity.empty() && ck.velocity.size() != params.size())
        throw ContractError("checkpoint: velocity list does not match parameter list");

    nlohmann::json header;
    header["format_version"] = 1;
    header["stage"] = ck.stage;
    header["config"] = config_to_json(ck.weights.cfg);
    header["datasets"] = nlohmann::json::object();
    for (const auto& [name, r] : ck.datasets)
        header["datasets"][name] = {{"mos_min", r.mos_min}, {"mos_max", r.mos_max}};
    if (ck.decoder && ck.decoder->fitted()) {
        header["decoder"] = {{"w", ck.decoder->weights()},
                             {"b", ck.decoder->bias()},
                             {"epsilon", ck.decoder->epsilon()},
                             {"lo", ck.decoder->lo()},
                             {"hi", ck.decoder->hi()}};
    } else {
        header["decoder"] = nullptr;
    }

    nlohmann::json index = nlohmann::json::array();
    std::size_t offset = 0;
    auto add_entry = [&](const std::string& name, const Tensor& t) {
        index.push_back({{"name", name},
                         {"shape", t.shape()},
                         {"offset", offset},
                         {"bytes", t.size() * 8}});
        offset += t.size() * 8;
    };
    for (const auto& [name, t] : params) add_entry(name, t);
    if (!ck.velocity.empty())
        for (std::size_t i = 0; i < params.size(); ++i)
            add_entry("velocity." + params[i].first, ck.velocity[i]);
    header["tensors"] = std::move(index);

    const std::string htext = header.dump();
    std::string out;
    out += "SVQC";
    detail::put_u32le(out, static_cast<std::uint32_t>(htext.size()));
    out += htext;
    for (const auto& [name, t] : params) detail::append_f64le(out, t.data(), t.size());
    if (!ck.velocity.empty())
        for (const Tensor& v : ck.velocity) detail::append_f64le(out, v.data(), v.size());
    detail::write_file(path, out);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const std::string data = detail::read_file(path);
    if (data.size() < 8) throw FormatError("checkpoint: truncated header in " + path.string());
    if (data.compare(0, 4, "SVQC") != 0)
        throw FormatError("checkpoint: bad magic in " + path.string());
    const auto* p = reinterpret_cast<const unsigned char*>(data.data());
    const std::size_t hlen = detail::get_u32le(p + 4);
    if (8 + hlen > data.size()) throw FormatError("checkpoint: truncated header in " + path.string());

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(data.substr(8, hlen));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("checkpoint: unparseable header in " + path.string() + ": " + e.what());
    }

    Checkpoint ck;
    try {
        if (header.at("format_version").get<int>() != 1)
            throw FormatError("checkpoint: version mismatch in " + path.string());
        ck.stage = header.at("stage").get<std::string>();
        ck.weights = make_model_weights(config_from_json(header.at("config")));
        for (auto& [name, r] : header.at("datasets").items())
            ck.datasets[name] = {r.at("mos_min").get<double>(), r.at("mos_max").get<double>()};
        if (!header.at("decoder").is_null()) {
            const auto& d = header["decoder"];
            ck.decoder = SvrDecoder::from_parts(d.at("w").get<std::vector<double>>(),
                                                d.at("b").get<double>(), d.at("epsilon").get<double>(),
                                                d.at("lo").get<double>(), d.at("hi").get<double>());
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("checkpoint: malformed header in " + path.string() + ": " + e.what());
    }

    const std::size_t body_off = 8 + hlen;
    const std::size_t body_len = data.size() - body_off;

    // index lookup, then fill weights (and velocities) in enumeration order
    struct Entry {
        std::vector<std::size_t> shape;
        std::size_t offset = 0;
        std::size_t bytes = 0;
    };
    std::map<std::string, Entry> index;
    std::size_t total_bytes = 0;
    try {
        for (const auto& e : header.at("tensors")) {
            Entry ent{e.at("shape").get<std::vector<std::size_t>>(), e.at("offset").get<std::size_t>(),
                      e.at("bytes").get<std::size_t>()};
            total_bytes += ent.bytes;
            index[e.at("name").get<std::string>()] = std::move(ent);
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("checkpoint: malformed tensor index in " + path.string() + ": " + e.what());
    }
    if (total_bytes != body_len)
        throw FormatError("checkpoint: index/body mismatch in " + path.string() + " (index " +
                          std::to_string(total_bytes) + " bytes, body " + std::to_string(body_len) + ")");

    auto fill = [&](const std::string& name, Tensor& t) {
        auto it = index.find(name);
        if (it == index.end())
            throw FormatError("checkpoint: missing tensor '" + name + "' in " + path.string());
        const Entry& e = it->second;
        if (e.shape != t.shape())
            throw FormatError("checkpoint: tensor '" + name + "' has shape " +
                              detail::shape_str(e.shape) + ", expected " + detail::shape_str(t.shape()));
        if (e.bytes != t.size() * 8)
            throw FormatError("checkpoint: tensor '" + name + "' has inconsistent byte length");
        if (e.offset + e.bytes > body_len)
            throw FormatError("checkpoint: tensor '" + name + "' extends past the body");
        detail::read_f64le(p + body_off + e.offset, t.data(), t.size());
    };

    auto params = named_params(ck.weights);
    for (auto& [name, t] : params) fill(name, t);
    if (index.count("velocity." + params[0].first)) {
        for (auto& [name, t] : params) {
            Tensor v(t.shape());
            fill("velocity." + name, v);
            ck.velocity.push_back(v);
        }
    }

    // stage/config consistency
    const bool has_time = ck.weights.cfg.mode == NetMode::video;
    if (ck.stage == "image" && has_time)
        throw FormatError("checkpoint: image stage with video-mode config in " + path.string());
    if (ck.stage == "video" && !has_time)
        throw FormatError("checkpoint: video stage with image-mode config in " + path.string());
    if (ck.stage != "image" && ck.stage != "video")
        throw FormatError("checkpoint: unknown stage '" + ck.stage + "' in " + path.string());
    return ck;
}

// Guard for uses that need the full space-time model: an image-stage
// checkpoint must pass through the stage-transfer step first.
inline const Checkpoint& require_video_checkpoint(const Checkpoint& ck) {
    if (ck.stage != "video")
        throw StateError("checkpoint: stage '" + ck.stage +
                         "' cannot be used as a video model; transfer its weights first");
    return ck;
}

} // namespace stvq
