#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "stvq/io.hpp"
#include "stvq/rng.hpp"
#include "stvq/synth.hpp"

using namespace stvq;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    fs::path dir = fs::temp_directory_path() / ("stvq_test_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void dump(const fs::path& p, const std::string& data) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
}

RawVideo small_video(std::uint64_t seed, std::size_t t = 3, std::size_t h = 6, std::size_t w = 8) {
    RawVideo v{t, h, w, std::vector<std::uint8_t>(t * h * w * 3)};
    Rng rng(seed);
    for (auto& px : v.pixels) px = static_cast<std::uint8_t>(rng.uniform_index(256));
    return v;
}

ModelConfig small_config() {
    ModelConfig cfg;
    cfg.n_frames = 2;
    cfg.crop = 4;
    cfg.patch = 2;
    cfg.embed_dim = 12;
    cfg.heads = 2;
    cfg.blocks = 1;
    cfg.anchors = 6;
    cfg.mode = NetMode::video;
    return cfg;
}

} // namespace

TEST_CASE("video container") {
    const fs::path dir = temp_dir("container");

    SECTION("write/read round trip is byte-identical") {
        RawVideo v = small_video(1);
        write_container(v, dir / "a.svqv");
        RawVideo back = read_container(dir / "a.svqv");
        CHECK(back.frames == v.frames);
        CHECK(back.height == v.height);
        CHECK(back.width == v.width);
        CHECK(back.pixels == v.pixels);

        write_container(back, dir / "b.svqv");
        CHECK(slurp(dir / "a.svqv") == slurp(dir / "b.svqv"));
    }

    SECTION("1x2x2 video is a 17-byte header plus 12 payload bytes") {
        RawVideo v{1, 2, 2, std::vector<std::uint8_t>(12, 7)};
        write_container(v, dir / "tiny.svqv");
        CHECK(fs::file_size(dir / "tiny.svqv") == 17 + 12);
    }

    SECTION("corruption cases raise distinct format errors") {
        RawVideo v = small_video(2);
        write_container(v, dir / "c.svqv");
        std::string data = slurp(dir / "c.svqv");

        dump(dir / "trunc.svqv", data.substr(0, data.size() - 1));
        CHECK_THROWS_MATCHES(read_container(dir / "trunc.svqv"), FormatError,
                             Catch::Matchers::MessageMatches(
                                 Catch::Matchers::ContainsSubstring("truncated payload")));

        std::string bad_magic = data;
        bad_magic[0] = 'X';
        dump(dir / "magic.svqv", bad_magic);
        CHECK_THROWS_MATCHES(read_container(dir / "magic.svqv"), FormatError,
                             Catch::Matchers::MessageMatches(
                                 Catch::Matchers::ContainsSubstring("bad magic")));

        std::string bad_version = data;
        bad_version[4] = 2;
        dump(dir / "ver.svqv", bad_version);
        CHECK_THROWS_MATCHES(read_container(dir / "ver.svqv"), FormatError,
                             Catch::Matchers::MessageMatches(
                                 Catch::Matchers::ContainsSubstring("version mismatch")));

        dump(dir / "extra.svqv", data + "zz");
        CHECK_THROWS_AS(read_container(dir / "extra.svqv"), FormatError);

        dump(dir / "short.svqv", data.substr(0, 10));
        CHECK_THROWS_MATCHES(read_container(dir / "short.svqv"), FormatError,
                             Catch::Matchers::MessageMatches(
                                 Catch::Matchers::ContainsSubstring("truncated header")));

        CHECK_THROWS_AS(read_container(dir / "missing.svqv"), InputError);
    }
}

TEST_CASE("manifest") {
    const fs::path dir = temp_dir("manifest");

    SECTION("minimal manifest parses and resolves paths") {
        dump(dir / "m.json", R"({
          "datasets": {"synth": {"mos_min": 1.0, "mos_max": 5.0}},
          "items": [{"path": "v.svqv", "mos": 3.0, "dataset": "synth"}]
        })");
        Manifest m = load_manifest(dir / "m.json");
        REQUIRE(m.items.size() == 1);
        CHECK(m.items[0].mos == 3.0);
        CHECK(m.resolve(m.items[0]) == dir / "v.svqv");
        CHECK(m.warnings.empty());
        CHECK(!m.items[0].split.has_value());
    }

    SECTION("undeclared dataset is named in the error") {
        dump(dir / "bad.json", R"({
          "datasets": {"synth": {"mos_min": 1.0, "mos_max": 5.0}},
          "items": [{"path": "v.svqv", "mos": 3.0, "dataset": "other"}]
        })");
        CHECK_THROWS_MATCHES(load_manifest(dir / "bad.json"), ParseError,
                             Catch::Matchers::MessageMatches(
                                 Catch::Matchers::ContainsSubstring("other")));
    }

    SECTION("out-of-range mos clamps with a warning") {
        dump(dir / "clamp.json", R"({
          "datasets": {"synth": {"mos_min": 1.0, "mos_max": 5.0}},
          "items": [{"path": "v.svqv", "mos": 9.5, "dataset": "synth"}]
        })");
        Manifest m = load_manifest(dir / "clamp.json");
        CHECK(m.items[0].mos == 5.0);
        REQUIRE(m.warnings.size() == 1);
        CHECK(m.warnings[0].find("clamped") != std::string::npos);
    }

    SECTION("unparseable document raises ParseError with context") {
        dump(dir / "broken.json", "{ not json");
        CHECK_THROWS_AS(load_manifest(dir / "broken.json"), ParseError);
        dump(dir / "badnum.json", R"({
          "datasets": {"synth": {"mos_min": 1.0, "mos_max": "high"}},
          "items": []
        })");
        CHECK_THROWS_AS(load_manifest(dir / "badnum.json"), ParseError);
    }

    SECTION("save/load round trip preserves items and splits") {
        Manifest m;
        m.base_dir = dir;
        m.datasets["a"] = {0.0, 10.0};
        m.datasets["b"] = {1.22, 4.64};
        m.items.push_back({"x.svqv", 3.25, "a", Split::train});
        m.items.push_back({"y.svqv", 4.5, "b", Split::test});
        save_manifest(m, dir / "rt.json");
        Manifest back = load_manifest(dir / "rt.json");
        REQUIRE(back.items.size() == 2);
        CHECK(back.items[0].mos == 3.25);
        CHECK(back.items[1].split == Split::test);
        CHECK(back.datasets["b"].mos_min == 1.22);

        save_manifest(back, dir / "rt2.json");
        CHECK(slurp(dir / "rt.json") == slurp(dir / "rt2.json"));
    }
}

TEST_CASE("checkpoint") {
    const fs::path dir = temp_dir("checkpoint");
    ModelConfig cfg = small_config();

    Checkpoint ck;
    ck.stage = "video";
    ck.weights = init_model_weights(cfg, 5);
    for (const Tensor& p : param_list(ck.weights)) {
        Tensor v(p.shape());
        Rng r(p.size());
        for (std::size_t i = 0; i < v.size(); ++i) v.data()[i] = r.uniform(-1, 1);
        ck.velocity.push_back(v);
    }
    ck.datasets["synth"] = {1.0, 5.0};
    {
        auto codec = AnchorCodec::make(cfg.anchors, cfg.lo, cfg.hi);
        std::vector<std::vector<double>> ys;
        std::vector<double> cs;
        for (double c = 0.0; c <= 5.0; c += 0.25) {
            ys.push_back(codec.encode(c));
            cs.push_back(c);
        }
        ck.decoder = SvrDecoder::fit(ys, cs, codec);
    }

    SECTION("save -> load -> save produces byte-identical files") {
        save_checkpoint(ck, dir / "a.svqc");
        Checkpoint back = load_checkpoint(dir / "a.svqc");
        save_checkpoint(back, dir / "b.svqc");
        CHECK(slurp(dir / "a.svqc") == slurp(dir / "b.svqc"));

        auto pa = named_params(ck.weights);
        auto pb = named_params(back.weights);
        REQUIRE(pa.size() == pb.size());
        for (std::size_t i = 0; i < pa.size(); ++i) {
            CHECK(pa[i].first == pb[i].first);
            CHECK(pa[i].second.vec() == pb[i].second.vec());
        }
        REQUIRE(back.velocity.size() == ck.velocity.size());
        for (std::size_t i = 0; i < ck.velocity.size(); ++i)
            CHECK(back.velocity[i].vec() == ck.velocity[i].vec());
        REQUIRE(back.decoder.has_value());
        CHECK(back.decoder->weights() == ck.decoder->weights());
        CHECK(back.decoder->bias() == ck.decoder->bias());
        CHECK(back.datasets.at("synth").mos_max == 5.0);
    }

    SECTION("editing one header shape yields an error naming the tensor") {
        save_checkpoint(ck, dir / "c.svqc");
        std::string data = slurp(dir / "c.svqc");
        const std::string needle = R"({"bytes":1152,"name":"embed.patch_proj","offset":0,"shape":[12,12]})";
        const auto pos = data.find(needle);
        REQUIRE(pos != std::string::npos);
        std::string edited = data;
        edited.replace(pos, needle.size(),
                       R"({"bytes":1152,"name":"embed.patch_proj","offset":0,"shape":[12,11]})");
        // keep the header length honest: same byte count, same offset table
        dump(dir / "c_bad.svqc", edited);
        CHECK_THROWS_MATCHES(load_checkpoint(dir / "c_bad.svqc"), FormatError,
                             Catch::Matchers::MessageMatches(
                                 Catch::Matchers::ContainsSubstring("embed.patch_proj")));
    }

    SECTION("index/body mismatch and header corruption raise format errors") {
        save_checkpoint(ck, dir / "d.svqc");
        std::string data = slurp(dir / "d.svqc");
        dump(dir / "d_trunc.svqc", data.substr(0, data.size() - 8));
        CHECK_THROWS_MATCHES(load_checkpoint(dir / "d_trunc.svqc"), FormatError,
                             Catch::Matchers::MessageMatches(
                                 Catch::Matchers::ContainsSubstring("index/body mismatch")));

        std::string bad_magic = data;
        bad_magic[0] = 'Z';
        dump(dir / "d_magic.svqc", bad_magic);
        CHECK_THROWS_MATCHES(load_checkpoint(dir / "d_magic.svqc"), FormatError,
                             Catch::Matchers::MessageMatches(
                                 Catch::Matchers::ContainsSubstring("bad magic")));
    }

    SECTION("image-stage checkpoints refuse direct use as a video model") {
        ModelConfig icfg = small_config();
        icfg.mode = NetMode::image;
        icfg.n_frames = 1;
        Checkpoint ick;
        ick.stage = "image";
        ick.weights = init_model_weights(icfg, 6);
        save_checkpoint(ick, dir / "img.svqc");
        Checkpoint back = load_checkpoint(dir / "img.svqc");
        CHECK(back.stage == "image");
        CHECK_THROWS_AS(require_video_checkpoint(back), StateError);
    }

    SECTION("image checkpoints contain no time-attention or temporal tensors") {
        ModelConfig icfg = small_config();
        icfg.mode = NetMode::image;
        icfg.n_frames = 1;
        Checkpoint ick;
        ick.stage = "image";
        ick.weights = init_model_weights(icfg, 6);
        save_checkpoint(ick, dir / "img2.svqc");
        const std::string data = slurp(dir / "img2.svqc");
        CHECK(data.find(".time.") == std::string::npos);
        CHECK(data.find("pos_temporal") == std::string::npos);
    }

    SECTION("stage/config consistency is validated") {
        save_checkpoint(ck, dir / "e.svqc");
        std::string data = slurp(dir / "e.svqc");
        const std::string from = "\"stage\":\"video\"";
        const std::string to = "\"stage\":\"image\"";
        const auto pos = data.find(from);
        REQUIRE(pos != std::string::npos);
        data.replace(pos, from.size(), to);
        dump(dir / "e_bad.svqc", data);
        CHECK_THROWS_AS(load_checkpoint(dir / "e_bad.svqc"), FormatError);
    }
}

TEST_CASE("synthetic dataset generation") {
    const fs::path dir = temp_dir("synth");
    SynthSpec spec;
    spec.count = 8;
    spec.frames = 4;
    spec.size = 32;
    spec.seed = 11;

    SECTION("requested count of containers plus manifest rows") {
        Manifest m = make_synthetic_dataset(dir / "a", spec);
        CHECK(m.items.size() == 8);
        std::size_t files = 0;
        for (auto& e : fs::directory_iterator(dir / "a"))
            if (e.path().extension() == ".svqv") ++files;
        CHECK(files == 8);
        for (const auto& item : m.items) CHECK(fs::exists(m.resolve(item)));
    }

    SECTION("assigned MOS strictly decreases with the noise level") {
        Manifest m = make_synthetic_dataset(dir / "b", spec);
        for (std::size_t i = 1; i < m.items.size(); ++i)
            CHECK(m.items[i].mos < m.items[i - 1].mos);
    }

    SECTION("same seed regenerates byte-identical files") {
        Manifest m1 = make_synthetic_dataset(dir / "c1", spec);
        Manifest m2 = make_synthetic_dataset(dir / "c2", spec);
        for (std::size_t i = 0; i < m1.items.size(); ++i)
            CHECK(slurp(m1.resolve(m1.items[i])) == slurp(m2.resolve(m2.items[i])));
        SynthSpec other = spec;
        other.seed = 12;
        Manifest m3 = make_synthetic_dataset(dir / "c3", other);
        CHECK(slurp(m1.resolve(m1.items[0])) != slurp(m3.resolve(m3.items[0])));
    }

    SECTION("videos decode through the container layer") {
        Manifest m = make_synthetic_dataset(dir / "d", spec);
        RawVideo v = read_container(m.resolve(m.items[3]));
        CHECK(v.frames == 4);
        CHECK(v.height == 32);
        CHECK(v.width == 32);
    }
}
