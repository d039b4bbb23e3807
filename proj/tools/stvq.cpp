// Command-line surface: train / eval / infer / encode-mos / grad-check /
// make-synth / flops. Every run is deterministic given its arguments and
// --seed; no timestamps are emitted anywhere.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "stvq/flops.hpp"
#include "stvq/gradcheck.hpp"
#include "stvq/io.hpp"
#include "stvq/synth.hpp"
#include "stvq/trainer.hpp"

namespace fs = std::filesystem;
using namespace stvq;

namespace {

LossKind parse_loss(const std::string& s) {
    if (s == "cosine") return LossKind::cosine;
    if (s == "l2") return LossKind::l2;
    if (s == "ce") return LossKind::ce;
    throw ConfigError("unknown loss '" + s + "' (expected cosine|l2|ce)");
}

DecoderKind parse_decoder(const std::string& s) {
    if (s == "svr") return DecoderKind::svr;
    if (s == "expectation") return DecoderKind::expectation;
    throw ConfigError("unknown decoder '" + s + "' (expected svr|expectation)");
}

// One flat JSON object carries both the model geometry and the trainer
// hyperparameters; unknown keys are rejected to catch typos.
TrainConfig train_config_from_json(const nlohmann::json& j) {
    static const std::set<std::string> known{
        "n_frames", "crop",       "patch",        "embed_dim",    "heads",
        "blocks",   "anchors",    "lo",           "hi",           "mode",
        "clip",     "lr0",        "momentum",     "decay_every",  "decay_factor",
        "epochs",   "batch",      "seed",         "loss",         "early_stop_train_srocc",
        "svr_c",    "svr_epochs", "svr_step",     "svr_epsilon_frac"};
    for (auto& [key, value] : j.items())
        if (!known.count(key)) throw ParseError("config: unknown key '" + key + "'");

    TrainConfig cfg;
    cfg.model = config_from_json(j);
    cfg.lr0 = j.value("lr0", cfg.lr0);
    cfg.momentum = j.value("momentum", cfg.momentum);
    cfg.decay_every = j.value("decay_every", cfg.decay_every);
    cfg.decay_factor = j.value("decay_factor", cfg.decay_factor);
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.batch = j.value("batch", cfg.batch);
    cfg.seed = j.value("seed", cfg.seed);
    if (j.contains("loss")) cfg.loss = parse_loss(j["loss"].get<std::string>());
    if (j.contains("early_stop_train_srocc"))
        cfg.early_stop_train_srocc = j["early_stop_train_srocc"].get<double>();
    cfg.svr.c = j.value("svr_c", cfg.svr.c);
    cfg.svr.epochs = j.value("svr_epochs", cfg.svr.epochs);
    cfg.svr.step = j.value("svr_step", cfg.svr.step);
    cfg.svr.epsilon_frac = j.value("svr_epsilon_frac", cfg.svr.epsilon_frac);
    return cfg;
}

TrainConfig load_train_config(const std::string& path) {
    if (path.empty()) return TrainConfig{};
    std::ifstream in(path);
    if (!in.is_open()) throw InputError("cannot open config " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("config " + path + ": " + e.what());
    }
    return train_config_from_json(j);
}

void write_train_log(const std::vector<EpochLog>& log, const fs::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out.is_open()) throw InputError("cannot write log " + path.string());
    out << "epoch,lr,mean_loss,train_srocc,train_plcc\n";
    char line[160];
    for (const EpochLog& e : log) {
        std::snprintf(line, sizeof(line), "%d,%.17g,%.17g,%.17g,%.17g\n", e.epoch, e.lr,
                      e.mean_loss, e.train_srocc, e.train_plcc);
        out << line;
    }
}

void print_eval_rows(const std::vector<EvalRow>& rows, std::ostream& out) {
    out << "dataset,split,srocc,plcc,n\n";
    char line[256];
    for (const EvalRow& r : rows) {
        std::snprintf(line, sizeof(line), "%s,%s,%.6f,%.6f,%zu\n", r.dataset.c_str(),
                      r.split.c_str(), r.srocc_value, r.plcc_value, r.n);
        out << line;
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"space-time attention video quality assessment"};
    app.require_subcommand(1);

    // ---- train ----
    auto* train = app.add_subcommand("train", "train a model stage on a manifest");
    std::string t_manifest, t_config, t_mode, t_init, t_out = "model.svqc", t_loss, t_log;
    std::optional<std::uint64_t> t_seed;
    std::optional<int> t_epochs;
    bool t_verbose = false;
    train->add_option("--manifest", t_manifest, "dataset manifest (JSON)")->required();
    train->add_option("--config", t_config, "training config (JSON)");
    train->add_option("--mode", t_mode, "image|video (overrides config)");
    train->add_option("--init", t_init, "starting checkpoint (image stage transfers)");
    train->add_option("--out", t_out, "output checkpoint path");
    train->add_option("--loss", t_loss, "cosine|l2|ce (overrides config)");
    train->add_option("--log", t_log, "per-epoch CSV log path (default: <out>.log.csv)");
    train->add_option("--seed", t_seed, "seed override");
    train->add_option("--epochs", t_epochs, "epoch-count override");
    train->add_flag("--verbose", t_verbose, "per-epoch progress on stderr");

    // ---- eval ----
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a manifest (CSV)");
    std::string e_manifest, e_checkpoint, e_decoder = "svr", e_out;
    eval->add_option("--manifest", e_manifest, "dataset manifest (JSON)")->required();
    eval->add_option("--checkpoint", e_checkpoint, "model checkpoint")->required();
    eval->add_option("--decoder", e_decoder, "svr|expectation");
    eval->add_option("--out", e_out, "write CSV here instead of stdout");

    // ---- infer ----
    auto* infer = app.add_subcommand("infer", "score one video");
    std::string i_checkpoint, i_video, i_dataset, i_decoder = "svr";
    bool i_verbose = false;
    infer->add_option("--checkpoint", i_checkpoint, "model checkpoint")->required();
    infer->add_option("--video", i_video, "video container (.svqv)")->required();
    infer->add_option("--dataset", i_dataset, "dataset id for raw-scale output");
    infer->add_option("--decoder", i_decoder, "svr|expectation");
    infer->add_flag("--verbose", i_verbose, "also print crop scores and the probability vector");

    // ---- encode-mos ----
    auto* encode = app.add_subcommand("encode-mos", "print the anchor encoding of a score");
    double m_mos = 0.0, m_lo = 0.0, m_hi = 5.0;
    std::size_t m_anchors = 6;
    encode->add_option("--mos", m_mos, "scaled score to encode")->required();
    encode->add_option("--anchors", m_anchors, "anchor count");
    encode->add_option("--lo", m_lo, "scaled range lower bound");
    encode->add_option("--hi", m_hi, "scaled range upper bound");

    // ---- grad-check ----
    auto* gc = app.add_subcommand("grad-check", "finite-difference check of every gradient");
    std::uint64_t g_seed = 7;
    double g_tol = 1e-3;
    bool g_verbose = false;
    gc->add_option("--seed", g_seed, "seed for the random point");
    gc->add_option("--tol", g_tol, "relative error tolerance");
    gc->add_flag("--verbose", g_verbose, "per-tensor worst errors");

    // ---- make-synth ----
    auto* synth = app.add_subcommand("make-synth", "generate a synthetic fixture dataset");
    std::string s_out;
    SynthSpec s_spec;
    bool s_no_split = false;
    synth->add_option("--out", s_out, "output directory")->required();
    synth->add_option("--count", s_spec.count, "number of videos");
    synth->add_option("--frames", s_spec.frames, "frames per video");
    synth->add_option("--size", s_spec.size, "frame height/width");
    synth->add_option("--levels", s_spec.levels, "distinct degradation levels (0: one per video)");
    synth->add_option("--mos-min", s_spec.mos_min, "raw MOS lower bound");
    synth->add_option("--mos-max", s_spec.mos_max, "raw MOS upper bound");
    synth->add_option("--seed", s_spec.seed, "generation seed");
    synth->add_flag("--no-split", s_no_split, "skip train/test split tags");

    // ---- flops ----
    auto* flops = app.add_subcommand("flops", "analytic multiply-accumulate count per forward");
    std::string f_config;
    flops->add_option("--config", f_config, "model/training config (JSON)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        std::cerr << "run with --help for the command list\n";
        return 2;
    }

    try {
        if (*train) {
            TrainConfig cfg = load_train_config(t_config);
            if (!t_mode.empty()) {
                if (t_mode == "image")
                    cfg.model.mode = NetMode::image;
                else if (t_mode == "video")
                    cfg.model.mode = NetMode::video;
                else
                    throw ConfigError("unknown mode '" + t_mode + "' (expected image|video)");
            }
            if (!t_loss.empty()) cfg.loss = parse_loss(t_loss);
            if (t_seed) cfg.seed = *t_seed;
            if (t_epochs) cfg.epochs = *t_epochs;
            cfg.verbose = t_verbose;

            Manifest manifest = load_manifest(t_manifest);
            for (const std::string& w : manifest.warnings) std::cerr << "warning: " << w << "\n";

            std::optional<Checkpoint> init;
            if (!t_init.empty()) init = load_checkpoint(t_init);

            TrainResult res = train_model(manifest, cfg, init);
            save_checkpoint(res.checkpoint, t_out);
            write_train_log(res.log, t_log.empty() ? fs::path(t_out + ".log.csv") : fs::path(t_log));
            std::cerr << "trained " << res.log.size() << " epochs; final train srocc "
                      << (res.log.empty() ? 0.0 : res.log.back().train_srocc) << "; wrote " << t_out
                      << "\n";
        } else if (*eval) {
            Manifest manifest = load_manifest(e_manifest);
            for (const std::string& w : manifest.warnings) std::cerr << "warning: " << w << "\n";
            Checkpoint ck = load_checkpoint(e_checkpoint);
            auto rows = evaluate_manifest(ck, manifest, parse_decoder(e_decoder));
            if (e_out.empty()) {
                print_eval_rows(rows, std::cout);
            } else {
                std::ofstream out(e_out, std::ios::trunc);
                if (!out.is_open()) throw InputError("cannot write " + e_out);
                print_eval_rows(rows, out);
            }
        } else if (*infer) {
            Checkpoint ck = load_checkpoint(i_checkpoint);
            RawVideo video = read_container(i_video);
            std::optional<std::string> dataset;
            if (!i_dataset.empty()) dataset = i_dataset;
            InferResult res = infer_video(ck, video, dataset, parse_decoder(i_decoder));
            std::printf("%.6f\n", res.score_raw ? *res.score_raw : res.score_scaled);
            if (i_verbose) {
                std::printf("scaled,%.6f\n", res.score_scaled);
                std::printf("crops,%.6f,%.6f,%.6f\n", res.crop_scores[0], res.crop_scores[1],
                            res.crop_scores[2]);
                std::printf("probability");
                for (double p : res.probability) std::printf(",%.6f", p);
                std::printf("\n");
            }
        } else if (*encode) {
            AnchorCodec codec = AnchorCodec::make(m_anchors, m_lo, m_hi);
            std::vector<double> y = codec.encode(m_mos);
            for (std::size_t i = 0; i < y.size(); ++i)
                std::printf("%s%.6f", i ? "," : "", y[i]);
            std::printf("\n");
        } else if (*gc) {
            GradCheckReport report = run_network_grad_check(g_seed, g_tol);
            if (g_verbose)
                for (const auto& [name, err] : report.per_tensor)
                    std::printf("%-24s %.3e\n", name.c_str(), err);
            std::printf("checked %zu tensors (%zu elements); max rel err %.3e (%s); tol %.1e: %s\n",
                        report.tensors, report.elements, report.max_rel_err,
                        report.worst_tensor.c_str(), g_tol, report.passed ? "PASS" : "FAIL");
            return report.passed ? 0 : 1;
        } else if (*synth) {
            Manifest m = make_synthetic_dataset(s_out, s_spec);
            if (!s_no_split && m.items.size() >= 5) {
                SplitIndices s = split_dataset(m, s_spec.seed);
                for (std::size_t i : s.train) m.items[i].split = Split::train;
                for (std::size_t i : s.test) m.items[i].split = Split::test;
            }
            save_manifest(m, fs::path(s_out) / "manifest.json");
            std::cerr << "wrote " << m.items.size() << " videos and manifest.json to " << s_out
                      << "\n";
        } else if (*flops) {
            ModelConfig cfg = load_train_config(f_config).model;
            FlopsBreakdown f = estimate_flops_breakdown(cfg);
            std::printf("embed,%llu\n", f.embed);
            std::printf("time_per_block,%llu\n", f.time_per_block);
            std::printf("space_per_block,%llu\n", f.space_per_block);
            std::printf("mlp_per_block,%llu\n", f.mlp_per_block);
            std::printf("head,%llu\n", f.head);
            std::printf("total_macs,%llu\n", f.total());
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
