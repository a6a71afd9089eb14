#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <json.hpp>

#include "cli.hpp"
#include "config.hpp"
#include "evax/interpret.hpp"
#include "evax/mim.hpp"
#include "evax/parallel.hpp"
#include "evax/transfer.hpp"

namespace evax::cli {

namespace fs = std::filesystem;
using nlohmann::json;

const char *tool_version() { return EVAX_VERSION; }

namespace {

struct Common {
    std::string config;
    std::string out;
    std::vector<std::string> sets;
    int threads = 1;
    bool dry_run = false;
    // Named flags, in the order they override the config: {key, value}.
    std::vector<std::pair<std::string, std::string *>> flags;
    std::string seed, preset, data_fraction, mask_ratio, crop_scale_min, tokenizer_ckpt, ckpt, manifest, task, count;
};

void add_common(CLI::App *cmd, Common &c) {
    cmd->add_option("--config", c.config, "config file (key = value lines or JSON)");
    cmd->add_option("--out", c.out, "output directory");
    cmd->add_option("--set", c.sets, "override one key: KEY=VALUE")->take_all();
    cmd->add_option("--threads", c.threads, "worker threads")->check(CLI::PositiveNumber);
    cmd->add_flag("--dry-run", c.dry_run, "write the run directory and resolved config, then stop");
    const std::pair<const char *, std::string *> named[] = {
        {"seed", &c.seed},
        {"preset", &c.preset},
        {"data_fraction", &c.data_fraction},
        {"mask_ratio", &c.mask_ratio},
        {"crop_scale_min", &c.crop_scale_min},
        {"tokenizer_ckpt", &c.tokenizer_ckpt},
        {"ckpt", &c.ckpt},
        {"manifest", &c.manifest},
        {"task", &c.task},
        {"count", &c.count},
    };
    for (const auto &[key, field] : named) {
        std::string flag = std::string("--") + key;
        std::replace(flag.begin(), flag.end(), '_', '-');
        cmd->add_option(flag, *field);
        c.flags.emplace_back(key, field);
    }
}

RawConfig gather(const Common &c, const CLI::App *cmd) {
    RawConfig raw;
    if (!c.config.empty()) raw.append(parse_config_file(c.config));
    for (const auto &s : c.sets) {
        auto [k, v] = parse_assignment(s);
        raw.set(k, v);
    }
    for (const auto &[key, field] : c.flags) {
        std::string flag = "--" + key;
        std::replace(flag.begin(), flag.end(), '_', '-');
        if (cmd->count(flag) > 0) raw.set(key, *field);
    }
    return raw;
}

fs::path require_out(const Common &c) {
    if (c.out.empty()) throw UsageError("--out DIR is required");
    return c.out;
}

void write_text(const fs::path &path, const std::string &text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path.string());
    f << text;
}

void prepare_run_dir(const fs::path &dir, const Schema &schema) {
    std::error_code ec;
    for (const char *sub : {"checkpoints", "reports", "figures"}) fs::create_directories(dir / sub, ec);
    if (ec) throw DataError(dir.string() + ": cannot create run directory: " + ec.message());
    write_text(dir / "config.resolved", std::string("# tool_version = ") + tool_version() + "\n" + schema.resolved());
}

Split parse_split_key(const std::string &s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw ConfigError("split", "split must be train, val or test, got '" + s + "'");
}

void check_preset(const std::string &preset) { vit_preset(preset); }

json eval_json(const ClsEval &e) {
    json j;
    j["accuracy"] = e.accuracy;
    j["mauc"] = e.mauc ? json(*e.mauc) : json(nullptr);
    for (const auto &[k, v] : e.extra) j[k] = v;
    return j;
}

std::vector<MetricRow> eval_rows(const ClsEval &e, const std::string &split) {
    std::vector<MetricRow> rows;
    if (e.mauc) rows.push_back({0, split, "mauc", *e.mauc});
    rows.push_back({0, split, "accuracy", e.accuracy});
    for (const auto &[k, v] : e.extra) rows.push_back({0, split, k, v});
    return rows;
}

// -- commands ---------------------------------------------------------------

void cmd_synth(const RawConfig &raw, const Common &c, std::ostream &out) {
    SynthSpec spec;
    std::string task = "cls";
    std::uint64_t seed = 0;
    Schema s;
    s.add("task", &task);
    s.add("count", &spec.count);
    s.add("image_size", &spec.image_size);
    s.add("seed", &seed);
    s.add("train_fraction", &spec.train_fraction);
    s.add("val_fraction", &spec.val_fraction);
    s.add("positive_fraction", &spec.positive_fraction);
    s.add("noise", &spec.noise);
    s.add("lesion_min", &spec.lesion_min);
    s.add("lesion_max", &spec.lesion_max);
    s.apply(raw);
    try {
        spec.task = parse_task(task);
    } catch (const Error &e) {
        throw ConfigError("task", e.what());
    }
    if (!(spec.noise >= 0)) throw ConfigError("noise", "noise must be >= 0");
    if (!(spec.positive_fraction >= 0 && spec.positive_fraction <= 1)) {
        throw ConfigError("positive_fraction", "positive_fraction must lie in [0, 1]");
    }
    const auto dir = require_out(c);
    const auto manifest = synth_corpus(spec, seed, dir);
    write_text(dir / "config.resolved", std::string("# tool_version = ") + tool_version() + "\n" + s.resolved());
    out << json{{"manifest", manifest.string()}, {"count", spec.count}}.dump() << "\n";
}

void cmd_stats(const RawConfig &raw, const Common &c, std::ostream &out) {
    fs::path manifest;
    Schema s;
    s.add("manifest", &manifest);
    s.apply(raw);
    if (manifest.empty()) throw ConfigError("manifest", "manifest is required");
    const auto m = load_manifest(manifest);
    const auto st = corpus_stats(m);
    json j{{"task", task_name(m.task)},
           {"rows", m.rows.size()},
           {"train", m.count(Split::train)},
           {"val", m.count(Split::val)},
           {"test", m.count(Split::test)},
           {"mean", st.mean},
           {"std", st.std},
           {"label_names", m.label_names}};
    if (!c.out.empty()) {
        prepare_run_dir(c.out, s);
        write_text(fs::path(c.out) / "reports" / "stats.json", j.dump(2) + "\n");
    }
    out << j.dump() << "\n";
}

void cmd_init(const RawConfig &raw, const Common &c, std::ostream &out) {
    std::string kind = "tokenizer", preset = "ti", source = "random";
    std::int64_t image_size = 224;
    std::uint64_t seed = 0;
    Schema s;
    s.add("kind", &kind);
    s.add("preset", &preset);
    s.add("image_size", &image_size);
    s.add("source", &source);
    s.add("seed", &seed);
    s.apply(raw);
    const auto cfg = vit_preset(preset, image_size);
    const auto dir = require_out(c);
    fs::path path;
    if (kind == "tokenizer") {
        if (source != "random" && source != "medical-clip" && source != "natural-clip") {
            throw ConfigError("source", "source must be random, medical-clip or natural-clip");
        }
        prepare_run_dir(dir, s);
        auto tok = make_random_tokenizer(cfg, seed);
        tok.source = source;
        path = dir / "checkpoints" / "tokenizer.ckpt";
        save_tokenizer(tok, path);
    } else if (kind == "backbone") {
        prepare_run_dir(dir, s);
        ViTModel m;
        build_vit(m, cfg, seed);
        path = dir / "checkpoints" / "backbone.ckpt";
        save_checkpoint(model_checkpoint(cfg, m.params, {{"kind", "backbone"}, {"seed", seed}}), path);
    } else {
        throw ConfigError("kind", "kind must be tokenizer or backbone, got '" + kind + "'");
    }
    out << json{{"checkpoint", path.string()}}.dump() << "\n";
}

void cmd_pretrain(const RawConfig &raw, const Common &c, std::ostream &out) {
    PretrainConfig cfg;
    Schema s;
    s.add("manifest", &cfg.manifest);
    s.add("tokenizer_ckpt", &cfg.tokenizer_ckpt);
    s.add("preset", &cfg.preset);
    s.add("image_size", &cfg.image_size);
    s.add("epochs", &cfg.epochs);
    s.add("batch_size", &cfg.batch_size);
    s.add("mask_ratio", &cfg.mask_ratio);
    s.add("crop_scale_min", &cfg.crop_scale_min);
    s.add("hflip_prob", &cfg.hflip_prob);
    s.add("base_lr", &cfg.base_lr);
    s.add("min_lr", &cfg.min_lr);
    s.add("weight_decay", &cfg.weight_decay);
    s.add("beta1", &cfg.beta1);
    s.add("beta2", &cfg.beta2);
    s.add("data_fraction", &cfg.data_fraction);
    s.add("seed", &cfg.seed);
    s.apply(raw);
    cfg.validate();
    check_preset(cfg.preset);
    cfg.epochs = cfg.resolved_epochs();
    const auto dir = require_out(c);
    prepare_run_dir(dir, s);
    if (c.dry_run) return;
    const auto r = pretrain_run(cfg, dir);
    out << json{{"checkpoint", r.checkpoint.string()},
                {"steps", r.curve.size()},
                {"initial_loss", r.curve.empty() ? 0.0 : r.curve.front().loss},
                {"final_loss", r.curve.empty() ? 0.0 : r.curve.back().loss}}
               .dump()
        << "\n";
}

void cmd_finetune_cls(const RawConfig &raw, const Common &c, std::ostream &out) {
    FinetuneClsConfig cfg;
    Schema s;
    s.add("manifest", &cfg.manifest);
    s.add("ckpt", &cfg.ckpt);
    s.add("preset", &cfg.preset);
    s.add("image_size", &cfg.image_size);
    s.add("task", &cfg.task);
    s.add("num_classes", &cfg.num_classes);
    s.add("epochs", &cfg.epochs);
    s.add("batch_size", &cfg.batch_size);
    s.add("lr", &cfg.lr);
    s.add("llrd", &cfg.llrd);
    s.add("dropout", &cfg.dropout);
    s.add("weight_decay", &cfg.weight_decay);
    s.add("beta1", &cfg.beta1);
    s.add("beta2", &cfg.beta2);
    s.add("crop_scale_min", &cfg.crop_scale_min);
    s.add("hflip_prob", &cfg.hflip_prob);
    s.add("data_fraction", &cfg.data_fraction);
    s.add("uncertain", &cfg.uncertain);
    s.add("seed", &cfg.seed);
    s.apply(raw);
    check_preset(cfg.preset);
    cfg = cfg.resolved();
    const auto dir = require_out(c);
    prepare_run_dir(dir, s);
    if (c.dry_run) return;
    const auto r = finetune_cls(cfg, dir);
    out << json{{"checkpoint", r.checkpoint.string()},
                {"best_epoch", r.best_epoch},
                {"split", r.final_split},
                {"metrics", eval_json(r.final_eval)}}
               .dump()
        << "\n";
}

void cmd_finetune_seg(const RawConfig &raw, const Common &c, std::ostream &out) {
    FinetuneSegConfig cfg;
    Schema s;
    s.add("manifest", &cfg.manifest);
    s.add("ckpt", &cfg.ckpt);
    s.add("preset", &cfg.preset);
    s.add("image_size", &cfg.image_size);
    s.add("iterations", &cfg.iterations);
    s.add("batch_size", &cfg.batch_size);
    s.add("eval_every", &cfg.eval_every);
    s.add("channels", &cfg.channels);
    s.add("lr", &cfg.lr);
    s.add("llrd", &cfg.llrd);
    s.add("weight_decay", &cfg.weight_decay);
    s.add("beta1", &cfg.beta1);
    s.add("beta2", &cfg.beta2);
    s.add("hflip_prob", &cfg.hflip_prob);
    s.add("data_fraction", &cfg.data_fraction);
    s.add("seed", &cfg.seed);
    s.apply(raw);
    cfg.validate();
    check_preset(cfg.preset);
    const auto dir = require_out(c);
    prepare_run_dir(dir, s);
    if (c.dry_run) return;
    const auto r = finetune_seg(cfg, dir);
    out << json{{"checkpoint", r.checkpoint.string()},
                {"best_iteration", r.best_iteration},
                {"train_dice", r.train_eval.dice},
                {"split", r.final_split},
                {"dice", r.final_eval.dice},
                {"jaccard", r.final_eval.jaccard}}
               .dump()
        << "\n";
}

void cmd_eval_cls(const RawConfig &raw, const Common &c, std::ostream &out) {
    fs::path ckpt, manifest;
    std::string split = "test";
    Schema s;
    s.add("ckpt", &ckpt);
    s.add("manifest", &manifest);
    s.add("split", &split);
    s.apply(raw);
    if (ckpt.empty()) throw ConfigError("ckpt", "ckpt is required");
    if (manifest.empty()) throw ConfigError("manifest", "manifest is required");
    const auto sp = parse_split_key(split);
    const auto e = eval_cls(ckpt, manifest, sp);
    if (!c.out.empty()) {
        prepare_run_dir(c.out, s);
        write_metrics_csv(eval_rows(e, split), fs::path(c.out) / "reports" / "metrics.csv");
    }
    out << json{{"split", split}, {"metrics", eval_json(e)}}.dump() << "\n";
}

void cmd_eval_seg(const RawConfig &raw, const Common &c, std::ostream &out) {
    fs::path ckpt, manifest;
    std::string split = "test";
    bool predictions = false;
    Schema s;
    s.add("ckpt", &ckpt);
    s.add("manifest", &manifest);
    s.add("split", &split);
    s.add("predictions", &predictions);
    s.apply(raw);
    if (ckpt.empty()) throw ConfigError("ckpt", "ckpt is required");
    if (manifest.empty()) throw ConfigError("manifest", "manifest is required");
    const auto sp = parse_split_key(split);
    fs::path pred_dir;
    if (!c.out.empty()) {
        prepare_run_dir(c.out, s);
        if (predictions) pred_dir = fs::path(c.out) / "figures";
    } else if (predictions) {
        throw UsageError("predictions need --out DIR");
    }
    const auto e = eval_seg(ckpt, manifest, sp, pred_dir);
    if (!c.out.empty()) {
        write_metrics_csv({{0, split, "dice", e.dice}, {0, split, "jaccard", e.jaccard}},
                          fs::path(c.out) / "reports" / "metrics.csv");
    }
    out << json{{"split", split}, {"dice", e.dice}, {"jaccard", e.jaccard}}.dump() << "\n";
}

void cmd_cam(const RawConfig &raw, const Common &c, std::ostream &out) {
    fs::path ckpt, manifest;
    std::string split = "test";
    std::int64_t target_class = 0, block = -1, max_images = 0;
    std::vector<double> thresholds = threshold_grid();
    double alpha = 0.5;
    Schema s;
    s.add("ckpt", &ckpt);
    s.add("manifest", &manifest);
    s.add("split", &split);
    s.add("target_class", &target_class);
    s.add("block", &block);
    s.add("thresholds", &thresholds);
    s.add("alpha", &alpha);
    s.add("max_images", &max_images);
    s.apply(raw);
    if (ckpt.empty()) throw ConfigError("ckpt", "ckpt is required");
    if (manifest.empty()) throw ConfigError("manifest", "manifest is required");
    if (!(alpha >= 0 && alpha <= 1)) throw ConfigError("alpha", "alpha must lie in [0, 1]");
    if (max_images < 0) throw ConfigError("max_images", "max_images must be >= 0");
    const auto sp = parse_split_key(split);
    const auto dir = require_out(c);
    prepare_run_dir(dir, s);

    const auto model = load_classifier(ckpt);
    const auto m = load_manifest(manifest);
    Weights<float> w;
    bind<float>(w, model.params, [](const Param &) { return false; });
    const ImageCache cache(m, model.config.image_size);
    AugmentConfig aug;
    aug.crop_size = model.config.image_size;
    aug.mean = model.mean;
    aug.std = model.std;
    auto rows = m.indices(sp);
    if (max_images > 0 && static_cast<std::int64_t>(rows.size()) > max_images) rows.resize(static_cast<std::size_t>(max_images));
    std::int64_t figures = 0;
    for (const auto row : rows) {
        const auto input = eval_view(cache.image(row), aug);
        for (std::size_t k = 0; k < model.label_names.size(); ++k) {
            const auto h = grad_cam(model.config, w, input, static_cast<std::int64_t>(k), block);
            render_heatmap(h, cache.image(row),
                           dir / "figures" / ("cam_" + std::to_string(row) + "_" + model.label_names[k] + ".png"), alpha);
            ++figures;
        }
    }
    json j{{"figures", figures}};
    const bool has_boxes = std::any_of(rows.begin(), rows.end(), [&](std::size_t r) { return m.rows[r].box.has_value(); });
    if (has_boxes) {
        const auto run = localize(ckpt, manifest, sp, target_class, thresholds, block);
        write_localization_csv(run.result, dir / "reports" / "localization.csv");
        j["pointing"] = run.result.pointing;
        j["best_t"] = run.result.best_t;
        j["best_mean_iou"] = run.result.best_mean_iou;
        j["ap25"] = run.result.ap25;
        j["ap50"] = run.result.ap50;
    }
    out << j.dump() << "\n";
}

void cmd_attn(const RawConfig &raw, const Common &c, std::ostream &out) {
    fs::path ckpt, image;
    std::vector<std::int64_t> points;
    std::int64_t block = -1;
    double alpha = 0.5;
    Schema s;
    s.add("ckpt", &ckpt);
    s.add("image", &image);
    s.add("points", &points);
    s.add("block", &block);
    s.add("alpha", &alpha);
    s.apply(raw);
    if (ckpt.empty()) throw ConfigError("ckpt", "ckpt is required");
    if (image.empty()) throw ConfigError("image", "image is required");
    if (points.empty() || points.size() % 2 != 0) throw ConfigError("points", "points must hold x,y pairs");
    if (!(alpha >= 0 && alpha <= 1)) throw ConfigError("alpha", "alpha must lie in [0, 1]");
    const auto dir = require_out(c);
    prepare_run_dir(dir, s);

    const auto ck = load_checkpoint(ckpt);
    ViTModel model;
    model.config = checkpoint_vit_config(ck);
    build_vit(model, model.config, 0);
    load_backbone(ck, model);
    Weights<float> w;
    bind<float>(w, model.params, [](const Param &) { return false; });
    const auto side = model.config.image_size;
    const auto img = resize_bilinear(decode_image(image), side, side);
    const auto input = normalize(img, ck.metadata.value("mean", 0.0), ck.metadata.value("std", 1.0));
    for (std::size_t i = 0; i < points.size() / 2; ++i) {
        const auto h = attention_query_map(model.config, w, input, points[2 * i], points[2 * i + 1], block);
        render_heatmap(h, img, dir / "figures" / ("attn_" + std::to_string(i) + ".png"), alpha);
    }
    out << json{{"figures", points.size() / 2}}.dump() << "\n";
}

}  // namespace

int run(const std::vector<std::string> &args, std::ostream &out, std::ostream &err) {
    CLI::App app{"Masked image modeling pretraining and transfer for grayscale images", "evax"};
    app.set_version_flag("--version", std::string(tool_version()));
    app.require_subcommand(1);
    struct Entry {
        const char *name;
        const char *help;
        void (*fn)(const RawConfig &, const Common &, std::ostream &);
    };
    const Entry entries[] = {
        {"pretrain", "masked image modeling against a frozen tokenizer", cmd_pretrain},
        {"finetune-cls", "classification fine-tuning", cmd_finetune_cls},
        {"finetune-seg", "segmentation fine-tuning", cmd_finetune_seg},
        {"eval-cls", "evaluate a classifier checkpoint", cmd_eval_cls},
        {"eval-seg", "evaluate a segmentation checkpoint", cmd_eval_seg},
        {"cam", "Grad-CAM heatmaps and localization metrics", cmd_cam},
        {"attn", "self-attention query maps", cmd_attn},
        {"synth", "write a synthetic corpus", cmd_synth},
        {"stats", "corpus statistics", cmd_stats},
        {"init", "random tokenizer or backbone checkpoint", cmd_init},
    };
    std::vector<Common> commons(std::size(entries));
    std::vector<CLI::App *> subs;
    for (std::size_t i = 0; i < std::size(entries); ++i) {
        auto *sub = app.add_subcommand(entries[i].name, entries[i].help);
        add_common(sub, commons[i]);
        subs.push_back(sub);
    }

    std::vector<std::string> argv_store = {"evax"};
    argv_store.insert(argv_store.end(), args.begin(), args.end());
    std::vector<char *> argv;
    for (auto &a : argv_store) argv.push_back(a.data());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp &) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp &) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::CallForVersion &) {
        out << tool_version() << "\n";
        return 0;
    } catch (const CLI::ParseError &e) {
        err << "error category=usage: " << e.what() << "\n";
        return static_cast<int>(ErrorCategory::usage);
    }

    for (std::size_t i = 0; i < subs.size(); ++i) {
        if (!subs[i]->parsed()) continue;
        try {
            set_num_threads(commons[i].threads);
            entries[i].fn(gather(commons[i], subs[i]), commons[i], out);
            return 0;
        } catch (const Error &e) {
            std::string msg = e.what();
            std::replace(msg.begin(), msg.end(), '\n', ' ');
            err << "error category=" << category_name(e.category()) << ": " << msg << "\n";
            return static_cast<int>(e.category());
        } catch (const std::exception &e) {
            err << "error category=data: " << e.what() << "\n";
            return static_cast<int>(ErrorCategory::data);
        }
    }
    return static_cast<int>(ErrorCategory::usage);
}

}  // namespace evax::cli
