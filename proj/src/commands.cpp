#include "miniclip/commands.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "miniclip/eval.hpp"
#include "miniclip/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace miniclip {

namespace {

void require_fresh_or_resume(const std::string& out_dir, bool resuming) {
    if (!fs::exists(out_dir)) return;
    if (!fs::is_directory(out_dir)) throw ConfigError(out_dir + " exists and is not a directory");
    if (!fs::is_empty(out_dir) && !resuming)
        throw ConfigError("output directory " + out_dir + " is not empty (pass --resume to continue a run)");
}

Vocab checkpoint_vocab(const std::string& checkpoint_dir) {
    const fs::path direct = fs::path(checkpoint_dir) / "vocab.txt";
    if (fs::exists(direct)) return Vocab::load(direct.string());
    // run layout: <run>/checkpoints/epoch_XXXX -> <run>/vocab.txt
    const fs::path updir = fs::path(checkpoint_dir).parent_path().parent_path() / "vocab.txt";
    if (fs::exists(updir)) return Vocab::load(updir.string());
    throw DataError("no vocab.txt next to checkpoint " + checkpoint_dir);
}

}  // namespace

TrainConfig resolve_config(const TrainOptions& opt) {
    TrainConfig cfg = opt.config_path.empty() ? TrainConfig{} : TrainConfig::load_file(opt.config_path);
    for (const auto& [key, value] : opt.overrides) cfg.apply_override(key, value);
    if (opt.seed_set) cfg.seed = opt.seed;
    return cfg;
}

std::string cmd_train(const TrainOptions& opt) {
    if (opt.data_dir.empty() || opt.out_dir.empty()) throw ConfigError("train needs --data and --out");
    TrainConfig cfg = resolve_config(opt);
    require_fresh_or_resume(opt.out_dir, !opt.resume.empty());

    Dataset ds = load_dataset(opt.data_dir, "manifest.jsonl", cfg.model.image_size, cfg.vocab_min_count);
    cfg.model.vocab_size = ds.vocab.size();
    cfg.validate();

    TrainResult result = run_training(cfg, ds, opt.out_dir, opt.resume);
    return result.final_checkpoint;
}

void cmd_gen_data(const std::string& spec_path, const std::string& out_dir) {
    if (spec_path.empty() || out_dir.empty()) throw ConfigError("gen-data needs --spec and --out");
    GenSpec spec = GenSpec::from_json_file(spec_path);
    require_fresh_or_resume(out_dir, false);
    synth_generate(spec, out_dir);
}

ZeroShotOutcome cmd_eval_zeroshot(const std::string& checkpoint_dir, const std::string& data_dir,
                                  const std::string& manifest_name, const std::string& prompts_path,
                                  const std::string& out_path) {
    LoadedCheckpoint ckpt = load_checkpoint(checkpoint_dir);
    Vocab vocab = checkpoint_vocab(checkpoint_dir);
    Dataset ds = load_dataset(data_dir, manifest_name, ckpt.cfg.model.image_size, 1, &vocab);
    if (ds.label_names.empty()) throw DataError("zero-shot evaluation needs labels.txt in " + data_dir);

    std::vector<std::string> templates =
        prompts_path.empty() ? ds.prompts : load_lines(prompts_path);
    if (templates.empty()) templates = {"a photo of a {label}"};

    ZeroShotClassifier cls = build_zeroshot(ckpt.params, vocab, ds.label_names, templates);
    std::vector<float> feats = extract_image_features(ckpt.params, ds.images);

    std::vector<int> labels;
    labels.reserve(ds.manifest.records.size());
    for (const auto& r : ds.manifest.records) {
        if (r.label < 0) throw DataError("zero-shot evaluation needs labeled records");
        labels.push_back(r.label);
    }
    auto pred = zeroshot_predict(cls, feats, static_cast<int>(labels.size()));

    ZeroShotOutcome out;
    out.accuracy = top1_accuracy(pred, labels);
    out.samples = static_cast<int>(labels.size());
    out.classes = static_cast<int>(ds.label_names.size());

    if (!out_path.empty()) {
        json j = {{"accuracy", out.accuracy}, {"samples", out.samples}, {"classes", out.classes}};
        std::ofstream f(out_path, std::ios::binary);
        if (!f) throw DataError("cannot write " + out_path);
        f << j.dump(2) << '\n';
    }
    return out;
}

namespace {

ProbeDataset probe_dataset_from(const ModelParams& params, const Dataset& ds, int classes) {
    ProbeDataset out;
    out.dim = params.cfg.embed_dim;
    out.classes = classes;
    out.n = static_cast<int>(ds.manifest.records.size());
    out.features = extract_image_features(params, ds.images);
    out.labels.reserve(out.n);
    for (const auto& r : ds.manifest.records) {
        if (r.label < 0) throw DataError("linear probe needs labeled records");
        out.labels.push_back(r.label);
    }
    return out;
}

}  // namespace

LinearProbeOutcome cmd_eval_linear(const std::string& checkpoint_dir, const std::string& data_dir,
                                   const std::string& out_dir, bool mean_per_class,
                                   const std::string& manifest_name, const std::string& eval_manifest_name) {
    LoadedCheckpoint ckpt = load_checkpoint(checkpoint_dir);
    Vocab vocab = checkpoint_vocab(checkpoint_dir);
    Dataset train_ds = load_dataset(data_dir, manifest_name, ckpt.cfg.model.image_size, 1, &vocab);
    Dataset test_ds = load_dataset(data_dir, eval_manifest_name, ckpt.cfg.model.image_size, 1, &vocab);

    int classes = 0;
    for (const auto& r : train_ds.manifest.records) classes = std::max(classes, r.label + 1);
    for (const auto& r : test_ds.manifest.records) classes = std::max(classes, r.label + 1);

    ProbeDataset train = probe_dataset_from(ckpt.params, train_ds, classes);
    ProbeDataset test = probe_dataset_from(ckpt.params, test_ds, classes);

    ProbeResult result = linear_probe_protocol(train, nullptr, test, mean_per_class, ckpt.cfg.seed);

    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        std::ofstream csv(fs::path(out_dir) / "probe.csv", std::ios::binary);
        csv << "lambda,val_acc\n";
        for (const auto& e : result.entries) {
            char buf[80];
            std::snprintf(buf, sizeof(buf), "%.9e,%.9e\n", e.lambda, e.val_acc);
            csv << buf;
        }
        json j = {{"chosen_lambda", result.chosen_lambda}, {"test_metric", result.test_metric}};
        std::ofstream js(fs::path(out_dir) / "probe.json", std::ios::binary);
        js << j.dump(2) << '\n';
    }
    return {result.chosen_lambda, result.test_metric};
}

std::vector<AblateRow> cmd_ablate(const TrainOptions& base, int seeds) {
    if (base.data_dir.empty() || base.out_dir.empty()) throw ConfigError("ablate needs --data and --out");
    if (seeds < 1) throw ConfigError("ablate needs at least one seed");
    require_fresh_or_resume(base.out_dir, false);
    fs::create_directories(base.out_dir);

    struct RowSpec {
        const char* name;
        double alpha, beta, gamma;
    };
    // cumulative supervision, MVS first
    const RowSpec rows[] = {
        {"clip", 0.0, 0.0, 0.0},
        {"clip+mvs", 0.0, 0.2, 0.0},
        {"clip+mvs+ss", 0.2, 0.2, 0.0},
        {"clip+mvs+ss+nns", 0.2, 0.2, 0.2},
    };

    const TrainConfig base_cfg = resolve_config(base);
    std::vector<AblateRow> table;
    for (const auto& row : rows) {
        AblateRow out;
        out.name = row.name;
        out.mvs = row.beta > 0;
        out.ss = row.alpha > 0;
        out.nns = row.gamma > 0;
        for (int s = 0; s < seeds; ++s) {
            TrainConfig cfg = base_cfg;
            cfg.weights = {row.alpha, row.beta, row.gamma};
            cfg.use_queue = row.gamma > 0;
            cfg.seed = base_cfg.seed + static_cast<uint64_t>(s);

            const std::string run_dir =
                (fs::path(base.out_dir) / (std::string(row.name) + "_seed" + std::to_string(s))).string();
            TrainOptions opt;
            opt.data_dir = base.data_dir;
            opt.out_dir = run_dir;

            Dataset ds = load_dataset(opt.data_dir, "manifest.jsonl", cfg.model.image_size, cfg.vocab_min_count);
            cfg.model.vocab_size = ds.vocab.size();
            cfg.validate();
            TrainResult trained = run_training(cfg, ds, run_dir);

            ZeroShotOutcome z = cmd_eval_zeroshot(trained.final_checkpoint, base.data_dir, "eval.jsonl");
            out.per_seed.push_back(z.accuracy);
        }
        std::vector<double> sorted = out.per_seed;
        std::sort(sorted.begin(), sorted.end());
        const size_t n = sorted.size();
        out.median_accuracy = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
        table.push_back(std::move(out));
    }
    for (auto& row : table) row.delta_vs_clip = row.median_accuracy - table[0].median_accuracy;

    std::ofstream csv(fs::path(base.out_dir) / "table.csv", std::ios::binary);
    if (!csv) throw DataError("cannot write ablation table");
    csv << "config,clip,mvs,ss,nns,median_zero_shot,delta_vs_clip\n";
    for (const auto& row : table) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%s,1,%d,%d,%d,%.6f,%+.6f\n", row.name.c_str(), row.mvs ? 1 : 0,
                      row.ss ? 1 : 0, row.nns ? 1 : 0, row.median_accuracy, row.delta_vs_clip);
        csv << buf;
    }
    return table;
}

}  // namespace miniclip
