#pragma once

// Library-level command implementations shared by the CLI binary, the tests
// and the python bindings. Each throws on failure; the CLI maps exceptions
// to a nonzero exit code.

#include <string>
#include <vector>

#include "miniclip/config.hpp"

namespace miniclip {

struct TrainOptions {
    std::string config_path;  // empty: built-in defaults
    std::string data_dir;
    std::string out_dir;
    std::string resume;  // checkpoint directory
    bool seed_set = false;
    uint64_t seed = 0;
    std::vector<std::pair<std::string, std::string>> overrides;
};

// Resolves config + overrides, loads the dataset, trains. Returns the final
// checkpoint directory.
std::string cmd_train(const TrainOptions& opt);

void cmd_gen_data(const std::string& spec_path, const std::string& out_dir);

struct ZeroShotOutcome {
    double accuracy = 0;
    int samples = 0;
    int classes = 0;
};

// Evaluates a checkpoint on a labeled manifest with prompt ensembling;
// writes an accuracy JSON when out_path is non-empty.
ZeroShotOutcome cmd_eval_zeroshot(const std::string& checkpoint_dir, const std::string& data_dir,
                                  const std::string& manifest_name = "eval.jsonl",
                                  const std::string& prompts_path = "", const std::string& out_path = "");

struct LinearProbeOutcome {
    double chosen_lambda = 0;
    double test_metric = 0;
};

// Frozen-feature probe: trains on manifest.jsonl labels, reports on the eval
// manifest; writes probe.csv and probe.json under out_dir when non-empty.
LinearProbeOutcome cmd_eval_linear(const std::string& checkpoint_dir, const std::string& data_dir,
                                   const std::string& out_dir = "", bool mean_per_class = false,
                                   const std::string& manifest_name = "manifest.jsonl",
                                   const std::string& eval_manifest_name = "eval.jsonl");

struct AblateRow {
    std::string name;
    bool mvs = false, ss = false, nns = false;
    double median_accuracy = 0;
    double delta_vs_clip = 0;
    std::vector<double> per_seed;
};

// The four cumulative supervision configurations, trained over `seeds`
// seeds each and scored zero-shot; writes table.csv under out_dir.
std::vector<AblateRow> cmd_ablate(const TrainOptions& base, int seeds);

// Shared helper: resolve a TrainConfig from path + overrides + seed flag.
TrainConfig resolve_config(const TrainOptions& opt);

}  // namespace miniclip
