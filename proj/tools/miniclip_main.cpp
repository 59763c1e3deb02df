// miniclip: desk-scale dual-encoder contrastive pretraining toolkit.

#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "miniclip/commands.hpp"

namespace {

std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& raw) {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& kv : raw) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos || eq == 0)
            throw miniclip::ConfigError("--override expects key=value, got: " + kv);
        out.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"miniclip: dual-encoder contrastive pretraining with multi-view, self- and "
                 "nearest-neighbor supervision"};
    app.require_subcommand(1);

    // gen-data
    std::string gen_spec, gen_out;
    auto* gen = app.add_subcommand("gen-data", "Render a synthetic paired image-text dataset");
    gen->add_option("--spec", gen_spec, "generator spec JSON")->required();
    gen->add_option("--out", gen_out, "output directory")->required();

    // train
    miniclip::TrainOptions train_opt;
    std::vector<std::string> train_overrides;
    auto* train = app.add_subcommand("train", "Train the dual encoder");
    train->add_option("--config", train_opt.config_path, "config JSON (defaults when omitted)");
    train->add_option("--data", train_opt.data_dir, "dataset directory")->required();
    train->add_option("--out", train_opt.out_dir, "run output directory")->required();
    train->add_option("--resume", train_opt.resume, "checkpoint directory to resume from");
    auto* train_seed = train->add_option("--seed", train_opt.seed, "run seed");
    train->add_option("--override", train_overrides, "config override key=value")->take_all();

    // eval-zeroshot
    std::string zs_ckpt, zs_data, zs_manifest = "eval.jsonl", zs_prompts, zs_out;
    auto* zs = app.add_subcommand("eval-zeroshot", "Zero-shot accuracy with prompt ensembling");
    zs->add_option("--checkpoint", zs_ckpt, "checkpoint directory")->required();
    zs->add_option("--data", zs_data, "dataset directory")->required();
    zs->add_option("--manifest", zs_manifest, "labeled manifest name");
    zs->add_option("--prompts", zs_prompts, "prompt template file (one per line)");
    zs->add_option("--out", zs_out, "write the accuracy JSON here");

    // eval-linear
    std::string lp_ckpt, lp_data, lp_out;
    bool lp_mpc = false;
    auto* lp = app.add_subcommand("eval-linear", "Linear probe on frozen features");
    lp->add_option("--checkpoint", lp_ckpt, "checkpoint directory")->required();
    lp->add_option("--data", lp_data, "dataset directory")->required();
    lp->add_option("--out", lp_out, "directory for probe.csv / probe.json");
    lp->add_flag("--mean-per-class", lp_mpc, "report mean-per-class instead of accuracy");

    // ablate
    miniclip::TrainOptions ab_opt;
    std::vector<std::string> ab_overrides;
    int ab_seeds = 5;
    auto* ab = app.add_subcommand("ablate", "Train the four supervision configurations and tabulate");
    ab->add_option("--config", ab_opt.config_path, "base config JSON");
    ab->add_option("--data", ab_opt.data_dir, "dataset directory")->required();
    ab->add_option("--out", ab_opt.out_dir, "output directory")->required();
    ab->add_option("--seeds", ab_seeds, "seeds per configuration");
    auto* ab_seed = ab->add_option("--seed", ab_opt.seed, "base seed");
    ab->add_option("--override", ab_overrides, "config override key=value")->take_all();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            miniclip::cmd_gen_data(gen_spec, gen_out);
            std::printf("generated dataset at %s\n", gen_out.c_str());
        } else if (train->parsed()) {
            train_opt.seed_set = train_seed->count() > 0;
            train_opt.overrides = parse_overrides(train_overrides);
            const std::string ckpt = miniclip::cmd_train(train_opt);
            std::printf("final checkpoint: %s\n", ckpt.c_str());
        } else if (zs->parsed()) {
            auto out = miniclip::cmd_eval_zeroshot(zs_ckpt, zs_data, zs_manifest, zs_prompts, zs_out);
            std::printf("zero-shot top-1 accuracy: %.4f (%d samples, %d classes)\n", out.accuracy, out.samples,
                        out.classes);
        } else if (lp->parsed()) {
            auto out = miniclip::cmd_eval_linear(lp_ckpt, lp_data, lp_out, lp_mpc);
            std::printf("linear probe: lambda=%g test_metric=%.4f\n", out.chosen_lambda, out.test_metric);
        } else if (ab->parsed()) {
            ab_opt.seed_set = ab_seed->count() > 0;
            ab_opt.overrides = parse_overrides(ab_overrides);
            auto table = miniclip::cmd_ablate(ab_opt, ab_seeds);
            for (const auto& row : table)
                std::printf("%-18s median=%.4f (%+.4f)\n", row.name.c_str(), row.median_accuracy,
                            row.delta_vs_clip);
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
