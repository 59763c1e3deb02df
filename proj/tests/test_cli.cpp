#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "miniclip/commands.hpp"

using namespace miniclip;
namespace fs = std::filesystem;

namespace {

std::string temp_dir(const std::string& tag, bool create = true) {
    auto dir = fs::temp_directory_path() / ("miniclip_cli_" + tag);
    fs::remove_all(dir);
    if (create) fs::create_directories(dir);
    return dir.string();
}

std::string write_genspec(const std::string& dir) {
    const std::string path = dir + "/genspec.json";
    std::ofstream f(path);
    f << R"({"concepts": 4, "paraphrases_per_concept": 4, "pairs_per_concept": 8,
             "image_size": 16, "noise_std": 0.04, "seed": 5, "eval_per_concept": 4})";
    return path;
}

std::vector<std::pair<std::string, std::string>> tiny_overrides() {
    return {
        {"epochs", "2"},
        {"batch_size", "8"},
        {"queue_capacity", "64"},
        {"model.image_size", "16"},
        {"model.conv_channels", "[4,8,8]"},
        {"model.d_img", "8"},
        {"model.embed_dim", "8"},
        {"model.text_width", "8"},
        {"model.text_blocks", "1"},
        {"model.text_heads", "2"},
        {"model.mlp_ratio", "2"},
        {"model.context_len", "12"},
        {"lr_base", "0.005"},
        {"lr_peak", "0.05"},
    };
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_SUITE_BEGIN("cli");

TEST_CASE("gen-data, train, evaluate, ablate round trip") {
    const std::string work = temp_dir("roundtrip");
    const std::string data_dir = work + "/data";
    cmd_gen_data(write_genspec(work), data_dir);
    CHECK(fs::exists(data_dir + "/manifest.jsonl"));
    CHECK(fs::exists(data_dir + "/eval.jsonl"));
    CHECK(fs::exists(data_dir + "/lexicon.tsv"));
    CHECK(fs::exists(data_dir + "/labels.txt"));
    CHECK(fs::exists(data_dir + "/prompts.txt"));

    TrainOptions opt;
    opt.data_dir = data_dir;
    opt.out_dir = work + "/run";
    opt.overrides = tiny_overrides();
    opt.seed_set = true;
    opt.seed = 11;
    const std::string ckpt = cmd_train(opt);
    CHECK(fs::exists(ckpt + "/header.json"));
    CHECK(fs::exists(ckpt + "/params.bin"));
    CHECK(fs::exists(ckpt + "/vocab.txt"));
    CHECK(fs::exists(opt.out_dir + "/metrics.csv"));
    {
        std::ifstream metrics(opt.out_dir + "/metrics.csv");
        std::string header;
        std::getline(metrics, header);
        CHECK(header == "step,epoch,lr,tau,loss_total,loss_clip,loss_iss,loss_tss,loss_mvs,loss_nns");
    }

    SUBCASE("non-empty output directory without resume is refused") {
        TrainOptions again = opt;
        CHECK_THROWS_AS(cmd_train(again), ConfigError);
    }

    SUBCASE("zero-shot and linear probe evaluate the checkpoint") {
        auto z = cmd_eval_zeroshot(ckpt, data_dir, "eval.jsonl", "", work + "/zeroshot.json");
        CHECK(z.samples == 16);
        CHECK(z.classes == 4);
        CHECK(z.accuracy >= 0.0);
        CHECK(z.accuracy <= 1.0);
        CHECK(slurp(work + "/zeroshot.json").find("accuracy") != std::string::npos);

        auto p = cmd_eval_linear(ckpt, data_dir, work + "/probe");
        CHECK(p.chosen_lambda >= 1e-6);
        CHECK(p.chosen_lambda <= 1e6);
        CHECK(fs::exists(work + "/probe/probe.csv"));
        CHECK(fs::exists(work + "/probe/probe.json"));
        const std::string csv = slurp(work + "/probe/probe.csv");
        CHECK(csv.rfind("lambda,val_acc\n", 0) == 0);
    }
}

TEST_CASE("ablate emits the cumulative four-row table and is reproducible") {
    const std::string work = temp_dir("ablate");
    const std::string data_dir = work + "/data";
    cmd_gen_data(write_genspec(work), data_dir);

    TrainOptions base;
    base.data_dir = data_dir;
    base.out_dir = work + "/ablation";
    base.overrides = tiny_overrides();
    base.seed_set = true;
    base.seed = 3;

    auto table = cmd_ablate(base, /*seeds=*/1);
    REQUIRE(table.size() == 4);
    CHECK(table[0].name == "clip");
    CHECK_FALSE(table[0].mvs);
    CHECK_FALSE(table[0].ss);
    CHECK_FALSE(table[0].nns);
    CHECK(table[1].mvs);
    CHECK_FALSE(table[1].ss);
    CHECK(table[2].mvs);
    CHECK(table[2].ss);
    CHECK_FALSE(table[2].nns);
    CHECK(table[3].mvs);
    CHECK(table[3].ss);
    CHECK(table[3].nns);
    CHECK(table[0].delta_vs_clip == 0.0);

    const std::string csv_path = base.out_dir + "/table.csv";
    REQUIRE(fs::exists(csv_path));
    const std::string csv = slurp(csv_path);
    CHECK(csv.rfind("config,clip,mvs,ss,nns,median_zero_shot,delta_vs_clip\n", 0) == 0);

    // same seed, fresh directory: identical table bytes
    TrainOptions rerun = base;
    rerun.out_dir = work + "/ablation2";
    cmd_ablate(rerun, 1);
    CHECK(slurp(rerun.out_dir + "/table.csv") == csv);
}

TEST_CASE("config overrides reject unknown keys and bad weights") {
    TrainOptions opt;
    opt.data_dir = "unused";
    opt.out_dir = "unused";
    opt.overrides = {{"no_such_key", "1"}};
    CHECK_THROWS_AS(resolve_config(opt), ConfigError);

    opt.overrides = {{"weights.alpha", "0.9"}, {"weights.beta", "0.9"}};
    CHECK_THROWS_AS(resolve_config(opt), ConfigError);

    opt.overrides = {{"weights.alpha", "0.3"}};
    CHECK(resolve_config(opt).weights.alpha == doctest::Approx(0.3));
}

TEST_SUITE_END();
