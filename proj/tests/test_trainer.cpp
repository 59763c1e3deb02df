#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "miniclip/trainer.hpp"

using namespace miniclip;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_train_config() {
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.lr_base = 0.01;
    cfg.lr_peak = 0.05;
    cfg.warmup_epochs = 1;
    cfg.queue_capacity = 32;
    cfg.seed = 3;
    cfg.model.image_size = 16;
    cfg.model.conv_channels[0] = 4;
    cfg.model.conv_channels[1] = 8;
    cfg.model.conv_channels[2] = 8;
    cfg.model.d_img = 8;
    cfg.model.embed_dim = 8;
    cfg.model.text_width = 8;
    cfg.model.text_blocks = 1;
    cfg.model.text_heads = 2;
    cfg.model.mlp_ratio = 2;
    cfg.model.context_len = 8;
    return cfg;
}

// a hand-built in-memory dataset: colored noise images, tiny captions
Dataset tiny_dataset(int n, int image_size, uint64_t seed) {
    Dataset ds;
    Rng rng(seed);
    std::vector<std::string> captions;
    const char* shapes[4] = {"circle", "square", "cross", "ring"};
    const char* colors[4] = {"red", "blue", "green", "gold"};
    for (int i = 0; i < n; ++i) {
        const int cls = i % 4;
        ManifestRecord r;
        r.caption = std::string("a ") + colors[cls] + " " + shapes[cls];
        r.label = cls;
        ds.manifest.records.push_back(r);
        Image img{3, image_size, image_size, std::vector<float>(static_cast<size_t>(3) * image_size * image_size)};
        for (int c = 0; c < 3; ++c) {
            const float base = c == cls % 3 ? 0.8f : 0.2f;
            for (int p = 0; p < image_size * image_size; ++p)
                img.data[static_cast<size_t>(c) * image_size * image_size + p] =
                    std::clamp(base + static_cast<float>(rng.normal() * 0.05), 0.0f, 1.0f);
        }
        ds.images.push_back(std::move(img));
        captions.push_back(r.caption);
    }
    ds.vocab = Vocab::build(captions, 1);
    for (const auto& r : ds.manifest.records) ds.tokens.push_back(content_ids(r.caption, ds.vocab));
    ds.label_names = {"red circle", "blue square", "green cross", "gold ring"};
    ds.prompts = {"a photo of a {label}"};
    return ds;
}

std::string temp_dir(const std::string& tag) {
    auto dir = fs::temp_directory_path() / ("miniclip_trainer_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir.string();
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_SUITE_BEGIN("trainer");

TEST_CASE("lr schedule boundaries") {
    TrainConfig cfg = tiny_train_config();
    cfg.epochs = 10;
    cfg.warmup_epochs = 2;
    cfg.lr_base = 0.001;
    cfg.lr_peak = 0.1;
    const int64_t spe = 50;
    CHECK(lr_schedule(0, spe, cfg) == doctest::Approx(cfg.lr_base));
    CHECK(lr_schedule(100, spe, cfg) == cfg.lr_peak);  // end of warmup, exact
    CHECK(lr_schedule(310, spe, cfg) < cfg.lr_peak);
    CHECK(lr_schedule(10 * 50 - 1, spe, cfg) <= 1e-8 * cfg.lr_peak);  // cos(pi) term
    // monotone rise through warmup
    CHECK(lr_schedule(50, spe, cfg) > lr_schedule(0, spe, cfg));
    CHECK(lr_schedule(99, spe, cfg) < cfg.lr_peak);
}

TEST_CASE("a fixed batch is overfit within 50 steps") {
    TrainConfig cfg = tiny_train_config();
    cfg.epochs = 5;  // only used for the schedule here
    cfg.model.vocab_size = 64;
    Dataset ds = tiny_dataset(8, cfg.model.image_size, 7);
    cfg.model.vocab_size = ds.vocab.size();

    ModelParams params = init_params(cfg.model, cfg.seed);
    OptimState optim = init_optim(params);
    FeatureQueue queue(cfg.queue_capacity, cfg.model.embed_dim);
    std::vector<int> indices = {0, 1, 2, 3, 4, 5, 6, 7};
    PreparedBatch batch = prepare_batch(ds, indices, cfg, /*epoch=*/0);

    double first = 0, last = 0;
    for (int step = 0; step < 50; ++step) {
        StepOutcome o = train_step(params, optim, &queue, batch, cfg, /*steps_per_epoch=*/10);
        CHECK(std::isfinite(o.report.total));
        if (step == 0) first = o.report.total;
        last = o.report.total;
    }
    CHECK(last < first);
    CHECK(queue.fill() > 0);
}

TEST_CASE("loss report composition matches the weighted formula") {
    TrainConfig cfg = tiny_train_config();
    Dataset ds = tiny_dataset(8, cfg.model.image_size, 11);
    cfg.model.vocab_size = ds.vocab.size();
    ModelParams params = init_params(cfg.model, cfg.seed);
    OptimState optim = init_optim(params);
    FeatureQueue queue(cfg.queue_capacity, cfg.model.embed_dim);
    PreparedBatch batch = prepare_batch(ds, {0, 1, 2, 3, 4, 5, 6, 7}, cfg, 0);
    StepOutcome o = train_step(params, optim, &queue, batch, cfg, 10);
    CHECK(o.report.total == doctest::Approx(declip_total_value(o.report, cfg.weights)).epsilon(1e-6));
    CHECK(o.tau == doctest::Approx(0.07).epsilon(1e-5));
    CHECK(o.queue_warmup);  // first step: empty queue fallback

    StepOutcome o2 = train_step(params, optim, &queue, batch, cfg, 10);
    CHECK_FALSE(o2.queue_warmup);
}

TEST_CASE("zero auxiliary weights reduce the step to the clip path") {
    TrainConfig cfg = tiny_train_config();
    cfg.weights = {0.0, 0.0, 0.0};
    cfg.use_queue = false;
    Dataset ds = tiny_dataset(8, cfg.model.image_size, 13);
    cfg.model.vocab_size = ds.vocab.size();

    ModelParams params = init_params(cfg.model, cfg.seed);
    OptimState optim = init_optim(params);
    PreparedBatch batch = prepare_batch(ds, {0, 1, 2, 3, 4, 5, 6, 7}, cfg, 0);
    CHECK(batch.images_v2.empty());  // unused views are not even materialized
    StepOutcome o = train_step(params, optim, nullptr, batch, cfg, 10);
    CHECK(o.report.total == doctest::Approx(o.report.l_clip).epsilon(1e-7));
    CHECK(o.report.l_iss == 0.0);
    CHECK(o.report.l_mvs == 0.0);
    CHECK(o.report.l_nns == 0.0);
}

TEST_CASE("training runs are deterministic and checkpoints round-trip") {
    TrainConfig cfg = tiny_train_config();
    Dataset ds = tiny_dataset(20, cfg.model.image_size, 17);
    cfg.model.vocab_size = ds.vocab.size();

    const auto dir_a = temp_dir("run_a");
    const auto dir_b = temp_dir("run_b");
    TrainResult a = run_training(cfg, ds, dir_a);
    TrainResult b = run_training(cfg, ds, dir_b);

    SUBCASE("metrics are byte-identical across identical runs") {
        CHECK(slurp(a.metrics_path) == slurp(b.metrics_path));
    }

    SUBCASE("checkpoint loads back byte-exact state") {
        LoadedCheckpoint loaded = load_checkpoint(a.final_checkpoint);
        REQUIRE(loaded.params.arrays.size() == a.params.arrays.size());
        for (size_t i = 0; i < a.params.arrays.size(); ++i) {
            CHECK(loaded.params.arrays[i].name == a.params.arrays[i].name);
            CHECK(loaded.params.arrays[i].data == a.params.arrays[i].data);
        }
        REQUIRE(loaded.queue.has_value());
        CHECK(loaded.queue->snapshot() == a.queue->snapshot());
        CHECK(loaded.optim.step == a.optim.step);

        // saving the loaded state reproduces params.bin bit for bit
        const auto dir_c = temp_dir("resave");
        save_checkpoint(dir_c, loaded.params, loaded.optim, &*loaded.queue, loaded.epoch_next, loaded.cfg);
        CHECK(slurp(dir_c + "/params.bin") == slurp(a.final_checkpoint + "/params.bin"));
        CHECK(slurp(dir_c + "/header.json") == slurp(a.final_checkpoint + "/header.json"));
    }

    SUBCASE("kill-and-resume reproduces the uninterrupted tail exactly") {
        const auto dir_c = temp_dir("resumed");
        TrainResult resumed = run_training(cfg, ds, dir_c, dir_a + "/checkpoints/epoch_0000");

        // the resumed metrics must equal the tail of the uninterrupted run
        auto tail_of = [](const std::string& text, size_t rows) {
            std::vector<std::string> lines;
            std::stringstream ss(text);
            std::string line;
            while (std::getline(ss, line)) lines.push_back(line);
            std::string out;
            for (size_t i = lines.size() - rows; i < lines.size(); ++i) out += lines[i] + "\n";
            return out;
        };
        const std::string full = slurp(a.metrics_path);
        const std::string resumed_text = slurp(resumed.metrics_path);
        std::stringstream ss(resumed_text);
        std::string header;
        std::getline(ss, header);
        std::string resumed_rows(std::istreambuf_iterator<char>(ss), {});
        size_t resumed_count = 0;
        for (char c : resumed_rows)
            if (c == '\n') ++resumed_count;
        CHECK(resumed_count > 0);
        CHECK(resumed_rows == tail_of(full, resumed_count));

        // final states agree byte for byte
        for (size_t i = 0; i < a.params.arrays.size(); ++i)
            CHECK(resumed.params.arrays[i].data == a.params.arrays[i].data);
        CHECK(resumed.queue->snapshot() == a.queue->snapshot());
    }
}

TEST_CASE("run_training validates batch size against the dataset") {
    TrainConfig cfg = tiny_train_config();
    cfg.batch_size = 64;
    Dataset ds = tiny_dataset(20, cfg.model.image_size, 19);
    cfg.model.vocab_size = ds.vocab.size();
    CHECK_THROWS_AS(run_training(cfg, ds, temp_dir("bad")), ConfigError);
}

TEST_CASE("gamma without a queue is rejected at validation") {
    TrainConfig cfg = tiny_train_config();
    cfg.use_queue = false;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_SUITE_END();
