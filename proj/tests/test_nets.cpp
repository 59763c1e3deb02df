#include "doctest.h"

#include <cmath>

#include "miniclip/augment.hpp"
#include "miniclip/nets.hpp"
#include "miniclip/rng.hpp"

using namespace miniclip;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.image_size = 16;
    cfg.conv_channels[0] = 4;
    cfg.conv_channels[1] = 8;
    cfg.conv_channels[2] = 16;
    cfg.d_img = 16;
    cfg.embed_dim = 16;
    cfg.text_width = 16;
    cfg.text_blocks = 2;
    cfg.text_heads = 4;
    cfg.mlp_ratio = 2;
    cfg.context_len = 8;
    cfg.vocab_size = 32;
    return cfg;
}

std::vector<float> random_images(int n, int size, uint64_t seed) {
    Rng rng(seed);
    std::vector<float> data(static_cast<size_t>(n) * 3 * size * size);
    for (auto& v : data) v = static_cast<float>(rng.uniform());
    return data;
}

int64_t expected_param_count(const ModelConfig& c) {
    auto conv = [](int out, int in) { return static_cast<int64_t>(out) * in * 9 + out; };
    auto lin = [](int in, int out) { return static_cast<int64_t>(in) * out + out; };
    int64_t n = 0;
    n += conv(c.conv_channels[0], 3) + conv(c.conv_channels[1], c.conv_channels[0]) +
         conv(c.conv_channels[2], c.conv_channels[1]) + 2 * c.conv_channels[2] +
         lin(c.conv_channels[2], c.d_img);
    n += static_cast<int64_t>(c.vocab_size) * c.text_width + static_cast<int64_t>(c.context_len) * c.text_width;
    const int64_t block = 2 * c.text_width                      // ln1
                          + 4 * lin(c.text_width, c.text_width)  // q, k, v, o
                          + 2 * c.text_width                     // ln2
                          + lin(c.text_width, c.mlp_ratio * c.text_width) +
                          lin(c.mlp_ratio * c.text_width, c.text_width);
    n += block * c.text_blocks;
    n += 2 * c.text_width;  // final ln
    n += lin(c.d_img, c.embed_dim) + lin(c.text_width, c.embed_dim);
    n += lin(c.d_img, c.embed_dim) + lin(c.embed_dim, c.embed_dim) + lin(c.embed_dim, c.embed_dim) +
         4 * c.embed_dim;
    n += lin(c.embed_dim, c.embed_dim / 2) + lin(c.embed_dim / 2, c.embed_dim) + c.embed_dim;
    n += lin(c.text_width, c.vocab_size);
    n += 1;  // logit scale
    return n;
}

}  // namespace

TEST_SUITE_BEGIN("nets");

TEST_CASE("init is deterministic and sets tau to its configured start") {
    const ModelConfig cfg = tiny_config();
    ModelParams a = init_params(cfg, 7);
    ModelParams b = init_params(cfg, 7);
    REQUIRE(a.arrays.size() == b.arrays.size());
    for (size_t i = 0; i < a.arrays.size(); ++i) {
        CHECK(a.arrays[i].name == b.arrays[i].name);
        CHECK(a.arrays[i].data == b.arrays[i].data);
    }
    ModelParams c = init_params(cfg, 8);
    CHECK(c.at("img.conv1.w").data != a.at("img.conv1.w").data);

    CHECK(std::abs(current_tau(a) - 0.07) <= 1e-7);
}

TEST_CASE("parameter count matches the analytic formula") {
    SUBCASE("tiny config") {
        const ModelConfig cfg = tiny_config();
        CHECK(init_params(cfg, 1).total_count() == expected_param_count(cfg));
    }
    SUBCASE("default desk config") {
        ModelConfig cfg;
        CHECK(init_params(cfg, 1).total_count() == expected_param_count(cfg));
        CHECK(init_params(cfg, 1).total_count() == 163585);  // documented desk size at V = 64
    }
}

TEST_CASE("tau clamp keeps tau at or above its floor") {
    ModelParams p = init_params(tiny_config(), 3);
    p.at("logit_scale").data[0] = 10.0f;  // tau = exp(-10), far below the floor
    clamp_tau(p);
    CHECK(current_tau(p) >= p.cfg.min_tau - 1e-9);
    // clamping never raises s
    p.at("logit_scale").data[0] = 1.0f;
    clamp_tau(p);
    CHECK(p.at("logit_scale").data[0] == 1.0f);
}

TEST_CASE("encode_image basics") {
    const ModelConfig cfg = tiny_config();
    ModelParams params = init_params(cfg, 11);

    SUBCASE("zero image produces finite features of the right shape") {
        Tape tape;
        BoundParams bp(tape, params, false);
        auto imgs = tape.constant({2, 3, 16, 16}, std::vector<float>(2 * 3 * 16 * 16, 0.0f));
        Tensor feat = encode_image(bp, imgs);
        CHECK(feat.shape() == Shape{2, cfg.d_img});
        for (float v : feat.value()) CHECK(std::isfinite(v));
    }
    SUBCASE("no cross-sample coupling") {
        const auto one = random_images(1, 16, 21);
        auto two = random_images(1, 16, 22);
        two.insert(two.end(), one.begin(), one.end());  // second row is `one`

        Tape t1;
        BoundParams bp1(t1, params, false);
        Tensor alone = encode_image(bp1, t1.constant({1, 3, 16, 16}, one));
        Tape t2;
        BoundParams bp2(t2, params, false);
        Tensor batched = encode_image(bp2, t2.constant({2, 3, 16, 16}, two));
        for (int j = 0; j < cfg.d_img; ++j)
            CHECK(batched.value()[cfg.d_img + j] == doctest::Approx(alone.value()[j]).epsilon(1e-6));
    }
    SUBCASE("wrong spatial size is rejected") {
        Tape tape;
        BoundParams bp(tape, params, false);
        auto bad = tape.constant({1, 3, 8, 8}, std::vector<float>(3 * 8 * 8, 0.1f));
        CHECK_THROWS_AS(encode_image(bp, bad), ShapeError);
    }
}

TEST_CASE("encode_text basics") {
    const ModelConfig cfg = tiny_config();
    ModelParams params = init_params(cfg, 13);

    SUBCASE("eos-only sequence pools that position") {
        Tape tape;
        BoundParams bp(tape, params, false);
        auto enc = encode_text(bp, {kEosId}, {1});
        CHECK(enc.seq_len == 1);
        for (int j = 0; j < cfg.text_width; ++j) CHECK(enc.sent_feat.value()[j] == enc.word_feats.value()[j]);
    }
    SUBCASE("single content token pools the eos slot") {
        Tape tape;
        BoundParams bp(tape, params, false);
        auto enc = encode_text(bp, {5, kEosId, kPadId, kPadId}, {2});
        CHECK(enc.seq_len == 2);
        for (int j = 0; j < cfg.text_width; ++j)
            CHECK(enc.sent_feat.value()[j] == enc.word_feats.value()[cfg.text_width + j]);
    }
    SUBCASE("padding after eos never changes sent_feat") {
        std::vector<int> short_seq = {5, 6, kEosId};
        std::vector<int> a_padded = {5, 6, kEosId, kPadId, kPadId, kPadId};
        std::vector<int> b_other = {7, 8, 9, 10, 11, kEosId};

        Tape t1;
        BoundParams bp1(t1, params, false);
        auto alone = encode_text(bp1, short_seq, {3});

        // same sample inside a batch that forces a longer effective length
        std::vector<int> batch_tokens = a_padded;
        batch_tokens.insert(batch_tokens.end(), b_other.begin(), b_other.end());
        Tape t2;
        BoundParams bp2(t2, params, false);
        auto mixed = encode_text(bp2, batch_tokens, {3, 6});
        CHECK(mixed.seq_len == 6);
        for (int j = 0; j < cfg.text_width; ++j)
            CHECK(mixed.sent_feat.value()[j] == doctest::Approx(alone.sent_feat.value()[j]).epsilon(1e-6));
    }
    SUBCASE("token beyond the vocabulary is a vocabulary error") {
        Tape tape;
        BoundParams bp(tape, params, false);
        CHECK_THROWS_AS(encode_text(bp, {cfg.vocab_size, kEosId}, {2}), DataError);
    }
    SUBCASE("overlong input is truncated and flagged") {
        Tape tape;
        BoundParams bp(tape, params, false);
        std::vector<int> long_seq(cfg.context_len + 4, 5);
        long_seq.back() = kEosId;
        auto enc = encode_text(bp, long_seq, {cfg.context_len + 4});
        CHECK(enc.truncated);
        CHECK(enc.seq_len == cfg.context_len);
    }
    SUBCASE("batch permutation equivariance") {
        std::vector<int> tokens = {5, 6, kEosId, kPadId, 9, 10, 11, kEosId};
        std::vector<int> swapped = {9, 10, 11, kEosId, 5, 6, kEosId, kPadId};
        Tape t1, t2;
        BoundParams bp1(t1, params, false), bp2(t2, params, false);
        auto a = encode_text(bp1, tokens, {3, 4});
        auto b = encode_text(bp2, swapped, {4, 3});
        const int w = cfg.text_width;
        for (int j = 0; j < w; ++j) {
            CHECK(a.sent_feat.value()[j] == doctest::Approx(b.sent_feat.value()[w + j]));
            CHECK(a.sent_feat.value()[w + j] == doctest::Approx(b.sent_feat.value()[j]));
        }
    }
    SUBCASE("random sentences rarely collide") {
        Rng rng(31);
        Tape tape;
        BoundParams bp(tape, params, false);
        const int n = 100, L = 6;
        std::vector<int> tokens(n * L, kPadId);
        std::vector<int> lengths(n);
        for (int i = 0; i < n; ++i) {
            const int len = 2 + static_cast<int>(rng.below(4));
            for (int j = 0; j + 1 < len; ++j)
                tokens[i * L + j] = kNumSpecialIds + static_cast<int>(rng.below(cfg.vocab_size - kNumSpecialIds));
            tokens[i * L + len - 1] = kEosId;
            lengths[i] = len;
        }
        auto enc = encode_text(bp, tokens, lengths);
        const int w = cfg.text_width;
        int collisions = 0;
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) {
                bool same_input = true;
                for (int t = 0; t < L && same_input; ++t) same_input = tokens[i * L + t] == tokens[j * L + t];
                if (same_input) continue;
                double diff = 0;
                for (int t = 0; t < w; ++t)
                    diff += std::abs(enc.sent_feat.value()[i * w + t] - enc.sent_feat.value()[j * w + t]);
                if (diff < 1e-9) ++collisions;
            }
        CHECK(collisions == 0);
    }
}

TEST_CASE("projection emits unit rows into the shared dimension") {
    const ModelConfig cfg = tiny_config();
    ModelParams params = init_params(cfg, 17);
    Tape tape;
    BoundParams bp(tape, params, false);
    auto imgs = tape.constant({3, 3, 16, 16}, random_images(3, 16, 5));
    Tensor feat = encode_image(bp, imgs);
    Tensor proj = project(bp, feat, Modality::Image);
    CHECK(proj.shape() == Shape{3, cfg.embed_dim});
    for (int i = 0; i < 3; ++i) {
        double sq = 0;
        for (int j = 0; j < cfg.embed_dim; ++j)
            sq += static_cast<double>(proj.value()[i * cfg.embed_dim + j]) * proj.value()[i * cfg.embed_dim + j];
        CHECK(std::sqrt(sq) == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("simsiam heads mirror the configured shape relationships") {
    const ModelConfig cfg = tiny_config();
    ModelParams params = init_params(cfg, 19);
    CHECK(params.at("ss.pred.fc1.w").shape == Shape{cfg.embed_dim, cfg.embed_dim / 2});
    CHECK(params.at("ss.proj.fc3.w").shape == Shape{cfg.embed_dim, cfg.embed_dim});

    Tape tape;
    BoundParams bp(tape, params, false);
    auto f1 = encode_image(bp, tape.constant({2, 3, 16, 16}, random_images(2, 16, 41)));
    auto f2 = encode_image(bp, tape.constant({2, 3, 16, 16}, random_images(2, 16, 42)));
    auto heads = simsiam_heads(bp, f1, f2);
    CHECK(heads.z.shape() == Shape{2, cfg.embed_dim});
    CHECK(heads.p.shape() == Shape{2, cfg.embed_dim});
    CHECK(heads.z_aug.shape() == Shape{2, cfg.embed_dim});
    CHECK(heads.p_aug.shape() == Shape{2, cfg.embed_dim});
}

TEST_CASE("mlm head produces per-position vocabulary logits") {
    const ModelConfig cfg = tiny_config();
    ModelParams params = init_params(cfg, 23);
    Tape tape;
    BoundParams bp(tape, params, false);
    auto enc = encode_text(bp, {5, 6, kEosId, 7, 8, kEosId}, {3, 3});
    Tensor logits = mlm_logits(bp, enc.word_feats);
    CHECK(logits.shape() == Shape{2 * enc.seq_len, cfg.vocab_size});
}

TEST_CASE("the learnable temperature participates in the graph") {
    const ModelConfig cfg = tiny_config();
    ModelParams params = init_params(cfg, 29);
    Tape tape;
    BoundParams bp(tape, params, true);
    Tensor it = inv_tau_tensor(bp);
    CHECK(it.item() == doctest::Approx(1.0 / 0.07).epsilon(1e-5));
    tape.backward(sum(it));
    CHECK(bp["logit_scale"].grad().size() == 1);
    CHECK(bp["logit_scale"].grad()[0] != 0.0f);
}

TEST_SUITE_END();
