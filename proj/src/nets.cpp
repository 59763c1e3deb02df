#include "miniclip/nets.hpp"

#include <algorithm>
#include <cmath>

#include "miniclip/augment.hpp"
#include "miniclip/rng.hpp"

namespace miniclip {

void ModelConfig::validate() const {
    if (image_size < 8 || (image_size & (image_size - 1)) != 0)
        throw ConfigError("image_size must be a power of two >= 8");
    if (d_img < 2 || embed_dim < 2 || text_width < 2) throw ConfigError("model widths must be at least 2");
    if (text_width % text_heads != 0) throw ConfigError("text_width must be divisible by text_heads");
    if (embed_dim % 2 != 0) throw ConfigError("embed_dim must be even (predictor hidden is half of it)");
    if (context_len < 2) throw ConfigError("context_len must be at least 2");
    if (vocab_size <= kNumSpecialIds) throw ConfigError("vocab_size must exceed the special ids");
    if (!(init_tau > 0) || !(min_tau > 0)) throw ConfigError("temperatures must be positive");
    if (text_blocks < 1 || mlp_ratio < 1) throw ConfigError("text_blocks and mlp_ratio must be positive");
}

namespace {

struct Builder {
    ModelParams out;
    Rng rng;

    explicit Builder(uint64_t seed) : rng(derive_rng(seed, 0x1417ULL)) {}

    void push(const std::string& name, Shape shape, std::vector<float> data, bool decay) {
        out.index[name] = static_cast<int>(out.arrays.size());
        out.arrays.push_back({name, std::move(shape), std::move(data), decay});
    }

    void uniform(const std::string& name, Shape shape, int fan_in, bool decay) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::vector<float> data(numel(shape));
        for (auto& v : data) v = static_cast<float>(rng.uniform(-bound, bound));
        push(name, std::move(shape), std::move(data), decay);
    }

    void linear(const std::string& prefix, int in, int dims_out) {
        uniform(prefix + ".w", {in, dims_out}, in, true);
        uniform(prefix + ".b", {dims_out}, in, false);
    }

    void conv(const std::string& prefix, int out_ch, int in_ch, int k) {
        uniform(prefix + ".w", {out_ch, in_ch, k, k}, in_ch * k * k, true);
        uniform(prefix + ".b", {out_ch}, in_ch * k * k, false);
    }

    void embedding(const std::string& name, int rows, int cols) {
        std::vector<float> data(static_cast<int64_t>(rows) * cols);
        for (auto& v : data) v = static_cast<float>(rng.normal() * 0.02);
        push(name, {rows, cols}, std::move(data), true);
    }

    void layer_norm(const std::string& prefix, int width) {
        push(prefix + ".g", {width}, std::vector<float>(width, 1.0f), false);
        push(prefix + ".b", {width}, std::vector<float>(width, 0.0f), false);
    }
};

}  // namespace

ModelParams init_params(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Builder b(seed);
    b.out.cfg = cfg;

    b.conv("img.conv1", cfg.conv_channels[0], 3, 3);
    b.conv("img.conv2", cfg.conv_channels[1], cfg.conv_channels[0], 3);
    b.conv("img.conv3", cfg.conv_channels[2], cfg.conv_channels[1], 3);
    b.layer_norm("img.ln", cfg.conv_channels[2]);
    b.linear("img.fc", cfg.conv_channels[2], cfg.d_img);

    b.embedding("txt.tok_embed", cfg.vocab_size, cfg.text_width);
    b.embedding("txt.pos_embed", cfg.context_len, cfg.text_width);
    for (int i = 0; i < cfg.text_blocks; ++i) {
        const std::string p = "txt.block" + std::to_string(i);
        b.layer_norm(p + ".ln1", cfg.text_width);
        b.linear(p + ".attn.q", cfg.text_width, cfg.text_width);
        b.linear(p + ".attn.k", cfg.text_width, cfg.text_width);
        b.linear(p + ".attn.v", cfg.text_width, cfg.text_width);
        b.linear(p + ".attn.o", cfg.text_width, cfg.text_width);
        b.layer_norm(p + ".ln2", cfg.text_width);
        b.linear(p + ".mlp.fc1", cfg.text_width, cfg.mlp_ratio * cfg.text_width);
        b.linear(p + ".mlp.fc2", cfg.mlp_ratio * cfg.text_width, cfg.text_width);
    }
    b.layer_norm("txt.ln_f", cfg.text_width);

    b.linear("proj.img", cfg.d_img, cfg.embed_dim);
    b.linear("proj.txt", cfg.text_width, cfg.embed_dim);

    b.linear("ss.proj.fc1", cfg.d_img, cfg.embed_dim);
    b.layer_norm("ss.proj.ln1", cfg.embed_dim);
    b.linear("ss.proj.fc2", cfg.embed_dim, cfg.embed_dim);
    b.layer_norm("ss.proj.ln2", cfg.embed_dim);
    b.linear("ss.proj.fc3", cfg.embed_dim, cfg.embed_dim);
    b.linear("ss.pred.fc1", cfg.embed_dim, cfg.embed_dim / 2);
    b.layer_norm("ss.pred.ln1", cfg.embed_dim / 2);
    b.linear("ss.pred.fc2", cfg.embed_dim / 2, cfg.embed_dim);

    b.linear("mlm.head", cfg.text_width, cfg.vocab_size);

    // tau = exp(-s), so s = -ln(tau)
    b.push("logit_scale", {1}, {static_cast<float>(-std::log(cfg.init_tau))}, false);
    return b.out;
}

ParamArray& ModelParams::at(const std::string& name) {
    auto it = index.find(name);
    if (it == index.end()) throw Error("unknown parameter " + name);
    return arrays[it->second];
}

const ParamArray& ModelParams::at(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end()) throw Error("unknown parameter " + name);
    return arrays[it->second];
}

int64_t ModelParams::total_count() const {
    int64_t n = 0;
    for (const auto& a : arrays) n += static_cast<int64_t>(a.data.size());
    return n;
}

double current_tau(const ModelParams& params) { return std::exp(-static_cast<double>(params.at("logit_scale").data[0])); }

void clamp_tau(ModelParams& params) {
    const float max_s = static_cast<float>(-std::log(params.cfg.min_tau));  // tau >= min_tau
    float& s = params.at("logit_scale").data[0];
    s = std::min(s, max_s);
}

BoundParams::BoundParams(Tape& tape, const ModelParams& params, bool trainable)
    : cfg_(&params.cfg), index_(&params.index) {
    leaves_.reserve(params.arrays.size());
    for (const auto& a : params.arrays) leaves_.push_back(tape.leaf(a.shape, a.data, trainable));
}

Tensor BoundParams::operator[](const std::string& name) const {
    auto it = index_->find(name);
    if (it == index_->end()) throw Error("unknown parameter " + name);
    return leaves_[it->second];
}

Tensor inv_tau_tensor(const BoundParams& params) { return exp(params["logit_scale"]); }

namespace {

Tensor linear(const BoundParams& p, const std::string& prefix, Tensor x) {
    return add_bias(matmul(x, p[prefix + ".w"]), p[prefix + ".b"]);
}

}  // namespace

Tensor encode_image(const BoundParams& params, Tensor images) {
    const auto& cfg = params.cfg();
    const auto& shape = images.shape();
    if (shape.size() != 4 || shape[1] != 3 || shape[2] != cfg.image_size || shape[3] != cfg.image_size)
        throw ShapeError("encode_image expects [N,3," + std::to_string(cfg.image_size) + "," +
                         std::to_string(cfg.image_size) + "], got " + shape_str(shape));
    Tensor x = relu(conv2d(images, params["img.conv1.w"], params["img.conv1.b"], 2, 1));
    x = relu(conv2d(x, params["img.conv2.w"], params["img.conv2.b"], 2, 1));
    x = relu(conv2d(x, params["img.conv3.w"], params["img.conv3.b"], 2, 1));
    // per-sample norm keeps pooled relu features from sharing one dominant
    // direction (and keeps rows independent of the rest of the batch)
    Tensor pooled = layer_norm_rows(global_avg_pool(x), params["img.ln.g"], params["img.ln.b"]);
    return linear(params, "img.fc", pooled);
}

TextEncoding encode_text(const BoundParams& params, const std::vector<int>& tokens,
                         const std::vector<int>& lengths) {
    const auto& cfg = params.cfg();
    const int n = static_cast<int>(lengths.size());
    if (n == 0 || tokens.size() % lengths.size() != 0)
        throw ShapeError("encode_text tokens must be [N, L] row-major with one length per row");
    const int padded_len = static_cast<int>(tokens.size()) / n;

    TextEncoding enc;
    enc.truncated = padded_len > cfg.context_len;
    const int usable = std::min(padded_len, cfg.context_len);

    int max_len = 1;
    for (int len : lengths) {
        if (len < 1) throw ShapeError("encode_text sequence lengths must be >= 1");
        max_len = std::max(max_len, std::min(len, usable));
    }
    const int L = max_len;
    enc.seq_len = L;

    std::vector<int> ids(static_cast<size_t>(n) * L);
    std::vector<int> pos_ids(static_cast<size_t>(n) * L);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < L; ++j) {
            const int tok = tokens[static_cast<size_t>(i) * padded_len + j];
            if (tok < 0 || tok >= cfg.vocab_size)
                throw DataError("token id " + std::to_string(tok) + " is outside the vocabulary of size " +
                                std::to_string(cfg.vocab_size));
            ids[static_cast<size_t>(i) * L + j] = tok;
            pos_ids[static_cast<size_t>(i) * L + j] = j;
        }

    Tape& tape = params["txt.ln_f.g"].tape();
    Tensor x = add(embedding(params["txt.tok_embed"], ids), embedding(params["txt.pos_embed"], pos_ids));

    // additive key-padding mask, shared by every head
    const int heads = cfg.text_heads;
    std::vector<float> mask(static_cast<size_t>(n) * heads * L * L, 0.0f);
    for (int i = 0; i < n; ++i) {
        const int len = std::min(lengths[i], L);
        for (int h = 0; h < heads; ++h)
            for (int q = 0; q < L; ++q)
                for (int k = len; k < L; ++k)
                    mask[(((static_cast<size_t>(i) * heads + h) * L) + q) * L + k] = -1e9f;
    }
    Tensor mask_t = tape.constant({n * heads, L, L}, std::move(mask));
    const float attn_scale = 1.0f / std::sqrt(static_cast<float>(cfg.text_width / heads));

    for (int bidx = 0; bidx < cfg.text_blocks; ++bidx) {
        const std::string bp = "txt.block" + std::to_string(bidx);
        Tensor normed = layer_norm_rows(x, params[bp + ".ln1.g"], params[bp + ".ln1.b"]);
        Tensor q = head_split(linear(params, bp + ".attn.q", normed), n, L, heads);
        Tensor k = head_split(linear(params, bp + ".attn.k", normed), n, L, heads);
        Tensor v = head_split(linear(params, bp + ".attn.v", normed), n, L, heads);
        Tensor scores = add(scale(batched_matmul(q, k, /*trans_b=*/true), attn_scale), mask_t);
        Tensor probs = softmax_rows(reshape(scores, {n * heads * L, L}));
        Tensor ctx = batched_matmul(reshape(probs, {n * heads, L, L}), v);
        Tensor attn_out = linear(params, bp + ".attn.o", head_merge(ctx, n, L, heads));
        x = add(x, attn_out);

        Tensor normed2 = layer_norm_rows(x, params[bp + ".ln2.g"], params[bp + ".ln2.b"]);
        Tensor h = relu(linear(params, bp + ".mlp.fc1", normed2));
        x = add(x, linear(params, bp + ".mlp.fc2", h));
    }

    enc.word_feats = layer_norm_rows(x, params["txt.ln_f.g"], params["txt.ln_f.b"]);

    if (cfg.mean_pool_text) {
        // block-diagonal averaging over the valid positions of each sample
        std::vector<float> avg(static_cast<size_t>(n) * n * L, 0.0f);
        for (int i = 0; i < n; ++i) {
            const int len = std::min(lengths[i], L);
            for (int j = 0; j < len; ++j) avg[static_cast<size_t>(i) * n * L + i * L + j] = 1.0f / len;
        }
        enc.sent_feat = matmul(tape.constant({n, n * L}, std::move(avg)), enc.word_feats);
    } else {
        std::vector<int> eos_rows(n);
        for (int i = 0; i < n; ++i) eos_rows[i] = i * L + std::min(lengths[i], L) - 1;
        enc.sent_feat = gather_rows(enc.word_feats, eos_rows);
    }
    return enc;
}

Tensor project(const BoundParams& params, Tensor backbone_feat, Modality which) {
    const char* prefix = which == Modality::Image ? "proj.img" : "proj.txt";
    return l2_normalize_rows(linear(params, prefix, backbone_feat));
}

SimsiamHeads simsiam_heads(const BoundParams& params, Tensor backbone_feat, Tensor backbone_feat_aug) {
    // normalization inside the heads keeps the target branch from drifting
    // to a constant (the collapse SimSiam's stop-gradient alone cannot stop)
    auto proj = [&](Tensor f) {
        Tensor h = relu(layer_norm_rows(linear(params, "ss.proj.fc1", f), params["ss.proj.ln1.g"],
                                        params["ss.proj.ln1.b"]));
        h = relu(layer_norm_rows(linear(params, "ss.proj.fc2", h), params["ss.proj.ln2.g"],
                                 params["ss.proj.ln2.b"]));
        return linear(params, "ss.proj.fc3", h);
    };
    auto pred = [&](Tensor z) {
        Tensor h = relu(layer_norm_rows(linear(params, "ss.pred.fc1", z), params["ss.pred.ln1.g"],
                                        params["ss.pred.ln1.b"]));
        return linear(params, "ss.pred.fc2", h);
    };
    SimsiamHeads out;
    out.z = proj(backbone_feat);
    out.z_aug = proj(backbone_feat_aug);
    out.p = pred(out.z);
    out.p_aug = pred(out.z_aug);
    return out;
}

Tensor mlm_logits(const BoundParams& params, Tensor word_feats) { return linear(params, "mlm.head", word_feats); }

}  // namespace miniclip
