#include "miniclip/config.hpp"

#include <fstream>

using nlohmann::json;

namespace miniclip {

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (warmup_epochs < 0 || warmup_epochs > epochs)
        throw ConfigError("warmup_epochs must lie in [0, epochs]");
    if (lr_base < 0 || lr_peak <= 0) throw ConfigError("learning rates must be positive");
    if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must lie in [0,1)");
    if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
    if (grad_clip < 0) throw ConfigError("grad_clip must be non-negative");
    if (weights.gamma > 0 && !use_queue)
        throw ConfigError("nearest-neighbor supervision (gamma > 0) requires the feature queue");
    if (use_queue && queue_capacity < 1) throw ConfigError("queue_capacity must be positive");
    weights.validate();
    augment.validate();
    model.validate();
}

json TrainConfig::to_json() const {
    json j;
    j["epochs"] = epochs;
    j["batch_size"] = batch_size;
    j["weights"] = {{"alpha", weights.alpha}, {"beta", weights.beta}, {"gamma", weights.gamma}};
    j["lr_base"] = lr_base;
    j["lr_peak"] = lr_peak;
    j["warmup_epochs"] = warmup_epochs;
    j["momentum"] = momentum;
    j["weight_decay"] = weight_decay;
    j["grad_clip"] = grad_clip;
    j["queue_capacity"] = queue_capacity;
    j["use_queue"] = use_queue;
    j["seed"] = seed;
    j["vocab_min_count"] = vocab_min_count;
    j["unmasked_contrastive"] = unmasked_contrastive;
    j["nns_both_views"] = nns_both_views;
    j["mvs_average"] = mvs_average;
    j["augment"] = {{"crop_scale_lo", augment.crop_scale_lo},
                    {"crop_scale_hi", augment.crop_scale_hi},
                    {"jitter_brightness", augment.jitter_brightness},
                    {"jitter_contrast", augment.jitter_contrast},
                    {"jitter_saturation", augment.jitter_saturation},
                    {"jitter_hue", augment.jitter_hue},
                    {"jitter_prob", augment.jitter_prob},
                    {"grayscale_prob", augment.grayscale_prob},
                    {"blur_sigma_lo", augment.blur_sigma_lo},
                    {"blur_sigma_hi", augment.blur_sigma_hi},
                    {"hflip_prob", augment.hflip_prob},
                    {"eda_change_fraction", augment.eda_change_fraction},
                    {"mlm_select", augment.mlm_select},
                    {"mlm_mask", augment.mlm_mask},
                    {"mlm_random", augment.mlm_random},
                    {"mlm_keep", augment.mlm_keep}};
    j["model"] = {{"image_size", model.image_size},
                  {"conv_channels", {model.conv_channels[0], model.conv_channels[1], model.conv_channels[2]}},
                  {"d_img", model.d_img},
                  {"embed_dim", model.embed_dim},
                  {"text_width", model.text_width},
                  {"text_blocks", model.text_blocks},
                  {"text_heads", model.text_heads},
                  {"mlp_ratio", model.mlp_ratio},
                  {"context_len", model.context_len},
                  {"vocab_size", model.vocab_size},
                  {"init_tau", model.init_tau},
                  {"min_tau", model.min_tau},
                  {"mean_pool_text", model.mean_pool_text}};
    return j;
}

TrainConfig TrainConfig::from_json(const json& j) {
    TrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    if (j.contains("weights")) {
        const auto& w = j.at("weights");
        c.weights.alpha = w.value("alpha", c.weights.alpha);
        c.weights.beta = w.value("beta", c.weights.beta);
        c.weights.gamma = w.value("gamma", c.weights.gamma);
    }
    c.lr_base = j.value("lr_base", c.lr_base);
    c.lr_peak = j.value("lr_peak", c.lr_peak);
    c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
    c.momentum = j.value("momentum", c.momentum);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.queue_capacity = j.value("queue_capacity", c.queue_capacity);
    c.use_queue = j.value("use_queue", c.use_queue);
    c.seed = j.value("seed", c.seed);
    c.vocab_min_count = j.value("vocab_min_count", c.vocab_min_count);
    c.unmasked_contrastive = j.value("unmasked_contrastive", c.unmasked_contrastive);
    c.nns_both_views = j.value("nns_both_views", c.nns_both_views);
    c.mvs_average = j.value("mvs_average", c.mvs_average);
    if (j.contains("augment")) {
        const auto& a = j.at("augment");
        auto& g = c.augment;
        g.crop_scale_lo = a.value("crop_scale_lo", g.crop_scale_lo);
        g.crop_scale_hi = a.value("crop_scale_hi", g.crop_scale_hi);
        g.jitter_brightness = a.value("jitter_brightness", g.jitter_brightness);
        g.jitter_contrast = a.value("jitter_contrast", g.jitter_contrast);
        g.jitter_saturation = a.value("jitter_saturation", g.jitter_saturation);
        g.jitter_hue = a.value("jitter_hue", g.jitter_hue);
        g.jitter_prob = a.value("jitter_prob", g.jitter_prob);
        g.grayscale_prob = a.value("grayscale_prob", g.grayscale_prob);
        g.blur_sigma_lo = a.value("blur_sigma_lo", g.blur_sigma_lo);
        g.blur_sigma_hi = a.value("blur_sigma_hi", g.blur_sigma_hi);
        g.hflip_prob = a.value("hflip_prob", g.hflip_prob);
        g.eda_change_fraction = a.value("eda_change_fraction", g.eda_change_fraction);
        g.mlm_select = a.value("mlm_select", g.mlm_select);
        g.mlm_mask = a.value("mlm_mask", g.mlm_mask);
        g.mlm_random = a.value("mlm_random", g.mlm_random);
        g.mlm_keep = a.value("mlm_keep", g.mlm_keep);
    }
    if (j.contains("model")) {
        const auto& m = j.at("model");
        auto& d = c.model;
        d.image_size = m.value("image_size", d.image_size);
        if (m.contains("conv_channels")) {
            const auto& ch = m.at("conv_channels");
            if (!ch.is_array() || ch.size() != 3) throw ConfigError("model.conv_channels must be a 3-element array");
            for (int i = 0; i < 3; ++i) d.conv_channels[i] = ch.at(i).get<int>();
        }
        d.d_img = m.value("d_img", d.d_img);
        d.embed_dim = m.value("embed_dim", d.embed_dim);
        d.text_width = m.value("text_width", d.text_width);
        d.text_blocks = m.value("text_blocks", d.text_blocks);
        d.text_heads = m.value("text_heads", d.text_heads);
        d.mlp_ratio = m.value("mlp_ratio", d.mlp_ratio);
        d.context_len = m.value("context_len", d.context_len);
        d.vocab_size = m.value("vocab_size", d.vocab_size);
        d.init_tau = m.value("init_tau", d.init_tau);
        d.min_tau = m.value("min_tau", d.min_tau);
        d.mean_pool_text = m.value("mean_pool_text", d.mean_pool_text);
    }
    c.validate();
    return c;
}

TrainConfig TrainConfig::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config " + path + ": " + e.what());
    }
    return from_json(j);
}

void TrainConfig::apply_override(const std::string& key, const std::string& value) {
    json j = to_json();
    json* node = &j;
    std::string rest = key;
    while (true) {
        const auto dot = rest.find('.');
        if (dot == std::string::npos) break;
        const std::string head = rest.substr(0, dot);
        if (!node->contains(head)) throw ConfigError("unknown config key: " + key);
        node = &(*node)[head];
        rest = rest.substr(dot + 1);
    }
    if (!node->contains(rest)) throw ConfigError("unknown config key: " + key);
    json parsed;
    try {
        parsed = json::parse(value);
    } catch (const json::exception&) {
        parsed = value;  // plain string
    }
    (*node)[rest] = parsed;
    *this = from_json(j);
}

}  // namespace miniclip
