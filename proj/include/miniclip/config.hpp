#pragma once

// The run configuration: every knob of the combined loss, the schedules, the
// augmentations and the model dimensions, serialized as one JSON document
// with dotted-path CLI overrides.

#include <string>

#include "json.hpp"
#include "miniclip/augment.hpp"
#include "miniclip/losses.hpp"
#include "miniclip/nets.hpp"

namespace miniclip {

struct TrainConfig {
    int epochs = 20;
    int batch_size = 128;
    LossWeights weights;
    // paper schedule shape at desk scale: per the linear batch-size rule,
    // 0.01 and 0.2 scaled by 128/10240
    double lr_base = 0.00125;
    double lr_peak = 0.025;
    double warmup_epochs = 1.0;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    double grad_clip = 1.0;  // global-norm ceiling; 0 disables
    int queue_capacity = 4096;
    bool use_queue = true;
    uint64_t seed = 0;
    int vocab_min_count = 1;
    bool unmasked_contrastive = false;
    bool nns_both_views = false;
    bool mvs_average = false;
    AugmentConfig augment;
    ModelConfig model;

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
    static TrainConfig load_file(const std::string& path);

    // key like "weights.alpha" or "epochs"; value parsed as JSON when
    // possible, else taken as a string.
    void apply_override(const std::string& key, const std::string& value);
};

}  // namespace miniclip
