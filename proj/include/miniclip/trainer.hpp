#pragma once

// The training loop: per-batch forward of both views, the combined loss,
// backward, SGD with momentum and selective weight decay, queue update in
// the prescribed order, warmup + cosine schedule, metrics, checkpoints.

#include <optional>
#include <string>

#include "miniclip/config.hpp"
#include "miniclip/data.hpp"
#include "miniclip/losses.hpp"
#include "miniclip/nets.hpp"
#include "miniclip/nnqueue.hpp"

namespace miniclip {

struct OptimState {
    std::vector<std::vector<float>> momentum;  // parallel to ModelParams::arrays
    int64_t step = 0;
    double lr = 0.0;
};

OptimState init_optim(const ModelParams& params);

// Linear warmup from lr_base to lr_peak, then cosine decay from lr_peak to
// exactly zero at the final step.
double lr_schedule(int64_t step, int64_t steps_per_epoch, const TrainConfig& cfg);

// One record's augmented views plus masking metadata.
struct PreparedBatch {
    int n = 0;
    std::vector<float> images_v1, images_v2;           // [N,3,H,W]; v2 empty when unused
    std::vector<int> tokens_v1_raw, tokens_v1_masked;  // [N, context_len]
    std::vector<int> tokens_v2;
    std::vector<int> lengths_v1, lengths_v2;
    std::vector<int> mlm_samples, mlm_slots, mlm_originals;  // per masked position
};

PreparedBatch prepare_batch(const Dataset& ds, const std::vector<int>& indices, const TrainConfig& cfg, int epoch);

struct StepOutcome {
    LossReport report;
    double lr = 0;
    double tau = 0;
    bool queue_warmup = false;
};

StepOutcome train_step(ModelParams& params, OptimState& optim, FeatureQueue* queue, const PreparedBatch& batch,
                       const TrainConfig& cfg, int64_t steps_per_epoch);

// Checkpoint = model + optimizer + queue + counters + config; `epoch_next`
// is the first epoch a resumed run should execute.
void save_checkpoint(const std::string& dir, const ModelParams& params, const OptimState& optim,
                     const FeatureQueue* queue, int epoch_next, const TrainConfig& cfg);

struct LoadedCheckpoint {
    ModelParams params;
    OptimState optim;
    std::optional<FeatureQueue> queue;
    int epoch_next = 0;
    TrainConfig cfg;
};

LoadedCheckpoint load_checkpoint(const std::string& dir);

struct TrainResult {
    ModelParams params;
    OptimState optim;
    std::optional<FeatureQueue> queue;
    std::string metrics_path;
    std::string final_checkpoint;
};

// Writes metrics.csv (the steps executed by this call), vocab.txt,
// config.json and per-epoch checkpoints under out_dir. `resume_from` points
// at a checkpoint directory.
TrainResult run_training(const TrainConfig& cfg, const Dataset& ds, const std::string& out_dir,
                         const std::string& resume_from = "");

}  // namespace miniclip
