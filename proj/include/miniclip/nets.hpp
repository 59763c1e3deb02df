#pragma once

// The desk-scale dual encoder: a 3-conv image encoder, a small transformer
// text encoder, contrastive projection heads, the SimSiam projector/predictor
// pair, the masked-token head, and the learnable temperature.

#include <string>
#include <unordered_map>
#include <vector>

#include "miniclip/tensor.hpp"

namespace miniclip {

struct ModelConfig {
    int image_size = 32;
    int conv_channels[3] = {16, 32, 64};
    int d_img = 64;       // backbone feature width
    int embed_dim = 64;   // shared contrastive dimension
    int text_width = 64;  // transformer width
    int text_blocks = 2;
    int text_heads = 4;
    int mlp_ratio = 4;
    int context_len = 32;
    int vocab_size = 64;  // overwritten from the dataset vocabulary
    double init_tau = 0.07;
    double min_tau = 0.01;
    bool mean_pool_text = false;  // default: end-of-text pooling

    void validate() const;
};

struct ParamArray {
    std::string name;
    Shape shape;
    std::vector<float> data;
    bool decay = true;  // weight decay applies
};

struct ModelParams {
    ModelConfig cfg;
    std::vector<ParamArray> arrays;
    std::unordered_map<std::string, int> index;

    ParamArray& at(const std::string& name);
    const ParamArray& at(const std::string& name) const;
    int64_t total_count() const;
};

// Deterministic in the seed: fan-in-scaled uniform linear/conv layers,
// N(0, 0.02) embeddings, unit layer-norm gains, and the logit scale set so
// that tau starts at cfg.init_tau.
ModelParams init_params(const ModelConfig& cfg, uint64_t seed);

double current_tau(const ModelParams& params);
void clamp_tau(ModelParams& params);  // enforces tau >= cfg.min_tau

// One training step's view of the parameters as tape leaves.
class BoundParams {
  public:
    BoundParams(Tape& tape, const ModelParams& params, bool trainable = true);
    Tensor operator[](const std::string& name) const;
    const std::vector<Tensor>& leaves() const { return leaves_; }
    const ModelConfig& cfg() const { return *cfg_; }

  private:
    const ModelConfig* cfg_;
    const std::unordered_map<std::string, int>* index_;
    std::vector<Tensor> leaves_;
};

// 1 / tau as a graph node (exp of the logit scale).
Tensor inv_tau_tensor(const BoundParams& params);

// images [N,3,H,W] -> backbone features [N, d_img]
Tensor encode_image(const BoundParams& params, Tensor images);

struct TextEncoding {
    Tensor word_feats;  // [N * seq_len, text_width]
    Tensor sent_feat;   // [N, text_width]
    int seq_len = 0;    // effective length the batch was processed at
    bool truncated = false;
};

// tokens are row-major [N, padded_len] with per-sample lengths counting
// content + EOS. Computation runs at the batch's longest length; padding
// positions are masked out of attention so they cannot affect real tokens.
TextEncoding encode_text(const BoundParams& params, const std::vector<int>& tokens, const std::vector<int>& lengths);

enum class Modality { Image, Text };

// Linear map into the shared space followed by row normalization.
Tensor project(const BoundParams& params, Tensor backbone_feat, Modality which);

struct SimsiamHeads {
    Tensor z, z_aug;  // projector outputs (not normalized here)
    Tensor p, p_aug;  // predictor outputs
};

SimsiamHeads simsiam_heads(const BoundParams& params, Tensor backbone_feat, Tensor backbone_feat_aug);

// [N * seq_len, text_width] -> per-position vocabulary logits
Tensor mlm_logits(const BoundParams& params, Tensor word_feats);

}  // namespace miniclip
