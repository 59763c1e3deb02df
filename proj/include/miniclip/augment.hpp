#pragma once

// Stochastic view generation: the image augmentation pipeline, EDA-style
// token augmentation, and masked-language-model corruption. All functions are
// pure in (input, config, rng state); callers derive one rng stream per
// (seed, epoch, sample, view) so materialization order never matters.

#include <unordered_map>
#include <vector>

#include "miniclip/common.hpp"
#include "miniclip/rng.hpp"

namespace miniclip {

// Token id conventions shared across the project.
inline constexpr int kPadId = 0;
inline constexpr int kEosId = 1;
inline constexpr int kMaskId = 2;
inline constexpr int kNumSpecialIds = 3;

struct Image {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<float> data;  // CHW, values in [0,1]

    float at(int c, int y, int x) const { return data[(static_cast<size_t>(c) * height + y) * width + x]; }
    float& at(int c, int y, int x) { return data[(static_cast<size_t>(c) * height + y) * width + x]; }
};

struct AugmentConfig {
    double crop_scale_lo = 0.2;
    double crop_scale_hi = 1.0;
    double jitter_brightness = 0.4;
    double jitter_contrast = 0.4;
    double jitter_saturation = 0.4;
    double jitter_hue = 0.1;
    double jitter_prob = 0.8;
    double grayscale_prob = 0.2;
    double blur_sigma_lo = 0.1;
    double blur_sigma_hi = 2.0;
    double hflip_prob = 0.5;
    double eda_change_fraction = 0.1;
    double mlm_select = 0.15;
    double mlm_mask = 0.8;
    double mlm_random = 0.1;
    double mlm_keep = 0.1;

    void validate() const;
};

// Crop/resize, color jitter, grayscale, gaussian blur, horizontal flip, in
// that order; output has the input's shape and values clamped to [0,1].
Image augment_image(const Image& image, const AugmentConfig& cfg, Rng& rng);

// token id -> synonym token ids (built from the lexicon TSV against a vocab)
using SynonymLexicon = std::unordered_map<int, std::vector<int>>;

enum class EdaStrategy { Synonym = 0, Swap = 1, Delete = 2 };

// Applies exactly one of synonym replacement / random swap / random deletion,
// drawn uniformly. Operates on content tokens (no specials). Deletion always
// leaves at least one survivor. An empty lexicon redraws away from the
// synonym strategy.
std::vector<int> eda_augment(const std::vector<int>& tokens, const AugmentConfig& cfg, const SynonymLexicon& lexicon,
                             Rng& rng, EdaStrategy* chosen = nullptr);

struct MlmResult {
    std::vector<int> tokens;     // corrupted sequence, same length as input
    std::vector<int> positions;  // selected slots
    std::vector<int> originals;  // ground-truth ids at those slots
};

// BERT-style corruption over a padded sequence: each non-special token is
// selected independently; selected tokens become the mask token, a random
// non-special token, or stay unchanged.
MlmResult mlm_mask(const std::vector<int>& tokens, const AugmentConfig& cfg, int vocab_size, Rng& rng);

}  // namespace miniclip
