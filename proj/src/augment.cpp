#include "miniclip/augment.hpp"

#include <algorithm>
#include <cmath>

namespace miniclip {
namespace {

constexpr float kLumaR = 0.299f, kLumaG = 0.587f, kLumaB = 0.114f;

void clamp01(Image& img) {
    for (auto& v : img.data) v = std::clamp(v, 0.0f, 1.0f);
}

Image crop_and_resize(const Image& img, int y0, int x0, int ch, int cw) {
    Image out{img.channels, img.height, img.width, std::vector<float>(img.data.size())};
    const float sy = static_cast<float>(ch) / img.height;
    const float sx = static_cast<float>(cw) / img.width;
    for (int y = 0; y < img.height; ++y) {
        float fy = (y + 0.5f) * sy - 0.5f;
        fy = std::clamp(fy, 0.0f, static_cast<float>(ch - 1));
        const int iy = static_cast<int>(fy);
        const int iy1 = std::min(iy + 1, ch - 1);
        const float wy = fy - iy;
        for (int x = 0; x < img.width; ++x) {
            float fx = (x + 0.5f) * sx - 0.5f;
            fx = std::clamp(fx, 0.0f, static_cast<float>(cw - 1));
            const int ix = static_cast<int>(fx);
            const int ix1 = std::min(ix + 1, cw - 1);
            const float wx = fx - ix;
            for (int c = 0; c < img.channels; ++c) {
                const float v00 = img.at(c, y0 + iy, x0 + ix);
                const float v01 = img.at(c, y0 + iy, x0 + ix1);
                const float v10 = img.at(c, y0 + iy1, x0 + ix);
                const float v11 = img.at(c, y0 + iy1, x0 + ix1);
                out.at(c, y, x) =
                    (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11);
            }
        }
    }
    return out;
}

Image random_resized_crop(const Image& img, const AugmentConfig& cfg, Rng& rng) {
    const int H = img.height, W = img.width;
    for (int attempt = 0; attempt < 10; ++attempt) {
        const double area = rng.uniform(cfg.crop_scale_lo, cfg.crop_scale_hi) * H * W;
        const double aspect = rng.uniform(3.0 / 4.0, 4.0 / 3.0);
        const int cw = static_cast<int>(std::lround(std::sqrt(area * aspect)));
        const int ch = static_cast<int>(std::lround(std::sqrt(area / aspect)));
        if (cw >= 1 && ch >= 1 && cw <= W && ch <= H) {
            const int x0 = static_cast<int>(rng.below(W - cw + 1));
            const int y0 = static_cast<int>(rng.below(H - ch + 1));
            return crop_and_resize(img, y0, x0, ch, cw);
        }
    }
    return crop_and_resize(img, 0, 0, H, W);  // degenerate window: full-image fallback
}

float luma(const Image& img, int y, int x) {
    return kLumaR * img.at(0, y, x) + kLumaG * img.at(1, y, x) + kLumaB * img.at(2, y, x);
}

void adjust_brightness(Image& img, float f) {
    for (auto& v : img.data) v = std::clamp(v * f, 0.0f, 1.0f);
}

void adjust_contrast(Image& img, float f) {
    double mean = 0;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) mean += luma(img, y, x);
    mean /= static_cast<double>(img.height) * img.width;
    const float m = static_cast<float>(mean);
    for (auto& v : img.data) v = std::clamp(f * v + (1 - f) * m, 0.0f, 1.0f);
}

void adjust_saturation(Image& img, float f) {
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const float g = luma(img, y, x);
            for (int c = 0; c < 3; ++c) img.at(c, y, x) = std::clamp(f * img.at(c, y, x) + (1 - f) * g, 0.0f, 1.0f);
        }
}

void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v) {
    const float mx = std::max({r, g, b});
    const float mn = std::min({r, g, b});
    v = mx;
    const float d = mx - mn;
    s = mx == 0.0f ? 0.0f : d / mx;
    if (d == 0.0f) {
        h = 0.0f;
        return;
    }
    if (mx == r)
        h = (g - b) / d + (g < b ? 6.0f : 0.0f);
    else if (mx == g)
        h = (b - r) / d + 2.0f;
    else
        h = (r - g) / d + 4.0f;
    h /= 6.0f;
}

void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
    const float hh = (h - std::floor(h)) * 6.0f;
    const int i = std::min(5, static_cast<int>(hh));
    const float f = hh - i;
    const float p = v * (1 - s);
    const float q = v * (1 - s * f);
    const float t = v * (1 - s * (1 - f));
    switch (i) {
        case 0: r = v; g = t; b = p; break;
        case 1: r = q; g = v; b = p; break;
        case 2: r = p; g = v; b = t; break;
        case 3: r = p; g = q; b = v; break;
        case 4: r = t; g = p; b = v; break;
        default: r = v; g = p; b = q; break;
    }
}

void adjust_hue(Image& img, float shift) {
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            float h, s, v;
            rgb_to_hsv(img.at(0, y, x), img.at(1, y, x), img.at(2, y, x), h, s, v);
            h += shift;
            h -= std::floor(h);
            float r, g, b;
            hsv_to_rgb(h, s, v, r, g, b);
            img.at(0, y, x) = std::clamp(r, 0.0f, 1.0f);
            img.at(1, y, x) = std::clamp(g, 0.0f, 1.0f);
            img.at(2, y, x) = std::clamp(b, 0.0f, 1.0f);
        }
}

void color_jitter(Image& img, const AugmentConfig& cfg, Rng& rng) {
    const float fb = static_cast<float>(rng.uniform(1 - cfg.jitter_brightness, 1 + cfg.jitter_brightness));
    const float fc = static_cast<float>(rng.uniform(1 - cfg.jitter_contrast, 1 + cfg.jitter_contrast));
    const float fs = static_cast<float>(rng.uniform(1 - cfg.jitter_saturation, 1 + cfg.jitter_saturation));
    const float fh = static_cast<float>(rng.uniform(-cfg.jitter_hue, cfg.jitter_hue));
    int order[4] = {0, 1, 2, 3};
    for (int i = 3; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
    for (int op : order) {
        switch (op) {
            case 0: adjust_brightness(img, fb); break;
            case 1: adjust_contrast(img, fc); break;
            case 2: adjust_saturation(img, fs); break;
            default: adjust_hue(img, fh); break;
        }
    }
}

void to_grayscale(Image& img) {
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const float g = luma(img, y, x);
            for (int c = 0; c < 3; ++c) img.at(c, y, x) = g;
        }
}

int reflect(int i, int n) {
    while (i < 0 || i >= n) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * n - 2 - i;
    }
    return i;
}

void gaussian_blur(Image& img, double sigma) {
    const int radius = static_cast<int>(std::ceil(2.0 * sigma));
    if (radius < 1) return;
    std::vector<float> kernel(2 * radius + 1);
    double total = 0;
    for (int i = -radius; i <= radius; ++i) {
        const double w = std::exp(-0.5 * (i / sigma) * (i / sigma));
        kernel[i + radius] = static_cast<float>(w);
        total += w;
    }
    for (auto& k : kernel) k = static_cast<float>(k / total);

    Image tmp = img;
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                float acc = 0;
                for (int i = -radius; i <= radius; ++i)
                    acc += kernel[i + radius] * img.at(c, y, reflect(x + i, img.width));
                tmp.at(c, y, x) = acc;
            }
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                float acc = 0;
                for (int i = -radius; i <= radius; ++i)
                    acc += kernel[i + radius] * tmp.at(c, reflect(y + i, img.height), x);
                img.at(c, y, x) = acc;
            }
}

void hflip(Image& img) {
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width / 2; ++x) std::swap(img.at(c, y, x), img.at(c, y, img.width - 1 - x));
}

}  // namespace

void AugmentConfig::validate() const {
    auto in01 = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!in01(jitter_prob) || !in01(grayscale_prob) || !in01(hflip_prob) || !in01(mlm_select) || !in01(mlm_mask) ||
        !in01(mlm_random) || !in01(mlm_keep) || !in01(eda_change_fraction))
        throw ConfigError("augmentation probabilities must lie in [0,1]");
    if (std::abs(mlm_mask + mlm_random + mlm_keep - 1.0) > 1e-9)
        throw ConfigError("mlm mask/random/keep probabilities must sum to 1");
    if (!(crop_scale_lo < crop_scale_hi) || crop_scale_hi > 1.0 || crop_scale_lo <= 0.0)
        throw ConfigError("crop scale range must satisfy 0 < lo < hi <= 1");
    if (blur_sigma_lo > blur_sigma_hi || blur_sigma_lo <= 0.0)
        throw ConfigError("blur sigma range must satisfy 0 < lo <= hi");
}

Image augment_image(const Image& image, const AugmentConfig& cfg, Rng& rng) {
    if (image.channels != 3)
        throw ShapeError("augment_image expects 3 channels, got " + std::to_string(image.channels));
    Image out = random_resized_crop(image, cfg, rng);
    if (rng.bernoulli(cfg.jitter_prob)) color_jitter(out, cfg, rng);
    if (rng.bernoulli(cfg.grayscale_prob)) to_grayscale(out);
    gaussian_blur(out, rng.uniform(cfg.blur_sigma_lo, cfg.blur_sigma_hi));
    if (rng.bernoulli(cfg.hflip_prob)) hflip(out);
    clamp01(out);
    return out;
}

std::vector<int> eda_augment(const std::vector<int>& tokens, const AugmentConfig& cfg, const SynonymLexicon& lexicon,
                             Rng& rng, EdaStrategy* chosen) {
    if (tokens.empty()) throw DataError("eda_augment needs at least one token");
    const int n = static_cast<int>(tokens.size());
    const int changes = static_cast<int>(std::ceil(cfg.eda_change_fraction * n));

    auto strategy = static_cast<EdaStrategy>(rng.below(3));
    if (strategy == EdaStrategy::Synonym && lexicon.empty()) {
        // no synonyms available: redraw between the remaining two
        strategy = rng.below(2) == 0 ? EdaStrategy::Swap : EdaStrategy::Delete;
    }
    if (chosen) *chosen = strategy;

    std::vector<int> out = tokens;
    switch (strategy) {
        case EdaStrategy::Synonym: {
            std::vector<int> covered;
            for (int i = 0; i < n; ++i) {
                auto it = lexicon.find(tokens[i]);
                if (it != lexicon.end() && !it->second.empty()) covered.push_back(i);
            }
            rng.shuffle(covered);
            const int k = std::min<int>(changes, static_cast<int>(covered.size()));
            for (int j = 0; j < k; ++j) {
                const auto& syns = lexicon.at(tokens[covered[j]]);
                out[covered[j]] = syns[rng.below(static_cast<int64_t>(syns.size()))];
            }
            break;
        }
        case EdaStrategy::Swap: {
            for (int j = 0; j < changes; ++j) {
                const int a = static_cast<int>(rng.below(n));
                const int b = static_cast<int>(rng.below(n));
                std::swap(out[a], out[b]);
            }
            break;
        }
        case EdaStrategy::Delete: {
            std::vector<int> kept;
            for (int i = 0; i < n; ++i)
                if (!rng.bernoulli(cfg.eda_change_fraction)) kept.push_back(out[i]);
            if (kept.empty()) kept.push_back(out[rng.below(n)]);  // forced survivor
            out = std::move(kept);
            break;
        }
    }
    return out;
}

MlmResult mlm_mask(const std::vector<int>& tokens, const AugmentConfig& cfg, int vocab_size, Rng& rng) {
    if (vocab_size <= kNumSpecialIds)
        throw ConfigError("mlm_mask needs a vocabulary beyond the special ids, got size " +
                          std::to_string(vocab_size));
    MlmResult r;
    r.tokens = tokens;
    for (size_t i = 0; i < tokens.size(); ++i) {
        const int tok = tokens[i];
        if (tok == kPadId || tok == kEosId || tok == kMaskId) continue;
        if (!rng.bernoulli(cfg.mlm_select)) continue;
        r.positions.push_back(static_cast<int>(i));
        r.originals.push_back(tok);
        const double u = rng.uniform();
        if (u < cfg.mlm_mask) {
            r.tokens[i] = kMaskId;
        } else if (u < cfg.mlm_mask + cfg.mlm_random) {
            r.tokens[i] = kNumSpecialIds + static_cast<int>(rng.below(vocab_size - kNumSpecialIds));
        }  // else keep
    }
    return r;
}

}  // namespace miniclip
