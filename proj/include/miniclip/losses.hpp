#pragma once

// Supervision terms: image-text InfoNCE, SimSiam view alignment, masked-token
// cross-entropy, multi-view InfoNCE over 2x2 augmented pairs, nearest-neighbor
// InfoNCE, and their weighted combination.

#include <optional>

#include "miniclip/tensor.hpp"

namespace miniclip {

struct LossWeights {
    double alpha = 0.2;  // self-supervision (image + text)
    double beta = 0.2;   // multi-view supervision
    double gamma = 0.2;  // nearest-neighbor supervision

    double clip_coeff() const { return 1.0 - alpha - beta - gamma; }

    void validate() const {
        auto in01 = [](double v) { return v >= 0.0 && v <= 1.0; };
        if (!in01(alpha) || !in01(beta) || !in01(gamma))
            throw ConfigError("loss weights must lie in [0,1]");
        if (alpha + beta + gamma > 1.0 + 1e-12)
            throw ConfigError("alpha + beta + gamma = " + std::to_string(alpha + beta + gamma) +
                              " exceeds 1; the contrastive coefficient would be negative");
    }
};

struct LossReport {
    double total = 0;
    double l_clip = 0;
    double l_iss = 0;
    double l_tss = 0;
    double l_mvs = 0;
    double l_nns = 0;
    bool mlm_had_no_positions = false;
};

// Symmetric temperature-scaled contrastive loss between matched rows of two
// unit-row matrices: the mean of the image->text and text->image directions.
// `inv_tau` is a scalar tensor holding 1/temperature so a learnable
// temperature can participate in the graph.
template <class S>
TensorT<S> infonce(TensorT<S> zi, TensorT<S> zt, TensorT<S> inv_tau) {
    if (zi.shape().size() != 2 || zi.shape() != zt.shape())
        throw ShapeError("infonce needs matching [N,d] inputs, got " + shape_str(zi.shape()) + " vs " +
                         shape_str(zt.shape()));
    if (zi.shape()[0] < 1) throw ShapeError("infonce needs at least one pair");
    auto logits = mul(cosine_sim_matrix(zi, zt), inv_tau);
    auto img_side = neg(mean(diag(log_softmax_rows(logits))));
    auto txt_side = neg(mean(diag(log_softmax_rows(transpose(logits)))));
    return scale(add(img_side, txt_side), S(0.5));
}

template <class S>
TensorT<S> infonce(TensorT<S> zi, TensorT<S> zt, double tau) {
    if (!(tau > 0.0)) throw ConfigError("temperature must be positive, got " + std::to_string(tau));
    auto inv_tau = zi.tape().scalar(static_cast<S>(1.0 / tau));
    return infonce(zi, zt, inv_tau);
}

template <class S>
TensorT<S> clip_loss(TensorT<S> img_feat, TensorT<S> txt_feat, TensorT<S> inv_tau) {
    return infonce(img_feat, txt_feat, inv_tau);
}

// Negative cosine similarity, averaged over the batch.
template <class S>
TensorT<S> negative_cosine(TensorT<S> a, TensorT<S> b) {
    if (a.shape() != b.shape() || a.shape().size() != 2)
        throw ShapeError("negative_cosine needs matching [N,d] inputs, got " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    const S n = static_cast<S>(a.shape()[0]);
    auto dots = sum(mul(l2_normalize_rows(a), l2_normalize_rows(b)));
    return scale(dots, S(-1) / n);
}

// Predictor outputs chase detached projections of the other view; the
// stop-gradient is what prevents the collapsed solution.
template <class S>
TensorT<S> simsiam_loss(TensorT<S> z, TensorT<S> z_aug, TensorT<S> p, TensorT<S> p_aug) {
    auto first = negative_cosine(p, stop_gradient(z_aug));
    auto second = negative_cosine(p_aug, stop_gradient(z));
    return add(scale(first, S(0.5)), scale(second, S(0.5)));
}

// Mean cross-entropy over the masked positions only. `logits` is the
// [N*L, V] per-position vocabulary matrix; `positions` are flattened row
// indices; `original_ids` the ground-truth tokens. With no masked positions
// anywhere the loss is 0 and `had_no_positions` is set.
template <class S>
TensorT<S> mlm_loss(TensorT<S> logits, const std::vector<int>& positions, const std::vector<int>& original_ids,
                    bool* had_no_positions = nullptr) {
    if (logits.shape().size() != 2)
        throw ShapeError("mlm_loss expects [N*L, V] logits, got " + shape_str(logits.shape()));
    if (positions.size() != original_ids.size())
        throw ShapeError("mlm_loss positions/targets length mismatch");
    if (had_no_positions) *had_no_positions = positions.empty();
    if (positions.empty()) return logits.tape().scalar(S(0));
    auto rows = gather_rows(logits, positions);
    auto logp = log_softmax_rows(rows);
    return neg(mean(pick_per_row(logp, original_ids)));
}

// Contrastive terms for the three extra view pairings; summed, matching how
// the per-pair terms stack up (an averaging switch exists for experiments).
template <class S>
TensorT<S> mvs_loss(TensorT<S> img_feat, TensorT<S> img_feat_aug, TensorT<S> txt_feat, TensorT<S> txt_feat_aug,
                    TensorT<S> inv_tau, bool average = false) {
    auto total = add(add(infonce(img_feat, txt_feat_aug, inv_tau), infonce(img_feat_aug, txt_feat, inv_tau)),
                     infonce(img_feat_aug, txt_feat_aug, inv_tau));
    return average ? scale(total, S(1) / S(3)) : total;
}

// Contrast the augmented image view against queue neighbors. Neighbors are
// constants: no gradient reaches the queue. `img_feat` adds the primary-view
// pairing when both_views is on.
template <class S>
TensorT<S> nns_loss(TensorT<S> img_feat_aug, TensorT<S> nn_txt, TensorT<S> inv_tau, bool both_views = false,
                    std::optional<TensorT<S>> img_feat = std::nullopt) {
    auto frozen_nn = stop_gradient(nn_txt);
    auto loss = infonce(img_feat_aug, frozen_nn, inv_tau);
    if (both_views) {
        if (!img_feat) throw ConfigError("nns_loss with both_views needs the primary image features");
        loss = add(loss, infonce(*img_feat, frozen_nn, inv_tau));
    }
    return loss;
}

// total = (1 - a - b - g) L_clip + a (L_iss + L_tss) + b L_mvs + g L_nns
template <class S>
TensorT<S> declip_total(TensorT<S> l_clip, TensorT<S> l_iss, TensorT<S> l_tss, TensorT<S> l_mvs, TensorT<S> l_nns,
                        const LossWeights& w) {
    w.validate();
    auto total = scale(l_clip, static_cast<S>(w.clip_coeff()));
    total = add(total, scale(add(l_iss, l_tss), static_cast<S>(w.alpha)));
    total = add(total, scale(l_mvs, static_cast<S>(w.beta)));
    total = add(total, scale(l_nns, static_cast<S>(w.gamma)));
    return total;
}

inline double declip_total_value(const LossReport& r, const LossWeights& w) {
    w.validate();
    return w.clip_coeff() * r.l_clip + w.alpha * (r.l_iss + r.l_tss) + w.beta * r.l_mvs + w.gamma * r.l_nns;
}

}  // namespace miniclip
