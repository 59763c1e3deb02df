#include "miniclip/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "miniclip/checkpoint.hpp"

namespace fs = std::filesystem;

namespace miniclip {

OptimState init_optim(const ModelParams& params) {
    OptimState s;
    s.momentum.reserve(params.arrays.size());
    for (const auto& a : params.arrays) s.momentum.emplace_back(a.data.size(), 0.0f);
    return s;
}

double lr_schedule(int64_t step, int64_t steps_per_epoch, const TrainConfig& cfg) {
    const int64_t total = static_cast<int64_t>(cfg.epochs) * steps_per_epoch;
    const int64_t warm = std::llround(cfg.warmup_epochs * static_cast<double>(steps_per_epoch));
    if (step < warm)
        return cfg.lr_base + (cfg.lr_peak - cfg.lr_base) * static_cast<double>(step) / static_cast<double>(warm);
    const int64_t denom = std::max<int64_t>(1, total - 1 - warm);
    const double progress = std::clamp(static_cast<double>(step - warm) / static_cast<double>(denom), 0.0, 1.0);
    return cfg.lr_peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

namespace {

// stream tags for per-sample rng derivation
enum : uint64_t { kStreamImgV1 = 1, kStreamImgV2 = 2, kStreamTxtV1 = 3, kStreamTxtV2 = 4, kStreamMlm = 5 };

std::vector<int> view_tokens(const Dataset& ds, int record, const TrainConfig& cfg, int epoch, uint64_t view_tag,
                             bool apply_eda, int* length_out) {
    const auto& content = ds.tokens[record];
    std::vector<int> view = content;
    if (apply_eda && !content.empty()) {
        Rng rng = derive_rng(cfg.seed, static_cast<uint64_t>(epoch), static_cast<uint64_t>(record), view_tag);
        view = eda_augment(content, cfg.augment, ds.lexicon, rng);
    }
    Tokenized padded = pad_sequence(view, cfg.model.context_len);
    *length_out = padded.length;
    return padded.ids;
}

}  // namespace

PreparedBatch prepare_batch(const Dataset& ds, const std::vector<int>& indices, const TrainConfig& cfg, int epoch) {
    const auto& w = cfg.weights;
    const bool need_ss = w.alpha > 0;
    const bool need_mvs = w.beta > 0;
    const bool need_nns = w.gamma > 0;
    const bool need_img2 = need_ss || need_mvs || need_nns;
    const bool need_txt2 = need_mvs;

    const int n = static_cast<int>(indices.size());
    const int size = cfg.model.image_size;
    const int64_t plane = static_cast<int64_t>(3) * size * size;
    const int L = cfg.model.context_len;

    PreparedBatch b;
    b.n = n;
    b.images_v1.resize(n * plane);
    if (need_img2) b.images_v2.resize(n * plane);
    b.tokens_v1_raw.resize(static_cast<size_t>(n) * L);
    b.lengths_v1.resize(n);
    if (need_txt2) {
        b.tokens_v2.resize(static_cast<size_t>(n) * L);
        b.lengths_v2.resize(n);
    }

    // per-sample masking results, merged in index order afterwards
    std::vector<MlmResult> masks(need_ss ? n : 0);

    parallel_for(n, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            const int record = indices[i];
            {
                Rng rng = derive_rng(cfg.seed, static_cast<uint64_t>(epoch), static_cast<uint64_t>(record),
                                     kStreamImgV1);
                const Image view = augment_image(ds.images[record], cfg.augment, rng);
                std::copy(view.data.begin(), view.data.end(), b.images_v1.begin() + i * plane);
            }
            if (need_img2) {
                Rng rng = derive_rng(cfg.seed, static_cast<uint64_t>(epoch), static_cast<uint64_t>(record),
                                     kStreamImgV2);
                const Image view = augment_image(ds.images[record], cfg.augment, rng);
                std::copy(view.data.begin(), view.data.end(), b.images_v2.begin() + i * plane);
            }
            {
                // text views are an MVS notion; without it view 1 is the raw text
                int len = 0;
                auto ids = view_tokens(ds, record, cfg, epoch, kStreamTxtV1, need_mvs, &len);
                std::copy(ids.begin(), ids.end(), b.tokens_v1_raw.begin() + i * L);
                b.lengths_v1[i] = len;
                if (need_ss) {
                    Rng rng = derive_rng(cfg.seed, static_cast<uint64_t>(epoch), static_cast<uint64_t>(record),
                                         kStreamMlm);
                    masks[i] = mlm_mask(ids, cfg.augment, cfg.model.vocab_size, rng);
                }
            }
            if (need_txt2) {
                int len = 0;
                auto ids = view_tokens(ds, record, cfg, epoch, kStreamTxtV2, true, &len);
                std::copy(ids.begin(), ids.end(), b.tokens_v2.begin() + i * L);
                b.lengths_v2[i] = len;
            }
        }
    });

    if (need_ss) {
        b.tokens_v1_masked.resize(static_cast<size_t>(n) * L);
        for (int i = 0; i < n; ++i) {
            std::copy(masks[i].tokens.begin(), masks[i].tokens.end(), b.tokens_v1_masked.begin() + static_cast<size_t>(i) * L);
            for (size_t m = 0; m < masks[i].positions.size(); ++m) {
                b.mlm_samples.push_back(i);
                b.mlm_slots.push_back(masks[i].positions[m]);
                b.mlm_originals.push_back(masks[i].originals[m]);
            }
        }
    }
    return b;
}

StepOutcome train_step(ModelParams& params, OptimState& optim, FeatureQueue* queue, const PreparedBatch& batch,
                       const TrainConfig& cfg, int64_t steps_per_epoch) {
    const auto& w = cfg.weights;
    const bool need_ss = w.alpha > 0;
    const bool need_mvs = w.beta > 0;
    const bool need_nns = w.gamma > 0;
    const bool need_img2 = need_ss || need_mvs || need_nns;
    const int n = batch.n;
    const int size = cfg.model.image_size;
    const int d = cfg.model.embed_dim;

    StepOutcome out;
    out.tau = current_tau(params);
    out.lr = lr_schedule(optim.step, steps_per_epoch, cfg);

    Tape tape;
    BoundParams bp(tape, params, true);
    Tensor inv_tau = inv_tau_tensor(bp);

    Tensor img1 = tape.constant({n, 3, size, size}, batch.images_v1);
    Tensor feat1 = encode_image(bp, img1);
    Tensor if1 = project(bp, feat1, Modality::Image);

    Tensor feat2, if2;
    if (need_img2) {
        Tensor img2 = tape.constant({n, 3, size, size}, batch.images_v2);
        feat2 = encode_image(bp, img2);
        if2 = project(bp, feat2, Modality::Image);
    }

    // Contrastive text features come from the masked view-1 sequence unless
    // configured otherwise; with masking off the raw sequence is the input.
    const bool masked_contrastive = need_ss && !cfg.unmasked_contrastive;
    const auto& contrastive_tokens = masked_contrastive ? batch.tokens_v1_masked : batch.tokens_v1_raw;
    TextEncoding text1 = encode_text(bp, contrastive_tokens, batch.lengths_v1);
    Tensor tf1 = project(bp, text1.sent_feat, Modality::Text);

    Tensor l_clip = clip_loss(if1, tf1, inv_tau);

    Tensor l_iss = tape.scalar(0.0f);
    Tensor l_tss = tape.scalar(0.0f);
    bool mlm_empty = false;
    if (need_ss) {
        SimsiamHeads heads = simsiam_heads(bp, feat1, feat2);
        l_iss = simsiam_loss(heads.z, heads.z_aug, heads.p, heads.p_aug);

        // word features for the masked prediction; an extra masked forward is
        // only needed when the contrastive path runs unmasked
        TextEncoding masked_enc =
            masked_contrastive ? text1 : encode_text(bp, batch.tokens_v1_masked, batch.lengths_v1);
        std::vector<int> rows(batch.mlm_samples.size());
        for (size_t m = 0; m < rows.size(); ++m)
            rows[m] = batch.mlm_samples[m] * masked_enc.seq_len + batch.mlm_slots[m];
        Tensor logits = mlm_logits(bp, masked_enc.word_feats);
        l_tss = mlm_loss(logits, rows, batch.mlm_originals, &mlm_empty);
    }

    Tensor l_mvs = tape.scalar(0.0f);
    if (need_mvs) {
        TextEncoding text2 = encode_text(bp, batch.tokens_v2, batch.lengths_v2);
        Tensor tf2 = project(bp, text2.sent_feat, Modality::Text);
        l_mvs = mvs_loss(if1, if2, tf1, tf2, inv_tau, cfg.mvs_average);
    }

    Tensor l_nns = tape.scalar(0.0f);
    if (need_nns) {
        const auto tf1_vals = tf1.value();
        std::vector<float> neighbors;
        if (queue == nullptr) throw ConfigError("nearest-neighbor supervision requires a queue");
        auto found = queue->nearest(tf1_vals, n, d);
        if (found) {
            neighbors = std::move(found->neighbors);
        } else {
            out.queue_warmup = true;  // warm-up: fall back to the batch's own text features
            neighbors.assign(tf1_vals.begin(), tf1_vals.end());
        }
        Tensor nn = tape.constant({n, d}, std::move(neighbors));
        l_nns = nns_loss(if2, nn, inv_tau, cfg.nns_both_views, std::optional<Tensor>(if1));
    }

    Tensor total = declip_total(l_clip, l_iss, l_tss, l_mvs, l_nns, w);

    out.report.l_clip = l_clip.item();
    out.report.l_iss = l_iss.item();
    out.report.l_tss = l_tss.item();
    out.report.l_mvs = l_mvs.item();
    out.report.l_nns = l_nns.item();
    out.report.total = total.item();
    out.report.mlm_had_no_positions = mlm_empty;
    if (!std::isfinite(out.report.total)) {
        char buf[256];
        std::snprintf(buf, sizeof(buf),
                      "non-finite training loss: total=%g clip=%g iss=%g tss=%g mvs=%g nns=%g tau=%g",
                      out.report.total, out.report.l_clip, out.report.l_iss, out.report.l_tss, out.report.l_mvs,
                      out.report.l_nns, out.tau);
        throw NumericError(buf);
    }

    tape.backward(total);

    // global-norm gradient clip ahead of the momentum update
    float clip_factor = 1.0f;
    if (cfg.grad_clip > 0) {
        double sq = 0;
        for (size_t a = 0; a < params.arrays.size(); ++a)
            for (const float g : bp.leaves()[a].grad()) sq += static_cast<double>(g) * g;
        const double norm = std::sqrt(sq);
        if (norm > cfg.grad_clip) clip_factor = static_cast<float>(cfg.grad_clip / norm);
    }

    // SGD with momentum; weight decay skips biases, norm gains, logit scale
    const float lr = static_cast<float>(out.lr);
    const float mu = static_cast<float>(cfg.momentum);
    const float wd = static_cast<float>(cfg.weight_decay);
    for (size_t a = 0; a < params.arrays.size(); ++a) {
        auto& arr = params.arrays[a];
        auto grad = bp.leaves()[a].grad();
        auto& mbuf = optim.momentum[a];
        const float decay = arr.decay ? wd : 0.0f;
        for (size_t i = 0; i < arr.data.size(); ++i) {
            const float g = clip_factor * grad[i] + decay * arr.data[i];
            mbuf[i] = mu * mbuf[i] + g;
            arr.data[i] -= lr * mbuf[i];
        }
    }
    clamp_tau(params);

    // FIFO update strictly after the parameter update (pseudocode order)
    if (cfg.use_queue && queue != nullptr) {
        const auto tf1_vals = tf1.value();
        queue->push_batch(tf1_vals, n, d);
    }

    optim.step += 1;
    optim.lr = out.lr;
    return out;
}

void save_checkpoint(const std::string& dir, const ModelParams& params, const OptimState& optim,
                     const FeatureQueue* queue, int epoch_next, const TrainConfig& cfg) {
    CheckpointData data;
    data.arrays = params.arrays;
    for (size_t i = 0; i < params.arrays.size(); ++i) {
        ParamArray m;
        m.name = "optim." + params.arrays[i].name + ".m";
        m.shape = params.arrays[i].shape;
        m.data = optim.momentum[i];
        data.arrays.push_back(std::move(m));
    }
    if (queue) {
        ParamArray storage;
        storage.name = "queue.storage";
        storage.shape = {queue->capacity(), queue->dim()};
        storage.data = queue->storage();
        data.arrays.push_back(std::move(storage));
        ParamArray meta;
        meta.name = "queue.meta";
        meta.shape = {4};
        meta.data = {static_cast<float>(queue->capacity()), static_cast<float>(queue->dim()),
                     static_cast<float>(queue->fill()), static_cast<float>(queue->head())};
        data.arrays.push_back(std::move(meta));
    }
    data.meta["step"] = optim.step;
    data.meta["epoch_next"] = epoch_next;
    data.meta["hyperparameters"] = cfg.to_json();
    write_checkpoint(dir, data);
}

LoadedCheckpoint load_checkpoint(const std::string& dir) {
    CheckpointData data = read_checkpoint(dir);
    LoadedCheckpoint out;
    out.cfg = TrainConfig::from_json(data.meta.at("hyperparameters"));
    out.epoch_next = data.meta.value("epoch_next", 0);

    out.params = init_params(out.cfg.model, out.cfg.seed);
    out.optim = init_optim(out.params);
    out.optim.step = data.meta.value("step", int64_t{0});

    std::vector<float> queue_storage;
    std::vector<float> queue_meta;
    for (auto& a : data.arrays) {
        if (a.name == "queue.storage") {
            queue_storage = std::move(a.data);
        } else if (a.name == "queue.meta") {
            queue_meta = std::move(a.data);
        } else if (a.name.rfind("optim.", 0) == 0 && a.name.size() > 8 &&
                   a.name.compare(a.name.size() - 2, 2, ".m") == 0) {
            const std::string pname = a.name.substr(6, a.name.size() - 8);
            auto it = out.params.index.find(pname);
            if (it == out.params.index.end()) throw DataError("checkpoint momentum for unknown parameter " + pname);
            if (a.data.size() != out.optim.momentum[it->second].size())
                throw DataError("checkpoint momentum size mismatch for " + pname);
            out.optim.momentum[it->second] = std::move(a.data);
        } else {
            auto it = out.params.index.find(a.name);
            if (it == out.params.index.end()) throw DataError("checkpoint holds unknown parameter " + a.name);
            if (a.shape != out.params.arrays[it->second].shape)
                throw DataError("checkpoint shape mismatch for " + a.name);
            out.params.arrays[it->second].data = std::move(a.data);
        }
    }
    if (!queue_meta.empty()) {
        if (queue_meta.size() != 4) throw DataError("corrupt queue.meta in checkpoint");
        out.queue = FeatureQueue::restore(static_cast<int>(queue_meta[0]), static_cast<int>(queue_meta[1]),
                                          static_cast<int>(queue_meta[2]), static_cast<int>(queue_meta[3]),
                                          std::move(queue_storage));
    }
    return out;
}

TrainResult run_training(const TrainConfig& cfg, const Dataset& ds, const std::string& out_dir,
                         const std::string& resume_from) {
    cfg.validate();
    if (cfg.model.vocab_size != ds.vocab.size())
        throw ConfigError("config vocab_size " + std::to_string(cfg.model.vocab_size) +
                          " does not match the dataset vocabulary (" + std::to_string(ds.vocab.size()) + ")");
    fs::create_directories(out_dir);

    ModelParams params = init_params(cfg.model, cfg.seed);
    OptimState optim = init_optim(params);
    std::optional<FeatureQueue> queue;
    if (cfg.use_queue) queue.emplace(cfg.queue_capacity, cfg.model.embed_dim);
    int epoch_start = 0;

    if (!resume_from.empty()) {
        LoadedCheckpoint loaded = load_checkpoint(resume_from);
        params = std::move(loaded.params);
        optim = std::move(loaded.optim);
        queue = std::move(loaded.queue);
        epoch_start = loaded.epoch_next;
    }

    const int n = static_cast<int>(ds.manifest.records.size());
    const auto probe = make_batches(n, cfg.batch_size, 0, cfg.seed);
    const int64_t steps_per_epoch = static_cast<int64_t>(probe.size());
    if (steps_per_epoch == 0)
        throw ConfigError("batch_size " + std::to_string(cfg.batch_size) + " exceeds the dataset (" +
                          std::to_string(n) + " records)");

    ds.vocab.save((fs::path(out_dir) / "vocab.txt").string());
    {
        std::ofstream cj(fs::path(out_dir) / "config.json", std::ios::binary);
        cj << cfg.to_json().dump(2) << '\n';
    }

    const std::string metrics_path = (fs::path(out_dir) / "metrics.csv").string();
    std::ofstream metrics(metrics_path, std::ios::binary);
    if (!metrics) throw DataError("cannot write " + metrics_path);
    metrics << "step,epoch,lr,tau,loss_total,loss_clip,loss_iss,loss_tss,loss_mvs,loss_nns\n";
    auto log_row = [&metrics](int64_t step, int epoch, const StepOutcome& o) {
        char buf[384];
        std::snprintf(buf, sizeof(buf), "%lld,%d,%.9e,%.9e,%.9e,%.9e,%.9e,%.9e,%.9e,%.9e\n",
                      static_cast<long long>(step), epoch, o.lr, o.tau, o.report.total, o.report.l_clip,
                      o.report.l_iss, o.report.l_tss, o.report.l_mvs, o.report.l_nns);
        metrics << buf;
    };

    std::string last_ckpt;
    for (int epoch = epoch_start; epoch < cfg.epochs; ++epoch) {
        const auto batches = make_batches(n, cfg.batch_size, epoch, cfg.seed);
        for (const auto& idx : batches) {
            PreparedBatch batch = prepare_batch(ds, idx, cfg, epoch);
            const int64_t step = optim.step;
            StepOutcome o = train_step(params, optim, queue ? &*queue : nullptr, batch, cfg, steps_per_epoch);
            log_row(step, epoch, o);
        }
        char name[64];
        std::snprintf(name, sizeof(name), "checkpoints/epoch_%04d", epoch);
        last_ckpt = (fs::path(out_dir) / name).string();
        save_checkpoint(last_ckpt, params, optim, queue ? &*queue : nullptr, epoch + 1, cfg);
        // checkpoints carry the vocabulary so they evaluate stand-alone
        fs::copy_file(fs::path(out_dir) / "vocab.txt", fs::path(last_ckpt) / "vocab.txt",
                      fs::copy_options::overwrite_existing);
    }
    metrics.flush();

    TrainResult result;
    result.params = std::move(params);
    result.optim = std::move(optim);
    result.queue = std::move(queue);
    result.metrics_path = metrics_path;
    result.final_checkpoint = last_ckpt;
    return result;
}

}  // namespace miniclip
