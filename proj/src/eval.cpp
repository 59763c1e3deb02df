#include "miniclip/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "miniclip/rng.hpp"
#include "miniclip/tensor.hpp"

namespace miniclip {

// ---------------------------------------------------------------------------
// Zero-shot

ZeroShotClassifier build_zeroshot(const ModelParams& params, const Vocab& vocab,
                                  const std::vector<std::string>& class_names,
                                  const std::vector<std::string>& templates) {
    if (class_names.empty()) throw ConfigError("build_zeroshot needs at least one class");
    if (templates.empty()) throw ConfigError("build_zeroshot needs at least one template");
    for (const auto& t : templates)
        if (t.find("{label}") == std::string::npos)
            throw ConfigError("prompt template lacks the {label} placeholder: " + t);

    const int k = static_cast<int>(class_names.size());
    const int t = static_cast<int>(templates.size());
    const int L = params.cfg.context_len;

    std::vector<int> tokens;
    std::vector<int> lengths;
    tokens.reserve(static_cast<size_t>(k) * t * L);
    for (const auto& name : class_names) {
        if (content_ids(name, vocab).empty())
            throw DataError("class name tokenizes to nothing in this vocabulary: \"" + name + "\"");
        for (const auto& tpl : templates) {
            std::string prompt = tpl;
            const auto at = prompt.find("{label}");
            prompt = prompt.substr(0, at) + name + prompt.substr(at + 7);
            Tokenized tok = tokenize(prompt, vocab, L);
            tokens.insert(tokens.end(), tok.ids.begin(), tok.ids.end());
            lengths.push_back(tok.length);
        }
    }

    Tape tape;
    BoundParams bp(tape, params, /*trainable=*/false);
    TextEncoding enc = encode_text(bp, tokens, lengths);
    Tensor rows = project(bp, enc.sent_feat, Modality::Text);  // [k*t, d] unit rows

    const int d = params.cfg.embed_dim;
    ZeroShotClassifier cls;
    cls.class_names = class_names;
    cls.dim = d;
    cls.embeddings.resize(static_cast<size_t>(k) * d);
    const auto vals = rows.value();
    for (int c = 0; c < k; ++c) {
        std::vector<double> mean(d, 0.0);
        for (int j = 0; j < t; ++j)
            for (int e = 0; e < d; ++e) mean[e] += vals[(static_cast<size_t>(c) * t + j) * d + e];
        double sq = 0;
        for (int e = 0; e < d; ++e) {
            mean[e] /= t;
            sq += mean[e] * mean[e];
        }
        const double norm = std::sqrt(sq);
        if (norm < 1e-12) throw DomainError("class embedding collapsed to zero for \"" + class_names[c] + "\"");
        for (int e = 0; e < d; ++e) cls.embeddings[static_cast<size_t>(c) * d + e] = static_cast<float>(mean[e] / norm);
    }
    return cls;
}

std::vector<int> zeroshot_predict(const ZeroShotClassifier& classifier, std::span<const float> image_feats, int n) {
    const int d = classifier.dim;
    const int k = static_cast<int>(classifier.class_names.size());
    if (static_cast<size_t>(n) * d != image_feats.size())
        throw ShapeError("zeroshot_predict feature size mismatch");
    std::vector<int> pred(n);
    for (int i = 0; i < n; ++i) {
        double best = -2.0;
        int arg = 0;
        for (int c = 0; c < k; ++c) {
            double acc = 0;
            for (int e = 0; e < d; ++e)
                acc += static_cast<double>(image_feats[static_cast<size_t>(i) * d + e]) *
                       classifier.embeddings[static_cast<size_t>(c) * d + e];
            if (acc > best) {  // strict: the lowest class id wins ties
                best = acc;
                arg = c;
            }
        }
        pred[i] = arg;
    }
    return pred;
}

double top1_accuracy(const std::vector<int>& predictions, const std::vector<int>& labels) {
    if (predictions.size() != labels.size() || predictions.empty())
        throw ShapeError("top1_accuracy needs matching non-empty prediction/label lists");
    int64_t hits = 0;
    for (size_t i = 0; i < predictions.size(); ++i) hits += predictions[i] == labels[i];
    return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

std::vector<float> extract_image_features(const ModelParams& params, const std::vector<Image>& images,
                                          int batch_size) {
    const int d = params.cfg.embed_dim;
    const int size = params.cfg.image_size;
    const int64_t plane = static_cast<int64_t>(3) * size * size;
    std::vector<float> feats(images.size() * static_cast<size_t>(d));
    for (size_t start = 0; start < images.size(); start += batch_size) {
        const int n = static_cast<int>(std::min<size_t>(batch_size, images.size() - start));
        std::vector<float> pixels(static_cast<size_t>(n) * plane);
        for (int i = 0; i < n; ++i) {
            const Image& img = images[start + i];
            if (img.height != size || img.width != size || img.channels != 3)
                throw ShapeError("evaluation image " + std::to_string(start + i) + " has the wrong shape");
            std::copy(img.data.begin(), img.data.end(), pixels.begin() + static_cast<size_t>(i) * plane);
        }
        Tape tape;
        BoundParams bp(tape, params, false);
        Tensor proj = project(bp, encode_image(bp, tape.constant({n, 3, size, size}, std::move(pixels))),
                              Modality::Image);
        const auto vals = proj.value();
        std::copy(vals.begin(), vals.end(), feats.begin() + start * static_cast<size_t>(d));
    }
    return feats;
}

// ---------------------------------------------------------------------------
// L-BFGS with a strong-Wolfe line search

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0;
    for (size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

double max_norm(const std::vector<double>& v) {
    double m = 0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

struct ProbePoint {
    double alpha = 0;
    double value = 0;
    std::vector<double> x;
    std::vector<double> grad;
    double slope = 0;  // grad . direction
};

// Minimizer of the cubic interpolant through two (alpha, value, slope)
// samples; NaN when the interpolant has none.
double cubic_minimizer(double a, double fa, double da, double b, double fb, double db) {
    const double d1 = da + db - 3.0 * (fa - fb) / (a - b);
    const double disc = d1 * d1 - da * db;
    if (disc < 0) return std::numeric_limits<double>::quiet_NaN();
    const double sign = b >= a ? 1.0 : -1.0;
    const double d2 = sign * std::sqrt(disc);
    const double denom = db - da + 2.0 * d2;
    if (denom == 0) return std::numeric_limits<double>::quiet_NaN();
    return b - (b - a) * (db + d2 - d1) / denom;
}

}  // namespace

LbfgsResult lbfgsminimize_impl(const Objective& f, std::vector<double> x0, const LbfgsOptions& opt) {
    const size_t n = x0.size();
    LbfgsResult res;
    res.x = std::move(x0);

    std::vector<double> grad(n);
    res.fx = f(res.x, grad);
    if (!std::isfinite(res.fx)) throw NumericError("objective is non-finite at the starting point");

    std::vector<std::vector<double>> s_hist, y_hist;
    std::vector<double> rho_hist;

    double fallback_trust = 1e-2;

    for (int iter = 0; iter < opt.max_iter; ++iter) {
        res.iterations = iter;
        if (max_norm(grad) <= opt.grad_tol) {
            res.converged = true;
            return res;
        }

        // two-loop recursion
        std::vector<double> dir = grad;
        const int m = static_cast<int>(s_hist.size());
        std::vector<double> alpha_coef(m, 0.0);
        for (int j = m - 1; j >= 0; --j) {
            alpha_coef[j] = rho_hist[j] * dot(s_hist[j], dir);
            for (size_t i = 0; i < n; ++i) dir[i] -= alpha_coef[j] * y_hist[j][i];
        }
        if (m > 0) {
            const double scale = dot(s_hist[m - 1], y_hist[m - 1]) / dot(y_hist[m - 1], y_hist[m - 1]);
            for (auto& v : dir) v *= scale;
        }
        for (int j = 0; j < m; ++j) {
            const double beta = rho_hist[j] * dot(y_hist[j], dir);
            for (size_t i = 0; i < n; ++i) dir[i] += s_hist[j][i] * (alpha_coef[j] - beta);
        }
        for (auto& v : dir) v = -v;

        double d0 = dot(grad, dir);
        if (d0 >= 0) {  // not a descent direction: restart from steepest descent
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            for (size_t i = 0; i < n; ++i) dir[i] = -grad[i];
            d0 = dot(grad, dir);
        }

        const double f0 = res.fx;
        auto probe = [&](double alpha) {
            ProbePoint p;
            p.alpha = alpha;
            p.x.resize(n);
            for (size_t i = 0; i < n; ++i) p.x[i] = res.x[i] + alpha * dir[i];
            p.grad.resize(n);
            p.value = f(p.x, p.grad);
            if (!std::isfinite(p.value)) throw NumericError("objective became non-finite during line search");
            p.slope = dot(p.grad, dir);
            return p;
        };

        bool accepted = false;
        ProbePoint chosen;

        // strong Wolfe: bracketing phase then bisection zoom
        ProbePoint lo, hi;
        bool bracketed = false;
        double prev_alpha = 0, prev_value = f0;
        ProbePoint prev;
        double alpha = 1.0;
        for (int ls = 0; ls < 12 && !accepted && !bracketed; ++ls) {
            ProbePoint p = probe(alpha);
            if (p.value > f0 + opt.wolfe_c1 * alpha * d0 || (ls > 0 && p.value >= prev_value)) {
                lo = ls > 0 ? prev : ProbePoint{0, f0, res.x, grad, d0};
                hi = p;
                bracketed = true;
                break;
            }
            if (std::abs(p.slope) <= -opt.wolfe_c2 * d0) {
                chosen = std::move(p);
                accepted = true;
                break;
            }
            if (p.slope >= 0) {
                lo = p;
                hi = ls > 0 ? prev : ProbePoint{0, f0, res.x, grad, d0};
                bracketed = true;
                break;
            }
            prev = p;
            prev_alpha = alpha;
            prev_value = p.value;
            alpha *= 2.0;
        }
        (void)prev_alpha;
        if (bracketed && !accepted) {
            for (int z = 0; z < 30 && !accepted; ++z) {
                // safeguarded cubic interpolation, bisection as the fallback
                const double span = hi.alpha - lo.alpha;
                double mid = cubic_minimizer(lo.alpha, lo.value, lo.slope, hi.alpha, hi.value, hi.slope);
                const double guard = 0.1 * std::abs(span);
                const double a_min = std::min(lo.alpha, hi.alpha) + guard;
                const double a_max = std::max(lo.alpha, hi.alpha) - guard;
                if (!std::isfinite(mid) || mid < a_min || mid > a_max) mid = 0.5 * (lo.alpha + hi.alpha);
                ProbePoint p = probe(mid);
                if (p.value > f0 + opt.wolfe_c1 * mid * d0 || p.value >= lo.value) {
                    hi = std::move(p);
                } else {
                    if (std::abs(p.slope) <= -opt.wolfe_c2 * d0) {
                        chosen = std::move(p);
                        accepted = true;
                        break;
                    }
                    if (p.slope * (hi.alpha - lo.alpha) >= 0) hi = lo;
                    lo = std::move(p);
                }
                if (std::abs(hi.alpha - lo.alpha) < 1e-16) break;
            }
            // a sufficient-decrease point is still usable when curvature
            // never quite triggered
            if (!accepted && lo.alpha > 0 && lo.value < f0) {
                chosen = std::move(lo);
                accepted = true;
            }
        }

        if (!accepted) {
            // line search failed: fall back to a damped gradient step
            ++res.line_search_failures;
            ProbePoint p;
            bool ok = false;
            for (int tries = 0; tries < 40; ++tries) {
                std::vector<double> xn(n);
                for (size_t i = 0; i < n; ++i) xn[i] = res.x[i] - fallback_trust * grad[i];
                std::vector<double> gn(n);
                const double fn = f(xn, gn);
                if (std::isfinite(fn) && fn < f0) {
                    p.x = std::move(xn);
                    p.grad = std::move(gn);
                    p.value = fn;
                    ok = true;
                    break;
                }
                fallback_trust *= 0.5;
            }
            if (!ok) return res;  // no progress possible
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            chosen = std::move(p);
        }

        std::vector<double> s(n), y(n);
        for (size_t i = 0; i < n; ++i) {
            s[i] = chosen.x[i] - res.x[i];
            y[i] = chosen.grad[i] - grad[i];
        }
        const double ys = dot(y, s);
        // curvature test is relative: near the optimum s and y shrink together
        if (ys > 1e-10 * std::sqrt(dot(s, s)) * std::sqrt(dot(y, y))) {
            s_hist.push_back(std::move(s));
            y_hist.push_back(std::move(y));
            rho_hist.push_back(1.0 / ys);
            if (static_cast<int>(s_hist.size()) > opt.memory) {
                s_hist.erase(s_hist.begin());
                y_hist.erase(y_hist.begin());
                rho_hist.erase(rho_hist.begin());
            }
        }
        res.x = std::move(chosen.x);
        grad = std::move(chosen.grad);
        res.fx = chosen.value;
    }
    res.iterations = opt.max_iter;
    res.converged = max_norm(grad) <= opt.grad_tol;
    return res;
}

LbfgsResult lbfgs_minimize(const Objective& f, std::vector<double> x0, const LbfgsOptions& opt) {
    return lbfgsminimize_impl(f, std::move(x0), opt);
}

// ---------------------------------------------------------------------------
// Linear probe

std::vector<double> train_logistic_regression(const ProbeDataset& train, double lambda, const LbfgsOptions& opt) {
    if (train.n <= 0 || train.classes < 2) throw ConfigError("probe training set needs samples and >= 2 classes");
    const int d = train.dim, k = train.classes, n = train.n;
    const int dp1 = d + 1;

    Objective obj = [&, lambda](const std::vector<double>& w, std::vector<double>& grad) {
        grad.assign(static_cast<size_t>(k) * dp1, 0.0);
        double loss = 0;
        std::vector<double> logits(k);
        for (int i = 0; i < n; ++i) {
            const float* x = train.features.data() + static_cast<size_t>(i) * d;
            for (int c = 0; c < k; ++c) {
                const double* wc = w.data() + static_cast<size_t>(c) * dp1;
                double acc = wc[d];  // bias
                for (int j = 0; j < d; ++j) acc += wc[j] * x[j];
                logits[c] = acc;
            }
            const double mx = *std::max_element(logits.begin(), logits.end());
            double denom = 0;
            for (int c = 0; c < k; ++c) denom += std::exp(logits[c] - mx);
            const int y = train.labels[i];
            loss += -(logits[y] - mx - std::log(denom));
            for (int c = 0; c < k; ++c) {
                const double p = std::exp(logits[c] - mx) / denom;
                const double coef = p - (c == y ? 1.0 : 0.0);
                double* gc = grad.data() + static_cast<size_t>(c) * dp1;
                for (int j = 0; j < d; ++j) gc[j] += coef * x[j];
                gc[d] += coef;
            }
        }
        loss /= n;
        for (auto& g : grad) g /= n;
        // L2 penalty on everything except the bias column
        double penalty = 0;
        for (int c = 0; c < k; ++c)
            for (int j = 0; j < d; ++j) {
                const double wv = w[static_cast<size_t>(c) * dp1 + j];
                penalty += wv * wv;
                grad[static_cast<size_t>(c) * dp1 + j] += lambda * wv;
            }
        return loss + 0.5 * lambda * penalty;
    };

    std::vector<double> w0(static_cast<size_t>(k) * dp1, 0.0);
    return lbfgs_minimize(obj, std::move(w0), opt).x;
}

double probe_accuracy(const std::vector<double>& weights, const ProbeDataset& data, bool mean_per_class) {
    const int d = data.dim, k = data.classes, dp1 = d + 1;
    if (weights.size() != static_cast<size_t>(k) * dp1) throw ShapeError("probe weights have the wrong size");
    std::vector<int64_t> per_class_hits(k, 0), per_class_total(k, 0);
    int64_t hits = 0;
    for (int i = 0; i < data.n; ++i) {
        const float* x = data.features.data() + static_cast<size_t>(i) * d;
        double best = -1e300;
        int arg = 0;
        for (int c = 0; c < k; ++c) {
            const double* wc = weights.data() + static_cast<size_t>(c) * dp1;
            double acc = wc[d];
            for (int j = 0; j < d; ++j) acc += wc[j] * x[j];
            if (acc > best) {
                best = acc;
                arg = c;
            }
        }
        const int y = data.labels[i];
        per_class_total[y] += 1;
        if (arg == y) {
            ++hits;
            per_class_hits[y] += 1;
        }
    }
    if (!mean_per_class) return static_cast<double>(hits) / data.n;
    double acc = 0;
    int counted = 0;
    for (int c = 0; c < k; ++c) {
        if (per_class_total[c] == 0) continue;
        acc += static_cast<double>(per_class_hits[c]) / static_cast<double>(per_class_total[c]);
        ++counted;
    }
    return counted ? acc / counted : 0.0;
}

double lambda_sweep(const std::function<double(double)>& val_accuracy, std::vector<ProbeEntry>* entries) {
    // keys are log10(lambda) in units of 1/8 decade, spanning [1e-6, 1e6]
    constexpr int kUnitPerDecade = 8;
    constexpr int kMin = -6 * kUnitPerDecade, kMax = 6 * kUnitPerDecade;
    std::map<int, double> evaluated;
    auto eval_key = [&](int key) {
        if (key < kMin || key > kMax) return;
        if (evaluated.count(key)) return;
        evaluated[key] = val_accuracy(std::pow(10.0, static_cast<double>(key) / kUnitPerDecade));
    };
    auto peak_key = [&]() {
        int best_key = kMin;
        double best = -1;
        for (const auto& [key, acc] : evaluated) {
            if (acc > best) {  // strict: ties keep the smaller lambda
                best = acc;
                best_key = key;
            }
        }
        return best_key;
    };

    for (int key = kMin; key <= kMax; key += 2 * kUnitPerDecade) eval_key(key);  // 7 initial points
    for (int spacing = kUnitPerDecade; spacing >= 1; spacing /= 2) {
        const int peak = peak_key();
        eval_key(peak - spacing);
        eval_key(peak + spacing);
    }

    if (entries) {
        entries->clear();
        for (const auto& [key, acc] : evaluated)
            entries->push_back({std::pow(10.0, static_cast<double>(key) / kUnitPerDecade), acc});
    }
    return std::pow(10.0, static_cast<double>(peak_key()) / kUnitPerDecade);
}

ProbeResult linear_probe_protocol(const ProbeDataset& train, const ProbeDataset* val, const ProbeDataset& test,
                                  bool mean_per_class, uint64_t seed) {
    ProbeDataset fit = train, holdout;
    if (val) {
        holdout = *val;
    } else {
        // seeded 20% holdout of the training set
        std::vector<int> order(train.n);
        for (int i = 0; i < train.n; ++i) order[i] = i;
        Rng rng = derive_rng(seed, 0x5e1ec7ULL);
        rng.shuffle(order);
        const int n_val = std::max(1, train.n / 5);
        auto take = [&](int from, int count) {
            ProbeDataset ds;
            ds.dim = train.dim;
            ds.classes = train.classes;
            ds.n = count;
            ds.features.resize(static_cast<size_t>(count) * train.dim);
            ds.labels.resize(count);
            for (int i = 0; i < count; ++i) {
                const int src = order[from + i];
                std::copy_n(train.features.data() + static_cast<size_t>(src) * train.dim, train.dim,
                            ds.features.data() + static_cast<size_t>(i) * train.dim);
                ds.labels[i] = train.labels[src];
            }
            return ds;
        };
        holdout = take(0, n_val);
        fit = take(n_val, train.n - n_val);
    }

    ProbeResult result;
    auto score = [&](double lambda) {
        auto w = train_logistic_regression(fit, lambda);
        return probe_accuracy(w, holdout, /*mean_per_class=*/false);
    };
    result.chosen_lambda = lambda_sweep(score, &result.entries);

    auto final_w = train_logistic_regression(train, result.chosen_lambda);
    result.test_metric = probe_accuracy(final_w, test, mean_per_class);
    return result;
}

}  // namespace miniclip
