#pragma once

// Evaluation: prompt-ensembled zero-shot classification and the frozen-
// feature linear probe (multinomial logistic regression trained by L-BFGS
// with a logarithmic lambda search).

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "miniclip/data.hpp"
#include "miniclip/nets.hpp"

namespace miniclip {

struct ZeroShotClassifier {
    std::vector<std::string> class_names;
    int dim = 0;
    std::vector<float> embeddings;  // [K, dim] unit rows
};

// One embedding per class: every filled template is encoded and normalized,
// the rows are averaged, and the average is re-normalized.
ZeroShotClassifier build_zeroshot(const ModelParams& params, const Vocab& vocab,
                                  const std::vector<std::string>& class_names,
                                  const std::vector<std::string>& templates);

// argmax cosine similarity; ties resolve to the lowest class id.
std::vector<int> zeroshot_predict(const ZeroShotClassifier& classifier, std::span<const float> image_feats, int n);

double top1_accuracy(const std::vector<int>& predictions, const std::vector<int>& labels);

// Projected unit-row image features [n, embed_dim], batched internally.
std::vector<float> extract_image_features(const ModelParams& params, const std::vector<Image>& images,
                                          int batch_size = 256);

// ---------------------------------------------------------------------------
// L-BFGS

// Returns the objective value and fills `grad` (same length as x).
using Objective = std::function<double(const std::vector<double>& x, std::vector<double>& grad)>;

struct LbfgsOptions {
    int max_iter = 1000;
    int memory = 20;
    double grad_tol = 1e-8;  // on the max-norm of the gradient
    double wolfe_c1 = 1e-4;
    double wolfe_c2 = 0.9;
};

struct LbfgsResult {
    std::vector<double> x;
    double fx = 0;
    int iterations = 0;
    bool converged = false;
    int line_search_failures = 0;
};

LbfgsResult lbfgs_minimize(const Objective& f, std::vector<double> x0, const LbfgsOptions& opt = {});

// ---------------------------------------------------------------------------
// Linear probe

struct ProbeDataset {
    std::vector<float> features;  // [n, dim]
    std::vector<int> labels;      // [n], in [0, classes)
    int n = 0;
    int dim = 0;
    int classes = 0;
};

// Multinomial logistic regression with penalty lambda/2 * ||W||^2 (bias
// column unpenalized); returns weights [classes, dim + 1], bias last.
std::vector<double> train_logistic_regression(const ProbeDataset& train, double lambda,
                                              const LbfgsOptions& opt = {});

double probe_accuracy(const std::vector<double>& weights, const ProbeDataset& data, bool mean_per_class = false);

struct ProbeEntry {
    double lambda = 0;
    double val_acc = 0;
};

struct ProbeResult {
    double chosen_lambda = 0;
    std::vector<ProbeEntry> entries;  // every lambda evaluated, ascending
    double test_metric = 0;
};

// Seven-point logarithmic start grid over [1e-6, 1e6], then interval halving
// around the peak down to 8 steps per decade. Ties pick the smaller lambda.
double lambda_sweep(const std::function<double(double)>& val_accuracy, std::vector<ProbeEntry>* entries = nullptr);

// Full protocol: sweep on train/val (a seeded 20% holdout when no val set is
// given), retrain at the chosen lambda on all training data, report on test.
ProbeResult linear_probe_protocol(const ProbeDataset& train, const ProbeDataset* val, const ProbeDataset& test,
                                  bool mean_per_class, uint64_t seed);

}  // namespace miniclip
