#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "poguise/data.hpp"
#include "poguise/model.hpp"

namespace poguise {

struct OptimConfig {
    double lr_backbone = 1e-3;
    double lr_heads = 2e-3;
    double lr_min = 0.0;       // cosine floor
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double grad_clip = 1.5;
    int batch_size = 8;
    int epochs = 30;
    int accumulate_batches = 1; // optimizer step every N batches
    // training-time translation augmentation: each sample is shifted by a
    // random offset up to this many pixels (clamped so every keypoint stays
    // in frame), with the heatmap targets shifted to match; 0 disables
    int augment_shift = 8;

    void validate() const;
};

// lr(t) = lr_min + 0.5 (lr_max - lr_min)(1 + cos(pi t / T_max)) over epochs
// 0..T_max; a single-epoch run just uses lr_max.
double cosine_lr(double lr_max, double lr_min, int epoch, int epochs);

// Decoupled-weight-decay Adam over the model's named parameters. Decay only
// touches matrices and filters; the learned class/pose/position tables and
// every 1-D tensor stay undecayed.
class AdamW {
public:
    AdamW(const std::vector<NamedParam<float>>& params, OptimConfig cfg);

    // applies accumulated gradients (already averaged and clipped by the
    // caller), then zeroes them
    void step(double lr_backbone, double lr_heads);

    static bool decays(const NamedParam<float>& p);

private:
    struct Slot {
        NamedParam<float> param;
        bool head, decay;
        std::vector<float> m, v;
    };
    std::vector<Slot> slots_;
    OptimConfig cfg_;
    long t_ = 0;
};

// Scales gradients to the global-norm ball of radius `clip`; returns the
// pre-clip norm.
double clip_gradients(const std::vector<NamedParam<float>>& params, double clip);

struct EpochLog {
    int epoch = 0;
    double lr_backbone = 0, lr_heads = 0;
    double loss_cls = 0, loss_hm = 0, loss_total = 0;
    double train_accuracy = 0;
    double train_mae = 0;
};

struct TrainOptions {
    OptimConfig optim;
    std::uint64_t seed = 1;
    std::ostream* log_sink = nullptr; // per-epoch lines when set
};

struct TrainResult {
    std::vector<EpochLog> log;
};

// Single-threaded, deterministic in (model init, dataset, options). Throws
// NumericError with epoch/sample context if the loss diverges.
TrainResult train_model(Model<float>& model, const DatasetIndex& data, const TrainOptions& opt);

struct EvalReport {
    int total = 0;
    double micro = 0;
    double macro = 0;
    double heatmap_mae = 0;
    std::vector<std::vector<int>> confusion;   // [label][prediction]
    std::vector<double> per_class_accuracy;    // -1 for classes absent in gt
};

// micro = correct/total; macro averages per-class accuracy over the classes
// that actually occur; confusion rows are ground truth.
EvalReport classification_metrics(const std::vector<int>& labels, const std::vector<int>& preds,
                                  int num_classes);

// Averages logits over `views` uniformly spaced temporal windows (equal
// windows collapse to one view when the clip is no longer than the model).
EvalReport evaluate(const Model<float>& model, const DatasetIndex& data, const std::string& split,
                    int views = 3);

// Directory layout: manifest.txt (name <tab> file <tab> dims), meta.json
// (model config), weights/*.ptnsr.
void save_checkpoint(const std::string& dir, const Model<float>& model);
Model<float> load_checkpoint(const std::string& dir);

} // namespace poguise
