#include "poguise/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <map>
#include <thread>

#include <json.hpp>

#include "poguise/config_json.hpp"
#include "poguise/io.hpp"

namespace poguise {

namespace fs = std::filesystem;
using nlohmann::json;

void OptimConfig::validate() const {
    if (lr_backbone <= 0.0 || lr_heads <= 0.0) {
        // zero is allowed: it is the documented fixed-point case
        if (lr_backbone < 0.0 || lr_heads < 0.0) throw ConfigError("learning rates must be >= 0");
    }
    if (lr_min < 0.0) throw ConfigError("lr_min must be >= 0");
    if (weight_decay < 0.0) throw ConfigError("weight decay must be >= 0");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
        throw ConfigError("betas must be in [0,1)");
    if (eps <= 0.0) throw ConfigError("eps must be positive");
    if (grad_clip <= 0.0) throw ConfigError("gradient clip must be positive");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (accumulate_batches < 1) throw ConfigError("accumulate_batches must be >= 1");
    if (augment_shift < 0 || augment_shift > 16)
        throw ConfigError("augment_shift must be in [0, 16]");
}

double cosine_lr(double lr_max, double lr_min, int epoch, int epochs) {
    if (epochs <= 1) return lr_max;
    const int t_max = epochs - 1;
    const int t = std::clamp(epoch, 0, t_max);
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(M_PI * t / t_max));
}

bool AdamW::decays(const NamedParam<float>& p) {
    if (p.param->dims.size() < 2) return false;
    // learned token/position tables act like biases, not mixing weights
    return p.name != "tokenizer.cls" && p.name != "tokenizer.pose" && p.name != "tokenizer.pos";
}

AdamW::AdamW(const std::vector<NamedParam<float>>& params, OptimConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    slots_.reserve(params.size());
    for (const auto& p : params) {
        Slot s;
        s.param = p;
        s.head = Model<float>::is_head_param(p.name);
        s.decay = decays(p);
        s.m.assign(p.param->data.size(), 0.0f);
        s.v.assign(p.param->data.size(), 0.0f);
        slots_.push_back(std::move(s));
    }
}

void AdamW::step(double lr_backbone, double lr_heads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& s : slots_) {
        const double lr = s.head ? lr_heads : lr_backbone;
        const double wd = s.decay ? cfg_.weight_decay : 0.0;
        auto& data = s.param.param->data;
        auto& grad = s.param.param->grad;
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double g = grad[i];
            const double m = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g;
            const double v = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g * g;
            s.m[i] = static_cast<float>(m);
            s.v[i] = static_cast<float>(v);
            const double update = (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
            data[i] = static_cast<float>(data[i] - lr * update - lr * wd * data[i]);
            grad[i] = 0.0f;
        }
    }
}

double clip_gradients(const std::vector<NamedParam<float>>& params, double clip) {
    double sq = 0.0;
    for (const auto& p : params)
        for (float g : p.param->grad) sq += static_cast<double>(g) * g;
    const double norm = std::sqrt(sq);
    if (norm > clip && norm > 0.0) {
        const float s = static_cast<float>(clip / norm);
        for (const auto& p : params)
            for (float& g : p.param->grad) g *= s;
    }
    return norm;
}

namespace {

struct Sample {
    std::vector<float> pixels; // full stored clip, frames x 1 x H x W
    int frames = 0;
    int label = 0;
    const std::vector<KeypointAnnotation>* annotations = nullptr;
};

Sample load_sample(const DatasetIndex& data, const ClipEntry& entry, const ClipSpec& clip) {
    auto t = read_ptnsr<float>(fs::path(data.dir) / entry.file);
    if (t->dims.size() != 4 || t->dims[1] != clip.channels || t->dims[2] != clip.height ||
        t->dims[3] != clip.width)
        throw FormatError("clip " + entry.id + " does not match the model's frame geometry");
    if (t->dims[0] < clip.frames)
        throw FormatError("clip " + entry.id + " is shorter than the model window");
    Sample s;
    s.pixels = std::move(t->data);
    s.frames = t->dims[0];
    s.label = entry.label;
    auto it = data.annotations.find(entry.id);
    if (it == data.annotations.end() || it->second.empty())
        throw FormatError("clip " + entry.id + " has no annotations");
    s.annotations = &it->second;
    return s;
}

std::vector<float> window(const Sample& s, const ClipSpec& clip, int offset) {
    const std::size_t frame = static_cast<std::size_t>(clip.channels) * clip.height * clip.width;
    const auto begin = s.pixels.begin() + static_cast<std::ptrdiff_t>(offset * frame);
    return {begin, begin + static_cast<std::ptrdiff_t>(clip.frames * frame)};
}

// like window(), but every frame is translated by (dx, dy) with zero fill
std::vector<float> shifted_window(const Sample& s, const ClipSpec& clip, int offset, int dx,
                                  int dy) {
    const int H = clip.height, W = clip.width;
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const int planes = clip.frames * clip.channels;
    std::vector<float> out(static_cast<std::size_t>(planes) * plane, 0.0f);
    const float* src = s.pixels.data() + static_cast<std::size_t>(offset) * clip.channels * plane;
    const int y0 = std::max(0, dy), y1 = std::min(H, H + dy);
    const int x0 = std::max(0, dx), x1 = std::min(W, W + dx);
    if (x0 >= x1) return out;
    for (int p = 0; p < planes; ++p)
        for (int y = y0; y < y1; ++y)
            std::copy_n(src + p * plane + static_cast<std::size_t>(y - dy) * W + (x0 - dx),
                        x1 - x0, out.data() + p * plane + static_cast<std::size_t>(y) * W + x0);
    return out;
}

// largest translation in [-limit, limit] that keeps every keypoint of the
// chosen window inside the frame, as inclusive (dx, dy) ranges
struct ShiftRange {
    int lo_x = 0, hi_x = 0, lo_y = 0, hi_y = 0;
};

ShiftRange shift_range(const std::vector<KeypointAnnotation>& anns, int first_frame,
                       int last_frame, int h, int w, int limit) {
    double min_x = w - 1.0, max_x = 0.0, min_y = h - 1.0, max_y = 0.0;
    for (const auto& a : anns) {
        if (a.frame < first_frame || a.frame >= last_frame) continue;
        for (const auto& kp : a.kps) {
            min_x = std::min(min_x, kp.x);
            max_x = std::max(max_x, kp.x);
            min_y = std::min(min_y, kp.y);
            max_y = std::max(max_y, kp.y);
        }
    }
    ShiftRange r;
    r.lo_x = std::min(0, std::max(-limit, -static_cast<int>(std::floor(min_x))));
    r.hi_x = std::max(0, std::min(limit, w - 1 - static_cast<int>(std::ceil(max_x))));
    r.lo_y = std::min(0, std::max(-limit, -static_cast<int>(std::floor(min_y))));
    r.hi_y = std::max(0, std::min(limit, h - 1 - static_cast<int>(std::ceil(max_y))));
    return r;
}

int argmax_logit(const TensorPtr<float>& logits) {
    int arg = 0;
    for (int j = 1; j < logits->dims[1]; ++j)
        if (logits->data[j] > logits->data[arg]) arg = j;
    return arg;
}

HeatmapSet<float> as_heatmap_set(const TensorPtr<float>& maps) {
    HeatmapSet<float> set;
    set.landmarks = maps->dims[0];
    set.gh = maps->dims[1];
    set.gw = maps->dims[2];
    set.maps = maps->data;
    set.valid.assign(set.landmarks, 1);
    return set;
}

} // namespace

TrainResult train_model(Model<float>& model, const DatasetIndex& data, const TrainOptions& opt) {
    opt.optim.validate();
    const auto& clip = model.cfg.clip;
    const int gh = model.cfg.grid_h(), gw = model.cfg.grid_w();
    auto params = model.parameters();
    AdamW optimizer(params, opt.optim);

    auto train_idx = data.split_indices("train");
    if (train_idx.empty()) throw ConfigError("dataset has no train split");

    // everything fits in memory at desk scale; load once
    std::vector<Sample> samples;
    samples.reserve(train_idx.size());
    for (auto i : train_idx) samples.push_back(load_sample(data, data.clips[i], clip));

    const int step_every = opt.optim.batch_size * opt.optim.accumulate_batches;
    TrainResult result;

    for (int epoch = 0; epoch < opt.optim.epochs; ++epoch) {
        const double lr_b = cosine_lr(opt.optim.lr_backbone, opt.optim.lr_min, epoch,
                                      opt.optim.epochs);
        const double lr_h = cosine_lr(opt.optim.lr_heads, opt.optim.lr_min, epoch,
                                      opt.optim.epochs);

        Rng order_rng = derive_rng(opt.seed, 0xE000u + static_cast<std::uint64_t>(epoch));
        std::vector<std::size_t> order(samples.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[order_rng.uniform_int(0, static_cast<int>(i) - 1)]);

        EpochLog log;
        log.epoch = epoch;
        log.lr_backbone = lr_b;
        log.lr_heads = lr_h;
        int correct = 0, pending = 0;
        double mae_sum = 0;

        for (std::size_t k = 0; k < order.size(); ++k) {
            const Sample& s = samples[order[k]];
            const int slack = s.frames - clip.frames;
            const int offset = slack > 0 ? order_rng.uniform_int(0, slack) : 0;
            int dx = 0, dy = 0;
            if (opt.optim.augment_shift > 0) {
                const auto r = shift_range(*s.annotations, offset, offset + clip.frames,
                                           clip.height, clip.width, opt.optim.augment_shift);
                dx = order_rng.uniform_int(r.lo_x, r.hi_x);
                dy = order_rng.uniform_int(r.lo_y, r.hi_y);
            }
            std::vector<KeypointAnnotation> shifted_anns;
            const std::vector<KeypointAnnotation>* anns = s.annotations;
            if (dx != 0 || dy != 0) {
                shifted_anns = *s.annotations;
                for (auto& a : shifted_anns)
                    for (auto& kp : a.kps) {
                        kp.x += dx;
                        kp.y += dy;
                    }
                anns = &shifted_anns;
            }
            try {
                auto res = model.forward(dx == 0 && dy == 0
                                             ? window(s, clip, offset)
                                             : shifted_window(s, clip, offset, dx, dy));
                auto l_cls = loss_cls(res.logits, s.label,
                                      model.cfg.heads.label_smoothing);
                auto l_hm = scalar_tensor<float>(0.0f);
                if (res.heatmaps) {
                    auto gt = target_heatmaps<float>(*anns, offset,
                                                     offset + clip.frames, gh, gw, clip.height,
                                                     clip.width);
                    l_hm = loss_hm(res.heatmaps, gt, model.cfg.heads.mse_scale);
                    NoGradGuard off;
                    mae_sum += heatmap_mae(as_heatmap_set(res.heatmaps), gt);
                }
                auto loss = total_loss(l_cls, l_hm, model.cfg.heads);
                backward(loss);

                log.loss_cls += l_cls->data[0];
                log.loss_hm += l_hm->data[0];
                log.loss_total += loss->data[0];
                if (argmax_logit(res.logits) == s.label) ++correct;
            } catch (const NumericError& e) {
                throw NumericError("training diverged at epoch " + std::to_string(epoch) +
                                   ", sample " + std::to_string(k) + ": " + e.what());
            }

            ++pending;
            if (pending == step_every || k + 1 == order.size()) {
                const float inv = 1.0f / static_cast<float>(pending);
                for (const auto& p : params)
                    for (float& g : p.param->grad) g *= inv;
                clip_gradients(params, opt.optim.grad_clip);
                optimizer.step(lr_b, lr_h);
                pending = 0;
            }
        }

        const double n = static_cast<double>(order.size());
        log.loss_cls /= n;
        log.loss_hm /= n;
        log.loss_total /= n;
        log.train_accuracy = correct / n;
        log.train_mae = mae_sum / n;
        result.log.push_back(log);
        if (opt.log_sink)
            *opt.log_sink << "epoch " << epoch << "  lr " << lr_b << "/" << lr_h << "  loss "
                          << log.loss_total << " (cls " << log.loss_cls << ", hm " << log.loss_hm
                          << ")  acc " << log.train_accuracy << "  mae " << log.train_mae << "\n";
    }
    return result;
}

EvalReport classification_metrics(const std::vector<int>& labels, const std::vector<int>& preds,
                                  int num_classes) {
    if (labels.size() != preds.size()) throw ShapeError("label/prediction count mismatch");
    EvalReport rep;
    rep.total = static_cast<int>(labels.size());
    rep.confusion.assign(num_classes, std::vector<int>(num_classes, 0));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= num_classes || preds[i] < 0 || preds[i] >= num_classes)
            throw ConfigError("class index out of range in metrics");
        ++rep.confusion[labels[i]][preds[i]];
    }
    int correct = 0;
    double macro_sum = 0;
    int present = 0;
    rep.per_class_accuracy.assign(num_classes, -1.0);
    for (int c = 0; c < num_classes; ++c) {
        int row = 0;
        for (int p = 0; p < num_classes; ++p) row += rep.confusion[c][p];
        correct += rep.confusion[c][c];
        if (row > 0) {
            rep.per_class_accuracy[c] = static_cast<double>(rep.confusion[c][c]) / row;
            macro_sum += rep.per_class_accuracy[c];
            ++present;
        }
    }
    rep.micro = rep.total > 0 ? static_cast<double>(correct) / rep.total : 0.0;
    rep.macro = present > 0 ? macro_sum / present : 0.0;
    return rep;
}

EvalReport evaluate(const Model<float>& model, const DatasetIndex& data, const std::string& split,
                    int views) {
    if (views < 1) throw ConfigError("need at least one temporal view");
    const auto idx = data.split_indices(split);
    if (idx.empty()) throw ConfigError("dataset has no '" + split + "' split");
    const auto& clip = model.cfg.clip;
    const int gh = model.cfg.grid_h(), gw = model.cfg.grid_w();

    std::vector<int> labels(idx.size()), preds(idx.size());
    std::vector<double> maes(idx.size());

    // clips are independent: a deterministic parallel map
    const unsigned workers =
        std::max(1u, std::min<unsigned>(std::thread::hardware_concurrency(),
                                        static_cast<unsigned>(idx.size())));
    auto run_chunk = [&](std::size_t begin, std::size_t stride) {
        NoGradGuard off;
        for (std::size_t k = begin; k < idx.size(); k += stride) {
            const auto& entry = data.clips[idx[k]];
            Sample s = load_sample(data, entry, clip);
            const int slack = s.frames - clip.frames;

            std::vector<double> logits(model.cfg.heads.num_classes, 0.0);
            double mae = 0;
            for (int v = 0; v < views; ++v) {
                const int offset =
                    views == 1 ? slack / 2
                               : static_cast<int>(std::lround(static_cast<double>(slack) * v /
                                                              (views - 1)));
                auto res = model.forward(window(s, clip, offset));
                for (int j = 0; j < model.cfg.heads.num_classes; ++j)
                    logits[j] += res.logits->data[j];
                if (res.heatmaps) {
                    auto gt = target_heatmaps<float>(*s.annotations, offset, offset + clip.frames,
                                                     gh, gw, clip.height, clip.width);
                    mae += heatmap_mae(as_heatmap_set(res.heatmaps), gt);
                }
            }
            labels[k] = s.label;
            preds[k] = static_cast<int>(std::max_element(logits.begin(), logits.end()) -
                                        logits.begin());
            maes[k] = mae / views;
        }
    };
    if (workers == 1) {
        run_chunk(0, 1);
    } else {
        std::vector<std::future<void>> futs;
        for (unsigned w = 0; w < workers; ++w)
            futs.push_back(std::async(std::launch::async, run_chunk, w, workers));
        for (auto& f : futs) f.get();
    }

    auto rep = classification_metrics(labels, preds, model.cfg.heads.num_classes);
    double mae_sum = 0;
    for (double m : maes) mae_sum += m;
    rep.heatmap_mae = mae_sum / static_cast<double>(maes.size());
    return rep;
}

namespace {

std::string weight_filename(const std::string& name) {
    std::string f = name;
    std::replace(f.begin(), f.end(), '.', '_');
    return "weights/" + f + ".ptnsr";
}

std::string dims_string(const std::vector<int>& dims) {
    std::string s;
    for (std::size_t i = 0; i < dims.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(dims[i]);
    }
    return s;
}

} // namespace

void save_checkpoint(const std::string& dir, const Model<float>& model) {
    fs::create_directories(fs::path(dir) / "weights");
    std::ofstream manifest(fs::path(dir) / "manifest.txt");
    if (!manifest) throw FormatError("cannot write checkpoint manifest in " + dir);
    for (const auto& p : model.parameters()) {
        const auto file = weight_filename(p.name);
        write_ptnsr(fs::path(dir) / file, *p.param);
        manifest << p.name << "\t" << file << "\t" << dims_string(p.param->dims) << "\n";
    }
    if (!manifest) throw FormatError("short write of checkpoint manifest in " + dir);

    json meta;
    meta["model"] = model.cfg;
    std::ofstream mf(fs::path(dir) / "meta.json");
    mf << meta.dump(2) << "\n";
    if (!mf) throw FormatError("cannot write checkpoint meta in " + dir);
}

Model<float> load_checkpoint(const std::string& dir) {
    std::ifstream mf(fs::path(dir) / "meta.json");
    if (!mf) throw FormatError("no meta.json in checkpoint " + dir);
    json meta;
    try {
        meta = json::parse(mf);
    } catch (const json::exception& e) {
        throw FormatError("checkpoint meta parse failure: " + std::string(e.what()));
    }
    ModelConfig cfg;
    meta.at("model").get_to(cfg);
    auto model = Model<float>::init(cfg, 0);

    std::ifstream manifest(fs::path(dir) / "manifest.txt");
    if (!manifest) throw FormatError("no manifest.txt in checkpoint " + dir);
    std::map<std::string, std::string> files;
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        const auto t1 = line.find('\t');
        const auto t2 = line.find('\t', t1 + 1);
        if (t1 == std::string::npos || t2 == std::string::npos)
            throw FormatError("malformed checkpoint manifest line: " + line);
        files[line.substr(0, t1)] = line.substr(t1 + 1, t2 - t1 - 1);
    }

    for (const auto& p : model.parameters()) {
        auto it = files.find(p.name);
        if (it == files.end()) throw FormatError("checkpoint is missing " + p.name);
        auto t = read_ptnsr<float>(fs::path(dir) / it->second);
        if (t->dims != p.param->dims)
            throw FormatError("checkpoint shape mismatch for " + p.name + ": file has " +
                              dims_string(t->dims) + ", model wants " +
                              dims_string(p.param->dims));
        p.param->data = std::move(t->data);
        files.erase(it);
    }
    if (!files.empty()) throw FormatError("checkpoint has unknown entry " + files.begin()->first);
    return model;
}

} // namespace poguise
