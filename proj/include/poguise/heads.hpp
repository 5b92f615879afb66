#pragma once

#include <iostream>

#include "poguise/config.hpp"
#include "poguise/heatmap.hpp"
#include "poguise/rng.hpp"
#include "poguise/tensor.hpp"

namespace poguise {

// Classification head: D -> D with GELU, then linear to the classes.
template <typename T>
struct ClassifierWeights {
    TensorPtr<T> w1, b1; // [D x D], [D]
    TensorPtr<T> w2, b2; // [D x C], [C]
};

template <typename T>
TensorPtr<T> classify(const TensorPtr<T>& class_token, const ClassifierWeights<T>& w) {
    if (!class_token->is_matrix() || class_token->dims[0] != 1)
        throw ShapeError("classify expects the 1 x D class token");
    return linear(gelu(linear(class_token, w.w1, w.b1)), w.w2, w.b2); // [1 x C]
}

// Heatmap decoder: pose tokens on the h x w grid, two stride-2
// deconvolutions (D -> Dd -> Dd, kernel 4, pad 1), then a 1x1 projection to
// one channel per landmark. No activations between layers.
template <typename T>
struct DecoderWeights {
    TensorPtr<T> deconv1_w; // [D x Dd x 4 x 4]
    TensorPtr<T> deconv1_b; // [Dd]
    TensorPtr<T> deconv2_w; // [Dd x Dd x 4 x 4]
    TensorPtr<T> deconv2_b; // [Dd]
    TensorPtr<T> proj_w;    // [Dd x L]
    TensorPtr<T> proj_b;    // [L]
};

template <typename T>
TensorPtr<T> decode_heatmaps(const TensorPtr<T>& pose_tokens, int h, int w,
                             const DecoderWeights<T>& weights) {
    if (!pose_tokens->is_matrix() || pose_tokens->dims[0] != h * w)
        throw ShapeError("pose token count is not the h*w grid");
    const int d = pose_tokens->dims[1];
    auto img = reshape(transpose(pose_tokens), {d, h, w}); // row-major grid
    auto up1 = add_channel_bias(conv_transpose2d(img, weights.deconv1_w, 2, 1), weights.deconv1_b);
    auto up2 = add_channel_bias(conv_transpose2d(up1, weights.deconv2_w, 2, 1), weights.deconv2_b);
    return conv2d_1x1(up2, weights.proj_w, weights.proj_b); // [L x 4h x 4w]
}

template <typename T>
TensorPtr<T> loss_cls(const TensorPtr<T>& logits, int target, double smoothing) {
    auto flat = logits->dims.size() == 1 ? logits : reshape(logits, {logits->size()});
    return cross_entropy_smoothed(flat, target, static_cast<T>(smoothing));
}

// ln(1 + s * MSE) with the MSE taken over the ground truth's valid channels.
// With nothing valid the loss is zero (warned once per call site semantics).
template <typename T>
TensorPtr<T> loss_hm(const TensorPtr<T>& pred_maps, const HeatmapSet<T>& gt, double s) {
    const int L = gt.landmarks;
    const int cells = gt.gh * gt.gw;
    if (pred_maps->size() != L * cells) throw ShapeError("prediction does not match the gt grid");
    std::vector<int> valid_rows;
    for (int l = 0; l < L; ++l)
        if (gt.valid[l]) valid_rows.push_back(l);
    if (valid_rows.empty()) {
        std::cerr << "warning: heatmap loss skipped, no valid landmarks\n";
        return scalar_tensor<T>(T(0));
    }
    auto pred_rows = gather_rows(reshape(pred_maps, {L, cells}), valid_rows);
    auto gt_rows = tensor<T>({static_cast<int>(valid_rows.size()), cells});
    for (std::size_t i = 0; i < valid_rows.size(); ++i)
        std::copy(gt.map(valid_rows[i]), gt.map(valid_rows[i]) + cells,
                  gt_rows->data.begin() + i * cells);
    auto diff = sub(pred_rows, gt_rows);
    return log1p_scale(mean_all(mul(diff, diff)), static_cast<T>(s));
}

template <typename T>
TensorPtr<T> total_loss(const TensorPtr<T>& cls, const TensorPtr<T>& hm, const HeadConfig& cfg) {
    return add(scale(cls, static_cast<T>(cfg.w_cls)), scale(hm, static_cast<T>(cfg.w_hm)));
}

template <typename T>
ClassifierWeights<T> init_classifier(int dim, int classes, Rng& rng) {
    auto mat = [&rng](int r, int c) { // fan-in scaled, like the blocks
        auto t = tensor<T>({r, c}, true);
        const double stddev = 1.0 / std::sqrt(static_cast<double>(r));
        for (auto& v : t->data) v = static_cast<T>(rng.normal(0.0, stddev));
        return t;
    };
    ClassifierWeights<T> w;
    w.w1 = mat(dim, dim);
    w.b1 = tensor<T>({dim}, true);
    w.w2 = mat(dim, classes);
    w.b2 = tensor<T>({classes}, true);
    return w;
}

template <typename T>
DecoderWeights<T> init_decoder(int dim, int decoder_dim, int landmarks, Rng& rng) {
    auto filled = [&rng](std::vector<int> dims) {
        // fan-in = input channels x kernel area for the deconvolutions,
        // input width for the 1x1 projection
        double fan_in = dims[0];
        for (std::size_t i = 2; i < dims.size(); ++i) fan_in *= dims[i];
        const double stddev = 1.0 / std::sqrt(fan_in);
        auto t = tensor<T>(std::move(dims), true);
        for (auto& v : t->data) v = static_cast<T>(rng.normal(0.0, stddev));
        return t;
    };
    DecoderWeights<T> w;
    w.deconv1_w = filled({dim, decoder_dim, 4, 4});
    w.deconv1_b = tensor<T>({decoder_dim}, true);
    w.deconv2_w = filled({decoder_dim, decoder_dim, 4, 4});
    w.deconv2_b = tensor<T>({decoder_dim}, true);
    w.proj_w = filled({decoder_dim, landmarks});
    w.proj_b = tensor<T>({landmarks}, true);
    return w;
}

} // namespace poguise
