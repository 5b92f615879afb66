#pragma once

#include <cmath>
#include <vector>

#include "poguise/config.hpp"
#include "poguise/rng.hpp"
#include "poguise/tensor.hpp"
#include "poguise/tokenizer.hpp"

namespace poguise {

// Detached per-layer attention snapshot for the selection module. `attn` is
// the head-averaged post-softmax matrix; q/k are the full projections
// (heads concatenated), captured only when a selection stage needs them.
template <typename T>
struct AttentionRecord {
    int n = 0;
    int dim = 0;
    int layer = -1;
    std::vector<T> attn; // n*n
    std::vector<T> q;    // n*dim, empty unless requested
    std::vector<T> k;    // n*dim, empty unless requested

    T attn_at(int i, int j) const { return attn[static_cast<std::size_t>(i) * n + j]; }
};

template <typename T>
struct BlockWeights {
    TensorPtr<T> ln1_g, ln1_b;
    TensorPtr<T> wq, bq, wk, bk, wv, bv; // [D x D], [D]
    TensorPtr<T> wo, bo;
    TensorPtr<T> ln2_g, ln2_b;
    TensorPtr<T> w1, b1; // [D x 4D], [4D]
    TensorPtr<T> w2, b2; // [4D x D], [D]
};

struct RecordRequest {
    bool attention = false;
    bool qk = false;
};

// Scaled dot-product attention over all tokens jointly, with residual.
template <typename T>
TensorPtr<T> mhsa(const TensorPtr<T>& x, const BlockWeights<T>& w, int heads,
                  const RecordRequest& req = {}, AttentionRecord<T>* rec = nullptr) {
    const int n = x->dims[0], d = x->dims[1];
    if (d % heads != 0) throw ShapeError("token dim not divisible by head count");
    const int dh = d / heads;
    const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(dh));

    auto xq = linear(x, w.wq, w.bq);
    auto xk = linear(x, w.wk, w.bk);
    auto xv = linear(x, w.wv, w.bv);

    if (rec && (req.attention || req.qk)) {
        rec->n = n;
        rec->dim = d;
        if (req.attention) rec->attn.assign(static_cast<std::size_t>(n) * n, T(0));
        if (req.qk) {
            rec->q = xq->data;
            rec->k = xk->data;
        }
    }

    std::vector<TensorPtr<T>> head_outs;
    head_outs.reserve(heads);
    for (int m = 0; m < heads; ++m) {
        auto qh = slice_cols(xq, m * dh, (m + 1) * dh);
        auto kh = slice_cols(xk, m * dh, (m + 1) * dh);
        auto vh = slice_cols(xv, m * dh, (m + 1) * dh);
        auto attn = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt_dh));
        if (rec && req.attention)
            for (std::size_t i = 0; i < attn->data.size(); ++i)
                rec->attn[i] += attn->data[i] / static_cast<T>(heads);
        head_outs.push_back(matmul(attn, vh));
    }
    auto merged = heads == 1 ? head_outs[0] : concat_cols(head_outs);
    return linear(merged, w.wo, w.bo);
}

// Pre-norm block: LN -> attention -> residual -> LN -> MLP -> residual.
template <typename T>
TensorPtr<T> vit_block(const TensorPtr<T>& x, const BlockWeights<T>& w, int heads,
                       const RecordRequest& req = {}, AttentionRecord<T>* rec = nullptr) {
    auto attn_out = mhsa(layernorm(x, w.ln1_g, w.ln1_b), w, heads, req, rec);
    auto x2 = add(x, attn_out);
    auto h = linear(layernorm(x2, w.ln2_g, w.ln2_b), w.w1, w.b1);
    auto mlp_out = linear(gelu(h), w.w2, w.b2);
    return add(x2, mlp_out);
}

template <typename T>
BlockWeights<T> init_block(int dim, int mlp_ratio, Rng& rng) {
    // fan-in scaling keeps attention logits and MLP outputs at unit scale
    // from the first step; a flat stddev leaves attention near-uniform at
    // small widths and the class pathway cannot bootstrap
    auto mat = [&rng](int r, int c) {
        auto t = tensor<T>({r, c}, true);
        const double stddev = 1.0 / std::sqrt(static_cast<double>(r));
        for (auto& v : t->data) v = static_cast<T>(rng.normal(0.0, stddev));
        return t;
    };
    auto zeros = [](int nv) { return tensor<T>({nv}, true); };
    auto ones = [](int nv) {
        auto t = tensor<T>({nv}, true);
        std::fill(t->data.begin(), t->data.end(), T(1));
        return t;
    };
    BlockWeights<T> w;
    w.ln1_g = ones(dim);
    w.ln1_b = zeros(dim);
    w.wq = mat(dim, dim);
    w.bq = zeros(dim);
    w.wk = mat(dim, dim);
    w.bk = zeros(dim);
    w.wv = mat(dim, dim);
    w.bv = zeros(dim);
    w.wo = mat(dim, dim);
    w.bo = zeros(dim);
    w.ln2_g = ones(dim);
    w.ln2_b = zeros(dim);
    w.w1 = mat(dim, mlp_ratio * dim);
    w.b1 = zeros(mlp_ratio * dim);
    w.w2 = mat(mlp_ratio * dim, dim);
    w.b2 = zeros(dim);
    return w;
}

} // namespace poguise
