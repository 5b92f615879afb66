#pragma once

#include <vector>

#include "poguise/config.hpp"
#include "poguise/rng.hpp"
#include "poguise/tensor.hpp"

namespace poguise {

// Where a visual token came from: temporal cube index and spatial cell.
// `merged` marks tokens produced by a merge (they carry the source's origin).
struct VisualOrigin {
    int tcube = 0;
    int row = 0;
    int col = 0;
    bool merged = false;
};

inline bool operator==(const VisualOrigin& a, const VisualOrigin& b) {
    return a.tcube == b.tcube && a.row == b.row && a.col == b.col && a.merged == b.merged;
}

// Token sequence in the fixed order (class, pose, visual). Selection rewrites
// the visual tail; class and pose tokens are never touched.
template <typename T>
struct TokenBatch {
    TensorPtr<T> tokens; // [(1 + n_p + n_vis_alive) x D]
    int n_p = 0;
    int grid_t = 0, grid_h = 0, grid_w = 0; // original visual token grid
    std::vector<VisualOrigin> origins; // one per alive visual token, current order
    std::vector<std::uint8_t> alive;   // over the original grid_t*grid_h*grid_w tokens

    int n_vis() const { return static_cast<int>(origins.size()); }
    int rows() const { return 1 + n_p + n_vis(); }
    int vis_offset() const { return 1 + n_p; }
    int origin_flat(const VisualOrigin& o) const {
        return (o.tcube * grid_h + o.row) * grid_w + o.col;
    }
};

template <typename T>
struct TokenizerWeights {
    TensorPtr<T> proj_w; // [cube_volume x D]
    TensorPtr<T> proj_b; // [D]
    TensorPtr<T> cls;    // [1 x D]
    TensorPtr<T> pose;   // [n_p x D], null when pose tokens are disabled
    TensorPtr<T> pos;    // [n_vis x D], visual positional table
};

// Rearranges clip pixels into one row per cube, (t, h, w) row-major over
// cubes, (dt, channel, dy, dx) row-major inside a cube. Pure data movement.
template <typename T>
std::vector<T> cube_gather(const std::vector<T>& clip, const ClipSpec& spec) {
    spec.validate();
    if (clip.size() != static_cast<std::size_t>(spec.frames) * spec.channels * spec.height * spec.width)
        throw ShapeError("clip buffer does not match the clip spec");
    const int t = spec.t(), h = spec.h(), w = spec.w();
    const int ct = spec.cube_t, cs = spec.cube_hw, C = spec.channels;
    std::vector<T> out(static_cast<std::size_t>(spec.n_vis()) * spec.cube_volume());
    std::size_t o = 0;
    for (int ti = 0; ti < t; ++ti)
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c)
                for (int dt = 0; dt < ct; ++dt)
                    for (int ch = 0; ch < C; ++ch)
                        for (int dy = 0; dy < cs; ++dy)
                            for (int dx = 0; dx < cs; ++dx) {
                                const int frame = ti * ct + dt;
                                const int y = r * cs + dy, x = c * cs + dx;
                                out[o++] = clip[((static_cast<std::size_t>(frame) * C + ch) *
                                                     spec.height +
                                                 y) *
                                                    spec.width +
                                                x];
                            }
    return out;
}

// Inverse of cube_gather; the pair being mutually inverse is the
// tokenization-bijection property.
template <typename T>
std::vector<T> cube_scatter(const std::vector<T>& cubes, const ClipSpec& spec) {
    spec.validate();
    if (cubes.size() != static_cast<std::size_t>(spec.n_vis()) * spec.cube_volume())
        throw ShapeError("cube buffer does not match the clip spec");
    const int t = spec.t(), h = spec.h(), w = spec.w();
    const int ct = spec.cube_t, cs = spec.cube_hw, C = spec.channels;
    std::vector<T> clip(static_cast<std::size_t>(spec.frames) * C * spec.height * spec.width);
    std::size_t o = 0;
    for (int ti = 0; ti < t; ++ti)
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c)
                for (int dt = 0; dt < ct; ++dt)
                    for (int ch = 0; ch < C; ++ch)
                        for (int dy = 0; dy < cs; ++dy)
                            for (int dx = 0; dx < cs; ++dx) {
                                const int frame = ti * ct + dt;
                                const int y = r * cs + dy, x = c * cs + dx;
                                clip[((static_cast<std::size_t>(frame) * C + ch) * spec.height + y) *
                                         spec.width +
                                     x] = cubes[o++];
                            }
    return clip;
}

inline std::vector<VisualOrigin> initial_origins(const ClipSpec& spec) {
    std::vector<VisualOrigin> origins;
    origins.reserve(spec.n_vis());
    for (int ti = 0; ti < spec.t(); ++ti)
        for (int r = 0; r < spec.h(); ++r)
            for (int c = 0; c < spec.w(); ++c) origins.push_back({ti, r, c, false});
    return origins;
}

// Cube embedding alone: flatten cubes and project to D. The clip enters as a
// constant (no gradient to pixels); gradients flow to the projection.
template <typename T>
TensorPtr<T> cube_embed(const std::vector<T>& clip, const ClipSpec& spec,
                        const TensorPtr<T>& proj_w, const TensorPtr<T>& proj_b) {
    auto cubes = tensor<T>({spec.n_vis(), spec.cube_volume()}, cube_gather(clip, spec));
    return linear(cubes, proj_w, proj_b);
}

// Adds row i of the table to visual token i.
template <typename T>
TensorPtr<T> positional_embed(const TensorPtr<T>& vis, const TensorPtr<T>& table) {
    if (vis->dims != table->dims)
        throw ShapeError("positional table must match the visual token matrix");
    return add(vis, table);
}

// Full tokenization: cube embed, positional embed, prepend class (and pose)
// tokens.
template <typename T>
TokenBatch<T> tokenize(const std::vector<T>& clip, const ClipSpec& spec,
                       const TokenizerWeights<T>& w, bool pose_tokens) {
    auto vis = positional_embed(cube_embed(clip, spec, w.proj_w, w.proj_b), w.pos);
    TokenBatch<T> batch;
    if (pose_tokens) {
        if (!w.pose) throw ConfigError("pose tokens requested but no pose table initialized");
        batch.tokens = concat_rows<T>({w.cls, w.pose, vis});
        batch.n_p = w.pose->dims[0];
    } else {
        batch.tokens = concat_rows<T>({w.cls, vis});
        batch.n_p = 0;
    }
    batch.grid_t = spec.t();
    batch.grid_h = spec.h();
    batch.grid_w = spec.w();
    batch.origins = initial_origins(spec);
    batch.alive.assign(spec.n_vis(), 1);
    return batch;
}

template <typename T>
TokenizerWeights<T> init_tokenizer(const ModelConfig& cfg, Rng& rng) {
    const int d = cfg.encoder.dim;
    auto normal_init = [&rng](TensorPtr<T>& t, double stddev) {
        for (auto& v : t->data) v = static_cast<T>(rng.normal(0.0, stddev));
    };
    TokenizerWeights<T> w;
    w.proj_w = tensor<T>({cfg.clip.cube_volume(), d}, true);
    w.proj_b = tensor<T>({d}, true);
    w.cls = tensor<T>({1, d}, true);
    w.pos = tensor<T>({cfg.clip.n_vis(), d}, true);
    // the projection is fan-in scaled like every other linear map; the
    // additive token tables stay small so content dominates position early
    normal_init(w.proj_w, 1.0 / std::sqrt(static_cast<double>(cfg.clip.cube_volume())));
    normal_init(w.cls, 0.02);
    normal_init(w.pos, 0.02);
    if (cfg.pose_tokens) {
        w.pose = tensor<T>({cfg.clip.n_p(), d}, true);
        normal_init(w.pose, 0.02);
    }
    return w;
}

} // namespace poguise
