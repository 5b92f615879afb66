#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "poguise/errors.hpp"

namespace poguise {

// Counting rule shared by the selection module and the cost model: round to
// nearest with halves going down, floor of 1. Both N_sel = round(N·rho) and
// N_merge = round(N_disc·lambda) use it.
inline int round_count(double x) {
    return std::max(1, static_cast<int>(std::ceil(x - 0.5)));
}

// Input clip geometry plus the space-time cube size (2 frames x 16 x 16).
struct ClipSpec {
    int frames = 16;
    int channels = 1;
    int height = 224;
    int width = 224;
    int cube_t = 2;
    int cube_hw = 16;

    void validate() const {
        if (frames <= 0 || frames % cube_t != 0)
            throw ShapeError("frame count " + std::to_string(frames) + " not divisible by " +
                             std::to_string(cube_t));
        if (height <= 0 || height % cube_hw != 0 || width <= 0 || width % cube_hw != 0)
            throw ShapeError("spatial dims must be positive multiples of " + std::to_string(cube_hw));
        if (channels <= 0) throw ShapeError("channel count must be positive");
    }
    int t() const { return frames / cube_t; }
    int h() const { return height / cube_hw; }
    int w() const { return width / cube_hw; }
    int n_vis() const { return t() * h() * w(); }
    int n_p() const { return h() * w(); }
    int cube_volume() const { return cube_t * channels * cube_hw * cube_hw; }
};

struct EncoderConfig {
    int depth = 12;
    int dim = 768;
    int heads = 12;
    int mlp_ratio = 4;
    // 1-based layer numbers after which a selection stage runs
    std::vector<int> selection_stages = {3, 5, 7};

    void validate() const {
        if (depth <= 0 || dim <= 0 || heads <= 0) throw ConfigError("encoder dims must be positive");
        if (dim % heads != 0) throw ConfigError("dim must be divisible by head count");
        for (int s : selection_stages)
            if (s < 1 || s >= depth)
                throw ConfigError("selection stage " + std::to_string(s) +
                                  " outside (0, depth) for depth " + std::to_string(depth));
    }
    int head_dim() const { return dim / heads; }
};

enum class ScorePolicy { CLASS, MIDFRAME, CLASS_POSE };
enum class MergePolicy { NONE, POGUISE, BIPARTITE };
enum class SimilarityFeature { Q, K, ATTN };

inline std::string to_string(ScorePolicy p) {
    switch (p) {
        case ScorePolicy::CLASS: return "class";
        case ScorePolicy::MIDFRAME: return "midframe";
        case ScorePolicy::CLASS_POSE: return "class_pose";
    }
    return "?";
}
inline std::string to_string(MergePolicy p) {
    switch (p) {
        case MergePolicy::NONE: return "none";
        case MergePolicy::POGUISE: return "poguise";
        case MergePolicy::BIPARTITE: return "bipartite";
    }
    return "?";
}
inline std::string to_string(SimilarityFeature f) {
    switch (f) {
        case SimilarityFeature::Q: return "q";
        case SimilarityFeature::K: return "k";
        case SimilarityFeature::ATTN: return "attn";
    }
    return "?";
}

inline ScorePolicy score_policy_from(const std::string& s) {
    if (s == "class") return ScorePolicy::CLASS;
    if (s == "midframe") return ScorePolicy::MIDFRAME;
    if (s == "class_pose") return ScorePolicy::CLASS_POSE;
    throw ConfigError("unknown score policy '" + s + "'");
}
inline MergePolicy merge_policy_from(const std::string& s) {
    if (s == "none") return MergePolicy::NONE;
    if (s == "poguise") return MergePolicy::POGUISE;
    if (s == "bipartite") return MergePolicy::BIPARTITE;
    throw ConfigError("unknown merge policy '" + s + "'");
}
inline SimilarityFeature similarity_feature_from(const std::string& s) {
    if (s == "q") return SimilarityFeature::Q;
    if (s == "k") return SimilarityFeature::K;
    if (s == "attn") return SimilarityFeature::ATTN;
    throw ConfigError("unknown similarity feature '" + s + "'");
}

struct SelectionConfig {
    double kappa = 0.5;  // class-vs-pose balance in the pruning score
    double rho = 0.6;    // keep rate over alive visual tokens
    double lambda = 0.3; // merge rate over discarded tokens
    ScorePolicy score_policy = ScorePolicy::CLASS_POSE;
    MergePolicy merge_policy = MergePolicy::POGUISE;
    SimilarityFeature similarity_feature = SimilarityFeature::K;

    bool enabled() const { return rho < 1.0 || merge_policy != MergePolicy::NONE; }
    void validate() const {
        if (kappa < 0.0 || kappa > 1.0) throw ConfigError("kappa must be in [0,1]");
        if (rho <= 0.0 || rho > 1.0) throw ConfigError("rho must be in (0,1]");
        if (lambda <= 0.0 || lambda > 1.0) throw ConfigError("lambda must be in (0,1]");
    }
};

struct HeadConfig {
    int num_classes = 34;
    int landmarks = 13;
    double mse_scale = 1000.0;
    double label_smoothing = 0.1;
    double w_cls = 1.0;
    double w_hm = 1.0;

    void validate() const {
        if (num_classes <= 1) throw ConfigError("need at least two classes");
        if (landmarks <= 0) throw ConfigError("landmark count must be positive");
        if (mse_scale <= 0.0) throw ConfigError("mse scale must be positive");
        if (label_smoothing < 0.0 || label_smoothing >= 1.0)
            throw ConfigError("label smoothing must be in [0,1)");
        if (w_cls <= 0.0 || w_hm <= 0.0) throw ConfigError("task weights must be positive");
    }
};

// Full architecture description. pose_tokens gates both the heatmap pathway
// (pose tokens + decoder) and the CLASS_POSE pruning score.
struct ModelConfig {
    ClipSpec clip;
    EncoderConfig encoder;
    SelectionConfig selection;
    HeadConfig heads;
    bool pose_tokens = true;

    void validate() const {
        clip.validate();
        encoder.validate();
        selection.validate();
        heads.validate();
        if (!pose_tokens && selection.score_policy == ScorePolicy::CLASS_POSE)
            throw ConfigError("class_pose scoring requires pose tokens");
    }
    int decoder_dim() const { return std::min(256, 4 * encoder.dim); }
    int tokens() const { return 1 + (pose_tokens ? clip.n_p() : 0) + clip.n_vis(); }
    // heatmap grid is 4x the token grid (two stride-2 deconvolutions)
    int grid_h() const { return 4 * clip.h(); }
    int grid_w() const { return 4 * clip.w(); }
};

// Reference scale: ViT-base on 16x224x224 grayscale clips.
inline ModelConfig base_config() {
    ModelConfig cfg;
    cfg.clip = ClipSpec{};
    cfg.encoder = EncoderConfig{};
    cfg.heads = HeadConfig{};
    return cfg;
}

// Desk scale: 6 layers, D=64, 8x48x48 clips, stages {2,4}, 4 classes,
// 5 landmarks.
inline ModelConfig toy_config() {
    ModelConfig cfg;
    cfg.clip.frames = 8;
    cfg.clip.height = cfg.clip.width = 48;
    cfg.encoder.depth = 6;
    cfg.encoder.dim = 64;
    cfg.encoder.heads = 4;
    cfg.encoder.selection_stages = {2, 4};
    cfg.heads.num_classes = 4;
    cfg.heads.landmarks = 5;
    return cfg;
}

} // namespace poguise
