#pragma once

#include <json.hpp>

#include "poguise/config.hpp"
#include "poguise/train.hpp"

// JSON bridging for configs. from_json treats the incoming object as a
// partial override of whatever the target already holds, so defaults, config
// file, and command-line flags can be layered in that order.

namespace poguise {

inline void to_json(nlohmann::json& j, const ClipSpec& c) {
    j = {{"frames", c.frames}, {"channels", c.channels},   {"height", c.height},
         {"width", c.width},   {"cube_frames", c.cube_t},  {"cube_pixels", c.cube_hw}};
}

inline void from_json(const nlohmann::json& j, ClipSpec& c) {
    c.frames = j.value("frames", c.frames);
    c.channels = j.value("channels", c.channels);
    c.height = j.value("height", c.height);
    c.width = j.value("width", c.width);
    c.cube_t = j.value("cube_frames", c.cube_t);
    c.cube_hw = j.value("cube_pixels", c.cube_hw);
}

inline void to_json(nlohmann::json& j, const EncoderConfig& e) {
    j = {{"depth", e.depth},
         {"dim", e.dim},
         {"heads", e.heads},
         {"mlp_ratio", e.mlp_ratio},
         {"selection_stages", e.selection_stages}};
}

inline void from_json(const nlohmann::json& j, EncoderConfig& e) {
    e.depth = j.value("depth", e.depth);
    e.dim = j.value("dim", e.dim);
    e.heads = j.value("heads", e.heads);
    e.mlp_ratio = j.value("mlp_ratio", e.mlp_ratio);
    e.selection_stages = j.value("selection_stages", e.selection_stages);
}

inline void to_json(nlohmann::json& j, const SelectionConfig& s) {
    j = {{"kappa", s.kappa},
         {"rho", s.rho},
         {"lambda", s.lambda},
         {"score_policy", to_string(s.score_policy)},
         {"merge_policy", to_string(s.merge_policy)},
         {"similarity_feature", to_string(s.similarity_feature)}};
}

inline void from_json(const nlohmann::json& j, SelectionConfig& s) {
    s.kappa = j.value("kappa", s.kappa);
    s.rho = j.value("rho", s.rho);
    s.lambda = j.value("lambda", s.lambda);
    if (j.contains("score_policy")) s.score_policy = score_policy_from(j.at("score_policy"));
    if (j.contains("merge_policy")) s.merge_policy = merge_policy_from(j.at("merge_policy"));
    if (j.contains("similarity_feature"))
        s.similarity_feature = similarity_feature_from(j.at("similarity_feature"));
}

inline void to_json(nlohmann::json& j, const HeadConfig& h) {
    j = {{"num_classes", h.num_classes},       {"landmarks", h.landmarks},
         {"mse_scale", h.mse_scale},           {"label_smoothing", h.label_smoothing},
         {"loss_weight_cls", h.w_cls},         {"loss_weight_hm", h.w_hm}};
}

inline void from_json(const nlohmann::json& j, HeadConfig& h) {
    h.num_classes = j.value("num_classes", h.num_classes);
    h.landmarks = j.value("landmarks", h.landmarks);
    h.mse_scale = j.value("mse_scale", h.mse_scale);
    h.label_smoothing = j.value("label_smoothing", h.label_smoothing);
    h.w_cls = j.value("loss_weight_cls", h.w_cls);
    h.w_hm = j.value("loss_weight_hm", h.w_hm);
}

inline void to_json(nlohmann::json& j, const ModelConfig& m) {
    j = {{"clip", m.clip},
         {"encoder", m.encoder},
         {"selection", m.selection},
         {"heads", m.heads},
         {"pose_tokens", m.pose_tokens}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& m) {
    if (j.contains("clip")) j.at("clip").get_to(m.clip);
    if (j.contains("encoder")) j.at("encoder").get_to(m.encoder);
    if (j.contains("selection")) j.at("selection").get_to(m.selection);
    if (j.contains("heads")) j.at("heads").get_to(m.heads);
    m.pose_tokens = j.value("pose_tokens", m.pose_tokens);
}

inline void to_json(nlohmann::json& j, const OptimConfig& o) {
    j = {{"lr_backbone", o.lr_backbone},
         {"lr_heads", o.lr_heads},
         {"lr_min", o.lr_min},
         {"weight_decay", o.weight_decay},
         {"beta1", o.beta1},
         {"beta2", o.beta2},
         {"eps", o.eps},
         {"grad_clip", o.grad_clip},
         {"batch_size", o.batch_size},
         {"epochs", o.epochs},
         {"accumulate_batches", o.accumulate_batches},
         {"augment_shift", o.augment_shift}};
}

inline void from_json(const nlohmann::json& j, OptimConfig& o) {
    o.lr_backbone = j.value("lr_backbone", o.lr_backbone);
    o.lr_heads = j.value("lr_heads", o.lr_heads);
    o.lr_min = j.value("lr_min", o.lr_min);
    o.weight_decay = j.value("weight_decay", o.weight_decay);
    o.beta1 = j.value("beta1", o.beta1);
    o.beta2 = j.value("beta2", o.beta2);
    o.eps = j.value("eps", o.eps);
    o.grad_clip = j.value("grad_clip", o.grad_clip);
    o.batch_size = j.value("batch_size", o.batch_size);
    o.epochs = j.value("epochs", o.epochs);
    o.accumulate_batches = j.value("accumulate_batches", o.accumulate_batches);
    o.augment_shift = j.value("augment_shift", o.augment_shift);
}

} // namespace poguise
