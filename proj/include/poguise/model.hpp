#pragma once

#include <string>
#include <vector>

#include "poguise/config.hpp"
#include "poguise/encoder.hpp"
#include "poguise/heads.hpp"
#include "poguise/selection.hpp"
#include "poguise/tokenizer.hpp"

namespace poguise {

template <typename T>
struct NamedParam {
    std::string name;
    TensorPtr<T> param;
};

struct ForwardOptions {
    bool collect_counts = false; // per-layer token counts + visual trajectory
    bool collect_trace = false;  // per-stage selection-mask rows
};

template <typename T>
struct ForwardResult {
    TensorPtr<T> logits;   // [1 x C]
    TensorPtr<T> heatmaps; // [L x 4h x 4w]; null without pose tokens
    std::vector<int> layer_tokens;   // tokens entering each layer
    std::vector<int> visual_counts;  // initial, then after each stage
    std::vector<SelectionOutcome> outcomes;
    std::vector<std::vector<TraceRow>> traces;
};

template <typename T>
struct Model {
    ModelConfig cfg;
    TokenizerWeights<T> tokenizer;
    std::vector<BlockWeights<T>> blocks;
    TensorPtr<T> final_ln_g, final_ln_b;
    ClassifierWeights<T> classifier;
    DecoderWeights<T> decoder; // unused (null) without pose tokens

    static Model init(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        Model m;
        m.cfg = cfg;
        Rng rng = derive_rng(seed, 0x7001);
        m.tokenizer = init_tokenizer<T>(cfg, rng);
        m.blocks.reserve(cfg.encoder.depth);
        for (int i = 0; i < cfg.encoder.depth; ++i)
            m.blocks.push_back(init_block<T>(cfg.encoder.dim, cfg.encoder.mlp_ratio, rng));
        m.final_ln_g = tensor<T>({cfg.encoder.dim}, true);
        std::fill(m.final_ln_g->data.begin(), m.final_ln_g->data.end(), T(1));
        m.final_ln_b = tensor<T>({cfg.encoder.dim}, true);
        m.classifier = init_classifier<T>(cfg.encoder.dim, cfg.heads.num_classes, rng);
        if (cfg.pose_tokens)
            m.decoder = init_decoder<T>(cfg.encoder.dim, cfg.decoder_dim(), cfg.heads.landmarks, rng);
        return m;
    }

    // Stable registry; heads are the "classifier." and "decoder." prefixes,
    // everything else is backbone.
    std::vector<NamedParam<T>> parameters() const {
        std::vector<NamedParam<T>> out;
        auto put = [&out](const std::string& name, const TensorPtr<T>& p) {
            if (p) out.push_back({name, p});
        };
        put("tokenizer.proj_w", tokenizer.proj_w);
        put("tokenizer.proj_b", tokenizer.proj_b);
        put("tokenizer.cls", tokenizer.cls);
        put("tokenizer.pose", tokenizer.pose);
        put("tokenizer.pos", tokenizer.pos);
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const auto& b = blocks[i];
            const std::string p = "block" + std::to_string(i) + ".";
            put(p + "ln1_g", b.ln1_g);
            put(p + "ln1_b", b.ln1_b);
            put(p + "wq", b.wq);
            put(p + "bq", b.bq);
            put(p + "wk", b.wk);
            put(p + "bk", b.bk);
            put(p + "wv", b.wv);
            put(p + "bv", b.bv);
            put(p + "wo", b.wo);
            put(p + "bo", b.bo);
            put(p + "ln2_g", b.ln2_g);
            put(p + "ln2_b", b.ln2_b);
            put(p + "w1", b.w1);
            put(p + "b1", b.b1);
            put(p + "w2", b.w2);
            put(p + "b2", b.b2);
        }
        put("final_ln.g", final_ln_g);
        put("final_ln.b", final_ln_b);
        put("classifier.w1", classifier.w1);
        put("classifier.b1", classifier.b1);
        put("classifier.w2", classifier.w2);
        put("classifier.b2", classifier.b2);
        put("decoder.deconv1_w", decoder.deconv1_w);
        put("decoder.deconv1_b", decoder.deconv1_b);
        put("decoder.deconv2_w", decoder.deconv2_w);
        put("decoder.deconv2_b", decoder.deconv2_b);
        put("decoder.proj_w", decoder.proj_w);
        put("decoder.proj_b", decoder.proj_b);
        return out;
    }

    static bool is_head_param(const std::string& name) {
        return name.rfind("classifier.", 0) == 0 || name.rfind("decoder.", 0) == 0;
    }

    ForwardResult<T> forward(const std::vector<T>& clip, const ForwardOptions& opt = {}) const {
        ForwardResult<T> res;
        TokenBatch<T> batch = poguise::tokenize(clip, cfg.clip, tokenizer, cfg.pose_tokens);
        if (opt.collect_counts) res.visual_counts.push_back(batch.n_vis());

        const bool selecting = cfg.selection.enabled();
        const auto& stages = cfg.encoder.selection_stages;
        const bool need_qk = cfg.selection.merge_policy != MergePolicy::NONE &&
                             cfg.selection.similarity_feature != SimilarityFeature::ATTN;
        const int mid_tcube = cfg.clip.t() / 2;

        std::size_t seg = 0;
        auto x = batch.tokens;
        for (int layer = 1; layer <= cfg.encoder.depth; ++layer) {
            if (opt.collect_counts) res.layer_tokens.push_back(x->dims[0]);
            const bool stage_here = selecting && seg < stages.size() && stages[seg] == layer;
            AttentionRecord<T> rec;
            rec.layer = layer;
            RecordRequest req{stage_here, stage_here && need_qk};
            x = vit_block(x, blocks[layer - 1], cfg.encoder.heads, req, stage_here ? &rec : nullptr);
            if (stage_here) {
                batch.tokens = x;
                auto pre_origins = batch.origins;
                auto [next, outcome] = apply_selection(batch, rec, cfg.selection, mid_tcube,
                                                       static_cast<int>(seg));
                if (opt.collect_trace) res.traces.push_back(trace_rows(outcome, pre_origins));
                res.outcomes.push_back(std::move(outcome));
                batch = std::move(next);
                x = batch.tokens;
                if (opt.collect_counts) res.visual_counts.push_back(batch.n_vis());
                ++seg;
            }
        }
        x = layernorm(x, final_ln_g, final_ln_b);
        res.logits = classify(slice_rows(x, 0, 1), classifier);
        if (cfg.pose_tokens)
            res.heatmaps = decode_heatmaps(slice_rows(x, 1, 1 + batch.n_p), cfg.clip.h(),
                                           cfg.clip.w(), decoder);
        return res;
    }
};

} // namespace poguise
