#pragma once

#include <vector>

#include "poguise/config.hpp"

namespace poguise {

// Analytic FLOP accounting. Convention: 1 multiply-accumulate = 2 FLOPs;
// normalizations, softmax and GELU are excluded. All values in raw FLOPs
// (doubles), GFLOPs only at the reporting boundary.
struct CostReport {
    std::vector<int> layer_tokens;         // N entering each layer
    std::vector<double> layer_attn_flops;  // per layer: QKV/out proj + score/value aggregation
    std::vector<double> layer_mlp_flops;   // per layer: ratio-4 MLP
    double embed_flops = 0.0;
    double head_flops = 0.0;    // classification head
    double decoder_flops = 0.0; // heatmap decoder (0 when pose tokens disabled)
    // visual token counts: initial, then after each selection stage
    std::vector<int> visual_counts;

    double total_flops() const {
        double s = embed_flops + head_flops + decoder_flops;
        for (double f : layer_attn_flops) s += f;
        for (double f : layer_mlp_flops) s += f;
        return s;
    }
    double total_gflops() const { return total_flops() / 1e9; }
};

// 2*(12*N*D^2 + 2*N^2*D): QKV + output projections 8ND^2, MLP 16ND^2,
// attention scores + value aggregation 4N^2D.
double layer_flops(int tokens, int dim);
double layer_attn_flops(int tokens, int dim);
double layer_mlp_flops(int tokens, int dim);

// Visual-token trajectory under the selection schedule: element 0 is the
// initial count, element k the count after stage k.
std::vector<int> visual_count_schedule(int n_vis, const SelectionConfig& sel, int num_stages);

CostReport model_flops(const ModelConfig& cfg);

// Bisection on rho in (0,1] until the model cost matches the target within
// 0.5%. Throws ConfigError when no keep rate reaches the target.
double solve_keep_rate(double target_gflops, const ModelConfig& cfg);

} // namespace poguise
