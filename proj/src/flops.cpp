#include "poguise/flops.hpp"

#include <cmath>

namespace poguise {

double layer_attn_flops(int tokens, int dim) {
    const double n = tokens, d = dim;
    return 2.0 * (4.0 * n * d * d + 2.0 * n * n * d);
}

double layer_mlp_flops(int tokens, int dim) {
    const double n = tokens, d = dim;
    return 2.0 * (8.0 * n * d * d);
}

double layer_flops(int tokens, int dim) {
    return layer_attn_flops(tokens, dim) + layer_mlp_flops(tokens, dim);
}

std::vector<int> visual_count_schedule(int n_vis, const SelectionConfig& sel, int num_stages) {
    std::vector<int> counts{n_vis};
    int alive = n_vis;
    for (int s = 0; s < num_stages; ++s) {
        const int n_sel = round_count(alive * sel.rho);
        const int n_disc = alive - n_sel;
        int n_merge = 0;
        if (sel.merge_policy != MergePolicy::NONE && n_disc >= 2)
            n_merge = round_count(n_disc * sel.lambda);
        alive = n_sel + n_merge;
        counts.push_back(alive);
    }
    return counts;
}

CostReport model_flops(const ModelConfig& cfg) {
    cfg.validate();
    const int d = cfg.encoder.dim;
    const int n_p = cfg.pose_tokens ? cfg.clip.n_p() : 0;

    CostReport rep;
    const auto& stages = cfg.encoder.selection_stages;
    rep.visual_counts = cfg.selection.enabled()
                            ? visual_count_schedule(cfg.clip.n_vis(), cfg.selection,
                                                    static_cast<int>(stages.size()))
                            : std::vector<int>{cfg.clip.n_vis()};

    // tokens entering each layer; stage k fires after 1-based layer stages[k]
    int seg = 0;
    for (int layer = 1; layer <= cfg.encoder.depth; ++layer) {
        const int n = 1 + n_p + rep.visual_counts[seg];
        rep.layer_tokens.push_back(n);
        rep.layer_attn_flops.push_back(layer_attn_flops(n, d));
        rep.layer_mlp_flops.push_back(layer_mlp_flops(n, d));
        if (cfg.selection.enabled() && seg < static_cast<int>(stages.size()) &&
            stages[seg] == layer)
            ++seg;
    }

    rep.embed_flops = 2.0 * cfg.clip.n_vis() * static_cast<double>(cfg.clip.cube_volume()) * d;
    rep.head_flops = 2.0 * (static_cast<double>(d) * d + static_cast<double>(d) * cfg.heads.num_classes);

    if (cfg.pose_tokens) {
        // decoder cost at output resolution: deconv D->Dd on the 2h x 2w grid,
        // deconv Dd->Dd on 4h x 4w, then the 1x1 projection to L landmarks
        const double dd = cfg.decoder_dim();
        const double k2 = 4.0 * 4.0;
        const double hw1 = static_cast<double>(2 * cfg.clip.h()) * (2 * cfg.clip.w());
        const double hw2 = static_cast<double>(4 * cfg.clip.h()) * (4 * cfg.clip.w());
        rep.decoder_flops = 2.0 * (hw1 * d * dd * k2 + hw2 * dd * dd * k2 + hw2 * dd * cfg.heads.landmarks);
    }
    return rep;
}

double solve_keep_rate(double target_gflops, const ModelConfig& cfg) {
    if (target_gflops <= 0.0) throw ConfigError("target GFLOPs must be positive");
    auto cost_at = [&cfg](double rho) {
        ModelConfig c = cfg;
        c.selection.rho = rho;
        return model_flops(c).total_gflops();
    };
    const double tol = 0.005;
    auto rel_err = [target_gflops](double g) { return std::abs(g - target_gflops) / target_gflops; };

    const double full = cost_at(1.0);
    if (target_gflops >= full) {
        if (rel_err(full) <= tol) return 1.0;
        throw ConfigError("target exceeds the cost at rho=1 by more than 0.5%");
    }

    double lo = 1e-9, hi = 1.0; // invariant: cost(hi) >= target
    double best_rho = 1.0, best_err = rel_err(full);
    for (int it = 0; it < 80; ++it) {
        const double mid = 0.5 * (lo + hi);
        const double g = cost_at(mid);
        if (rel_err(g) < best_err) {
            best_err = rel_err(g);
            best_rho = mid;
        }
        if (g >= target_gflops)
            hi = mid;
        else
            lo = mid;
    }
    if (best_err > tol)
        throw ConfigError("no keep rate matches the target within 0.5% (closest misses by " +
                          std::to_string(best_err * 100.0) + "%)");
    return best_rho;
}

} // namespace poguise
