#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "poguise/config.hpp"
#include "poguise/encoder.hpp"
#include "poguise/tensor.hpp"
#include "poguise/tokenizer.hpp"

namespace poguise {

// What happened to each alive visual token at one selection stage, in local
// (pre-stage) visual indices. A token can appear both as a source and as a
// candidate: merges are computed from one similarity snapshot, chains are not
// resolved.
struct SelectionOutcome {
    int stage = -1;
    int n_sel = 0;
    int n_merge = 0;
    std::vector<int> kept;       // ascending
    std::vector<int> sources;    // ascending; one merged token each
    std::vector<int> candidates; // parallel to sources
    std::vector<int> dropped;    // discarded, not a source; ascending
};

// Per-source merge decision over the discarded set (local indices into it).
struct MergePlan {
    std::vector<int> sources;    // ascending
    std::vector<int> candidates; // parallel
};

// Pruning score per alive visual token. `mid_tcube` is the static middle
// temporal cube index floor(t/2) of the full clip.
template <typename T>
std::vector<T> prune_scores(const AttentionRecord<T>& rec, int n_p,
                            const std::vector<VisualOrigin>& origins, const SelectionConfig& cfg,
                            int mid_tcube) {
    const int n_vis = static_cast<int>(origins.size());
    const int off = 1 + n_p;
    if (rec.n != off + n_vis) throw ShapeError("attention record does not match the token layout");
    if (cfg.score_policy == ScorePolicy::CLASS_POSE && n_p == 0)
        throw ConfigError("class_pose scoring needs pose tokens");

    std::vector<T> scores(n_vis);
    for (int i = 0; i < n_vis; ++i) {
        const int row = off + i;
        switch (cfg.score_policy) {
            case ScorePolicy::CLASS:
                scores[i] = rec.attn_at(row, 0);
                break;
            case ScorePolicy::CLASS_POSE: {
                T pose_sum = 0;
                for (int j = 1; j <= n_p; ++j) pose_sum += rec.attn_at(row, j);
                scores[i] = rec.attn_at(row, 0) * static_cast<T>(cfg.kappa) +
                            pose_sum * static_cast<T>(1.0 - cfg.kappa);
                break;
            }
            case ScorePolicy::MIDFRAME: {
                T mid_sum = 0;
                for (int j = 0; j < n_vis; ++j)
                    if (origins[j].tcube == mid_tcube) mid_sum += rec.attn_at(row, off + j);
                scores[i] = mid_sum;
                break;
            }
        }
    }
    return scores;
}

// Top-N_sel by score; ties and output order by original index.
template <typename T>
std::pair<std::vector<int>, std::vector<int>> topk_prune(const std::vector<T>& scores, double rho) {
    if (rho <= 0.0 || rho > 1.0) throw ConfigError("rho must be in (0,1]");
    const int n = static_cast<int>(scores.size());
    const int n_sel = std::min(n, round_count(n * rho));
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&scores](int a, int b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    std::vector<int> kept(order.begin(), order.begin() + n_sel);
    std::vector<int> discarded(order.begin() + n_sel, order.end());
    std::sort(kept.begin(), kept.end());
    std::sort(discarded.begin(), discarded.end());
    return {kept, discarded};
}

namespace detail {

// Cosine similarity matrix over row features with the diagonal masked.
template <typename T>
std::vector<T> cosine_matrix(const std::vector<T>& features, int n, int f) {
    std::vector<T> norms(n);
    for (int i = 0; i < n; ++i) {
        T s = 0;
        for (int j = 0; j < f; ++j) {
            const T v = features[static_cast<std::size_t>(i) * f + j];
            s += v * v;
        }
        norms[i] = std::sqrt(s);
    }
    const T lowest = std::numeric_limits<T>::lowest();
    std::vector<T> sim(static_cast<std::size_t>(n) * n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            if (i == j) {
                sim[static_cast<std::size_t>(i) * n + j] = lowest;
                continue;
            }
            T dot = 0;
            for (int kx = 0; kx < f; ++kx)
                dot += features[static_cast<std::size_t>(i) * f + kx] *
                       features[static_cast<std::size_t>(j) * f + kx];
            const T denom = norms[i] * norms[j];
            sim[static_cast<std::size_t>(i) * n + j] = denom > T(0) ? dot / denom : T(0);
        }
    return sim;
}

} // namespace detail

// One similarity snapshot over the discarded tokens: per-row best candidate
// (argmax, ties low), then the K = max(1, round(n*lambda)) best-matched rows
// become sources. Sources return in ascending index order.
template <typename T>
MergePlan poguise_merge(const std::vector<T>& features, int n, int f, double lambda) {
    MergePlan plan;
    if (n < 2) return plan; // merge skipped, recorded as a no-op
    if (lambda <= 0.0 || lambda > 1.0) throw ConfigError("lambda must be in (0,1]");
    const auto sim = detail::cosine_matrix(features, n, f);

    std::vector<int> candidate(n);
    std::vector<T> best(n);
    for (int i = 0; i < n; ++i) {
        int arg = i == 0 ? 1 : 0;
        T mx = sim[static_cast<std::size_t>(i) * n + arg];
        for (int j = 0; j < n; ++j) {
            if (j == i) continue;
            const T v = sim[static_cast<std::size_t>(i) * n + j];
            if (v > mx) {
                mx = v;
                arg = j;
            }
        }
        candidate[i] = arg;
        best[i] = mx;
    }

    const int k = std::min(n, round_count(n * lambda));
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&best](int a, int b) {
        if (best[a] != best[b]) return best[a] > best[b];
        return a < b;
    });
    plan.sources.assign(order.begin(), order.begin() + k);
    std::sort(plan.sources.begin(), plan.sources.end());
    plan.candidates.reserve(k);
    for (int s : plan.sources) plan.candidates.push_back(candidate[s]);
    return plan;
}

// ToMe-style baseline: alternate tokens form sets A (even) and B (odd), each
// A-token matches its most similar B-token, the top matches merge pairwise.
// Retention beyond half the input set is impossible in this scheme — that is
// the documented limitation the arbitrary-rate merge removes.
template <typename T>
MergePlan bipartite_merge(const std::vector<T>& features, int n, int f, double lambda) {
    MergePlan plan;
    if (n < 2) return plan;
    if (lambda <= 0.0 || lambda > 1.0) throw ConfigError("lambda must be in (0,1]");
    const int n_merge = std::min(n, round_count(n * lambda));
    if (n_merge > n / 2)
        throw ConfigError("bipartite merge cannot retain " + std::to_string(n_merge) + " of " +
                          std::to_string(n) + " tokens: retention rate is capped at 50%");

    std::vector<int> a_set, b_set;
    for (int i = 0; i < n; ++i) (i % 2 == 0 ? a_set : b_set).push_back(i);

    const auto sim = detail::cosine_matrix(features, n, f);
    std::vector<int> match(a_set.size());
    std::vector<T> best(a_set.size());
    for (std::size_t ai = 0; ai < a_set.size(); ++ai) {
        int arg = b_set[0];
        T mx = sim[static_cast<std::size_t>(a_set[ai]) * n + b_set[0]];
        for (int b : b_set) {
            const T v = sim[static_cast<std::size_t>(a_set[ai]) * n + b];
            if (v > mx) {
                mx = v;
                arg = b;
            }
        }
        match[ai] = arg;
        best[ai] = mx;
    }
    std::vector<int> order(a_set.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&best](int x, int y) {
        if (best[x] != best[y]) return best[x] > best[y];
        return x < y;
    });
    std::vector<std::pair<int, int>> pairs;
    for (int i = 0; i < n_merge; ++i) pairs.emplace_back(a_set[order[i]], match[order[i]]);
    std::sort(pairs.begin(), pairs.end());
    for (auto& [s, c] : pairs) {
        plan.sources.push_back(s);
        plan.candidates.push_back(c);
    }
    return plan;
}

namespace detail {

// Similarity features of the discarded tokens, per config: rows of the Q/K
// projections or rows of the head-averaged attention matrix.
template <typename T>
std::vector<T> merge_features(const AttentionRecord<T>& rec, const std::vector<int>& disc_global,
                              SimilarityFeature feat, int& f_out) {
    const std::vector<T>* src = nullptr;
    switch (feat) {
        case SimilarityFeature::Q: src = &rec.q; f_out = rec.dim; break;
        case SimilarityFeature::K: src = &rec.k; f_out = rec.dim; break;
        case SimilarityFeature::ATTN: src = &rec.attn; f_out = rec.n; break;
    }
    if (src->empty()) throw ConfigError("attention record lacks the requested similarity feature");
    std::vector<T> out(disc_global.size() * static_cast<std::size_t>(f_out));
    for (std::size_t i = 0; i < disc_global.size(); ++i)
        std::copy(src->begin() + static_cast<std::size_t>(disc_global[i]) * f_out,
                  src->begin() + static_cast<std::size_t>(disc_global[i] + 1) * f_out,
                  out.begin() + i * f_out);
    return out;
}

} // namespace detail

// Runs one selection stage: score, prune, merge, and rebuild the batch as
// (class, pose, kept visual in original order, merged tokens by source
// order). Merged values are averaged in-graph, so each parent receives half
// the merged token's gradient.
template <typename T>
std::pair<TokenBatch<T>, SelectionOutcome> apply_selection(const TokenBatch<T>& batch,
                                                           const AttentionRecord<T>& rec,
                                                           const SelectionConfig& cfg, int mid_tcube,
                                                           int stage) {
    cfg.validate();
    const int off = batch.vis_offset();
    const auto scores = prune_scores(rec, batch.n_p, batch.origins, cfg, mid_tcube);
    auto [kept, discarded] = topk_prune(scores, cfg.rho);

    SelectionOutcome outcome;
    outcome.stage = stage;
    outcome.kept = kept;
    outcome.n_sel = static_cast<int>(kept.size());

    MergePlan plan;
    if (cfg.merge_policy != MergePolicy::NONE && discarded.size() >= 2) {
        std::vector<int> disc_global;
        disc_global.reserve(discarded.size());
        for (int i : discarded) disc_global.push_back(off + i);
        int f = 0;
        const auto feats =
            detail::merge_features(rec, disc_global, cfg.similarity_feature, f);
        const int nd = static_cast<int>(discarded.size());
        plan = cfg.merge_policy == MergePolicy::POGUISE
                   ? poguise_merge(feats, nd, f, cfg.lambda)
                   : bipartite_merge(feats, nd, f, cfg.lambda);
    }
    outcome.n_merge = static_cast<int>(plan.sources.size());
    for (std::size_t i = 0; i < plan.sources.size(); ++i) {
        outcome.sources.push_back(discarded[plan.sources[i]]);
        outcome.candidates.push_back(discarded[plan.candidates[i]]);
    }
    std::vector<std::uint8_t> is_source(discarded.size(), 0);
    for (int s : plan.sources) is_source[s] = 1;
    for (std::size_t i = 0; i < discarded.size(); ++i)
        if (!is_source[i]) outcome.dropped.push_back(discarded[i]);

    // rebuild the token matrix: one gather for class+pose+kept, then the
    // merged rows appended
    std::vector<int> base_idx;
    base_idx.reserve(off + kept.size());
    for (int i = 0; i < off; ++i) base_idx.push_back(i);
    for (int i : kept) base_idx.push_back(off + i);
    auto base = gather_rows(batch.tokens, base_idx);

    TokenBatch<T> next;
    next.n_p = batch.n_p;
    next.grid_t = batch.grid_t;
    next.grid_h = batch.grid_h;
    next.grid_w = batch.grid_w;
    next.alive = batch.alive;
    if (!plan.sources.empty()) {
        std::vector<int> src_idx, cand_idx;
        for (std::size_t i = 0; i < outcome.sources.size(); ++i) {
            src_idx.push_back(off + outcome.sources[i]);
            cand_idx.push_back(off + outcome.candidates[i]);
        }
        auto merged = scale(add(gather_rows(batch.tokens, src_idx), gather_rows(batch.tokens, cand_idx)),
                            T(0.5));
        next.tokens = concat_rows<T>({base, merged});
    } else {
        next.tokens = base;
    }

    next.origins.reserve(kept.size() + outcome.sources.size());
    for (int i : kept) next.origins.push_back(batch.origins[i]);
    for (int s : outcome.sources) {
        VisualOrigin o = batch.origins[s];
        o.merged = true;
        next.origins.push_back(o);
    }

    // original-token liveness: survivors are kept tokens and merge sources
    // (a merged token carries its source's identity forward)
    std::vector<std::uint8_t> survives(batch.origins.size(), 0);
    for (int i : kept) survives[i] = 1;
    for (int s : outcome.sources) survives[s] = 1;
    for (std::size_t i = 0; i < batch.origins.size(); ++i)
        if (!survives[i]) next.alive[batch.origin_flat(batch.origins[i])] = 0;
    return {next, outcome};
}

// One selection-mask CSV row per pre-stage alive visual token. A token that
// is both source and candidate reports as merged-source (it produced a
// token).
struct TraceRow {
    int stage;
    VisualOrigin origin;
    std::string status; // kept | merged-source | merged-candidate | dropped
};

inline std::vector<TraceRow> trace_rows(const SelectionOutcome& outcome,
                                        const std::vector<VisualOrigin>& pre_origins) {
    std::vector<std::string> status(pre_origins.size(), "dropped");
    for (int c : outcome.candidates) status[c] = "merged-candidate";
    for (int s : outcome.sources) status[s] = "merged-source";
    for (int k : outcome.kept) status[k] = "kept";
    std::vector<TraceRow> rows;
    rows.reserve(pre_origins.size());
    for (std::size_t i = 0; i < pre_origins.size(); ++i)
        rows.push_back({outcome.stage, pre_origins[i], status[i]});
    return rows;
}

} // namespace poguise
