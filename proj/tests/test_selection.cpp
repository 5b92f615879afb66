#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "poguise/rng.hpp"
#include "poguise/selection.hpp"

using namespace poguise;

namespace {

// Independent reimplementation of the merge rule, written as plain nested
// loops straight from its definition: cosine similarities, per-row argmax
// candidate with low-index ties, top-K sources by candidate similarity with
// low-index ties, sources reported in ascending order.
MergePlan oracle_merge(const std::vector<double>& feats, int n, int f, double lambda) {
    MergePlan plan;
    if (n < 2) return plan;
    auto cos = [&](int a, int b) {
        double dot = 0, na = 0, nb = 0;
        for (int j = 0; j < f; ++j) {
            dot += feats[a * f + j] * feats[b * f + j];
            na += feats[a * f + j] * feats[a * f + j];
            nb += feats[b * f + j] * feats[b * f + j];
        }
        const double d = std::sqrt(na) * std::sqrt(nb);
        return d > 0 ? dot / d : 0.0;
    };
    std::vector<int> cand(n, -1);
    std::vector<double> best(n, 0.0);
    for (int i = 0; i < n; ++i) {
        int arg = -1;
        double mx = 0;
        for (int j = 0; j < n; ++j) {
            if (j == i) continue;
            const double s = cos(i, j);
            if (arg == -1 || s > mx) {
                arg = j;
                mx = s;
            }
        }
        cand[i] = arg;
        best[i] = mx;
    }
    int k = static_cast<int>(std::ceil(n * lambda - 0.5));
    if (k < 1) k = 1;
    if (k > n) k = n;
    std::set<int> chosen;
    for (int pick = 0; pick < k; ++pick) {
        int arg = -1;
        for (int i = 0; i < n; ++i) {
            if (chosen.count(i)) continue;
            if (arg == -1 || best[i] > best[arg]) arg = i;
        }
        chosen.insert(arg);
    }
    for (int s : chosen) {
        plan.sources.push_back(s);
        plan.candidates.push_back(cand[s]);
    }
    return plan;
}

AttentionRecord<double> random_record(int n_p, int n_vis, Rng& rng, int dim = 8) {
    AttentionRecord<double> rec;
    rec.n = 1 + n_p + n_vis;
    rec.dim = dim;
    rec.attn.resize(static_cast<std::size_t>(rec.n) * rec.n);
    for (int i = 0; i < rec.n; ++i) {
        double z = 0;
        for (int j = 0; j < rec.n; ++j) {
            rec.attn[i * rec.n + j] = rng.uniform() + 1e-6;
            z += rec.attn[i * rec.n + j];
        }
        for (int j = 0; j < rec.n; ++j) rec.attn[i * rec.n + j] /= z;
    }
    rec.q.resize(static_cast<std::size_t>(rec.n) * dim);
    rec.k.resize(static_cast<std::size_t>(rec.n) * dim);
    for (auto& v : rec.q) v = rng.normal();
    for (auto& v : rec.k) v = rng.normal();
    return rec;
}

std::vector<VisualOrigin> grid_origins(int t, int h, int w) {
    std::vector<VisualOrigin> o;
    for (int ti = 0; ti < t; ++ti)
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c) o.push_back({ti, r, c, false});
    return o;
}

TokenBatch<double> make_batch(int n_p, int t, int h, int w, Rng& rng, int dim = 8) {
    TokenBatch<double> b;
    b.n_p = n_p;
    b.grid_t = t;
    b.grid_h = h;
    b.grid_w = w;
    b.origins = grid_origins(t, h, w);
    b.alive.assign(b.origins.size(), 1);
    b.tokens = tensor<double>({1 + n_p + static_cast<int>(b.origins.size()), dim});
    for (auto& v : b.tokens->data) v = rng.normal();
    return b;
}

} // namespace

TEST_CASE("prune score formula by direct substitution") {
    // one visual token: class attention 0.2, pose attentions 0.1 and 0.3
    AttentionRecord<double> rec;
    rec.n = 4;
    rec.dim = 2;
    rec.attn = {0.25, 0.25, 0.25, 0.25, //
                0.25, 0.25, 0.25, 0.25, //
                0.25, 0.25, 0.25, 0.25, //
                0.2, 0.1, 0.3, 0.4};
    std::vector<VisualOrigin> origins{{0, 0, 0, false}};
    SelectionConfig cfg;
    cfg.kappa = 0.5;
    auto s = prune_scores(rec, 2, origins, cfg, 0);
    REQUIRE(s.size() == 1);
    CHECK(s[0] == doctest::Approx(0.30).epsilon(1e-15));

    cfg.score_policy = ScorePolicy::CLASS;
    CHECK(prune_scores(rec, 2, origins, cfg, 0)[0] == doctest::Approx(0.2));
}

TEST_CASE("kappa=1 equals the class policy exactly") {
    Rng rng(3);
    auto rec = random_record(5, 12, rng);
    auto origins = grid_origins(3, 2, 2);
    SelectionConfig cp;
    cp.kappa = 1.0;
    SelectionConfig cls;
    cls.score_policy = ScorePolicy::CLASS;
    auto a = prune_scores(rec, 5, origins, cp, 1);
    auto b = prune_scores(rec, 5, origins, cls, 1);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) < 1e-12);
}

TEST_CASE("scores equal a brute-force loop over the formula") {
    Rng rng(11);
    const int n_p = 4, n_vis = 16;
    auto rec = random_record(n_p, n_vis, rng);
    auto origins = grid_origins(4, 2, 2);
    SelectionConfig cfg;
    cfg.kappa = 0.3;
    auto s = prune_scores(rec, n_p, origins, cfg, 2);
    for (int i = 0; i < n_vis; ++i) {
        const int row = 1 + n_p + i;
        double pose = 0;
        for (int j = 1; j <= n_p; ++j) pose += rec.attn[row * rec.n + j];
        const double want = rec.attn[row * rec.n + 0] * 0.3 + pose * 0.7;
        CHECK(std::abs(s[i] - want) < 1e-12);
    }
}

TEST_CASE("midframe policy sums attention to middle-cube tokens") {
    Rng rng(17);
    const int n_p = 0, n_vis = 8;
    auto rec = random_record(n_p, n_vis, rng);
    auto origins = grid_origins(4, 2, 1); // tcube in {0,1,2,3}, mid = 2
    SelectionConfig cfg;
    cfg.score_policy = ScorePolicy::MIDFRAME;
    auto s = prune_scores(rec, n_p, origins, cfg, 2);
    for (int i = 0; i < n_vis; ++i) {
        const int row = 1 + i;
        double want = 0;
        for (int j = 0; j < n_vis; ++j)
            if (origins[j].tcube == 2) want += rec.attn[row * rec.n + 1 + j];
        CHECK(std::abs(s[i] - want) < 1e-12);
    }
}

TEST_CASE("class_pose without pose tokens is a config error") {
    Rng rng(5);
    auto rec = random_record(0, 4, rng);
    auto origins = grid_origins(1, 2, 2);
    SelectionConfig cfg;
    CHECK_THROWS_AS(prune_scores(rec, 0, origins, cfg, 0), ConfigError);
}

TEST_CASE("topk_prune basics, ties, and rounding") {
    auto [kept, disc] = topk_prune<double>({0.5, 0.1, 0.4, 0.2}, 0.5);
    CHECK(kept == std::vector<int>{0, 2});
    CHECK(disc == std::vector<int>{1, 3});

    auto [all, none] = topk_prune<double>({0.5, 0.1, 0.4, 0.2}, 1.0);
    CHECK(all == std::vector<int>{0, 1, 2, 3});
    CHECK(none.empty());

    // ties break toward the lower index
    auto [tied, rest] = topk_prune<double>({1.0, 1.0, 0.0, 1.0}, 0.5);
    CHECK(tied == std::vector<int>{0, 1});
    CHECK(rest == std::vector<int>{2, 3});

    // pinned count at reference scale
    std::vector<double> scores(1568);
    Rng rng(23);
    for (auto& v : scores) v = rng.uniform();
    auto [k941, d627] = topk_prune(scores, 0.6);
    CHECK(k941.size() == 941);
    CHECK(d627.size() == 627);

    // keep at least one token
    auto [one, _] = topk_prune<double>({0.3, 0.7}, 0.01);
    CHECK(one.size() == 1);
    CHECK(one[0] == 1);
}

TEST_CASE("topk_prune scale invariance and monotone containment") {
    Rng rng(31);
    std::vector<double> scores(40);
    for (auto& v : scores) v = rng.uniform();
    auto [kept, disc] = topk_prune(scores, 0.4);
    std::vector<double> scaled(scores);
    for (auto& v : scaled) v *= 17.5;
    auto [kept2, disc2] = topk_prune(scaled, 0.4);
    CHECK(kept == kept2);

    std::vector<int> prev;
    for (double rho : {0.1, 0.25, 0.5, 0.75, 1.0}) {
        auto [k, d] = topk_prune(scores, rho);
        std::set<int> cur(k.begin(), k.end());
        for (int i : prev) CHECK(cur.count(i) == 1);
        prev = k;
    }
}

TEST_CASE("merge example: duplicate features attract the merge") {
    // F1=(1,0), F2=(1,0), F3=(0,1); K=1
    std::vector<double> feats{1, 0, 1, 0, 0, 1};
    auto plan = poguise_merge(feats, 3, 2, 0.3);
    REQUIRE(plan.sources.size() == 1);
    CHECK(plan.sources[0] == 0); // tie with row 1 broken low
    CHECK(plan.candidates[0] == 1);
}

TEST_CASE("lambda=1 makes every discarded token a source") {
    Rng rng(37);
    const int n = 9, f = 4;
    std::vector<double> feats(n * f);
    for (auto& v : feats) v = rng.normal();
    auto plan = poguise_merge(feats, n, f, 1.0);
    CHECK(static_cast<int>(plan.sources.size()) == n);
    for (int i = 0; i < n; ++i) {
        CHECK(plan.sources[i] == i);
        CHECK(plan.candidates[i] != i); // diagonal is masked
    }
}

TEST_CASE("merge plan is invariant to positive feature scaling") {
    Rng rng(41);
    const int n = 12, f = 6;
    std::vector<double> feats(n * f);
    for (auto& v : feats) v = rng.normal();
    auto a = poguise_merge(feats, n, f, 0.4);
    std::vector<double> scaled(feats);
    for (auto& v : scaled) v *= 3.25;
    auto b = poguise_merge(scaled, n, f, 0.4);
    CHECK(a.sources == b.sources);
    CHECK(a.candidates == b.candidates);
}

TEST_CASE("merge matches the brute-force oracle on random instances") {
    Rng rng(43);
    for (int trial = 0; trial < 300; ++trial) {
        const int n = 2 + static_cast<int>(rng.uniform_int(0, 30));
        const int f = 2 + static_cast<int>(rng.uniform_int(0, 6));
        const double lambda = rng.uniform(0.05, 1.0);
        std::vector<double> feats(static_cast<std::size_t>(n) * f);
        for (auto& v : feats) v = rng.normal();
        // occasional duplicate rows to force ties
        if (trial % 3 == 0 && n >= 4)
            std::copy(feats.begin(), feats.begin() + f, feats.begin() + 2 * f);
        auto got = poguise_merge(feats, n, f, lambda);
        auto want = oracle_merge(feats, n, f, lambda);
        CHECK(got.sources == want.sources);
        CHECK(got.candidates == want.candidates);
    }
    // degenerate input: merge skipped
    CHECK(poguise_merge(std::vector<double>{1.0, 2.0}, 1, 2, 0.5).sources.empty());
}

TEST_CASE("bipartite merge pairs evens with odds and caps retention") {
    // two identical tokens merge into one pair
    std::vector<double> feats{2, 0, 2, 0};
    auto plan = bipartite_merge(feats, 2, 2, 0.5);
    REQUIRE(plan.sources.size() == 1);
    CHECK(plan.sources[0] == 0);
    CHECK(plan.candidates[0] == 1);

    // beyond half the set: the documented limitation
    Rng rng(47);
    std::vector<double> many(8 * 3);
    for (auto& v : many) v = rng.normal();
    CHECK_THROWS_AS(bipartite_merge(many, 8, 3, 0.8), ConfigError);
    CHECK_NOTHROW(bipartite_merge(many, 8, 3, 0.5));

    // sources are even indices, candidates odd
    auto ok = bipartite_merge(many, 8, 3, 0.5);
    for (std::size_t i = 0; i < ok.sources.size(); ++i) {
        CHECK(ok.sources[i] % 2 == 0);
        CHECK(ok.candidates[i] % 2 == 1);
    }
}

TEST_CASE("bipartite merge matches an exhaustive matcher") {
    Rng rng(53);
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 4 + 2 * static_cast<int>(rng.uniform_int(0, 6));
        const int f = 3;
        std::vector<double> feats(static_cast<std::size_t>(n) * f);
        for (auto& v : feats) v = rng.normal();
        const double lambda = rng.uniform(0.05, 0.5);
        auto got = bipartite_merge(feats, n, f, lambda);

        // oracle: all (even, odd) cosine edges, per-even best with low odd
        // ties, top edges by similarity with low even ties
        auto cos = [&](int a, int b) {
            double dot = 0, na = 0, nb = 0;
            for (int j = 0; j < f; ++j) {
                dot += feats[a * f + j] * feats[b * f + j];
                na += feats[a * f + j] * feats[a * f + j];
                nb += feats[b * f + j] * feats[b * f + j];
            }
            return dot / (std::sqrt(na) * std::sqrt(nb));
        };
        struct Edge {
            int a, b;
            double s;
        };
        std::vector<Edge> edges;
        for (int a = 0; a < n; a += 2) {
            Edge e{a, 1, cos(a, 1)};
            for (int b = 3; b < n; b += 2)
                if (cos(a, b) > e.s) e = {a, b, cos(a, b)};
            edges.push_back(e);
        }
        std::stable_sort(edges.begin(), edges.end(), [](const Edge& x, const Edge& y) {
            if (x.s != y.s) return x.s > y.s;
            return x.a < y.a;
        });
        int kq = static_cast<int>(std::ceil(n * lambda - 0.5));
        if (kq < 1) kq = 1;
        std::vector<std::pair<int, int>> want;
        for (int i = 0; i < kq; ++i) want.emplace_back(edges[i].a, edges[i].b);
        std::sort(want.begin(), want.end());
        REQUIRE(got.sources.size() == want.size());
        for (std::size_t i = 0; i < want.size(); ++i) {
            CHECK(got.sources[i] == want[i].first);
            CHECK(got.candidates[i] == want[i].second);
        }
    }
}

TEST_CASE("apply_selection at rho=1 with merging off is the identity") {
    Rng rng(59);
    auto batch = make_batch(4, 2, 2, 2, rng);
    auto rec = random_record(4, 8, rng);
    SelectionConfig cfg;
    cfg.rho = 1.0;
    cfg.merge_policy = MergePolicy::NONE;
    auto [next, outcome] = apply_selection(batch, rec, cfg, 1, 0);
    CHECK(next.tokens->data == batch.tokens->data); // bitwise
    CHECK(next.origins == batch.origins);
    CHECK(next.alive == batch.alive);
    CHECK(outcome.n_sel == 8);
    CHECK(outcome.n_merge == 0);
    CHECK(outcome.dropped.empty());
}

TEST_CASE("apply_selection reproduces the pinned stage counts") {
    Rng rng(61);
    // visual grid 8 x 14 x 14 = 1568 with 196 pose tokens, tiny dim
    auto batch = make_batch(196, 8, 14, 14, rng, 4);
    auto rec = random_record(196, 1568, rng, 4);
    SelectionConfig cfg; // rho 0.6, lambda 0.3, poguise on K
    auto [next, outcome] = apply_selection(batch, rec, cfg, 4, 0);
    CHECK(outcome.n_sel == 941);
    CHECK(outcome.n_merge == 188);
    CHECK(next.n_vis() == 1129);
    CHECK(next.rows() == 1 + 196 + 1129);
    // class/pose rows untouched
    for (int i = 0; i < 197; ++i)
        for (int j = 0; j < 4; ++j) CHECK(next.tokens->at(i, j) == batch.tokens->at(i, j));
}

TEST_CASE("merged tokens average their parents and split gradients") {
    Rng rng(67);
    auto batch = make_batch(2, 1, 2, 3, rng); // 6 visual tokens
    batch.tokens->requires_grad = true;
    auto rec = random_record(2, 6, rng);
    SelectionConfig cfg;
    cfg.rho = 0.5; // keep 3, discard 3, merge max(1, round(3*0.3)) = 1
    auto [next, outcome] = apply_selection(batch, rec, cfg, 0, 0);
    REQUIRE(outcome.n_merge == 1);
    CHECK(next.n_vis() == 4);

    const int off = 3; // 1 + 2 pose
    const int src = off + outcome.sources[0];
    const int cand = off + outcome.candidates[0];
    const int merged_row = next.rows() - 1;
    for (int j = 0; j < 8; ++j) {
        const double want = 0.5 * (batch.tokens->at(src, j) + batch.tokens->at(cand, j));
        CHECK(std::abs(next.tokens->at(merged_row, j) - want) < 1e-12);
    }
    CHECK(next.origins.back().merged);
    CHECK(next.origins.back().tcube == batch.origins[outcome.sources[0]].tcube);

    // gradient of the merged row flows half to each parent
    auto merged = slice_rows(next.tokens, merged_row, merged_row + 1);
    backward(sum_all(merged));
    for (int j = 0; j < 8; ++j) {
        CHECK(batch.tokens->grad[src * 8 + j] == doctest::Approx(0.5));
        CHECK(batch.tokens->grad[cand * 8 + j] == doctest::Approx(0.5));
    }
}

TEST_CASE("outcome partitions the alive set and trace rows agree") {
    Rng rng(71);
    auto batch = make_batch(3, 2, 2, 3, rng); // 12 visual
    auto rec = random_record(3, 12, rng);
    SelectionConfig cfg;
    cfg.rho = 0.5;
    cfg.lambda = 0.6;
    auto [next, outcome] = apply_selection(batch, rec, cfg, 1, 2);

    std::set<int> seen;
    for (int i : outcome.kept) seen.insert(i);
    for (int i : outcome.sources) seen.insert(i);
    for (int i : outcome.candidates) seen.insert(i);
    for (int i : outcome.dropped) seen.insert(i);
    CHECK(seen.size() == 12); // kept + sources + candidates + dropped covers everything
    for (int i : outcome.kept) {
        CHECK(!std::count(outcome.sources.begin(), outcome.sources.end(), i));
        CHECK(!std::count(outcome.dropped.begin(), outcome.dropped.end(), i));
    }
    CHECK(outcome.n_sel == 6);
    CHECK(outcome.n_merge == 4); // round_count(6 * 0.6)

    auto rows = trace_rows(outcome, batch.origins);
    CHECK(rows.size() == 12);
    int kept = 0, srcs = 0, cands = 0, dropped = 0;
    for (const auto& r : rows) {
        CHECK(r.stage == 2);
        if (r.status == "kept") ++kept;
        if (r.status == "merged-source") ++srcs;
        if (r.status == "merged-candidate") ++cands;
        if (r.status == "dropped") ++dropped;
    }
    CHECK(kept == outcome.n_sel);
    CHECK(srcs == outcome.n_merge);
    CHECK(kept + srcs + cands + dropped == 12);

    // alive mask: kept and sources survive, the rest die
    int alive_now = 0;
    for (auto a : next.alive) alive_now += a;
    CHECK(alive_now == outcome.n_sel + outcome.n_merge);
}
