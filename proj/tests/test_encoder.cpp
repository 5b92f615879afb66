#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "poguise/encoder.hpp"
#include "poguise/gradcheck.hpp"
#include "poguise/rng.hpp"

using namespace poguise;

namespace {

TensorPtr<double> randn(std::vector<int> dims, Rng& rng, bool rg = false) {
    auto t = tensor<double>(std::move(dims), rg);
    for (auto& v : t->data) v = rng.normal();
    return t;
}

BlockWeights<double> random_block(int d, Rng& rng) {
    auto w = init_block<double>(d, 4, rng);
    // weights large enough that attention is far from uniform, plus
    // non-trivial norms and biases, so tests exercise every term
    for (auto p : {w.wq, w.wk, w.wv, w.wo, w.w1, w.w2})
        for (auto& v : p->data) v = 0.4 * rng.normal();
    for (auto& v : w.ln1_g->data) v = 1.0 + 0.1 * rng.normal();
    for (auto& v : w.ln2_g->data) v = 1.0 + 0.1 * rng.normal();
    for (auto p : {w.bq, w.bk, w.bv, w.bo, w.b1, w.b2, w.ln1_b, w.ln2_b})
        for (auto& v : p->data) v = 0.1 * rng.normal();
    return w;
}

// Plain-loop attention reference: per-head softmax(QK^T/sqrt(dh))V, heads
// concatenated, projected; also returns the head-averaged attention.
void reference_mhsa(const std::vector<double>& x, int n, int d, const BlockWeights<double>& w,
                    int heads, std::vector<double>& out, std::vector<double>& attn_avg) {
    const int dh = d / heads;
    auto proj = [&](const TensorPtr<double>& wm, const TensorPtr<double>& b, int col_out,
                    std::vector<double>& dst) {
        dst.assign(static_cast<std::size_t>(n) * col_out, 0.0);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < col_out; ++j) {
                double s = b->data[j];
                for (int k = 0; k < d; ++k) s += x[i * d + k] * wm->at(k, j);
                dst[i * col_out + j] = s;
            }
    };
    std::vector<double> q, k, v;
    proj(w.wq, w.bq, d, q);
    proj(w.wk, w.bk, d, k);
    proj(w.wv, w.bv, d, v);

    attn_avg.assign(static_cast<std::size_t>(n) * n, 0.0);
    std::vector<double> heads_out(static_cast<std::size_t>(n) * d, 0.0);
    for (int m = 0; m < heads; ++m) {
        for (int i = 0; i < n; ++i) {
            std::vector<double> row(n);
            double mx = -1e300;
            for (int j = 0; j < n; ++j) {
                double s = 0;
                for (int c = 0; c < dh; ++c) s += q[i * d + m * dh + c] * k[j * d + m * dh + c];
                row[j] = s / std::sqrt(static_cast<double>(dh));
                mx = std::max(mx, row[j]);
            }
            double z = 0;
            for (int j = 0; j < n; ++j) {
                row[j] = std::exp(row[j] - mx);
                z += row[j];
            }
            for (int j = 0; j < n; ++j) {
                row[j] /= z;
                attn_avg[i * n + j] += row[j] / heads;
            }
            for (int c = 0; c < dh; ++c) {
                double s = 0;
                for (int j = 0; j < n; ++j) s += row[j] * v[j * d + m * dh + c];
                heads_out[i * d + m * dh + c] = s;
            }
        }
    }
    out.assign(static_cast<std::size_t>(n) * d, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) {
            double s = w.bo->data[j];
            for (int c = 0; c < d; ++c) s += heads_out[i * d + c] * w.wo->at(c, j);
            out[i * d + j] = s;
        }
}

} // namespace

TEST_CASE("single token attends only to itself") {
    Rng rng(1);
    const int d = 6;
    auto w = random_block(d, rng);
    // identity output projection isolates the value pathway
    std::fill(w.wo->data.begin(), w.wo->data.end(), 0.0);
    for (int i = 0; i < d; ++i) w.wo->at(i, i) = 1.0;
    std::fill(w.bo->data.begin(), w.bo->data.end(), 0.0);

    auto x = randn({1, d}, rng);
    AttentionRecord<double> rec;
    auto out = mhsa(x, w, 2, {true, false}, &rec);
    REQUIRE(rec.attn.size() == 1);
    CHECK(rec.attn[0] == doctest::Approx(1.0).epsilon(1e-15));
    // output equals the value projection of the single token
    auto v = linear(x, w.wv, w.bv);
    for (int j = 0; j < d; ++j) CHECK(out->at(0, j) == doctest::Approx(v->at(0, j)).epsilon(1e-12));
}

TEST_CASE("mhsa matches the brute-force reference") {
    Rng rng(7);
    const int n = 8, d = 12, heads = 3;
    auto w = random_block(d, rng);
    auto x = randn({n, d}, rng);

    AttentionRecord<double> rec;
    auto out = mhsa(x, w, heads, {true, true}, &rec);

    std::vector<double> want_out, want_attn;
    reference_mhsa(x->data, n, d, w, heads, want_out, want_attn);
    for (std::size_t i = 0; i < want_out.size(); ++i)
        CHECK(out->data[i] == doctest::Approx(want_out[i]).epsilon(1e-10));
    for (std::size_t i = 0; i < want_attn.size(); ++i)
        CHECK(rec.attn[i] == doctest::Approx(want_attn[i]).epsilon(1e-10));

    // the averaged rows stay stochastic
    for (int i = 0; i < n; ++i) {
        double s = 0;
        for (int j = 0; j < n; ++j) s += rec.attn_at(i, j);
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
    // q/k snapshots match the projections
    auto q = linear(x, w.wq, w.bq);
    for (std::size_t i = 0; i < q->data.size(); ++i) CHECK(rec.q[i] == q->data[i]);
}

TEST_CASE("mhsa is permutation equivariant") {
    Rng rng(13);
    const int n = 6, d = 8, heads = 2;
    auto w = random_block(d, rng);
    auto x = randn({n, d}, rng);
    const std::vector<int> perm{3, 0, 5, 1, 4, 2};
    auto xp = gather_rows(x, perm);

    AttentionRecord<double> ra, rp;
    auto ya = mhsa(x, w, heads, {true, false}, &ra);
    auto yp = mhsa(xp, w, heads, {true, false}, &rp);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
            CHECK(yp->at(i, j) == doctest::Approx(ya->at(perm[i], j)).epsilon(1e-12));
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            CHECK(rp.attn_at(i, j) == doctest::Approx(ra.attn_at(perm[i], perm[j])).epsilon(1e-12));
}

TEST_CASE("zero-weight MLP reduces the block to its attention half") {
    Rng rng(19);
    const int d = 8;
    auto w = random_block(d, rng);
    std::fill(w.w2->data.begin(), w.w2->data.end(), 0.0);
    std::fill(w.b2->data.begin(), w.b2->data.end(), 0.0);
    auto x = randn({4, d}, rng);
    auto full = vit_block(x, w, 2);
    auto attn_half = add(x, mhsa(layernorm(x, w.ln1_g, w.ln1_b), w, 2));
    for (std::size_t i = 0; i < full->data.size(); ++i)
        CHECK(full->data[i] == doctest::Approx(attn_half->data[i]).epsilon(1e-14));
}

TEST_CASE("block preserves shape") {
    Rng rng(23);
    const int d = 64;
    auto w = init_block<double>(d, 4, rng);
    auto x = randn({1 + 4 + 8, d}, rng);
    auto y = vit_block(x, w, 4);
    CHECK(y->dims == x->dims);
}

TEST_CASE("grad_check through a full block") {
    Rng rng(29);
    const int n = 5, d = 8;
    auto w = random_block(d, rng);
    auto x = randn({n, d}, rng, true);

    std::vector<TensorPtr<double>> leaves{x,    w.ln1_g, w.ln1_b, w.wq, w.bq, w.wk, w.bk,
                                          w.wv, w.bv,    w.wo,    w.bo, w.ln2_g, w.ln2_b,
                                          w.w1, w.b1,    w.w2,    w.b2};
    auto res = grad_check<double>(
        [&](const std::vector<TensorPtr<double>>& l) {
            BlockWeights<double> bw;
            bw.ln1_g = l[1];
            bw.ln1_b = l[2];
            bw.wq = l[3];
            bw.bq = l[4];
            bw.wk = l[5];
            bw.bk = l[6];
            bw.wv = l[7];
            bw.bv = l[8];
            bw.wo = l[9];
            bw.bo = l[10];
            bw.ln2_g = l[11];
            bw.ln2_b = l[12];
            bw.w1 = l[13];
            bw.b1 = l[14];
            bw.w2 = l[15];
            bw.b2 = l[16];
            auto y = vit_block(l[0], bw, 2);
            // quadratic readout, kept small: the key bias has an exactly
            // zero gradient (softmax cancels per-row score shifts), so the
            // finite-difference side there is pure rounding noise scaled by
            // the readout magnitude
            return scale(mean_all(mul(y, y)), 0.0001);
        },
        leaves);
    INFO("worst " << res.worst << " rel err " << res.max_rel_err);
    CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("key bias gradient vanishes: softmax ignores per-row score shifts") {
    Rng rng(31);
    const int d = 8;
    auto w = random_block(d, rng);
    auto x = randn({6, d}, rng, true);
    auto y = mhsa(x, w, 2);
    backward(mean_all(mul(y, y)));
    for (double g : w.bk->grad) CHECK(std::abs(g) < 1e-14);
    // the query bias, by contrast, does move the output
    double qnorm = 0;
    for (double g : w.bq->grad) qnorm += g * g;
    CHECK(qnorm > 1e-8);
}
