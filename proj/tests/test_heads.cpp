#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "poguise/gradcheck.hpp"
#include "poguise/heads.hpp"
#include "poguise/rng.hpp"

using namespace poguise;

namespace {

TensorPtr<double> randn(std::vector<int> dims, Rng& rng, double s = 0.5, bool grad = true) {
    auto t = tensor<double>(std::move(dims), grad);
    for (auto& v : t->data) v = rng.normal(0.0, s);
    return t;
}

} // namespace

TEST_CASE("zero classifier weights give uniform logits of the bias") {
    auto w = ClassifierWeights<double>{tensor<double>({6, 6}), tensor<double>({6}),
                                       tensor<double>({6, 4}), tensor<double>({4})};
    w.b2->data = {0.1, 0.2, 0.3, 0.4};
    Rng rng(1);
    auto logits = classify(randn({1, 6}, rng), w);
    REQUIRE(logits->dims == std::vector<int>{1, 4});
    for (int j = 0; j < 4; ++j) CHECK(logits->data[j] == doctest::Approx(0.1 * (j + 1)));
    CHECK_THROWS_AS(classify(randn({2, 6}, rng), w), ShapeError);
}

TEST_CASE("classifier gradients check out") {
    Rng rng(2);
    auto w = init_classifier<double>(5, 3, rng);
    auto x = randn({1, 5}, rng);
    auto res = grad_check<double>(
        [&](const std::vector<TensorPtr<double>>&) { return loss_cls(classify(x, w), 1, 0.1); },
        {x, w.w1, w.b1, w.w2, w.b2});
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("decoder upsamples a 2x2 grid to 8x8 maps") {
    Rng rng(3);
    auto w = init_decoder<double>(6, 5, 3, rng);
    auto tokens = randn({4, 6}, rng);
    auto maps = decode_heatmaps(tokens, 2, 2, w);
    CHECK(maps->dims == std::vector<int>{3, 8, 8});
    CHECK_THROWS_AS(decode_heatmaps(tokens, 2, 3, w), ShapeError);
}

TEST_CASE("decoder output scales to the 14x14 -> 56x56 reference grid") {
    NoGradGuard off;
    Rng rng(4);
    auto w = init_decoder<double>(4, 3, 2, rng);
    auto tokens = randn({14 * 14, 4}, rng, 0.5, false);
    auto maps = decode_heatmaps(tokens, 14, 14, w);
    CHECK(maps->dims == std::vector<int>{2, 56, 56});
}

TEST_CASE("decoder is linear in its input: no hidden activations") {
    NoGradGuard off;
    Rng rng(5);
    auto w = init_decoder<double>(3, 4, 2, rng);
    auto a = randn({4, 3}, rng, 0.5, false);
    auto b = randn({4, 3}, rng, 0.5, false);
    auto mid = tensor<double>({4, 3});
    for (int i = 0; i < 12; ++i) mid->data[i] = 0.5 * (a->data[i] + b->data[i]);
    auto ya = decode_heatmaps(a, 2, 2, w);
    auto yb = decode_heatmaps(b, 2, 2, w);
    auto ym = decode_heatmaps(mid, 2, 2, w);
    for (int i = 0; i < ym->size(); ++i)
        CHECK(ym->data[i] == doctest::Approx(0.5 * (ya->data[i] + yb->data[i])).epsilon(1e-10));
}

TEST_CASE("decoder gradients check out") {
    // weights well away from zero so no gradient sinks into rounding noise
    Rng rng(1);
    DecoderWeights<double> w;
    w.deconv1_w = randn({3, 2, 4, 4}, rng);
    w.deconv1_b = randn({2}, rng, 0.1);
    w.deconv2_w = randn({2, 2, 4, 4}, rng);
    w.deconv2_b = randn({2}, rng, 0.1);
    w.proj_w = randn({2, 2}, rng);
    w.proj_b = randn({2}, rng, 0.1);
    auto tokens = randn({4, 3}, rng);
    auto gt = HeatmapSet<double>::zeros(2, 8, 8);
    gt.valid = {1, 1};
    for (auto& v : gt.maps) v = rng.uniform();
    auto res = grad_check<double>(
        [&](const std::vector<TensorPtr<double>>&) {
            return loss_hm(decode_heatmaps(tokens, 2, 2, w), gt, 1000.0);
        },
        {tokens, w.deconv1_w, w.deconv1_b, w.deconv2_w, w.deconv2_b, w.proj_w, w.proj_b});
    CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("classification loss pins known values") {
    // uniform logits: loss is ln(C) for any smoothing
    auto logits = tensor<double>({1, 4});
    CHECK(loss_cls(logits, 2, 0.1)->data[0] == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    // strongly peaked on the target approaches zero at smoothing 0
    logits->data = {0.0, 30.0, 0.0, 0.0};
    CHECK(loss_cls(logits, 1, 0.0)->data[0] < 1e-9);
}

TEST_CASE("heatmap loss equals ln(1 + scale * mse)") {
    // constant prediction error d on one valid channel of known size
    const double d = std::sqrt(1e-3);
    auto pred = tensor<double>({2, 2, 2});
    pred->data = {d, d, d, d, 9, 9, 9, 9};
    auto gt = HeatmapSet<double>::zeros(2, 2, 2);
    gt.valid = {1, 0}; // the 9s sit on an invalid channel and must not count
    auto l = loss_hm(pred, gt, 1000.0);
    CHECK(l->data[0] == doctest::Approx(std::log(2.0)).epsilon(1e-9));

    // perfect prediction: zero loss
    auto zero = tensor<double>({2, 2, 2});
    CHECK(loss_hm(zero, gt, 1000.0)->data[0] == 0.0);

    // nothing valid: zero loss, no gradient explosion
    gt.valid = {0, 0};
    auto none = loss_hm(pred, gt, 1000.0);
    CHECK(none->data[0] == 0.0);

    CHECK_THROWS_AS(loss_hm(tensor<double>({3, 2, 2}), gt, 1000.0), ShapeError);
}

TEST_CASE("total loss weights its two parts") {
    HeadConfig cfg;
    cfg.w_cls = 2.0;
    cfg.w_hm = 0.5;
    auto total = total_loss(scalar_tensor(3.0), scalar_tensor(4.0), cfg);
    CHECK(total->data[0] == doctest::Approx(8.0));
}
