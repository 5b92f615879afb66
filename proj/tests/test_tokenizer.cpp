#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "poguise/rng.hpp"
#include "poguise/tokenizer.hpp"

using namespace poguise;

namespace {

std::vector<double> random_clip(const ClipSpec& spec, Rng& rng) {
    std::vector<double> clip(static_cast<std::size_t>(spec.frames) * spec.channels * spec.height *
                             spec.width);
    for (auto& v : clip) v = rng.uniform();
    return clip;
}

ClipSpec toy_clip() {
    ClipSpec s;
    s.frames = 4;
    s.height = s.width = 32;
    return s;
}

} // namespace

TEST_CASE("token count identity across clip specs") {
    ClipSpec ref; // 16 x 224 x 224
    CHECK(ref.t() == 8);
    CHECK(ref.h() == 14);
    CHECK(ref.n_vis() == 1568);
    CHECK(ref.n_p() == 196);

    ClipSpec toy = toy_clip();
    CHECK(toy.n_vis() == 8);
    CHECK(toy.n_p() == 4);

    for (int frames : {2, 4, 8, 16})
        for (int hw : {16, 32, 48}) {
            ClipSpec s;
            s.frames = frames;
            s.height = s.width = hw;
            const int t = frames / 2, g = hw / 16;
            CHECK(1 + s.n_p() + s.n_vis() == 1 + g * g + t * g * g);
        }

    ClipSpec bad;
    bad.frames = 7;
    CHECK_THROWS_AS(bad.validate(), ShapeError);
    bad = ClipSpec{};
    bad.height = 100;
    CHECK_THROWS_AS(bad.validate(), ShapeError);
}

TEST_CASE("cube gather/scatter is a bijection") {
    Rng rng(5);
    ClipSpec spec = toy_clip();
    spec.channels = 2;
    auto clip = random_clip(spec, rng);
    auto back = cube_scatter(cube_gather(clip, spec), spec);
    CHECK(back == clip); // bitwise
}

TEST_CASE("visual origins identify the producing cube") {
    ClipSpec spec = toy_clip();
    const auto origins = initial_origins(spec);
    REQUIRE(static_cast<int>(origins.size()) == spec.n_vis());

    // fill each cube with its flat origin index, gather, and check each row
    std::vector<double> clip(static_cast<std::size_t>(spec.frames) * spec.height * spec.width);
    for (int f = 0; f < spec.frames; ++f)
        for (int y = 0; y < spec.height; ++y)
            for (int x = 0; x < spec.width; ++x) {
                const int flat = ((f / spec.cube_t) * spec.h() + y / spec.cube_hw) * spec.w() +
                                 x / spec.cube_hw;
                clip[(static_cast<std::size_t>(f) * spec.height + y) * spec.width + x] = flat;
            }
    const auto cubes = cube_gather(clip, spec);
    const int vol = spec.cube_volume();
    for (int i = 0; i < spec.n_vis(); ++i) {
        const int flat = (origins[i].tcube * spec.h() + origins[i].row) * spec.w() + origins[i].col;
        CHECK(flat == i);
        for (int j = 0; j < vol; ++j) CHECK(cubes[static_cast<std::size_t>(i) * vol + j] == i);
    }
    // origins are unique
    for (std::size_t a = 0; a < origins.size(); ++a)
        for (std::size_t b = a + 1; b < origins.size(); ++b) CHECK(!(origins[a] == origins[b]));
}

TEST_CASE("zero clip with zero bias embeds to the positional table") {
    ClipSpec spec = toy_clip();
    ModelConfig cfg;
    cfg.clip = spec;
    cfg.encoder.dim = 16;
    cfg.encoder.heads = 2;
    Rng rng(3);
    auto w = init_tokenizer<double>(cfg, rng);
    std::fill(w.proj_b->data.begin(), w.proj_b->data.end(), 0.0);

    std::vector<double> zeros(static_cast<std::size_t>(spec.frames) * spec.height * spec.width, 0.0);
    auto batch = tokenize(zeros, spec, w, true);
    CHECK(batch.rows() == 1 + 4 + 8);
    const int off = batch.vis_offset();
    for (int i = 0; i < spec.n_vis(); ++i)
        for (int j = 0; j < 16; ++j)
            CHECK(batch.tokens->at(off + i, j) == doctest::Approx(w.pos->at(i, j)).epsilon(1e-15));
}

TEST_CASE("positional embedding adds row i to token i") {
    Rng rng(9);
    auto vis = tensor<double>({4, 3});
    for (auto& v : vis->data) v = rng.normal();
    auto table = tensor<double>({4, 3});

    // zero table is the identity
    auto same = positional_embed(vis, table);
    CHECK(same->data == vis->data);

    // perturb one row; only that token moves
    table->data[2 * 3 + 1] = 5.0;
    auto shifted = positional_embed(vis, table);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 3; ++j) {
            const double want = vis->at(i, j) + ((i == 2 && j == 1) ? 5.0 : 0.0);
            CHECK(shifted->at(i, j) == doctest::Approx(want).epsilon(1e-15));
        }

    // permuting table rows permutes which token gets which offset
    Rng rng2(10);
    for (auto& v : table->data) v = rng2.normal();
    auto swapped = tensor<double>({4, 3});
    for (int j = 0; j < 3; ++j) {
        swapped->at(0, j) = table->at(1, j);
        swapped->at(1, j) = table->at(0, j);
        swapped->at(2, j) = table->at(2, j);
        swapped->at(3, j) = table->at(3, j);
    }
    auto a = positional_embed(vis, table);
    auto b = positional_embed(vis, swapped);
    for (int j = 0; j < 3; ++j) {
        CHECK(b->at(0, j) == doctest::Approx(vis->at(0, j) + table->at(1, j)));
        CHECK(b->at(1, j) == doctest::Approx(vis->at(1, j) + table->at(0, j)));
        CHECK(b->at(2, j) == doctest::Approx(a->at(2, j)));
    }

    CHECK_THROWS_AS(positional_embed(vis, tensor<double>({5, 3})), ShapeError);
}

TEST_CASE("tokenize without pose tokens") {
    ClipSpec spec = toy_clip();
    ModelConfig cfg;
    cfg.clip = spec;
    cfg.encoder.dim = 8;
    cfg.encoder.heads = 2;
    cfg.pose_tokens = false;
    cfg.selection.score_policy = ScorePolicy::CLASS;
    Rng rng(1);
    auto w = init_tokenizer<double>(cfg, rng);
    Rng crng(2);
    auto clip = random_clip(spec, crng);
    auto batch = tokenize(clip, spec, w, false);
    CHECK(batch.n_p == 0);
    CHECK(batch.rows() == 1 + 8);
    CHECK(batch.alive == std::vector<std::uint8_t>(8, 1));
}
