#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "poguise/errors.hpp"

namespace poguise {

// One landmark detection in input-pixel coordinates.
struct Keypoint {
    double x = 0.0;
    double y = 0.0;
    double confidence = 0.0;
};

// All landmarks of one person in one frame.
struct KeypointAnnotation {
    std::string clip;
    int frame = 0;
    int person = 0;
    std::vector<Keypoint> kps;
};

inline constexpr double kHeatmapSigma = 2.0;          // in heatmap cells
inline constexpr double kConfidenceThreshold = 0.3;   // validity cutoff

// Per-landmark spatial maps in [0,1] plus a validity mask. Invalid landmarks
// carry all-zero maps and are excluded from losses and metrics.
template <typename T>
struct HeatmapSet {
    int landmarks = 0, gh = 0, gw = 0;
    std::vector<T> maps;              // landmarks * gh * gw
    std::vector<std::uint8_t> valid;  // landmarks

    static HeatmapSet zeros(int landmarks, int gh, int gw) {
        HeatmapSet s;
        s.landmarks = landmarks;
        s.gh = gh;
        s.gw = gw;
        s.maps.assign(static_cast<std::size_t>(landmarks) * gh * gw, T(0));
        s.valid.assign(landmarks, 0);
        return s;
    }
    T* map(int l) { return maps.data() + static_cast<std::size_t>(l) * gh * gw; }
    const T* map(int l) const { return maps.data() + static_cast<std::size_t>(l) * gh * gw; }
};

// Gaussian bump centered on the grid cell nearest to (gx, gy) (grid-space
// coordinates), peak exactly 1 there. Out-of-grid centers render nothing.
template <typename T>
bool render_gaussian(double gx, double gy, double sigma, int gh, int gw, T* out) {
    std::fill(out, out + static_cast<std::size_t>(gh) * gw, T(0));
    if (!(gx >= 0.0 && gx < gw && gy >= 0.0 && gy < gh)) return false;
    const int cx = std::min(gw - 1, static_cast<int>(std::lround(gx)));
    const int cy = std::min(gh - 1, static_cast<int>(std::lround(gy)));
    const double inv = 1.0 / (2.0 * sigma * sigma);
    for (int v = 0; v < gh; ++v)
        for (int u = 0; u < gw; ++u) {
            const double du = u - cx, dv = v - cy;
            out[static_cast<std::size_t>(v) * gw + u] =
                static_cast<T>(std::exp(-(du * du + dv * dv) * inv));
        }
    return true;
}

// Renders one person's annotation to heatmaps. Pixel coordinates map to the
// grid by uniform scaling; low-confidence or out-of-frame landmarks go
// invalid with zero maps.
template <typename T>
HeatmapSet<T> render_annotation(const KeypointAnnotation& ann, int gh, int gw, int img_h, int img_w,
                                double sigma = kHeatmapSigma,
                                double conf_threshold = kConfidenceThreshold) {
    auto set = HeatmapSet<T>::zeros(static_cast<int>(ann.kps.size()), gh, gw);
    for (std::size_t l = 0; l < ann.kps.size(); ++l) {
        const auto& kp = ann.kps[l];
        if (kp.confidence <= conf_threshold) continue;
        const double gx = kp.x * gw / img_w;
        const double gy = kp.y * gh / img_h;
        if (render_gaussian(gx, gy, sigma, gh, gw, set.map(static_cast<int>(l))))
            set.valid[l] = 1;
    }
    return set;
}

// Elementwise mean per landmark over the frames where it is valid; valid iff
// valid in at least one frame.
template <typename T>
HeatmapSet<T> time_average(const std::vector<HeatmapSet<T>>& frames) {
    if (frames.empty()) throw ShapeError("time_average of an empty clip");
    const int L = frames[0].landmarks, gh = frames[0].gh, gw = frames[0].gw;
    for (const auto& f : frames)
        if (f.landmarks != L || f.gh != gh || f.gw != gw)
            throw ShapeError("frames disagree on grid or landmark count");
    auto out = HeatmapSet<T>::zeros(L, gh, gw);
    const std::size_t cells = static_cast<std::size_t>(gh) * gw;
    for (int l = 0; l < L; ++l) {
        int count = 0;
        for (const auto& f : frames) {
            if (!f.valid[l]) continue;
            ++count;
            const T* src = f.map(l);
            T* dst = out.map(l);
            for (std::size_t i = 0; i < cells; ++i) dst[i] += src[i];
        }
        if (count > 0) {
            out.valid[l] = 1;
            T* dst = out.map(l);
            const T inv = T(1) / static_cast<T>(count);
            for (std::size_t i = 0; i < cells; ++i) dst[i] *= inv;
        }
    }
    return out;
}

// Elementwise max per landmark over the persons where it is valid; valid iff
// any person is.
template <typename T>
HeatmapSet<T> combine_multiperson(const std::vector<HeatmapSet<T>>& persons) {
    if (persons.empty()) throw ShapeError("combine_multiperson of nobody");
    const int L = persons[0].landmarks, gh = persons[0].gh, gw = persons[0].gw;
    for (const auto& p : persons)
        if (p.landmarks != L || p.gh != gh || p.gw != gw)
            throw ShapeError("persons disagree on grid or landmark count");
    auto out = HeatmapSet<T>::zeros(L, gh, gw);
    const std::size_t cells = static_cast<std::size_t>(gh) * gw;
    for (int l = 0; l < L; ++l)
        for (const auto& p : persons) {
            if (!p.valid[l]) continue;
            out.valid[l] = 1;
            const T* src = p.map(l);
            T* dst = out.map(l);
            for (std::size_t i = 0; i < cells; ++i) dst[i] = std::max(dst[i], src[i]);
        }
    return out;
}

struct DecodedKeypoint {
    int x = 0; // grid column
    int y = 0; // grid row
    bool valid = false;
};

// Per-channel argmax cell, ties to the lowest row-major index; all-zero
// channels decode as invalid.
template <typename T>
std::vector<DecodedKeypoint> decode_keypoints(const HeatmapSet<T>& pred) {
    std::vector<DecodedKeypoint> out(pred.landmarks);
    const std::size_t cells = static_cast<std::size_t>(pred.gh) * pred.gw;
    for (int l = 0; l < pred.landmarks; ++l) {
        const T* m = pred.map(l);
        std::size_t arg = 0;
        bool all_zero = m[0] == T(0);
        for (std::size_t i = 1; i < cells; ++i) {
            if (m[i] != T(0)) all_zero = false;
            if (m[i] > m[arg]) arg = i;
        }
        if (all_zero) continue;
        out[l].x = static_cast<int>(arg % pred.gw);
        out[l].y = static_cast<int>(arg / pred.gw);
        out[l].valid = true;
    }
    return out;
}

// Mean absolute error over cells of the channels valid in both sets
// (prediction sets every channel valid; ground truth masks the rest).
template <typename T>
double heatmap_mae(const HeatmapSet<T>& pred, const HeatmapSet<T>& gt) {
    if (pred.landmarks != gt.landmarks || pred.gh != gt.gh || pred.gw != gt.gw)
        throw ShapeError("heatmap sets disagree on shape");
    const std::size_t cells = static_cast<std::size_t>(gt.gh) * gt.gw;
    double acc = 0.0;
    std::size_t n = 0;
    for (int l = 0; l < gt.landmarks; ++l) {
        if (!gt.valid[l] || !pred.valid[l]) continue;
        const T* a = pred.map(l);
        const T* b = gt.map(l);
        for (std::size_t i = 0; i < cells; ++i) acc += std::abs(static_cast<double>(a[i]) - b[i]);
        n += cells;
    }
    return n == 0 ? 0.0 : acc / static_cast<double>(n);
}

} // namespace poguise
