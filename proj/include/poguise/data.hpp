#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "poguise/heatmap.hpp"

namespace poguise {

// The five stick-actor landmarks, in annotation order.
enum ActorLandmark { kHead = 0, kLeftHand, kRightHand, kLeftFoot, kRightFoot };
inline constexpr int kActorLandmarks = 5;

// Synthetic action classes: 0 = hands oscillate vertically, 1 = horizontal
// translation, 2 = right hand circles, 3 = still. Classes beyond 3 reuse the
// patterns with a faster tempo so any count stays separable.
struct SyntheticSpec {
    int num_classes = 4;
    int clips_per_class = 50;
    int frames = 12; // longer than the toy model window, so training crops
    int height = 48;
    int width = 48;
    int persons = 1;
    double noise = 0.02;
    double train_fraction = 0.8;
    std::uint64_t seed = 1;

    void validate() const;
};

struct GeneratedClip {
    std::vector<float> pixels; // frames x 1 x height x width, row-major
    std::vector<KeypointAnnotation> annotations; // one per (frame, person)
    int label = 0;
};

// Deterministic in (spec, label, seed); annotations are the exact integer
// blob centers at confidence 1.
GeneratedClip generate_clip(const SyntheticSpec& spec, int label, std::uint64_t seed);

struct ClipEntry {
    std::string id;
    std::string file; // relative to the dataset directory
    int label = 0;
    std::string split; // "train" or "test"
};

struct DatasetIndex {
    std::string dir;
    std::vector<std::string> classes;
    std::vector<ClipEntry> clips;
    std::map<std::string, std::vector<KeypointAnnotation>> annotations; // by clip id

    std::vector<std::size_t> split_indices(const std::string& split) const;
};

// Lays out <dir>/manifest.json, <dir>/annotations.jsonl and
// <dir>/clips/<id>.ptnsr. Per-clip seeds are split off the master seed so
// clips are independent of generation order.
DatasetIndex write_dataset(const SyntheticSpec& spec, const std::string& dir);

// Validates the manifest (known splits, unique ids, listed files present).
DatasetIndex read_dataset(const std::string& dir);

// Clip pixels as written, shape-checked against the expectation if given.
std::vector<float> load_clip(const DatasetIndex& index, const ClipEntry& entry);

// Supervision target over a frame window [begin, end): per person average the
// frame heatmaps, then take the pointwise max across persons.
template <typename T>
HeatmapSet<T> target_heatmaps(const std::vector<KeypointAnnotation>& anns, int frame_begin,
                              int frame_end, int gh, int gw, int img_h, int img_w) {
    std::map<int, std::vector<HeatmapSet<T>>> per_person;
    for (const auto& ann : anns) {
        if (ann.frame < frame_begin || ann.frame >= frame_end) continue;
        per_person[ann.person].push_back(render_annotation<T>(ann, gh, gw, img_h, img_w));
    }
    if (per_person.empty()) throw ShapeError("no annotations in the requested frame window");
    std::vector<HeatmapSet<T>> averaged;
    for (auto& [person, frames] : per_person) averaged.push_back(time_average(frames));
    return combine_multiperson(averaged);
}

} // namespace poguise
