#include "poguise/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

#include "poguise/io.hpp"
#include "poguise/rng.hpp"

namespace poguise {

namespace fs = std::filesystem;
using nlohmann::json;

void SyntheticSpec::validate() const {
    if (num_classes < 2) throw ConfigError("need at least two classes");
    if (clips_per_class < 1) throw ConfigError("need at least one clip per class");
    if (frames < 4 || frames > 16) throw ConfigError("frames must be in [4, 16]");
    if (height < 32 || height > 64 || width < 32 || width > 64)
        throw ConfigError("frame size must be in [32, 64]");
    if (persons != 1 && persons != 2) throw ConfigError("persons must be 1 or 2");
    if (noise < 0.0 || noise > 0.2) throw ConfigError("noise level must be in [0, 0.2]");
    if (train_fraction <= 0.0 || train_fraction >= 1.0)
        throw ConfigError("train fraction must be in (0, 1)");
}

namespace {

constexpr double kBlobSigma = 1.2; // pixels
// motion amplitudes; large enough that moving landmarks cross 16-pixel
// patch boundaries instead of staying inside one embedding cube
constexpr double kHandSwing = 10.0;
constexpr double kCircleRadius = 8.0;
constexpr double kWalkSpeed = 2.0;  // pixels per frame
// periodic patterns complete one cycle per this many frames, independent of
// the clip length, so a window cropped from a longer clip sees the same
// motion energy
constexpr double kBasePeriod = 8.0;
// widest the actor gets around its base point: the right hand at +5 plus the
// circling radius; tallest: hands at -2 minus the swing, or the head at -7
constexpr int kReachX = 5 + static_cast<int>(kCircleRadius);
constexpr int kReachY = std::max(7, 2 + static_cast<int>(kHandSwing));

struct Pose {
    int x[kActorLandmarks];
    int y[kActorLandmarks];
};

// Actor layout at base (cx, cy), before any motion.
Pose rest_pose(int cx, int cy) {
    Pose p{};
    p.x[kHead] = cx;
    p.y[kHead] = cy - 7;
    p.x[kLeftHand] = cx - 5;
    p.y[kLeftHand] = cy - 2;
    p.x[kRightHand] = cx + 5;
    p.y[kRightHand] = cy - 2;
    p.x[kLeftFoot] = cx - 3;
    p.y[kLeftFoot] = cy + 7;
    p.x[kRightFoot] = cx + 3;
    p.y[kRightFoot] = cy + 7;
    return p;
}

void splat(float* frame, int h, int w, int kx, int ky) {
    const int radius = 5;
    const double inv = 1.0 / (2.0 * kBlobSigma * kBlobSigma);
    for (int y = std::max(0, ky - radius); y <= std::min(h - 1, ky + radius); ++y)
        for (int x = std::max(0, kx - radius); x <= std::min(w - 1, kx + radius); ++x) {
            const double d2 = static_cast<double>(x - kx) * (x - kx) +
                              static_cast<double>(y - ky) * (y - ky);
            auto& px = frame[static_cast<std::size_t>(y) * w + x];
            px = std::max(px, static_cast<float>(std::exp(-d2 * inv)));
        }
}

} // namespace

GeneratedClip generate_clip(const SyntheticSpec& spec, int label, std::uint64_t seed) {
    spec.validate();
    if (label < 0 || label >= spec.num_classes) throw ConfigError("label out of range");
    Rng rng(seed);
    const int T = spec.frames, H = spec.height, W = spec.width;

    GeneratedClip clip;
    clip.label = label;
    clip.pixels.assign(static_cast<std::size_t>(T) * H * W, 0.0f);

    const int pattern = label % 4;
    const double tempo = 1.0 + label / 4; // extra classes cycle faster

    for (int person = 0; person < spec.persons; ++person) {
        // base position such that every keypoint stays in frame for the
        // whole motion, including a full horizontal walk for pattern 1; the
        // walk slows down when a long clip would otherwise leave the frame
        const double speed =
            std::min(kWalkSpeed, (W - 1.0 - 2.0 * kReachX) / std::max(1, T - 1));
        const int walk = pattern == 1 ? static_cast<int>(speed * (T - 1)) : 0;
        const int dir = rng.uniform() < 0.5 ? -1 : 1;
        const int lo_x = kReachX + (dir < 0 ? walk : 0);
        const int hi_x = W - 1 - kReachX - (dir > 0 ? walk : 0);
        const int lo_y = kReachY;
        const int hi_y = H - 1 - kReachY;
        const int cx = rng.uniform_int(lo_x, hi_x);
        const int cy = rng.uniform_int(lo_y, hi_y);
        const double phase = rng.uniform(0.0, 2.0 * M_PI);

        for (int f = 0; f < T; ++f) {
            Pose pose = rest_pose(cx, cy);
            const double theta = 2.0 * M_PI * tempo * f / kBasePeriod + phase;
            switch (pattern) {
            case 0: { // hands oscillate vertically
                const int dy = static_cast<int>(std::lround(kHandSwing * std::sin(theta)));
                pose.y[kLeftHand] += dy;
                pose.y[kRightHand] += dy;
                break;
            }
            case 1: { // whole body translates horizontally
                const int dx = dir * static_cast<int>(speed * f);
                for (int l = 0; l < kActorLandmarks; ++l) pose.x[l] += dx;
                break;
            }
            case 2: { // right hand traces a circle
                pose.x[kRightHand] += static_cast<int>(std::lround(kCircleRadius * std::cos(theta)));
                pose.y[kRightHand] += static_cast<int>(std::lround(kCircleRadius * std::sin(theta)));
                break;
            }
            default: // still
                break;
            }

            float* frame = clip.pixels.data() + static_cast<std::size_t>(f) * H * W;
            KeypointAnnotation ann;
            ann.frame = f;
            ann.person = person;
            for (int l = 0; l < kActorLandmarks; ++l) {
                splat(frame, H, W, pose.x[l], pose.y[l]);
                ann.kps.push_back({static_cast<double>(pose.x[l]),
                                   static_cast<double>(pose.y[l]), 1.0});
            }
            clip.annotations.push_back(std::move(ann));
        }
    }

    if (spec.noise > 0.0)
        for (auto& px : clip.pixels) {
            px += static_cast<float>(rng.uniform(-spec.noise, spec.noise));
            px = std::clamp(px, 0.0f, 1.0f);
        }
    return clip;
}

std::vector<std::size_t> DatasetIndex::split_indices(const std::string& split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < clips.size(); ++i)
        if (clips[i].split == split) out.push_back(i);
    return out;
}

namespace {

json annotation_line(const std::string& clip_id, const KeypointAnnotation& ann) {
    json kps = json::array();
    for (const auto& kp : ann.kps) kps.push_back({kp.x, kp.y, kp.confidence});
    return json{{"clip", clip_id}, {"frame", ann.frame}, {"person", ann.person}, {"kps", kps}};
}

KeypointAnnotation parse_annotation(const json& j) {
    KeypointAnnotation ann;
    ann.clip = j.at("clip").get<std::string>();
    ann.frame = j.at("frame").get<int>();
    ann.person = j.at("person").get<int>();
    for (const auto& kp : j.at("kps")) {
        if (!kp.is_array() || kp.size() != 3)
            throw FormatError("keypoint entries must be [x, y, conf] triples");
        ann.kps.push_back({kp[0].get<double>(), kp[1].get<double>(), kp[2].get<double>()});
    }
    return ann;
}

void validate_index(const DatasetIndex& index) {
    std::set<std::string> ids;
    for (const auto& c : index.clips) {
        if (!ids.insert(c.id).second) throw FormatError("duplicate clip id " + c.id);
        if (c.split != "train" && c.split != "test")
            throw FormatError("unknown split '" + c.split + "' for clip " + c.id);
        if (c.label < 0 || c.label >= static_cast<int>(index.classes.size()))
            throw FormatError("label out of range for clip " + c.id);
    }
}

} // namespace

DatasetIndex write_dataset(const SyntheticSpec& spec, const std::string& dir) {
    spec.validate();
    fs::create_directories(fs::path(dir) / "clips");

    DatasetIndex index;
    index.dir = dir;
    for (int c = 0; c < spec.num_classes; ++c) index.classes.push_back("class" + std::to_string(c));

    const int train_per_class =
        std::max(1, static_cast<int>(std::lround(spec.train_fraction * spec.clips_per_class)));
    std::ofstream jsonl(fs::path(dir) / "annotations.jsonl");
    if (!jsonl) throw FormatError("cannot write annotations in " + dir);

    for (int label = 0; label < spec.num_classes; ++label)
        for (int k = 0; k < spec.clips_per_class; ++k) {
            const std::size_t ordinal = static_cast<std::size_t>(label) * spec.clips_per_class + k;
            const std::uint64_t clip_seed = derive_rng(spec.seed, ordinal).next_u64();
            auto clip = generate_clip(spec, label, clip_seed);

            ClipEntry entry;
            entry.id = "c" + std::to_string(label) + "_" + std::to_string(k);
            entry.file = "clips/" + entry.id + ".ptnsr";
            entry.label = label;
            entry.split = k < train_per_class ? "train" : "test";

            auto t = tensor<float>({spec.frames, 1, spec.height, spec.width});
            t->data = clip.pixels;
            write_ptnsr(fs::path(dir) / entry.file, *t);

            for (auto& ann : clip.annotations) {
                ann.clip = entry.id;
                jsonl << annotation_line(entry.id, ann).dump() << "\n";
                index.annotations[entry.id].push_back(std::move(ann));
            }
            index.clips.push_back(std::move(entry));
        }
    if (!jsonl) throw FormatError("short write of annotations in " + dir);
    jsonl.close();

    json manifest;
    manifest["classes"] = index.classes;
    manifest["clips"] = json::array();
    for (const auto& c : index.clips)
        manifest["clips"].push_back(
            {{"id", c.id}, {"file", c.file}, {"label", c.label}, {"split", c.split}});
    std::ofstream mf(fs::path(dir) / "manifest.json");
    mf << manifest.dump(2) << "\n";
    if (!mf) throw FormatError("cannot write manifest in " + dir);

    validate_index(index);
    return index;
}

DatasetIndex read_dataset(const std::string& dir) {
    std::ifstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw FormatError("no manifest.json in " + dir);
    json manifest;
    try {
        manifest = json::parse(mf);
    } catch (const json::exception& e) {
        throw FormatError("manifest parse failure: " + std::string(e.what()));
    }

    DatasetIndex index;
    index.dir = dir;
    try {
        index.classes = manifest.at("classes").get<std::vector<std::string>>();
        for (const auto& j : manifest.at("clips")) {
            ClipEntry entry;
            entry.id = j.at("id").get<std::string>();
            entry.file = j.at("file").get<std::string>();
            entry.label = j.at("label").get<int>();
            entry.split = j.at("split").get<std::string>();
            index.clips.push_back(std::move(entry));
        }
    } catch (const json::exception& e) {
        throw FormatError("manifest fields: " + std::string(e.what()));
    }
    validate_index(index);

    for (const auto& c : index.clips)
        if (!fs::exists(fs::path(dir) / c.file))
            throw FormatError("missing clip file " + c.file + " in " + dir);

    std::ifstream jsonl(fs::path(dir) / "annotations.jsonl");
    if (!jsonl) throw FormatError("no annotations.jsonl in " + dir);
    std::string line;
    while (std::getline(jsonl, line)) {
        if (line.empty()) continue;
        try {
            auto ann = parse_annotation(json::parse(line));
            index.annotations[ann.clip].push_back(std::move(ann));
        } catch (const json::exception& e) {
            throw FormatError("annotation line: " + std::string(e.what()));
        }
    }
    return index;
}

std::vector<float> load_clip(const DatasetIndex& index, const ClipEntry& entry) {
    auto t = read_ptnsr<float>(fs::path(index.dir) / entry.file);
    if (t->dims.size() != 4 || t->dims[1] != 1)
        throw FormatError("clip " + entry.id + " is not a T x 1 x H x W tensor");
    return t->data;
}

} // namespace poguise
