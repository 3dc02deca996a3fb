/*
 * kepler: iterative keypoint and pose estimation with heatmap-conditioned
 *         cascade regressors
 * File: core/src/data.cpp
 *
 * Copyright 2026 The kepler authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#include "kepler/data.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

namespace kepler {

using nlohmann::json;

namespace {

[[noreturn]] void fail(std::size_t line, const std::string& what)
{
    if (line == 0) {
        throw DataError("annotation: " + what);
    }
    throw DataError("annotation line " + std::to_string(line) + ": " + what);
}

double number(const json& j, const char* key, std::size_t line)
{
    if (!j.contains(key) || !j.at(key).is_number()) {
        fail(line, std::string("missing or non-numeric '") + key + "'");
    }
    return j.at(key).get<double>();
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t k)
{
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(k >> 32)};
    std::mt19937_64 rng(seq);
    return rng();
}

double uniform(std::mt19937_64& rng, const std::array<double, 2>& range)
{
    return std::uniform_real_distribution<double>(range[0], range[1])(rng);
}

std::array<double, 3> apply(const std::array<double, 9>& r, const std::array<double, 3>& p)
{
    return {r[0] * p[0] + r[1] * p[1] + r[2] * p[2], r[3] * p[0] + r[4] * p[1] + r[5] * p[2],
            r[6] * p[0] + r[7] * p[1] + r[8] * p[2]};
}

std::array<float, 3> hsv(double h, double s, double v)
{
    const double c = v * s;
    const double hp = std::fmod(h, 360.0) / 60.0;
    const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    switch (static_cast<int>(hp)) {
    case 0: r = c, g = x; break;
    case 1: r = x, g = c; break;
    case 2: g = c, b = x; break;
    case 3: g = x, b = c; break;
    case 4: r = x, b = c; break;
    default: r = c, b = x; break;
    }
    const double m = v - c;
    return {static_cast<float>(r + m), static_cast<float>(g + m), static_cast<float>(b + m)};
}

/// Landmark colors: evenly spaced hues alternating between two brightness levels.
std::array<float, 3> landmark_color(std::size_t i)
{
    return hsv(360.0 * static_cast<double>(i) / kNumLandmarks, 0.9, i % 2 == 0 ? 1.0 : 0.6);
}

} // namespace

std::string format_annotation(const AnnotationRecord& record)
{
    const AnnotatedFace& f = record.face;
    json j;
    j["image"] = f.image_path;
    j["box"] = {f.box.x, f.box.y, f.box.w, f.box.h};
    json lm = json::array();
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
        json e{{"i", i}, {"v", f.visibility[i] >= 0.5 ? 1 : 0}};
        if (!is_absent(f.shape[i])) {
            e["x"] = f.shape[i].x;
            e["y"] = f.shape[i].y;
        }
        lm.push_back(std::move(e));
    }
    j["landmarks"] = std::move(lm);
    j["pose"] = {{"yaw", f.pose.yaw}, {"pitch", f.pose.pitch}, {"roll", f.pose.roll}};
    if (!f.split_tag.empty()) {
        j["split"] = f.split_tag;
    }
    if (record.confidence) {
        j["confidence"] = *record.confidence;
    }
    return j.dump();
}

AnnotationRecord parse_annotation(const std::string& text, std::size_t line)
{
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        fail(line, std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object()) {
        fail(line, "expected a JSON object");
    }
    AnnotationRecord r;
    AnnotatedFace& f = r.face;
    if (!j.contains("image") || !j["image"].is_string()) {
        fail(line, "missing 'image'");
    }
    f.image_path = j["image"].get<std::string>();
    if (!j.contains("box") || !j["box"].is_array() || j["box"].size() != 4) {
        fail(line, "'box' must be [x, y, w, h]");
    }
    std::array<double, 4> box{};
    for (std::size_t k = 0; k < 4; ++k) {
        if (!j["box"][k].is_number()) {
            fail(line, "'box' entries must be numbers");
        }
        box[k] = j["box"][k].get<double>();
    }
    f.box = {box[0], box[1], box[2], box[3]};

    if (!j.contains("landmarks") || !j["landmarks"].is_array()) {
        fail(line, "missing 'landmarks'");
    }
    const json& lm = j["landmarks"];
    if (lm.size() != kNumLandmarks) {
        fail(line, "expected " + std::to_string(kNumLandmarks) + " landmarks, got " + std::to_string(lm.size()));
    }
    std::array<bool, kNumLandmarks> seen{};
    for (const json& e : lm) {
        if (!e.is_object() || !e.contains("i") || !e["i"].is_number_integer()) {
            fail(line, "landmark entries need an integer 'i'");
        }
        const auto i = e["i"].get<long long>();
        if (i < 0 || i >= static_cast<long long>(kNumLandmarks) || seen[static_cast<std::size_t>(i)]) {
            fail(line, "landmark index " + std::to_string(i) + " is out of range or repeated");
        }
        const auto k = static_cast<std::size_t>(i);
        seen[k] = true;
        const double v = number(e, "v", line);
        if (v != 0.0 && v != 1.0) {
            fail(line, "landmark " + std::to_string(i) + " visibility must be 0 or 1");
        }
        f.visibility[k] = v;
        const bool has_xy = e.contains("x") && e.contains("y") && !e["x"].is_null() && !e["y"].is_null();
        f.shape[k] = has_xy ? Point2{number(e, "x", line), number(e, "y", line)} : Point2{kAbsent, kAbsent};
    }

    if (!j.contains("pose") || !j["pose"].is_object()) {
        fail(line, "missing 'pose'");
    }
    f.pose = {number(j["pose"], "yaw", line), number(j["pose"], "pitch", line), number(j["pose"], "roll", line)};
    if (j.contains("split")) {
        if (!j["split"].is_string()) {
            fail(line, "'split' must be a string");
        }
        f.split_tag = j["split"].get<std::string>();
    }
    if (j.contains("confidence")) {
        const json& c = j["confidence"];
        if (!c.is_array() || c.size() != kNumLandmarks) {
            fail(line, "'confidence' must hold one value per landmark");
        }
        std::array<double, kNumLandmarks> conf{};
        for (std::size_t i = 0; i < kNumLandmarks; ++i) {
            if (!c[i].is_number()) {
                fail(line, "'confidence' entries must be numbers");
            }
            conf[i] = c[i].get<double>();
        }
        r.confidence = conf;
    }
    try {
        f.validate();
    } catch (const DataError& e) {
        fail(line, e.what());
    }
    return r;
}

std::vector<AnnotationRecord> read_annotations(std::istream& is, const std::string& source)
{
    std::vector<AnnotationRecord> out;
    std::string text;
    std::size_t line = 0;
    while (std::getline(is, text)) {
        ++line;
        if (text.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        try {
            out.push_back(parse_annotation(text, line));
        } catch (const DataError& e) {
            throw DataError(source + ": " + e.what());
        }
    }
    return out;
}

std::vector<AnnotationRecord> load_annotations(const std::filesystem::path& path)
{
    std::ifstream is(path);
    if (!is) {
        throw DataError("cannot open annotation file " + path.string());
    }
    return read_annotations(is, path.string());
}

void save_annotations(const std::vector<AnnotationRecord>& records, const std::filesystem::path& path)
{
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw DataError("cannot write annotation file " + path.string());
    }
    for (const auto& r : records) {
        os << format_annotation(r) << '\n';
    }
}

std::vector<AnnotatedFace> faces_of(const std::vector<AnnotationRecord>& records)
{
    std::vector<AnnotatedFace> out;
    out.reserve(records.size());
    for (const auto& r : records) {
        out.push_back(r.face);
    }
    return out;
}

Protocol parse_protocol(const std::string& name)
{
    if (name == "pifa") return Protocol::pifa;
    if (name == "full") return Protocol::full;
    if (name == "all-variants") return Protocol::all_variants;
    if (name == "afw") return Protocol::afw;
    throw ConfigError("unknown protocol '" + name + "' (expected pifa, full, all-variants or afw)");
}

std::string protocol_name(Protocol p)
{
    switch (p) {
    case Protocol::pifa: return "pifa";
    case Protocol::full: return "full";
    case Protocol::all_variants: return "all-variants";
    case Protocol::afw: return "afw";
    }
    return "unknown";
}

namespace {

int yaw_group(double yaw)
{
    const double a = std::abs(yaw);
    if (a <= kYawGroups[0][1]) return 0;
    if (a <= kYawGroups[1][1]) return 1;
    if (a <= kYawGroups[2][1]) return 2;
    return -1;
}

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed)
{
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    return idx;
}

void check_split_size(std::size_t n, std::size_t test_size)
{
    if (test_size == 0) {
        throw ConfigError("test size must be positive");
    }
    if (n <= test_size) {
        throw DataError("split needs more than " + std::to_string(test_size) + " records, got " + std::to_string(n));
    }
}

void finish_split(ProtocolSplit& s, std::size_t n, const std::vector<bool>& in_test)
{
    for (std::size_t i = 0; i < n; ++i) {
        (in_test[i] ? s.test : s.train).push_back(i);
    }
}

} // namespace

ProtocolSplit split_pifa(const std::vector<AnnotationRecord>& records, std::uint64_t seed, std::size_t test_size)
{
    check_split_size(records.size(), test_size);
    const auto order = shuffled_indices(records.size(), seed);
    const std::size_t per_group = test_size / 3;
    std::vector<bool> in_test(records.size(), false);
    std::array<std::size_t, 3> taken{};
    std::size_t total = 0;
    for (std::size_t i : order) {
        const int g = yaw_group(records[i].face.pose.yaw);
        if (g >= 0 && taken[static_cast<std::size_t>(g)] < per_group) {
            in_test[i] = true;
            ++taken[static_cast<std::size_t>(g)];
            ++total;
        }
    }
    for (std::size_t i : order) {
        if (total == test_size) break;
        if (!in_test[i]) {
            in_test[i] = true;
            ++total;
        }
    }

    ProtocolSplit s;
    s.protocol = Protocol::pifa;
    finish_split(s, records.size(), in_test);
    s.groups.resize(kYawGroups.size());
    s.group_names = {"yaw_0_30", "yaw_30_60", "yaw_60_90"};
    for (std::size_t i : s.test) {
        const int g = yaw_group(records[i].face.pose.yaw);
        if (g >= 0) s.groups[static_cast<std::size_t>(g)].push_back(i);
    }
    return s;
}

ProtocolSplit split_full(const std::vector<AnnotationRecord>& records, std::uint64_t seed, std::size_t test_size)
{
    check_split_size(records.size(), test_size);
    const auto order = shuffled_indices(records.size(), seed);
    std::vector<bool> in_test(records.size(), false);
    for (std::size_t k = 0; k < test_size; ++k) in_test[order[k]] = true;
    ProtocolSplit s;
    s.protocol = Protocol::full;
    finish_split(s, records.size(), in_test);
    return s;
}

void write_split(const ProtocolSplit& split, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir);
    auto dump = [&](const std::string& name, const std::vector<std::size_t>& idx) {
        std::ofstream os(dir / name);
        if (!os) throw DataError("cannot write split file " + (dir / name).string());
        for (std::size_t i : idx) os << i << '\n';
    };
    dump("train.txt", split.train);
    dump("test.txt", split.test);
    for (std::size_t g = 0; g < split.groups.size(); ++g) {
        dump(split.group_names[g] + ".txt", split.groups[g]);
    }
}

std::vector<FaceWithImage> make_all_variants(const std::vector<FaceWithImage>& faces, const VariantOptions& options)
{
    if (!(options.crop_margin >= 0.0)) {
        throw ConfigError("variant crop margin must be nonnegative");
    }
    std::vector<FaceWithImage> out;
    out.reserve(faces.size() * (2 * options.angles.size() + (options.include_original ? 1 : 0)));
    for (const auto& src : faces) {
        if (src.image.empty()) {
            throw DataError("variant generation needs the image of " + src.record.face.image_path);
        }
        if (options.include_original) {
            out.push_back(src);
        }
        const std::filesystem::path path(src.record.face.image_path);
        const std::string stem = (path.parent_path() / path.stem()).generic_string();
        const std::string ext = path.has_extension() ? path.extension().string() : ".png";
        for (bool flip : {false, true}) {
            const Image base = flip ? flip_horizontal(src.image) : src.image;
            for (double angle : options.angles) {
                AnnotatedFace f =
                    transform_annotation(src.record.face, src.image.width(), src.image.height(), angle, flip);
                const Image rotated = angle == 0.0 ? base : rotate_image(base, angle);

                const double m = options.crop_margin * std::max(f.box.w, f.box.h);
                const int x0 = static_cast<int>(std::floor(f.box.x - m));
                const int y0 = static_cast<int>(std::floor(f.box.y - m));
                const int x1 = static_cast<int>(std::ceil(f.box.x + f.box.w + m));
                const int y1 = static_cast<int>(std::ceil(f.box.y + f.box.h + m));
                FaceWithImage v;
                v.image = crop(rotated, x0, y0, x1 - x0, y1 - y0);
                for (auto& p : f.shape) {
                    if (!is_absent(p)) p = {p.x - x0, p.y - y0};
                }
                f.box.x -= x0;
                f.box.y -= y0;
                std::ostringstream name;
                name << stem << (flip ? "_f" : "") << "_r" << angle << ext;
                f.image_path = name.str();
                v.record.face = std::move(f);
                out.push_back(std::move(v));
            }
        }
    }
    return out;
}

std::vector<AnnotationRecord> filter_afw(const std::vector<AnnotationRecord>& records, double min_height)
{
    std::vector<AnnotationRecord> out;
    std::copy_if(records.begin(), records.end(), std::back_inserter(out),
                 [&](const AnnotationRecord& r) { return r.face.box.h > min_height; });
    return out;
}

SyntheticFaceSpec SyntheticFaceSpec::defaults()
{
    SyntheticFaceSpec s;
    // Left half of the template (image-left), x < 0; y grows downward and
    // z toward the camera. Mirrored entries are filled in below.
    struct Half
    {
        std::size_t index;
        std::size_t mirror;
        std::array<double, 3> p;
        std::array<double, 3> n;
    };
    const std::array<Half, 11> half = {{
        {0, 5, {-0.65, -0.55, 0.35}, {-0.50, -0.20, 0.85}},
        {1, 4, {-0.42, -0.62, 0.50}, {-0.25, -0.20, 0.95}},
        {2, 3, {-0.18, -0.55, 0.58}, {-0.10, -0.20, 0.97}},
        {6, 11, {-0.55, -0.30, 0.30}, {-0.55, 0.00, 0.83}},
        {7, 10, {-0.38, -0.30, 0.40}, {-0.30, 0.00, 0.95}},
        {8, 9, {-0.20, -0.30, 0.42}, {-0.15, 0.00, 0.99}},
        {12, 16, {-0.95, -0.10, -0.20}, {-0.95, 0.00, 0.30}},
        {13, 15, {-0.14, 0.18, 0.62}, {-0.50, 0.20, 0.84}},
        {17, 19, {-0.32, 0.48, 0.45}, {-0.40, 0.10, 0.91}},
        {14, 14, {0.0, 0.10, 0.85}, {0.0, 0.0, 1.0}},
        {18, 18, {0.0, 0.46, 0.55}, {0.0, 0.10, 0.99}},
    }};
    for (const auto& h : half) {
        s.points[h.index] = h.p;
        s.normals[h.index] = h.n;
        s.points[h.mirror] = {-h.p[0], h.p[1], h.p[2]};
        s.normals[h.mirror] = {-h.n[0], h.n[1], h.n[2]};
    }
    s.points[20] = {0.0, 0.85, 0.40};
    s.normals[20] = {0.0, 0.50, 0.87};
    return s;
}

void SyntheticFaceSpec::validate() const
{
    auto ordered = [](const std::array<double, 2>& r) { return std::isfinite(r[0]) && r[0] <= r[1]; };
    if (image_width <= 0 || image_height <= 0) throw ConfigError("synthetic image size must be positive");
    if (!ordered(scale_range) || scale_range[0] <= 0.0) throw ConfigError("synthetic scale range is invalid");
    if (!ordered(yaw_range) || !ordered(pitch_range) || !ordered(roll_range)) {
        throw ConfigError("synthetic pose ranges must be ordered");
    }
    if (std::max(std::abs(yaw_range[0]), std::abs(yaw_range[1])) > 90.0) {
        throw ConfigError("synthetic yaw must stay within [-90, 90]");
    }
    if (!(box_side > 0.0) || !(blob_sigma > 0.0) || center_jitter < 0.0 || box_shift < 0.0 ||
        box_scale_jitter < 0.0 || box_scale_jitter >= 1.0 || noise < 0.0) {
        throw ConfigError("synthetic geometry parameters are out of range");
    }
    if (!(test_fraction >= 0.0 && test_fraction <= 1.0)) throw ConfigError("test fraction must lie in [0, 1]");
}

std::array<double, 9> pose_rotation(const Pose3D& pose)
{
    const double d = std::numbers::pi / 180.0;
    const double cy = std::cos(pose.yaw * d), sy = std::sin(pose.yaw * d);
    const double cp = std::cos(pose.pitch * d), sp = std::sin(pose.pitch * d);
    const double cr = std::cos(pose.roll * d), sr = std::sin(pose.roll * d);
    // Ry = [cy 0 sy; 0 1 0; -sy 0 cy], Rx = [1 0 0; 0 cp -sp; 0 sp cp], Rz = [cr -sr 0; sr cr 0; 0 0 1].
    const std::array<double, 9> xy = {cy, 0.0, sy, sp * sy, cp, -sp * cy, -cp * sy, sp, cp * cy};
    return {cr * xy[0] - sr * xy[3], cr * xy[1] - sr * xy[4], cr * xy[2] - sr * xy[5],
            sr * xy[0] + cr * xy[3], sr * xy[1] + cr * xy[4], sr * xy[2] + cr * xy[5],
            xy[6],                   xy[7],                   xy[8]};
}

VisibilityVector synthetic_visibility(const SyntheticFaceSpec& spec, const Pose3D& pose)
{
    const auto r = pose_rotation(pose);
    VisibilityVector v;
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
        v[i] = apply(r, spec.normals[i])[2] < 0.0 ? 0.0 : 1.0;
    }
    return v;
}

SyntheticFace synthesize_face(const SyntheticFaceSpec& spec, const Pose3D& pose, std::uint64_t face_seed,
                              std::size_t index)
{
    spec.validate();
    std::mt19937_64 rng(face_seed);
    SyntheticFace out;
    out.scale = uniform(rng, spec.scale_range);
    out.center = {0.5 * (spec.image_width - 1) + uniform(rng, {-spec.center_jitter, spec.center_jitter}),
                  0.5 * (spec.image_height - 1) + uniform(rng, {-spec.center_jitter, spec.center_jitter})};
    out.texture_seed = rng();

    const auto r = pose_rotation(pose);
    const VisibilityVector vis = synthetic_visibility(spec, pose);
    AnnotatedFace& f = out.record.face;
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
        const auto q = apply(r, spec.points[i]);
        out.full_shape[i] = {out.center.x + out.scale * q[0], out.center.y + out.scale * q[1]};
        f.shape[i] = vis[i] > 0.5 ? out.full_shape[i] : Point2{kAbsent, kAbsent};
    }
    f.visibility = vis;
    f.pose = pose;

    const double side = spec.box_side * out.scale *
                        (1.0 + uniform(rng, {-spec.box_scale_jitter, spec.box_scale_jitter}));
    const auto head = apply(r, {0.0, 0.1, 0.0});
    const double cx = out.center.x + out.scale * head[0] + side * uniform(rng, {-spec.box_shift, spec.box_shift});
    const double cy = out.center.y + out.scale * head[1] + side * uniform(rng, {-spec.box_shift, spec.box_shift});
    f.box = {cx - 0.5 * side, cy - 0.5 * side, side, side};

    char name[32];
    std::snprintf(name, sizeof name, "images/%06zu.png", index);
    f.image_path = name;
    out.image = render_synthetic_image(spec, out);
    return out;
}

Image render_synthetic_image(const SyntheticFaceSpec& spec, const SyntheticFace& face,
                             std::optional<std::size_t> skip_landmark)
{
    std::mt19937_64 rng(face.texture_seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const int W = spec.image_width;
    const int H = spec.image_height;
    Image img(W, H);

    // Background: a random color with a horizontal and a vertical gradient.
    std::array<double, 3> bg{}, gx{}, gy{};
    for (int c = 0; c < 3; ++c) {
        bg[c] = 0.15 + 0.45 * unit(rng);
        gx[c] = 0.2 * (unit(rng) - 0.5);
        gy[c] = 0.2 * (unit(rng) - 0.5);
    }
    // Skin: warm tone of random brightness.
    const double tone = 0.35 + 0.5 * unit(rng);
    const std::array<double, 3> skin = {tone, tone * (0.72 + 0.1 * unit(rng)), tone * (0.55 + 0.1 * unit(rng))};

    const auto r = pose_rotation(face.record.face.pose);
    const auto hc = apply(r, {0.0, 0.15, 0.0});
    const Point2 head{face.center.x + face.scale * hc[0], face.center.y + face.scale * hc[1]};
    const double ca = std::cos(face.record.face.pose.roll * std::numbers::pi / 180.0);
    const double sa = std::sin(face.record.face.pose.roll * std::numbers::pi / 180.0);
    const double a = face.scale * 1.0;
    const double b = face.scale * 1.25;

    for (int v = 0; v < H; ++v) {
        for (int u = 0; u < W; ++u) {
            const double du = u - head.x;
            const double dv = v - head.y;
            const double eu = (ca * du + sa * dv) / a;
            const double ev = (-sa * du + ca * dv) / b;
            const double rho = std::sqrt(eu * eu + ev * ev);
            const double alpha = 1.0 / (1.0 + std::exp(-12.0 * (1.0 - rho)));
            for (int c = 0; c < 3; ++c) {
                const double back = bg[c] + gx[c] * (u / double(W) - 0.5) + gy[c] * (v / double(H) - 0.5);
                img.at(c, v, u) = static_cast<float>((1.0 - alpha) * back + alpha * skin[c]);
            }
        }
    }

    const double sigma = spec.blob_sigma * face.scale;
    const int reach = static_cast<int>(std::ceil(4.0 * sigma));
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
        if (face.record.face.visibility[i] < 0.5 || (skip_landmark && *skip_landmark == i)) {
            continue;
        }
        const Point2 p = face.full_shape[i];
        const auto color = landmark_color(i);
        const int u0 = std::max(0, static_cast<int>(std::floor(p.x)) - reach);
        const int u1 = std::min(W - 1, static_cast<int>(std::ceil(p.x)) + reach);
        const int v0 = std::max(0, static_cast<int>(std::floor(p.y)) - reach);
        const int v1 = std::min(H - 1, static_cast<int>(std::ceil(p.y)) + reach);
        for (int v = v0; v <= v1; ++v) {
            for (int u = u0; u <= u1; ++u) {
                const double d2 = (u - p.x) * (u - p.x) + (v - p.y) * (v - p.y);
                const double alpha = 0.9 * std::exp(-d2 / (2.0 * sigma * sigma));
                for (int c = 0; c < 3; ++c) {
                    float& px = img.at(c, v, u);
                    px = static_cast<float>((1.0 - alpha) * px + alpha * color[c]);
                }
            }
        }
    }

    std::normal_distribution<double> noise(0.0, spec.noise);
    for (int c = 0; c < 3; ++c) {
        for (int v = 0; v < H; ++v) {
            for (int u = 0; u < W; ++u) {
                float& px = img.at(c, v, u);
                px = static_cast<float>(std::clamp(px + noise(rng), 0.0, 1.0));
            }
        }
    }
    img.quantize();
    return img;
}

std::vector<SyntheticFace> generate_synthetic(std::size_t count, const SyntheticFaceSpec& spec, std::uint64_t seed)
{
    spec.validate();
    std::vector<SyntheticFace> out;
    out.reserve(count);
    for (std::size_t k = 0; k < count; ++k) {
        std::mt19937_64 rng(mix_seed(seed, k));
        const Pose3D pose{uniform(rng, spec.yaw_range), uniform(rng, spec.pitch_range), uniform(rng, spec.roll_range)};
        const bool test = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < spec.test_fraction;
        SyntheticFace f = synthesize_face(spec, pose, rng(), k);
        f.record.face.split_tag = test ? "test" : "train";
        out.push_back(std::move(f));
    }
    return out;
}

void save_dataset(const std::vector<FaceWithImage>& faces, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir);
    std::vector<AnnotationRecord> records;
    records.reserve(faces.size());
    for (const auto& f : faces) {
        const auto path = dir / f.record.face.image_path;
        std::filesystem::create_directories(path.parent_path());
        write_png(f.image, path);
        records.push_back(f.record);
    }
    save_annotations(records, dir / "annotations.jsonl");
}

std::vector<FaceWithImage> load_dataset(const std::filesystem::path& annotations)
{
    const auto records = load_annotations(annotations);
    const auto root = annotations.parent_path();
    std::vector<FaceWithImage> out;
    out.reserve(records.size());
    for (const auto& r : records) {
        out.push_back({r, read_png(root / r.face.image_path)});
    }
    return out;
}

} /* namespace kepler */
