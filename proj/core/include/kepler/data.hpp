/*
 * kepler: iterative keypoint and pose estimation with heatmap-conditioned
 *         cascade regressors
 * File: core/include/kepler/data.hpp
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
#pragma once

#include "kepler/image.hpp"
#include "kepler/types.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace kepler {

/**
 * Annotation files hold one JSON object per line:
 *
 *   {"image": "images/000001.png",
 *    "box": [x, y, w, h],
 *    "landmarks": [{"i": 0, "x": 10.5, "y": 20.0, "v": 1}, {"i": 1, "v": 0}, ...],
 *    "pose": {"yaw": 12.0, "pitch": -3.5, "roll": 1.0},
 *    "split": "train"}
 *
 * Exactly 21 landmark entries with indices 0..20; invisible entries may
 * omit x and y. Pose angles are degrees. "split" is optional. Prediction
 * files use the same layout plus an optional "confidence" array of the
 * predicted visibilities. Blank lines are skipped.
 */
struct AnnotationRecord
{
    AnnotatedFace face;
    /// Predicted visibility confidences, present in prediction files.
    std::optional<std::array<double, kNumLandmarks>> confidence;

    friend bool operator==(const AnnotationRecord&, const AnnotationRecord&) = default;
};

std::string format_annotation(const AnnotationRecord& record);
/// Throws DataError carrying `line` on any violation.
AnnotationRecord parse_annotation(const std::string& text, std::size_t line = 0);

std::vector<AnnotationRecord> read_annotations(std::istream& is, const std::string& source = "<stream>");
std::vector<AnnotationRecord> load_annotations(const std::filesystem::path& path);
void save_annotations(const std::vector<AnnotationRecord>& records, const std::filesystem::path& path);

/// Faces of a record list, in order.
std::vector<AnnotatedFace> faces_of(const std::vector<AnnotationRecord>& records);

enum class Protocol { pifa, full, all_variants, afw };

Protocol parse_protocol(const std::string& name);
std::string protocol_name(Protocol p);

struct ProtocolSplit
{
    Protocol protocol = Protocol::pifa;
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
    /// Test indices per absolute-yaw group; empty for ungrouped protocols.
    std::vector<std::vector<std::size_t>> groups;
    std::vector<std::string> group_names;
};

/// Absolute-yaw group bounds of the PIFA protocol, degrees.
inline constexpr std::array<std::array<double, 2>, 3> kYawGroups = {{{0.0, 30.0}, {30.0, 60.0}, {60.0, 90.0}}};

/**
 * Seeded random split with `test_size` test records drawn as equal-size
 * absolute-yaw groups ([0,30], (30,60], (60,90]) of floor(test_size / 3)
 * records each; any remainder, and any shortfall of a sparse group, is
 * filled from the remaining shuffled records. Needs more than test_size
 * records.
 */
ProtocolSplit split_pifa(const std::vector<AnnotationRecord>& records, std::uint64_t seed,
                         std::size_t test_size = 1000);

/// Seeded random split without yaw stratification.
ProtocolSplit split_full(const std::vector<AnnotationRecord>& records, std::uint64_t seed,
                         std::size_t test_size = 1000);

/// Writes train.txt, test.txt and one file per yaw group, one index per line.
void write_split(const ProtocolSplit& split, const std::filesystem::path& dir);

struct FaceWithImage
{
    AnnotationRecord record;
    Image image;
};

struct VariantOptions
{
    std::vector<double> angles{15.0, 30.0, 45.0, 60.0};
    bool include_original = false;
    /// Crop margin around the rotated box, as a fraction of its larger side.
    double crop_margin = 0.5;
};

/**
 * Rotated and flipped copies of every face: for each angle, the original
 * and its horizontal mirror (mirror first, then rotate), followed by a
 * crop around the re-derived box. Image paths gain a suffix such as
 * "_r15" or "_f_r30".
 */
std::vector<FaceWithImage> make_all_variants(const std::vector<FaceWithImage>& faces,
                                             const VariantOptions& options = {});

/// Keeps faces whose box height exceeds `min_height` pixels.
std::vector<AnnotationRecord> filter_afw(const std::vector<AnnotationRecord>& records, double min_height = 150.0);

/**
 * Parameters of the synthetic face generator. A rigid 21-point 3D template
 * with per-point surface normals is rotated by a sampled pose and projected
 * orthographically. A point is invisible when its rotated normal turns more
 * than 90 degrees away from the camera.
 */
struct SyntheticFaceSpec
{
    std::array<std::array<double, 3>, kNumLandmarks> points;
    std::array<std::array<double, 3>, kNumLandmarks> normals;
    int image_width = 64;
    int image_height = 64;
    /// Pixels per template unit.
    std::array<double, 2> scale_range{13.0, 17.0};
    std::array<double, 2> yaw_range{-70.0, 70.0};
    std::array<double, 2> pitch_range{-20.0, 20.0};
    std::array<double, 2> roll_range{-20.0, 20.0};
    /// Head-center offset from the image center, pixels.
    double center_jitter = 4.0;
    /// Box side relative to the template scale.
    double box_side = 2.4;
    /// Relative box center shift and size jitter.
    double box_shift = 0.06;
    double box_scale_jitter = 0.08;
    /// Landmark blob radius (Gaussian sigma) in template units.
    double blob_sigma = 0.09;
    double noise = 0.04;
    /// Fraction of records tagged "test"; the rest are "train".
    double test_fraction = 0.2;

    static SyntheticFaceSpec defaults();
    void validate() const;
};

/// Rotation R = Rz(roll) * Rx(pitch) * Ry(yaw), row-major, image axes (y down).
std::array<double, 9> pose_rotation(const Pose3D& pose);

/// Visibility of every template point under `pose`.
VisibilityVector synthetic_visibility(const SyntheticFaceSpec& spec, const Pose3D& pose);

struct SyntheticFace
{
    AnnotationRecord record;
    Image image;
    /// Projected coordinates of all points, including invisible ones.
    Shape full_shape;
    /// Pixels per template unit and projected template origin.
    double scale = 0.0;
    Point2 center;
    /// Per-face rendering seed.
    std::uint64_t texture_seed = 0;
};

/// Deterministic in (count, spec, seed); face k depends only on (seed, k).
std::vector<SyntheticFace> generate_synthetic(std::size_t count, const SyntheticFaceSpec& spec, std::uint64_t seed);

/// One face with a given pose; used by tests and by generate_synthetic.
SyntheticFace synthesize_face(const SyntheticFaceSpec& spec, const Pose3D& pose, std::uint64_t face_seed,
                              std::size_t index);

/// Renders the raster of a synthetic face, optionally skipping one landmark blob.
Image render_synthetic_image(const SyntheticFaceSpec& spec, const SyntheticFace& face,
                             std::optional<std::size_t> skip_landmark = std::nullopt);

/// Writes annotations.jsonl and the PNG images under `dir`.
void save_dataset(const std::vector<FaceWithImage>& faces, const std::filesystem::path& dir);

/// Loads annotations and their images; image paths resolve against the
/// annotation file's directory.
std::vector<FaceWithImage> load_dataset(const std::filesystem::path& annotations);

} /* namespace kepler */
