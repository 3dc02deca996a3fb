/*
 * kepler: iterative keypoint and pose estimation with heatmap-conditioned
 *         cascade regressors
 * File: core/include/kepler/types.hpp
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

#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace kepler {

/// Number of landmarks in the 21-point AFLW layout.
inline constexpr std::size_t kNumLandmarks = 21;

/// Regressor output width: 2N corrections, N visibilities, 3 pose angles.
inline constexpr std::size_t kOutputDim = 3 * kNumLandmarks + 3;

/**
 * Base class of all errors raised by the library. The CLI maps the three
 * subclasses onto distinct exit codes.
 */
class Error : public std::runtime_error
{
public:
    using std::runtime_error::runtime_error;
};

/// Invalid configuration or argument.
class ConfigError : public Error
{
public:
    using Error::Error;
};

/// Malformed or inconsistent data (annotations, images, model files).
class DataError : public Error
{
public:
    using Error::Error;
};

/// Non-finite loss during training.
class DivergenceError : public Error
{
public:
    DivergenceError(const std::string& what, int stage, int epoch)
        : Error(what), stage_(stage), epoch_(epoch) {}
    int stage() const noexcept { return stage_; }
    int epoch() const noexcept { return epoch_; }

private:
    int stage_;
    int epoch_;
};

struct Point2
{
    double x = 0.0;
    double y = 0.0;

    friend bool operator==(const Point2&, const Point2&) = default;
    Point2& operator+=(const Point2& o) { x += o.x; y += o.y; return *this; }
    friend Point2 operator+(Point2 a, const Point2& b) { return a += b; }
    friend Point2 operator-(const Point2& a, const Point2& b) { return {a.x - b.x, a.y - b.y}; }
    friend Point2 operator*(double s, const Point2& p) { return {s * p.x, s * p.y}; }
    double norm() const { return std::hypot(x, y); }
};

/// Sentinel for ground-truth landmarks without coordinates (invisible in AFLW).
inline constexpr double kAbsent = std::numeric_limits<double>::quiet_NaN();

inline bool is_absent(const Point2& p) { return std::isnan(p.x) || std::isnan(p.y); }

/**
 * An ordered set of kNumLandmarks 2D points in image pixels.
 *
 * Predicted shapes are always finite. Ground-truth shapes may hold the
 * kAbsent sentinel at invisible landmarks; code touching ground-truth
 * coordinates must consult the visibility vector first.
 */
class Shape
{
public:
    Shape() = default;
    explicit Shape(std::span<const Point2> points);
    /// From interleaved x0, y0, x1, y1, ...
    static Shape from_interleaved(std::span<const double> xy);

    const Point2& operator[](std::size_t i) const { return points_[i]; }
    Point2& operator[](std::size_t i) { return points_[i]; }
    static constexpr std::size_t size() { return kNumLandmarks; }
    auto begin() const { return points_.begin(); }
    auto end() const { return points_.end(); }
    auto begin() { return points_.begin(); }
    auto end() { return points_.end(); }

    bool all_finite() const;
    std::vector<double> interleaved() const;

    friend bool operator==(const Shape& a, const Shape& b);

private:
    std::array<Point2, kNumLandmarks> points_{};
};

/// Ground truth holds {0, 1}; predictions hold confidences.
class VisibilityVector
{
public:
    VisibilityVector() { values_.fill(1.0); }
    explicit VisibilityVector(std::span<const double> values);
    static VisibilityVector constant(double v);

    double operator[](std::size_t i) const { return values_[i]; }
    double& operator[](std::size_t i) { return values_[i]; }
    static constexpr std::size_t size() { return kNumLandmarks; }
    auto begin() const { return values_.begin(); }
    auto end() const { return values_.end(); }

    bool is_binary() const;
    std::size_t count_visible() const;

    friend bool operator==(const VisibilityVector&, const VisibilityVector&) = default;

private:
    std::array<double, kNumLandmarks> values_{};
};

/// Head pose in degrees.
struct Pose3D
{
    double yaw = 0.0;
    double pitch = 0.0;
    double roll = 0.0;

    friend bool operator==(const Pose3D&, const Pose3D&) = default;
};

struct FaceBox
{
    double x = 0.0;
    double y = 0.0;
    double w = 1.0;
    double h = 1.0;

    void validate() const;
    Point2 center() const { return {x + 0.5 * w, y + 0.5 * h}; }
    friend bool operator==(const FaceBox&, const FaceBox&) = default;
};

struct AnnotatedFace
{
    std::string image_path;
    FaceBox box;
    Shape shape;
    VisibilityVector visibility;
    Pose3D pose;
    std::string split_tag;

    /// Throws DataError when visible landmarks lack finite coordinates, the
    /// visibility vector is not binary, or the box is degenerate.
    void validate() const;
    friend bool operator==(const AnnotatedFace& a, const AnnotatedFace& b);
};

/// Landmark positions in the unit-box frame of a face box.
class MeanShape
{
public:
    MeanShape() = default;
    explicit MeanShape(const Shape& unit_points);
    const Shape& points() const { return points_; }
    friend bool operator==(const MeanShape&, const MeanShape&) = default;

private:
    Shape points_;
};

/// Per-landmark mean of box-normalized coordinates over faces where the
/// landmark is visible.
MeanShape compute_mean_shape(std::span<const AnnotatedFace> train);

/// Maps unit-box points into the pixel frame of `box`.
Shape place_in_box(const MeanShape& mean, const FaceBox& box);

/// Inverse of place_in_box. Absent points stay absent.
Shape normalize_to_box(const Shape& shape, const FaceBox& box);

/// Face size used to normalize landmark errors: sqrt(w * h).
double face_size(const FaceBox& box);

/**
 * Left/right landmark correspondence of the 21-point layout, used by
 * horizontal flips. Index order (0-based):
 *
 *   0-2   left brow (outer, center, inner)   3-5   right brow (inner, center, outer)
 *   6-8   left eye (outer, center, inner)    9-11  right eye (inner, center, outer)
 *   12    left ear   13 nose left   14 nose tip   15 nose right   16 right ear
 *   17    mouth left 18 mouth center 19 mouth right  20 chin
 */
inline constexpr std::array<std::size_t, kNumLandmarks> kFlipPermutation = {
    5, 4, 3, 2, 1, 0, 11, 10, 9, 8, 7, 6, 16, 15, 14, 13, 12, 19, 18, 17, 20};

/**
 * Rotates (and optionally first flips) an annotation about the image
 * center. Coordinates follow the pixel-center convention: a flip maps x to
 * (image_width - 1 - x) and the pivot is ((W - 1) / 2, (H - 1) / 2).
 * Rotation by `angle_deg` maps offsets (dx, dy) to
 * (c dx - s dy, s dx + c dy) in image axes (y down) and adds the angle to
 * the roll. The new box is the axis-aligned hull of the rotated box
 * corners. Throws DataError when the rotated box misses the image.
 */
AnnotatedFace transform_annotation(const AnnotatedFace& face, int image_width, int image_height,
                                   double angle_deg, bool flip);

/// Point rotation used by transform_annotation, exposed for images and tests.
Point2 rotate_about(const Point2& p, const Point2& pivot, double angle_deg);

/// Wraps an angle in degrees to [-180, 180).
double wrap_degrees(double angle);

} /* namespace kepler */
