/*
 * kepler: iterative keypoint and pose estimation with heatmap-conditioned
 *         cascade regressors
 * File: core/src/types.cpp
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
#include "kepler/types.hpp"

#include <algorithm>
#include <numbers>

namespace kepler {

namespace {

bool same_coordinate(double a, double b)
{
    return (std::isnan(a) && std::isnan(b)) || a == b;
}

} // namespace

Shape::Shape(std::span<const Point2> points)
{
    if (points.size() != kNumLandmarks) {
        throw DataError("shape must have " + std::to_string(kNumLandmarks) + " points, got " +
                        std::to_string(points.size()));
    }
    std::copy(points.begin(), points.end(), points_.begin());
}

Shape Shape::from_interleaved(std::span<const double> xy)
{
    if (xy.size() != 2 * kNumLandmarks) {
        throw DataError("interleaved shape must have " + std::to_string(2 * kNumLandmarks) +
                        " values, got " + std::to_string(xy.size()));
    }
    Shape s;
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
        s.points_[i] = {xy[2 * i], xy[2 * i + 1]};
    }
    return s;
}

bool Shape::all_finite() const
{
    return std::all_of(points_.begin(), points_.end(),
                       [](const Point2& p) { return std::isfinite(p.x) && std::isfinite(p.y); });
}

std::vector<double> Shape::interleaved() const
{
    std::vector<double> out;
    out.reserve(2 * kNumLandmarks);
    for (const auto& p : points_) {
        out.push_back(p.x);
        out.push_back(p.y);
    }
    return out;
}

bool operator==(const Shape& a, const Shape& b)
{
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
        if (!same_coordinate(a[i].x, b[i].x) || !same_coordinate(a[i].y, b[i].y)) {
            return false;
        }
    }
    return true;
}

VisibilityVector::VisibilityVector(std::span<const double> values)
{
    if (values.size() != kNumLandmarks) {
        throw DataError("visibility vector must have " + std::to_string(kNumLandmarks) +
                        " entries, got " + std::to_string(values.size()));
    }
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
        if (!std::isfinite(values[i])) {
            throw DataError("visibility entry " + std::to_string(i) + " is not finite");
        }
        values_[i] = values[i];
    }
}

VisibilityVector VisibilityVector::constant(double v)
{
    VisibilityVector out;
    out.values_.fill(v);
    return out;
}

bool VisibilityVector::is_binary() const
{
    return std::all_of(values_.begin(), values_.end(), [](double v) { return v == 0.0 || v == 1.0; });
}

std::size_t VisibilityVector::count_visible() const
{
    return static_cast<std::size_t>(
        std::count_if(values_.begin(), values_.end(), [](double v) { return v > 0.5; }));
}

void FaceBox::validate() const
{
    if (!(w > 0.0) || !(h > 0.0) || !std::isfinite(x) || !std::isfinite(y) || !std::isfinite(w) ||
        !std::isfinite(h)) {
        throw DataError("face box must have finite coordinates and positive size");
    }
}

void AnnotatedFace::validate() const
{
    box.validate();
    if (!visibility.is_binary()) {
        throw DataError("ground-truth visibility must be 0 or 1");
    }
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
        if (visibility[i] == 1.0 && !(std::isfinite(shape[i].x) && std::isfinite(shape[i].y))) {
            throw DataError("visible landmark " + std::to_string(i) + " has no coordinates");
        }
    }
    if (!std::isfinite(pose.yaw) || !std::isfinite(pose.pitch) || !std::isfinite(pose.roll)) {
        throw DataError("pose angles must be finite");
    }
}

bool operator==(const AnnotatedFace& a, const AnnotatedFace& b)
{
    return a.image_path == b.image_path && a.box == b.box && a.shape == b.shape &&
           a.visibility == b.visibility && a.pose == b.pose && a.split_tag == b.split_tag;
}

MeanShape::MeanShape(const Shape& unit_points) : points_(unit_points)
{
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
        const auto& p = points_[i];
        if (!(p.x >= 0.0 && p.x <= 1.0 && p.y >= 0.0 && p.y <= 1.0)) {
            throw DataError("mean shape point " + std::to_string(i) + " outside the unit box");
        }
    }
}

MeanShape compute_mean_shape(std::span<const AnnotatedFace> train)
{
    if (train.empty()) {
        throw DataError("cannot compute a mean shape from an empty training set");
    }
    std::array<Point2, kNumLandmarks> sum{};
    std::array<std::size_t, kNumLandmarks> count{};
    for (const auto& face : train) {
        const Shape unit = normalize_to_box(face.shape, face.box);
        for (std::size_t i = 0; i < kNumLandmarks; ++i) {
            if (face.visibility[i] > 0.5 && !is_absent(unit[i])) {
                sum[i] += unit[i];
                ++count[i];
            }
        }
    }
    Shape mean;
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
        if (count[i] == 0) {
            throw DataError("landmark " + std::to_string(i) + " is visible in no training face");
        }
        const double n = static_cast<double>(count[i]);
        // Visible points may sit slightly outside a tight box; clamp to the frame.
        mean[i] = {std::clamp(sum[i].x / n, 0.0, 1.0), std::clamp(sum[i].y / n, 0.0, 1.0)};
    }
    return MeanShape(mean);
}

Shape place_in_box(const MeanShape& mean, const FaceBox& box)
{
    box.validate();
    Shape out;
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
        const auto& p = mean.points()[i];
        out[i] = {p.x * box.w + box.x, p.y * box.h + box.y};
    }
    return out;
}

Shape normalize_to_box(const Shape& shape, const FaceBox& box)
{
    box.validate();
    Shape out;
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
        const auto& p = shape[i];
        out[i] = {(p.x - box.x) / box.w, (p.y - box.y) / box.h};
    }
    return out;
}

double face_size(const FaceBox& box)
{
    box.validate();
    return std::sqrt(box.w * box.h);
}

double wrap_degrees(double angle)
{
    double a = std::fmod(angle + 180.0, 360.0);
    if (a < 0.0) {
        a += 360.0;
    }
    return a - 180.0;
}

Point2 rotate_about(const Point2& p, const Point2& pivot, double angle_deg)
{
    const double rad = angle_deg * std::numbers::pi / 180.0;
    const double c = std::cos(rad);
    const double s = std::sin(rad);
    const double dx = p.x - pivot.x;
    const double dy = p.y - pivot.y;
    return {pivot.x + c * dx - s * dy, pivot.y + s * dx + c * dy};
}

AnnotatedFace transform_annotation(const AnnotatedFace& face, int image_width, int image_height,
                                   double angle_deg, bool flip)
{
    if (image_width <= 0 || image_height <= 0) {
        throw ConfigError("image dimensions must be positive");
    }
    face.box.validate();
    AnnotatedFace out = face;
    const double max_x = image_width - 1.0;
    if (flip) {
        for (std::size_t i = 0; i < kNumLandmarks; ++i) {
            const std::size_t src = kFlipPermutation[i];
            const auto& p = face.shape[src];
            out.shape[i] = is_absent(p) ? p : Point2{max_x - p.x, p.y};
            out.visibility[i] = face.visibility[src];
        }
        out.box.x = max_x - (face.box.x + face.box.w);
        out.pose.yaw = -face.pose.yaw;
        out.pose.roll = -face.pose.roll;
    }
    if (angle_deg == 0.0) {
        return out;
    }

    const Point2 pivot{0.5 * max_x, 0.5 * (image_height - 1.0)};
    for (auto& p : out.shape) {
        if (!is_absent(p)) {
            p = rotate_about(p, pivot, angle_deg);
        }
    }
    const FaceBox& b = out.box;
    const std::array<Point2, 4> corners = {Point2{b.x, b.y}, Point2{b.x + b.w, b.y},
                                           Point2{b.x, b.y + b.h}, Point2{b.x + b.w, b.y + b.h}};
    double x0 = std::numeric_limits<double>::infinity();
    double y0 = x0;
    double x1 = -x0;
    double y1 = -x0;
    for (const auto& c : corners) {
        const Point2 r = rotate_about(c, pivot, angle_deg);
        x0 = std::min(x0, r.x);
        y0 = std::min(y0, r.y);
        x1 = std::max(x1, r.x);
        y1 = std::max(y1, r.y);
    }
    if (x1 < 0.0 || y1 < 0.0 || x0 > max_x || y0 > image_height - 1.0) {
        throw DataError("rotated face lies entirely outside the image");
    }
    out.box = {x0, y0, x1 - x0, y1 - y0};
    out.pose.roll = wrap_degrees(out.pose.roll + angle_deg);
    return out;
}

} /* namespace kepler */
