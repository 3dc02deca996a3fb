/*
 * kepler: iterative keypoint and pose estimation with heatmap-conditioned
 *         cascade regressors
 * File: core/include/kepler/image.hpp
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

#include "kepler/types.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace kepler {

/**
 * RGB raster with channel values in [0, 1], stored channel-major and
 * row-major within each channel. Pixel (u, v) has its center at integer
 * coordinates (u, v).
 */
class Image
{
public:
    Image() = default;
    Image(int width, int height, float fill = 0.0f);

    int width() const { return width_; }
    int height() const { return height_; }
    bool empty() const { return data_.empty(); }

    float at(int c, int v, int u) const { return data_[index(c, v, u)]; }
    float& at(int c, int v, int u) { return data_[index(c, v, u)]; }
    std::span<const float> channel(int c) const;
    std::span<const float> data() const { return data_; }

    /// Bilinear sample at a sub-pixel location; zero outside the raster.
    float sample(int c, double x, double y) const;

    /// Rounds every value to the nearest multiple of 1/255 (8-bit storage).
    void quantize();

    friend bool operator==(const Image&, const Image&) = default;

private:
    std::size_t index(int c, int v, int u) const
    {
        return (static_cast<std::size_t>(c) * height_ + v) * width_ + u;
    }

    int width_ = 0;
    int height_ = 0;
    std::vector<float> data_;
};

/**
 * Axis-aligned similarity from an image frame into a resampled window:
 * window = (image - origin) * scale.
 */
struct FrameTransform
{
    Point2 origin;
    double scale = 1.0;

    Point2 to_window(const Point2& p) const { return {(p.x - origin.x) * scale, (p.y - origin.y) * scale}; }
    Point2 to_image(const Point2& p) const { return {p.x / scale + origin.x, p.y / scale + origin.y}; }
    Shape to_window(const Shape& s) const;
    Shape to_image(const Shape& s) const;
};

/// Resamples the window described by `frame` into a width x height raster
/// with bilinear interpolation; pixels outside the source are zero.
Image resample(const Image& src, const FrameTransform& frame, int width, int height);

/// Mirrors columns: pixel u moves to width - 1 - u.
Image flip_horizontal(const Image& src);

/// Rotates about ((W - 1) / 2, (H - 1) / 2) with the convention of
/// rotate_about, bilinear resampling, zero fill.
Image rotate_image(const Image& src, double angle_deg);

/// Copies the integer-aligned window [x, x + w) x [y, y + h), zero padded.
Image crop(const Image& src, int x, int y, int w, int h);

/// PNG I/O (8-bit RGB). Throws DataError with the path on failure.
Image read_png(const std::filesystem::path& path);
void write_png(const Image& image, const std::filesystem::path& path);

} /* namespace kepler */
