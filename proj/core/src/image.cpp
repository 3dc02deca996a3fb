/*
 * kepler: iterative keypoint and pose estimation with heatmap-conditioned
 *         cascade regressors
 * File: core/src/image.cpp
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
#include "kepler/image.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <cmath>

namespace kepler {

Image::Image(int width, int height, float fill) : width_(width), height_(height)
{
    if (width <= 0 || height <= 0) {
        throw ConfigError("image dimensions must be positive");
    }
    data_.assign(static_cast<std::size_t>(3) * width * height, fill);
}

std::span<const float> Image::channel(int c) const
{
    const std::size_t plane = static_cast<std::size_t>(width_) * height_;
    return std::span<const float>(data_).subspan(c * plane, plane);
}

float Image::sample(int c, double x, double y) const
{
    const double fx = std::floor(x);
    const double fy = std::floor(y);
    const int u0 = static_cast<int>(fx);
    const int v0 = static_cast<int>(fy);
    const double ax = x - fx;
    const double ay = y - fy;
    auto px = [&](int v, int u) -> double {
        if (u < 0 || v < 0 || u >= width_ || v >= height_) {
            return 0.0;
        }
        return at(c, v, u);
    };
    const double top = (1.0 - ax) * px(v0, u0) + ax * px(v0, u0 + 1);
    const double bottom = (1.0 - ax) * px(v0 + 1, u0) + ax * px(v0 + 1, u0 + 1);
    return static_cast<float>((1.0 - ay) * top + ay * bottom);
}

void Image::quantize()
{
    for (auto& v : data_) {
        v = static_cast<float>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)) / 255.0f;
    }
}

Shape FrameTransform::to_window(const Shape& s) const
{
    Shape out;
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
        out[i] = to_window(s[i]);
    }
    return out;
}

Shape FrameTransform::to_image(const Shape& s) const
{
    Shape out;
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
        out[i] = to_image(s[i]);
    }
    return out;
}

Image resample(const Image& src, const FrameTransform& frame, int width, int height)
{
    Image out(width, height);
    for (int v = 0; v < height; ++v) {
        for (int u = 0; u < width; ++u) {
            const Point2 p = frame.to_image(Point2{static_cast<double>(u), static_cast<double>(v)});
            for (int c = 0; c < 3; ++c) {
                out.at(c, v, u) = src.sample(c, p.x, p.y);
            }
        }
    }
    return out;
}

Image flip_horizontal(const Image& src)
{
    Image out(src.width(), src.height());
    for (int c = 0; c < 3; ++c) {
        for (int v = 0; v < src.height(); ++v) {
            for (int u = 0; u < src.width(); ++u) {
                out.at(c, v, src.width() - 1 - u) = src.at(c, v, u);
            }
        }
    }
    return out;
}

Image rotate_image(const Image& src, double angle_deg)
{
    Image out(src.width(), src.height());
    const Point2 pivot{0.5 * (src.width() - 1.0), 0.5 * (src.height() - 1.0)};
    for (int v = 0; v < src.height(); ++v) {
        for (int u = 0; u < src.width(); ++u) {
            // Inverse map: destination pixel pulls from the source rotated back.
            const Point2 p = rotate_about({static_cast<double>(u), static_cast<double>(v)}, pivot, -angle_deg);
            for (int c = 0; c < 3; ++c) {
                out.at(c, v, u) = src.sample(c, p.x, p.y);
            }
        }
    }
    return out;
}

Image crop(const Image& src, int x, int y, int w, int h)
{
    Image out(w, h);
    for (int c = 0; c < 3; ++c) {
        for (int v = 0; v < h; ++v) {
            const int sv = y + v;
            if (sv < 0 || sv >= src.height()) {
                continue;
            }
            for (int u = 0; u < w; ++u) {
                const int su = x + u;
                if (su >= 0 && su < src.width()) {
                    out.at(c, v, u) = src.at(c, sv, su);
                }
            }
        }
    }
    return out;
}

Image read_png(const std::filesystem::path& path)
{
    const cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) {
        throw DataError("cannot read image '" + path.string() + "'");
    }
    Image out(bgr.cols, bgr.rows);
    for (int v = 0; v < bgr.rows; ++v) {
        const auto* row = bgr.ptr<cv::Vec3b>(v);
        for (int u = 0; u < bgr.cols; ++u) {
            for (int c = 0; c < 3; ++c) {
                out.at(c, v, u) = static_cast<float>(row[u][2 - c]) / 255.0f;
            }
        }
    }
    return out;
}

void write_png(const Image& image, const std::filesystem::path& path)
{
    cv::Mat bgr(image.height(), image.width(), CV_8UC3);
    for (int v = 0; v < image.height(); ++v) {
        auto* row = bgr.ptr<cv::Vec3b>(v);
        for (int u = 0; u < image.width(); ++u) {
            for (int c = 0; c < 3; ++c) {
                const float value = std::clamp(image.at(c, v, u), 0.0f, 1.0f);
                row[u][2 - c] = static_cast<unsigned char>(std::lround(value * 255.0f));
            }
        }
    }
    bool ok = false;
    try {
        ok = cv::imwrite(path.string(), bgr);
    } catch (const cv::Exception&) {
        ok = false;
    }
    if (!ok) {
        throw DataError("cannot write image '" + path.string() + "'");
    }
}

} /* namespace kepler */
