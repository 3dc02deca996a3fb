/*
 * kepler: iterative keypoint and pose estimation with heatmap-conditioned
 *         cascade regressors
 * File: core/src/render.cpp
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
#include "kepler/render.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace kepler {

void RenderConfig::validate() const
{
    if (width <= 0 || height <= 0) {
        throw ConfigError("render width and height must be positive");
    }
    if (!(sigma > 0.0) || !(amplitude > 0.0)) {
        throw ConfigError("render sigma and amplitude must be positive");
    }
    if (!(tau >= 0.0 && tau <= 1.0)) {
        throw ConfigError("render tau must lie in [0, 1]");
    }
}

RenderedInput render_points(const Image& image, std::span<const Point2> points,
                            std::span<const double> visibility, const RenderConfig& cfg)
{
    cfg.validate();
    if (image.width() != cfg.width || image.height() != cfg.height) {
        throw ConfigError("image is " + std::to_string(image.width()) + "x" + std::to_string(image.height()) +
                          ", render config expects " + std::to_string(cfg.width) + "x" +
                          std::to_string(cfg.height));
    }
    if (visibility.size() != points.size()) {
        throw ConfigError("one visibility value per rendered point is required");
    }

    RenderedInput out;
    out.channels = 3 + static_cast<int>(points.size());
    out.width = cfg.width;
    out.height = cfg.height;
    out.data.assign(out.channels * out.plane(), 0.0f);
    const auto rgb = image.data();
    std::copy(rgb.begin(), rgb.end(), out.data.begin());

    const double inv_two_var = 1.0 / (2.0 * cfg.sigma * cfg.sigma);
    std::vector<double> gx(cfg.width);
    std::vector<double> gy(cfg.height);
    for (std::size_t i = 0; i < points.size(); ++i) {
        const Point2& p = points[i];
        if (!std::isfinite(p.x) || !std::isfinite(p.y)) {
            throw DataError("cannot render non-finite keypoint " + std::to_string(i));
        }
        if (visibility[i] < cfg.tau) {
            continue;
        }
        for (int u = 0; u < cfg.width; ++u) {
            const double d = u - p.x;
            gx[u] = std::exp(-d * d * inv_two_var);
        }
        for (int v = 0; v < cfg.height; ++v) {
            const double d = v - p.y;
            gy[v] = cfg.amplitude * std::exp(-d * d * inv_two_var);
        }
        float* dst = out.data.data() + (3 + i) * out.plane();
        for (int v = 0; v < cfg.height; ++v) {
            for (int u = 0; u < cfg.width; ++u) {
                dst[static_cast<std::size_t>(v) * cfg.width + u] = static_cast<float>(gy[v] * gx[u]);
            }
        }
    }
    return out;
}

RenderedInput render(const Image& image, const Shape& shape, const VisibilityVector& visibility,
                     const RenderConfig& cfg)
{
    std::vector<Point2> pts(shape.begin(), shape.end());
    std::vector<double> vis(visibility.begin(), visibility.end());
    for (auto& v : vis) {
        v = std::clamp(v, 0.0, 1.0);
    }
    return render_points(image, pts, vis, cfg);
}

} /* namespace kepler */
