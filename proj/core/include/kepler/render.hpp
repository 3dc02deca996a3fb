/*
 * kepler: iterative keypoint and pose estimation with heatmap-conditioned
 *         cascade regressors
 * File: core/include/kepler/render.hpp
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

#include <span>
#include <vector>

namespace kepler {

struct RenderConfig
{
    int width = 224;
    int height = 224;
    double sigma = 5.0;
    double amplitude = 1.0;
    /// Heatmaps whose visibility falls below tau are not rendered.
    double tau = 0.03;

    void validate() const;
    friend bool operator==(const RenderConfig&, const RenderConfig&) = default;
};

/**
 * Stacked regressor input: three RGB channels followed by one Gaussian
 * heatmap per keypoint. Channel-major, row-major within a channel.
 */
struct RenderedInput
{
    int channels = 0;
    int width = 0;
    int height = 0;
    std::vector<float> data;

    std::size_t plane() const { return static_cast<std::size_t>(width) * height; }
    std::span<const float> channel(int c) const
    {
        return std::span<const float>(data).subspan(c * plane(), plane());
    }
    friend bool operator==(const RenderedInput&, const RenderedInput&) = default;
};

/**
 * Renders one heatmap per point of `points` on top of the RGB channels of
 * `image`. Channel 3 + i holds
 *   amplitude * exp(-((u - x_i)^2 + (v - y_i)^2) / (2 sigma^2))
 * unless visibility[i] < cfg.tau, in which case it is identically zero.
 * Points off the raster contribute their truncated tails. `image` must
 * already have the cfg dimensions; non-finite rendered points throw.
 */
RenderedInput render_points(const Image& image, std::span<const Point2> points,
                            std::span<const double> visibility, const RenderConfig& cfg);

/// The 3 + N channel input of a global stage.
RenderedInput render(const Image& image, const Shape& shape, const VisibilityVector& visibility,
                     const RenderConfig& cfg);

} /* namespace kepler */
