/*
 * kepler: iterative keypoint and pose estimation with heatmap-conditioned
 *         cascade regressors
 * File: core/src/learning.cpp
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
#include "kepler/learning.hpp"

#include <cmath>
#include <string>

namespace kepler {

StagePolicy StagePolicy::defaults(int stage)
{
    StagePolicy p;
    p.stage = stage;
    switch (stage) {
    case 1:
    case 2:
        p.bound_L = 20.0;
        p.mu = 0.5;
        break;
    case 3:
        p.gamma = 0.2;
        p.mu = 0.25;
        break;
    case 4:
        p.gamma = 0.1;
        p.mu = 0.25;
        p.mining = true;
        p.finetune_epochs = 5;
        break;
    case 5:
        p.gamma = 0.1;
        p.mu = 0.0;
        p.patch_mode = true;
        p.mining = true;
        p.finetune_epochs = 5;
        break;
    default:
        throw ConfigError("stage must lie in [1, 5], got " + std::to_string(stage));
    }
    return p;
}

void StagePolicy::validate() const
{
    const std::string where = "stage " + std::to_string(stage) + " policy: ";
    if (stage < 1 || stage > 5) {
        throw ConfigError(where + "stage must lie in [1, 5]");
    }
    if (bound_L.has_value() != (stage <= 2)) {
        throw ConfigError(where + "bound_L must be set exactly for stages 1 and 2");
    }
    if (bound_L && !(*bound_L > 0.0)) {
        throw ConfigError(where + "bound_L must be positive");
    }
    if (patch_mode != (stage == 5)) {
        throw ConfigError(where + "patch_mode must be set exactly for stage 5");
    }
    if (patch_mode && mu != 0.0) {
        throw ConfigError(where + "the patch stage has no pose task, mu must be 0");
    }
    if (lambda < 0.0 || mu < 0.0 || nu < 0.0 || gamma < 0.0) {
        throw ConfigError(where + "loss weights and gamma must be nonnegative");
    }
    if (!(tau >= 0.0 && tau <= 1.0)) {
        throw ConfigError(where + "tau must lie in [0, 1]");
    }
    if (!(learning_rate > 0.0) || epochs < 0 || finetune_epochs < 0 || batch_size < 1 ||
        !(momentum >= 0.0 && momentum < 1.0) || !(finetune_lr_scale > 0.0)) {
        throw ConfigError(where + "invalid optimizer settings");
    }
    if (mining && batch_size % 2 != 0) {
        throw ConfigError(where + "balanced batches need an even batch size");
    }
    if (!(min_hard_fraction > 0.0 && min_hard_fraction < 1.0) || !(mining_bin_width > 0.0)) {
        throw ConfigError(where + "invalid mining settings");
    }
}

CorrectionVector bounded_correction(const Shape& g, const Shape& y, std::optional<double> L,
                                    const VisibilityVector& v)
{
    if (L && !(*L > 0.0)) {
        throw ConfigError("correction bound must be positive");
    }
    CorrectionVector delta;
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
        if (v[i] <= 0.5) {
            delta[i] = {0.0, 0.0};
            continue;
        }
        if (is_absent(g[i])) {
            throw DataError("visible landmark " + std::to_string(i) + " has no ground-truth coordinate");
        }
        const Point2 u = g[i] - y[i];
        const double len = u.norm();
        if (len == 0.0) {
            delta[i] = {0.0, 0.0};
        } else if (!L || len <= *L) {
            delta[i] = u;
        } else {
            delta[i] = (*L / len) * u;
        }
    }
    return delta;
}

double keypoint_loss(const Shape& y, const Shape& g, const VisibilityVector& v)
{
    double sum = 0.0;
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
        if (v[i] == 0.0) {
            continue;
        }
        const Point2 d = y[i] - g[i];
        sum += v[i] * (d.x * d.x + d.y * d.y);
    }
    return sum;
}

LossAndGradient variant_loss_and_grad(std::span<const double> y, std::span<const double> g,
                                      std::span<const double> v, double gamma, int n)
{
    if (y.size() != g.size() || y.size() != v.size()) {
        throw ConfigError("variant loss inputs must have equal lengths");
    }
    if (gamma < 0.0 || n < 1) {
        throw ConfigError("variant loss needs gamma >= 0 and n >= 1");
    }
    LossAndGradient out;
    out.gradient.assign(y.size(), 0.0);
    double squared = 0.0;
    double absolute = 0.0;
    const double inv_n = 1.0 / n;
    for (std::size_t k = 0; k < y.size(); ++k) {
        if (v[k] == 0.0) {
            continue;
        }
        const double d = y[k] - g[k];
        squared += v[k] * d * d;
        absolute += v[k] * std::abs(d);
        const double sign = (d > 0.0) - (d < 0.0);
        out.gradient[k] = inv_n * (2.0 * v[k] * d + gamma * v[k] * sign);
    }
    out.value = inv_n * (squared + gamma * absolute);
    return out;
}

LossAndGradient variant_loss_and_grad(const Shape& y, const Shape& g, const VisibilityVector& v,
                                      double gamma, int n)
{
    std::vector<double> yy = y.interleaved();
    std::vector<double> gg(2 * kNumLandmarks, 0.0);
    std::vector<double> vv(2 * kNumLandmarks, 0.0);
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
        if (v[i] == 0.0) {
            continue;
        }
        if (is_absent(g[i])) {
            throw DataError("visible landmark " + std::to_string(i) + " has no ground-truth coordinate");
        }
        gg[2 * i] = g[i].x;
        gg[2 * i + 1] = g[i].y;
        vv[2 * i] = vv[2 * i + 1] = v[i];
    }
    return variant_loss_and_grad(yy, gg, vv, gamma, n);
}

double pose_loss(const Pose3D& p, const Pose3D& g)
{
    const double dy = p.yaw - g.yaw;
    const double dp = p.pitch - g.pitch;
    const double dr = p.roll - g.roll;
    return dy * dy + dp * dp + dr * dr;
}

double visibility_loss(const VisibilityVector& vp, const VisibilityVector& vg)
{
    double sum = 0.0;
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
        const double d = vp[i] - vg[i];
        sum += d * d;
    }
    return sum;
}

LossBreakdown total_loss(double keypoint, double pose, double visibility, const StagePolicy& policy,
                         int n)
{
    if (policy.lambda < 0.0 || policy.mu < 0.0 || policy.nu < 0.0) {
        throw ConfigError("loss weights must be nonnegative");
    }
    LossBreakdown out;
    out.keypoint = keypoint;
    out.pose = pose;
    out.visibility = visibility;
    out.n = n;
    // mu = 0 must drop the pose term even when it is not finite.
    out.total = policy.lambda * keypoint + (policy.mu == 0.0 ? 0.0 : policy.mu * pose) +
                policy.nu * visibility;
    return out;
}

} /* namespace kepler */
