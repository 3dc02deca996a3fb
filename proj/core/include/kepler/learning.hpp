/*
 * kepler: iterative keypoint and pose estimation with heatmap-conditioned
 *         cascade regressors
 * File: core/include/kepler/learning.hpp
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

#include <optional>
#include <span>
#include <vector>

namespace kepler {

/// Per-keypoint displacement (dx, dy) in pixels; stored as a Shape.
using CorrectionVector = Shape;

/**
 * Training and inference hyperparameters of one cascade iteration.
 *
 * Stages 1-2 learn corrections clipped to `bound_L`; stage 3 switches to
 * the gradient-boosted loss with gamma; stage 4 adds hard-sample mining
 * followed by a full-set finetune; stage 5 works on local patches and has
 * no pose task.
 */
struct StagePolicy
{
    int stage = 1;
    std::optional<double> bound_L;
    double gamma = 0.0;
    double tau = 0.03;
    double lambda = 1.0;
    double mu = 0.5;
    double nu = 0.5;
    bool mining = false;
    bool patch_mode = false;
    double learning_rate = 1e-3;
    int epochs = 10;
    int batch_size = 16;
    double momentum = 0.9;
    /// Full-set epochs after the balanced mining phase.
    int finetune_epochs = 0;
    /// Learning-rate multiplier of the finetune phase.
    double finetune_lr_scale = 0.1;
    double min_hard_fraction = 0.3;
    double mining_bin_width = 0.005;

    /// Defaults for stage 1..5.
    static StagePolicy defaults(int stage);
    /// Throws ConfigError on any broken invariant.
    void validate() const;
    /// Gradient-boosted loss active (stage 3 onward).
    bool uses_variant_loss() const { return stage >= 3; }

    friend bool operator==(const StagePolicy&, const StagePolicy&) = default;
};

struct LossBreakdown
{
    double keypoint = 0.0;
    double pose = 0.0;
    double visibility = 0.0;
    double total = 0.0;
    int n = 1;
};

/**
 * Training target of a cascade stage: for each visible point the error
 * vector u = g - y clipped to length L along its own direction,
 * min(L, |u|) * u / |u|. Invisible and coincident points get zero.
 * `L` absent means unbounded. Throws DataError when a visible point has no
 * ground-truth coordinate and ConfigError when L <= 0.
 */
CorrectionVector bounded_correction(const Shape& g, const Shape& y, std::optional<double> L,
                                    const VisibilityVector& v);

/// sum_i v_i |y_i - g_i|^2 over visible points.
double keypoint_loss(const Shape& y, const Shape& g, const VisibilityVector& v);

struct LossAndGradient
{
    double value = 0.0;
    std::vector<double> gradient;
};

/**
 * Per-coordinate loss (1/n)(sum v (y - g)^2 + gamma sum v |y - g|) over
 * flat coordinate arrays. `v` holds one weight per coordinate. The
 * gradient with respect to y is (1/n)(2 v (y - g) + gamma v sign(y - g))
 * with sign(0) = 0.
 */
LossAndGradient variant_loss_and_grad(std::span<const double> y, std::span<const double> g,
                                      std::span<const double> v, double gamma, int n);

/// Shape-level overload: x and y coordinates of point i share weight v_i.
LossAndGradient variant_loss_and_grad(const Shape& y, const Shape& g, const VisibilityVector& v,
                                      double gamma, int n);

double pose_loss(const Pose3D& p, const Pose3D& g);

double visibility_loss(const VisibilityVector& vp, const VisibilityVector& vg);

/// lambda * keypoint + mu * pose + nu * visibility with the policy weights.
LossBreakdown total_loss(double keypoint, double pose, double visibility, const StagePolicy& policy,
                         int n = 1);

} /* namespace kepler */
