/*
 * kepler: iterative keypoint and pose estimation with heatmap-conditioned
 *         cascade regressors
 * File: core/include/kepler/regressor.hpp
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

#include "kepler/learning.hpp"
#include "kepler/mining.hpp"
#include "kepler/net.hpp"
#include "kepler/render.hpp"
#include "kepler/types.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

namespace kepler {

/// Output of f_t, split as (2N corrections, N visibilities, 3 pose angles).
/// The raw output vector carries the angles in radians so that the pose
/// loss stays on the scale of the other tasks; this struct holds degrees.
struct RegressorOutput
{
    CorrectionVector corrections;
    VisibilityVector visibility = VisibilityVector::constant(0.0);
    Pose3D pose;

    static RegressorOutput from_vector(std::span<const double> values);
    std::array<double, kOutputDim> to_vector() const;
};

/// Supervision for one sample. `weight` masks each output: correction
/// entries carry the ground-truth visibility of their point.
struct TrainingTarget
{
    std::array<double, kOutputDim> value{};
    std::array<double, kOutputDim> weight{};

    /// All tasks of a global stage.
    static TrainingTarget global(const CorrectionVector& correction, const VisibilityVector& visibility,
                                 const Pose3D& pose);
    /// One patch of the local stage: correction and visibility of `index`.
    static TrainingTarget patch(std::size_t index, const Point2& correction, double visible);
};

struct TrainingSample
{
    RenderedInput input;
    TrainingTarget target;
};

/// Random-access training data; implementations may render lazily.
class SampleSource
{
public:
    virtual ~SampleSource() = default;
    virtual std::size_t size() const = 0;
    virtual void get(std::size_t index, RenderedInput& input, TrainingTarget& target) const = 0;
};

class VectorSampleSource : public SampleSource
{
public:
    explicit VectorSampleSource(std::span<const TrainingSample> samples) : samples_(samples) {}
    std::size_t size() const override { return samples_.size(); }
    void get(std::size_t index, RenderedInput& input, TrainingTarget& target) const override;

private:
    std::span<const TrainingSample> samples_;
};

/**
 * Loss of one prediction against its target under a stage policy, with the
 * gradient with respect to the output vector. Corrections use the squared
 * keypoint loss before stage 3 and the gamma-boosted variant after; all
 * three terms are divided by the batch size `n`.
 */
LossBreakdown sample_loss(std::span<const double> output, const TrainingTarget& target, const StagePolicy& policy,
                          int n, std::span<double> grad_output);

/// Stateless forward evaluation of a parameter set.
class NetRegressor
{
public:
    explicit NetRegressor(RegressorParams params);
    const RegressorParams& params() const { return params_; }
    const Network& network() const { return net_; }
    RegressorOutput predict(const RenderedInput& input) const;

private:
    RegressorParams params_;
    Network net_;
};

/// One forward pass. Throws ConfigError naming expected vs actual channels.
RegressorOutput predict(const RegressorParams& params, const RenderedInput& input);

struct EpochLog
{
    int stage = 0;
    int epoch = 0;
    /// "train", "mining" or "finetune".
    const char* phase = "train";
    double loss = 0.0;
};

struct TrainOptions
{
    std::uint64_t seed = 0;
    /// Network used when no initial parameters are given.
    std::optional<NetSpec> spec;
    /// Warm start; takes precedence over `spec`.
    const RegressorParams* init = nullptr;
    /// Required when the policy mines hard samples.
    const MiningPartition* partition = nullptr;
    std::function<void(const EpochLog&)> on_epoch;
};

struct TrainResult
{
    RegressorParams params;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::vector<double> epoch_losses;
};

/**
 * Mini-batch gradient descent with momentum on the stage loss. Mining
 * policies run `epochs` epochs of balanced batches and then
 * `finetune_epochs` over the whole set at a reduced learning rate. The
 * returned parameters never have a higher mean training loss than the
 * starting point. Throws DivergenceError on a non-finite loss.
 */
TrainResult train_stage(const SampleSource& data, const StagePolicy& policy, const TrainOptions& options);

/// Mean per-sample loss (unit batch size) of `params` on `data`.
double dataset_loss(const NetRegressor& regressor, const SampleSource& data, const StagePolicy& policy);

struct GradientCheckOptions
{
    double step = 1e-5;
    /// Perturb the analytic gradient of this parameter before comparing.
    std::optional<std::size_t> fault_index;
    double fault_amount = 1.0;
};

/**
 * Compares the analytic parameter gradient of the single-sample loss with
 * central differences. Returns
 *   max_j |analytic_j - numeric_j| / max(|analytic_j|, |numeric_j|, 1e-8)
 * over trainable parameters.
 */
double gradient_check(const RegressorParams& params, const RenderedInput& input, const TrainingTarget& target,
                      const StagePolicy& policy, const GradientCheckOptions& options = {});

/// Ideal regressor: bounded step toward ground truth, true visibility and pose.
RegressorOutput oracle_predict(const AnnotatedFace& gt, const Shape& current, std::optional<double> L);

} /* namespace kepler */
