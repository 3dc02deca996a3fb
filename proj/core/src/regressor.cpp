/*
 * kepler: iterative keypoint and pose estimation with heatmap-conditioned
 *         cascade regressors
 * File: core/src/regressor.cpp
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
#include "kepler/regressor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <string>

namespace kepler {

namespace {

constexpr std::size_t kCorrectionEnd = 2 * kNumLandmarks;
constexpr std::size_t kVisibilityEnd = kCorrectionEnd + kNumLandmarks;
constexpr std::size_t kStandardizationSamples = 512;
constexpr double kDegPerRad = 180.0 / std::numbers::pi;

/// Per-channel mean and standard deviation over an evenly strided subset.
void fit_standardization(const SampleSource& data, RegressorParams& params)
{
    auto mean = params.view("input.mean");
    auto stddev = params.view("input.std");
    const std::size_t channels = mean.size();
    std::vector<double> sum(channels, 0.0);
    std::vector<double> sum_sq(channels, 0.0);
    const std::size_t count = std::min(kStandardizationSamples, data.size());
    const std::size_t stride = data.size() / count;
    RenderedInput x;
    TrainingTarget t;
    double total = 0.0;
    for (std::size_t k = 0; k < count; ++k) {
        data.get(k * stride, x, t);
        const std::size_t plane = x.plane();
        for (std::size_t c = 0; c < channels; ++c) {
            for (std::size_t p = 0; p < plane; ++p) {
                const double v = x.data[c * plane + p];
                sum[c] += v;
                sum_sq[c] += v * v;
            }
        }
        total += static_cast<double>(plane);
    }
    for (std::size_t c = 0; c < channels; ++c) {
        const double m = sum[c] / total;
        const double var = std::max(0.0, sum_sq[c] / total - m * m);
        mean[c] = m;
        stddev[c] = std::max(std::sqrt(var), 1e-2);
    }
}

std::vector<std::uint8_t> trainable_mask(const RegressorParams& params)
{
    std::vector<std::uint8_t> mask(params.values.size(), 0);
    for (const auto& t : params.tensors) {
        if (t.trainable) {
            std::fill(mask.begin() + static_cast<std::ptrdiff_t>(t.offset),
                      mask.begin() + static_cast<std::ptrdiff_t>(t.offset + t.size), 1);
        }
    }
    return mask;
}

double single_loss(const Network& net, std::span<const double> params, const RenderedInput& input,
                   const TrainingTarget& target, const StagePolicy& policy, Workspace& ws)
{
    std::array<double, kOutputDim> out{};
    std::array<double, kOutputDim> grad{};
    net.forward(params, input, ws, out);
    return sample_loss(out, target, policy, 1, grad).total;
}

} // namespace

RegressorOutput RegressorOutput::from_vector(std::span<const double> values)
{
    if (values.size() != kOutputDim) {
        throw DataError("regressor output must have " + std::to_string(kOutputDim) + " values, got " +
                        std::to_string(values.size()));
    }
    RegressorOutput out;
    out.corrections = Shape::from_interleaved(values.subspan(0, kCorrectionEnd));
    out.visibility = VisibilityVector(values.subspan(kCorrectionEnd, kNumLandmarks));
    out.pose = {values[kVisibilityEnd] * kDegPerRad, values[kVisibilityEnd + 1] * kDegPerRad,
                values[kVisibilityEnd + 2] * kDegPerRad};
    return out;
}

std::array<double, kOutputDim> RegressorOutput::to_vector() const
{
    std::array<double, kOutputDim> v{};
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
        v[2 * i] = corrections[i].x;
        v[2 * i + 1] = corrections[i].y;
        v[kCorrectionEnd + i] = visibility[i];
    }
    v[kVisibilityEnd] = pose.yaw / kDegPerRad;
    v[kVisibilityEnd + 1] = pose.pitch / kDegPerRad;
    v[kVisibilityEnd + 2] = pose.roll / kDegPerRad;
    return v;
}

TrainingTarget TrainingTarget::global(const CorrectionVector& correction, const VisibilityVector& visibility,
                                      const Pose3D& pose)
{
    TrainingTarget t;
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
        const double v = visibility[i];
        t.value[2 * i] = v > 0.0 ? correction[i].x : 0.0;
        t.value[2 * i + 1] = v > 0.0 ? correction[i].y : 0.0;
        t.weight[2 * i] = t.weight[2 * i + 1] = v;
        t.value[kCorrectionEnd + i] = v;
        t.weight[kCorrectionEnd + i] = 1.0;
    }
    t.value[kVisibilityEnd] = pose.yaw / kDegPerRad;
    t.value[kVisibilityEnd + 1] = pose.pitch / kDegPerRad;
    t.value[kVisibilityEnd + 2] = pose.roll / kDegPerRad;
    std::fill(t.weight.begin() + kVisibilityEnd, t.weight.end(), 1.0);
    return t;
}

TrainingTarget TrainingTarget::patch(std::size_t index, const Point2& correction, double visible)
{
    if (index >= kNumLandmarks) {
        throw ConfigError("patch index out of range");
    }
    TrainingTarget t;
    if (visible > 0.0) {
        t.value[2 * index] = correction.x;
        t.value[2 * index + 1] = correction.y;
    }
    t.weight[2 * index] = t.weight[2 * index + 1] = visible;
    t.value[kCorrectionEnd + index] = visible;
    t.weight[kCorrectionEnd + index] = 1.0;
    return t;
}

void VectorSampleSource::get(std::size_t index, RenderedInput& input, TrainingTarget& target) const
{
    input = samples_[index].input;
    target = samples_[index].target;
}

LossBreakdown sample_loss(std::span<const double> output, const TrainingTarget& target, const StagePolicy& policy,
                          int n, std::span<double> grad_output)
{
    if (output.size() != kOutputDim || grad_output.size() != kOutputDim) {
        throw ConfigError("loss buffers must have " + std::to_string(kOutputDim) + " entries");
    }
    const std::span<const double> value(target.value);
    const std::span<const double> weight(target.weight);
    const double gamma = policy.uses_variant_loss() ? policy.gamma : 0.0;
    const auto keypoint = variant_loss_and_grad(output.subspan(0, kCorrectionEnd), value.subspan(0, kCorrectionEnd),
                                                weight.subspan(0, kCorrectionEnd), gamma, n);
    const double inv_n = 1.0 / n;
    double visibility = 0.0;
    double pose = 0.0;
    for (std::size_t k = kCorrectionEnd; k < kOutputDim; ++k) {
        const double d = output[k] - value[k];
        const double term = inv_n * weight[k] * d * d;
        const double g = inv_n * 2.0 * weight[k] * d;
        if (k < kVisibilityEnd) {
            visibility += term;
            grad_output[k] = policy.nu * g;
        } else {
            pose += term;
            grad_output[k] = policy.mu * g;
        }
    }
    for (std::size_t k = 0; k < kCorrectionEnd; ++k) {
        grad_output[k] = policy.lambda * keypoint.gradient[k];
    }
    return total_loss(keypoint.value, pose, visibility, policy, n);
}

NetRegressor::NetRegressor(RegressorParams params) : params_(std::move(params)), net_(params_.spec)
{
    if (net_.layout() != params_.tensors || params_.values.size() != net_.num_params()) {
        throw DataError("parameter tensors do not match the network spec");
    }
}

RegressorOutput NetRegressor::predict(const RenderedInput& input) const
{
    Workspace ws;
    std::array<double, kOutputDim> out{};
    net_.forward(params_.values, input, ws, out);
    return RegressorOutput::from_vector(out);
}

RegressorOutput predict(const RegressorParams& params, const RenderedInput& input)
{
    return NetRegressor(params).predict(input);
}

double dataset_loss(const NetRegressor& regressor, const SampleSource& data, const StagePolicy& policy)
{
    Workspace ws;
    RenderedInput x;
    TrainingTarget t;
    double sum = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        data.get(i, x, t);
        sum += single_loss(regressor.network(), regressor.params().values, x, t, policy, ws);
    }
    return data.size() == 0 ? 0.0 : sum / static_cast<double>(data.size());
}

TrainResult train_stage(const SampleSource& data, const StagePolicy& policy, const TrainOptions& options)
{
    policy.validate();
    if (data.size() == 0) {
        throw DataError("stage " + std::to_string(policy.stage) + ": empty training set");
    }
    if (policy.mining && policy.epochs > 0 && options.partition == nullptr) {
        throw ConfigError("stage " + std::to_string(policy.stage) + ": mining policy needs a partition");
    }

    RegressorParams params;
    if (options.init != nullptr) {
        params = *options.init;
        params.stage = policy.stage;
    } else {
        if (!options.spec) {
            throw ConfigError("train_stage needs either initial parameters or a network spec");
        }
        params = Network(*options.spec).initialize(options.seed, policy.stage);
        fit_standardization(data, params);
    }

    TrainResult result;
    const RegressorParams start = params;
    const Network net(params.spec);
    if (net.layout() != params.tensors) {
        throw ConfigError("initial parameters do not match their network spec");
    }
    result.initial_loss = dataset_loss(NetRegressor(start), data, policy);
    if (policy.epochs == 0 && policy.finetune_epochs == 0) {
        result.params = start;
        result.final_loss = result.initial_loss;
        return result;
    }

    const auto mask = trainable_mask(params);
    std::vector<double> grad(params.values.size(), 0.0);
    std::vector<double> velocity(params.values.size(), 0.0);
    std::array<double, kOutputDim> out{};
    std::array<double, kOutputDim> grad_out{};
    Workspace ws;
    RenderedInput x;
    TrainingTarget t;
    std::mt19937_64 rng(options.seed ^ 0x9e3779b97f4a7c15ULL);

    auto step = [&](const std::vector<std::size_t>& batch, double lr, int epoch) {
        std::fill(grad.begin(), grad.end(), 0.0);
        const int n = static_cast<int>(batch.size());
        double loss = 0.0;
        for (std::size_t idx : batch) {
            data.get(idx, x, t);
            net.forward(params.values, x, ws, out);
            loss += sample_loss(out, t, policy, n, grad_out).total;
            net.backward(params.values, ws, grad_out, grad);
        }
        if (!std::isfinite(loss)) {
            throw DivergenceError("stage " + std::to_string(policy.stage) + " diverged in epoch " +
                                      std::to_string(epoch),
                                  policy.stage, epoch);
        }
        for (std::size_t k = 0; k < params.values.size(); ++k) {
            if (mask[k] != 0) {
                velocity[k] = policy.momentum * velocity[k] - lr * grad[k];
                params.values[k] += velocity[k];
            }
        }
        return loss * n;
    };

    const std::size_t bs = static_cast<std::size_t>(policy.batch_size);
    const std::size_t batches_per_epoch = (data.size() + bs - 1) / bs;
    auto full_epoch = [&](double lr, int epoch) {
        std::vector<std::size_t> order(data.size());
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        double sum = 0.0;
        for (std::size_t b = 0; b < batches_per_epoch; ++b) {
            const auto first = order.begin() + static_cast<std::ptrdiff_t>(b * bs);
            const auto last = order.begin() + static_cast<std::ptrdiff_t>(std::min(data.size(), (b + 1) * bs));
            sum += step(std::vector<std::size_t>(first, last), lr, epoch);
        }
        return sum / static_cast<double>(data.size());
    };

    int epoch = 0;
    auto log = [&](const char* phase, double loss) {
        result.epoch_losses.push_back(loss);
        if (options.on_epoch) {
            options.on_epoch({policy.stage, epoch, phase, loss});
        }
    };
    if (policy.mining) {
        if (policy.epochs > 0) {
            BalancedBatchStream stream(*options.partition, policy.batch_size, options.seed + 1);
            for (int e = 0; e < policy.epochs; ++e, ++epoch) {
                double sum = 0.0;
                for (std::size_t b = 0; b < batches_per_epoch; ++b) {
                    sum += step(stream.next(), policy.learning_rate, epoch);
                }
                log("mining", sum / static_cast<double>(batches_per_epoch * bs));
            }
        }
        for (int e = 0; e < policy.finetune_epochs; ++e, ++epoch) {
            log("finetune", full_epoch(policy.learning_rate * policy.finetune_lr_scale, epoch));
        }
    } else {
        for (int e = 0; e < policy.epochs; ++e, ++epoch) {
            log("train", full_epoch(policy.learning_rate, epoch));
        }
    }

    result.final_loss = dataset_loss(NetRegressor(params), data, policy);
    if (!std::isfinite(result.final_loss)) {
        throw DivergenceError("stage " + std::to_string(policy.stage) + " produced a non-finite loss",
                              policy.stage, epoch);
    }
    if (result.final_loss > result.initial_loss) {
        result.params = start;
        result.final_loss = result.initial_loss;
    } else {
        result.params = std::move(params);
    }
    return result;
}

double gradient_check(const RegressorParams& params, const RenderedInput& input, const TrainingTarget& target,
                      const StagePolicy& policy, const GradientCheckOptions& options)
{
    const Network net(params.spec);
    Workspace ws;
    std::array<double, kOutputDim> out{};
    std::array<double, kOutputDim> grad_out{};
    std::vector<double> analytic(params.values.size(), 0.0);
    net.forward(params.values, input, ws, out);
    sample_loss(out, target, policy, 1, grad_out);
    net.backward(params.values, ws, grad_out, analytic);
    if (options.fault_index) {
        analytic.at(*options.fault_index) += options.fault_amount;
    }

    const auto mask = trainable_mask(params);
    std::vector<double> theta = params.values;
    double worst = 0.0;
    for (std::size_t k = 0; k < theta.size(); ++k) {
        if (mask[k] == 0) {
            continue;
        }
        const double saved = theta[k];
        theta[k] = saved + options.step;
        const double plus = single_loss(net, theta, input, target, policy, ws);
        theta[k] = saved - options.step;
        const double minus = single_loss(net, theta, input, target, policy, ws);
        theta[k] = saved;
        const double numeric = (plus - minus) / (2.0 * options.step);
        const double denom = std::max({std::abs(analytic[k]), std::abs(numeric), 1e-8});
        worst = std::max(worst, std::abs(analytic[k] - numeric) / denom);
    }
    return worst;
}

RegressorOutput oracle_predict(const AnnotatedFace& gt, const Shape& current, std::optional<double> L)
{
    RegressorOutput out;
    out.corrections = bounded_correction(gt.shape, current, L, gt.visibility);
    out.visibility = gt.visibility;
    out.pose = gt.pose;
    return out;
}

} /* namespace kepler */
