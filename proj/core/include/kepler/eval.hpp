/*
 * kepler: iterative keypoint and pose estimation with heatmap-conditioned
 *         cascade regressors
 * File: core/include/kepler/eval.hpp
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

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace kepler {

/// Mean over visible landmarks of ||pred_i - gt_i|| / size.
double nme(const Shape& pred, const Shape& gt, const VisibilityVector& v, double size);
/// NME against an annotation, normalized by face_size(gt.box).
double nme(const Shape& pred, const AnnotatedFace& gt);

struct CedPoint
{
    double threshold = 0.0;
    double fraction = 0.0;
};

/// fraction(errors <= t) for each ascending threshold t.
std::vector<CedPoint> ced_curve(std::span<const double> errors, std::span<const double> thresholds);

/// Evenly spaced thresholds 0, step, ..., max (inclusive).
std::vector<double> ced_thresholds(double max_threshold = 0.15, double step = 0.001);

/// Rounds to the nearest multiple of `step`; exact ties go to the even multiple.
double discretize_angle(double degrees, double step = 15.0);

enum class PoseAccuracyMode { max_axis, yaw_only };

struct PoseMetrics
{
    /// Yaw, pitch, roll.
    std::array<double, 3> axis_mae{};
    double mae = 0.0;
    double accuracy_15 = 0.0;
    std::vector<std::array<double, 3>> abs_errors;
    std::vector<Pose3D> discretized;
};

PoseMetrics pose_metrics(std::span<const Pose3D> preds, std::span<const Pose3D> gts,
                         PoseAccuracyMode mode = PoseAccuracyMode::max_axis, double tolerance = 15.0);

struct EvalGroup
{
    std::string name;
    std::vector<std::size_t> members;
};

struct EvalReport
{
    std::string protocol;
    std::vector<std::string> sample_ids;
    std::vector<double> nme;
    double mean_nme = 0.0;
    double median_nme = 0.0;
    std::vector<CedPoint> ced;
    PoseMetrics pose;
    PoseAccuracyMode pose_mode = PoseAccuracyMode::max_axis;
    /// Optional subsets (for example absolute-yaw groups) summarized separately.
    std::vector<EvalGroup> groups;
};

struct EvalOptions
{
    std::string protocol = "full";
    PoseAccuracyMode pose_mode = PoseAccuracyMode::max_axis;
    std::vector<double> thresholds = ced_thresholds();
    std::vector<EvalGroup> groups;
};

/// Predictions and ground truth are matched by position.
EvalReport evaluate(std::span<const AnnotatedFace> preds, std::span<const AnnotatedFace> gts,
                    const EvalOptions& options = {});

/**
 * Writes into `dir`:
 *   per_sample.csv  id,nme,yaw_err,pitch_err,roll_err
 *   ced.csv         threshold,fraction
 *   ced.svg         CED line plot (omitted for empty reports)
 *   summary.txt     one row per group plus "all": NME (%) and pose MAE
 * Numbers use fixed formatting so output is byte-stable.
 */
void emit_report(const EvalReport& report, const std::filesystem::path& dir);

/// Median of a nonempty sequence (mean of the middle pair for even sizes).
double median(std::span<const double> values);

} /* namespace kepler */
