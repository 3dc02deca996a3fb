/*
 * kepler: iterative keypoint and pose estimation with heatmap-conditioned
 *         cascade regressors
 * File: core/include/kepler/cascade.hpp
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

#include "kepler/data.hpp"
#include "kepler/image.hpp"
#include "kepler/learning.hpp"
#include "kepler/mining.hpp"
#include "kepler/net.hpp"
#include "kepler/regressor.hpp"
#include "kepler/render.hpp"
#include "kepler/types.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace kepler {

inline constexpr int kNumStages = 5;

/// Local-stage patch geometry.
struct PatchConfig
{
    /// Patch network raster side.
    int size = 16;
    /// Sigma of the center heatmap, patch pixels.
    double sigma = 1.5;
    /// Patch side W = round(fraction * sqrt(box.w * box.h)) image pixels.
    double fraction = 0.25;
    /// Training patch centers are offset uniformly by up to jitter * W per axis.
    double train_jitter = 0.25;

    void validate() const;
    friend bool operator==(const PatchConfig&, const PatchConfig&) = default;
};

struct CascadeConfig
{
    /// Raster of the global stages. Faces are cropped to a square window of
    /// side max(w, h) * (1 + 2 * crop_margin) around the box center.
    RenderConfig render;
    double crop_margin = 0.1;
    PatchConfig patch;
    std::array<StagePolicy, kNumStages> policies;
    NetSpec global_net;
    NetSpec patch_net;
    /// Stages 3 and 4 also start from the previous stage's weights (stage 2 always does).
    bool warm_start = true;
    /// Warm-started stages 3 and 4 begin with zeroed correction outputs, so
    /// their starting point predicts no step instead of repeating the last one.
    bool reset_correction_head = true;
    std::uint64_t seed = 0;

    /// Desk-scale defaults: 32 x 32 global raster, 16 x 16 patches.
    static CascadeConfig defaults();
    void validate() const;
    std::string to_json() const;
    /// Keys absent from `text` keep their defaults; unknown keys are rejected.
    static CascadeConfig from_json(const std::string& text);

    friend bool operator==(const CascadeConfig&, const CascadeConfig&) = default;
};

struct CascadeModel
{
    MeanShape mean_shape;
    CascadeConfig config;
    /// stage_params[t - 1] holds f_t; stages 1-4 global, stage 5 patch network.
    std::vector<RegressorParams> stage_params;

    /// Throws ConfigError naming the first missing or mismatched stage.
    void validate() const;
};

/// Writes manifest.json and stage<t>.params into `dir`.
void save_model(const CascadeModel& model, const std::filesystem::path& dir);
CascadeModel load_model(const std::filesystem::path& dir);

/// Window transform of a face box for the global stages.
FrameTransform face_frame(const FaceBox& box, const RenderConfig& cfg, double crop_margin);

/// Patch side W in image pixels (at least 1).
double patch_side(const FaceBox& box, const PatchConfig& cfg);

/// Transform of the W x W patch centered at `center` onto a size x size raster.
FrameTransform patch_frame(const Point2& center, double side, int size);

/// The N local patches of one face.
struct PatchSet
{
    std::array<RenderedInput, kNumLandmarks> inputs;
    std::array<FrameTransform, kNumLandmarks> frames;
    /// False when a patch reaches past the image border (zero padded).
    std::array<bool, kNumLandmarks> inside{};
    double side = 0.0;
};

/// RGB patch plus one Gaussian channel at the patch center.
RenderedInput render_patch(const Image& image, const FrameTransform& frame, const PatchConfig& cfg);

PatchSet extract_patches(const Image& image, const Shape& shape, const FaceBox& box, const PatchConfig& cfg);

struct LocalStageResult
{
    Shape shape;
    VisibilityVector visibility = VisibilityVector::constant(0.0);
};

/**
 * Feeds each patch to the patch network; patch i contributes correction i
 * and visibility i. A correction is applied (mapped back to image pixels)
 * only when its predicted visibility is at least tau.
 */
LocalStageResult run_local_stage(const Image& image, const Shape& shape, const FaceBox& box,
                                 const RegressorParams& params, const PatchConfig& cfg, double tau);

struct CascadeResult
{
    Shape shape;
    /// Visibility of the last stage that ran.
    VisibilityVector visibility;
    /// Pose of the last global stage.
    Pose3D pose;
    /// y_0 .. y_5.
    std::vector<Shape> trajectory;
};

/// One stage of the cascade: current shape and visibility in, output of f_t out.
using StageFunction = std::function<RegressorOutput(int stage, const Shape& current, const VisibilityVector& visibility)>;

/**
 * y_{t+1} = y_t + delta_t for t = 1..stages. The trajectory starts with y0
 * and holds one shape per stage.
 */
CascadeResult iterate_cascade(const Shape& y0, int stages, const StageFunction& step);

struct InferenceOptions
{
    bool stage5 = true;
};

/// Full inference over a trained model. With stage 5 off, y_5 = y_4.
CascadeResult run_cascade(const CascadeModel& model, const Image& image, const FaceBox& box,
                          const InferenceOptions& options = {});

struct StageReport
{
    int stage = 0;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    /// Median training NME after the stage; unused for the patch stage.
    double median_nme = 0.0;
};

struct CascadeTrainReport
{
    double initial_median_nme = 0.0;
    std::vector<StageReport> stages;
    /// Partition used by stage 4, computed from stage-3 outputs.
    std::optional<MiningPartition> partition;
    /// Fraction of training faces with NME above the stage-4 delta, before and after stage 4.
    double hard_fraction_stage3 = 0.0;
    double hard_fraction_stage4 = 0.0;
};

struct CascadeTrainOptions
{
    /// Train the patch network; otherwise stage_params holds four entries.
    bool train_stage5 = true;
    std::function<void(const std::string&)> log;
    std::function<void(const EpochLog&)> on_epoch;
};

/**
 * Greedy stage-wise training. Stage t sees inputs rendered from the
 * predictions of stages 1..t-1 on the training set. Stage 4 mines hard
 * samples from the stage-3 errors; stage 5 trains on patches around
 * (jittered) stage-4 predictions. Throws DivergenceError naming the stage.
 */
CascadeModel train_cascade(std::span<const FaceWithImage> train, const CascadeConfig& config,
                           CascadeTrainReport* report = nullptr, const CascadeTrainOptions& options = {});

} /* namespace kepler */
