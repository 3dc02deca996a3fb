/*
 * kepler: iterative keypoint and pose estimation with heatmap-conditioned
 *         cascade regressors
 * File: core/include/kepler/config.hpp
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

#include "kepler/cascade.hpp"
#include "kepler/data.hpp"
#include "kepler/eval.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

namespace kepler {

/**
 * Everything a command-line run needs, read from one JSON file. Every key
 * is optional; see README.md for the full default document.
 */
struct RunConfig
{
    std::uint64_t seed = 7;
    /// Worker threads for per-face inference.
    int workers = 1;
    /// Annotation file (train, infer, eval, augment).
    std::filesystem::path data;
    /// Model bundle directory.
    std::filesystem::path model;
    /// Output directory.
    std::filesystem::path output;
    /// "tags" uses the split field of each record; otherwise a protocol name.
    std::string protocol = "tags";
    std::size_t test_size = 1000;
    std::size_t synthetic_count = 2000;
    SyntheticFaceSpec synthetic = SyntheticFaceSpec::defaults();
    CascadeConfig cascade = CascadeConfig::defaults();
    bool stage5 = true;
    PoseAccuracyMode pose_mode = PoseAccuracyMode::max_axis;
    VariantOptions variants;
    double afw_min_height = 150.0;

    /// Range and consistency checks that need no file system access.
    void validate() const;
    std::string to_json() const;
    /// Unknown keys and bad values throw ConfigError.
    static RunConfig from_json(const std::string& text);
    static RunConfig load(const std::filesystem::path& path);
};

} /* namespace kepler */
