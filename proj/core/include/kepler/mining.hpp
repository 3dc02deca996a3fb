/*
 * kepler: iterative keypoint and pose estimation with heatmap-conditioned
 *         cascade regressors
 * File: core/include/kepler/mining.hpp
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

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace kepler {

/// Fixed-width histogram with bins [k * bin_width, (k + 1) * bin_width).
struct ErrorHistogram
{
    double bin_width = 0.005;
    std::vector<std::size_t> counts;

    double lower_edge(std::size_t k) const { return static_cast<double>(k) * bin_width; }
    double center(std::size_t k) const { return (static_cast<double>(k) + 0.5) * bin_width; }
};

ErrorHistogram error_histogram(std::span<const double> errors, double bin_width);

/// Split of a training set into hard and easy samples by NME.
struct MiningPartition
{
    std::vector<std::size_t> hard_idx;
    std::vector<std::size_t> easy_idx;
    /// Center of the modal histogram bin.
    double C = 0.0;
    /// Samples with error above delta are hard.
    double delta = 0.0;
    ErrorHistogram histogram;
};

/**
 * Histogram the per-sample errors, take the modal bin center as C and
 * choose delta >= C as the largest error value that still leaves at least
 * `min_hard_fraction` of the samples strictly above it. When C itself is
 * past that point the hard group is topped up with the largest remaining
 * errors so that it never falls below the requested fraction. Throws
 * ConfigError on empty input, out-of-range fraction, or identical errors.
 */
MiningPartition mine_hard_samples(std::span<const double> errors, double bin_width,
                                  double min_hard_fraction = 0.3);

/// Partition at a fixed threshold; C is still reported from the histogram.
MiningPartition partition_at(std::span<const double> errors, double delta, double bin_width = 0.005);

/**
 * Endless stream of index batches with batch_size / 2 hard and
 * batch_size / 2 easy samples. The larger group is visited in reshuffled
 * passes; the smaller group is drawn uniformly with replacement.
 */
class BalancedBatchStream
{
public:
    BalancedBatchStream(const MiningPartition& partition, int batch_size, std::uint64_t seed);
    std::vector<std::size_t> next();

private:
    std::size_t draw(const std::vector<std::size_t>& group, std::vector<std::size_t>& cycle, std::size_t& pos,
                     bool with_replacement);

    std::vector<std::size_t> hard_;
    std::vector<std::size_t> easy_;
    std::vector<std::size_t> hard_cycle_;
    std::vector<std::size_t> easy_cycle_;
    std::size_t hard_pos_ = 0;
    std::size_t easy_pos_ = 0;
    int half_ = 0;
    std::mt19937_64 rng_;
};

/// The first `count` batches of a BalancedBatchStream.
std::vector<std::vector<std::size_t>> balanced_batches(const MiningPartition& partition, int batch_size,
                                                       std::uint64_t seed, std::size_t count);

} /* namespace kepler */
