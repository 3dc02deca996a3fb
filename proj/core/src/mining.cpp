/*
 * kepler: iterative keypoint and pose estimation with heatmap-conditioned
 *         cascade regressors
 * File: core/src/mining.cpp
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
#include "kepler/mining.hpp"

#include "kepler/types.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace kepler {

namespace {

double modal_center(const ErrorHistogram& h)
{
    const auto it = std::max_element(h.counts.begin(), h.counts.end());
    return h.center(static_cast<std::size_t>(it - h.counts.begin()));
}

} // namespace

ErrorHistogram error_histogram(std::span<const double> errors, double bin_width)
{
    if (!(bin_width > 0.0)) {
        throw ConfigError("histogram bin width must be positive");
    }
    ErrorHistogram h;
    h.bin_width = bin_width;
    for (double e : errors) {
        if (!std::isfinite(e) || e < 0.0) {
            throw ConfigError("errors must be finite and nonnegative");
        }
        const auto k = static_cast<std::size_t>(std::floor(e / bin_width));
        if (k >= h.counts.size()) {
            h.counts.resize(k + 1, 0);
        }
        ++h.counts[k];
    }
    return h;
}

MiningPartition partition_at(std::span<const double> errors, double delta, double bin_width)
{
    if (errors.empty()) {
        throw ConfigError("cannot partition an empty error list");
    }
    MiningPartition p;
    p.histogram = error_histogram(errors, bin_width);
    p.C = modal_center(p.histogram);
    p.delta = delta;
    for (std::size_t i = 0; i < errors.size(); ++i) {
        (errors[i] > delta ? p.hard_idx : p.easy_idx).push_back(i);
    }
    return p;
}

MiningPartition mine_hard_samples(std::span<const double> errors, double bin_width, double min_hard_fraction)
{
    if (errors.empty()) {
        throw ConfigError("cannot mine hard samples from an empty error list");
    }
    if (!(min_hard_fraction > 0.0 && min_hard_fraction < 1.0)) {
        throw ConfigError("minimum hard fraction must lie in (0, 1)");
    }
    const auto [lo, hi] = std::minmax_element(errors.begin(), errors.end());
    if (*lo == *hi) {
        throw ConfigError("all errors are identical; hard/easy partition is degenerate");
    }

    const ErrorHistogram hist = error_histogram(errors, bin_width);
    const double C = modal_center(hist);
    const std::size_t n = errors.size();
    const auto needed = static_cast<std::size_t>(std::ceil(min_hard_fraction * static_cast<double>(n)));

    std::vector<double> sorted(errors.begin(), errors.end());
    std::sort(sorted.begin(), sorted.end());
    // Largest sample value d with at least `needed` samples strictly above d.
    double quantile = sorted.front();
    for (std::size_t k = n; k-- > 0;) {
        const auto above = static_cast<std::size_t>(sorted.end() - std::upper_bound(sorted.begin(), sorted.end(), sorted[k]));
        if (above >= needed) {
            quantile = sorted[k];
            break;
        }
    }

    MiningPartition p = partition_at(errors, std::max(C, quantile), bin_width);
    p.histogram = hist;
    p.C = C;
    if (p.hard_idx.size() < needed) {
        // Top up with the largest easy errors, lowest index first on ties.
        std::vector<std::size_t> easy = p.easy_idx;
        std::stable_sort(easy.begin(), easy.end(),
                         [&](std::size_t a, std::size_t b) { return errors[a] > errors[b]; });
        const std::size_t extra = std::min(needed - p.hard_idx.size(), easy.size() - 1);
        p.hard_idx.insert(p.hard_idx.end(), easy.begin(), easy.begin() + static_cast<std::ptrdiff_t>(extra));
        std::sort(p.hard_idx.begin(), p.hard_idx.end());
        easy.erase(easy.begin(), easy.begin() + static_cast<std::ptrdiff_t>(extra));
        std::sort(easy.begin(), easy.end());
        p.easy_idx = std::move(easy);
    }
    return p;
}

BalancedBatchStream::BalancedBatchStream(const MiningPartition& partition, int batch_size, std::uint64_t seed)
    : hard_(partition.hard_idx), easy_(partition.easy_idx), half_(batch_size / 2), rng_(seed)
{
    if (batch_size <= 0 || batch_size % 2 != 0) {
        throw ConfigError("balanced batches need a positive even batch size");
    }
    if (hard_.empty() || easy_.empty()) {
        throw ConfigError("balanced batches need nonempty hard and easy groups");
    }
}

std::size_t BalancedBatchStream::draw(const std::vector<std::size_t>& group, std::vector<std::size_t>& cycle,
                                      std::size_t& pos, bool with_replacement)
{
    if (with_replacement) {
        std::uniform_int_distribution<std::size_t> pick(0, group.size() - 1);
        return group[pick(rng_)];
    }
    if (pos == cycle.size()) {
        cycle = group;
        std::shuffle(cycle.begin(), cycle.end(), rng_);
        pos = 0;
    }
    return cycle[pos++];
}

std::vector<std::size_t> BalancedBatchStream::next()
{
    const bool hard_smaller = hard_.size() < easy_.size();
    std::vector<std::size_t> batch;
    batch.reserve(2 * static_cast<std::size_t>(half_));
    for (int k = 0; k < half_; ++k) {
        batch.push_back(draw(hard_, hard_cycle_, hard_pos_, hard_smaller));
    }
    for (int k = 0; k < half_; ++k) {
        batch.push_back(draw(easy_, easy_cycle_, easy_pos_, !hard_smaller));
    }
    return batch;
}

std::vector<std::vector<std::size_t>> balanced_batches(const MiningPartition& partition, int batch_size,
                                                       std::uint64_t seed, std::size_t count)
{
    BalancedBatchStream stream(partition, batch_size, seed);
    std::vector<std::vector<std::size_t>> out;
    out.reserve(count);
    for (std::size_t b = 0; b < count; ++b) {
        out.push_back(stream.next());
    }
    return out;
}

} /* namespace kepler */
