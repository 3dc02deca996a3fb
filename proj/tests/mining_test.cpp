/*
 * kepler: iterative keypoint and pose estimation with heatmap-conditioned
 *         cascade regressors
 * File: tests/mining_test.cpp
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

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <set>

using namespace kepler;
using kepler::test::Gen;

namespace {

void expect_partition(const MiningPartition& p, const std::vector<double>& errors)
{
    std::set<std::size_t> all(p.hard_idx.begin(), p.hard_idx.end());
    for (std::size_t i : p.easy_idx) ASSERT_TRUE(all.insert(i).second) << "index " << i << " in both groups";
    ASSERT_EQ(all.size(), errors.size());
    for (std::size_t i : p.easy_idx) ASSERT_LE(errors[i], p.delta);
    ASSERT_GE(p.delta, p.C);
}

} // namespace

TEST(Histogram, BinsAndModalCenter)
{
    const std::vector<double> e = {0.001, 0.0049, 0.005, 0.012, 0.013, 0.014};
    const ErrorHistogram h = error_histogram(e, 0.005);
    ASSERT_EQ(h.counts.size(), 3u);
    EXPECT_EQ(h.counts[0], 2u);
    EXPECT_EQ(h.counts[1], 1u);
    EXPECT_EQ(h.counts[2], 3u);
    EXPECT_DOUBLE_EQ(h.center(2), 0.0125);
    EXPECT_THROW(error_histogram(std::vector<double>{-0.1}, 0.005), ConfigError);
}

TEST(Mining, ForcedDeltaSplit)
{
    const std::vector<double> e = {0.01, 0.02, 0.05, 0.06};
    const MiningPartition p = partition_at(e, 0.03);
    EXPECT_EQ(p.hard_idx, (std::vector<std::size_t>{2, 3}));
    EXPECT_EQ(p.easy_idx, (std::vector<std::size_t>{0, 1}));
}

TEST(Mining, UniformErrorsGiveAboutMinFraction)
{
    Gen gen(21);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> e(2000);
        for (auto& x : e) x = gen.uniform(0.0, 0.1);
        const MiningPartition p = mine_hard_samples(e, 0.005, 0.3);
        expect_partition(p, e);
        const double frac = static_cast<double>(p.hard_idx.size()) / static_cast<double>(e.size());
        EXPECT_GE(frac, 0.3);
        EXPECT_LE(frac, 0.32);
    }
}

TEST(Mining, SpikePlusTail)
{
    Gen gen(22);
    std::vector<double> e;
    for (int k = 0; k < 600; ++k) e.push_back(0.02 + gen.uniform(0.0, 0.002));
    for (int k = 0; k < 400; ++k) e.push_back(gen.uniform(0.0301, 0.1));
    // Upper end of the 30 to 40 percent range: the whole tail is hard.
    const MiningPartition p = mine_hard_samples(e, 0.005, 0.4);
    expect_partition(p, e);
    EXPECT_NEAR(p.C, 0.02, 0.005);
    EXPECT_LE(p.delta, 0.03);
    EXPECT_EQ(p.hard_idx.size(), 400u);
}

TEST(Mining, PropertyEveryAboveDeltaIsHardAndFractionHolds)
{
    Gen gen(23);
    for (int trial = 0; trial < 300; ++trial) {
        const int n = gen.integer(2, 300);
        std::vector<double> e(n);
        const int style = gen.integer(0, 2);
        for (auto& x : e) {
            if (style == 0) x = gen.uniform(0.0, 0.2);
            if (style == 1) x = std::abs(gen.normal(0.03, 0.02));
            // Heavy ties exercise the top-up path.
            if (style == 2) x = 0.005 * gen.integer(0, 4);
        }
        if (*std::min_element(e.begin(), e.end()) == *std::max_element(e.begin(), e.end())) e[0] += 0.01;
        const double f = gen.uniform(0.05, 0.6);
        const MiningPartition p = mine_hard_samples(e, 0.005, f);
        expect_partition(p, e);
        ASSERT_GE(static_cast<double>(p.hard_idx.size()), f * n - 1e-9);
        ASSERT_FALSE(p.easy_idx.empty());
    }
}

TEST(Mining, RejectsDegenerateInput)
{
    EXPECT_THROW(mine_hard_samples(std::vector<double>{}, 0.005), ConfigError);
    EXPECT_THROW(mine_hard_samples(std::vector<double>{0.1, 0.1}, 0.005), ConfigError);
    EXPECT_THROW(mine_hard_samples(std::vector<double>{0.1, 0.2}, 0.005, 1.0), ConfigError);
}

TEST(BalancedBatches, HalfHardHalfEasy)
{
    Gen gen(24);
    std::vector<double> e(100);
    for (auto& x : e) x = gen.uniform(0.0, 0.1);
    const MiningPartition p = mine_hard_samples(e, 0.005, 0.3);
    const std::set<std::size_t> hard(p.hard_idx.begin(), p.hard_idx.end());
    for (const auto& b : balanced_batches(p, 8, 5, 50)) {
        ASSERT_EQ(b.size(), 8u);
        const auto h = std::count_if(b.begin(), b.end(), [&](std::size_t i) { return hard.count(i) > 0; });
        ASSERT_EQ(h, 4);
    }
}

TEST(BalancedBatches, SmallHardGroupIsReused)
{
    const std::vector<double> e = {0.01, 0.01, 0.01, 0.01, 0.01, 0.01, 0.01, 0.01, 0.5, 0.6};
    const MiningPartition p = partition_at(e, 0.1);
    ASSERT_EQ(p.hard_idx.size(), 2u);
    std::size_t draws = 0;
    for (const auto& b : balanced_batches(p, 8, 1, 10))
        draws += static_cast<std::size_t>(std::count_if(b.begin(), b.end(), [](std::size_t i) { return i >= 8; }));
    EXPECT_GE(draws, 20u);
}

TEST(BalancedBatches, SameSeedSameStream)
{
    Gen gen(25);
    std::vector<double> e(64);
    for (auto& x : e) x = gen.uniform(0.0, 0.1);
    const MiningPartition p = mine_hard_samples(e, 0.005, 0.3);
    EXPECT_EQ(balanced_batches(p, 16, 9, 20), balanced_batches(p, 16, 9, 20));
    EXPECT_NE(balanced_batches(p, 16, 9, 20), balanced_batches(p, 16, 10, 20));
    EXPECT_THROW(balanced_batches(p, 7, 9, 1), ConfigError);
}
