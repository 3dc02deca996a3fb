/*
 * kepler: iterative keypoint and pose estimation with heatmap-conditioned
 *         cascade regressors
 * File: tests/learning_test.cpp
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

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

using namespace kepler;
using kepler::test::Gen;

namespace {

Shape filled(Point2 p)
{
    Shape s;
    for (auto& q : s) q = p;
    return s;
}

/// Scalar re-derivation of the bounded step for one point.
Point2 oracle_step(double gx, double gy, double yx, double yy, double L)
{
    const double ux = gx - yx;
    const double uy = gy - yy;
    const double len = std::sqrt(ux * ux + uy * uy);
    if (len == 0.0) return {0.0, 0.0};
    const double k = std::min(L, len) / len;
    return {k * ux, k * uy};
}

} // namespace

TEST(BoundedCorrection, SpecExamples)
{
    const Shape y = filled({0, 0});
    const VisibilityVector all;
    EXPECT_EQ(bounded_correction(y, y, 20.0, all), filled({0, 0}));
    EXPECT_EQ(bounded_correction(filled({3, 4}), y, 20.0, all), filled({3, 4}));
    const Shape d = bounded_correction(filled({30, 40}), y, 20.0, all);
    EXPECT_NEAR(d[0].x, 12.0, 1e-12);
    EXPECT_NEAR(d[0].y, 16.0, 1e-12);
}

TEST(BoundedCorrection, InvisiblePointsGetZeroAndMayBeAbsent)
{
    Shape g = filled({30, 40});
    g[2] = {kAbsent, kAbsent};
    VisibilityVector v;
    v[2] = 0.0;
    const Shape d = bounded_correction(g, filled({0, 0}), 20.0, v);
    EXPECT_EQ(d[2], (Point2{0.0, 0.0}));
    v[2] = 1.0;
    EXPECT_THROW(bounded_correction(g, filled({0, 0}), 20.0, v), DataError);
    EXPECT_THROW(bounded_correction(g, filled({0, 0}), 0.0, VisibilityVector::constant(0.0)), ConfigError);
}

TEST(BoundedCorrection, PropertiesAgainstScalarOracle)
{
    Gen gen(11);
    const VisibilityVector all;
    for (int trial = 0; trial < 2000; ++trial) {
        const Shape g = gen.shape(-200.0, 200.0);
        const Shape y = gen.shape(-200.0, 200.0);
        const double L = gen.uniform(0.5, 150.0);
        const Shape d = bounded_correction(g, y, L, all);
        const Shape free = bounded_correction(g, y, std::nullopt, all);
        for (std::size_t i = 0; i < kNumLandmarks; ++i) {
            const Point2 want = oracle_step(g[i].x, g[i].y, y[i].x, y[i].y, L);
            ASSERT_NEAR(d[i].x, want.x, 1e-9);
            ASSERT_NEAR(d[i].y, want.y, 1e-9);
            ASSERT_LE(d[i].norm(), L * (1.0 + 1e-12));
            const Point2 u = g[i] - y[i];
            // Same direction: nonnegative multiple of u.
            ASSERT_GE(d[i].x * u.x + d[i].y * u.y, 0.0);
            ASSERT_NEAR(d[i].x * u.y - d[i].y * u.x, 0.0, 1e-9 * (1.0 + u.norm() * L));
            ASSERT_NEAR(free[i].x, u.x, 1e-12);
            ASSERT_NEAR(free[i].y, u.y, 1e-12);
        }
    }
}

TEST(BoundedCorrection, ContinuousAtTheBound)
{
    const Shape y = filled({0, 0});
    const VisibilityVector all;
    const double L = 5.0;
    const Shape below = bounded_correction(filled({3.0 * (1 - 1e-12), 4.0 * (1 - 1e-12)}), y, L, all);
    const Shape above = bounded_correction(filled({3.0 * (1 + 1e-12), 4.0 * (1 + 1e-12)}), y, L, all);
    EXPECT_NEAR(below[0].x, above[0].x, 1e-10);
    EXPECT_NEAR(below[0].y, above[0].y, 1e-10);
}

TEST(KeypointLoss, Examples)
{
    Gen gen(12);
    const Shape y = gen.shape(0.0, 10.0);
    EXPECT_EQ(keypoint_loss(y, y, VisibilityVector{}), 0.0);
    EXPECT_EQ(keypoint_loss(y, gen.shape(0.0, 10.0), VisibilityVector::constant(0.0)), 0.0);
    Shape g = y;
    g[7] = {y[7].x - 1.0, y[7].y - 2.0};
    VisibilityVector one = VisibilityVector::constant(0.0);
    one[7] = 1.0;
    EXPECT_NEAR(keypoint_loss(y, g, one), 5.0, 1e-12);
}

TEST(VariantLoss, Examples)
{
    const std::vector<double> z(5, 0.0);
    const std::vector<double> ones(5, 1.0);
    const auto zero = variant_loss_and_grad(z, z, ones, 0.3, 1);
    EXPECT_EQ(zero.value, 0.0);
    for (double g : zero.gradient) EXPECT_EQ(g, 0.0);

    const std::vector<double> y = {1.0};
    const std::vector<double> g = {0.0};
    const std::vector<double> v = {1.0};
    const auto r = variant_loss_and_grad(y, g, v, 0.2, 1);
    EXPECT_NEAR(r.value, 1.2, 1e-12);
    EXPECT_NEAR(r.gradient[0], 2.2, 1e-12);
}

TEST(VariantLoss, ShapeOverloadSharesPointWeight)
{
    Gen gen(13);
    const Shape y = gen.shape(0.0, 5.0);
    const Shape g = gen.shape(0.0, 5.0);
    VisibilityVector v = gen.binary_visibility(0.5);
    const auto r = variant_loss_and_grad(y, g, v, 0.4, 2);
    double want = 0.0;
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
        if (v[i] == 0.0) continue;
        const double dx = y[i].x - g[i].x;
        const double dy = y[i].y - g[i].y;
        want += dx * dx + dy * dy + 0.4 * (std::abs(dx) + std::abs(dy));
        EXPECT_NEAR(r.gradient[2 * i], (2 * dx + 0.4 * ((dx > 0) - (dx < 0))) / 2.0, 1e-12);
    }
    EXPECT_NEAR(r.value, want / 2.0, 1e-10);
}

TEST(VariantLoss, GradientMatchesFiniteDifferences)
{
    Gen gen(14);
    for (int trial = 0; trial < 50; ++trial) {
        const int n = gen.coin() ? 1 : 8;
        const std::size_t m = 2 * kNumLandmarks * n;
        std::vector<double> y(m), g(m), v(m);
        for (std::size_t k = 0; k < m; ++k) {
            g[k] = gen.uniform(-5.0, 5.0);
            y[k] = g[k] + gen.normal(0.0, 2.0);
            v[k] = gen.coin(0.8) ? 1.0 : 0.0;
        }
        const double gamma = gen.uniform(0.0, 1.0);
        const auto r = variant_loss_and_grad(y, g, v, gamma, n);
        for (std::size_t k = 0; k < m; ++k) {
            if (std::abs(y[k] - g[k]) <= 1e-6) continue;
            const double h = std::min(1e-5, 0.25 * std::abs(y[k] - g[k]));
            std::vector<double> yp = y, ym = y;
            yp[k] += h;
            ym[k] -= h;
            const double fd = (variant_loss_and_grad(yp, g, v, gamma, n).value -
                               variant_loss_and_grad(ym, g, v, gamma, n).value) / (2 * h);
            const double scale = std::max({std::abs(fd), std::abs(r.gradient[k]), 1e-3});
            ASSERT_LT(std::abs(fd - r.gradient[k]) / scale, 1e-5) << "coordinate " << k;
        }
    }
}

TEST(PoseLoss, Examples)
{
    const Pose3D p{10, 20, 30};
    EXPECT_EQ(pose_loss(p, p), 0.0);
    EXPECT_DOUBLE_EQ(pose_loss({3, 4, 0}, {0, 0, 0}), 25.0);
    Gen gen(15);
    for (int k = 0; k < 100; ++k) {
        const Pose3D a{gen.normal(), gen.normal(), gen.normal()};
        const Pose3D b{gen.normal(), gen.normal(), gen.normal()};
        ASSERT_EQ(pose_loss(a, b), pose_loss(b, a));
        ASSERT_GE(pose_loss(a, b), 0.0);
    }
}

TEST(VisibilityLoss, Examples)
{
    const VisibilityVector all;
    EXPECT_EQ(visibility_loss(all, all), 0.0);
    VisibilityVector one = all;
    one[4] = 0.0;
    EXPECT_DOUBLE_EQ(visibility_loss(one, all), 1.0);
    VisibilityVector alt;
    for (std::size_t i = 0; i < kNumLandmarks; ++i) alt[i] = static_cast<double>(i % 2);
    EXPECT_DOUBLE_EQ(visibility_loss(VisibilityVector::constant(0.5), alt), 5.25);
}

TEST(TotalLoss, ExamplesAndLinearity)
{
    StagePolicy p = StagePolicy::defaults(1);
    p.lambda = p.mu = p.nu = 0.0;
    EXPECT_EQ(total_loss(2, 4, 6, p).total, 0.0);
    p.lambda = 1.0;
    p.mu = 0.5;
    p.nu = 0.5;
    EXPECT_DOUBLE_EQ(total_loss(2, 4, 6, p).total, 7.0);
    const StagePolicy s5 = StagePolicy::defaults(5);
    EXPECT_EQ(total_loss(1, 1e300, 1, s5).total, total_loss(1, 0, 1, s5).total);
    EXPECT_EQ(total_loss(1, std::nan(""), 1, s5).total, total_loss(1, 0, 1, s5).total);

    Gen gen(16);
    for (int k = 0; k < 100; ++k) {
        const double a = gen.uniform(0, 10), b = gen.uniform(0, 10), c = gen.uniform(0, 10), s = gen.uniform(0, 3);
        ASSERT_NEAR(total_loss(s * a, b, c, p).total - total_loss(0, b, c, p).total, s * p.lambda * a, 1e-9);
    }
}

TEST(StagePolicy, DefaultsValidateAndBrokenOnesThrow)
{
    for (int t = 1; t <= 5; ++t) {
        const StagePolicy p = StagePolicy::defaults(t);
        EXPECT_NO_THROW(p.validate());
        EXPECT_EQ(p.uses_variant_loss(), t >= 3);
    }
    EXPECT_THROW(StagePolicy::defaults(6), ConfigError);
    StagePolicy p = StagePolicy::defaults(3);
    p.bound_L = 20.0;
    EXPECT_THROW(p.validate(), ConfigError);
    p = StagePolicy::defaults(5);
    p.mu = 0.1;
    EXPECT_THROW(p.validate(), ConfigError);
    p = StagePolicy::defaults(4);
    p.batch_size = 7;
    EXPECT_THROW(p.validate(), ConfigError);
}
