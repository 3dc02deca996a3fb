/*
 * kepler: iterative keypoint and pose estimation with heatmap-conditioned
 *         cascade regressors
 * File: benchmarks/kepler_bench.cpp
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
#include "kepler/cascade.hpp"
#include "kepler/learning.hpp"

#include <benchmark/benchmark.h>

#include <random>

using namespace kepler;

namespace {

const SyntheticFace& sample_face()
{
    static const SyntheticFace face = generate_synthetic(1, SyntheticFaceSpec::defaults(), 1).front();
    return face;
}

RenderedInput random_input(int channels, int side)
{
    std::mt19937_64 rng(3);
    std::normal_distribution<float> n01(0.0f, 1.0f);
    RenderedInput x{channels, side, side, std::vector<float>(static_cast<std::size_t>(channels) * side * side)};
    for (auto& v : x.data) v = n01(rng);
    return x;
}

void BM_Render(benchmark::State& state)
{
    const auto& f = sample_face();
    RenderConfig cfg;
    cfg.width = cfg.height = static_cast<int>(state.range(0));
    cfg.sigma = state.range(0) == 224 ? 5.0 : 1.0;
    const FrameTransform frame = face_frame(f.record.face.box, cfg, 0.1);
    const Shape shape = frame.to_window(f.full_shape);
    for (auto _ : state) {
        const Image window = resample(f.image, frame, cfg.width, cfg.height);
        benchmark::DoNotOptimize(render(window, shape, f.record.face.visibility, cfg));
    }
}
BENCHMARK(BM_Render)->Arg(32)->Arg(224)->Unit(benchmark::kMicrosecond);

void BM_BoundedCorrection(benchmark::State& state)
{
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.0, 200.0);
    Shape g, y;
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
        g[i] = {u(rng), u(rng)};
        y[i] = {u(rng), u(rng)};
    }
    const VisibilityVector v = VisibilityVector::constant(1.0);
    for (auto _ : state) benchmark::DoNotOptimize(bounded_correction(g, y, 20.0, v));
}
BENCHMARK(BM_BoundedCorrection);

void BM_ReferenceForward(benchmark::State& state)
{
    const int side = static_cast<int>(state.range(0));
    const Network net(NetSpec::reference(3 + static_cast<int>(kNumLandmarks), side, side));
    const RegressorParams p = net.initialize(1, 1);
    const RenderedInput x = random_input(3 + static_cast<int>(kNumLandmarks), side);
    Workspace ws;
    std::array<double, kOutputDim> out{};
    for (auto _ : state) {
        net.forward(p.values, x, ws, out);
        benchmark::DoNotOptimize(out);
    }
}
BENCHMARK(BM_ReferenceForward)->Arg(32)->Unit(benchmark::kMicrosecond);

void BM_ReferenceForwardBackward(benchmark::State& state)
{
    const int side = static_cast<int>(state.range(0));
    const Network net(NetSpec::reference(3 + static_cast<int>(kNumLandmarks), side, side));
    const RegressorParams p = net.initialize(1, 1);
    const RenderedInput x = random_input(3 + static_cast<int>(kNumLandmarks), side);
    Workspace ws;
    std::array<double, kOutputDim> out{};
    std::array<double, kOutputDim> grad_out{};
    grad_out.fill(0.01);
    std::vector<double> grad(p.values.size(), 0.0);
    for (auto _ : state) {
        net.forward(p.values, x, ws, out);
        net.backward(p.values, ws, grad_out, grad);
        benchmark::DoNotOptimize(grad.data());
    }
}
BENCHMARK(BM_ReferenceForwardBackward)->Arg(32)->Unit(benchmark::kMicrosecond);

void BM_RunCascade(benchmark::State& state)
{
    const auto& f = sample_face();
    CascadeModel m;
    m.config = CascadeConfig::defaults();
    Shape unit;
    for (std::size_t i = 0; i < kNumLandmarks; ++i) unit[i] = {0.3 + 0.02 * i, 0.7 - 0.02 * i};
    m.mean_shape = MeanShape(unit);
    for (int t = 1; t <= 4; ++t) m.stage_params.push_back(Network(m.config.global_net).initialize(t, t));
    m.stage_params.push_back(Network(m.config.patch_net).initialize(5, 5));
    const InferenceOptions opts{state.range(0) != 0};
    for (auto _ : state) benchmark::DoNotOptimize(run_cascade(m, f.image, f.record.face.box, opts));
}
BENCHMARK(BM_RunCascade)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

} // namespace

BENCHMARK_MAIN();
