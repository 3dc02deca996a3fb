/*
 * kepler: iterative keypoint and pose estimation with heatmap-conditioned
 *         cascade regressors
 * File: tests/acceptance.cpp
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

// Acceptance suite: one line per criterion, nonzero exit on any failure.
// Tolerances are fixed below; data-gated criteria print SKIP when their
// dataset is not supplied through the environment.

#include "kepler/cascade.hpp"
#include "kepler/data.hpp"
#include "kepler/eval.hpp"
#include "kepler/learning.hpp"
#include "kepler/regressor.hpp"
#include "kepler_cli.hpp"

#include "test_support.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <sstream>

using namespace kepler;
using kepler::test::Gen;

namespace {

constexpr double kCorrectionTol = 1e-9;
constexpr double kCorrectionSeconds = 5.0;
constexpr double kVariantGradTol = 1e-5;
constexpr double kVariantActiveGap = 1e-6;
constexpr double kNetGradTol = 1e-3;
constexpr double kFaultFloor = 1e-2;
constexpr double kOracleL = 20.0;
constexpr double kOracleInitMax = 100.0;
constexpr double kOracleNme = 1e-9;
constexpr std::size_t kSyntheticCount = 2000;
constexpr std::uint64_t kSeed = 7;
constexpr double kStage4Ratio = 0.5;
constexpr double kWallClockSeconds = 30.0 * 60.0;
constexpr std::size_t kPifaRecords = 24386;
constexpr std::size_t kPifaTrain = 23386;
constexpr std::size_t kPifaTest = 1000;
constexpr std::size_t kAfwRecords = 341;

enum class Status { pass, fail, skip };

struct Outcome
{
    Status status = Status::fail;
    std::string detail;
};

Outcome verdict(bool ok, std::string detail) { return {ok ? Status::pass : Status::fail, std::move(detail)}; }

std::string fmt(const char* f, auto... args)
{
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0)
{
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string slurp(const std::filesystem::path& p)
{
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::map<std::string, std::string> tree(const std::filesystem::path& dir)
{
    std::map<std::string, std::string> out;
    for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
        if (e.is_regular_file()) out[std::filesystem::relative(e.path(), dir).string()] = slurp(e.path());
    return out;
}

int run_cli(std::vector<std::string> args)
{
    args.insert(args.begin(), "kepler");
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    return cli::run(static_cast<int>(argv.size()), argv.data());
}

// Scalar re-derivation of the bounded step of one point.
void oracle_step(double gx, double gy, double yx, double yy, double L, double& dx, double& dy)
{
    dx = gx - yx;
    dy = gy - yy;
    const double len = std::sqrt(dx * dx + dy * dy);
    if (len > L) {
        dx = dx * (L / len);
        dy = dy * (L / len);
    }
}

Outcome criterion1()
{
    Gen gen(101);
    const VisibilityVector all = VisibilityVector::constant(1.0);
    double worst = 0.0;
    double worst_excess = -std::numeric_limits<double>::infinity();
    double elapsed = 0.0;
    for (int trial = 0; trial < 100000; ++trial) {
        Shape g = gen.shape(-500.0, 500.0);
        Shape y = gen.shape(-500.0, 500.0);
        if (trial % 10 == 0) y[trial % kNumLandmarks] = g[trial % kNumLandmarks];
        const double L = std::exp(gen.uniform(std::log(1e-3), std::log(1e3)));
        const auto t0 = std::chrono::steady_clock::now();
        const Shape d = bounded_correction(g, y, L, all);
        elapsed += seconds_since(t0);
        for (std::size_t i = 0; i < kNumLandmarks; ++i) {
            double dx, dy;
            oracle_step(g[i].x, g[i].y, y[i].x, y[i].y, L, dx, dy);
            worst = std::max({worst, std::abs(d[i].x - dx), std::abs(d[i].y - dy)});
            worst_excess = std::max(worst_excess, (d[i].norm() - L) / L);
        }
    }
    // Norms equal to L may land one rounding step above it.
    const bool ok = worst <= kCorrectionTol && worst_excess <= 1e-12 && elapsed < kCorrectionSeconds;
    return verdict(ok, fmt("10^5 triples, max |diff| %.3g, max (|d| - L) / L %.3g, %.2f s", worst, worst_excess, elapsed));
}

Outcome criterion2()
{
    Gen gen(102);
    double worst = 0.0;
    std::size_t checked = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const int n = trial % 2 == 0 ? 1 : 8;
        const std::size_t m = 2 * kNumLandmarks * n;
        std::vector<double> y(m), g(m), v(m);
        for (std::size_t k = 0; k < m; ++k) {
            g[k] = gen.uniform(-50.0, 50.0);
            y[k] = g[k] + gen.normal(0.0, 5.0);
            v[k] = gen.coin(0.8) ? 1.0 : 0.0;
        }
        const double gamma = gen.uniform(0.0, 1.0);
        const auto r = variant_loss_and_grad(y, g, v, gamma, n);
        for (std::size_t k = 0; k < m; ++k) {
            if (std::abs(y[k] - g[k]) <= kVariantActiveGap) continue;
            // Step stays inside the smooth region around y_k.
            const double h = std::min(1e-5, 0.25 * std::abs(y[k] - g[k]));
            std::vector<double> yp = y, ym = y;
            yp[k] += h;
            ym[k] -= h;
            const double fd = (variant_loss_and_grad(yp, g, v, gamma, n).value -
                               variant_loss_and_grad(ym, g, v, gamma, n).value) / (2.0 * h);
            const double scale = std::max({std::abs(fd), std::abs(r.gradient[k]), 1e-3});
            worst = std::max(worst, std::abs(fd - r.gradient[k]) / scale);
            ++checked;
        }
    }
    return verdict(worst <= kVariantGradTol, fmt("%zu coordinates, max relative error %.3g", checked, worst));
}

Outcome criterion3()
{
    const int channels = 3 + static_cast<int>(kNumLandmarks);
    double clean = 0.0;
    double fault = std::numeric_limits<double>::infinity();
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> n01(0.0, 1.0);
        const Network net(NetSpec::tiny(channels, 16, 16));
        const RegressorParams params = net.initialize(seed, 3);
        RenderedInput x{channels, 16, 16, std::vector<float>(static_cast<std::size_t>(channels) * 256)};
        for (auto& v : x.data) v = static_cast<float>(n01(rng));
        TrainingTarget t;
        for (std::size_t k = 0; k < kOutputDim; ++k) {
            t.value[k] = n01(rng);
            t.weight[k] = 1.0;
        }
        const StagePolicy policy = StagePolicy::defaults(3);
        clean = std::max(clean, gradient_check(params, x, t, policy));
        GradientCheckOptions faulty;
        faulty.fault_index = params.tensor("output.weight").offset;
        fault = std::min(fault, gradient_check(params, x, t, policy, faulty));
    }
    return verdict(clean <= kNetGradTol && fault > kFaultFloor,
                   fmt("3 seeds, max relative error %.3g, fault-injected min %.3g", clean, fault));
}

Outcome criterion4()
{
    Gen gen(104);
    double worst = 0.0;
    for (int trial = 0; trial < 2000; ++trial) {
        const AnnotatedFace gt = gen.face(600.0);
        Shape y0;
        for (std::size_t i = 0; i < kNumLandmarks; ++i) {
            const Point2 anchor = gt.visibility[i] > 0 ? gt.shape[i] : Point2{300.0, 300.0};
            const double a = gen.uniform(0.0, 2.0 * std::numbers::pi);
            // Every fifth face puts some points exactly at the 100 px limit.
            const double r = trial % 5 == 0 && i % 3 == 0 ? kOracleInitMax : gen.uniform(0.0, kOracleInitMax);
            y0[i] = {anchor.x + r * std::cos(a), anchor.y + r * std::sin(a)};
        }
        const auto res = iterate_cascade(y0, kNumStages, [&](int, const Shape& y, const VisibilityVector&) {
            return oracle_predict(gt, y, kOracleL);
        });
        worst = std::max(worst, nme(res.shape, gt));
    }
    return verdict(worst <= kOracleNme, fmt("2000 faces, L = 20, 5 stages, max NME %.3g", worst));
}

struct EndToEnd
{
    std::vector<FaceWithImage> train;
    std::vector<FaceWithImage> test;
    CascadeModel model;
    CascadeTrainReport report;
    double train_seconds = 0.0;
    std::array<double, 5> median{};
    double total_seconds = 0.0;
};

EndToEnd run_end_to_end()
{
    EndToEnd e;
    const auto t0 = std::chrono::steady_clock::now();
    for (auto& s : generate_synthetic(kSyntheticCount, SyntheticFaceSpec::defaults(), kSeed)) {
        (s.record.face.split_tag == "test" ? e.test : e.train).push_back({s.record, s.image});
    }
    CascadeConfig cfg = CascadeConfig::defaults();
    cfg.seed = kSeed;
    e.model = train_cascade(e.train, cfg, &e.report);
    e.train_seconds = seconds_since(t0);
    std::array<std::vector<double>, 5> per_stage;
    for (const auto& f : e.test) {
        const CascadeResult r = run_cascade(e.model, f.image, f.record.face.box, {false});
        for (std::size_t t = 0; t < 5; ++t) per_stage[t].push_back(nme(r.trajectory[t], f.record.face));
    }
    for (std::size_t t = 0; t < 5; ++t) e.median[t] = median(per_stage[t]);
    e.total_seconds = seconds_since(t0);
    return e;
}

Outcome criterion5(const EndToEnd& e)
{
    bool ok = e.median[4] <= kStage4Ratio * e.median[0] && e.total_seconds <= kWallClockSeconds;
    for (std::size_t t = 2; t <= 4; ++t) ok = ok && e.median[t] <= e.median[t - 1];
    return verdict(ok, fmt("%zu train / %zu test, median NME init %.4f, stages 1-4 %.4f %.4f %.4f %.4f, %.0f s",
                           e.train.size(), e.test.size(), e.median[0], e.median[1], e.median[2], e.median[3],
                           e.median[4], e.total_seconds));
}

Outcome criterion6(const EndToEnd& e)
{
    if (!e.report.partition) return {Status::fail, "no mining partition recorded"};
    return verdict(e.report.hard_fraction_stage4 < e.report.hard_fraction_stage3,
                   fmt("delta %.4f, hard fraction %.4f after stage 3, %.4f after stage 4",
                       e.report.partition->delta, e.report.hard_fraction_stage3, e.report.hard_fraction_stage4));
}

Outcome criterion7(const EndToEnd& e)
{
    if (e.model.stage_params.size() != 5) return {Status::fail, "no patch stage trained"};
    const PatchConfig& pc = e.model.config.patch;
    const double tau = e.model.config.policies[4].tau;
    Gen gen(107);
    std::vector<double> before, after;
    std::size_t gated = 0;
    std::size_t moved_below_tau = 0;
    for (const auto& f : e.test) {
        const FaceBox& box = f.record.face.box;
        const CascadeResult r = run_cascade(e.model, f.image, box, {false});
        const double W = patch_side(box, pc);
        Shape y = r.trajectory[4];
        for (auto& p : y) {
            const double a = gen.uniform(0.0, 2.0 * std::numbers::pi);
            const double len = gen.uniform(0.0, W / 4.0);
            p = {p.x + len * std::cos(a), p.y + len * std::sin(a)};
        }
        const LocalStageResult local = run_local_stage(f.image, y, box, e.model.stage_params[4], pc, tau);
        for (std::size_t i = 0; i < kNumLandmarks; ++i) {
            if (local.visibility[i] >= tau) continue;
            ++gated;
            if (!(local.shape[i] == y[i])) ++moved_below_tau;
        }
        before.push_back(nme(y, f.record.face));
        after.push_back(nme(local.shape, f.record.face));
    }
    const double mb = median(before), ma = median(after);
    return verdict(ma < mb && moved_below_tau == 0,
                   fmt("median NME perturbed %.4f -> patch stage %.4f, %zu points below tau, %zu moved", mb, ma,
                       gated, moved_below_tau));
}

Outcome criterion8()
{
    Gen gen(108);
    double worst_self = 0.0;
    std::vector<AnnotatedFace> faces;
    for (int k = 0; k < 200; ++k) {
        faces.push_back(gen.face(400.0));
        worst_self = std::max(worst_self, nme(faces.back().shape, faces.back()));
    }
    const EvalReport self = evaluate(faces, faces);
    std::vector<Pose3D> poses;
    for (const auto& f : faces) poses.push_back(f.pose);
    const double acc = pose_metrics(poses, poses).accuracy_15;

    const auto thresholds = ced_thresholds();
    const std::vector<double> inf = {std::numeric_limits<double>::infinity()};
    bool ced_inf = true;
    bool monotone = true;
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> errors(gen.integer(1, 300));
        for (auto& x : errors) x = std::abs(gen.normal(0.0, gen.uniform(0.005, 0.2)));
        ced_inf = ced_inf && ced_curve(errors, inf)[0].fraction == 1.0;
        const auto c = ced_curve(errors, thresholds);
        for (std::size_t k = 1; k < c.size(); ++k) monotone = monotone && c[k].fraction >= c[k - 1].fraction;
    }
    const bool ok = worst_self == 0.0 && self.mean_nme == 0.0 && acc == 1.0 && ced_inf && monotone;
    return verdict(ok, fmt("NME(gt, gt) %.3g, pose accuracy %.1f%%, CED(inf) %s, 1000 CED curves %s", worst_self,
                           100.0 * acc, ced_inf ? "1.0" : "not 1.0", monotone ? "monotone" : "NOT monotone"));
}

Outcome criterion9()
{
    Gen gen(109);
    std::vector<AnnotationRecord> records(kPifaRecords);
    for (auto& r : records) r.face = gen.face(500.0);
    const ProtocolSplit split = split_pifa(records, kSeed, kPifaTest);
    const bool counts = split.train.size() == kPifaTrain && split.test.size() == kPifaTest;

    std::vector<FaceWithImage> faces;
    for (auto& s : generate_synthetic(4, SyntheticFaceSpec::defaults(), kSeed)) faces.push_back({s.record, s.image});
    const auto variants = make_all_variants(faces);
    const bool eight = variants.size() == 8 * faces.size();

    std::string afw = "AFW annotations not supplied (KEPLER_AFW_ANNOTATIONS), 341 check skipped";
    bool afw_ok = true;
    if (const char* path = std::getenv("KEPLER_AFW_ANNOTATIONS")) {
        const std::size_t kept = filter_afw(load_annotations(path)).size();
        afw_ok = kept == kAfwRecords;
        afw = fmt("AFW kept %zu of expected 341", kept);
    }
    return verdict(counts && eight && afw_ok,
                   fmt("pifa %zu/%zu, %zu variants from %zu records, ", split.train.size(), split.test.size(),
                       variants.size(), faces.size()) +
                       afw);
}

Outcome criterion10()
{
    const auto root = test::scratch_dir("acceptance_repro");
    const auto data = root / "data";
    const std::string ann = (data / "annotations.jsonl").string();
    const std::string seed = std::to_string(kSeed);
    if (run_cli({"synth", "--count", std::to_string(kSyntheticCount), "--seed", seed, "--out", data.string()}) != 0)
        return {Status::fail, "synth failed"};
    std::array<std::map<std::string, std::string>, 2> trees;
    for (int run = 0; run < 2; ++run) {
        const auto dir = root / ("run" + std::to_string(run));
        const std::string model = (dir / "model").string();
        const std::string preds = (dir / "pred").string();
        if (run_cli({"train", "--data", ann, "--seed", seed, "--out", model}) != 0) return {Status::fail, "train failed"};
        if (run_cli({"infer", "--data", ann, "--model", model, "--out", preds}) != 0)
            return {Status::fail, "infer failed"};
        if (run_cli({"eval", "--data", ann, "--pred", preds + "/predictions.jsonl", "--out", (dir / "eval").string()}) !=
            0)
            return {Status::fail, "eval failed"};
        trees[run] = tree(dir);
    }
    std::size_t differing = 0;
    for (const auto& [name, bytes] : trees[0]) {
        const auto it = trees[1].find(name);
        if (it == trees[1].end() || it->second != bytes) ++differing;
    }
    const bool ok = differing == 0 && trees[0].size() == trees[1].size() && trees[0].count("model/manifest.json") &&
                    trees[0].count("eval/summary.txt");
    std::filesystem::remove_all(root);
    return verdict(ok, fmt("two train/infer/eval runs, %zu files compared, %zu differ", trees[0].size(), differing));
}

Outcome criterion11()
{
    const char* path = std::getenv("KEPLER_AFLW_ANNOTATIONS");
    if (!path) return {Status::skip, "AFLW not supplied (KEPLER_AFLW_ANNOTATIONS); optional, data-gated"};
    const auto root = test::scratch_dir("acceptance_aflw");
    const std::string ann = path;
    bool ok = true;
    std::string detail;
    // Protocol III trains and tests on the rotated and mirrored variants.
    const std::string variants = (root / "variants").string();
    ok = ok && run_cli({"augment", "--data", ann, "--protocol", "all-variants", "--out", variants}) == 0;
    const std::vector<std::pair<std::string, std::string>> runs = {
        {"pifa", ann}, {"full", ann}, {"full", variants + "/annotations.jsonl"}};
    for (std::size_t k = 0; k < runs.size() && ok; ++k) {
        const auto& [proto, data] = runs[k];
        const auto dir = root / ("protocol" + std::to_string(k + 1));
        const std::string model = (dir / "model").string();
        const std::string preds = (dir / "pred").string();
        ok = run_cli({"train", "--data", data, "--protocol", proto, "--out", model}) == 0 &&
             run_cli({"infer", "--data", data, "--protocol", proto, "--model", model, "--out", preds}) == 0 &&
             run_cli({"eval", "--data", data, "--protocol", proto, "--pred", preds + "/predictions.jsonl", "--out",
                      (dir / "eval").string()}) == 0 &&
             std::filesystem::exists(dir / "eval" / "summary.txt");
        detail += "protocol " + std::to_string(k + 1) + (ok ? " ok; " : " failed; ");
    }
    return verdict(ok, detail + "summaries under " + root.string());
}

} // namespace

int main()
{
    bool failed = false;
    auto report = [&](int n, const std::function<Outcome()>& f) {
        Outcome o;
        try {
            o = f();
        } catch (const std::exception& e) {
            o = {Status::fail, std::string("exception: ") + e.what()};
        }
        const char* s = o.status == Status::pass ? "PASS" : o.status == Status::skip ? "SKIP" : "FAIL";
        failed = failed || o.status == Status::fail;
        std::printf("criterion %d: %s  %s\n", n, s, o.detail.c_str());
        std::fflush(stdout);
    };
    report(1, criterion1);
    report(2, criterion2);
    report(3, criterion3);
    report(4, criterion4);
    std::optional<EndToEnd> e2e;
    std::string e2e_error;
    try {
        e2e = run_end_to_end();
    } catch (const std::exception& ex) {
        e2e_error = ex.what();
    }
    auto with_e2e = [&](Outcome (*f)(const EndToEnd&)) {
        return [&, f]() -> Outcome {
            if (!e2e) return {Status::fail, "end-to-end run failed: " + e2e_error};
            return f(*e2e);
        };
    };
    report(5, with_e2e(criterion5));
    report(6, with_e2e(criterion6));
    report(7, with_e2e(criterion7));
    report(8, criterion8);
    report(9, criterion9);
    report(10, criterion10);
    report(11, criterion11);
    return failed ? 1 : 0;
}
