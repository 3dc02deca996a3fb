/*
 * kepler: iterative keypoint and pose estimation with heatmap-conditioned
 *         cascade regressors
 * File: tools/kepler_cli.cpp
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
#include "kepler_cli.hpp"

#include "kepler/cascade.hpp"
#include "kepler/config.hpp"
#include "kepler/data.hpp"
#include "kepler/eval.hpp"
#include "kepler/regressor.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <thread>

namespace kepler::cli {

namespace {

void log(const std::string& cmd, const std::string& msg)
{
    std::cerr << "kepler cmd=" << cmd << " msg=\"" << msg << "\"\n";
}

struct Flags
{
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string data;
    std::string model;
    std::string pred;
    std::string protocol;
    std::string stage5;
    std::optional<std::size_t> count;
    bool all = false;
};

RunConfig resolve(const Flags& f)
{
    RunConfig c = f.config.empty() ? RunConfig{} : RunConfig::load(f.config);
    if (f.seed) c.seed = *f.seed;
    if (!f.data.empty()) c.data = f.data;
    if (!f.model.empty()) c.model = f.model;
    if (!f.out.empty()) c.output = f.out;
    if (!f.protocol.empty()) c.protocol = f.protocol;
    if (f.count) c.synthetic_count = *f.count;
    if (!f.stage5.empty()) c.stage5 = f.stage5 == "on";
    c.cascade.seed = c.seed;
    c.validate();
    return c;
}

void require_file(const std::filesystem::path& p, const std::string& what)
{
    if (p.empty()) throw ConfigError(what + " path is not set");
    if (!std::filesystem::exists(p)) throw ConfigError(what + " '" + p.string() + "' does not exist");
}

void require_out(const std::filesystem::path& p)
{
    if (p.empty()) throw ConfigError("output path is not set (use --out)");
}

/// Train/test selection shared by train and infer.
ProtocolSplit select(const RunConfig& c, const std::vector<AnnotationRecord>& records)
{
    if (c.protocol == "pifa") return split_pifa(records, c.seed, c.test_size);
    if (c.protocol == "full") return split_full(records, c.seed, c.test_size);
    ProtocolSplit s;
    s.protocol = Protocol::full;
    bool tagged = false;
    for (const auto& r : records) tagged = tagged || !r.face.split_tag.empty();
    for (std::size_t i = 0; i < records.size(); ++i) {
        const std::string& tag = records[i].face.split_tag;
        if (!tagged || tag == "train") s.train.push_back(i);
        if (!tagged || tag == "test") s.test.push_back(i);
    }
    return s;
}

int cmd_synth(const Flags& f)
{
    const RunConfig c = resolve(f);
    require_out(c.output);
    log("synth", "generating " + std::to_string(c.synthetic_count) + " faces, seed " + std::to_string(c.seed));
    const auto faces = generate_synthetic(c.synthetic_count, c.synthetic, c.seed);
    std::vector<FaceWithImage> out;
    out.reserve(faces.size());
    for (const auto& s : faces) out.push_back({s.record, s.image});
    save_dataset(out, c.output);
    log("synth", "wrote " + (c.output / "annotations.jsonl").string());
    return 0;
}

int cmd_train(const Flags& f)
{
    const RunConfig c = resolve(f);
    require_file(c.data, "data");
    require_out(c.output);
    const auto all = load_dataset(c.data);
    const ProtocolSplit split = select(c, [&] {
        std::vector<AnnotationRecord> r;
        for (const auto& x : all) r.push_back(x.record);
        return r;
    }());
    std::vector<FaceWithImage> train;
    train.reserve(split.train.size());
    for (std::size_t i : split.train) train.push_back(all[i]);
    log("train", "training on " + std::to_string(train.size()) + " faces");

    const auto t0 = std::chrono::steady_clock::now();
    CascadeTrainReport report;
    CascadeTrainOptions opts;
    opts.train_stage5 = c.stage5;
    opts.log = [](const std::string& m) { log("train", m); };
    opts.on_epoch = [](const EpochLog& e) {
        log("train", "stage " + std::to_string(e.stage) + " " + e.phase + " epoch " + std::to_string(e.epoch) +
                         " loss " + std::to_string(e.loss));
    };
    const CascadeModel model = train_cascade(train, c.cascade, &report, opts);
    save_model(model, c.output);

    std::ofstream os(c.output / "training_report.txt", std::ios::binary);
    char line[128];
    std::snprintf(line, sizeof line, "initial median NME %.8f\n", report.initial_median_nme);
    os << line;
    for (const auto& s : report.stages) {
        if (s.stage <= 4) {
            std::snprintf(line, sizeof line, "stage %d loss %.8f -> %.8f median NME %.8f\n", s.stage,
                          s.initial_loss, s.final_loss, s.median_nme);
        } else {
            std::snprintf(line, sizeof line, "stage %d loss %.8f -> %.8f (patch samples)\n", s.stage,
                          s.initial_loss, s.final_loss);
        }
        os << line;
    }
    if (report.partition) {
        std::snprintf(line, sizeof line, "mining C %.6f delta %.6f hard fraction %.6f -> %.6f\n", report.partition->C,
                      report.partition->delta, report.hard_fraction_stage3, report.hard_fraction_stage4);
        os << line;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log("train", "wrote model bundle " + c.output.string() + " in " + std::to_string(secs) + " s");
    return 0;
}

int cmd_infer(const Flags& f)
{
    const RunConfig c = resolve(f);
    require_file(c.data, "data");
    require_file(c.model, "model");
    require_out(c.output);
    const CascadeModel model = load_model(c.model);
    const auto records = load_annotations(c.data);
    ProtocolSplit split = select(c, records);
    std::vector<std::size_t> chosen = split.test;
    if (f.all) {
        chosen.resize(records.size());
        for (std::size_t i = 0; i < records.size(); ++i) chosen[i] = i;
    }
    const auto root = c.data.parent_path();
    InferenceOptions io;
    io.stage5 = c.stage5;
    std::vector<AnnotationRecord> preds(chosen.size());
    auto work = [&](std::size_t begin, std::size_t end) {
        for (std::size_t k = begin; k < end; ++k) {
            const AnnotatedFace& gt = records[chosen[k]].face;
            const Image img = read_png(root / gt.image_path);
            const CascadeResult r = run_cascade(model, img, gt.box, io);
            AnnotationRecord& p = preds[k];
            p.face.image_path = gt.image_path;
            p.face.box = gt.box;
            p.face.shape = r.shape;
            p.face.pose = r.pose;
            p.face.split_tag = gt.split_tag;
            std::array<double, kNumLandmarks> conf{};
            for (std::size_t i = 0; i < kNumLandmarks; ++i) {
                conf[i] = r.visibility[i];
                p.face.visibility[i] = r.visibility[i] >= model.config.policies[4].tau ? 1.0 : 0.0;
            }
            p.confidence = conf;
        }
    };
    const auto workers = static_cast<std::size_t>(c.workers);
    if (workers <= 1 || chosen.size() < 2) {
        work(0, chosen.size());
    } else {
        // Contiguous chunks; each prediction depends only on its own face.
        const std::size_t chunk = (chosen.size() + workers - 1) / workers;
        std::vector<std::exception_ptr> errors(workers);
        {
            std::vector<std::jthread> pool;
            for (std::size_t w = 0; w < workers; ++w) {
                const std::size_t b = std::min(chosen.size(), w * chunk);
                const std::size_t e = std::min(chosen.size(), b + chunk);
                if (b < e) {
                    pool.emplace_back([&, w, b, e] {
                        try {
                            work(b, e);
                        } catch (...) {
                            errors[w] = std::current_exception();
                        }
                    });
                }
            }
        }
        for (const auto& e : errors) {
            if (e) std::rethrow_exception(e);
        }
    }
    const auto path = c.output / "predictions.jsonl";
    save_annotations(preds, path);
    log("infer", "wrote " + std::to_string(preds.size()) + " predictions to " + path.string());
    return 0;
}

int cmd_eval(const Flags& f)
{
    const RunConfig c = resolve(f);
    require_file(c.data, "data");
    require_file(f.pred, "predictions");
    require_out(c.output);
    const auto gts = load_annotations(c.data);
    const auto preds = load_annotations(f.pred);
    std::map<std::string, std::size_t> by_path;
    for (std::size_t i = 0; i < gts.size(); ++i) by_path.emplace(gts[i].face.image_path, i);
    std::vector<AnnotatedFace> g, p;
    for (const auto& r : preds) {
        const auto it = by_path.find(r.face.image_path);
        if (it == by_path.end()) {
            throw DataError("prediction for '" + r.face.image_path + "' has no ground truth in " + c.data.string());
        }
        g.push_back(gts[it->second].face);
        p.push_back(r.face);
    }
    EvalOptions eo;
    eo.protocol = c.protocol;
    eo.pose_mode = c.pose_mode;
    if (c.protocol == "pifa") {
        const std::array<const char*, 3> names = {"yaw_0_30", "yaw_30_60", "yaw_60_90"};
        for (std::size_t k = 0; k < 3; ++k) eo.groups.push_back({names[k], {}});
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double a = std::abs(g[i].pose.yaw);
            const std::size_t k = a <= 30.0 ? 0 : a <= 60.0 ? 1 : 2;
            if (a <= 90.0) eo.groups[k].members.push_back(i);
        }
    }
    const EvalReport report = evaluate(p, g, eo);
    emit_report(report, c.output);
    char line[96];
    std::snprintf(line, sizeof line, "mean NME %.6f median NME %.6f pose MAE %.4f", report.mean_nme, report.median_nme,
                  report.pose.mae);
    log("eval", line);
    return 0;
}

int cmd_augment(const Flags& f)
{
    const RunConfig c = resolve(f);
    require_file(c.data, "data");
    require_out(c.output);
    const std::string proto = f.protocol.empty() ? "all-variants" : f.protocol;
    const Protocol p = parse_protocol(proto);
    if (p == Protocol::all_variants) {
        const auto faces = load_dataset(c.data);
        const auto variants = make_all_variants(faces, c.variants);
        save_dataset(variants, c.output);
        log("augment", "wrote " + std::to_string(variants.size()) + " variants of " + std::to_string(faces.size()) +
                           " faces");
    } else if (p == Protocol::afw) {
        auto kept = filter_afw(load_annotations(c.data), c.afw_min_height);
        const auto root = std::filesystem::absolute(c.data).parent_path();
        for (auto& r : kept) r.face.image_path = (root / r.face.image_path).string();
        save_annotations(kept, c.output / "annotations.jsonl");
        log("augment", "kept " + std::to_string(kept.size()) + " faces taller than " +
                           std::to_string(c.afw_min_height) + " px");
    } else {
        throw ConfigError("augment supports the all-variants and afw protocols");
    }
    return 0;
}

int cmd_gradcheck(const Flags& f)
{
    const RunConfig c = resolve(f);
    std::mt19937_64 rng(c.seed);
    std::normal_distribution<double> n01(0.0, 1.0);
    const int channels = 3 + static_cast<int>(kNumLandmarks);
    NetSpec spec = NetSpec::tiny(channels, 16, 16);
    const Network net(spec);
    RegressorParams params = net.initialize(c.seed, 3);
    RenderedInput x{channels, 16, 16, std::vector<float>(static_cast<std::size_t>(channels) * 256)};
    for (auto& v : x.data) v = static_cast<float>(n01(rng));
    TrainingTarget t;
    for (std::size_t k = 0; k < kOutputDim; ++k) {
        t.value[k] = n01(rng);
        t.weight[k] = 1.0;
    }
    const StagePolicy policy = StagePolicy::defaults(3);
    const double clean = gradient_check(params, x, t, policy);
    GradientCheckOptions faulty;
    faulty.fault_index = params.tensor("output.weight").offset;
    const double fault = gradient_check(params, x, t, policy, faulty);
    std::cout << "gradient check: max relative error " << clean << " (limit 1e-3)\n";
    std::cout << "fault-injected control: max relative error " << fault << " (must exceed 1e-2)\n";
    const bool ok = clean <= 1e-3 && fault > 1e-2;
    std::cout << (ok ? "PASS" : "FAIL") << '\n';
    return ok ? 0 : 1;
}

} // namespace

int run(int argc, char** argv)
{
    CLI::App app{"kepler: iterative keypoint and pose estimation"};
    app.require_subcommand(1);
    Flags f;
    auto common = [&](CLI::App* s) {
        s->add_option("--config", f.config, "JSON run configuration")->check(CLI::ExistingFile);
        s->add_option("--seed", f.seed, "Seed for all randomness");
        s->add_option("--out", f.out, "Output directory");
    };
    auto* synth = app.add_subcommand("synth", "Generate a synthetic face dataset");
    common(synth);
    synth->add_option("--count", f.count, "Number of faces");

    auto* train = app.add_subcommand("train", "Train the five-stage cascade");
    common(train);
    train->add_option("--data", f.data, "Annotation file");
    train->add_option("--protocol", f.protocol, "tags, pifa or full");
    train->add_option("--stage5", f.stage5, "Train the local stage")->check(CLI::IsMember({"on", "off"}));

    auto* infer = app.add_subcommand("infer", "Run a trained cascade");
    common(infer);
    infer->add_option("--data", f.data, "Annotation file (boxes are read from it)");
    infer->add_option("--model", f.model, "Model bundle directory");
    infer->add_option("--protocol", f.protocol, "tags, pifa or full");
    infer->add_option("--stage5", f.stage5, "Apply the local stage")->check(CLI::IsMember({"on", "off"}));
    infer->add_flag("--all", f.all, "Predict every record instead of the test selection");

    auto* eval = app.add_subcommand("eval", "Score predictions against ground truth");
    common(eval);
    eval->add_option("--data", f.data, "Ground-truth annotation file");
    eval->add_option("--pred", f.pred, "Prediction file")->required();
    eval->add_option("--protocol", f.protocol, "Protocol label; pifa adds yaw groups");

    auto* augment = app.add_subcommand("augment", "Build all-variants or AFW-filtered datasets");
    common(augment);
    augment->add_option("--data", f.data, "Annotation file");
    augment->add_option("--protocol", f.protocol, "all-variants (default) or afw");

    auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of the reference network");
    common(grad);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitConfig;
    }

    try {
        if (*synth) return cmd_synth(f);
        if (*train) return cmd_train(f);
        if (*infer) return cmd_infer(f);
        if (*eval) return cmd_eval(f);
        if (*augment) return cmd_augment(f);
        if (*grad) return cmd_gradcheck(f);
    } catch (const ConfigError& e) {
        std::cerr << "kepler: config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const DataError& e) {
        std::cerr << "kepler: data error: " << e.what() << '\n';
        return kExitData;
    } catch (const DivergenceError& e) {
        std::cerr << "kepler: training diverged: " << e.what() << '\n';
        return kExitDivergence;
    } catch (const std::exception& e) {
        std::cerr << "kepler: error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}

} /* namespace kepler::cli */
