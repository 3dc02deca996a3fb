/*
 * kepler: iterative keypoint and pose estimation with heatmap-conditioned
 *         cascade regressors
 * File: core/src/cascade.cpp
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

#include "kepler/eval.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>

namespace kepler {

using nlohmann::json;

namespace {

constexpr const char* kManifestFormat = "kepler-cascade";
constexpr int kManifestVersion = 1;

/// Rejects keys of `j` outside `allowed`.
void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where)
{
    if (!j.is_object()) {
        throw ConfigError(where + ": expected an object");
    }
    for (const auto& item : j.items()) {
        if (!allowed.count(item.key())) {
            throw ConfigError(where + ": unknown key '" + item.key() + "'");
        }
    }
}

template <typename T>
void read_if(const json& j, const char* key, T& out, const std::string& where)
{
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(where + ": bad value for '" + key + "'");
    }
}

json render_to_json(const RenderConfig& c)
{
    return {{"width", c.width}, {"height", c.height}, {"sigma", c.sigma}, {"amplitude", c.amplitude}, {"tau", c.tau}};
}

RenderConfig render_from_json(const json& j)
{
    const std::string where = "render";
    check_keys(j, {"width", "height", "sigma", "amplitude", "tau"}, where);
    RenderConfig c;
    read_if(j, "width", c.width, where);
    read_if(j, "height", c.height, where);
    read_if(j, "sigma", c.sigma, where);
    read_if(j, "amplitude", c.amplitude, where);
    read_if(j, "tau", c.tau, where);
    return c;
}

json patch_to_json(const PatchConfig& c)
{
    return {{"size", c.size}, {"sigma", c.sigma}, {"fraction", c.fraction}, {"train_jitter", c.train_jitter}};
}

PatchConfig patch_from_json(const json& j, PatchConfig c)
{
    const std::string where = "patch";
    check_keys(j, {"size", "sigma", "fraction", "train_jitter"}, where);
    read_if(j, "size", c.size, where);
    read_if(j, "sigma", c.sigma, where);
    read_if(j, "fraction", c.fraction, where);
    read_if(j, "train_jitter", c.train_jitter, where);
    return c;
}

json policy_to_json(const StagePolicy& p)
{
    return {{"stage", p.stage},
            {"bound_L", p.bound_L ? json(*p.bound_L) : json(nullptr)},
            {"gamma", p.gamma},
            {"tau", p.tau},
            {"lambda", p.lambda},
            {"mu", p.mu},
            {"nu", p.nu},
            {"mining", p.mining},
            {"patch_mode", p.patch_mode},
            {"learning_rate", p.learning_rate},
            {"epochs", p.epochs},
            {"batch_size", p.batch_size},
            {"momentum", p.momentum},
            {"finetune_epochs", p.finetune_epochs},
            {"finetune_lr_scale", p.finetune_lr_scale},
            {"min_hard_fraction", p.min_hard_fraction},
            {"mining_bin_width", p.mining_bin_width}};
}

StagePolicy policy_from_json(const json& j, StagePolicy p)
{
    const std::string where = "stage " + std::to_string(p.stage) + " policy";
    check_keys(j,
               {"stage", "bound_L", "gamma", "tau", "lambda", "mu", "nu", "mining", "patch_mode", "learning_rate",
                "epochs", "batch_size", "momentum", "finetune_epochs", "finetune_lr_scale", "min_hard_fraction",
                "mining_bin_width"},
               where);
    if (j.contains("stage") && j["stage"] != p.stage) {
        throw ConfigError(where + ": policies must be listed in stage order");
    }
    if (j.contains("bound_L")) {
        if (j["bound_L"].is_null()) {
            p.bound_L.reset();
        } else if (j["bound_L"].is_number()) {
            p.bound_L = j["bound_L"].get<double>();
        } else {
            throw ConfigError(where + ": bound_L must be a number or null");
        }
    }
    read_if(j, "gamma", p.gamma, where);
    read_if(j, "tau", p.tau, where);
    read_if(j, "lambda", p.lambda, where);
    read_if(j, "mu", p.mu, where);
    read_if(j, "nu", p.nu, where);
    read_if(j, "mining", p.mining, where);
    read_if(j, "patch_mode", p.patch_mode, where);
    read_if(j, "learning_rate", p.learning_rate, where);
    read_if(j, "epochs", p.epochs, where);
    read_if(j, "batch_size", p.batch_size, where);
    read_if(j, "momentum", p.momentum, where);
    read_if(j, "finetune_epochs", p.finetune_epochs, where);
    read_if(j, "finetune_lr_scale", p.finetune_lr_scale, where);
    read_if(j, "min_hard_fraction", p.min_hard_fraction, where);
    read_if(j, "mining_bin_width", p.mining_bin_width, where);
    return p;
}

json shape_to_json(const Shape& s)
{
    json a = json::array();
    for (const auto& p : s) a.push_back({p.x, p.y});
    return a;
}

Shape shape_from_json(const json& j)
{
    if (!j.is_array() || j.size() != kNumLandmarks) {
        throw ConfigError("mean shape must hold " + std::to_string(kNumLandmarks) + " points");
    }
    Shape s;
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
        s[i] = {j[i].at(0).get<double>(), j[i].at(1).get<double>()};
    }
    return s;
}

std::uint64_t stage_seed(std::uint64_t seed, int stage)
{
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stage), 0x6b65706cU};
    std::mt19937_64 rng(seq);
    return rng();
}

Shape add_window_correction(const Shape& y, const CorrectionVector& delta, double scale)
{
    Shape out = y;
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
        out[i] = {y[i].x + delta[i].x / scale, y[i].y + delta[i].y / scale};
    }
    return out;
}

} // namespace

void PatchConfig::validate() const
{
    if (size < 8) throw ConfigError("patch size must be at least 8");
    if (!(sigma > 0.0)) throw ConfigError("patch sigma must be positive");
    if (!(fraction > 0.0)) throw ConfigError("patch fraction must be positive");
    if (!(train_jitter >= 0.0 && train_jitter <= 0.5)) throw ConfigError("patch train_jitter must lie in [0, 0.5]");
}

CascadeConfig CascadeConfig::defaults()
{
    CascadeConfig c;
    c.render.width = 32;
    c.render.height = 32;
    c.render.sigma = 1.0;
    c.crop_margin = 0.1;
    for (int t = 1; t <= kNumStages; ++t) {
        StagePolicy p = StagePolicy::defaults(t);
        p.learning_rate = 2e-4;
        p.epochs = 12;
        p.batch_size = 16;
        if (p.bound_L) {
            // 20 px at a 224 px raster, scaled to the desk raster.
            p.bound_L = 20.0 * c.render.width / 224.0;
        }
        if (t == 4) {
            p.epochs = 6;
            p.finetune_epochs = 4;
            p.finetune_lr_scale = 0.5;
        }
        if (t == 5) {
            p.epochs = 3;
            p.finetune_epochs = 2;
            p.finetune_lr_scale = 0.5;
        }
        c.policies[static_cast<std::size_t>(t - 1)] = p;
    }
    c.global_net = NetSpec::reference(3 + static_cast<int>(kNumLandmarks), c.render.width, c.render.height);
    c.global_net.zero_head = true;
    c.patch_net = NetSpec::reference(4, c.patch.size, c.patch.size);
    c.patch_net.zero_head = true;
    return c;
}

void CascadeConfig::validate() const
{
    render.validate();
    patch.validate();
    if (!(crop_margin >= 0.0)) throw ConfigError("crop margin must be nonnegative");
    for (std::size_t t = 0; t < policies.size(); ++t) {
        if (policies[t].stage != static_cast<int>(t) + 1) {
            throw ConfigError("policies must be ordered by stage");
        }
        policies[t].validate();
    }
    if (global_net.input_channels != 3 + static_cast<int>(kNumLandmarks) || global_net.input_width != render.width ||
        global_net.input_height != render.height) {
        throw ConfigError("global network input must be " + std::to_string(3 + kNumLandmarks) + " x " +
                          std::to_string(render.height) + " x " + std::to_string(render.width));
    }
    if (patch_net.input_channels != 4 || patch_net.input_width != patch.size || patch_net.input_height != patch.size) {
        throw ConfigError("patch network input must be 4 x " + std::to_string(patch.size) + " x " +
                          std::to_string(patch.size));
    }
    global_net.validate();
    patch_net.validate();
}

std::string CascadeConfig::to_json() const
{
    json j;
    j["render"] = render_to_json(render);
    j["crop_margin"] = crop_margin;
    j["patch"] = patch_to_json(patch);
    json pol = json::array();
    for (const auto& p : policies) pol.push_back(policy_to_json(p));
    j["policies"] = std::move(pol);
    j["global_net"] = json::parse(global_net.to_json());
    j["patch_net"] = json::parse(patch_net.to_json());
    j["warm_start"] = warm_start;
    j["reset_correction_head"] = reset_correction_head;
    j["seed"] = seed;
    return j.dump(2);
}

CascadeConfig CascadeConfig::from_json(const std::string& text)
{
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("cascade config: malformed JSON: ") + e.what());
    }
    const std::string where = "cascade config";
    check_keys(j,
               {"render", "crop_margin", "patch", "policies", "global_net", "patch_net", "warm_start",
                "reset_correction_head", "seed"},
               where);
    CascadeConfig c = defaults();
    if (j.contains("render")) {
        c.render = render_from_json(j["render"]);
    }
    read_if(j, "crop_margin", c.crop_margin, where);
    if (j.contains("patch")) {
        c.patch = patch_from_json(j["patch"], c.patch);
    }
    if (j.contains("policies")) {
        const json& pol = j["policies"];
        if (!pol.is_array() || pol.size() != kNumStages) {
            throw ConfigError(where + ": 'policies' must list all " + std::to_string(kNumStages) + " stages");
        }
        for (std::size_t t = 0; t < kNumStages; ++t) {
            c.policies[t] = policy_from_json(pol[t], c.policies[t]);
        }
    }
    if (j.contains("global_net")) {
        c.global_net = NetSpec::from_json(j["global_net"].dump());
    } else {
        const NetSpec base = c.global_net;
        c.global_net = NetSpec::reference(3 + static_cast<int>(kNumLandmarks), c.render.width, c.render.height);
        c.global_net.zero_head = base.zero_head;
    }
    if (j.contains("patch_net")) {
        c.patch_net = NetSpec::from_json(j["patch_net"].dump());
    } else {
        const NetSpec base = c.patch_net;
        c.patch_net = NetSpec::reference(4, c.patch.size, c.patch.size);
        c.patch_net.zero_head = base.zero_head;
    }
    read_if(j, "warm_start", c.warm_start, where);
    read_if(j, "reset_correction_head", c.reset_correction_head, where);
    read_if(j, "seed", c.seed, where);
    return c;
}

void CascadeModel::validate() const
{
    config.validate();
    if (stage_params.size() < 4) {
        throw ConfigError("cascade model is missing stage " + std::to_string(stage_params.size() + 1) +
                          " parameters");
    }
    if (stage_params.size() > kNumStages) {
        throw ConfigError("cascade model holds more than five stages");
    }
    for (std::size_t t = 0; t < stage_params.size(); ++t) {
        const RegressorParams& p = stage_params[t];
        const NetSpec& expected = t < 4 ? config.global_net : config.patch_net;
        if (p.spec.input_channels != expected.input_channels || p.spec.input_width != expected.input_width ||
            p.spec.input_height != expected.input_height) {
            throw ConfigError("stage " + std::to_string(t + 1) + " parameters do not match the configured input");
        }
    }
}

void save_model(const CascadeModel& model, const std::filesystem::path& dir)
{
    model.validate();
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw DataError("cannot create model directory " + dir.string() + ": " + ec.message());
    json m;
    m["format"] = kManifestFormat;
    m["version"] = kManifestVersion;
    m["config"] = json::parse(model.config.to_json());
    m["mean_shape"] = shape_to_json(model.mean_shape.points());
    json stages = json::array();
    for (std::size_t t = 0; t < model.stage_params.size(); ++t) {
        const std::string file = "stage" + std::to_string(t + 1) + ".params";
        save_params(model.stage_params[t], dir / file);
        stages.push_back({{"stage", t + 1}, {"file", file}});
    }
    m["stages"] = std::move(stages);
    std::ofstream os(dir / "manifest.json", std::ios::binary);
    if (!os) throw DataError("cannot write " + (dir / "manifest.json").string());
    os << m.dump(2) << '\n';
}

CascadeModel load_model(const std::filesystem::path& dir)
{
    const auto path = dir / "manifest.json";
    std::ifstream is(path);
    if (!is) throw DataError("cannot open model manifest " + path.string());
    json m;
    try {
        m = json::parse(is);
    } catch (const json::parse_error& e) {
        throw DataError("malformed model manifest " + path.string() + ": " + e.what());
    }
    if (m.value("format", "") != kManifestFormat || m.value("version", 0) != kManifestVersion) {
        throw DataError(path.string() + " is not a version-1 cascade manifest");
    }
    CascadeModel model;
    model.config = CascadeConfig::from_json(m.at("config").dump());
    model.mean_shape = MeanShape(shape_from_json(m.at("mean_shape")));
    for (const auto& s : m.at("stages")) {
        const int stage = s.at("stage").get<int>();
        if (stage != static_cast<int>(model.stage_params.size()) + 1) {
            throw DataError(path.string() + ": stages must be listed in order");
        }
        model.stage_params.push_back(load_params(dir / s.at("file").get<std::string>()));
    }
    model.validate();
    return model;
}

FrameTransform face_frame(const FaceBox& box, const RenderConfig& cfg, double crop_margin)
{
    box.validate();
    const double side = std::max(box.w, box.h) * (1.0 + 2.0 * crop_margin);
    const double scale = std::min(cfg.width, cfg.height) / side;
    const Point2 c = box.center();
    return {{c.x - 0.5 * (cfg.width - 1) / scale, c.y - 0.5 * (cfg.height - 1) / scale}, scale};
}

double patch_side(const FaceBox& box, const PatchConfig& cfg)
{
    return std::max(1.0, std::round(cfg.fraction * face_size(box)));
}

FrameTransform patch_frame(const Point2& center, double side, int size)
{
    const double scale = size / side;
    const double half = 0.5 * (size - 1) / scale;
    return {{center.x - half, center.y - half}, scale};
}

RenderedInput render_patch(const Image& image, const FrameTransform& frame, const PatchConfig& cfg)
{
    const Image window = resample(image, frame, cfg.size, cfg.size);
    RenderConfig rc;
    rc.width = cfg.size;
    rc.height = cfg.size;
    rc.sigma = cfg.sigma;
    const double c = 0.5 * (cfg.size - 1);
    const std::array<Point2, 1> center{Point2{c, c}};
    const std::array<double, 1> vis{1.0};
    return render_points(window, center, vis, rc);
}

PatchSet extract_patches(const Image& image, const Shape& shape, const FaceBox& box, const PatchConfig& cfg)
{
    cfg.validate();
    if (!shape.all_finite()) {
        throw DataError("patch extraction needs a finite shape");
    }
    PatchSet set;
    set.side = patch_side(box, cfg);
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
        set.frames[i] = patch_frame(shape[i], set.side, cfg.size);
        set.inputs[i] = render_patch(image, set.frames[i], cfg);
        const Point2 lo = set.frames[i].origin;
        const Point2 hi = set.frames[i].to_image({cfg.size - 1.0, cfg.size - 1.0});
        set.inside[i] = lo.x >= 0.0 && lo.y >= 0.0 && hi.x <= image.width() - 1.0 && hi.y <= image.height() - 1.0;
    }
    return set;
}

LocalStageResult run_local_stage(const Image& image, const Shape& shape, const FaceBox& box,
                                 const RegressorParams& params, const PatchConfig& cfg, double tau)
{
    const PatchSet set = extract_patches(image, shape, box, cfg);
    const NetRegressor reg(params);
    LocalStageResult r;
    r.shape = shape;
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
        const RegressorOutput out = reg.predict(set.inputs[i]);
        r.visibility[i] = out.visibility[i];
        if (out.visibility[i] >= tau) {
            const double s = set.frames[i].scale;
            r.shape[i] = {shape[i].x + out.corrections[i].x / s, shape[i].y + out.corrections[i].y / s};
        }
    }
    return r;
}

CascadeResult iterate_cascade(const Shape& y0, int stages, const StageFunction& step)
{
    if (stages < 0) throw ConfigError("stage count must be nonnegative");
    CascadeResult r;
    r.shape = y0;
    r.trajectory.push_back(y0);
    for (int t = 1; t <= stages; ++t) {
        const RegressorOutput out = step(t, r.shape, r.visibility);
        for (std::size_t i = 0; i < kNumLandmarks; ++i) {
            r.shape[i] = r.shape[i] + out.corrections[i];
        }
        r.visibility = out.visibility;
        if (t < kNumStages) r.pose = out.pose;
        r.trajectory.push_back(r.shape);
    }
    return r;
}

CascadeResult run_cascade(const CascadeModel& model, const Image& image, const FaceBox& box,
                          const InferenceOptions& options)
{
    if (model.stage_params.size() < 4) {
        throw ConfigError("cascade model is missing stage " + std::to_string(model.stage_params.size() + 1) +
                          " parameters");
    }
    if (options.stage5 && model.stage_params.size() < kNumStages) {
        throw ConfigError("cascade model is missing stage 5 parameters (run with stage 5 off)");
    }
    const CascadeConfig& cfg = model.config;
    const FrameTransform frame = face_frame(box, cfg.render, cfg.crop_margin);
    const Image window = resample(image, frame, cfg.render.width, cfg.render.height);
    std::array<std::optional<NetRegressor>, 4> regs;

    auto step = [&](int t, const Shape& y, const VisibilityVector& vis) {
        RegressorOutput out;
        if (t == kNumStages) {
            out.visibility = vis;
            if (options.stage5) {
                const auto local = run_local_stage(image, y, box, model.stage_params[4], cfg.patch,
                                                   cfg.policies[4].tau);
                for (std::size_t i = 0; i < kNumLandmarks; ++i) out.corrections[i] = local.shape[i] - y[i];
                out.visibility = local.visibility;
            }
            return out;
        }
        auto& reg = regs[static_cast<std::size_t>(t - 1)];
        if (!reg) reg.emplace(model.stage_params[static_cast<std::size_t>(t - 1)]);
        const VisibilityVector render_vis = t <= 2 ? VisibilityVector() : vis;
        const RenderedInput x = render(window, frame.to_window(y), render_vis, cfg.render);
        out = reg->predict(x);
        const Shape moved = add_window_correction(y, out.corrections, frame.scale);
        for (std::size_t i = 0; i < kNumLandmarks; ++i) out.corrections[i] = moved[i] - y[i];
        return out;
    };
    return iterate_cascade(place_in_box(model.mean_shape, box), kNumStages, step);
}

namespace {

/// Per-face state shared by the global training stages.
struct GlobalFace
{
    const AnnotatedFace* gt = nullptr;
    FrameTransform frame;
    Image window;
    Shape gt_window;
    Shape current;
    VisibilityVector visibility;
};

class GlobalSource : public SampleSource
{
public:
    GlobalSource(const std::vector<GlobalFace>& faces, const CascadeConfig& cfg, const StagePolicy& policy)
        : faces_(faces), cfg_(cfg), policy_(policy)
    {
    }
    std::size_t size() const override { return faces_.size(); }
    void get(std::size_t k, RenderedInput& input, TrainingTarget& target) const override
    {
        const GlobalFace& f = faces_[k];
        const Shape y = f.frame.to_window(f.current);
        const VisibilityVector vis = policy_.stage <= 2 ? VisibilityVector() : f.visibility;
        input = render(f.window, y, vis, cfg_.render);
        const CorrectionVector delta = bounded_correction(f.gt_window, y, policy_.bound_L, f.gt->visibility);
        target = TrainingTarget::global(delta, f.gt->visibility, f.gt->pose);
    }

private:
    const std::vector<GlobalFace>& faces_;
    const CascadeConfig& cfg_;
    const StagePolicy& policy_;
};

struct PatchSample
{
    std::size_t face = 0;
    std::size_t index = 0;
    FrameTransform frame;
};

class PatchSource : public SampleSource
{
public:
    PatchSource(std::span<const FaceWithImage> faces, const std::vector<PatchSample>& samples, const PatchConfig& cfg)
        : faces_(faces), samples_(samples), cfg_(cfg)
    {
    }
    std::size_t size() const override { return samples_.size(); }
    void get(std::size_t k, RenderedInput& input, TrainingTarget& target) const override
    {
        const PatchSample& s = samples_[k];
        const AnnotatedFace& gt = faces_[s.face].record.face;
        input = render_patch(faces_[s.face].image, s.frame, cfg_);
        const bool visible = gt.visibility[s.index] >= 0.5;
        const Point2 corr = visible ? s.frame.to_window(gt.shape[s.index]) - s.frame.to_window(center(s))
                                    : Point2{0.0, 0.0};
        target = TrainingTarget::patch(s.index, corr, visible ? 1.0 : 0.0);
    }
    Point2 center(const PatchSample& s) const
    {
        const double c = 0.5 * (cfg_.size - 1);
        return s.frame.to_image({c, c});
    }

private:
    std::span<const FaceWithImage> faces_;
    const std::vector<PatchSample>& samples_;
    const PatchConfig& cfg_;
};

std::vector<double> face_errors(const std::vector<GlobalFace>& faces)
{
    std::vector<double> e;
    e.reserve(faces.size());
    for (const auto& f : faces) e.push_back(nme(f.current, *f.gt));
    return e;
}

double fraction_above(std::span<const double> errors, double delta)
{
    const auto n = std::count_if(errors.begin(), errors.end(), [&](double e) { return e > delta; });
    return static_cast<double>(n) / static_cast<double>(errors.size());
}

} // namespace

namespace {

/// Zeroes the correction rows of the output layer; the warm-started stage
/// then begins by predicting no correction.
void zero_correction_outputs(RegressorParams& p)
{
    auto w = p.view("output.weight");
    auto b = p.view("output.bias");
    const std::size_t fan_in = w.size() / b.size();
    for (std::size_t k = 0; k < 2 * kNumLandmarks; ++k) {
        b[k] = 0.0;
        std::fill_n(w.begin() + static_cast<std::ptrdiff_t>(k * fan_in), fan_in, 0.0);
    }
}

} // namespace

CascadeModel train_cascade(std::span<const FaceWithImage> train, const CascadeConfig& config,
                           CascadeTrainReport* report, const CascadeTrainOptions& options)
{
    config.validate();
    if (train.empty()) {
        throw DataError("cannot train a cascade on an empty training set");
    }
    auto log = [&](const std::string& msg) {
        if (options.log) options.log(msg);
    };

    CascadeModel model;
    model.config = config;
    std::vector<AnnotatedFace> gts;
    gts.reserve(train.size());
    for (const auto& f : train) {
        f.record.face.validate();
        gts.push_back(f.record.face);
    }
    model.mean_shape = compute_mean_shape(gts);

    std::vector<GlobalFace> faces(train.size());
    for (std::size_t k = 0; k < train.size(); ++k) {
        GlobalFace& g = faces[k];
        g.gt = &train[k].record.face;
        g.frame = face_frame(g.gt->box, config.render, config.crop_margin);
        g.window = resample(train[k].image, g.frame, config.render.width, config.render.height);
        g.gt_window = g.frame.to_window(g.gt->shape);
        g.current = place_in_box(model.mean_shape, g.gt->box);
    }

    CascadeTrainReport rep;
    rep.initial_median_nme = median(face_errors(faces));
    log("initial median NME " + std::to_string(rep.initial_median_nme));

    for (int t = 1; t <= 4; ++t) {
        const StagePolicy& policy = config.policies[static_cast<std::size_t>(t - 1)];
        GlobalSource source(faces, config, policy);
        TrainOptions opts;
        opts.seed = stage_seed(config.seed, t);
        opts.spec = config.global_net;
        opts.on_epoch = options.on_epoch;
        RegressorParams warm;
        if (t == 2 || (t > 2 && config.warm_start)) {
            warm = model.stage_params.back();
            if (t > 2 && config.reset_correction_head) zero_correction_outputs(warm);
            opts.init = &warm;
        }
        std::optional<MiningPartition> partition;
        if (policy.mining) {
            const auto errors = face_errors(faces);
            partition = mine_hard_samples(errors, policy.mining_bin_width, policy.min_hard_fraction);
            opts.partition = &*partition;
            rep.hard_fraction_stage3 = fraction_above(errors, partition->delta);
            log("stage " + std::to_string(t) + " mining: C " + std::to_string(partition->C) + ", delta " +
                std::to_string(partition->delta) + ", hard " + std::to_string(partition->hard_idx.size()) + "/" +
                std::to_string(errors.size()));
        }
        TrainResult res = train_stage(source, policy, opts);

        const NetRegressor reg(res.params);
        for (auto& f : faces) {
            const Shape y = f.frame.to_window(f.current);
            const VisibilityVector vis = t <= 2 ? VisibilityVector() : f.visibility;
            const RegressorOutput out = reg.predict(render(f.window, y, vis, config.render));
            f.current = add_window_correction(f.current, out.corrections, f.frame.scale);
            f.visibility = out.visibility;
        }
        model.stage_params.push_back(std::move(res.params));

        const auto errors = face_errors(faces);
        StageReport sr{t, res.initial_loss, res.final_loss, median(errors)};
        rep.stages.push_back(sr);
        if (partition) {
            rep.hard_fraction_stage4 = fraction_above(errors, partition->delta);
            rep.partition = std::move(partition);
        }
        log("stage " + std::to_string(t) + ": loss " + std::to_string(sr.initial_loss) + " -> " +
            std::to_string(sr.final_loss) + ", median NME " + std::to_string(sr.median_nme));
    }

    if (options.train_stage5) {
        const StagePolicy& policy = config.policies[4];
        std::mt19937_64 rng(stage_seed(config.seed, 5) ^ 0x5bd1e995ULL);
        std::vector<PatchSample> samples;
        samples.reserve(train.size() * kNumLandmarks);
        std::vector<double> errors;
        errors.reserve(samples.capacity());
        for (std::size_t k = 0; k < faces.size(); ++k) {
            const FaceBox& box = faces[k].gt->box;
            const double side = patch_side(box, config.patch);
            std::uniform_real_distribution<double> jitter(-config.patch.train_jitter * side,
                                                          config.patch.train_jitter * side);
            for (std::size_t i = 0; i < kNumLandmarks; ++i) {
                const double dx = jitter(rng);
                const double dy = jitter(rng);
                const Point2 c{faces[k].current[i].x + dx, faces[k].current[i].y + dy};
                samples.push_back({k, i, patch_frame(c, side, config.patch.size)});
                const bool visible = faces[k].gt->visibility[i] >= 0.5;
                errors.push_back(visible ? (faces[k].gt->shape[i] - c).norm() / face_size(box) : 0.0);
            }
        }
        PatchSource source(train, samples, config.patch);
        TrainOptions opts;
        opts.seed = stage_seed(config.seed, 5);
        opts.spec = config.patch_net;
        opts.on_epoch = options.on_epoch;
        std::optional<MiningPartition> partition;
        if (policy.mining) {
            partition = mine_hard_samples(errors, policy.mining_bin_width, policy.min_hard_fraction);
            opts.partition = &*partition;
        }
        TrainResult res = train_stage(source, policy, opts);
        rep.stages.push_back({5, res.initial_loss, res.final_loss, 0.0});
        log("stage 5: loss " + std::to_string(res.initial_loss) + " -> " + std::to_string(res.final_loss));
        model.stage_params.push_back(std::move(res.params));
    }

    if (report) *report = std::move(rep);
    return model;
}

} /* namespace kepler */
