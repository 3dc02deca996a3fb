/*
 * kepler: iterative keypoint and pose estimation with heatmap-conditioned
 *         cascade regressors
 * File: core/src/eval.cpp
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
#include "kepler/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace kepler {

double nme(const Shape& pred, const Shape& gt, const VisibilityVector& v, double size)
{
    if (!(size > 0.0)) {
        throw DataError("NME normalizer must be positive");
    }
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
        if (v[i] < 0.5) continue;
        if (is_absent(gt[i])) {
            throw DataError("visible landmark " + std::to_string(i) + " has no ground-truth coordinates");
        }
        sum += (pred[i] - gt[i]).norm();
        ++count;
    }
    if (count == 0) {
        throw DataError("NME needs at least one visible landmark");
    }
    return sum / static_cast<double>(count) / size;
}

double nme(const Shape& pred, const AnnotatedFace& gt)
{
    return nme(pred, gt.shape, gt.visibility, face_size(gt.box));
}

std::vector<CedPoint> ced_curve(std::span<const double> errors, std::span<const double> thresholds)
{
    if (!std::is_sorted(thresholds.begin(), thresholds.end())) {
        throw ConfigError("CED thresholds must be ascending");
    }
    std::vector<double> sorted(errors.begin(), errors.end());
    std::sort(sorted.begin(), sorted.end());
    std::vector<CedPoint> out;
    out.reserve(thresholds.size());
    for (double t : thresholds) {
        const auto below = std::upper_bound(sorted.begin(), sorted.end(), t) - sorted.begin();
        const double frac = sorted.empty() ? 1.0 : static_cast<double>(below) / static_cast<double>(sorted.size());
        out.push_back({t, frac});
    }
    return out;
}

std::vector<double> ced_thresholds(double max_threshold, double step)
{
    if (!(step > 0.0) || !(max_threshold >= 0.0)) {
        throw ConfigError("CED threshold grid needs a positive step and nonnegative maximum");
    }
    const auto n = static_cast<std::size_t>(std::llround(max_threshold / step));
    std::vector<double> t(n + 1);
    for (std::size_t k = 0; k <= n; ++k) t[k] = static_cast<double>(k) * step;
    return t;
}

double discretize_angle(double degrees, double step)
{
    // nearbyint under the default rounding mode breaks ties to even.
    return std::nearbyint(degrees / step) * step;
}

PoseMetrics pose_metrics(std::span<const Pose3D> preds, std::span<const Pose3D> gts, PoseAccuracyMode mode,
                         double tolerance)
{
    if (preds.size() != gts.size()) {
        throw DataError("pose metrics need equally many predictions and ground truths");
    }
    PoseMetrics m;
    if (preds.empty()) return m;
    std::size_t within = 0;
    for (std::size_t k = 0; k < preds.size(); ++k) {
        const std::array<double, 3> e = {std::abs(wrap_degrees(preds[k].yaw - gts[k].yaw)),
                                         std::abs(wrap_degrees(preds[k].pitch - gts[k].pitch)),
                                         std::abs(wrap_degrees(preds[k].roll - gts[k].roll))};
        for (int a = 0; a < 3; ++a) m.axis_mae[a] += e[a];
        const double worst = mode == PoseAccuracyMode::yaw_only ? e[0] : std::max({e[0], e[1], e[2]});
        if (worst <= tolerance) ++within;
        m.abs_errors.push_back(e);
        m.discretized.push_back(
            {discretize_angle(preds[k].yaw), discretize_angle(preds[k].pitch), discretize_angle(preds[k].roll)});
    }
    const auto n = static_cast<double>(preds.size());
    for (auto& a : m.axis_mae) a /= n;
    m.mae = (m.axis_mae[0] + m.axis_mae[1] + m.axis_mae[2]) / 3.0;
    m.accuracy_15 = static_cast<double>(within) / n;
    return m;
}

double median(std::span<const double> values)
{
    if (values.empty()) {
        throw DataError("median of an empty sequence");
    }
    std::vector<double> v(values.begin(), values.end());
    std::sort(v.begin(), v.end());
    const std::size_t h = v.size() / 2;
    return v.size() % 2 == 1 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

EvalReport evaluate(std::span<const AnnotatedFace> preds, std::span<const AnnotatedFace> gts,
                    const EvalOptions& options)
{
    if (preds.size() != gts.size()) {
        throw DataError("evaluation needs one prediction per ground-truth record (" + std::to_string(preds.size()) +
                        " vs " + std::to_string(gts.size()) + ")");
    }
    EvalReport r;
    r.protocol = options.protocol;
    r.groups = options.groups;
    r.pose_mode = options.pose_mode;
    std::vector<Pose3D> pp, gp;
    for (std::size_t k = 0; k < gts.size(); ++k) {
        r.sample_ids.push_back(gts[k].image_path);
        r.nme.push_back(nme(preds[k].shape, gts[k]));
        pp.push_back(preds[k].pose);
        gp.push_back(gts[k].pose);
    }
    if (!r.nme.empty()) {
        r.mean_nme = std::accumulate(r.nme.begin(), r.nme.end(), 0.0) / static_cast<double>(r.nme.size());
        r.median_nme = median(r.nme);
    }
    r.ced = ced_curve(r.nme, options.thresholds);
    r.pose = pose_metrics(pp, gp, options.pose_mode);
    return r;
}

namespace {

std::string fmt(const char* f, double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

std::ofstream open_out(const std::filesystem::path& p)
{
    std::ofstream os(p, std::ios::binary);
    if (!os) throw DataError("cannot write report file " + p.string());
    return os;
}

std::string csv_field(const std::string& s)
{
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

struct Row
{
    std::string name;
    std::size_t count = 0;
    double mean_nme = 0.0;
    std::array<double, 3> mae{};
    double accuracy = 0.0;
};

Row summarize(const EvalReport& r, const std::string& name, const std::vector<std::size_t>& members)
{
    Row row;
    row.name = name;
    row.count = members.size();
    if (members.empty()) return row;
    std::size_t within = 0;
    for (std::size_t k : members) {
        row.mean_nme += r.nme.at(k);
        if (!r.pose.abs_errors.empty()) {
            const auto& e = r.pose.abs_errors.at(k);
            for (int a = 0; a < 3; ++a) row.mae[a] += e[a];
            const double worst = r.pose_mode == PoseAccuracyMode::yaw_only ? e[0] : std::max({e[0], e[1], e[2]});
            if (worst <= 15.0) ++within;
        }
    }
    const auto n = static_cast<double>(members.size());
    row.mean_nme /= n;
    for (auto& a : row.mae) a /= n;
    row.accuracy = static_cast<double>(within) / n;
    return row;
}

} // namespace

void emit_report(const EvalReport& report, const std::filesystem::path& dir)
{
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw DataError("cannot create report directory " + dir.string() + ": " + ec.message());

    {
        auto os = open_out(dir / "per_sample.csv");
        os << "id,nme,yaw_err,pitch_err,roll_err\n";
        for (std::size_t k = 0; k < report.nme.size(); ++k) {
            os << csv_field(report.sample_ids.at(k)) << ',' << fmt("%.8f", report.nme[k]);
            if (k < report.pose.abs_errors.size()) {
                for (double e : report.pose.abs_errors[k]) os << ',' << fmt("%.6f", e);
            } else {
                os << ",,,";
            }
            os << '\n';
        }
    }
    {
        auto os = open_out(dir / "ced.csv");
        os << "threshold,fraction\n";
        if (!report.nme.empty()) {
            for (const auto& p : report.ced) os << fmt("%.6f", p.threshold) << ',' << fmt("%.6f", p.fraction) << '\n';
        }
    }
    if (!report.nme.empty() && !report.ced.empty()) {
        // 480 x 320 canvas, 40 px margins; x = threshold, y = fraction.
        const double x0 = 40, y0 = 280, w = 400, h = 240;
        const double tmax = std::max(report.ced.back().threshold, 1e-12);
        auto os = open_out(dir / "ced.svg");
        os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"480\" height=\"320\" viewBox=\"0 0 480 320\">\n";
        os << "<rect x=\"0\" y=\"0\" width=\"480\" height=\"320\" fill=\"white\"/>\n";
        os << "<path d=\"M40 280 L440 280 M40 280 L40 40\" stroke=\"black\" fill=\"none\"/>\n";
        os << "<text x=\"240\" y=\"310\" text-anchor=\"middle\" font-size=\"12\">NME (max "
           << fmt("%.3f", tmax) << ")</text>\n";
        os << "<text x=\"12\" y=\"160\" font-size=\"12\" transform=\"rotate(-90 12 160)\">fraction of faces</text>\n";
        os << "<path fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" d=\"";
        for (std::size_t k = 0; k < report.ced.size(); ++k) {
            const double x = x0 + w * report.ced[k].threshold / tmax;
            const double y = y0 - h * report.ced[k].fraction;
            os << (k == 0 ? "M" : " L") << fmt("%.2f", x) << ' ' << fmt("%.2f", y);
        }
        os << "\"/>\n</svg>\n";
    }
    {
        auto os = open_out(dir / "summary.txt");
        os << "protocol: " << report.protocol << '\n';
        os << "subset            count   NME(%)    yaw    pitch   roll    MAE    acc15(%)\n";
        std::vector<Row> rows;
        for (const auto& g : report.groups) rows.push_back(summarize(report, g.name, g.members));
        std::vector<std::size_t> all(report.nme.size());
        std::iota(all.begin(), all.end(), std::size_t{0});
        rows.push_back(summarize(report, "all", all));
        for (const auto& row : rows) {
            char line[160];
            const double mae = (row.mae[0] + row.mae[1] + row.mae[2]) / 3.0;
            std::snprintf(line, sizeof line, "%-16s %6zu %8.4f %7.3f %7.3f %7.3f %7.3f %8.2f\n", row.name.c_str(),
                          row.count, 100.0 * row.mean_nme, row.mae[0], row.mae[1], row.mae[2], mae,
                          100.0 * row.accuracy);
            os << line;
        }
        os << "median NME(%): " << fmt("%.4f", 100.0 * report.median_nme) << '\n';
    }
}

} /* namespace kepler */
