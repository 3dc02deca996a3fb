/*
 * kepler: iterative keypoint and pose estimation with heatmap-conditioned
 *         cascade regressors
 * File: core/src/config.cpp
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
#include "kepler/config.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <set>
#include <sstream>

namespace kepler {

using nlohmann::json;

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where)
{
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
    for (const auto& item : j.items()) {
        if (!allowed.count(item.key())) throw ConfigError(where + ": unknown key '" + item.key() + "'");
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

void read_path(const json& j, const char* key, std::filesystem::path& out, const std::string& where)
{
    std::string s = out.string();
    read_if(j, key, s, where);
    out = s;
}

json synthetic_to_json(const SyntheticFaceSpec& s, std::size_t count)
{
    return {{"count", count},
            {"image_width", s.image_width},
            {"image_height", s.image_height},
            {"scale_range", s.scale_range},
            {"yaw_range", s.yaw_range},
            {"pitch_range", s.pitch_range},
            {"roll_range", s.roll_range},
            {"center_jitter", s.center_jitter},
            {"box_side", s.box_side},
            {"box_shift", s.box_shift},
            {"box_scale_jitter", s.box_scale_jitter},
            {"blob_sigma", s.blob_sigma},
            {"noise", s.noise},
            {"test_fraction", s.test_fraction}};
}

void synthetic_from_json(const json& j, SyntheticFaceSpec& s, std::size_t& count)
{
    const std::string where = "synthetic";
    check_keys(j,
               {"count", "image_width", "image_height", "scale_range", "yaw_range", "pitch_range", "roll_range",
                "center_jitter", "box_side", "box_shift", "box_scale_jitter", "blob_sigma", "noise", "test_fraction"},
               where);
    read_if(j, "count", count, where);
    read_if(j, "image_width", s.image_width, where);
    read_if(j, "image_height", s.image_height, where);
    read_if(j, "scale_range", s.scale_range, where);
    read_if(j, "yaw_range", s.yaw_range, where);
    read_if(j, "pitch_range", s.pitch_range, where);
    read_if(j, "roll_range", s.roll_range, where);
    read_if(j, "center_jitter", s.center_jitter, where);
    read_if(j, "box_side", s.box_side, where);
    read_if(j, "box_shift", s.box_shift, where);
    read_if(j, "box_scale_jitter", s.box_scale_jitter, where);
    read_if(j, "blob_sigma", s.blob_sigma, where);
    read_if(j, "noise", s.noise, where);
    read_if(j, "test_fraction", s.test_fraction, where);
}

} // namespace

void RunConfig::validate() const
{
    if (workers < 1) throw ConfigError("workers must be at least 1");
    if (protocol != "tags") (void)parse_protocol(protocol);
    if (test_size == 0) throw ConfigError("test_size must be positive");
    synthetic.validate();
    cascade.validate();
    if (!(afw_min_height >= 0.0)) throw ConfigError("afw min height must be nonnegative");
    if (variants.angles.empty()) throw ConfigError("variant angle list must not be empty");
}

std::string RunConfig::to_json() const
{
    json j;
    j["seed"] = seed;
    j["workers"] = workers;
    j["paths"] = {{"data", data.string()}, {"model", model.string()}, {"output", output.string()}};
    j["protocol"] = protocol;
    j["test_size"] = test_size;
    j["synthetic"] = synthetic_to_json(synthetic, synthetic_count);
    j["cascade"] = json::parse(cascade.to_json());
    j["stage5"] = stage5;
    j["eval"] = {{"pose_accuracy", pose_mode == PoseAccuracyMode::yaw_only ? "yaw_only" : "max_axis"}};
    j["augment"] = {{"angles", variants.angles},
                    {"include_original", variants.include_original},
                    {"crop_margin", variants.crop_margin},
                    {"afw_min_height", afw_min_height}};
    return j.dump(2);
}

RunConfig RunConfig::from_json(const std::string& text)
{
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config: malformed JSON: ") + e.what());
    }
    const std::string where = "config";
    check_keys(j,
               {"seed", "workers", "paths", "protocol", "test_size", "synthetic", "cascade", "stage5", "eval",
                "augment"},
               where);
    RunConfig c;
    read_if(j, "seed", c.seed, where);
    read_if(j, "workers", c.workers, where);
    if (j.contains("paths")) {
        const json& p = j["paths"];
        check_keys(p, {"data", "model", "output"}, "paths");
        read_path(p, "data", c.data, "paths");
        read_path(p, "model", c.model, "paths");
        read_path(p, "output", c.output, "paths");
    }
    read_if(j, "protocol", c.protocol, where);
    read_if(j, "test_size", c.test_size, where);
    if (j.contains("synthetic")) synthetic_from_json(j["synthetic"], c.synthetic, c.synthetic_count);
    if (j.contains("cascade")) c.cascade = CascadeConfig::from_json(j["cascade"].dump());
    read_if(j, "stage5", c.stage5, where);
    if (j.contains("eval")) {
        check_keys(j["eval"], {"pose_accuracy"}, "eval");
        std::string mode = "max_axis";
        read_if(j["eval"], "pose_accuracy", mode, "eval");
        if (mode == "max_axis") {
            c.pose_mode = PoseAccuracyMode::max_axis;
        } else if (mode == "yaw_only") {
            c.pose_mode = PoseAccuracyMode::yaw_only;
        } else {
            throw ConfigError("eval: pose_accuracy must be max_axis or yaw_only");
        }
    }
    if (j.contains("augment")) {
        const json& a = j["augment"];
        check_keys(a, {"angles", "include_original", "crop_margin", "afw_min_height"}, "augment");
        read_if(a, "angles", c.variants.angles, "augment");
        read_if(a, "include_original", c.variants.include_original, "augment");
        read_if(a, "crop_margin", c.variants.crop_margin, "augment");
        read_if(a, "afw_min_height", c.afw_min_height, "augment");
    }
    c.validate();
    return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path)
{
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    try {
        return from_json(ss.str());
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

} /* namespace kepler */
