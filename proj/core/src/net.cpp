/*
 * kepler: iterative keypoint and pose estimation with heatmap-conditioned
 *         cascade regressors
 * File: core/src/net.cpp
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
#include "kepler/net.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <random>
#include <set>

namespace kepler {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

constexpr double kInitSlope = 0.25;

int conv_out(int in, const ConvSpec& c)
{
    return (in + 2 * c.pad - c.kernel) / c.stride + 1;
}

void im2col(const double* in, int channels, int height, int width, const ConvSpec& c, int out_h, int out_w,
            double* cols)
{
    const int k = c.kernel;
    const std::size_t plane = static_cast<std::size_t>(out_h) * out_w;
    for (int ch = 0; ch < channels; ++ch) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                double* row = cols + ((static_cast<std::size_t>(ch) * k + ky) * k + kx) * plane;
                for (int oy = 0; oy < out_h; ++oy) {
                    const int iy = oy * c.stride - c.pad + ky;
                    double* dst = row + static_cast<std::size_t>(oy) * out_w;
                    if (iy < 0 || iy >= height) {
                        std::fill(dst, dst + out_w, 0.0);
                        continue;
                    }
                    const double* src = in + (static_cast<std::size_t>(ch) * height + iy) * width;
                    for (int ox = 0; ox < out_w; ++ox) {
                        const int ix = ox * c.stride - c.pad + kx;
                        dst[ox] = (ix >= 0 && ix < width) ? src[ix] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im_add(const double* cols, int channels, int height, int width, const ConvSpec& c, int out_h,
                int out_w, double* in)
{
    const int k = c.kernel;
    const std::size_t plane = static_cast<std::size_t>(out_h) * out_w;
    for (int ch = 0; ch < channels; ++ch) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const double* row = cols + ((static_cast<std::size_t>(ch) * k + ky) * k + kx) * plane;
                for (int oy = 0; oy < out_h; ++oy) {
                    const int iy = oy * c.stride - c.pad + ky;
                    if (iy < 0 || iy >= height) {
                        continue;
                    }
                    const double* src = row + static_cast<std::size_t>(oy) * out_w;
                    double* dst = in + (static_cast<std::size_t>(ch) * height + iy) * width;
                    for (int ox = 0; ox < out_w; ++ox) {
                        const int ix = ox * c.stride - c.pad + kx;
                        if (ix >= 0 && ix < width) {
                            dst[ix] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

nlohmann::json conv_to_json(const ConvSpec& c)
{
    return {{"out_channels", c.out_channels}, {"kernel", c.kernel}, {"stride", c.stride}, {"pad", c.pad}};
}

ConvSpec conv_from_json(const nlohmann::json& j)
{
    return {j.at("out_channels").get<int>(), j.at("kernel").get<int>(), j.at("stride").get<int>(),
            j.at("pad").get<int>()};
}

template <typename T>
void put(std::ostream& os, T value)
{
    static_assert(std::endian::native == std::endian::little, "parameter files are little-endian");
    os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& is)
{
    T value{};
    is.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!is) {
        throw DataError("truncated parameter file");
    }
    return value;
}

constexpr char kMagic[8] = {'K', 'P', 'L', 'R', 'P', 'R', 'M', '\0'};
constexpr std::uint32_t kFormatVersion = 1;

} // namespace

NetSpec NetSpec::reference(int input_channels, int width, int height)
{
    NetSpec s;
    s.input_channels = input_channels;
    s.input_width = width;
    s.input_height = height;
    s.trunk = {{16, 3, 2, 1}, {24, 3, 1, 1}, {32, 3, 2, 1}, {32, 3, 1, 1}};
    s.top = {{32, 2, 2, 0}};
    s.branches = {{1, {{16, 4, 2, 1}, {16, 2, 2, 0}}}, {3, {{16, 2, 2, 0}}}};
    s.block_width = conv_out(conv_out(conv_out(width, s.trunk[0]), s.trunk[2]), s.top[0]);
    s.block_height = conv_out(conv_out(conv_out(height, s.trunk[0]), s.trunk[2]), s.top[0]);
    s.reduction_channels = 32;
    s.head_width = 0;
    return s;
}

NetSpec NetSpec::tiny(int input_channels, int width, int height)
{
    NetSpec s;
    s.input_channels = input_channels;
    s.input_width = width;
    s.input_height = height;
    s.trunk = {{4, 3, 2, 1}, {4, 3, 1, 1}, {6, 3, 2, 1}};
    s.top = {{6, 2, 2, 0}};
    s.branches = {{1, {{3, 4, 4, 0}}}};
    s.block_width = conv_out(conv_out(conv_out(width, s.trunk[0]), s.trunk[2]), s.top[0]);
    s.block_height = conv_out(conv_out(conv_out(height, s.trunk[0]), s.trunk[2]), s.top[0]);
    s.reduction_channels = 4;
    s.head_width = 8;
    return s;
}

void NetSpec::validate() const
{
    // Building the graph performs every shape check.
    Network net(*this);
    (void)net;
}

std::string NetSpec::to_json() const
{
    nlohmann::json j;
    j["input_channels"] = input_channels;
    j["input_width"] = input_width;
    j["input_height"] = input_height;
    for (const auto& c : trunk) {
        j["trunk"].push_back(conv_to_json(c));
    }
    j["top"] = nlohmann::json::array();
    for (const auto& c : top) {
        j["top"].push_back(conv_to_json(c));
    }
    j["branches"] = nlohmann::json::array();
    for (const auto& b : branches) {
        nlohmann::json jb;
        jb["from_stage"] = b.from_stage;
        jb["convs"] = nlohmann::json::array();
        for (const auto& c : b.convs) {
            jb["convs"].push_back(conv_to_json(c));
        }
        j["branches"].push_back(jb);
    }
    j["block_width"] = block_width;
    j["block_height"] = block_height;
    j["reduction_channels"] = reduction_channels;
    j["head_width"] = head_width;
    j["output_dim"] = output_dim;
    j["activation"] = activation == Activation::prelu ? "prelu" : "identity";
    j["correction_scale"] = correction_scale;
    j["visibility_scale"] = visibility_scale;
    j["pose_scale"] = pose_scale;
    j["zero_head"] = zero_head;
    return j.dump();
}

NetSpec NetSpec::from_json(const std::string& text)
{
    try {
        const auto j = nlohmann::json::parse(text);
        NetSpec s;
        s.input_channels = j.at("input_channels").get<int>();
        s.input_width = j.at("input_width").get<int>();
        s.input_height = j.at("input_height").get<int>();
        s.trunk.clear();
        for (const auto& c : j.at("trunk")) {
            s.trunk.push_back(conv_from_json(c));
        }
        for (const auto& c : j.at("top")) {
            s.top.push_back(conv_from_json(c));
        }
        for (const auto& jb : j.at("branches")) {
            BranchSpec b;
            b.from_stage = jb.at("from_stage").get<int>();
            for (const auto& c : jb.at("convs")) {
                b.convs.push_back(conv_from_json(c));
            }
            s.branches.push_back(b);
        }
        s.block_width = j.at("block_width").get<int>();
        s.block_height = j.at("block_height").get<int>();
        s.reduction_channels = j.at("reduction_channels").get<int>();
        s.head_width = j.at("head_width").get<int>();
        s.output_dim = j.at("output_dim").get<int>();
        const auto act = j.at("activation").get<std::string>();
        if (act != "prelu" && act != "identity") {
            throw ConfigError("unknown activation '" + act + "'");
        }
        s.activation = act == "prelu" ? Activation::prelu : Activation::identity;
        s.correction_scale = j.at("correction_scale").get<double>();
        s.visibility_scale = j.at("visibility_scale").get<double>();
        s.pose_scale = j.at("pose_scale").get<double>();
        s.zero_head = j.at("zero_head").get<bool>();
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid network spec: ") + e.what());
    }
}

const TensorInfo& RegressorParams::tensor(const std::string& name) const
{
    for (const auto& t : tensors) {
        if (t.name == name) {
            return t;
        }
    }
    throw DataError("no tensor named '" + name + "'");
}

std::span<double> RegressorParams::view(const std::string& name)
{
    const auto& t = tensor(name);
    return std::span<double>(values).subspan(t.offset, t.size);
}

std::span<const double> RegressorParams::view(const std::string& name) const
{
    const auto& t = tensor(name);
    return std::span<const double>(values).subspan(t.offset, t.size);
}

void write_params(const RegressorParams& params, std::ostream& os)
{
    os.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(os, kFormatVersion);
    put<std::int32_t>(os, params.stage);
    const std::string spec = params.spec.to_json();
    put<std::uint32_t>(os, static_cast<std::uint32_t>(spec.size()));
    os.write(spec.data(), static_cast<std::streamsize>(spec.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(params.tensors.size()));
    for (const auto& t : params.tensors) {
        put<std::uint32_t>(os, static_cast<std::uint32_t>(t.name.size()));
        os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
        put<std::uint8_t>(os, t.trainable ? 1 : 0);
        put<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape.size()));
        for (auto d : t.shape) {
            put<std::uint32_t>(os, d);
        }
        for (std::size_t k = 0; k < t.size; ++k) {
            put<double>(os, params.values[t.offset + k]);
        }
    }
}

RegressorParams read_params(std::istream& is)
{
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
        throw DataError("not a parameter file (bad magic)");
    }
    const auto version = get<std::uint32_t>(is);
    if (version != kFormatVersion) {
        throw DataError("unsupported parameter file version " + std::to_string(version));
    }
    RegressorParams params;
    params.stage = get<std::int32_t>(is);
    std::string spec(get<std::uint32_t>(is), '\0');
    is.read(spec.data(), static_cast<std::streamsize>(spec.size()));
    if (!is) {
        throw DataError("truncated parameter file");
    }
    params.spec = NetSpec::from_json(spec);
    const auto count = get<std::uint32_t>(is);
    for (std::uint32_t n = 0; n < count; ++n) {
        TensorInfo t;
        t.name.resize(get<std::uint32_t>(is));
        is.read(t.name.data(), static_cast<std::streamsize>(t.name.size()));
        t.trainable = get<std::uint8_t>(is) != 0;
        const auto rank = get<std::uint32_t>(is);
        t.size = 1;
        for (std::uint32_t r = 0; r < rank; ++r) {
            t.shape.push_back(get<std::uint32_t>(is));
            t.size *= t.shape.back();
        }
        t.offset = params.values.size();
        for (std::size_t k = 0; k < t.size; ++k) {
            params.values.push_back(get<double>(is));
        }
        params.tensors.push_back(std::move(t));
    }
    // The stored layout must be exactly what the spec builds.
    const Network net(params.spec);
    if (net.layout() != params.tensors) {
        throw DataError("parameter tensors do not match the stored network spec");
    }
    return params;
}

void save_params(const RegressorParams& params, const std::filesystem::path& path)
{
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw DataError("cannot open '" + path.string() + "' for writing");
    }
    write_params(params, os);
    if (!os) {
        throw DataError("failed writing '" + path.string() + "'");
    }
}

RegressorParams load_params(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw DataError("cannot open parameter file '" + path.string() + "'");
    }
    try {
        return read_params(is);
    } catch (const DataError& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

Network::Network(NetSpec spec) : spec_(std::move(spec))
{
    const auto& s = spec_;
    if (s.input_channels <= 0 || s.input_width <= 0 || s.input_height <= 0) {
        throw ConfigError("network input dimensions must be positive");
    }
    if (s.trunk.empty()) {
        throw ConfigError("network trunk needs at least one stage");
    }
    if (s.output_dim != static_cast<int>(kOutputDim)) {
        throw ConfigError("network output must have " + std::to_string(kOutputDim) + " units");
    }
    if (s.reduction_channels <= 0 || s.head_width < 0) {
        throw ConfigError("invalid reduction or head width");
    }
    std::set<int> seen;
    for (const auto& b : s.branches) {
        if (b.from_stage < 1 || b.from_stage >= static_cast<int>(s.trunk.size())) {
            throw ConfigError("branch must pool from a trunk stage below the top, got stage " +
                              std::to_string(b.from_stage));
        }
        for (int other : seen) {
            if (std::abs(other - b.from_stage) < 2) {
                throw ConfigError("branches must pool from alternate trunk stages");
            }
        }
        seen.insert(b.from_stage);
    }

    input_mean_ = add_tensor("input.mean", {static_cast<std::uint32_t>(s.input_channels)}, false);
    input_std_ = add_tensor("input.std", {static_cast<std::uint32_t>(s.input_channels)}, false);
    nodes_.push_back({s.input_channels, s.input_height, s.input_width});

    std::vector<int> trunk_nodes;
    int cur = 0;
    for (std::size_t i = 0; i < s.trunk.size(); ++i) {
        cur = add_conv("trunk" + std::to_string(i + 1), cur, s.trunk[i]);
        trunk_nodes.push_back(cur);
    }
    for (std::size_t i = 0; i < s.top.size(); ++i) {
        cur = add_conv("top" + std::to_string(i + 1), cur, s.top[i]);
    }
    std::vector<int> block_inputs{cur};
    for (std::size_t b = 0; b < s.branches.size(); ++b) {
        int node = trunk_nodes[s.branches[b].from_stage - 1];
        for (std::size_t i = 0; i < s.branches[b].convs.size(); ++i) {
            node = add_conv("branch" + std::to_string(b + 1) + "." + std::to_string(i + 1), node,
                            s.branches[b].convs[i]);
        }
        block_inputs.push_back(node);
    }
    int channels = 0;
    for (int n : block_inputs) {
        if (nodes_[n].height != s.block_height || nodes_[n].width != s.block_width) {
            throw ConfigError("channeled block inputs must be " + std::to_string(s.block_width) + "x" +
                              std::to_string(s.block_height) + ", got " + std::to_string(nodes_[n].width) +
                              "x" + std::to_string(nodes_[n].height));
        }
        channels += nodes_[n].channels;
    }
    nodes_.push_back({channels, s.block_height, s.block_width});
    Op cat;
    cat.kind = Op::Kind::concat;
    cat.inputs = block_inputs;
    cat.output = static_cast<int>(nodes_.size()) - 1;
    ops_.push_back(cat);

    cur = add_conv("reduce", cat.output, {s.reduction_channels, 1, 1, 0});
    if (s.head_width > 0) {
        cur = add_dense("hidden", cur, s.head_width, true);
    }
    add_dense("output", cur, s.output_dim, false);
}

std::size_t Network::add_tensor(const std::string& name, std::vector<std::uint32_t> shape, bool trainable)
{
    TensorInfo t;
    t.name = name;
    t.size = 1;
    for (auto d : shape) {
        t.size *= d;
    }
    t.shape = std::move(shape);
    t.offset = num_params_;
    t.trainable = trainable;
    num_params_ += t.size;
    layout_.push_back(t);
    return t.offset;
}

int Network::add_conv(const std::string& name, int input, const ConvSpec& conv)
{
    const Node in = nodes_[input];
    if (conv.out_channels <= 0 || conv.kernel <= 0 || conv.stride <= 0 || conv.pad < 0) {
        throw ConfigError(name + ": invalid convolution parameters");
    }
    const Node out{conv.out_channels, conv_out(in.height, conv), conv_out(in.width, conv)};
    if (out.height <= 0 || out.width <= 0) {
        throw ConfigError(name + ": convolution output would be empty");
    }
    Op op;
    op.kind = Op::Kind::conv;
    op.inputs = {input};
    op.conv = conv;
    op.activate = spec_.activation == Activation::prelu;
    const auto k = static_cast<std::uint32_t>(conv.kernel);
    op.weight = add_tensor(name + ".weight",
                           {static_cast<std::uint32_t>(conv.out_channels), static_cast<std::uint32_t>(in.channels), k, k},
                           true);
    op.bias = add_tensor(name + ".bias", {static_cast<std::uint32_t>(conv.out_channels)}, true);
    if (op.activate) {
        op.slope = add_tensor(name + ".slope", {static_cast<std::uint32_t>(conv.out_channels)}, true);
    }
    op.column_slot = num_column_slots_++;
    nodes_.push_back(out);
    op.output = static_cast<int>(nodes_.size()) - 1;
    ops_.push_back(op);
    return op.output;
}

int Network::add_dense(const std::string& name, int input, int units, bool activate)
{
    const auto fan_in = static_cast<std::uint32_t>(nodes_[input].size());
    Op op;
    op.kind = Op::Kind::dense;
    op.inputs = {input};
    op.activate = activate && spec_.activation == Activation::prelu;
    op.weight = add_tensor(name + ".weight", {static_cast<std::uint32_t>(units), fan_in}, true);
    op.bias = add_tensor(name + ".bias", {static_cast<std::uint32_t>(units)}, true);
    if (op.activate) {
        op.slope = add_tensor(name + ".slope", {static_cast<std::uint32_t>(units)}, true);
    }
    nodes_.push_back({units, 1, 1});
    op.output = static_cast<int>(nodes_.size()) - 1;
    ops_.push_back(op);
    return op.output;
}

RegressorParams Network::initialize(std::uint64_t seed, int stage) const
{
    RegressorParams p;
    p.spec = spec_;
    p.stage = stage;
    p.tensors = layout_;
    p.values.assign(num_params_, 0.0);
    std::mt19937_64 rng(seed);
    const std::string output_weight = "output.weight";
    for (const auto& t : layout_) {
        auto values = std::span<double>(p.values).subspan(t.offset, t.size);
        const auto& name = t.name;
        if (name == "input.std") {
            std::fill(values.begin(), values.end(), 1.0);
        } else if (name.ends_with(".slope")) {
            std::fill(values.begin(), values.end(), kInitSlope);
        } else if (name.ends_with(".weight")) {
            std::size_t fan_in = 1;
            for (std::size_t d = 1; d < t.shape.size(); ++d) {
                fan_in *= t.shape[d];
            }
            double stddev = std::sqrt(1.0 / static_cast<double>(fan_in));
            if (name == output_weight) {
                if (spec_.zero_head) {
                    continue;
                }
                stddev *= 0.1;
            } else if (spec_.activation == Activation::prelu) {
                stddev = std::sqrt(2.0 / ((1.0 + kInitSlope * kInitSlope) * static_cast<double>(fan_in)));
            }
            std::normal_distribution<double> normal(0.0, stddev);
            for (auto& v : values) {
                v = normal(rng);
            }
        }
    }
    return p;
}

void Network::forward(std::span<const double> params, const RenderedInput& input, Workspace& ws,
                      std::span<double> output) const
{
    if (params.size() != num_params_) {
        throw ConfigError("parameter vector has " + std::to_string(params.size()) + " values, network expects " +
                          std::to_string(num_params_));
    }
    if (input.channels != spec_.input_channels || input.width != spec_.input_width ||
        input.height != spec_.input_height) {
        throw ConfigError("network expects " + std::to_string(spec_.input_channels) + " channels of " +
                          std::to_string(spec_.input_width) + "x" + std::to_string(spec_.input_height) +
                          ", got " + std::to_string(input.channels) + " channels of " +
                          std::to_string(input.width) + "x" + std::to_string(input.height));
    }
    if (output.size() != static_cast<std::size_t>(spec_.output_dim)) {
        throw ConfigError("output buffer has the wrong size");
    }
    ws.params.assign(params.begin(), params.end());
    params = ws.params;
    ws.nodes.resize(nodes_.size());
    ws.pre_activation.resize(ops_.size());
    ws.columns.resize(num_column_slots_);
    for (std::size_t n = 0; n < nodes_.size(); ++n) {
        ws.nodes[n].resize(nodes_[n].size());
    }

    const std::size_t plane = input.plane();
    for (int c = 0; c < input.channels; ++c) {
        const double mean = params[input_mean_ + c];
        const double inv_std = 1.0 / params[input_std_ + c];
        const float* src = input.data.data() + c * plane;
        double* dst = ws.nodes[0].data() + c * plane;
        for (std::size_t k = 0; k < plane; ++k) {
            dst[k] = (static_cast<double>(src[k]) - mean) * inv_std;
        }
    }

    for (std::size_t o = 0; o < ops_.size(); ++o) {
        const Op& op = ops_[o];
        const Node& out_node = nodes_[op.output];
        auto& out = ws.nodes[op.output];
        if (op.kind == Op::Kind::concat) {
            std::size_t at = 0;
            for (int in : op.inputs) {
                std::copy(ws.nodes[in].begin(), ws.nodes[in].end(), out.begin() + at);
                at += ws.nodes[in].size();
            }
            continue;
        }

        const Node& in_node = nodes_[op.inputs[0]];
        auto& pre = ws.pre_activation[o];
        pre.resize(out_node.size());
        const std::size_t positions = static_cast<std::size_t>(out_node.height) * out_node.width;
        Eigen::Map<RowMat> z(pre.data(), out_node.channels, static_cast<Eigen::Index>(positions));
        const Eigen::Map<const Vec> bias(params.data() + op.bias, out_node.channels);
        if (op.kind == Op::Kind::conv) {
            const int k = op.conv.kernel;
            const auto rows = static_cast<Eigen::Index>(in_node.channels * k * k);
            auto& cols = ws.columns[op.column_slot];
            cols.resize(static_cast<std::size_t>(rows) * positions);
            im2col(ws.nodes[op.inputs[0]].data(), in_node.channels, in_node.height, in_node.width, op.conv,
                   out_node.height, out_node.width, cols.data());
            const Eigen::Map<const RowMat> w(params.data() + op.weight, out_node.channels, rows);
            const Eigen::Map<const RowMat> x(cols.data(), rows, static_cast<Eigen::Index>(positions));
            z.noalias() = w * x;
            z.colwise() += bias;
        } else {
            const auto fan_in = static_cast<Eigen::Index>(in_node.size());
            const Eigen::Map<const RowMat> w(params.data() + op.weight, out_node.channels, fan_in);
            const Eigen::Map<const Vec> x(ws.nodes[op.inputs[0]].data(), fan_in);
            Eigen::Map<Vec> zv(pre.data(), out_node.channels);
            zv.noalias() = w * x;
            zv += bias;
        }
        if (op.activate) {
            for (int c = 0; c < out_node.channels; ++c) {
                const double a = params[op.slope + c];
                for (std::size_t p = 0; p < positions; ++p) {
                    const double v = pre[c * positions + p];
                    out[c * positions + p] = v > 0.0 ? v : a * v;
                }
            }
        } else {
            std::copy(pre.begin(), pre.end(), out.begin());
        }
    }

    const auto& last = ws.nodes.back();
    const std::size_t n2 = 2 * kNumLandmarks;
    for (std::size_t k = 0; k < output.size(); ++k) {
        const double scale = k < n2 ? spec_.correction_scale
                                    : (k < n2 + kNumLandmarks ? spec_.visibility_scale : spec_.pose_scale);
        output[k] = scale * last[k];
    }
}

void Network::backward(std::span<const double> params, Workspace& ws, std::span<const double> grad_output,
                       std::span<double> grad) const
{
    if (grad.size() != num_params_ || grad_output.size() != static_cast<std::size_t>(spec_.output_dim)) {
        throw ConfigError("gradient buffers have the wrong size");
    }
    ws.params.assign(params.begin(), params.end());
    params = ws.params;
    // Accumulate into an aligned buffer, then add to the caller's gradient.
    std::span<double> caller_grad = grad;
    ws.grad.assign(num_params_, 0.0);
    grad = ws.grad;
    ws.node_grads.resize(nodes_.size());
    for (std::size_t n = 0; n < nodes_.size(); ++n) {
        ws.node_grads[n].assign(nodes_[n].size(), 0.0);
    }
    const std::size_t n2 = 2 * kNumLandmarks;
    auto& top_grad = ws.node_grads.back();
    for (std::size_t k = 0; k < grad_output.size(); ++k) {
        const double scale = k < n2 ? spec_.correction_scale
                                    : (k < n2 + kNumLandmarks ? spec_.visibility_scale : spec_.pose_scale);
        top_grad[k] = scale * grad_output[k];
    }

    auto& column_grad = ws.column_grad;
    for (std::size_t o = ops_.size(); o-- > 0;) {
        const Op& op = ops_[o];
        const Node& out_node = nodes_[op.output];
        auto& dout = ws.node_grads[op.output];
        if (op.kind == Op::Kind::concat) {
            std::size_t at = 0;
            for (int in : op.inputs) {
                auto& din = ws.node_grads[in];
                for (std::size_t k = 0; k < din.size(); ++k) {
                    din[k] += dout[at + k];
                }
                at += din.size();
            }
            continue;
        }

        const std::size_t positions = static_cast<std::size_t>(out_node.height) * out_node.width;
        const auto& pre = ws.pre_activation[o];
        if (op.activate) {
            for (int c = 0; c < out_node.channels; ++c) {
                const double a = params[op.slope + c];
                double slope_grad = 0.0;
                for (std::size_t p = 0; p < positions; ++p) {
                    const std::size_t k = c * positions + p;
                    if (pre[k] <= 0.0) {
                        slope_grad += dout[k] * pre[k];
                        dout[k] *= a;
                    }
                }
                grad[op.slope + c] += slope_grad;
            }
        }
        // dout now holds d loss / d pre-activation.
        const Eigen::Map<const RowMat> dz(dout.data(), out_node.channels, static_cast<Eigen::Index>(positions));
        Eigen::Map<Vec> db(grad.data() + op.bias, out_node.channels);
        db += dz.rowwise().sum();

        const int input = op.inputs[0];
        const Node& in_node = nodes_[input];
        const bool need_input_grad = input != 0;
        if (op.kind == Op::Kind::conv) {
            const int k = op.conv.kernel;
            const auto rows = static_cast<Eigen::Index>(in_node.channels * k * k);
            const auto& cols = ws.columns[op.column_slot];
            const Eigen::Map<const RowMat> x(cols.data(), rows, static_cast<Eigen::Index>(positions));
            Eigen::Map<RowMat> dw(grad.data() + op.weight, out_node.channels, rows);
            dw.noalias() += dz * x.transpose();
            if (need_input_grad) {
                const Eigen::Map<const RowMat> w(params.data() + op.weight, out_node.channels, rows);
                column_grad.resize(static_cast<std::size_t>(rows) * positions);
                Eigen::Map<RowMat> dx(column_grad.data(), rows, static_cast<Eigen::Index>(positions));
                dx.noalias() = w.transpose() * dz;
                col2im_add(column_grad.data(), in_node.channels, in_node.height, in_node.width, op.conv,
                           out_node.height, out_node.width, ws.node_grads[input].data());
            }
        } else {
            const auto fan_in = static_cast<Eigen::Index>(in_node.size());
            const Eigen::Map<const Vec> x(ws.nodes[input].data(), fan_in);
            const Eigen::Map<const Vec> dzv(dout.data(), out_node.channels);
            Eigen::Map<RowMat> dw(grad.data() + op.weight, out_node.channels, fan_in);
            dw.noalias() += dzv * x.transpose();
            if (need_input_grad) {
                const Eigen::Map<const RowMat> w(params.data() + op.weight, out_node.channels, fan_in);
                Eigen::Map<Vec> dx(ws.node_grads[input].data(), fan_in);
                dx.noalias() += w.transpose() * dzv;
            }
        }
    }
    for (std::size_t k = 0; k < num_params_; ++k) {
        caller_grad[k] += grad[k];
    }
}

} /* namespace kepler */
