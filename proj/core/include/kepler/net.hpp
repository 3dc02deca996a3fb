/*
 * kepler: iterative keypoint and pose estimation with heatmap-conditioned
 *         cascade regressors
 * File: core/include/kepler/net.hpp
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
#pragma once

#include "kepler/render.hpp"
#include "kepler/types.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace kepler {

struct ConvSpec
{
    int out_channels = 16;
    int kernel = 3;
    int stride = 1;
    int pad = 1;
    friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

/// Strided convolutions taking trunk stage `from_stage` (1-based) to the
/// common spatial size of the channeled block.
struct BranchSpec
{
    int from_stage = 1;
    std::vector<ConvSpec> convs;
    friend bool operator==(const BranchSpec&, const BranchSpec&) = default;
};

enum class Activation { prelu, identity };

/**
 * Architecture of the reference regressor.
 *
 * trunk -> {top path, branches from alternate trunk stages} -> concat
 *       -> 1x1 reduction -> [dense hidden] -> dense output.
 *
 * Every convolution is followed by the activation. The top path maps the
 * last trunk stage to the block size; each branch does the same for an
 * earlier stage. The dense output has `output_dim` units; each output
 * group (corrections, visibility, pose) is multiplied by its scale. Input
 * channels are standardized with the non-trainable `input.mean` and
 * `input.std` tensors.
 */
struct NetSpec
{
    int input_channels = 3 + static_cast<int>(kNumLandmarks);
    int input_width = 224;
    int input_height = 224;
    std::vector<ConvSpec> trunk;
    std::vector<ConvSpec> top;
    std::vector<BranchSpec> branches;
    int block_width = 7;
    int block_height = 7;
    int reduction_channels = 32;
    int head_width = 0;
    int output_dim = static_cast<int>(kOutputDim);
    Activation activation = Activation::prelu;
    double correction_scale = 1.0;
    double visibility_scale = 1.0;
    double pose_scale = 1.0;
    /// Initialize the output layer to zero.
    bool zero_head = false;

    /// Desk-scale default for a given input raster.
    static NetSpec reference(int input_channels, int width, int height);
    /// Tiny instance used by gradient checks (well under 10^4 parameters).
    static NetSpec tiny(int input_channels, int width, int height);

    /// Checks shape arithmetic, the alternate-stage rule and block sizes.
    void validate() const;
    std::string to_json() const;
    static NetSpec from_json(const std::string& text);

    friend bool operator==(const NetSpec&, const NetSpec&) = default;
};

/// One named tensor inside a parameter store.
struct TensorInfo
{
    std::string name;
    std::vector<std::uint32_t> shape;
    std::size_t offset = 0;
    std::size_t size = 0;
    bool trainable = true;
    friend bool operator==(const TensorInfo&, const TensorInfo&) = default;
};

/**
 * Ordered store of named tensors, the learned parameters of one cascade
 * stage. All values live in one flat buffer so that optimizers and
 * gradient checks can treat them as a vector.
 */
struct RegressorParams
{
    NetSpec spec;
    int stage = 1;
    std::vector<TensorInfo> tensors;
    std::vector<double> values;

    const TensorInfo& tensor(const std::string& name) const;
    std::span<double> view(const std::string& name);
    std::span<const double> view(const std::string& name) const;

    friend bool operator==(const RegressorParams&, const RegressorParams&) = default;
};

/**
 * Parameter file layout (all integers little-endian):
 *
 *   char[8]  "KPLRPRM\0"
 *   u32      format version (1)
 *   i32      stage tag
 *   u32      length, then bytes: NetSpec as JSON
 *   u32      tensor count
 *   per tensor:
 *     u32 name length, name bytes, u8 trainable, u32 rank, u32 dims[rank],
 *     f64 values[prod(dims)] (IEEE-754 binary64, little-endian)
 */
void write_params(const RegressorParams& params, std::ostream& os);
RegressorParams read_params(std::istream& is);
void save_params(const RegressorParams& params, const std::filesystem::path& path);
RegressorParams load_params(const std::filesystem::path& path);

/// Allocator with 64-byte alignment. Eigen picks its vectorized code path
/// by pointer alignment, so buffers with a fixed alignment keep results
/// bit-identical from run to run.
template <class T>
struct AlignedAllocator
{
    using value_type = T;
    static constexpr std::align_val_t alignment{64};

    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept
    {
    }
    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }
    template <class U>
    friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) noexcept
    {
        return true;
    }
};

using AlignedVector = std::vector<double, AlignedAllocator<double>>;

/// Activation cache of one forward pass; reusable across calls.
struct Workspace
{
    std::vector<AlignedVector> nodes;
    std::vector<AlignedVector> pre_activation;
    std::vector<AlignedVector> columns;
    std::vector<AlignedVector> node_grads;
    /// Aligned copies of the parameters and of one sample's gradient.
    AlignedVector params;
    AlignedVector grad;
    AlignedVector column_grad;
};

/**
 * Reference forward/backward implementation for a NetSpec. The network is
 * stateless; parameters are passed in as a flat span laid out per
 * `layout()`.
 */
class Network
{
public:
    explicit Network(NetSpec spec);

    const NetSpec& spec() const { return spec_; }
    const std::vector<TensorInfo>& layout() const { return layout_; }
    std::size_t num_params() const { return num_params_; }

    /// Fresh parameters: He-normal convolutions, unit PReLU slope 0.25,
    /// zero biases, identity input standardization.
    RegressorParams initialize(std::uint64_t seed, int stage) const;

    /// Forward pass. Fills `ws` for a later backward call.
    void forward(std::span<const double> params, const RenderedInput& input, Workspace& ws,
                 std::span<double> output) const;

    /// Accumulates d loss / d params into `grad` given d loss / d output.
    void backward(std::span<const double> params, Workspace& ws, std::span<const double> grad_output,
                  std::span<double> grad) const;

private:
    struct Node
    {
        int channels = 0;
        int height = 0;
        int width = 0;
        std::size_t size() const { return static_cast<std::size_t>(channels) * height * width; }
    };
    struct Op
    {
        enum class Kind { conv, concat, dense } kind = Kind::conv;
        std::vector<int> inputs;
        int output = 0;
        ConvSpec conv;
        bool activate = true;
        std::size_t weight = 0;
        std::size_t bias = 0;
        std::size_t slope = 0;
        int column_slot = -1;
    };

    int add_conv(const std::string& name, int input, const ConvSpec& conv);
    int add_dense(const std::string& name, int input, int units, bool activate);
    std::size_t add_tensor(const std::string& name, std::vector<std::uint32_t> shape, bool trainable);

    NetSpec spec_;
    std::size_t input_mean_ = 0;
    std::size_t input_std_ = 0;
    std::vector<Node> nodes_;
    std::vector<Op> ops_;
    std::vector<TensorInfo> layout_;
    std::size_t num_params_ = 0;
    int num_column_slots_ = 0;
};

} /* namespace kepler */
