#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rq/core.hpp"

namespace rq::nn {

/// Batches are column-major with one sample per column (features x batch).
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline constexpr int kModelFormatVersion = 1;

/// input BN -> FC(hidden) + ReLU -> attention gate -> residual blocks -> FC head.
struct Architecture {
    int input_dim = 0;
    int hidden = 256;
    int residual_blocks = 2;
    int attention_reduction = 4;  // gate bottleneck = hidden / reduction
    int output_dim = static_cast<int>(kCurveWidth);
    double bn_eps = 1e-8;
    double bn_momentum = 0.1;

    int gate_dim() const { return std::max(1, hidden / attention_reduction); }
    /// Throws ConfigError on non-positive sizes or out-of-range BN settings.
    void validate() const;
    std::string describe() const;
    static Architecture parse(const std::string& text);
    friend bool operator==(const Architecture&, const Architecture&) = default;
};

struct ResidualBlock {
    Matrix w1;
    Vector b1;
    Matrix w2;
    Vector b2;
};

struct ModelParams {
    Architecture arch;
    Vector bn_gamma, bn_beta, bn_mean, bn_var;
    Matrix w_in;
    Vector b_in;
    Matrix w_gate1;
    Vector b_gate1;
    Matrix w_gate2;
    Vector b_gate2;
    std::vector<ResidualBlock> blocks;
    Matrix w_out;
    Vector b_out;
    /// Fixed per-output multiplier applied after the head (not trained).
    Vector out_scale;
    /// Bumped by every optimizer step; caches record it to detect staleness.
    std::uint64_t version = 0;

    /// All tensors zero with shapes from `arch`; running variance 1, scale 1.
    static ModelParams zeros(const Architecture& arch);
    /// Uniform(+-1/sqrt(fan_in)) for FC layers, BN scale 1 / shift 0.
    static ModelParams init(const Architecture& arch, std::uint64_t seed);

    /// Every tensor in descriptor order. Running stats and out_scale are
    /// listed but not trainable.
    struct View {
        const char* name;
        double* data;
        Eigen::Index size;
        bool trainable;
    };
    std::vector<View> views();
    std::vector<View> trainable_views();
    std::size_t trainable_count() const;

    /// Throws ShapeError / NumericError when the invariants do not hold.
    void validate() const;
    void touch() { ++version; }
};

enum class Mode { kTrain, kEval };

struct BlockCache {
    Matrix input, hidden_pre, hidden;
};

struct ForwardCache {
    std::uint64_t version = 0;
    bool valid = false;
    Matrix x, xhat;
    Vector inv_std;
    Matrix bn_out, fc_pre, fc_out;
    Matrix gate_hidden_pre, gate_hidden, gate;
    Matrix gated;
    std::vector<BlockCache> blocks;
    Matrix trunk;
};

/// Train mode normalizes with batch statistics and updates the running stats in
/// `params`; eval mode reads running stats only. `cache` is filled in train mode.
Matrix forward(ModelParams& params, const Matrix& x, Mode mode, ForwardCache* cache = nullptr);
Matrix forward_eval(const ModelParams& params, const Matrix& x);

struct Gradients {
    ModelParams params;  // same shapes; only trainable tensors are meaningful
    Matrix input;
};

/// Exact gradients of sum(upstream .* output) for the forward pass recorded in
/// `cache`. Throws StateError when the cache is missing or params changed since.
Gradients backward(const ModelParams& params, const ForwardCache& cache, const Matrix& upstream);

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    ModelParams m, v;
    std::int64_t step = 0;

    static AdamState for_params(const ModelParams& params);
};

/// One bias-corrected adaptive-moment update of the trainable tensors.
void adam_step(ModelParams& params, const ModelParams& grads, AdamState& state, const AdamConfig& cfg);

struct LossConfig {
    double lambda = 1e-4;
    /// Compare bitrates as natural logs (predictions floored at kBitrateFloorKbps)
    /// with weight 1 instead of raw kbps with weight lambda.
    bool log_domain = false;

    void validate() const;
};

struct LossResult {
    double value = 0.0;
    Matrix grad;  // d value / d pred, same shape as pred
};

/// mean over columns of sum (V - V*)^2 + lambda * sum (R - R*)^2. Rows 0..100
/// hold VMAF, rows 101..201 bitrate. Throws ShapeError / NumericError.
LossResult curve_loss(const Matrix& pred, const Matrix& truth, const LossConfig& cfg = {});
double curve_loss(std::span<const RateQualityCurve> pred, std::span<const RateQualityCurve> truth,
                const LossConfig& cfg = {});

Matrix to_matrix(std::span<const RateQualityCurve> curves);
std::vector<RateQualityCurve> from_matrix(const Matrix& m);

struct ModelHeader {
    std::string schema_tag;
    std::string flags;
};

/// Text header lines ending in "end\n", then little-endian f64 tensors in
/// descriptor order.
void write_model(std::ostream& out, const ModelParams& params, const ModelHeader& header);
/// Throws IoError / SchemaError on malformed input or when `expect` is given and differs.
ModelParams read_model(std::istream& in, ModelHeader* header_out = nullptr,
                       const std::optional<ModelHeader>& expect = std::nullopt);

}  // namespace rq::nn
