#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rq/codec.hpp"
#include "rq/config.hpp"
#include "rq/core.hpp"
#include "rq/nn.hpp"
#include "rq/strategy.hpp"

namespace rq {

enum class Ablation { kFull, kNoAnchorFeatures, kNoSuspension, kNoEnd2End };
enum class SuspensionMode { kAdditive, kMultiplicativeBitrate };

std::string to_string(Ablation a);
std::string to_string(SuspensionMode m);
Ablation parse_ablation(const std::string& s);
SuspensionMode parse_suspension_mode(const std::string& s);
inline constexpr Ablation kAllAblations[] = {Ablation::kFull, Ablation::kNoAnchorFeatures, Ablation::kNoSuspension,
                                             Ablation::kNoEnd2End};

struct TrainConfig {
    int epochs = 200;
    int batch_size = 64;
    nn::AdamConfig adam;
    bool cosine_decay = true;
    int hidden = 256;
    int residual_blocks = 2;
    int attention_reduction = 4;
    /// Zero the 2-pass head so training starts from the suspended curve.
    bool zero_init_residual_head = true;
};

struct PredictorConfig {
    double anchor_crf = kDefaultAnchorCrf;
    Ablation ablation = Ablation::kFull;
    SuspensionMode suspension = SuspensionMode::kAdditive;
    nn::LossConfig loss;
    TrainConfig train;

    bool uses_anchor_features() const { return ablation != Ablation::kNoAnchorFeatures; }
    bool uses_suspension() const { return ablation == Ablation::kFull || ablation == Ablation::kNoEnd2End; }

    void validate() const;
    KeyValueConfig to_kv() const;
    /// Unknown keys raise ConfigError.
    static PredictorConfig from_kv(const KeyValueConfig& kv);
    static std::vector<std::string> known_keys();
};

// ---------------------------------------------------------------------------
// Anchor suspension

/// Shift (or, for bitrate in multiplicative mode, scale) the curve so it passes
/// through the anchor. Throws NumericError when a multiplicative anchor sits on a
/// bitrate below kBitrateFloorKbps.
RateQualityCurve suspend(const RateQualityCurve& pred, const AnchorPoint& anchor, SuspensionMode mode);

/// Column-wise suspension of a 202 x batch matrix. `anchors` is 2 x batch
/// (bitrate, vmaf) and every column is pinned at grid index `index`.
nn::Matrix suspend(const nn::Matrix& pred, const nn::Matrix& anchors, std::size_t index, SuspensionMode mode);

/// Gradient w.r.t. the unsuspended prediction. `pred` is only read in multiplicative mode.
std::vector<double> suspend_backward(std::span<const double> upstream, std::span<const double> pred,
                                     const AnchorPoint& anchor, SuspensionMode mode);
nn::Matrix suspend_backward(const nn::Matrix& upstream, const nn::Matrix& pred, const nn::Matrix& anchors,
                            std::size_t index, SuspensionMode mode);

// ---------------------------------------------------------------------------
// Datasets

struct FeatureSchema {
    std::string codec_tag;
    std::size_t codec_dim = 0;
    std::string content_tag;
    std::size_t content_dim = 0;
    std::size_t anchor_dim = 2;

    static FeatureSchema standard();
    std::string tag() const;
    friend bool operator==(const FeatureSchema&, const FeatureSchema&) = default;
};

struct Record {
    std::string id;
    FeatureVector features;
    AnchorPoint anchor;
    std::optional<RateQualityCurve> truth;
};

struct Dataset {
    FeatureSchema schema = FeatureSchema::standard();
    std::vector<Record> records;

    bool labeled() const;
    /// Throws SchemaError when a record's segment sizes disagree with the schema.
    void validate() const;
};

inline constexpr int kFeatureFileVersion = 1;

/// Header line, then one tab-separated record per line:
/// id, codec, content, anchor segment, anchor (crf,bitrate,vmaf), labels or "-".
/// Segments are comma-separated shortest round-trip decimals.
void write_feature_file(const std::filesystem::path& path, const Dataset& data);
void write_feature_file(std::ostream& out, const Dataset& data);
/// Throws IoError carrying the 1-based file line of the first problem.
Dataset read_feature_file(const std::filesystem::path& path);
Dataset read_feature_file(std::istream& in);

// ---------------------------------------------------------------------------
// Model

struct ModelBundle {
    PredictorConfig config;
    FeatureSchema schema;
    nn::ModelParams net1;
    nn::ModelParams net2;
};

void write_bundle(const std::filesystem::path& path, const ModelBundle& bundle);
void write_bundle(std::ostream& out, const ModelBundle& bundle);
ModelBundle read_bundle(const std::filesystem::path& path);
ModelBundle read_bundle(std::istream& in);

/// Network input for one record: codec ++ content (++ anchor segment).
std::vector<double> model_input(const Record& r, const PredictorConfig& cfg);

/// 1-pass prediction, suspended when the configuration uses suspension.
std::vector<RateQualityCurve> predict_stage1(const ModelBundle& model, std::span<const Record> records);
/// Full three-stage prediction, clamped.
std::vector<RateQualityCurve> predict(const ModelBundle& model, std::span<const Record> records);
RateQualityCurve predict(const ModelBundle& model, const FeatureVector& features, const AnchorPoint& anchor);

// ---------------------------------------------------------------------------
// Training

struct EpochReport {
    int epoch = 0;  // 1-based within its phase
    std::string phase;
    double learning_rate = 0.0;
    double train_loss = 0.0;
    double train_vmaf_mae = 0.0;
    std::optional<double> test_vmaf_mae;
};

struct TrainingReport {
    std::vector<EpochReport> epochs;
    double seconds = 0.0;
};

using EpochCallback = std::function<void(const EpochReport&)>;

/// Untrained bundle: seeded network weights, bitrate outputs scaled by
/// 1/sqrt(lambda), the 1-pass head bias at the label mean and (by default) a zero
/// 2-pass head.
ModelBundle init_bundle(const Dataset& train_set, const PredictorConfig& config, std::uint64_t seed);

struct BatchGradients {
    double loss = 0.0;
    nn::Matrix pred;  // final output, unclamped
    nn::Gradients net1, net2;
};

/// One train-mode pass of net1 -> suspension -> net2 over a batch (`x` is D x B,
/// `anchors` 2 x B, `truth` 202 x B) with the curve loss backpropagated into both
/// networks. Running BN statistics are updated. When the output is not finite
/// only `pred` is filled.
BatchGradients end_to_end_gradients(ModelBundle& model, const nn::Matrix& x, const nn::Matrix& anchors,
                                    const nn::Matrix& truth);

/// Throws TrainingError (naming the epoch) when the loss stops being finite.
ModelBundle train(const Dataset& train_set, const PredictorConfig& config, std::uint64_t seed,
                  TrainingReport* report = nullptr, const Dataset* test_set = nullptr,
                  const EpochCallback& on_epoch = {});

// ---------------------------------------------------------------------------
// Dynamic anchor

struct RetargetResult {
    AnchorPoint anchor;
    RateQualityCurve curve;
    CrfDecision lookup;  // decision on the initial suspended curve
};

/// Look up the target on the 1-pass curve, measure one encode there, and rerun
/// suspension and the 2-pass network from that anchor. The final curve is
/// pinned at the measured point.
RetargetResult dynamic_anchor_retarget(const ModelBundle& model, const Record& record, double target_vmaf,
                                       CodecBackend& backend, const ClipRef& clip);

}  // namespace rq
