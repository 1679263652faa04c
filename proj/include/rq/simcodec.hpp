#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rq/codec.hpp"
#include "rq/core.hpp"
#include "rq/pipeline.hpp"

namespace rq::sim {

inline constexpr std::size_t kLatentDim = 8;
inline constexpr double kDefaultFeatureNoise = 0.3;

/// Rate-quality parameters of one synthetic video.
struct CurveParams {
    double v_mid = 36.0;  // CRF where VMAF crosses 50, in [32, 44]
    double k = 0.3;       // logistic steepness, in [0.15, 0.45]
    double r20 = 4000.0;  // kbps at CRF 20, in [1000, 20000]
    double rho = 0.12;    // exponential decay per CRF unit, in [0.08, 0.20]
};

struct LatentVideo {
    std::uint64_t seed = 0;
    std::array<double, kLatentDim> z{};
    CurveParams theta;
};

/// Standard-normal latent drawn from `seed`, with theta derived from it.
LatentVideo make_latent(std::uint64_t seed);
/// Fixed affine map of z squashed into the parameter ranges.
CurveParams params_from_latent(const std::array<double, kLatentDim>& z);

double vmaf_gt(const CurveParams& theta, double crf);
double bitrate_gt(const CurveParams& theta, double crf);
/// Both closed forms evaluated on the 101 grid CRFs.
RateQualityCurve curve_gt(const CurveParams& theta);

/// Codec and content segments are fixed random linear maps of the latent observed
/// through shared noise (scale noise/6) plus per-entry noise (scale noise). The
/// anchor segment is the exact closed form at the anchor CRF.
FeatureVector synth_features(const LatentVideo& latent, double noise_sigma, double anchor_crf = kDefaultAnchorCrf);

/// Plausible x264-style summary stats for an encode at `crf`; deterministic in (seed, crf).
EncoderStats synth_encoder_stats(const LatentVideo& latent, double crf);

struct Sample {
    std::string id;  // "sim:<seed>"
    FeatureVector features;
    AnchorPoint anchor;
    RateQualityCurve truth;
};

struct Split {
    std::vector<Sample> train;
    std::vector<Sample> test;
};

/// Per-sample seed for position `index` of a dataset generated from `seed`.
std::uint64_t sample_seed(std::uint64_t seed, std::uint64_t index);

Sample synth_sample(std::uint64_t sample_seed, double noise_sigma, double anchor_crf = kDefaultAnchorCrf);
Split synth_dataset(std::size_t n_train, std::size_t n_test, std::uint64_t seed,
                    double noise_sigma = kDefaultFeatureNoise, double anchor_crf = kDefaultAnchorCrf);

/// Labeled feature-file records for `samples`.
Dataset to_dataset(std::span<const Sample> samples);

std::string sample_id(std::uint64_t sample_seed);
/// Inverse of sample_id; throws ConfigError for ids not produced by the simulator.
std::uint64_t seed_from_id(const std::string& id);

/// Encode-and-measure against the closed forms. `noise` adds seeded Gaussian
/// noise to VMAF (points) and bitrate (relative), deterministic per (video, crf).
class SimBackend final : public CodecBackend {
public:
    explicit SimBackend(double vmaf_noise = 0.0, double bitrate_rel_noise = 0.0)
        : vmaf_noise_(vmaf_noise), bitrate_rel_noise_(bitrate_rel_noise) {}
    std::string name() const override { return "simcodec"; }
    EncodeResult encode(const ClipRef& clip, double crf, bool want_stats) override;

private:
    double vmaf_noise_;
    double bitrate_rel_noise_;
};

}  // namespace rq::sim
