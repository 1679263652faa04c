#pragma once

#include <array>
#include <filesystem>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rq/codec.hpp"
#include "rq/core.hpp"
#include "rq/ingest.hpp"

namespace rq {

inline constexpr std::size_t kCodecDim = 113;
inline constexpr std::size_t kContentDim = 65;
inline constexpr std::size_t kAnchorDim = 2;
inline constexpr std::size_t kCodecBlockDim = 56;  // per pre-encode

inline constexpr const char* kCodecSchemaTag = "codec-x264-v1";
inline constexpr const char* kContentSchemaTag = "content-v1";

/// Field names in vector order; sizes are kCodecDim / kContentDim.
std::vector<std::string> codec_feature_names();
std::vector<std::string> content_feature_names();

// ---------------------------------------------------------------------------
// Texture

/// Normalized grey-level co-occurrence matrix, row = reference level.
struct Glcm {
    int levels = 0;
    std::vector<double> p;  // levels * levels

    double at(int a, int b) const { return p[std::size_t(a) * levels + b]; }
};

struct GlcmOffset {
    int dx = 1;
    int dy = 0;
};

/// right, down, down-right, down-left
inline constexpr std::array<GlcmOffset, 4> kGlcmOffsets = {{{1, 0}, {0, 1}, {1, 1}, {-1, 1}}};

/// Quantizes samples to `levels` bins over [0, 255] (v * levels / 256) and counts
/// (reference, neighbour) pairs. `levels` must divide 256. Throws ShapeError when
/// the plane has no pair at this offset.
Glcm glcm(const LumaPlane& plane, GlcmOffset offset, int levels = 16);

struct GlcmStats {
    double contrast = 0.0;
    double energy = 0.0;
    double entropy = 0.0;  // bits; 0 log 0 = 0
    double homogeneity = 0.0;
    double correlation = 0.0;  // 0 when either marginal has zero spread
};

GlcmStats glcm_stats(const Glcm& m);

// ---------------------------------------------------------------------------
// Temporal

struct TemporalStats {
    double mean = 0.0;
    double variance = 0.0;
    double max = 0.0;
    double zero_fraction = 0.0;
    bool valid = false;  // false for a single-frame input (all fields zero)
};

/// Statistics of the mean absolute difference between consecutive sampled frames
/// (frames 0, stride, 2*stride, ...). A pair counts as zero-motion when MAD < 0.5.
TemporalStats temporal_stats(std::span<const LumaPlane> frames, int stride = 1);
TemporalStats temporal_stats(const VideoClip& clip, int stride = 1);

double mean_abs_difference(const LumaPlane& a, const LumaPlane& b);

// ---------------------------------------------------------------------------
// No-reference quality proxies

struct QualityConfig {
    double blur_ceiling = 100.0;
    double blockiness_ceiling = 100.0;
};

struct QualityProxies {
    double noise_sigma = 0.0;
    double blockiness = 1.0;
    double blur = 0.0;
};

/// Fast noise estimate: mean |residual| of the 3x3 Laplacian-difference mask,
/// scaled by sqrt(pi/2) / 6.
double estimate_noise_sigma(const LumaPlane& plane);
/// Mean |step| across 8-aligned boundaries over mean |step| elsewhere (0/0 := 1).
double blockiness(const LumaPlane& plane, double ceiling = 100.0);
/// Luma variance over Laplacian variance, capped at `ceiling` (also used for flat frames).
double blur_index(const LumaPlane& plane, double ceiling = 100.0);

QualityProxies quality_proxies(const LumaPlane& plane, const QualityConfig& cfg = {});
/// Averaged over the sampled frames of `clip`.
QualityProxies quality_proxies(const VideoClip& clip, const QualityConfig& cfg = {}, int max_frames = 30);

// ---------------------------------------------------------------------------
// Assembly

struct ContentConfig {
    int glcm_levels = 16;
    int max_sampled_frames = 30;
    QualityConfig quality;
};

/// Indices of the frames feature extraction looks at: uniform stride, at most `max_frames`.
std::vector<std::size_t> sample_frames(std::size_t frame_count, int max_frames);

/// 65 entries: per-frame means of the 27 base measures, their variances, then 11 globals.
std::vector<double> extract_content(const VideoClip& clip, const ContentConfig& cfg = {});

/// 113 entries from the CRF 18 (`low_crf`) and CRF 33 (`high_crf`) pre-encodes.
/// Throws SchemaError naming any missing mandatory field.
std::vector<double> assemble_codec_features(const EncoderStats& low_crf, const EncoderStats& high_crf);
/// One 56-entry pre-encode block.
std::vector<double> codec_block(const EncoderStats& stats);

inline constexpr double kLowPreEncodeCrf = 18.0;
inline constexpr double kHighPreEncodeCrf = 33.0;

/// Anchor measurement -> (AnchorPoint, [bitrate, vmaf]). Throws ConfigError when
/// the anchor CRF is off-grid or the result was measured elsewhere.
std::pair<AnchorPoint, std::vector<double>> assemble_anchor(const EncodeResult& result,
                                                            double anchor_crf = kDefaultAnchorCrf);

struct ExtractedVideo {
    FeatureVector features;
    AnchorPoint anchor;
};

/// Content features and the two pre-encodes run on a 360p copy of `clip` written
/// under `work_dir`; the anchor encode runs on `source` itself.
ExtractedVideo extract_video(CodecBackend& backend, const VideoClip& clip, const std::filesystem::path& source,
                             const std::string& id, const std::filesystem::path& work_dir,
                             double anchor_crf = kDefaultAnchorCrf, const ContentConfig& cfg = {});

}  // namespace rq
