#pragma once

#include <span>
#include <vector>

#include "rq/core.hpp"

namespace rq {

/// Least-squares non-increasing fit (pool adjacent violators).
std::vector<double> pav_non_increasing(std::span<const double> values);

/// VMAF and bitrate both made non-increasing in CRF.
RateQualityCurve monotone_project(const RateQualityCurve& curve);

struct CrfDecision {
    double crf = 20.0;
    double vmaf = 0.0;     // predicted, at the returned grid CRF
    double bitrate = 0.0;  // predicted, at the returned grid CRF
    bool unreachable = false;     // target above the curve's best quality
    bool below_curve = false;     // target under the curve's worst quality
    bool all_worthwhile = false;  // slope policy: no knee found
    std::size_t index() const { return CrfGrid::index_of(crf); }
};

/// Largest CRF whose interpolated VMAF is >= target, snapped down to the grid.
CrfDecision crf_for_target_vmaf(const RateQualityCurve& curve, double target, bool project = true);

inline constexpr double kDefaultSlopeThreshold = 0.005;  // VMAF per kbps

/// Knee of the bitrate-VMAF curve: scanning from CRF 40 toward CRF 20, the first
/// grid point i+1 where (vmaf[i]-vmaf[i+1]) / (bitrate[i]-bitrate[i+1]) drops below
/// `threshold`. Zero-width bitrate steps are skipped.
CrfDecision crf_for_slope(const RateQualityCurve& curve, double threshold = kDefaultSlopeThreshold,
                          bool project = true);

}  // namespace rq
