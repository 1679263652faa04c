#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "rq/error.hpp"

namespace rq {

/// Discretized CRF axis. Points are stored as integer multiples of the step
/// quantum so 101 steps never accumulate floating-point drift.
class CrfGrid {
public:
    static constexpr int kQuantaPerUnit = 5;  // 1 / 0.2
    static constexpr int kMinQuanta = 100;    // 20.0
    static constexpr int kMaxQuanta = 200;    // 40.0
    static constexpr std::size_t kCount = kMaxQuanta - kMinQuanta + 1;

    static constexpr double min_crf() { return double(kMinQuanta) / kQuantaPerUnit; }
    static constexpr double max_crf() { return double(kMaxQuanta) / kQuantaPerUnit; }
    static constexpr double step() { return 1.0 / kQuantaPerUnit; }
    static constexpr std::size_t count() { return kCount; }

    /// CRF at grid index; throws BoundsError outside [0, count).
    static double crf_of(std::ptrdiff_t index);

    /// Exact inverse of crf_of. Throws NotOnGridError when `crf` is more than
    /// 1e-6 away from a grid point or outside [min_crf, max_crf].
    static std::size_t index_of(double crf);

    static bool on_grid(double crf) noexcept;
    static bool in_range(double crf) noexcept;
};

inline constexpr double kDefaultAnchorCrf = 30.4;
inline constexpr double kBitrateFloorKbps = 1e-3;

/// Paired CRF->VMAF and CRF->bitrate vectors over the 101-point grid.
class RateQualityCurve {
public:
    RateQualityCurve();
    RateQualityCurve(std::vector<double> vmaf, std::vector<double> bitrate);

    std::span<const double> vmaf() const noexcept { return vmaf_; }
    std::span<const double> bitrate() const noexcept { return bitrate_; }
    double vmaf_at(std::size_t i) const { return vmaf_.at(i); }
    double bitrate_at(std::size_t i) const { return bitrate_.at(i); }

    /// Flat layout used by the networks: 101 VMAF values then 101 bitrates.
    std::vector<double> flatten() const;
    static RateQualityCurve from_flat(std::span<const double> flat);

    friend bool operator==(const RateQualityCurve&, const RateQualityCurve&) = default;

private:
    std::vector<double> vmaf_;
    std::vector<double> bitrate_;
};

inline constexpr std::size_t kCurveWidth = 2 * CrfGrid::kCount;  // 202

struct AnchorPoint {
    double crf = kDefaultAnchorCrf;
    double bitrate = 0.0;  // kbps
    double vmaf = 0.0;

    std::size_t index() const { return CrfGrid::index_of(crf); }
    /// Throws ConfigError / NumericError when the invariants do not hold.
    void validate() const;
};

/// Feature segments of one video. `anchor` is empty when anchors are ablated.
struct FeatureVector {
    std::vector<double> codec;
    std::vector<double> content;
    std::vector<double> anchor;

    std::size_t size() const noexcept { return codec.size() + content.size() + anchor.size(); }
    /// codec ++ content ++ anchor (when `with_anchor`).
    std::vector<double> concat(bool with_anchor = true) const;
};

/// The (bitrate, vmaf) pairs in ascending-CRF order; pair i uses index i.
std::vector<std::pair<double, double>> derive_rate_quality_pairs(const RateQualityCurve& curve);

/// VMAF into [0, 100], bitrate floored at kBitrateFloorKbps. NumericError on non-finite input.
RateQualityCurve clamp_curve(const RateQualityCurve& curve);

}  // namespace rq
