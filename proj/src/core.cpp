#include "rq/core.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace rq {

double CrfGrid::crf_of(std::ptrdiff_t index) {
    if (index < 0 || index >= std::ptrdiff_t(kCount))
        throw BoundsError("grid index " + std::to_string(index) + " outside [0, " +
                          std::to_string(kCount) + ")");
    return double(kMinQuanta + index) / kQuantaPerUnit;
}

bool CrfGrid::in_range(double crf) noexcept {
    return std::isfinite(crf) && crf >= min_crf() - 1e-6 && crf <= max_crf() + 1e-6;
}

bool CrfGrid::on_grid(double crf) noexcept {
    if (!in_range(crf)) return false;
    const double q = crf * kQuantaPerUnit;
    return std::abs(q - std::round(q)) <= 1e-6 * kQuantaPerUnit;
}

std::size_t CrfGrid::index_of(double crf) {
    if (!on_grid(crf)) throw NotOnGridError("CRF " + std::to_string(crf) + " is not a grid point");
    return std::size_t(std::lround(crf * kQuantaPerUnit)) - kMinQuanta;
}

RateQualityCurve::RateQualityCurve()
    : vmaf_(CrfGrid::kCount, 0.0), bitrate_(CrfGrid::kCount, kBitrateFloorKbps) {}

RateQualityCurve::RateQualityCurve(std::vector<double> vmaf, std::vector<double> bitrate)
    : vmaf_(std::move(vmaf)), bitrate_(std::move(bitrate)) {
    if (vmaf_.size() != CrfGrid::kCount || bitrate_.size() != CrfGrid::kCount)
        throw ShapeError("curve needs " + std::to_string(CrfGrid::kCount) +
                         " points per channel, got " + std::to_string(vmaf_.size()) + "/" +
                         std::to_string(bitrate_.size()));
}

std::vector<double> RateQualityCurve::flatten() const {
    std::vector<double> out;
    out.reserve(kCurveWidth);
    out.insert(out.end(), vmaf_.begin(), vmaf_.end());
    out.insert(out.end(), bitrate_.begin(), bitrate_.end());
    return out;
}

RateQualityCurve RateQualityCurve::from_flat(std::span<const double> flat) {
    if (flat.size() != kCurveWidth)
        throw ShapeError("flat curve needs " + std::to_string(kCurveWidth) + " values, got " +
                         std::to_string(flat.size()));
    const auto mid = flat.begin() + CrfGrid::kCount;
    return {std::vector<double>(flat.begin(), mid), std::vector<double>(mid, flat.end())};
}

void AnchorPoint::validate() const {
    if (!CrfGrid::on_grid(crf))
        throw ConfigError("anchor CRF " + std::to_string(crf) + " is not on the 0.2 grid");
    if (!std::isfinite(bitrate) || bitrate <= 0.0)
        throw NumericError("anchor bitrate must be positive, got " + std::to_string(bitrate));
    if (!std::isfinite(vmaf) || vmaf < 0.0 || vmaf > 100.0)
        throw NumericError("anchor VMAF outside [0, 100]: " + std::to_string(vmaf));
}

std::vector<double> FeatureVector::concat(bool with_anchor) const {
    std::vector<double> out;
    out.reserve(size());
    out.insert(out.end(), codec.begin(), codec.end());
    out.insert(out.end(), content.begin(), content.end());
    if (with_anchor) out.insert(out.end(), anchor.begin(), anchor.end());
    return out;
}

std::vector<std::pair<double, double>> derive_rate_quality_pairs(const RateQualityCurve& curve) {
    std::vector<std::pair<double, double>> pairs;
    pairs.reserve(CrfGrid::kCount);
    for (std::size_t i = 0; i < CrfGrid::kCount; ++i)
        pairs.emplace_back(curve.bitrate()[i], curve.vmaf()[i]);
    return pairs;
}

RateQualityCurve clamp_curve(const RateQualityCurve& curve) {
    std::vector<double> v(curve.vmaf().begin(), curve.vmaf().end());
    std::vector<double> r(curve.bitrate().begin(), curve.bitrate().end());
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!std::isfinite(v[i]) || !std::isfinite(r[i]))
            throw NumericError("non-finite curve entry at grid index " + std::to_string(i));
        v[i] = std::clamp(v[i], 0.0, 100.0);
        r[i] = std::max(r[i], kBitrateFloorKbps);
    }
    return {std::move(v), std::move(r)};
}

}  // namespace rq
