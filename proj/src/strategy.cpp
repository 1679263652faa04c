#include "rq/strategy.hpp"

#include <cmath>

#include "rq/error.hpp"

namespace rq {

std::vector<double> pav_non_increasing(std::span<const double> values) {
    struct Pool {
        double sum;
        std::size_t count;
        double mean() const { return sum / double(count); }
    };
    std::vector<Pool> pools;
    pools.reserve(values.size());
    for (double v : values) {
        pools.push_back({v, 1});
        while (pools.size() > 1 && pools[pools.size() - 2].mean() < pools.back().mean()) {
            auto last = pools.back();
            pools.pop_back();
            pools.back().sum += last.sum;
            pools.back().count += last.count;
        }
    }
    std::vector<double> out;
    out.reserve(values.size());
    for (const auto& p : pools) out.insert(out.end(), p.count, p.mean());
    return out;
}

RateQualityCurve monotone_project(const RateQualityCurve& curve) {
    return {pav_non_increasing(curve.vmaf()), pav_non_increasing(curve.bitrate())};
}

namespace {

CrfDecision at_index(const RateQualityCurve& c, std::size_t i) {
    CrfDecision d;
    d.crf = CrfGrid::crf_of(std::ptrdiff_t(i));
    d.vmaf = c.vmaf_at(i);
    d.bitrate = c.bitrate_at(i);
    return d;
}

}  // namespace

CrfDecision crf_for_target_vmaf(const RateQualityCurve& curve, double target, bool project) {
    if (!std::isfinite(target)) throw NumericError("target VMAF must be finite");
    const RateQualityCurve c = project ? monotone_project(curve) : curve;
    const auto v = c.vmaf();
    const std::size_t last = v.size() - 1;
    // On a non-increasing curve the qualifying indices form a prefix.
    std::ptrdiff_t best = -1;
    for (std::size_t i = 0; i <= last; ++i)
        if (v[i] >= target) best = std::ptrdiff_t(i);
    if (best < 0) {
        auto d = at_index(c, 0);
        d.unreachable = true;
        return d;
    }
    if (std::size_t(best) == last) {
        auto d = at_index(c, last);
        d.below_curve = v[last] > target;
        return d;
    }
    // The interpolated crossing lies in [best, best + 1); snapping down lands on best.
    return at_index(c, std::size_t(best));
}

CrfDecision crf_for_slope(const RateQualityCurve& curve, double threshold, bool project) {
    if (!(threshold > 0.0)) throw ConfigError("slope threshold must be positive");
    const RateQualityCurve c = project ? monotone_project(curve) : curve;
    const auto v = c.vmaf();
    const auto r = c.bitrate();
    for (std::size_t i = v.size() - 1; i-- > 0;) {
        const double dr = r[i] - r[i + 1];
        if (dr == 0.0) continue;
        const double slope = (v[i] - v[i + 1]) / dr;
        if (slope < threshold) return at_index(c, i + 1);
    }
    auto d = at_index(c, 0);
    d.all_worthwhile = true;
    return d;
}

}  // namespace rq
