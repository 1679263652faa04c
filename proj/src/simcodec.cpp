#include "rq/simcodec.hpp"

#include <algorithm>
#include <cmath>

#include "rq/error.hpp"
#include "rq/features.hpp"
#include "rq/random.hpp"

namespace rq::sim {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

using Coeffs = std::array<double, kLatentDim>;

// Latent -> curve parameter directions. Quality midpoint and steepness are
// anti-correlated so that VMAF 91 lands inside [20, 40] for almost every video.
constexpr Coeffs kVmidDir = {0.9, 0.3, -0.2, 0.0, 0.4, 0.0, 0.3, 0.0};
constexpr double kVmidBias = 0.4;
constexpr Coeffs kSteepDir = {-0.5, 0.6, 0.0, 0.3, 0.0, 0.4, 0.0, 0.3};
constexpr Coeffs kRateDir = {-0.8, 0.0, 0.5, 0.3, 0.0, 0.0, 0.2, 0.4};
constexpr Coeffs kDecayDir = {0.0, -0.3, 0.4, 0.6, 0.2, 0.0, 0.0, 0.3};

constexpr std::uint64_t kMapSeed = 0x5eed'f00d'cafe'0001ULL;
constexpr std::uint64_t kNoiseStream = 0x6e6f'6973'6500'0000ULL;
constexpr std::uint64_t kEncodeStream = 0x656e'636f'6465'0000ULL;
// Shared (latent-level) observation noise relative to the per-entry noise.
constexpr double kSharedNoiseRatio = 1.0 / 6.0;

double dot(const Coeffs& a, const std::array<double, kLatentDim>& z) {
    double s = 0.0;
    for (std::size_t i = 0; i < kLatentDim; ++i) s += a[i] * z[i];
    return s;
}

struct FeatureMaps {
    std::vector<double> codec;    // kCodecDim x kLatentDim, row-major
    std::vector<double> content;  // kContentDim x kLatentDim
};

const FeatureMaps& feature_maps() {
    static const FeatureMaps maps = [] {
        FeatureMaps m;
        Rng rng(kMapSeed);
        const double scale = 1.0 / std::sqrt(double(kLatentDim));
        m.codec.resize(kCodecDim * kLatentDim);
        m.content.resize(kContentDim * kLatentDim);
        for (auto& v : m.codec) v = rng.normal() * scale;
        for (auto& v : m.content) v = rng.normal() * scale;
        return m;
    }();
    return maps;
}

}  // namespace

CurveParams params_from_latent(const std::array<double, kLatentDim>& z) {
    static const double ln_lo = std::log(1000.0), ln_hi = std::log(20000.0);
    CurveParams t;
    t.v_mid = 32.0 + 12.0 * sigmoid(dot(kVmidDir, z) + kVmidBias);
    t.k = 0.15 + 0.30 * sigmoid(dot(kSteepDir, z));
    t.r20 = std::exp(ln_lo + (ln_hi - ln_lo) * sigmoid(dot(kRateDir, z)));
    t.rho = 0.08 + 0.12 * sigmoid(dot(kDecayDir, z));
    return t;
}

LatentVideo make_latent(std::uint64_t seed) {
    LatentVideo v;
    v.seed = seed;
    Rng rng(seed);
    for (auto& x : v.z) x = rng.normal();
    v.theta = params_from_latent(v.z);
    return v;
}

double vmaf_gt(const CurveParams& theta, double crf) {
    return std::clamp(100.0 / (1.0 + std::exp(theta.k * (crf - theta.v_mid))), 0.0, 100.0);
}

double bitrate_gt(const CurveParams& theta, double crf) { return theta.r20 * std::exp(-theta.rho * (crf - 20.0)); }

RateQualityCurve curve_gt(const CurveParams& theta) {
    std::vector<double> v(CrfGrid::kCount), r(CrfGrid::kCount);
    for (std::size_t i = 0; i < CrfGrid::kCount; ++i) {
        const double crf = CrfGrid::crf_of(std::ptrdiff_t(i));
        v[i] = vmaf_gt(theta, crf);
        r[i] = bitrate_gt(theta, crf);
    }
    return {std::move(v), std::move(r)};
}

FeatureVector synth_features(const LatentVideo& latent, double noise_sigma, double anchor_crf) {
    if (noise_sigma < 0.0) throw ConfigError("noise sigma must be non-negative");
    if (!CrfGrid::on_grid(anchor_crf)) throw ConfigError("anchor CRF is not on the 0.2 grid");
    const auto& maps = feature_maps();
    Rng rng(latent.seed ^ kNoiseStream);
    std::array<double, kLatentDim> observed = latent.z;
    for (auto& x : observed) x += kSharedNoiseRatio * noise_sigma * rng.normal();

    auto project = [&](const std::vector<double>& map, std::size_t rows) {
        std::vector<double> out(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < kLatentDim; ++c) s += map[r * kLatentDim + c] * observed[c];
            out[r] = s + noise_sigma * rng.normal();
        }
        return out;
    };
    FeatureVector f;
    f.codec = project(maps.codec, kCodecDim);
    f.content = project(maps.content, kContentDim);
    f.anchor = {bitrate_gt(latent.theta, anchor_crf), vmaf_gt(latent.theta, anchor_crf)};
    return f;
}

EncoderStats synth_encoder_stats(const LatentVideo& latent, double crf) {
    const auto& z = latent.z;
    const auto& th = latent.theta;
    EncoderStats s;
    const int total = 60;
    const int n_i = 1 + int(3.0 * sigmoid(z[0]));
    const int n_b = int(std::lround(30.0 * sigmoid(z[1])));
    const int n_p = total - n_i - n_b;
    const double qp = 12.0 + 0.9 * crf + 0.5 * z[2];
    s.frames[kFrameI] = {n_i, qp - 3.0, 0.0};
    s.frames[kFrameP] = {n_p, qp, 0.0};
    s.frames[kFrameB] = {n_b, qp + 2.0, 0.0};

    // 360p pre-encode: roughly a quarter of the full-resolution rate over a 2 s clip.
    s.bitrate_kbps = 0.25 * bitrate_gt(th, crf);
    const double total_bytes = s.bitrate_kbps * 1000.0 / 8.0 * 2.0;
    const double weight = 6.0 * n_i + 2.0 * n_p + 1.0 * n_b;
    s.frames[kFrameI].avg_size_bytes = total_bytes * 6.0 / weight;
    s.frames[kFrameP].avg_size_bytes = total_bytes * 2.0 / weight;
    s.frames[kFrameB].avg_size_bytes = total_bytes * 1.0 / weight;

    s.quality = vmaf_gt(th, std::min(crf + 2.0, 51.0));
    s.psnr_mean_y = 28.0 + 0.15 * *s.quality + 0.3 * z[3];
    s.psnr_global = *s.psnr_mean_y - 0.4;

    const double intra = 0.2 + 0.5 * sigmoid(z[4]);
    const double skip = std::clamp(0.1 + 0.02 * (crf - 18.0) + 0.1 * sigmoid(z[5]), 0.0, 0.6);
    const double inter = 1.0 - skip;
    s.mb_i = std::array<double, 3>{0.5 * intra + 0.2, 0.3, 0.5 - 0.5 * intra};
    const double p_intra = 0.1 * intra;
    const double p_inter = inter - p_intra;
    s.mb_p = std::array<double, 9>{p_intra * 0.4, p_intra * 0.4, p_intra * 0.2, p_inter * 0.55, p_inter * 0.2,
                                   p_inter * 0.15, p_inter * 0.06, p_inter * 0.04, skip};
    const double b_skip = std::min(0.9, skip * 1.4);
    const double b_intra = 0.02 * intra;
    const double b_rest = 1.0 - b_skip - b_intra;
    s.mb_b = std::array<double, 8>{b_intra * 0.5, b_intra * 0.3, b_intra * 0.2, b_rest * 0.6,
                                   b_rest * 0.15, b_rest * 0.1, b_rest * 0.15, b_skip};
    s.b_ref_direction = std::array<double, 2>{0.4 + 0.1 * sigmoid(z[6]), 0.35};
    s.mv_magnitude = std::array<double, 2>{2.0 + 4.0 * sigmoid(z[7]), 1.0 + 8.0 * sigmoid(z[7])};
    s.transform_8x8 = std::array<double, 2>{0.3 + 0.4 * intra, 0.5};
    s.coded_blocks = std::array<double, 6>{0.6, 0.4, 0.2, 0.3 * inter, 0.1, 0.05};
    s.i16_modes = std::array<double, 4>{0.25 + 0.1 * sigmoid(z[0]), 0.25, 0.3, 0.2 - 0.1 * sigmoid(z[0])};
    return s;
}

std::uint64_t sample_seed(std::uint64_t seed, std::uint64_t index) {
    return splitmix64(splitmix64(seed) ^ (index * 0x2545f4914f6cdd1dULL + 1));
}

std::string sample_id(std::uint64_t s) { return "sim:" + std::to_string(s); }

std::uint64_t seed_from_id(const std::string& id) {
    if (id.rfind("sim:", 0) != 0) throw ConfigError("not a simulated video id: " + id);
    try {
        std::size_t used = 0;
        const auto v = std::stoull(id.substr(4), &used);
        if (used + 4 != id.size()) throw std::invalid_argument(id);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("not a simulated video id: " + id);
    }
}

Sample synth_sample(std::uint64_t s, double noise_sigma, double anchor_crf) {
    const auto latent = make_latent(s);
    Sample out;
    out.id = sample_id(s);
    out.features = synth_features(latent, noise_sigma, anchor_crf);
    out.anchor = {anchor_crf, out.features.anchor[0], out.features.anchor[1]};
    out.truth = curve_gt(latent.theta);
    return out;
}

Split synth_dataset(std::size_t n_train, std::size_t n_test, std::uint64_t seed, double noise_sigma,
                    double anchor_crf) {
    if (n_train < 1 || n_test < 1) throw ConfigError("dataset needs at least one train and one test sample");
    Split split;
    split.train.reserve(n_train);
    split.test.reserve(n_test);
    for (std::size_t i = 0; i < n_train + n_test; ++i) {
        auto sample = synth_sample(sample_seed(seed, i), noise_sigma, anchor_crf);
        (i < n_train ? split.train : split.test).push_back(std::move(sample));
    }
    return split;
}

Dataset to_dataset(std::span<const Sample> samples) {
    Dataset d;
    d.records.reserve(samples.size());
    for (const auto& s : samples) d.records.push_back({s.id, s.features, s.anchor, s.truth});
    return d;
}

EncodeResult SimBackend::encode(const ClipRef& clip, double crf, bool want_stats) {
    const auto latent = make_latent(seed_from_id(clip.id));
    EncodeResult r;
    r.crf = crf;
    r.vmaf = vmaf_gt(latent.theta, crf);
    r.bitrate = bitrate_gt(latent.theta, crf);
    if (vmaf_noise_ > 0.0 || bitrate_rel_noise_ > 0.0) {
        Rng rng(latent.seed ^ kEncodeStream ^ std::uint64_t(std::llround(crf * 1000.0)));
        r.vmaf = std::clamp(r.vmaf + vmaf_noise_ * rng.normal(), 0.0, 100.0);
        r.bitrate = std::max(kBitrateFloorKbps, r.bitrate * (1.0 + bitrate_rel_noise_ * rng.normal()));
    }
    if (want_stats) r.stats = synth_encoder_stats(latent, crf);
    return r;
}

}  // namespace rq::sim
