#include "rq/features.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numbers>
#include <numeric>

#include "rq/error.hpp"

namespace rq {

// ---------------------------------------------------------------------------
// Schemas

namespace {

constexpr std::array<const char*, 5> kGlcmStatNames = {"contrast", "energy", "entropy", "homogeneity",
                                                       "correlation"};
constexpr std::array<const char*, 4> kOffsetNames = {"right", "down", "downright", "downleft"};
constexpr std::array<const char*, 4> kTemporalNames = {"mad_mean", "mad_var", "mad_max", "zero_motion"};
constexpr std::array<const char*, 3> kQualityNames = {"noise_sigma", "blockiness", "blur"};
constexpr std::array<const char*, 11> kGlobalNames = {
    "luma_mean", "luma_var", "luma_entropy", "row_grad_energy", "col_grad_energy", "frame_rate",
    "duration_s", "width", "height", "pixel_count", "sampled_frames"};

constexpr std::size_t kBaseMeasures = 27;

std::vector<std::string> base_measure_names() {
    std::vector<std::string> names;
    for (const auto* o : kOffsetNames)
        for (const auto* s : kGlcmStatNames) names.push_back(std::string("glcm_") + o + "_" + s);
    for (const auto* t : kTemporalNames) names.emplace_back(t);
    for (const auto* q : kQualityNames) names.emplace_back(q);
    return names;
}

std::vector<std::string> codec_block_names() {
    std::vector<std::string> n = {"prop_I", "prop_P", "prop_B", "mean_qp", "qp_I", "qp_P", "qp_B",
                                  "psnr_y", "psnr_global", "bitrate_kbps", "log_bitrate", "quality",
                                  "size_I", "size_P", "size_B", "bits_I", "bits_P", "bits_B"};
    for (auto b : kPartitionBins) n.push_back("part_" + std::string(b));
    for (const char* g : {"mode", "pmode", "bmode"})
        for (const char* m : {"intra", "inter", "skip"}) n.push_back(std::string(g) + "_" + m);
    for (const char* s : {"mv_mean", "mv_var", "t8x8_intra", "t8x8_inter", "cbp_intra_y", "cbp_intra_uvdc",
                          "cbp_intra_uvac", "cbp_inter_y", "cbp_inter_uvdc", "cbp_inter_uvac", "i16_v", "i16_h",
                          "i16_dc", "i16_p", "bref_l0", "bref_l1"})
        n.emplace_back(s);
    return n;
}

}  // namespace

std::vector<std::string> content_feature_names() {
    const auto base = base_measure_names();
    std::vector<std::string> names;
    for (const auto& b : base) names.push_back(b + "_mean");
    for (const auto& b : base) names.push_back(b + "_var");
    for (const auto* g : kGlobalNames) names.emplace_back(g);
    return names;
}

std::vector<std::string> codec_feature_names() {
    const auto block = codec_block_names();
    std::vector<std::string> names;
    for (const char* prefix : {"crf18_", "crf33_"})
        for (const auto& b : block) names.push_back(prefix + b);
    names.emplace_back("log_bitrate_ratio");
    return names;
}

// ---------------------------------------------------------------------------
// Texture

Glcm glcm(const LumaPlane& plane, GlcmOffset offset, int levels) {
    if (levels < 2 || levels > 256 || 256 % levels != 0)
        throw ShapeError("GLCM levels must divide 256, got " + std::to_string(levels));
    const int x0 = std::max(0, -offset.dx), x1 = plane.width - std::max(0, offset.dx);
    const int y0 = std::max(0, -offset.dy), y1 = plane.height - std::max(0, offset.dy);
    if (x1 <= x0 || y1 <= y0) throw ShapeError("empty co-occurrence matrix: plane smaller than offset span");

    const int shift = int(std::log2(256 / levels));
    std::vector<std::uint64_t> counts(std::size_t(levels) * levels, 0);
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
            const int a = plane.at(x, y) >> shift;
            const int b = plane.at(x + offset.dx, y + offset.dy) >> shift;
            ++counts[std::size_t(a) * levels + b];
        }
    const double total = double(x1 - x0) * double(y1 - y0);
    Glcm m{levels, std::vector<double>(counts.size())};
    for (std::size_t i = 0; i < counts.size(); ++i) m.p[i] = double(counts[i]) / total;
    return m;
}

GlcmStats glcm_stats(const Glcm& m) {
    const int n = m.levels;
    double mu_a = 0.0, mu_b = 0.0;
    for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b) {
            mu_a += a * m.at(a, b);
            mu_b += b * m.at(a, b);
        }
    GlcmStats s;
    double var_a = 0.0, var_b = 0.0, cov = 0.0;
    for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b) {
            const double p = m.at(a, b);
            const int d = a - b;
            s.contrast += p * d * d;
            s.energy += p * p;
            if (p > 0.0) s.entropy -= p * std::log2(p);
            s.homogeneity += p / (1.0 + std::abs(d));
            var_a += (a - mu_a) * (a - mu_a) * p;
            var_b += (b - mu_b) * (b - mu_b) * p;
            cov += (a - mu_a) * (b - mu_b) * p;
        }
    const double sa = std::sqrt(var_a), sb = std::sqrt(var_b);
    s.correlation = (sa > 1e-12 && sb > 1e-12) ? cov / (sa * sb) : 0.0;
    return s;
}

// ---------------------------------------------------------------------------
// Temporal

double mean_abs_difference(const LumaPlane& a, const LumaPlane& b) {
    if (a.samples.size() != b.samples.size() || a.samples.empty())
        throw ShapeError("frame size mismatch in frame difference");
    std::uint64_t acc = 0;
    for (std::size_t i = 0; i < a.samples.size(); ++i) acc += std::uint64_t(std::abs(int(a.samples[i]) - int(b.samples[i])));
    return double(acc) / double(a.samples.size());
}

TemporalStats temporal_stats(std::span<const LumaPlane> frames, int stride) {
    if (stride < 1) throw ShapeError("temporal stride must be >= 1");
    TemporalStats t;
    std::vector<double> mads;
    for (std::size_t i = 0; i + std::size_t(stride) < frames.size(); i += std::size_t(stride))
        mads.push_back(mean_abs_difference(frames[i], frames[i + std::size_t(stride)]));
    if (mads.empty()) return t;
    t.valid = true;
    const double n = double(mads.size());
    t.mean = std::accumulate(mads.begin(), mads.end(), 0.0) / n;
    for (double m : mads) t.variance += (m - t.mean) * (m - t.mean);
    t.variance /= n;
    t.max = *std::max_element(mads.begin(), mads.end());
    t.zero_fraction = double(std::count_if(mads.begin(), mads.end(), [](double m) { return m < 0.5; })) / n;
    return t;
}

TemporalStats temporal_stats(const VideoClip& clip, int stride) {
    return temporal_stats(std::span<const LumaPlane>(clip.frames), stride);
}

// ---------------------------------------------------------------------------
// Quality proxies

double estimate_noise_sigma(const LumaPlane& p) {
    if (p.width < 3 || p.height < 3) return 0.0;
    double acc = 0.0;
    for (int y = 1; y + 1 < p.height; ++y)
        for (int x = 1; x + 1 < p.width; ++x) {
            const int r = p.at(x - 1, y - 1) - 2 * p.at(x, y - 1) + p.at(x + 1, y - 1) - 2 * p.at(x - 1, y) +
                          4 * p.at(x, y) - 2 * p.at(x + 1, y) + p.at(x - 1, y + 1) - 2 * p.at(x, y + 1) +
                          p.at(x + 1, y + 1);
            acc += std::abs(r);
        }
    const double n = double(p.width - 2) * double(p.height - 2);
    return std::sqrt(std::numbers::pi / 2.0) / 6.0 * acc / n;
}

double blockiness(const LumaPlane& p, double ceiling) {
    double on_sum = 0.0, off_sum = 0.0;
    std::size_t on_n = 0, off_n = 0;
    for (int y = 0; y < p.height; ++y)
        for (int x = 1; x < p.width; ++x) {
            const double d = std::abs(int(p.at(x, y)) - int(p.at(x - 1, y)));
            if (x % 8 == 0) on_sum += d, ++on_n;
            else off_sum += d, ++off_n;
        }
    for (int y = 1; y < p.height; ++y)
        for (int x = 0; x < p.width; ++x) {
            const double d = std::abs(int(p.at(x, y)) - int(p.at(x, y - 1)));
            if (y % 8 == 0) on_sum += d, ++on_n;
            else off_sum += d, ++off_n;
        }
    if (on_n == 0 || off_n == 0) return 1.0;
    const double on = on_sum / double(on_n), off = off_sum / double(off_n);
    if (off == 0.0) return on == 0.0 ? 1.0 : ceiling;
    return std::min(on / off, ceiling);
}

namespace {

double plane_variance(const LumaPlane& p, double* mean_out = nullptr) {
    double s = 0.0, s2 = 0.0;
    for (auto v : p.samples) {
        s += v;
        s2 += double(v) * v;
    }
    const double n = double(p.samples.size());
    const double mean = s / n;
    if (mean_out) *mean_out = mean;
    return std::max(0.0, s2 / n - mean * mean);
}

}  // namespace

double blur_index(const LumaPlane& p, double ceiling) {
    const double luma_var = plane_variance(p);
    if (luma_var <= 0.0 || p.width < 3 || p.height < 3) return ceiling;
    double s = 0.0, s2 = 0.0;
    for (int y = 1; y + 1 < p.height; ++y)
        for (int x = 1; x + 1 < p.width; ++x) {
            const double l = p.at(x - 1, y) + p.at(x + 1, y) + p.at(x, y - 1) + p.at(x, y + 1) - 4.0 * p.at(x, y);
            s += l;
            s2 += l * l;
        }
    const double n = double(p.width - 2) * double(p.height - 2);
    const double lap_var = s2 / n - (s / n) * (s / n);
    if (lap_var <= 0.0) return ceiling;
    return std::min(luma_var / lap_var, ceiling);
}

QualityProxies quality_proxies(const LumaPlane& plane, const QualityConfig& cfg) {
    return {estimate_noise_sigma(plane), blockiness(plane, cfg.blockiness_ceiling),
            blur_index(plane, cfg.blur_ceiling)};
}

QualityProxies quality_proxies(const VideoClip& clip, const QualityConfig& cfg, int max_frames) {
    if (clip.frames.empty()) throw ShapeError("quality proxies need at least one frame");
    const auto idx = sample_frames(clip.frame_count(), max_frames);
    QualityProxies acc{0.0, 0.0, 0.0};
    for (auto i : idx) {
        const auto q = quality_proxies(clip.frames[i], cfg);
        acc.noise_sigma += q.noise_sigma;
        acc.blockiness += q.blockiness;
        acc.blur += q.blur;
    }
    const double n = double(idx.size());
    return {acc.noise_sigma / n, acc.blockiness / n, acc.blur / n};
}

// ---------------------------------------------------------------------------
// Content assembly

std::vector<std::size_t> sample_frames(std::size_t frame_count, int max_frames) {
    if (max_frames < 1) throw ShapeError("max_sampled_frames must be >= 1");
    const std::size_t stride = std::max<std::size_t>(1, (frame_count + std::size_t(max_frames) - 1) / std::size_t(max_frames));
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < frame_count; i += stride) idx.push_back(i);
    return idx;
}

namespace {

struct FrameGlobals {
    double mean = 0.0, var = 0.0, entropy = 0.0, row_grad = 0.0, col_grad = 0.0;
};

FrameGlobals frame_globals(const LumaPlane& p) {
    FrameGlobals g;
    g.var = plane_variance(p, &g.mean);
    std::array<std::size_t, 256> hist{};
    for (auto v : p.samples) ++hist[v];
    const double n = double(p.samples.size());
    for (auto h : hist)
        if (h) g.entropy -= (double(h) / n) * std::log2(double(h) / n);
    double rg = 0.0, cg = 0.0;
    for (int y = 0; y < p.height; ++y)
        for (int x = 1; x < p.width; ++x) {
            const double d = double(p.at(x, y)) - p.at(x - 1, y);
            rg += d * d;
        }
    for (int y = 1; y < p.height; ++y)
        for (int x = 0; x < p.width; ++x) {
            const double d = double(p.at(x, y)) - p.at(x, y - 1);
            cg += d * d;
        }
    g.row_grad = p.width > 1 ? rg / (double(p.width - 1) * p.height) : 0.0;
    g.col_grad = p.height > 1 ? cg / (double(p.height - 1) * p.width) : 0.0;
    return g;
}

}  // namespace

std::vector<double> extract_content(const VideoClip& clip, const ContentConfig& cfg) {
    clip.validate();
    const std::size_t n = clip.frame_count();
    const auto idx = sample_frames(n, cfg.max_sampled_frames);
    const std::size_t stride = idx.size() > 1 ? idx[1] - idx[0] : std::max<std::size_t>(1, n);

    std::vector<std::array<double, kBaseMeasures>> per_frame;
    per_frame.reserve(idx.size());
    FrameGlobals globals;
    for (auto i : idx) {
        const auto& plane = clip.frames[i];
        std::array<double, kBaseMeasures> m{};
        std::size_t k = 0;
        for (const auto& off : kGlcmOffsets) {
            const auto s = glcm_stats(glcm(plane, off, cfg.glcm_levels));
            m[k++] = s.contrast;
            m[k++] = s.energy;
            m[k++] = s.entropy;
            m[k++] = s.homogeneity;
            m[k++] = s.correlation;
        }
        // Consecutive-frame motion over the stretch this sample stands for.
        std::size_t lo = i, hi = std::min(n - 1, i + stride);
        if (hi == lo && lo > 0) lo = hi - 1;
        const auto t = temporal_stats(std::span<const LumaPlane>(clip.frames).subspan(lo, hi - lo + 1), 1);
        m[k++] = t.mean;
        m[k++] = t.variance;
        m[k++] = t.max;
        m[k++] = t.zero_fraction;
        const auto q = quality_proxies(plane, cfg.quality);
        m[k++] = q.noise_sigma;
        m[k++] = q.blockiness;
        m[k++] = q.blur;
        per_frame.push_back(m);

        const auto g = frame_globals(plane);
        globals.mean += g.mean;
        globals.var += g.var;
        globals.entropy += g.entropy;
        globals.row_grad += g.row_grad;
        globals.col_grad += g.col_grad;
    }

    const double cnt = double(per_frame.size());
    std::vector<double> out(kContentDim, 0.0);
    for (std::size_t k = 0; k < kBaseMeasures; ++k) {
        double mean = 0.0;
        for (const auto& m : per_frame) mean += m[k];
        mean /= cnt;
        double var = 0.0;
        for (const auto& m : per_frame) var += (m[k] - mean) * (m[k] - mean);
        out[k] = mean;
        out[kBaseMeasures + k] = var / cnt;
    }
    std::size_t g = 2 * kBaseMeasures;
    out[g++] = globals.mean / cnt;
    out[g++] = globals.var / cnt;
    out[g++] = globals.entropy / cnt;
    out[g++] = globals.row_grad / cnt;
    out[g++] = globals.col_grad / cnt;
    out[g++] = clip.frame_rate.value();
    out[g++] = clip.duration_seconds();
    out[g++] = clip.width;
    out[g++] = clip.height;
    out[g++] = double(clip.width) * clip.height;
    out[g++] = cnt;
    for (double v : out)
        if (!std::isfinite(v)) throw NumericError("non-finite content feature");
    return out;
}

// ---------------------------------------------------------------------------
// Codec assembly

namespace {

template <std::size_t N>
void check_percent_group(const std::optional<std::array<double, N>>& group, const char* name) {
    if (!group) return;
    const double s = std::accumulate(group->begin(), group->end(), 0.0);
    if (s < 0.99 || s > 1.01)
        throw SchemaError(std::string("proportion group '") + name + "' sums to " + std::to_string(s));
}

void put(std::vector<double>& out, const std::optional<double>& v) { out.push_back(v.value_or(0.0)); }

template <std::size_t N>
void put(std::vector<double>& out, const std::optional<std::array<double, N>>& v) {
    for (std::size_t i = 0; i < N; ++i) out.push_back(v ? (*v)[i] : 0.0);
}

template <std::size_t N>
void put(std::vector<double>& out, const std::array<double, N>& v) {
    out.insert(out.end(), v.begin(), v.end());
}

}  // namespace

std::vector<double> codec_block(const EncoderStats& s) {
    if (s.total_frames() < 1) throw SchemaError("encoder stats missing field 'frame_counts'");
    if (!(s.bitrate_kbps > 0.0)) throw SchemaError("encoder stats missing field 'bitrate_kbps'");
    if (!s.quality) throw SchemaError("encoder stats missing field 'quality'");
    check_percent_group(s.mb_i, "mb_i");
    check_percent_group(s.mb_p, "mb_p");
    check_percent_group(s.mb_b, "mb_b");
    check_percent_group(s.i16_modes, "i16_modes");
    const auto hist = s.partition_histogram();
    if (hist.empty()) throw SchemaError("encoder stats missing field 'partition_histogram'");
    const auto modes = s.mode_proportions();
    if (!modes) throw SchemaError("encoder stats missing field 'mode_proportions'");
    const auto bits = s.bits_share();
    if (bits[0] + bits[1] + bits[2] <= 0.0) throw SchemaError("encoder stats missing field 'avg_size_bytes'");

    std::vector<double> out;
    out.reserve(kCodecBlockDim);
    put(out, s.frame_proportions());
    out.push_back(s.mean_qp());
    for (const auto& f : s.frames) out.push_back(f.avg_qp);
    put(out, s.psnr_mean_y);
    put(out, s.psnr_global);
    out.push_back(s.bitrate_kbps);
    out.push_back(std::log1p(s.bitrate_kbps));
    out.push_back(*s.quality);
    for (const auto& f : s.frames) out.push_back(f.avg_size_bytes);
    put(out, bits);
    out.insert(out.end(), hist.begin(), hist.end());
    put(out, *modes);
    put(out, s.p_modes());
    put(out, s.b_modes());
    put(out, s.mv_magnitude);
    put(out, s.transform_8x8);
    put(out, s.coded_blocks);
    if (s.i16_modes) {
        const auto& m = *s.i16_modes;
        const double t = m[0] + m[1] + m[2] + m[3];
        for (double v : m) out.push_back(v / t);
    } else {
        put(out, s.i16_modes);
    }
    put(out, s.b_ref_direction);
    if (out.size() != kCodecBlockDim) throw SchemaError("codec block layout drifted from schema");
    return out;
}

std::vector<double> assemble_codec_features(const EncoderStats& low_crf, const EncoderStats& high_crf) {
    auto out = codec_block(low_crf);
    const auto high = codec_block(high_crf);
    out.insert(out.end(), high.begin(), high.end());
    out.push_back(std::log(low_crf.bitrate_kbps / high_crf.bitrate_kbps));
    for (double v : out)
        if (!std::isfinite(v)) throw NumericError("non-finite codec feature");
    return out;
}

std::pair<AnchorPoint, std::vector<double>> assemble_anchor(const EncodeResult& result, double anchor_crf) {
    if (!CrfGrid::on_grid(anchor_crf))
        throw ConfigError("anchor CRF " + std::to_string(anchor_crf) + " is not on the 0.2 grid");
    if (std::abs(result.crf - anchor_crf) > 1e-6)
        throw ConfigError("anchor measurement taken at CRF " + std::to_string(result.crf) + ", expected " +
                          std::to_string(anchor_crf));
    AnchorPoint a{anchor_crf, result.bitrate, result.vmaf};
    a.validate();
    return {a, {a.bitrate, a.vmaf}};
}

ExtractedVideo extract_video(CodecBackend& backend, const VideoClip& clip, const std::filesystem::path& source,
                             const std::string& id, const std::filesystem::path& work_dir, double anchor_crf,
                             const ContentConfig& cfg) {
    clip.validate();
    std::filesystem::create_directories(work_dir);
    const VideoClip small = downsample_to_360p(clip);
    std::string stem = id;
    for (char& c : stem)
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_') c = '_';
    const auto small_path = work_dir / (stem + "_360p.y4m");
    write_y4m(small_path, small);

    ClipRef small_ref{id + "@360p", small_path, small.frame_count(), small.frame_rate};
    ClipRef source_ref{id, source, clip.frame_count(), clip.frame_rate};
    const auto low = encode_measure(backend, small_ref, kLowPreEncodeCrf, true, 0.0, 51.0);
    const auto high = encode_measure(backend, small_ref, kHighPreEncodeCrf, true, 0.0, 51.0);
    if (!low.stats || !high.stats) throw SchemaError("pre-encode returned no encoder statistics");
    const auto anchor = encode_measure(backend, source_ref, anchor_crf);

    ExtractedVideo out;
    out.features.codec = assemble_codec_features(*low.stats, *high.stats);
    out.features.content = extract_content(small, cfg);
    auto [point, segment] = assemble_anchor(anchor, anchor_crf);
    out.anchor = point;
    out.features.anchor = std::move(segment);
    return out;
}

}  // namespace rq
