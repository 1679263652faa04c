// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "rq/error.hpp"
#include "rq/eval.hpp"
#include "rq/features.hpp"
#include "rq/ingest.hpp"
#include "rq/nn.hpp"
#include "rq/pipeline.hpp"
#include "rq/random.hpp"
#include "rq/simcodec.hpp"
#include "rq/strategy.hpp"

using namespace rq;
using nn::Matrix;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
    enum Kind { kPass, kFail, kInfo } kind;
    std::string detail;
};

Outcome pass_if(bool ok, std::string detail) { return {ok ? Outcome::kPass : Outcome::kFail, std::move(detail)}; }

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void run(int n, const char* title, const std::function<Outcome()>& body) {
    Outcome o;
    try {
        o = body();
    } catch (const std::exception& e) {
        o = {Outcome::kFail, std::string("exception: ") + e.what()};
    }
    const char* tag = o.kind == Outcome::kPass ? "PASS" : o.kind == Outcome::kFail ? "FAIL" : "INFO";
    if (o.kind == Outcome::kFail) ++failures;
    std::printf("[%s] criterion %2d  %s: %s\n", tag, n, title, o.detail.c_str());
    std::fflush(stdout);
}

// ---------------------------------------------------------------------------

RateQualityCurve random_curve(Rng& rng) {
    std::vector<double> v(CrfGrid::kCount), r(CrfGrid::kCount);
    for (auto& x : v) x = rng.uniform(0.0, 100.0);
    for (auto& x : r) x = rng.uniform(50.0, 20000.0);
    return {v, r};
}

Outcome suspension_exactness() {
    Rng rng(2024);
    std::vector<RateQualityCurve> curves;
    std::vector<AnchorPoint> anchors;
    for (int i = 0; i < 1000; ++i) {
        curves.push_back(random_curve(rng));
        const auto k = std::ptrdiff_t(rng.below(CrfGrid::kCount));
        anchors.push_back({CrfGrid::crf_of(k), rng.uniform(50.0, 20000.0), rng.uniform(0.0, 100.0)});
    }
    const auto t0 = Clock::now();
    double worst = 0.0;
    for (auto mode : {SuspensionMode::kAdditive, SuspensionMode::kMultiplicativeBitrate})
        for (int i = 0; i < 1000; ++i) {
            const auto& a = anchors[std::size_t(i)];
            const auto s = suspend(curves[std::size_t(i)], a, mode);
            const auto k = a.index();
            worst = std::max(worst, std::abs(s.vmaf_at(k) - a.vmaf) / std::max(std::abs(a.vmaf), 1e-300));
            worst = std::max(worst, std::abs(s.bitrate_at(k) - a.bitrate) / std::abs(a.bitrate));
        }
    const double dt = seconds_since(t0);
    return pass_if(worst <= 1e-9 && dt < 1.0,
                   fmt("1000 pairs x 2 modes, max relative error %.2e (<= 1e-9), %.3f s (< 1 s)", worst, dt));
}

// ---------------------------------------------------------------------------

Outcome gradient_correctness() {
    const auto t0 = Clock::now();
    // Input 16 = codec 10 + content 4 + anchor 2.
    auto d = sim::to_dataset(sim::synth_dataset(6, 1, 99).train);
    d.schema = {"codec-tiny", 10, "content-tiny", 4, 2};
    for (auto& r : d.records) {
        r.features.codec.resize(10);
        r.features.content.resize(4);
    }
    double worst = 0.0;
    std::size_t params = 0;
    for (auto mode : {SuspensionMode::kAdditive, SuspensionMode::kMultiplicativeBitrate}) {
        PredictorConfig cfg;
        cfg.suspension = mode;
        cfg.train.hidden = 16;
        cfg.train.residual_blocks = 1;
        cfg.train.zero_init_residual_head = false;
        auto m = init_bundle(d, cfg, 5);
        if (m.net1.arch.input_dim != 16) return {Outcome::kFail, "tiny network input is not 16"};
        Rng rng(6);
        for (auto* p : {&m.net1, &m.net2})
            for (auto& v : p->trainable_views())
                for (Eigen::Index i = 0; i < v.size; ++i) v.data[i] += 0.05 * rng.normal();

        const auto n = Eigen::Index(d.records.size());
        Matrix x(16, n), anchors(2, n), truth(Eigen::Index(kCurveWidth), n);
        for (Eigen::Index j = 0; j < n; ++j) {
            const auto& r = d.records[std::size_t(j)];
            const auto in = model_input(r, cfg);
            for (Eigen::Index i = 0; i < 16; ++i) x(i, j) = in[std::size_t(i)];
            anchors(0, j) = r.anchor.bitrate;
            anchors(1, j) = r.anchor.vmaf;
        }
        {
            auto probe = m;
            truth = end_to_end_gradients(probe, x, anchors, Matrix::Zero(truth.rows(), n)).pred;
        }
        for (Eigen::Index j = 0; j < n; ++j)
            for (Eigen::Index i = 0; i < truth.rows(); ++i) truth(i, j) += (i < 101 ? 0.5 : 30.0) * rng.normal();

        auto copy = m;
        const auto g = end_to_end_gradients(copy, x, anchors, truth);
        const double floor = 1e-5 * std::max(1.0, g.loss);
        const double h = 1e-5;
        auto loss = [&] {
            auto c = m;
            return end_to_end_gradients(c, x, anchors, truth).loss;
        };
        for (auto [net, grad] : {std::pair{&m.net1, &g.net1.params}, std::pair{&m.net2, &g.net2.params}}) {
            auto pv = net->trainable_views();
            auto gv = const_cast<nn::ModelParams*>(grad)->trainable_views();
            for (std::size_t t = 0; t < pv.size(); ++t)
                for (Eigen::Index i = 0; i < pv[t].size; ++i) {
                    double& w = pv[t].data[i];
                    const double saved = w;
                    w = saved + h;
                    const double up = loss();
                    w = saved - h;
                    const double down = loss();
                    w = saved;
                    const double num = (up - down) / (2.0 * h);
                    const double a = gv[t].data[i];
                    worst = std::max(worst, std::abs(a - num) / std::max({std::abs(a), std::abs(num), floor}));
                    ++params;
                }
        }
    }
    const double dt = seconds_since(t0);
    return pass_if(worst <= 1e-4 && dt < 30.0,
                   fmt("%zu parameters over both suspension modes, max relative error %.2e (<= 1e-4, h = 1e-5), "
                       "%.1f s (< 30 s)",
                       params, worst, dt));
}

// ---------------------------------------------------------------------------

struct LearningRun {
    Dataset train_set, test_set;
    ModelBundle full;
    EvalReport full_report;
    double full_seconds = 0.0;
    bool ok = false;
};

LearningRun& learning() {
    static LearningRun run = [] {
        LearningRun r;
        const auto split = sim::synth_dataset(2000, 500, 7);
        r.train_set = sim::to_dataset(split.train);
        r.test_set = sim::to_dataset(split.test);
        TrainingReport rep;
        r.full = train(r.train_set, PredictorConfig{}, 1, &rep);
        r.full_seconds = rep.seconds;
        r.full_report = evaluate(r.full, r.test_set);
        r.ok = true;
        return r;
    }();
    return run;
}

Outcome end_to_end_learning() {
    const auto& r = learning();
    const auto& e = r.full_report;
    return pass_if(e.vmaf_mae <= 1.0 && e.vacc >= 0.95 && r.full_seconds <= 600.0,
                   fmt("2000/500 videos, noise 0.3: VMAF MAE %.4f (<= 1.0), VACC %.2f%% (>= 95%%), "
                       "bitrate MAE %.1f kbps, trained in %.1f s (<= 600 s)",
                       e.vmaf_mae, 100.0 * e.vacc, e.bitrate_mae, r.full_seconds));
}

Outcome ablation_ordering() {
    const auto& r = learning();
    auto mae_of = [&](Ablation a) {
        PredictorConfig cfg;
        cfg.ablation = a;
        return evaluate(train(r.train_set, cfg, 1), r.test_set).vmaf_mae;
    };
    const double full = r.full_report.vmaf_mae;
    const double no_susp = mae_of(Ablation::kNoSuspension);
    const double no_anchor = mae_of(Ablation::kNoAnchorFeatures);
    const double no_e2e = mae_of(Ablation::kNoEnd2End);
    const double gap1 = no_susp / full - 1.0;
    const double gap2 = no_anchor / no_susp - 1.0;
    const double gap3 = no_e2e / full - 1.0;
    const bool ok = gap1 >= 0.05 && gap2 >= 0.05 && no_e2e >= full;
    return pass_if(ok, fmt("VMAF MAE full %.4f < no_suspension %.4f (+%.1f%%, >= 5%%) < no_anchor_features %.4f "
                           "(+%.1f%%, >= 5%%); no_end2end %.4f >= full (+%.1f%%)",
                           full, no_susp, 100.0 * gap1, no_anchor, 100.0 * gap2, no_e2e, 100.0 * gap3));
}

Outcome dynamic_anchor() {
    const auto& r = learning();
    sim::SimBackend backend;
    const auto dyn = evaluate_dynamic(r.full, r.test_set, backend);
    return pass_if(dyn.vacc >= r.full_report.vacc,
                   fmt("VACC dynamic %.2f%% >= fixed %.2f%% (VMAF MAE %.4f vs %.4f)", 100.0 * dyn.vacc,
                       100.0 * r.full_report.vacc, dyn.vmaf_mae, r.full_report.vmaf_mae));
}

// ---------------------------------------------------------------------------

Outcome metric_oracles() {
    Rng rng(77);
    int mismatches = 0, boundary = 0;
    for (int c = 0; c < 100; ++c) {
        const std::size_t n = 1 + rng.below(60);
        const double target = 91.0;
        std::vector<double> actual(n);
        for (auto& v : actual) {
            const auto pick = rng.below(4);
            // Exact boundary cases |d| = 1.0 in both directions.
            v = pick == 0 ? 92.0 : pick == 1 ? 90.0 : target + rng.uniform(-2.5, 2.5);
            boundary += pick < 2;
        }
        std::size_t hits = 0;
        for (double v : actual) hits += (v > target - 1.0 && v < target + 1.0) ? 1 : 0;
        if (vacc(actual, target, 1.0) != double(hits) / double(n)) ++mismatches;

        std::vector<RateQualityCurve> pred, truth;
        for (std::size_t i = 0; i < n; ++i) {
            pred.push_back(random_curve(rng));
            truth.push_back(random_curve(rng));
        }
        double sv = 0.0, sr = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < CrfGrid::kCount; ++k) {
                sv += std::abs(pred[i].vmaf()[k] - truth[i].vmaf()[k]);
                sr += std::abs(pred[i].bitrate()[k] - truth[i].bitrate()[k]);
            }
        const auto m = curve_mae(pred, truth);
        const double cells = double(n) * double(CrfGrid::kCount);
        if (m.vmaf != sv / cells || m.bitrate != sr / cells) ++mismatches;
    }
    return pass_if(mismatches == 0, fmt("100 cohorts, %d boundary entries at |d| = 1.0, %d mismatches", boundary,
                                        mismatches));
}

Outcome loss_arithmetic() {
    Matrix truth = Matrix::Zero(Eigen::Index(kCurveWidth), 1);
    for (Eigen::Index i = 0; i < 101; ++i) {
        truth(i) = 90.0;
        truth(101 + i) = 1000.0;
    }
    Matrix vmaf_off = truth, rate_off = truth;
    vmaf_off.topRows(101).array() += 1.0;
    rate_off.bottomRows(101).array() += 10.0;
    nn::LossConfig cfg;
    cfg.lambda = 1e-4;
    const double a = nn::curve_loss(vmaf_off, truth, cfg).value;
    const double b = nn::curve_loss(rate_off, truth, cfg).value;
    const double ea = std::abs(a - 101.0), eb = std::abs(b - 1.01);
    return pass_if(ea <= 1e-12 && eb <= 1e-12,
                   fmt("VMAF error 1 -> %.15g (101.0, err %.1e); bitrate error 10 -> %.15g (1.01, err %.1e)", a, ea,
                       b, eb));
}

// ---------------------------------------------------------------------------

Outcome feature_correctness() {
    Rng rng(31);
    int glcm_bad = 0, glcm_cases = 0;
    for (int t = 0; t < 50; ++t) {
        LumaPlane p(4, 4);
        for (auto& s : p.samples) s = std::uint8_t(rng.below(256));
        for (int levels : {2, 4, 8, 16}) {
            for (const auto& off : kGlcmOffsets) {
                ++glcm_cases;
                std::vector<double> m(std::size_t(levels * levels), 0.0);
                int pairs = 0;
                for (int y = 0; y < 4; ++y)
                    for (int x = 0; x < 4; ++x) {
                        const int nx = x + off.dx, ny = y + off.dy;
                        if (nx < 0 || ny < 0 || nx >= 4 || ny >= 4) continue;
                        m[std::size_t(p.at(x, y) * levels / 256 * levels + p.at(nx, ny) * levels / 256)] += 1.0;
                        ++pairs;
                    }
                for (auto& v : m) v /= pairs;
                const auto g = glcm(p, off, levels);
                bool same = g.p.size() == m.size();
                for (std::size_t i = 0; same && i < m.size(); ++i) same = std::abs(g.p[i] - m[i]) <= 1e-15;

                double contrast = 0, energy = 0, entropy = 0, homog = 0, ma = 0, mb = 0, va = 0, vb = 0, cov = 0;
                for (int a = 0; a < levels; ++a)
                    for (int b = 0; b < levels; ++b) {
                        const double q = m[std::size_t(a * levels + b)];
                        contrast += (a - b) * (a - b) * q;
                        energy += q * q;
                        if (q > 0) entropy -= q * std::log2(q);
                        homog += q / (1.0 + std::abs(a - b));
                        ma += a * q;
                        mb += b * q;
                    }
                for (int a = 0; a < levels; ++a)
                    for (int b = 0; b < levels; ++b) {
                        const double q = m[std::size_t(a * levels + b)];
                        va += (a - ma) * (a - ma) * q;
                        vb += (b - mb) * (b - mb) * q;
                        cov += (a - ma) * (b - mb) * q;
                    }
                const double corr = va > 0 && vb > 0 ? cov / std::sqrt(va * vb) : 0.0;
                const auto s = glcm_stats(g);
                auto close = [](double x, double y) { return std::abs(x - y) <= 1e-12 * std::max(1.0, std::abs(y)); };
                same = same && close(s.contrast, contrast) && close(s.energy, energy) && close(s.entropy, entropy) &&
                       close(s.homogeneity, homog) && close(s.correlation, corr);
                glcm_bad += !same;
            }
        }
    }

    int temporal_bad = 0, temporal_cases = 0;
    for (int t = 0; t < 20; ++t) {
        VideoClip clip;
        clip.width = 6;
        clip.height = 5;
        for (int f = 0; f < 5; ++f) {
            LumaPlane p(6, 5);
            for (auto& s : p.samples) s = std::uint8_t(rng.below(256));
            clip.frames.push_back(p);
        }
        if (t % 4 == 0) clip.frames[3] = clip.frames[2];
        for (int stride : {1, 2}) {
            ++temporal_cases;
            std::vector<double> mads;
            for (std::size_t i = 0; i + std::size_t(stride) < 5; i += std::size_t(stride)) {
                double acc = 0.0;
                for (std::size_t k = 0; k < 30; ++k)
                    acc += std::abs(double(clip.frames[i + std::size_t(stride)].samples[k]) - clip.frames[i].samples[k]);
                mads.push_back(acc / 30.0);
            }
            double mean = 0.0, mx = 0.0, zero = 0.0, var = 0.0;
            for (double v : mads) mean += v, mx = std::max(mx, v), zero += v < 0.5;
            mean /= double(mads.size());
            for (double v : mads) var += (v - mean) * (v - mean);
            var /= double(mads.size());
            const auto s = temporal_stats(clip, stride);
            const bool ok = std::abs(s.mean - mean) <= 1e-12 * std::max(1.0, mean) &&
                            std::abs(s.variance - var) <= 1e-9 * std::max(1.0, var) && s.max == mx &&
                            s.zero_fraction == zero / double(mads.size());
            temporal_bad += !ok;
        }
    }

    int y4m_bad = 0;
    for (int t = 0; t < 10; ++t) {
        VideoClip clip;
        clip.width = 16 + 2 * t;
        clip.height = 16 + 2 * (t % 3);
        clip.frame_rate = {30000, 1001};
        for (int f = 0; f < 3; ++f) {
            LumaPlane p(clip.width, clip.height);
            for (auto& s : p.samples) s = std::uint8_t(rng.below(256));
            clip.frames.push_back(p);
        }
        std::stringstream a;
        write_y4m(a, clip);
        const std::string bytes = a.str();
        std::istringstream in(bytes);
        const auto back = parse_y4m(in);
        std::stringstream b;
        write_y4m(b, back);
        bool ok = back.width == clip.width && back.height == clip.height && back.frames.size() == 3 &&
                  back.frame_rate.num == 30000 && back.frame_rate.den == 1001 && b.str() == bytes;
        for (std::size_t f = 0; ok && f < 3; ++f) ok = back.frames[f].samples == clip.frames[f].samples;
        y4m_bad += !ok;
    }
    return pass_if(glcm_bad == 0 && temporal_bad == 0 && y4m_bad == 0,
                   fmt("GLCM+Haralick %d/%d 4x4 cases, temporal %d/%d 5-frame cases, Y4M %d/10 bit-exact round trips",
                       glcm_cases - glcm_bad, glcm_cases, temporal_cases - temporal_bad, temporal_cases,
                       10 - y4m_bad));
}

// ---------------------------------------------------------------------------

Outcome strategy_guarantees() {
    Rng rng(404);
    int reachable = 0, held = 0, slope_match = 0;
    for (std::uint64_t i = 0; i < 500; ++i) {
        const auto latent = sim::make_latent(sim::sample_seed(11, i));
        const auto curve = sim::curve_gt(latent.theta);
        for (double target : {91.0, rng.uniform(60.0, 99.5)}) {
            if (curve.vmaf_at(0) < target) continue;
            ++reachable;
            const auto d = crf_for_target_vmaf(curve, target);
            held += sim::vmaf_gt(latent.theta, d.crf) >= target - 1.0;
        }
        const double thr = std::exp(rng.uniform(std::log(1e-4), std::log(0.1)));
        std::ptrdiff_t knee = -1;
        for (std::size_t k = 0; k + 1 < CrfGrid::kCount; ++k) {
            const double dr = curve.bitrate_at(k) - curve.bitrate_at(k + 1);
            if (dr != 0.0 && (curve.vmaf_at(k) - curve.vmaf_at(k + 1)) / dr < thr) knee = std::ptrdiff_t(k) + 1;
        }
        const double want = knee < 0 ? CrfGrid::min_crf() : CrfGrid::crf_of(knee);
        slope_match += crf_for_slope(curve, thr).crf == want;
    }
    return pass_if(held == reachable && slope_match == 500,
                   fmt("target rule held on %d/%d reachable targets; slope knee matched brute force on %d/500 videos",
                       held, reachable, slope_match));
}

Outcome determinism() {
    const auto split = sim::synth_dataset(300, 100, 21);
    const auto tr = sim::to_dataset(split.train), te = sim::to_dataset(split.test);
    PredictorConfig cfg;
    cfg.train.epochs = 10;
    auto once = [&] {
        const auto m = train(tr, cfg, 1);
        std::ostringstream os;
        write_bundle(os, m);
        return std::pair{os.str(), report_json(evaluate(m, te))};
    };
    const auto a = once();
    const auto b = once();
    return pass_if(a.first == b.first && a.second == b.second,
                   fmt("two train+evaluate runs (300 videos, 10 epochs): bundles %s (%zu bytes), reports %s",
                       a.first == b.first ? "identical" : "DIFFER", a.first.size(),
                       a.second == b.second ? "identical" : "DIFFER"));
}

}  // namespace

int main() {
    const auto t0 = Clock::now();
    run(1, "paper-scale results", [] {
        return Outcome{Outcome::kInfo,
                       "not reproducible here (proprietary encoder and private corpus); criteria 2-11 are the "
                       "property-based substitutes"};
    });
    run(2, "suspension exactness", suspension_exactness);
    run(3, "gradient correctness", gradient_correctness);
    run(4, "synthetic end-to-end learning", end_to_end_learning);
    run(5, "ablation ordering", ablation_ordering);
    run(6, "dynamic-anchor ordering", dynamic_anchor);
    run(7, "metric oracles", metric_oracles);
    run(8, "loss arithmetic", loss_arithmetic);
    run(9, "feature correctness", feature_correctness);
    run(10, "strategy guarantees", strategy_guarantees);
    run(11, "determinism", determinism);
    std::printf("%d criterion(s) failed, %.1f s total\n", failures, seconds_since(t0));
    return failures == 0 ? 0 : 1;
}
