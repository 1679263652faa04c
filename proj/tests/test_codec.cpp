#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "rq/codec.hpp"
#include "rq/error.hpp"
#include "rq/simcodec.hpp"
#include "test_util.hpp"

using namespace rq;

namespace {

std::string fixture(const std::string& name) {
    std::ifstream in(std::string(RQ_FIXTURE_DIR) + "/" + name, std::ios::binary);
    REQUIRE(in);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string fixture_path(const std::string& name) { return std::string(RQ_FIXTURE_DIR) + "/" + name; }

void check_same(const EncoderStats& a, const EncoderStats& b, double tol) {
    auto close = [tol](double x, double y) { return std::abs(x - y) <= tol * std::max(1.0, std::abs(y)); };
    for (std::size_t t = 0; t < 3; ++t) {
        CHECK(a.frames[t].count == b.frames[t].count);
        CHECK(close(a.frames[t].avg_qp, b.frames[t].avg_qp));
        CHECK(close(a.frames[t].avg_size_bytes, b.frames[t].avg_size_bytes));
    }
    CHECK(close(a.bitrate_kbps, b.bitrate_kbps));
    auto same = [&](const auto& x, const auto& y) {
        REQUIRE(x.has_value() == y.has_value());
        if (!x) return;
        for (std::size_t k = 0; k < x->size(); ++k) CHECK(close((*x)[k], (*y)[k]));
    };
    same(a.mb_i, b.mb_i);
    same(a.mb_p, b.mb_p);
    same(a.mb_b, b.mb_b);
    same(a.b_ref_direction, b.b_ref_direction);
    same(a.mv_magnitude, b.mv_magnitude);
    same(a.transform_8x8, b.transform_8x8);
    same(a.coded_blocks, b.coded_blocks);
    same(a.i16_modes, b.i16_modes);
    REQUIRE(a.psnr_mean_y.has_value() == b.psnr_mean_y.has_value());
    if (a.psnr_mean_y) CHECK(close(*a.psnr_mean_y, *b.psnr_mean_y));
}

ExternalBackendConfig fake_config(const std::filesystem::path& work) {
    ExternalBackendConfig c;
    c.encode_command = fixture_path("fake_encoder.sh") + " {input} {output} {crf}";
    c.metric_command = fixture_path("fake_vmaf.sh") + " {reference} {distorted}";
    c.work_dir = work;
    c.timeout = std::chrono::seconds(20);
    return c;
}

}  // namespace

TEST_SUITE("codec") {

TEST_CASE("summary fixture") {
    const auto s = parse_stats_log(fixture("x264_summary.log"));
    CHECK(s.frames[kFrameI].count == 2);
    CHECK(s.frames[kFrameP].count == 8);
    CHECK(s.frames[kFrameB].count == 0);
    CHECK(s.frames[kFrameI].avg_qp == 22.0);
    CHECK(s.frames[kFrameP].avg_qp == 25.1);
    CHECK(s.frames[kFrameI].avg_size_bytes == 9000.0);
    CHECK(s.bitrate_kbps == 850.2);
    CHECK(s.mean_qp() == doctest::Approx((2 * 22.0 + 8 * 25.1) / 10.0));
    REQUIRE(s.mb_p.has_value());
    CHECK((*s.mb_p)[8] == doctest::Approx(0.35));
    CHECK((*s.mb_p)[3] == doctest::Approx(0.40));
    REQUIRE(s.i16_modes.has_value());
    CHECK((*s.i16_modes)[3] == doctest::Approx(0.20));
    CHECK_FALSE(s.mb_b.has_value());
    CHECK_FALSE(s.psnr_mean_y.has_value());

    const auto props = s.frame_proportions();
    CHECK(props[0] == doctest::Approx(0.2));
    CHECK(props[1] == doctest::Approx(0.8));
    const auto share = s.bits_share();
    CHECK(share[0] == doctest::Approx(18000.0 / 42000.0));
}

TEST_CASE("unknown lines are skipped") {
    check_same(parse_stats_log(fixture("x264_summary_noisy.log")), parse_stats_log(fixture("x264_summary.log")), 0.0);
}

TEST_CASE("b-frame fixture with psnr") {
    const auto s = parse_stats_log(fixture("x264_bframes.log"));
    CHECK(s.frames[kFrameB].count == 34);
    CHECK(s.frames[kFrameB].avg_qp == 25.92);
    CHECK(s.bitrate_kbps == 1734.51);
    CHECK(*s.psnr_mean_y == 41.42);
    CHECK(*s.psnr_global == 41.873);
    REQUIRE(s.b_ref_direction.has_value());
    CHECK((*s.b_ref_direction)[1] == doctest::Approx(0.35));
    REQUIRE(s.mb_b.has_value());
    CHECK((*s.mb_b)[6] == doctest::Approx(0.06));

    const auto hist = s.partition_histogram();
    REQUIRE(hist.size() == kPartitionBins.size());
    double sum = 0.0;
    for (double h : hist) sum += h;
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    // skip bin: P and B skips weighted by frame counts
    CHECK(hist[12] == doctest::Approx((25 * 0.44 + 34 * 0.66) / (1 * 1.0 + 25 * 1.0 + 34 * 1.0)));
    const auto modes = s.mode_proportions();
    REQUIRE(modes.has_value());
    CHECK((*modes)[0] + (*modes)[1] + (*modes)[2] == doctest::Approx(1.0));
}

TEST_CASE("parse errors") {
    CHECK_THROWS_AS(parse_stats_log(""), ParseError);
    CHECK_THROWS_AS(parse_stats_log("x264 [info]: kb/s:100\n"), ParseError);
    CHECK_THROWS_AS(parse_stats_log("x264 [info]: frame I:1 Avg QP:20 size:100\n"), ParseError);
    CHECK_THROWS_AS(parse_stats_log("\n\n\x01\x02garbage: : :\n"), ParseError);
}

TEST_CASE("the parser is total on mangled input") {
    const auto text = fixture("x264_bframes.log");
    rq::Rng rng(17);
    for (int trial = 0; trial < 300; ++trial) {
        std::string s = text;
        const auto edits = 1 + rng.below(12);
        for (std::uint64_t e = 0; e < edits; ++e) {
            const auto pos = rng.below(s.size());
            switch (rng.below(3)) {
                case 0: s[pos] = char(rng.below(256)); break;
                case 1: s.erase(pos, 1 + rng.below(8)); break;
                default: s.resize(pos); break;
            }
            if (s.empty()) break;
        }
        try {
            parse_stats_log(s);
        } catch (const ParseError&) {
        }
    }
    CHECK(true);
}

TEST_CASE("render then parse") {
    const auto latent = sim::make_latent(42);
    for (double crf : {18.0, 33.0}) {
        auto s = sim::synth_encoder_stats(latent, crf);
        s.quality.reset();
        check_same(parse_stats_log(render_stats_log(s)), s, 1e-12);
    }
    const auto fx = parse_stats_log(fixture("x264_bframes.log"));
    check_same(parse_stats_log(render_stats_log(fx)), fx, 1e-12);
}

TEST_CASE("simulated encodes") {
    sim::SimBackend backend;
    const auto latent = sim::make_latent(1234);
    ClipRef clip;
    clip.id = sim::sample_id(1234);
    const auto r = encode_measure(backend, clip, 30.4);
    CHECK(r.crf == 30.4);
    CHECK(r.vmaf == sim::vmaf_gt(latent.theta, 30.4));
    CHECK(r.bitrate == sim::bitrate_gt(latent.theta, 30.4));
    CHECK_FALSE(r.stats.has_value());
    const auto again = encode_measure(backend, clip, 30.4, true);
    CHECK(again.vmaf == r.vmaf);
    CHECK(again.stats.has_value());

    CHECK_THROWS_AS(encode_measure(backend, clip, 45.0), BoundsError);
    CHECK_THROWS_AS(encode_measure(backend, clip, 19.8), BoundsError);
    CHECK_NOTHROW(encode_measure(backend, clip, 18.0, false, 0.0, 51.0));

    sim::SimBackend noisy(0.5, 0.02);
    const auto n1 = encode_measure(noisy, clip, 30.4);
    const auto n2 = encode_measure(noisy, clip, 30.4);
    CHECK(n1.vmaf == n2.vmaf);
    CHECK(n1.vmaf != r.vmaf);

    clip.id = "real-video.mp4";
    CHECK_THROWS_AS(encode_measure(backend, clip, 30.4), ConfigError);
}

TEST_CASE("template expansion quotes values") {
    CHECK(expand_template("enc {input} -o {output} --crf {crf}", {{"input", "a b.y4m"}, {"output", "x'y"}, {"crf", "30.4"}}) ==
          "enc 'a b.y4m' -o 'x'\\''y' --crf '30.4'");
    CHECK(expand_template("{crf}{crf}", {{"crf", "1"}}) == "'1''1'");
}

TEST_CASE("subprocess capture") {
    const auto r = run_command("echo out; echo err 1>&2; exit 4", std::chrono::seconds(10));
    CHECK(r.exit_code == 4);
    CHECK_FALSE(r.timed_out);
    CHECK(r.output.find("out") != std::string::npos);
    CHECK(r.output.find("err") != std::string::npos);

    const auto t = run_command("sleep 5", std::chrono::milliseconds(200));
    CHECK(t.timed_out);
}

TEST_CASE("backend config file") {
    const auto kv = KeyValueConfig::parse(
        "encode_command = x264 --crf {crf} -o {output} {input}\nmetric_command = vmaf -r {reference} -d {distorted}\n"
        "timeout_seconds = 30\nmax_parallel = 2\n");
    const auto c = ExternalBackendConfig::from(kv);
    CHECK(c.timeout.count() == 30);
    CHECK(c.max_parallel == 2);
    CHECK_THROWS_AS(ExternalBackendConfig::from(KeyValueConfig::parse("metric_command = m\n")), ConfigError);
    CHECK_THROWS_AS(ExternalBackendConfig::from(KeyValueConfig::parse("encode_command = e\nmetric_command = m\ncrf = 3\n")),
                    ConfigError);
    CHECK_THROWS_AS(
        ExternalBackendConfig::from(KeyValueConfig::parse("encode_command = e\nmetric_command = m\nmetric_pattern = ([\n")),
        ConfigError);
}

TEST_CASE("external backend with fake tools") {
    rqtest::TempDir dir;
    {
        std::ofstream(dir / "src.y4m") << "placeholder";
    }
    ExternalBackend backend(fake_config(dir / "work"));
    ClipRef clip{"src", dir / "src.y4m", 10, {30, 1}};
    const auto r = encode_measure(backend, clip, 30.0, true);
    CHECK(r.vmaf == 93.25);
    const double bytes = std::floor(40000.0 * std::exp(-1.0));
    CHECK(r.bitrate == doctest::Approx(bytes * 8.0 / (10.0 / 30.0) / 1000.0).epsilon(1e-12));
    REQUIRE(r.stats.has_value());
    CHECK(r.stats->frames[kFrameP].count == 9);
    CHECK(*r.stats->quality == 93.25);
    CHECK(std::filesystem::exists(dir / "work" / "src_crf30.0.mkv"));
}

TEST_CASE("external backend failures") {
    rqtest::TempDir dir;
    {
        std::ofstream(dir / "src.y4m") << "placeholder";
    }
    ClipRef clip{"src", dir / "src.y4m", 10, {30, 1}};

    auto cfg = fake_config(dir.path());
    cfg.encode_command = "/nonexistent/encoder {input} {output}";
    try {
        ExternalBackend(cfg).encode(clip, 30.0, false);
        FAIL("expected BackendError");
    } catch (const BackendError& e) {
        CHECK(std::string(e.what()).find("/nonexistent/encoder") != std::string::npos);
    }

    cfg = fake_config(dir.path());
    cfg.encode_command = "echo broken; exit 3";
    try {
        ExternalBackend(cfg).encode(clip, 30.0, false);
        FAIL("expected BackendError");
    } catch (const BackendError& e) {
        CHECK(std::string(e.what()).find("status 3") != std::string::npos);
        CHECK(e.diagnostics().find("broken") != std::string::npos);
    }

    cfg = fake_config(dir.path());
    cfg.encode_command = "sleep 10";
    cfg.timeout = std::chrono::seconds(1);
    CHECK_THROWS_AS(ExternalBackend(cfg).encode(clip, 30.0, false), BackendError);

    cfg = fake_config(dir.path());
    cfg.metric_command = "echo no score here";
    CHECK_THROWS_AS(ExternalBackend(cfg).encode(clip, 30.0, false), BackendError);

    cfg = fake_config(dir.path());
    cfg.metric_command = "echo VMAF score: 130";
    CHECK_THROWS_AS(ExternalBackend(cfg).encode(clip, 30.0, false), BackendError);

    cfg = fake_config(dir.path());
    cfg.encode_command = "head -c 100 /dev/zero > {output}; echo no stats";
    CHECK_NOTHROW(ExternalBackend(cfg).encode(clip, 30.0, false));
    CHECK_THROWS_AS(ExternalBackend(cfg).encode(clip, 30.0, true), BackendError);

    clip.frame_count = 0;
    CHECK_THROWS_AS(ExternalBackend(fake_config(dir.path())).encode(clip, 30.0, false), BackendError);
}

}
