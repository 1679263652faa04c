#include <doctest.h>

#include <fstream>
#include <sstream>

#include "rq/error.hpp"
#include "rq/ingest.hpp"
#include "test_util.hpp"

using namespace rq;

namespace {

std::string y4m_bytes(const std::string& header, int w, int h, int frames, std::size_t chroma, std::uint8_t base) {
    std::string s = header + "\n";
    for (int f = 0; f < frames; ++f) {
        s += "FRAME\n";
        for (int i = 0; i < w * h; ++i) s += char(std::uint8_t(base + f + i % 7));
        s += std::string(chroma, char(128));
    }
    return s;
}

}  // namespace

TEST_SUITE("ingest") {

TEST_CASE("header fields") {
    std::istringstream in(y4m_bytes("YUV4MPEG2 W64 H48 F30:1 C420", 64, 48, 2, 2 * 32 * 24, 10));
    const auto clip = parse_y4m(in);
    CHECK(clip.width == 64);
    CHECK(clip.height == 48);
    CHECK(clip.frame_count() == 2);
    CHECK(clip.frame_rate.num == 30);
    CHECK(clip.frame_rate.den == 1);
    CHECK(clip.frames[1].at(0, 0) == 11);
    CHECK(clip.frames[0].at(3, 0) == 13);
    CHECK(clip.duration_seconds() == doctest::Approx(2.0 / 30.0));
}

TEST_CASE("chroma layouts are skipped by size") {
    struct Case {
        const char* tag;
        std::size_t chroma;
    };
    for (const auto& c : {Case{"C422", 2 * 16 * 32}, Case{"C444", 2 * 32 * 32}, Case{"Cmono", 0},
                          Case{"C420jpeg", 2 * 16 * 16}, Case{"C420paldv", 2 * 16 * 16}}) {
        std::istringstream in(y4m_bytes(std::string("YUV4MPEG2 W32 H32 F25:1 ") + c.tag, 32, 32, 3, c.chroma, 40));
        const auto clip = parse_y4m(in);
        CHECK(clip.frame_count() == 3);
        CHECK(clip.frames[2].at(0, 0) == 42);
    }
}

TEST_CASE("missing chroma tag defaults to 4:2:0") {
    std::istringstream in(y4m_bytes("YUV4MPEG2 W16 H16 F30000:1001", 16, 16, 1, 2 * 8 * 8, 0));
    const auto clip = parse_y4m(in);
    CHECK(clip.frame_rate.value() == doctest::Approx(29.97).epsilon(1e-4));
}

TEST_CASE("truncated second frame names frame 1") {
    auto bytes = y4m_bytes("YUV4MPEG2 W64 H48 F30:1 C420", 64, 48, 2, 2 * 32 * 24, 0);
    bytes.resize(bytes.size() - 100);
    std::istringstream in(bytes);
    try {
        parse_y4m(in);
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(std::string(e.what()).find("frame 1") != std::string::npos);
        const std::size_t frame = 6 + 64 * 48 + 2 * 32 * 24;
        const std::size_t header = std::string("YUV4MPEG2 W64 H48 F30:1 C420\n").size();
        CHECK(e.offset() == header + frame + 6 + (64 * 48 + 2 * 32 * 24 - 100));
    }
}

TEST_CASE("malformed streams") {
    auto parse = [](const std::string& s) {
        std::istringstream in(s);
        return parse_y4m(in);
    };
    CHECK_THROWS_AS(parse(""), ParseError);
    CHECK_THROWS_AS(parse("YUV4MPEG3 W16 H16\nFRAME\n"), ParseError);
    CHECK_THROWS_AS(parse("YUV4MPEG2 W16 H16 F30:1 C420p10\n"), ParseError);
    CHECK_THROWS_AS(parse("YUV4MPEG2 W16 H16 F30:1 Cmono16\n"), ParseError);
    CHECK_THROWS_AS(parse("YUV4MPEG2 Wx H16 F30:1\n"), ParseError);
    CHECK_THROWS_AS(parse("YUV4MPEG2 W16 H16 F30:0\n"), ParseError);
    CHECK_THROWS_AS(parse("YUV4MPEG2 W16 H16 F30:1 C420\n"), ParseError);
    CHECK_THROWS_AS(parse("YUV4MPEG2 W8 H8 F30:1 Cmono\nFRAME\n" + std::string(64, 'a')), ParseError);
    CHECK_THROWS_AS(parse(y4m_bytes("YUV4MPEG2 W16 H16 F30:1 Cmono", 16, 16, 1, 0, 0) + "FRAMX\n"), ParseError);
}

TEST_CASE("write then parse is bit exact") {
    const auto clip = rqtest::random_clip(32, 32, 3, 99);
    std::stringstream buf;
    write_y4m(buf, clip);
    const auto back = parse_y4m(buf);
    REQUIRE(back.frame_count() == 3);
    CHECK(back.width == 32);
    CHECK(back.height == 32);
    for (std::size_t f = 0; f < 3; ++f) CHECK(back.frames[f].samples == clip.frames[f].samples);

    rqtest::TempDir dir;
    write_y4m(dir / "clip.y4m", clip);
    CHECK(read_y4m(dir / "clip.y4m").frames[2].samples == clip.frames[2].samples);
}

TEST_CASE("raw planar yuv") {
    rqtest::TempDir dir;
    const auto clip = rqtest::random_clip(16, 16, 2, 5);
    {
        std::ofstream out(dir / "a.yuv", std::ios::binary);
        for (const auto& f : clip.frames) {
            out.write(reinterpret_cast<const char*>(f.samples.data()), 256);
            out << std::string(128, 'c');
        }
    }
    const auto back = read_raw_yuv(dir / "a.yuv", 16, 16, {24, 1});
    REQUIRE(back.frame_count() == 2);
    CHECK(back.frames[1].samples == clip.frames[1].samples);
    CHECK(back.frame_rate.num == 24);

    {
        std::ofstream out(dir / "b.yuv", std::ios::binary);
        out << std::string(256 + 128 + 10, 'x');
    }
    CHECK_THROWS_AS(read_raw_yuv(dir / "b.yuv", 16, 16, {24, 1}), ParseError);
    CHECK_THROWS_AS(read_raw_yuv(dir / "missing.yuv", 16, 16, {24, 1}), ParseError);
    CHECK_THROWS_AS(read_raw_yuv(dir / "a.yuv", 8, 8, {24, 1}), ParseError);
}

TEST_CASE("360p downsampling") {
    VideoClip hd;
    hd.width = 1280;
    hd.height = 720;
    hd.frames.emplace_back(1280, 720, std::uint8_t(77));
    const auto small = downsample_to_360p(hd);
    CHECK(small.width == 640);
    CHECK(small.height == 360);
    for (auto s : small.frames[0].samples) REQUIRE(s == 77);

    VideoClip sd;
    sd.width = 640;
    sd.height = 360;
    sd.frames.emplace_back(640, 360, std::uint8_t(3));
    const auto same = downsample_to_360p(sd);
    CHECK(same.width == 640);
    CHECK(same.frames[0].samples == sd.frames[0].samples);

    VideoClip odd;
    odd.width = 1000;
    odd.height = 562;
    odd.frames.emplace_back(1000, 562, std::uint8_t(0));
    const auto o = downsample_to_360p(odd);
    CHECK(o.height == 360);
    CHECK(o.width % 2 == 0);
    CHECK(o.width == 640);
}

TEST_CASE("area resampling preserves the mean") {
    rq::Rng rng(3);
    for (int trial = 0; trial < 5; ++trial) {
        const auto p = rqtest::random_plane(97, 61, rng);
        const auto q = resample_area(p, 40, 23);
        double mp = 0.0, mq = 0.0;
        for (auto s : p.samples) mp += s;
        for (auto s : q.samples) mq += s;
        mp /= double(p.samples.size());
        mq /= double(q.samples.size());
        CHECK(std::abs(mp - mq) <= 0.5);
    }
    LumaPlane two(4, 2);
    two.samples = {0, 10, 20, 30, 40, 50, 60, 70};
    const auto one = resample_area(two, 2, 1);
    CHECK(one.at(0, 0) == 25);
    CHECK(one.at(1, 0) == 45);
}

}
