#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace rq {

struct FrameRate {
    int num = 30;
    int den = 1;
    double value() const { return den == 0 ? 0.0 : double(num) / double(den); }
};

/// 8-bit luma plane, row-major.
struct LumaPlane {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> samples;

    LumaPlane() = default;
    LumaPlane(int w, int h, std::uint8_t fill = 0)
        : width(w), height(h), samples(std::size_t(w) * std::size_t(h), fill) {}

    std::uint8_t at(int x, int y) const { return samples[std::size_t(y) * width + x]; }
    std::uint8_t& at(int x, int y) { return samples[std::size_t(y) * width + x]; }
};

/// Decoded clip; only luma is kept.
struct VideoClip {
    int width = 0;
    int height = 0;
    FrameRate frame_rate;
    std::vector<LumaPlane> frames;

    std::size_t frame_count() const noexcept { return frames.size(); }
    double duration_seconds() const;
    /// Throws ParseError when frame dimensions or counts break the clip invariants.
    void validate() const;
};

enum class ChromaLayout { k420, k422, k444, kMono };

/// Parse a YUV4MPEG2 stream. Chroma planes are skipped; high bit depth is rejected.
VideoClip parse_y4m(std::istream& in);
VideoClip read_y4m(const std::filesystem::path& path);

/// Write a clip as Y4M (C420jpeg, neutral chroma). Used for fixtures and pre-encode inputs.
void write_y4m(std::ostream& out, const VideoClip& clip);
void write_y4m(const std::filesystem::path& path, const VideoClip& clip);

/// Headerless planar 8-bit YUV with caller-supplied geometry.
VideoClip read_raw_yuv(const std::filesystem::path& path, int width, int height, FrameRate rate,
                       ChromaLayout layout = ChromaLayout::k420);

/// Area-average to 360 rows (even, aspect-preserving width). Clips at or below
/// 360 rows are returned unchanged.
VideoClip downsample_to_360p(const VideoClip& clip);

/// Area-average a single plane to arbitrary dimensions.
LumaPlane resample_area(const LumaPlane& src, int out_width, int out_height);

}  // namespace rq
