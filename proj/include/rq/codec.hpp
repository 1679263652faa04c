#pragma once

#include <array>
#include <chrono>
#include <cstddef>
#include <filesystem>
#include <memory>
#include <optional>
#include <semaphore>
#include <string>
#include <string_view>
#include <vector>

#include "rq/config.hpp"
#include "rq/ingest.hpp"

namespace rq {

enum FrameType : std::size_t { kFrameI = 0, kFrameP = 1, kFrameB = 2 };

// Partition bins, in histogram order.
inline constexpr std::array<std::string_view, 13> kPartitionBins = {
    "I16x16", "I8x8", "I4x4", "P16x16", "P16x8", "P8x8", "P8x4", "P4x4",
    "B16x16", "B16x8", "B8x8", "direct", "skip"};

struct FrameTypeSummary {
    int count = 0;
    double avg_qp = 0.0;
    double avg_size_bytes = 0.0;
};

/// Summary statistics of one encode, as printed at the end of an x264-style log.
struct EncoderStats {
    std::array<FrameTypeSummary, 3> frames{};  // I, P, B
    double bitrate_kbps = 0.0;
    std::optional<double> quality;  // VMAF of this encode, filled in by the backend
    std::optional<double> psnr_mean_y;
    std::optional<double> psnr_global;

    // Macroblock-type fractions (0..1) per frame type, as printed on the "mb" lines.
    std::optional<std::array<double, 3>> mb_i;  // I16x16 I8x8 I4x4
    std::optional<std::array<double, 9>> mb_p;  // I16x16 I8x8 I4x4 P16x16 P16x8 P8x8 P8x4 P4x4 skip
    std::optional<std::array<double, 8>> mb_b;  // I16x16 I8x8 I4x4 B16x16 B16x8 B8x8 direct skip
    std::optional<std::array<double, 2>> b_ref_direction;  // L0, L1 (BI is the remainder)
    std::optional<std::array<double, 2>> mv_magnitude;     // mean, variance (pixels)
    std::optional<std::array<double, 2>> transform_8x8;    // intra, inter
    std::optional<std::array<double, 6>> coded_blocks;     // y, uvDC, uvAC for intra then inter
    std::optional<std::array<double, 4>> i16_modes;        // v, h, dc, planar

    int total_frames() const { return frames[0].count + frames[1].count + frames[2].count; }
    double mean_qp() const;
    std::array<double, 3> frame_proportions() const;
    std::array<double, 3> bits_share() const;

    /// Frame-count-weighted macroblock histogram over kPartitionBins; empty
    /// when the log carried no "mb" lines.
    std::vector<double> partition_histogram() const;
    /// intra, inter, skip over all frames / P frames / B frames.
    std::optional<std::array<double, 3>> mode_proportions() const;
    std::optional<std::array<double, 3>> p_modes() const;
    std::optional<std::array<double, 3>> b_modes() const;
};

/// Parse the summary block of an encoder log.
///
/// Recognized lines (an optional `name [level]: ` prefix is ignored):
///   frame I:<n> Avg QP:<qp> size:<bytes> [PSNR Mean Y:<db> ...]   (also P, B)
///   mb I I16..4: a% b% c%
///   mb P I16..4: a% b% c%  P16..4: a% b% c% d% e%  skip:f%
///   mb B I16..4: a% b% c%  B16..8: a% b% c%  direct:d%  skip:e%  L0:x% L1:y% BI:z%
///   8x8 transform intra:a% inter:b%
///   coded y,uvDC,uvAC intra: a% b% c% inter: d% e% f%
///   i16 v,h,dc,p: a% b% c% d%
///   mv magnitude mean:<m> var:<v>
///   PSNR Mean Y:<y> ... Global:<g> kb/s:<r>
///   ... kb/s:<r>   or   encoded <n> frames, <fps> fps, <r> kb/s
/// The last bitrate figure wins. Unknown lines are skipped. Throws ParseError
/// when no frame-type line or no bitrate figure is present.
EncoderStats parse_stats_log(std::string_view text);

/// Render stats in the grammar above; parse_stats_log(render_stats_log(s)) recovers s.
std::string render_stats_log(const EncoderStats& stats);

struct EncodeResult {
    double crf = 0.0;
    double bitrate = 0.0;  // kbps
    double vmaf = 0.0;
    std::optional<EncoderStats> stats;
};

/// What a backend needs to know about a source video.
struct ClipRef {
    std::string id;
    std::filesystem::path path;
    std::size_t frame_count = 0;
    FrameRate frame_rate;
};

class CodecBackend {
public:
    virtual ~CodecBackend() = default;
    virtual std::string name() const = 0;
    /// Encode `clip` at `crf` and measure it. `crf` is already range-checked.
    virtual EncodeResult encode(const ClipRef& clip, double crf, bool want_stats) = 0;
};

/// Range-checks `crf` against [lo, hi] (the CRF grid by default) and delegates to the backend.
EncodeResult encode_measure(CodecBackend& backend, const ClipRef& clip, double crf,
                            bool want_stats = false, double lo = 20.0, double hi = 40.0);

struct ExternalBackendConfig {
    // Placeholders: {input} {output} {crf}
    std::string encode_command;
    // Placeholders: {reference} {distorted}
    std::string metric_command;
    std::string metric_pattern = R"(VMAF score[^0-9]*([0-9]+(\.[0-9]+)?))";
    std::filesystem::path work_dir = std::filesystem::temp_directory_path();
    std::string output_extension = "mkv";
    std::chrono::seconds timeout{600};
    int max_parallel = 4;

    static ExternalBackendConfig from(const KeyValueConfig& cfg);
    static std::vector<std::string> known_keys();
};

/// Runs a real encoder and quality-metric tool as subprocesses.
class ExternalBackend final : public CodecBackend {
public:
    explicit ExternalBackend(ExternalBackendConfig cfg);
    std::string name() const override { return "external"; }
    EncodeResult encode(const ClipRef& clip, double crf, bool want_stats) override;
    const ExternalBackendConfig& config() const { return cfg_; }

private:
    ExternalBackendConfig cfg_;
    std::counting_semaphore<64> slots_;
};

struct CommandResult {
    int exit_code = 0;
    bool timed_out = false;
    std::string output;  // stdout and stderr interleaved
};

/// Run `command` through /bin/sh, capturing output; kills the process group on timeout.
CommandResult run_command(const std::string& command, std::chrono::milliseconds timeout);

/// Replace every `{key}` with its value. Values are shell-quoted.
std::string expand_template(std::string tmpl, const std::vector<std::pair<std::string, std::string>>& vars);

}  // namespace rq
