#include "rq/codec.hpp"

#include <fcntl.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <regex>
#include <sstream>
#include <thread>

#include "rq/error.hpp"

namespace rq {

double EncoderStats::mean_qp() const {
    double acc = 0.0;
    int n = 0;
    for (const auto& f : frames) {
        acc += f.count * f.avg_qp;
        n += f.count;
    }
    return n > 0 ? acc / n : 0.0;
}

std::array<double, 3> EncoderStats::frame_proportions() const {
    const double n = total_frames();
    if (n <= 0) return {0.0, 0.0, 0.0};
    return {frames[0].count / n, frames[1].count / n, frames[2].count / n};
}

std::array<double, 3> EncoderStats::bits_share() const {
    std::array<double, 3> bytes{};
    for (std::size_t t = 0; t < 3; ++t) bytes[t] = frames[t].count * frames[t].avg_size_bytes;
    const double total = bytes[0] + bytes[1] + bytes[2];
    if (total <= 0.0) return {0.0, 0.0, 0.0};
    return {bytes[0] / total, bytes[1] / total, bytes[2] / total};
}

std::vector<double> EncoderStats::partition_histogram() const {
    if (!mb_i && !mb_p && !mb_b) return {};
    std::vector<double> hist(kPartitionBins.size(), 0.0);
    if (mb_i)
        for (std::size_t k = 0; k < 3; ++k) hist[k] += frames[kFrameI].count * (*mb_i)[k];
    if (mb_p) {
        const double w = frames[kFrameP].count;
        for (std::size_t k = 0; k < 8; ++k) hist[k] += w * (*mb_p)[k];
        hist[12] += w * (*mb_p)[8];
    }
    if (mb_b) {
        const double w = frames[kFrameB].count;
        for (std::size_t k = 0; k < 3; ++k) hist[k] += w * (*mb_b)[k];
        for (std::size_t k = 0; k < 5; ++k) hist[8 + k] += w * (*mb_b)[3 + k];
    }
    const double total = std::accumulate(hist.begin(), hist.end(), 0.0);
    if (total <= 0.0) return {};
    for (auto& h : hist) h /= total;
    return hist;
}

namespace {

std::optional<std::array<double, 3>> normalized3(double a, double b, double c) {
    const double s = a + b + c;
    if (s <= 0.0) return std::nullopt;
    return std::array<double, 3>{a / s, b / s, c / s};
}

}  // namespace

std::optional<std::array<double, 3>> EncoderStats::mode_proportions() const {
    const auto hist = partition_histogram();
    if (hist.empty()) return std::nullopt;
    const double intra = hist[0] + hist[1] + hist[2];
    const double skip = hist[12];
    return normalized3(intra, 1.0 - intra - skip, skip);
}

std::optional<std::array<double, 3>> EncoderStats::p_modes() const {
    if (!mb_p) return std::nullopt;
    const auto& m = *mb_p;
    return normalized3(m[0] + m[1] + m[2], m[3] + m[4] + m[5] + m[6] + m[7], m[8]);
}

std::optional<std::array<double, 3>> EncoderStats::b_modes() const {
    if (!mb_b) return std::nullopt;
    const auto& m = *mb_b;
    return normalized3(m[0] + m[1] + m[2], m[3] + m[4] + m[5] + m[6], m[7]);
}

// ---------------------------------------------------------------------------
// Log grammar

namespace {

std::string_view strip_prefix(std::string_view line) {
    // "x264 [info]: frame I:..." -> "frame I:..."
    const auto close = line.find("]: ");
    const auto open = line.find('[');
    if (close != std::string_view::npos && open != std::string_view::npos && open < close)
        line.remove_prefix(close + 3);
    while (!line.empty() && (line.front() == ' ' || line.front() == '\t')) line.remove_prefix(1);
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.remove_suffix(1);
    return line;
}

bool starts_with(std::string_view s, std::string_view p) { return s.substr(0, p.size()) == p; }

// Reads up to `n` numbers following `key`; each may carry a trailing '%'.
// Returns false when the key is missing or fewer than `n` numbers follow.
bool numbers_after(std::string_view line, std::string_view key, std::size_t n, double* out,
                   bool percent = false) {
    const auto pos = line.find(key);
    if (pos == std::string_view::npos) return false;
    const std::string rest(line.substr(pos + key.size()));
    const char* p = rest.c_str();
    for (std::size_t i = 0; i < n; ++i) {
        while (*p == ' ' || *p == '\t') ++p;
        char* end = nullptr;
        const double v = std::strtod(p, &end);
        if (end == p) return false;
        out[i] = percent ? v / 100.0 : v;
        p = end;
        if (*p == '%') ++p;
    }
    return true;
}

template <std::size_t N>
std::optional<std::array<double, N>> percents_after(std::string_view line, std::string_view key) {
    std::array<double, N> a{};
    if (!numbers_after(line, key, N, a.data(), true)) return std::nullopt;
    return a;
}

std::optional<double> bitrate_in(std::string_view line) {
    double v = 0.0;
    if (numbers_after(line, "kb/s:", 1, &v)) return v;
    if (starts_with(line, "encoded ")) {
        // encoded 20 frames, 120.00 fps, 850.20 kb/s
        const auto kb = line.rfind(" kb/s");
        const auto comma = line.rfind(',', kb);
        if (kb != std::string_view::npos && comma != std::string_view::npos) {
            const std::string num(line.substr(comma + 1, kb - comma - 1));
            char* end = nullptr;
            v = std::strtod(num.c_str(), &end);
            if (end != num.c_str()) return v;
        }
    }
    return std::nullopt;
}

}  // namespace

EncoderStats parse_stats_log(std::string_view text) {
    EncoderStats stats;
    bool saw_frame_line = false;
    std::optional<double> bitrate;

    std::size_t start = 0;
    while (start <= text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string_view::npos) end = text.size();
        const std::string_view line = strip_prefix(text.substr(start, end - start));
        start = end + 1;
        if (line.empty()) continue;

        if (starts_with(line, "frame ") && line.size() > 8 && line[7] == ':') {
            const char type = line[6];
            const std::size_t t = type == 'I' ? std::size_t(kFrameI) : type == 'P' ? std::size_t(kFrameP) : type == 'B' ? std::size_t(kFrameB) : 3;
            if (t == 3) continue;
            double count = 0.0;
            if (!numbers_after(line, std::string(1, type) + ":", 1, &count)) continue;
            auto& f = stats.frames[t];
            f.count = int(std::lround(count));
            numbers_after(line, "Avg QP:", 1, &f.avg_qp);
            numbers_after(line, "size:", 1, &f.avg_size_bytes);
            saw_frame_line = true;
        } else if (starts_with(line, "mb I")) {
            stats.mb_i = percents_after<3>(line, "I16..4:");
        } else if (starts_with(line, "mb P")) {
            const auto intra = percents_after<3>(line, "I16..4:");
            const auto inter = percents_after<5>(line, "P16..4:");
            const auto skip = percents_after<1>(line, "skip:");
            if (intra && inter && skip) {
                std::array<double, 9> m{};
                std::copy(intra->begin(), intra->end(), m.begin());
                std::copy(inter->begin(), inter->end(), m.begin() + 3);
                m[8] = (*skip)[0];
                stats.mb_p = m;
            }
        } else if (starts_with(line, "mb B")) {
            const auto intra = percents_after<3>(line, "I16..4:");
            const auto inter = percents_after<3>(line, "B16..8:");
            const auto direct = percents_after<1>(line, "direct:");
            const auto skip = percents_after<1>(line, "skip:");
            if (intra && inter && direct && skip) {
                std::array<double, 8> m{};
                std::copy(intra->begin(), intra->end(), m.begin());
                std::copy(inter->begin(), inter->end(), m.begin() + 3);
                m[6] = (*direct)[0];
                m[7] = (*skip)[0];
                stats.mb_b = m;
            }
            const auto l0 = percents_after<1>(line, "L0:");
            const auto l1 = percents_after<1>(line, "L1:");
            if (l0 && l1) stats.b_ref_direction = std::array<double, 2>{(*l0)[0], (*l1)[0]};
        } else if (starts_with(line, "8x8 transform")) {
            const auto intra = percents_after<1>(line, "intra:");
            const auto inter = percents_after<1>(line, "inter:");
            if (intra && inter) stats.transform_8x8 = std::array<double, 2>{(*intra)[0], (*inter)[0]};
        } else if (starts_with(line, "coded y,uvDC,uvAC")) {
            const auto intra = percents_after<3>(line, "intra:");
            const auto inter = percents_after<3>(line, "inter:");
            if (intra && inter)
                stats.coded_blocks = std::array<double, 6>{(*intra)[0], (*intra)[1], (*intra)[2],
                                                           (*inter)[0], (*inter)[1], (*inter)[2]};
        } else if (starts_with(line, "i16 v,h,dc,p:")) {
            stats.i16_modes = percents_after<4>(line, "i16 v,h,dc,p:");
        } else if (starts_with(line, "mv magnitude")) {
            std::array<double, 2> mv{};
            if (numbers_after(line, "mean:", 1, &mv[0]) && numbers_after(line, "var:", 1, &mv[1]))
                stats.mv_magnitude = mv;
        } else if (starts_with(line, "PSNR Mean")) {
            double y = 0.0, g = 0.0;
            if (numbers_after(line, "Y:", 1, &y)) stats.psnr_mean_y = y;
            if (numbers_after(line, "Global:", 1, &g)) stats.psnr_global = g;
        }
        if (const auto r = bitrate_in(line)) bitrate = r;
    }

    if (!saw_frame_line) throw ParseError("encoder log has no frame-type summary lines");
    if (!bitrate) throw ParseError("encoder log has no kb/s bitrate figure");
    stats.bitrate_kbps = *bitrate;
    return stats;
}

std::string render_stats_log(const EncoderStats& s) {
    auto num = [](double v) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    auto pct = [&](double v) { return num(v * 100.0) + "%"; };
    std::ostringstream out;
    static constexpr char kTypes[3] = {'I', 'P', 'B'};
    for (std::size_t t = 0; t < 3; ++t) {
        const auto& f = s.frames[t];
        if (f.count == 0) continue;
        out << "x264 [info]: frame " << kTypes[t] << ':' << f.count << " Avg QP:" << num(f.avg_qp)
            << " size:" << num(f.avg_size_bytes) << '\n';
    }
    if (s.mb_i) {
        const auto& m = *s.mb_i;
        out << "x264 [info]: mb I  I16..4: " << pct(m[0]) << ' ' << pct(m[1]) << ' ' << pct(m[2]) << '\n';
    }
    if (s.mb_p) {
        const auto& m = *s.mb_p;
        out << "x264 [info]: mb P  I16..4: " << pct(m[0]) << ' ' << pct(m[1]) << ' ' << pct(m[2])
            << "  P16..4: " << pct(m[3]) << ' ' << pct(m[4]) << ' ' << pct(m[5]) << ' ' << pct(m[6])
            << ' ' << pct(m[7]) << "  skip:" << pct(m[8]) << '\n';
    }
    if (s.mb_b) {
        const auto& m = *s.mb_b;
        out << "x264 [info]: mb B  I16..4: " << pct(m[0]) << ' ' << pct(m[1]) << ' ' << pct(m[2])
            << "  B16..8: " << pct(m[3]) << ' ' << pct(m[4]) << ' ' << pct(m[5]) << "  direct:" << pct(m[6])
            << "  skip:" << pct(m[7]);
        if (s.b_ref_direction) {
            const auto& d = *s.b_ref_direction;
            out << "  L0:" << pct(d[0]) << " L1:" << pct(d[1]) << " BI:" << pct(1.0 - d[0] - d[1]);
        }
        out << '\n';
    }
    if (s.transform_8x8)
        out << "x264 [info]: 8x8 transform intra:" << pct((*s.transform_8x8)[0])
            << " inter:" << pct((*s.transform_8x8)[1]) << '\n';
    if (s.coded_blocks) {
        const auto& c = *s.coded_blocks;
        out << "x264 [info]: coded y,uvDC,uvAC intra: " << pct(c[0]) << ' ' << pct(c[1]) << ' ' << pct(c[2])
            << " inter: " << pct(c[3]) << ' ' << pct(c[4]) << ' ' << pct(c[5]) << '\n';
    }
    if (s.i16_modes) {
        const auto& m = *s.i16_modes;
        out << "x264 [info]: i16 v,h,dc,p: " << pct(m[0]) << ' ' << pct(m[1]) << ' ' << pct(m[2]) << ' '
            << pct(m[3]) << '\n';
    }
    if (s.mv_magnitude)
        out << "x264 [info]: mv magnitude mean:" << num((*s.mv_magnitude)[0])
            << " var:" << num((*s.mv_magnitude)[1]) << '\n';
    if (s.psnr_mean_y || s.psnr_global) {
        out << "x264 [info]: PSNR Mean";
        if (s.psnr_mean_y) out << " Y:" << num(*s.psnr_mean_y);
        if (s.psnr_global) out << " Global:" << num(*s.psnr_global);
        out << '\n';
    }
    out << "x264 [info]: kb/s:" << num(s.bitrate_kbps) << '\n';
    return out.str();
}

// ---------------------------------------------------------------------------
// Backends

EncodeResult encode_measure(CodecBackend& backend, const ClipRef& clip, double crf, bool want_stats,
                            double lo, double hi) {
    if (!std::isfinite(crf) || crf < lo - 1e-9 || crf > hi + 1e-9)
        throw BoundsError("CRF " + std::to_string(crf) + " outside [" + std::to_string(lo) + ", " +
                          std::to_string(hi) + "]");
    return backend.encode(clip, crf, want_stats);
}

namespace {

std::string shell_quote(const std::string& s) {
    std::string out = "'";
    for (char c : s) {
        if (c == '\'') out += "'\\''";
        else out += c;
    }
    return out + "'";
}

std::string format_crf(double crf) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", crf);
    return buf;
}

}  // namespace

std::string expand_template(std::string tmpl, const std::vector<std::pair<std::string, std::string>>& vars) {
    for (const auto& [key, value] : vars) {
        const std::string token = "{" + key + "}";
        const std::string quoted = shell_quote(value);
        for (auto pos = tmpl.find(token); pos != std::string::npos; pos = tmpl.find(token, pos + quoted.size()))
            tmpl.replace(pos, token.size(), quoted);
    }
    return tmpl;
}

CommandResult run_command(const std::string& command, std::chrono::milliseconds timeout) {
    char path[] = "/tmp/rq-cmd-XXXXXX";
    const int fd = ::mkstemp(path);
    if (fd < 0) throw BackendError("cannot create capture file for: " + command);

    const pid_t pid = ::fork();
    if (pid < 0) {
        ::close(fd);
        ::unlink(path);
        throw BackendError("fork failed for: " + command);
    }
    if (pid == 0) {
        ::setpgid(0, 0);
        ::dup2(fd, STDOUT_FILENO);
        ::dup2(fd, STDERR_FILENO);
        const int devnull = ::open("/dev/null", O_RDONLY);
        if (devnull >= 0) ::dup2(devnull, STDIN_FILENO);
        ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
        ::_exit(127);
    }
    ::close(fd);

    CommandResult result;
    int status = 0;
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    for (;;) {
        const pid_t r = ::waitpid(pid, &status, WNOHANG);
        if (r == pid) break;
        if (r < 0) {
            status = -1;
            break;
        }
        if (std::chrono::steady_clock::now() >= deadline) {
            ::kill(-pid, SIGKILL);
            ::kill(pid, SIGKILL);
            ::waitpid(pid, &status, 0);
            result.timed_out = true;
            break;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    if (WIFEXITED(status)) result.exit_code = WEXITSTATUS(status);
    else result.exit_code = -1;

    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    result.output = ss.str();
    ::unlink(path);
    return result;
}

ExternalBackendConfig ExternalBackendConfig::from(const KeyValueConfig& cfg) {
    if (const auto bad = cfg.unknown_keys(known_keys()); !bad.empty())
        throw ConfigError("unknown backend config key: " + bad.front());
    ExternalBackendConfig out;
    out.encode_command = cfg.get_or("encode_command", "");
    out.metric_command = cfg.get_or("metric_command", "");
    if (out.encode_command.empty()) throw ConfigError("backend config lacks encode_command");
    if (out.metric_command.empty()) throw ConfigError("backend config lacks metric_command");
    out.metric_pattern = cfg.get_or("metric_pattern", out.metric_pattern);
    out.work_dir = cfg.get_or("work_dir", out.work_dir.string());
    out.output_extension = cfg.get_or("output_extension", out.output_extension);
    out.timeout = std::chrono::seconds(cfg.get_int("timeout_seconds", out.timeout.count()));
    out.max_parallel = int(cfg.get_int("max_parallel", out.max_parallel));
    if (out.timeout.count() <= 0) throw ConfigError("timeout_seconds must be positive");
    if (out.max_parallel < 1 || out.max_parallel > 64) throw ConfigError("max_parallel must be in [1, 64]");
    try {
        std::regex re(out.metric_pattern);
    } catch (const std::regex_error&) {
        throw ConfigError("metric_pattern is not a valid regular expression");
    }
    return out;
}

std::vector<std::string> ExternalBackendConfig::known_keys() {
    return {"encode_command", "metric_command", "metric_pattern", "work_dir",
            "output_extension", "timeout_seconds", "max_parallel"};
}

ExternalBackend::ExternalBackend(ExternalBackendConfig cfg)
    : cfg_(std::move(cfg)), slots_(cfg_.max_parallel) {}

EncodeResult ExternalBackend::encode(const ClipRef& clip, double crf, bool want_stats) {
    struct SlotGuard {
        std::counting_semaphore<64>& s;
        explicit SlotGuard(std::counting_semaphore<64>& sem) : s(sem) { s.acquire(); }
        ~SlotGuard() { s.release(); }
    } guard(slots_);

    if (clip.frame_count == 0 || clip.frame_rate.value() <= 0.0)
        throw BackendError("clip " + clip.id + " lacks frame count or frame rate");
    std::error_code ec;
    std::filesystem::create_directories(cfg_.work_dir, ec);
    const std::string stem = clip.path.stem().string();
    const auto output = cfg_.work_dir / (stem + "_crf" + format_crf(crf) + "." + cfg_.output_extension);

    const std::string encode_cmd = expand_template(
        cfg_.encode_command, {{"input", clip.path.string()}, {"output", output.string()}, {"crf", format_crf(crf)}});
    const auto enc = run_command(encode_cmd, cfg_.timeout);
    if (enc.timed_out) throw BackendError("encode timed out: " + encode_cmd, enc.output);
    if (enc.exit_code == 127) throw BackendError("encoder command not found: " + encode_cmd, enc.output);
    if (enc.exit_code != 0)
        throw BackendError("encoder exited with status " + std::to_string(enc.exit_code) + ": " + encode_cmd,
                           enc.output);

    const auto size = std::filesystem::file_size(output, ec);
    if (ec || size == 0) throw BackendError("encoder produced no output file " + output.string(), enc.output);

    const std::string metric_cmd =
        expand_template(cfg_.metric_command, {{"reference", clip.path.string()}, {"distorted", output.string()}});
    const auto met = run_command(metric_cmd, cfg_.timeout);
    if (met.timed_out) throw BackendError("metric tool timed out: " + metric_cmd, met.output);
    if (met.exit_code == 127) throw BackendError("metric command not found: " + metric_cmd, met.output);
    if (met.exit_code != 0)
        throw BackendError("metric tool exited with status " + std::to_string(met.exit_code) + ": " + metric_cmd,
                           met.output);
    std::smatch m;
    const std::regex re(cfg_.metric_pattern);
    if (!std::regex_search(met.output, m, re) || m.size() < 2)
        throw BackendError("cannot find a quality score in metric output of: " + metric_cmd, met.output);

    EncodeResult result;
    result.crf = crf;
    result.vmaf = std::stod(m[1].str());
    const double seconds = double(clip.frame_count) / clip.frame_rate.value();
    result.bitrate = double(size) * 8.0 / seconds / 1000.0;
    if (want_stats) {
        try {
            result.stats = parse_stats_log(enc.output);
        } catch (const ParseError& e) {
            throw BackendError(std::string("encoder log unparsable: ") + e.what(), enc.output);
        }
        result.stats->quality = result.vmaf;
    }
    if (!(result.vmaf >= 0.0 && result.vmaf <= 100.0))
        throw BackendError("metric score outside [0, 100]: " + m[1].str(), met.output);
    return result;
}

}  // namespace rq
