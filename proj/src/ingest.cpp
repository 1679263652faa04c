#include "rq/ingest.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include "rq/error.hpp"

namespace rq {

double VideoClip::duration_seconds() const {
    const double fps = frame_rate.value();
    return fps > 0.0 ? double(frame_count()) / fps : 0.0;
}

void VideoClip::validate() const {
    if (width < 16 || height < 16)
        throw ParseError("clip dimensions " + std::to_string(width) + "x" + std::to_string(height) +
                         " below 16x16");
    if (frames.empty()) throw ParseError("clip has no frames");
    for (std::size_t i = 0; i < frames.size(); ++i) {
        const auto& f = frames[i];
        if (f.width != width || f.height != height ||
            f.samples.size() != std::size_t(width) * std::size_t(height))
            throw ParseError("frame " + std::to_string(i) + " has mismatched dimensions");
    }
}

namespace {

ChromaLayout parse_chroma_tag(const std::string& tag, std::size_t offset) {
    // Bit-depth suffixes: 420p10, 422p12, 444p16, mono16 ...
    const auto p = tag.find('p');
    if (p != std::string::npos && p + 1 < tag.size() && std::isdigit(static_cast<unsigned char>(tag[p + 1])))
        throw ParseError("unsupported bit depth in chroma tag C" + tag, offset);
    if (tag.rfind("mono", 0) == 0) {
        if (tag != "mono") throw ParseError("unsupported bit depth in chroma tag C" + tag, offset);
        return ChromaLayout::kMono;
    }
    if (tag.rfind("420", 0) == 0) return ChromaLayout::k420;
    if (tag == "422") return ChromaLayout::k422;
    if (tag == "444") return ChromaLayout::k444;
    throw ParseError("unsupported chroma tag C" + tag, offset);
}

std::size_t chroma_bytes(ChromaLayout layout, int w, int h) {
    const std::size_t cw2 = std::size_t((w + 1) / 2), ch2 = std::size_t((h + 1) / 2);
    switch (layout) {
        case ChromaLayout::k420: return 2 * cw2 * ch2;
        case ChromaLayout::k422: return 2 * cw2 * std::size_t(h);
        case ChromaLayout::k444: return 2 * std::size_t(w) * std::size_t(h);
        case ChromaLayout::kMono: return 0;
    }
    return 0;
}

int parse_int_tag(const std::string& token, std::size_t offset) {
    try {
        std::size_t used = 0;
        const int v = std::stoi(token.substr(1), &used);
        if (used + 1 != token.size()) throw std::invalid_argument(token);
        return v;
    } catch (const std::exception&) {
        throw ParseError("malformed Y4M tag '" + token + "'", offset);
    }
}

}  // namespace

VideoClip parse_y4m(std::istream& in) {
    static const std::string kSignature = "YUV4MPEG2";
    std::size_t offset = 0;
    std::string header;
    if (!std::getline(in, header)) throw ParseError("empty Y4M stream", 0);
    if (in.eof()) throw ParseError("Y4M header not terminated by newline", header.size());
    if (header.rfind(kSignature, 0) != 0) throw ParseError("missing YUV4MPEG2 signature", 0);

    VideoClip clip;
    ChromaLayout layout = ChromaLayout::k420;
    std::istringstream tags(header.substr(kSignature.size()));
    std::string token;
    while (tags >> token) {
        const std::size_t tag_offset = header.find(token);
        switch (token[0]) {
            case 'W': clip.width = parse_int_tag(token, tag_offset); break;
            case 'H': clip.height = parse_int_tag(token, tag_offset); break;
            case 'F': {
                const auto colon = token.find(':');
                if (colon == std::string::npos) throw ParseError("malformed frame rate " + token, tag_offset);
                try {
                    clip.frame_rate.num = std::stoi(token.substr(1, colon - 1));
                    clip.frame_rate.den = std::stoi(token.substr(colon + 1));
                } catch (const std::exception&) {
                    throw ParseError("malformed frame rate " + token, tag_offset);
                }
                if (clip.frame_rate.num <= 0 || clip.frame_rate.den <= 0)
                    throw ParseError("non-positive frame rate " + token, tag_offset);
                break;
            }
            case 'C': layout = parse_chroma_tag(token.substr(1), tag_offset); break;
            default: break;  // I, A, X tags carry nothing the features need
        }
    }
    if (clip.width <= 0 || clip.height <= 0) throw ParseError("Y4M header lacks W/H", 0);
    offset = header.size() + 1;

    const std::size_t luma = std::size_t(clip.width) * std::size_t(clip.height);
    const std::size_t chroma = chroma_bytes(layout, clip.width, clip.height);
    std::vector<char> skip(chroma);
    std::string frame_line;
    for (std::size_t index = 0;; ++index) {
        if (in.peek() == std::char_traits<char>::eof()) break;
        if (!std::getline(in, frame_line) || in.eof())
            throw ParseError("truncated FRAME header for frame " + std::to_string(index), offset);
        if (frame_line.rfind("FRAME", 0) != 0)
            throw ParseError("expected FRAME marker for frame " + std::to_string(index), offset);
        offset += frame_line.size() + 1;

        LumaPlane plane(clip.width, clip.height);
        in.read(reinterpret_cast<char*>(plane.samples.data()), std::streamsize(luma));
        if (std::size_t(in.gcount()) != luma)
            throw ParseError("truncated frame " + std::to_string(index), offset + std::size_t(in.gcount()));
        offset += luma;
        if (chroma > 0) {
            in.read(skip.data(), std::streamsize(chroma));
            if (std::size_t(in.gcount()) != chroma)
                throw ParseError("truncated frame " + std::to_string(index),
                                 offset + std::size_t(in.gcount()));
            offset += chroma;
        }
        clip.frames.push_back(std::move(plane));
    }
    if (clip.frames.empty()) throw ParseError("Y4M stream has no frames", offset);
    clip.validate();
    return clip;
}

VideoClip read_y4m(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open " + path.string());
    return parse_y4m(in);
}

void write_y4m(std::ostream& out, const VideoClip& clip) {
    out << "YUV4MPEG2 W" << clip.width << " H" << clip.height << " F" << clip.frame_rate.num << ':'
        << clip.frame_rate.den << " Ip A1:1 C420jpeg\n";
    const std::size_t chroma = chroma_bytes(ChromaLayout::k420, clip.width, clip.height);
    const std::vector<char> neutral(chroma, char(128));
    for (const auto& f : clip.frames) {
        out << "FRAME\n";
        out.write(reinterpret_cast<const char*>(f.samples.data()), std::streamsize(f.samples.size()));
        out.write(neutral.data(), std::streamsize(neutral.size()));
    }
}

void write_y4m(const std::filesystem::path& path, const VideoClip& clip) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ParseError("cannot create " + path.string());
    write_y4m(out, clip);
}

VideoClip read_raw_yuv(const std::filesystem::path& path, int width, int height, FrameRate rate,
                       ChromaLayout layout) {
    if (width < 16 || height < 16) throw ParseError("raw YUV needs dimensions of at least 16x16");
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open " + path.string());
    VideoClip clip;
    clip.width = width;
    clip.height = height;
    clip.frame_rate = rate;
    const std::size_t luma = std::size_t(width) * std::size_t(height);
    const std::size_t chroma = chroma_bytes(layout, width, height);
    std::vector<char> skip(chroma);
    std::size_t offset = 0;
    for (std::size_t index = 0; in.peek() != std::char_traits<char>::eof(); ++index) {
        LumaPlane plane(width, height);
        in.read(reinterpret_cast<char*>(plane.samples.data()), std::streamsize(luma));
        if (std::size_t(in.gcount()) != luma)
            throw ParseError("truncated raw frame " + std::to_string(index), offset + std::size_t(in.gcount()));
        if (chroma > 0) {
            in.read(skip.data(), std::streamsize(chroma));
            if (std::size_t(in.gcount()) != chroma)
                throw ParseError("truncated raw frame " + std::to_string(index),
                                 offset + luma + std::size_t(in.gcount()));
        }
        offset += luma + chroma;
        clip.frames.push_back(std::move(plane));
    }
    clip.validate();
    return clip;
}

namespace {

// Per-output-sample list of (source index, weight) for 1-D area averaging.
struct Tap {
    int index;
    double weight;
};

std::vector<std::vector<Tap>> area_taps(int in_size, int out_size) {
    std::vector<std::vector<Tap>> taps(static_cast<std::size_t>(out_size));
    const double scale = double(in_size) / double(out_size);
    for (int o = 0; o < out_size; ++o) {
        const double lo = o * scale, hi = (o + 1) * scale;
        for (int s = int(std::floor(lo)); s < int(std::ceil(hi)) && s < in_size; ++s) {
            const double w = std::min(hi, double(s + 1)) - std::max(lo, double(s));
            if (w > 0.0) taps[std::size_t(o)].push_back({s, w / scale});
        }
    }
    return taps;
}

}  // namespace

LumaPlane resample_area(const LumaPlane& src, int out_width, int out_height) {
    const auto xt = area_taps(src.width, out_width);
    const auto yt = area_taps(src.height, out_height);
    std::vector<double> rows(std::size_t(src.height) * std::size_t(out_width));
    for (int y = 0; y < src.height; ++y)
        for (int x = 0; x < out_width; ++x) {
            double acc = 0.0;
            for (const auto& t : xt[std::size_t(x)]) acc += t.weight * src.at(t.index, y);
            rows[std::size_t(y) * out_width + x] = acc;
        }
    LumaPlane out(out_width, out_height);
    for (int y = 0; y < out_height; ++y)
        for (int x = 0; x < out_width; ++x) {
            double acc = 0.0;
            for (const auto& t : yt[std::size_t(y)]) acc += t.weight * rows[std::size_t(t.index) * out_width + x];
            out.at(x, y) = std::uint8_t(std::clamp(std::lround(acc), 0L, 255L));
        }
    return out;
}

VideoClip downsample_to_360p(const VideoClip& clip) {
    if (clip.height <= 360) return clip;
    const int out_h = 360;
    int out_w = 2 * int(std::lround(double(clip.width) * out_h / clip.height / 2.0));
    out_w = std::max(out_w, 2);
    VideoClip out;
    out.width = out_w;
    out.height = out_h;
    out.frame_rate = clip.frame_rate;
    out.frames.reserve(clip.frames.size());
    for (const auto& f : clip.frames) out.frames.push_back(resample_area(f, out_w, out_h));
    return out;
}

}  // namespace rq
