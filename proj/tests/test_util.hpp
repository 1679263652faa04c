#pragma once

#include <atomic>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "rq/ingest.hpp"
#include "rq/random.hpp"

namespace rqtest {

class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("rq_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline rq::LumaPlane random_plane(int w, int h, rq::Rng& rng, int hi = 256) {
    rq::LumaPlane p(w, h);
    for (auto& s : p.samples) s = std::uint8_t(rng.below(std::uint64_t(hi)));
    return p;
}

inline rq::VideoClip random_clip(int w, int h, int frames, std::uint64_t seed) {
    rq::Rng rng(seed);
    rq::VideoClip c;
    c.width = w;
    c.height = h;
    c.frame_rate = {30, 1};
    for (int i = 0; i < frames; ++i) c.frames.push_back(random_plane(w, h, rng));
    return c;
}

}  // namespace rqtest
