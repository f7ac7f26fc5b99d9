#pragma once
// Shared helpers for the test suite: temp directories and random slices.

#include <algorithm>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "evcm/types.hpp"

namespace evcm_test {

// Self-cleaning unique directory under the system temp root.
class TempDir {
 public:
  TempDir() {
    static std::mt19937_64 rng{std::random_device{}()};
    const std::string name = "evcm_test_" + std::to_string(rng());
    path_ = std::filesystem::temp_directory_path() / name;
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path file(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

// Random valid slice with tight window bounds [t_first, t_last + 1] so that
// file round-trips reproduce the bounds exactly.
inline evcm::EventSlice random_slice(std::mt19937_64& rng, std::size_t n_events,
                                     int max_w = 640, int max_h = 480) {
  evcm::EventSlice s;
  s.width = static_cast<std::uint16_t>(std::uniform_int_distribution<int>(1, max_w)(rng));
  s.height = static_cast<std::uint16_t>(std::uniform_int_distribution<int>(1, max_h)(rng));
  std::vector<std::uint64_t> ts(n_events);
  std::uniform_int_distribution<std::uint64_t> td(0, 10'000'000);
  for (auto& t : ts) t = td(rng);
  std::sort(ts.begin(), ts.end());
  std::uniform_int_distribution<int> xd(0, s.width - 1), yd(0, s.height - 1), pd(0, 1);
  s.events.reserve(n_events);
  for (std::uint64_t t : ts) {
    evcm::Event e;
    e.t_us = t;
    e.x = static_cast<std::uint16_t>(xd(rng));
    e.y = static_cast<std::uint16_t>(yd(rng));
    e.p = pd(rng) ? 1 : -1;
    s.events.push_back(e);
  }
  s.t_start_us = n_events ? s.events.front().t_us : 0;
  s.t_end_us = n_events ? s.events.back().t_us + 1 : 0;
  return s;
}

inline evcm::Image<float> random_float_image(std::mt19937_64& rng, int max_dim = 64) {
  std::uniform_int_distribution<int> dim(1, max_dim);
  std::uniform_real_distribution<float> val(-1000.0f, 1000.0f);
  evcm::Image<float> img(dim(rng), dim(rng));
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = val(rng);
  return img;
}

}  // namespace evcm_test
