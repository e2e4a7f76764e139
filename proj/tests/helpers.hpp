#pragma once

#include <filesystem>
#include <string>

#include "f2p/datagen.hpp"

namespace f2p::test {

// Fresh scratch directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() / ("f2p_test_" + tag);
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

inline DatasetConfig small_config(const std::filesystem::path& out, int n = 40, std::uint64_t seed = 3) {
  DatasetConfig c;
  c.sample_count = n;
  c.seed = seed;
  c.output_dir = out.string();
  return c;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

} // namespace f2p::test
