#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>

namespace attrobf {

inline constexpr int64_t kCheckpointVersion = 1;

/// Versioned checkpoint container (a torch archive with a fixed header).
/// commit() writes to a temporary file and renames it into place.
class CheckpointWriter {
 public:
  explicit CheckpointWriter(const std::string& kind);

  void put(const std::string& key, const std::string& value);
  void put(const std::string& key, int64_t value);
  void put_module(const std::string& key, const torch::nn::Module& module);
  void put_optimizer(const std::string& key, const torch::optim::Optimizer& optimizer);
  void commit(const std::filesystem::path& path);

 private:
  torch::serialize::OutputArchive archive_;
};

class CheckpointReader {
 public:
  explicit CheckpointReader(const std::filesystem::path& path);

  const std::string& kind() const { return kind_; }
  const std::filesystem::path& path() const { return path_; }
  bool has(const std::string& key);
  std::string get_string(const std::string& key);
  int64_t get_int(const std::string& key);
  void load_module(const std::string& key, torch::nn::Module& module);
  void load_optimizer(const std::string& key, torch::optim::Optimizer& optimizer);

  /// kind, iteration and a short content hash of the file, e.g. "stage2@5000-1a2b3c4d".
  std::string version_tag();

 private:
  std::filesystem::path path_;
  torch::serialize::InputArchive archive_;
  std::string kind_;
};

/// Hex digest of a file's bytes (not cryptographic; used for version tags and
/// for detecting modification).
std::string file_digest(const std::filesystem::path& path);

}  // namespace attrobf
