#include "attrobf/checkpoint.hpp"

#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>

#include "attrobf/errors.hpp"

namespace attrobf {

namespace {

constexpr const char* kMagic = "attrobf-checkpoint";

}  // namespace

CheckpointWriter::CheckpointWriter(const std::string& kind) {
  archive_.write("format", c10::IValue(std::string(kMagic)));
  archive_.write("version", c10::IValue(kCheckpointVersion));
  archive_.write("kind", c10::IValue(kind));
}

void CheckpointWriter::put(const std::string& key, const std::string& value) {
  archive_.write(key, c10::IValue(value));
}

void CheckpointWriter::put(const std::string& key, int64_t value) { archive_.write(key, c10::IValue(value)); }

void CheckpointWriter::put_module(const std::string& key, const torch::nn::Module& module) {
  torch::serialize::OutputArchive sub;
  module.save(sub);
  archive_.write(key, sub);
}

void CheckpointWriter::put_optimizer(const std::string& key, const torch::optim::Optimizer& optimizer) {
  torch::serialize::OutputArchive sub;
  optimizer.save(sub);
  archive_.write(key, sub);
}

void CheckpointWriter::commit(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  try {
    archive_.save_to(tmp.string());
  } catch (const c10::Error& e) {
    throw IoError("cannot write checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
  std::filesystem::rename(tmp, path);
}

CheckpointReader::CheckpointReader(const std::filesystem::path& path) : path_(path) {
  if (!std::filesystem::exists(path)) throw IoError("missing checkpoint " + path.string());
  try {
    archive_.load_from(path.string());
  } catch (const c10::Error& e) {
    throw IoError("cannot read checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
  c10::IValue v;
  if (!archive_.try_read("format", v) || !v.isString() || v.toStringRef() != kMagic)
    throw IoError("not a checkpoint file: " + path.string());
  if (get_int("version") != kCheckpointVersion)
    throw IoError("unsupported checkpoint version in " + path.string());
  kind_ = get_string("kind");
}

bool CheckpointReader::has(const std::string& key) {
  c10::IValue v;
  if (archive_.try_read(key, v)) return true;
  torch::serialize::InputArchive sub;
  return archive_.try_read(key, sub);
}

std::string CheckpointReader::get_string(const std::string& key) {
  c10::IValue v;
  if (!archive_.try_read(key, v) || !v.isString())
    throw IoError("checkpoint " + path_.string() + " lacks string field '" + key + "'");
  return v.toStringRef();
}

int64_t CheckpointReader::get_int(const std::string& key) {
  c10::IValue v;
  if (!archive_.try_read(key, v) || !v.isInt())
    throw IoError("checkpoint " + path_.string() + " lacks integer field '" + key + "'");
  return v.toInt();
}

void CheckpointReader::load_module(const std::string& key, torch::nn::Module& module) {
  torch::serialize::InputArchive sub;
  if (!archive_.try_read(key, sub)) throw IoError("checkpoint " + path_.string() + " lacks module '" + key + "'");
  module.load(sub);
}

void CheckpointReader::load_optimizer(const std::string& key, torch::optim::Optimizer& optimizer) {
  torch::serialize::InputArchive sub;
  if (!archive_.try_read(key, sub)) throw IoError("checkpoint " + path_.string() + " lacks optimizer '" + key + "'");
  optimizer.load(sub);
}

std::string CheckpointReader::version_tag() {
  const auto iteration = has("iteration") ? get_int("iteration") : 0;
  return kind_ + "@" + std::to_string(iteration) + "-" + file_digest(path_).substr(0, 8);
}

std::string file_digest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  const auto h = std::hash<std::string>{}(buf.str());
  std::ostringstream hex;
  hex << std::hex << std::setw(16) << std::setfill('0') << h;
  return hex.str();
}

}  // namespace attrobf
