#pragma once

// Self-describing JSON checkpoint container: a versioned header, a config
// object and a list of named tensors. Doubles are written in shortest
// round-trip form, so save -> load is exact.

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "dfad/optim.hpp"

namespace dfad {

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointFormat = "dfad-checkpoint";

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline nlohmann::json params_to_json(const ParamSet& params) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& [name, t] : params.entries()) {
    arr.push_back({{"name", name},
                   {"shape", t.shape()},
                   {"values", std::vector<double>(t.values().begin(), t.values().end())}});
  }
  return arr;
}

inline ParamSet params_from_json(const nlohmann::json& arr, bool requires_grad = true) {
  ParamSet out;
  for (const auto& e : arr) {
    out.add(e.at("name").get<std::string>(),
            Tensor(e.at("shape").get<Shape>(), e.at("values").get<std::vector<double>>(),
                   requires_grad));
  }
  return out;
}

struct Checkpoint {
  std::string kind;  // "gnn" or "generator"
  nlohmann::json config;
  ParamSet params;
};

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json j{{"format", kCheckpointFormat},
                   {"version", kCheckpointVersion},
                   {"kind", ckpt.kind},
                   {"config", ckpt.config},
                   {"tensors", params_to_json(ckpt.params)}};
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out << j.dump() << '\n';
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
  if (j.value("format", "") != kCheckpointFormat) {
    throw CheckpointError(path.string() + ": not a dfad checkpoint");
  }
  if (j.value("version", 0) != kCheckpointVersion) {
    throw CheckpointError(path.string() + ": unsupported checkpoint version " +
                          std::to_string(j.value("version", 0)));
  }
  return Checkpoint{j.at("kind").get<std::string>(), j.at("config"),
                    params_from_json(j.at("tensors"))};
}

}  // namespace dfad
