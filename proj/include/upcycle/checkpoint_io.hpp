#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "upcycle/fusion.hpp"
#include "upcycle/moe.hpp"
#include "upcycle/transformer.hpp"

namespace upcycle {

inline constexpr int kCheckpointFormatVersion = 1;

enum class CheckpointErrorCode {
  io,
  parse,
  version_mismatch,
  kind_mismatch,
  overlap,
  out_of_bounds,
  shape_inconsistency,
  non_finite,
  missing_tensor,
  duplicate_name,
};

std::string to_string(CheckpointErrorCode c);

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(CheckpointErrorCode code, const std::string& message, std::string tensor = {})
      : std::runtime_error(to_string(code) + ": " + message), code_(code), tensor_(std::move(tensor)) {}

  CheckpointErrorCode code() const noexcept { return code_; }
  // Offending tensor name, when the error concerns one.
  const std::string& tensor() const noexcept { return tensor_; }

 private:
  CheckpointErrorCode code_;
  std::string tensor_;
};

enum class CheckpointKind { dense, backbone, moe };
std::string to_string(CheckpointKind k);
CheckpointKind parse_kind(const std::string& s);

struct TensorEntry {
  std::string name;
  Shape shape;
  std::string dtype = "f32";
  std::size_t byte_offset = 0;
  std::size_t byte_length = 0;
};

struct CheckpointManifest {
  int format_version = kCheckpointFormatVersion;
  CheckpointKind kind = CheckpointKind::dense;
  TransformerConfig config;
  std::size_t n_experts = 0;  // moe only
  RoutingConfig routing;      // moe only
  std::vector<TensorEntry> tensors;
  nlohmann::json provenance = nlohmann::json::object();
};

nlohmann::json to_json(const TransformerConfig& c);
TransformerConfig config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const CheckpointManifest& m);
CheckpointManifest manifest_from_json(const nlohmann::json& j);

// A checkpoint is a directory holding manifest.json and data.bin. Scalars are
// stored as little-endian f32 regardless of T.
template <class T>
void save_checkpoint(const DenseCheckpoint<T>& ckpt, const std::string& dir);
template <class T>
void save_checkpoint(const BackboneCheckpoint<T>& ckpt, const std::string& dir);
template <class T>
void save_checkpoint(const MoECheckpoint<T>& ckpt, const std::string& dir);

// All loaders validate the whole manifest against the blob and the config
// before constructing anything; failures throw CheckpointError.
CheckpointManifest read_manifest(const std::string& dir);
template <class T>
DenseCheckpoint<T> load_dense(const std::string& dir);
template <class T>
BackboneCheckpoint<T> load_backbone(const std::string& dir);
template <class T>
MoECheckpoint<T> load_moe(const std::string& dir);

}  // namespace upcycle
