#include "upcycle/checkpoint_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

namespace upcycle {

namespace fs = std::filesystem;

std::string to_string(CheckpointErrorCode c) {
  switch (c) {
    case CheckpointErrorCode::io: return "io";
    case CheckpointErrorCode::parse: return "parse";
    case CheckpointErrorCode::version_mismatch: return "version_mismatch";
    case CheckpointErrorCode::kind_mismatch: return "kind_mismatch";
    case CheckpointErrorCode::overlap: return "overlap";
    case CheckpointErrorCode::out_of_bounds: return "out_of_bounds";
    case CheckpointErrorCode::shape_inconsistency: return "shape_inconsistency";
    case CheckpointErrorCode::non_finite: return "non_finite";
    case CheckpointErrorCode::missing_tensor: return "missing_tensor";
    case CheckpointErrorCode::duplicate_name: return "duplicate_name";
  }
  return "unknown";
}

std::string to_string(CheckpointKind k) {
  switch (k) {
    case CheckpointKind::dense: return "dense";
    case CheckpointKind::backbone: return "backbone";
    case CheckpointKind::moe: return "moe";
  }
  return "?";
}

CheckpointKind parse_kind(const std::string& s) {
  if (s == "dense") return CheckpointKind::dense;
  if (s == "backbone") return CheckpointKind::backbone;
  if (s == "moe") return CheckpointKind::moe;
  throw CheckpointError(CheckpointErrorCode::parse, "unknown checkpoint kind '" + s + "'");
}

nlohmann::json to_json(const TransformerConfig& c) {
  return {{"d_model", c.d_model},       {"n_layers", c.n_layers},       {"n_heads", c.n_heads},
          {"d_ffn", c.d_ffn},           {"vocab_size", c.vocab_size},   {"max_seq_len", c.max_seq_len},
          {"rope_theta", c.rope_theta}, {"norm_eps", c.norm_eps}};
}

TransformerConfig config_from_json(const nlohmann::json& j) {
  TransformerConfig c;
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.d_ffn = j.at("d_ffn").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  c.rope_theta = j.at("rope_theta").get<double>();
  c.norm_eps = j.at("norm_eps").get<double>();
  return c;
}

nlohmann::json to_json(const CheckpointManifest& m) {
  nlohmann::json j;
  j["format_version"] = m.format_version;
  j["kind"] = to_string(m.kind);
  j["config"] = to_json(m.config);
  if (m.kind == CheckpointKind::moe) {
    j["n_experts"] = m.n_experts;
    j["routing"] = {{"k", m.routing.k}, {"renormalize", m.routing.renormalize}};
  }
  j["tensors"] = nlohmann::json::array();
  for (const auto& t : m.tensors) {
    j["tensors"].push_back({{"name", t.name},
                            {"shape", t.shape},
                            {"dtype", t.dtype},
                            {"byte_offset", t.byte_offset},
                            {"byte_length", t.byte_length}});
  }
  j["provenance"] = m.provenance;
  return j;
}

CheckpointManifest manifest_from_json(const nlohmann::json& j) {
  try {
    CheckpointManifest m;
    m.format_version = j.at("format_version").get<int>();
    if (m.format_version != kCheckpointFormatVersion) {
      throw CheckpointError(CheckpointErrorCode::version_mismatch,
                            "format_version " + std::to_string(m.format_version) + ", this build reads " +
                                std::to_string(kCheckpointFormatVersion));
    }
    m.kind = parse_kind(j.at("kind").get<std::string>());
    m.config = config_from_json(j.at("config"));
    if (m.kind == CheckpointKind::moe) {
      m.n_experts = j.at("n_experts").get<std::size_t>();
      m.routing.k = j.at("routing").at("k").get<std::size_t>();
      m.routing.renormalize = j.at("routing").at("renormalize").get<bool>();
    }
    for (const auto& t : j.at("tensors")) {
      m.tensors.push_back({t.at("name").get<std::string>(), t.at("shape").get<Shape>(),
                           t.at("dtype").get<std::string>(), t.at("byte_offset").get<std::size_t>(),
                           t.at("byte_length").get<std::size_t>()});
    }
    m.provenance = j.value("provenance", nlohmann::json::object());
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(CheckpointErrorCode::parse, std::string("malformed manifest: ") + e.what());
  }
}

namespace {

void write_f32(std::vector<unsigned char>& out, float v) {
  const auto u = std::bit_cast<std::uint32_t>(v);
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<unsigned char>(u >> (8 * b)));
}

float read_f32(const unsigned char* p) {
  const std::uint32_t u = p[0] | (p[1] << 8) | (p[2] << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  return std::bit_cast<float>(u);
}

template <class C>
void write_checkpoint(const C& ckpt, CheckpointManifest manifest, const std::string& dir) {
  std::vector<unsigned char> blob;
  std::set<std::string> names;
  for_each_tensor(ckpt, [&](const std::string& name, const auto& t) {
    if (!names.insert(name).second) throw CheckpointError(CheckpointErrorCode::duplicate_name, name, name);
    if (!all_finite(t)) {
      throw CheckpointError(CheckpointErrorCode::non_finite, "tensor '" + name + "' holds NaN or Inf", name);
    }
    TensorEntry e{name, t.shape(), "f32", blob.size(), t.size() * 4};
    for (auto v : t.data()) write_f32(blob, static_cast<float>(v));
    manifest.tensors.push_back(std::move(e));
  });
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw CheckpointError(CheckpointErrorCode::io, "cannot create " + dir + ": " + ec.message());
  {
    std::ofstream out(fs::path(dir) / "data.bin", std::ios::binary);
    out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
    if (!out) throw CheckpointError(CheckpointErrorCode::io, "cannot write " + dir + "/data.bin");
  }
  std::ofstream out(fs::path(dir) / "manifest.json", std::ios::binary);
  out << to_json(manifest).dump(2) << '\n';
  if (!out) throw CheckpointError(CheckpointErrorCode::io, "cannot write " + dir + "/manifest.json");
}

struct LoadedBlob {
  CheckpointManifest manifest;
  std::vector<unsigned char> data;
  std::map<std::string, const TensorEntry*> by_name;
};

LoadedBlob read_blob(const std::string& dir, CheckpointKind want) {
  LoadedBlob b;
  b.manifest = read_manifest(dir);
  if (b.manifest.kind != want) {
    throw CheckpointError(CheckpointErrorCode::kind_mismatch,
                          dir + " holds a " + to_string(b.manifest.kind) + " checkpoint, expected " + to_string(want));
  }
  std::ifstream in(fs::path(dir) / "data.bin", std::ios::binary);
  if (!in) throw CheckpointError(CheckpointErrorCode::io, "cannot open " + dir + "/data.bin");
  b.data.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());

  for (const auto& e : b.manifest.tensors) {
    if (!b.by_name.emplace(e.name, &e).second) {
      throw CheckpointError(CheckpointErrorCode::duplicate_name, "tensor '" + e.name + "' listed twice", e.name);
    }
    if (e.dtype != "f32") {
      throw CheckpointError(CheckpointErrorCode::parse, "tensor '" + e.name + "' has dtype " + e.dtype, e.name);
    }
    if (e.byte_length != shape_numel(e.shape) * 4) {
      throw CheckpointError(CheckpointErrorCode::shape_inconsistency,
                            "tensor '" + e.name + "' byte_length " + std::to_string(e.byte_length) +
                                " does not match shape " + shape_str(e.shape),
                            e.name);
    }
  }
  std::vector<const TensorEntry*> sorted;
  for (const auto& e : b.manifest.tensors) sorted.push_back(&e);
  std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* c) {
    return a->byte_offset != c->byte_offset ? a->byte_offset < c->byte_offset : a->name < c->name;
  });
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    const auto* prev = sorted[i - 1];
    if (prev->byte_offset + prev->byte_length > sorted[i]->byte_offset && sorted[i]->byte_length > 0) {
      throw CheckpointError(CheckpointErrorCode::overlap,
                            "tensors '" + prev->name + "' and '" + sorted[i]->name + "' overlap", sorted[i]->name);
    }
  }
  for (const auto& e : b.manifest.tensors) {
    if (e.byte_offset > b.data.size() || e.byte_length > b.data.size() - e.byte_offset) {
      throw CheckpointError(CheckpointErrorCode::out_of_bounds,
                            "tensor '" + e.name + "' [" + std::to_string(e.byte_offset) + ", " +
                                std::to_string(e.byte_offset + e.byte_length) + ") exceeds data.bin of " +
                                std::to_string(b.data.size()) + " bytes",
                            e.name);
    }
  }
  return b;
}

Shape expected_shape(const std::string& name, const TransformerConfig& c, std::size_t n_experts) {
  auto ends = [&](const std::string& s) {
    return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
  };
  const std::size_t d = c.d_model, f = c.d_ffn;
  if (name == "embedding") return {c.vocab_size, d};
  if (ends("gamma")) return {d};
  if (ends(".router")) return {d, n_experts};
  if (ends(".up")) return {d, f};
  if (ends(".down")) return {f, d};
  return {d, d};
}

template <class T, class C>
void fill_tensors(C& ckpt, const LoadedBlob& b, std::size_t n_experts) {
  std::size_t used = 0;
  for_each_tensor(ckpt, [&](const std::string& name, Tensor<T>& t) {
    auto it = b.by_name.find(name);
    if (it == b.by_name.end()) {
      throw CheckpointError(CheckpointErrorCode::missing_tensor, "manifest lacks tensor '" + name + "'", name);
    }
    const TensorEntry& e = *it->second;
    const Shape want = expected_shape(name, b.manifest.config, n_experts);
    if (e.shape != want) {
      throw CheckpointError(CheckpointErrorCode::shape_inconsistency,
                            "tensor '" + name + "' has shape " + shape_str(e.shape) + ", config implies " +
                                shape_str(want),
                            name);
    }
    std::vector<T> values(shape_numel(e.shape));
    const unsigned char* p = b.data.data() + e.byte_offset;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const float v = read_f32(p + 4 * i);
      if (!std::isfinite(v)) {
        throw CheckpointError(CheckpointErrorCode::non_finite, "tensor '" + name + "' holds NaN or Inf", name);
      }
      values[i] = static_cast<T>(v);
    }
    t = Tensor<T>(e.shape, std::move(values));
    ++used;
  });
  if (used != b.manifest.tensors.size()) {
    for (const auto& e : b.manifest.tensors) {
      bool known = false;
      for_each_tensor(ckpt, [&](const std::string& name, const Tensor<T>&) { known = known || name == e.name; });
      if (!known) {
        throw CheckpointError(CheckpointErrorCode::shape_inconsistency,
                              "unexpected tensor '" + e.name + "' for this config", e.name);
      }
    }
  }
}

template <class F>
auto validated(F&& build) {
  try {
    return build();
  } catch (const CheckpointError&) {
    throw;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(CheckpointErrorCode::parse, std::string("provenance: ") + e.what());
  } catch (const std::exception& e) {
    throw CheckpointError(CheckpointErrorCode::shape_inconsistency, e.what());
  }
}

}  // namespace

CheckpointManifest read_manifest(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw CheckpointError(CheckpointErrorCode::io, "cannot open " + dir + "/manifest.json");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(CheckpointErrorCode::parse, dir + "/manifest.json: " + e.what());
  }
  return manifest_from_json(j);
}

template <class T>
void save_checkpoint(const DenseCheckpoint<T>& ckpt, const std::string& dir) {
  ckpt.validate();
  CheckpointManifest m;
  m.kind = CheckpointKind::dense;
  m.config = ckpt.config;
  m.provenance = {{"model_id", ckpt.model_id}, {"vocab", ckpt.vocab}};
  write_checkpoint(ckpt, std::move(m), dir);
}

template <class T>
void save_checkpoint(const BackboneCheckpoint<T>& ckpt, const std::string& dir) {
  ckpt.validate();
  CheckpointManifest m;
  m.kind = CheckpointKind::backbone;
  m.config = ckpt.config;
  m.provenance = {{"vocab", ckpt.vocab}, {"recipe", format_recipe(ckpt.recipe)}, {"source_ids", ckpt.source_ids}};
  write_checkpoint(ckpt, std::move(m), dir);
}

template <class T>
void save_checkpoint(const MoECheckpoint<T>& ckpt, const std::string& dir) {
  ckpt.validate();
  CheckpointManifest m;
  m.kind = CheckpointKind::moe;
  m.config = ckpt.config();
  m.n_experts = ckpt.n_experts();
  m.routing = ckpt.routing;
  m.provenance = {{"vocab", ckpt.backbone.vocab},
                  {"recipe", format_recipe(ckpt.backbone.recipe)},
                  {"source_ids", ckpt.backbone.source_ids},
                  {"expert_ids", ckpt.expert_ids},
                  {"permutation_ids", ckpt.permutation_ids},
                  {"router_seed", ckpt.router_seed}};
  write_checkpoint(ckpt, std::move(m), dir);
}

template <class T>
DenseCheckpoint<T> load_dense(const std::string& dir) {
  const LoadedBlob b = read_blob(dir, CheckpointKind::dense);
  return validated([&] {
    DenseCheckpoint<T> c;
    c.config = b.manifest.config;
    c.config.validate();
    c.model_id = b.manifest.provenance.at("model_id").get<std::string>();
    c.vocab = b.manifest.provenance.at("vocab").get<std::vector<std::string>>();
    c.layers.resize(c.config.n_layers);
    fill_tensors<T>(c, b, 0);
    c.validate();
    return c;
  });
}

template <class T>
BackboneCheckpoint<T> load_backbone(const std::string& dir) {
  const LoadedBlob b = read_blob(dir, CheckpointKind::backbone);
  return validated([&] {
    BackboneCheckpoint<T> c;
    c.config = b.manifest.config;
    c.config.validate();
    c.vocab = b.manifest.provenance.at("vocab").get<std::vector<std::string>>();
    c.recipe = parse_recipe(b.manifest.provenance.at("recipe").get<std::string>());
    c.source_ids = b.manifest.provenance.at("source_ids").get<std::vector<std::string>>();
    c.layers.resize(c.config.n_layers);
    fill_tensors<T>(c, b, 0);
    c.validate();
    return c;
  });
}

template <class T>
MoECheckpoint<T> load_moe(const std::string& dir) {
  const LoadedBlob b = read_blob(dir, CheckpointKind::moe);
  return validated([&] {
    const auto& pv = b.manifest.provenance;
    MoECheckpoint<T> c;
    c.backbone.config = b.manifest.config;
    c.backbone.config.validate();
    c.backbone.vocab = pv.at("vocab").get<std::vector<std::string>>();
    c.backbone.recipe = parse_recipe(pv.at("recipe").get<std::string>());
    c.backbone.source_ids = pv.at("source_ids").get<std::vector<std::string>>();
    c.expert_ids = pv.at("expert_ids").get<std::vector<std::string>>();
    c.permutation_ids = pv.at("permutation_ids").get<std::vector<std::string>>();
    c.router_seed = pv.at("router_seed").get<std::uint64_t>();
    c.routing = b.manifest.routing;
    const std::size_t n = b.manifest.n_experts;
    if (c.expert_ids.size() != n) {
      throw CheckpointError(CheckpointErrorCode::shape_inconsistency,
                            "n_experts " + std::to_string(n) + " but " + std::to_string(c.expert_ids.size()) +
                                " expert ids");
    }
    c.backbone.layers.resize(c.backbone.config.n_layers);
    c.layers.resize(c.backbone.config.n_layers);
    for (auto& L : c.layers) L.experts.resize(n);
    fill_tensors<T>(c, b, n);
    c.validate();
    return c;
  });
}

#define UPCYCLE_INSTANTIATE(T)                                                          \
  template void save_checkpoint(const DenseCheckpoint<T>&, const std::string&);         \
  template void save_checkpoint(const BackboneCheckpoint<T>&, const std::string&);      \
  template void save_checkpoint(const MoECheckpoint<T>&, const std::string&);           \
  template DenseCheckpoint<T> load_dense(const std::string&);                           \
  template BackboneCheckpoint<T> load_backbone(const std::string&);                     \
  template MoECheckpoint<T> load_moe(const std::string&);

UPCYCLE_INSTANTIATE(float)
UPCYCLE_INSTANTIATE(double)

#undef UPCYCLE_INSTANTIATE

}  // namespace upcycle
