#include "hemorl/nnkit/checkpoint.hpp"

#include "hemorl/errors.hpp"
#include "hemorl/util.hpp"

namespace hemorl::nn {

using nlohmann::json;

json layer_spec_to_json(const LayerSpec& spec) {
  json hyper = json::object();
  for (const auto& [k, v] : spec.hyper) hyper[k] = doubles_to_hex(std::span<const double>(&v, 1));
  return {{"kind", std::string(to_string(spec.kind))}, {"in", spec.in_dim}, {"out", spec.out_dim}, {"hyper", hyper}};
}

LayerSpec layer_spec_from_json(const json& j) {
  LayerSpec s;
  s.kind = layer_kind_from_string(j.at("kind").get<std::string>());
  s.in_dim = j.at("in").get<std::size_t>();
  s.out_dim = j.at("out").get<std::size_t>();
  for (const auto& [k, v] : j.at("hyper").items()) s.hyper[k] = doubles_from_hex(v.get<std::string>()).at(0);
  return s;
}

json checkpoint_to_json(const CheckpointHeader& header, const std::vector<const Parameter*>& params) {
  json layers = json::array();
  for (const auto& s : header.layers) layers.push_back(layer_spec_to_json(s));
  json tensors = json::array();
  for (const auto* p : params) {
    tensors.push_back({{"name", p->name}, {"shape", p->value.shape()}, {"data", doubles_to_hex(p->value.values())}});
  }
  return {{"format_version", header.format_version},
          {"header",
           {{"layers", layers},
            {"seed", std::to_string(header.seed)},
            {"init_scheme", header.init_scheme},
            {"extra", header.extra}}},
          {"tensors", tensors}};
}

Checkpoint checkpoint_from_json(const json& j) {
  try {
    Checkpoint c;
    c.header.format_version = j.at("format_version").get<int>();
    if (c.header.format_version != kCheckpointFormatVersion) {
      throw DataError("unsupported checkpoint format_version " + std::to_string(c.header.format_version));
    }
    const json& h = j.at("header");
    for (const auto& l : h.at("layers")) c.header.layers.push_back(layer_spec_from_json(l));
    c.header.seed = std::stoull(h.at("seed").get<std::string>());
    c.header.init_scheme = h.at("init_scheme").get<std::string>();
    c.header.extra = h.value("extra", json::object());
    for (const auto& t : j.at("tensors")) {
      NamedTensor nt;
      nt.name = t.at("name").get<std::string>();
      nt.value = Tensor(t.at("shape").get<std::vector<std::size_t>>(), doubles_from_hex(t.at("data").get<std::string>()));
      c.tensors.push_back(std::move(nt));
    }
    return c;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed checkpoint: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const CheckpointHeader& header,
                     const std::vector<const Parameter*>& params) {
  write_file_atomic(path, checkpoint_to_json(header, params).dump());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return checkpoint_from_json(j);
}

void restore_parameters(const Checkpoint& ckpt, const std::vector<Parameter*>& params) {
  if (ckpt.tensors.size() != params.size()) {
    throw DimensionError("checkpoint holds " + std::to_string(ckpt.tensors.size()) + " tensors, model expects " +
                         std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = ckpt.tensors[i];
    if (t.name != params[i]->name || !t.value.same_shape(params[i]->value)) {
      throw DimensionError("checkpoint tensor '" + t.name + "' " + shape_string(t.value.shape()) +
                           " does not match parameter '" + params[i]->name + "' " +
                           shape_string(params[i]->value.shape()));
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = ckpt.tensors[i].value;
}

}  // namespace hemorl::nn
