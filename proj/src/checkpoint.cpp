#include "devid/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace devid {

using nlohmann::json;

namespace {

json config_to_json_obj(const ModelConfig& c) {
  json j;
  j["use_convlstm"] = c.use_convlstm;
  j["use_bilstm"] = c.use_bilstm;
  j["use_transformer"] = c.use_transformer;
  json convs = json::array();
  for (const ConvSpec& cs : c.convlstm)
    convs.push_back({{"filters", cs.filters}, {"kernel", cs.kernel}, {"stride", cs.stride}});
  j["convlstm"] = convs;
  j["bilstm_units"] = c.bilstm_units;
  j["encoder_num"] = c.encoder_num;
  j["heads"] = c.heads;
  j["head_dim"] = c.head_dim;
  j["ff_units"] = c.ff_units;
  j["mlp_units"] = c.mlp_units;
  j["n_classes"] = c.n_classes;
  j["token_scheme"] = c.token_scheme;
  j["frames"] = c.frames;
  j["feat_dims"] = c.feat_dims;
  return j;
}

ModelConfig config_from_json_obj(const json& j) {
  ModelConfig c;
  c.use_convlstm = j.at("use_convlstm").get<bool>();
  c.use_bilstm = j.at("use_bilstm").get<bool>();
  c.use_transformer = j.at("use_transformer").get<bool>();
  c.convlstm.clear();
  for (const auto& cs : j.at("convlstm"))
    c.convlstm.push_back({cs.at("filters").get<int>(), cs.at("kernel").get<int>(),
                          cs.at("stride").get<int>()});
  c.bilstm_units = j.at("bilstm_units").get<int>();
  c.encoder_num = j.at("encoder_num").get<int>();
  c.heads = j.at("heads").get<int>();
  c.head_dim = j.at("head_dim").get<int>();
  c.ff_units = j.at("ff_units").get<int>();
  c.mlp_units = j.at("mlp_units").get<int>();
  c.n_classes = j.at("n_classes").get<int>();
  c.token_scheme = j.at("token_scheme").get<std::string>();
  c.frames = j.at("frames").get<int>();
  c.feat_dims = j.at("feat_dims").get<int>();
  return c;
}

void append_f32le(std::string& blob, const std::vector<real>& values) {
  for (real v : values) {
    const float f = float(v);
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    char b[4] = {char(u & 0xFF), char((u >> 8) & 0xFF), char((u >> 16) & 0xFF),
                 char((u >> 24) & 0xFF)};
    blob.append(b, 4);
  }
}

void read_f32le(const std::string& blob, std::size_t offset, std::vector<real>& out) {
  const unsigned char* p = reinterpret_cast<const unsigned char*>(blob.data()) + offset;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::uint32_t u = std::uint32_t(p[4 * i]) | std::uint32_t(p[4 * i + 1]) << 8 |
                            std::uint32_t(p[4 * i + 2]) << 16 |
                            std::uint32_t(p[4 * i + 3]) << 24;
    float f;
    std::memcpy(&f, &u, 4);
    out[i] = real(f);
  }
}

} // namespace

std::string model_config_to_json(const ModelConfig& config) {
  return config_to_json_obj(config).dump(2);
}

ModelConfig model_config_from_json(const std::string& json_text) {
  return config_from_json_obj(json::parse(json_text));
}

void save_checkpoint(DeviceIdModel& model, const std::string& path,
                     const std::string& provenance_json) {
  ParamList params = model.parameters();
  BufferList buffers = model.buffers();

  std::string blob;
  json manifest;
  manifest["format"] = "devid-checkpoint-v1";
  manifest["config"] = config_to_json_obj(model.config());
  manifest["blob"] = path.substr(path.find_last_of('/') + 1) + ".bin";

  json jparams = json::array();
  for (const ParamRef& p : params) {
    json e;
    e["name"] = p.name;
    e["shape"] = p.tensor.shape();
    e["offset"] = blob.size();
    jparams.push_back(e);
    append_f32le(blob, p.tensor.value());
  }
  manifest["params"] = jparams;

  json jbuffers = json::array();
  for (const BufferRef& b : buffers) {
    json e;
    e["name"] = b.name;
    e["length"] = b.data->size();
    e["offset"] = blob.size();
    jbuffers.push_back(e);
    append_f32le(blob, *b.data);
  }
  manifest["buffers"] = jbuffers;
  manifest["blob_bytes"] = blob.size();
  manifest["provenance"] = json::parse(provenance_json);

  std::ofstream mf(path, std::ios::binary);
  if (!mf) throw FormatError("cannot write " + path);
  mf << manifest.dump(2) << "\n";
  std::ofstream bf(path + ".bin", std::ios::binary);
  if (!bf) throw FormatError("cannot write " + path + ".bin");
  bf.write(blob.data(), long(blob.size()));
  if (!mf || !bf) throw FormatError("checkpoint write failed: " + path);
}

DeviceIdModel load_checkpoint(const std::string& path) {
  std::ifstream mf(path, std::ios::binary);
  if (!mf) throw FormatError("cannot open " + path);
  json manifest;
  try {
    manifest = json::parse(mf);
  } catch (const json::exception& e) {
    throw CorruptionError(path + ": bad manifest: " + e.what());
  }
  if (manifest.value("format", "") != "devid-checkpoint-v1")
    throw CorruptionError(path + ": unknown checkpoint format");

  ModelConfig config = config_from_json_obj(manifest.at("config"));
  DeviceIdModel model = DeviceIdModel::build(config, 0);

  std::ifstream bf(path + ".bin", std::ios::binary);
  if (!bf) throw CorruptionError(path + ": missing blob " + path + ".bin");
  std::string blob((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());
  const std::size_t expect = manifest.at("blob_bytes").get<std::size_t>();
  if (blob.size() != expect)
    throw CorruptionError(path + ": blob length " + std::to_string(blob.size()) +
                          " does not match manifest " + std::to_string(expect));

  ParamList params = model.parameters();
  const auto& jparams = manifest.at("params");
  if (jparams.size() != params.size())
    throw CorruptionError(path + ": parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = jparams[i];
    if (e.at("name").get<std::string>() != params[i].name)
      throw CorruptionError(path + ": parameter order mismatch at '" + params[i].name + "'");
    const std::vector<int> shape = e.at("shape").get<std::vector<int>>();
    if (shape != params[i].tensor.shape())
      throw CorruptionError(path + ": shape mismatch for '" + params[i].name + "'");
    const std::size_t offset = e.at("offset").get<std::size_t>();
    if (offset + params[i].tensor.numel() * 4 > blob.size())
      throw CorruptionError(path + ": blob too short for '" + params[i].name + "'");
    read_f32le(blob, offset, params[i].tensor.value());
  }

  BufferList buffers = model.buffers();
  const auto& jbuffers = manifest.at("buffers");
  if (jbuffers.size() != buffers.size())
    throw CorruptionError(path + ": buffer count mismatch");
  for (std::size_t i = 0; i < buffers.size(); ++i) {
    const auto& e = jbuffers[i];
    if (e.at("name").get<std::string>() != buffers[i].name)
      throw CorruptionError(path + ": buffer order mismatch");
    if (e.at("length").get<std::size_t>() != buffers[i].data->size())
      throw CorruptionError(path + ": buffer length mismatch for '" + buffers[i].name + "'");
    const std::size_t offset = e.at("offset").get<std::size_t>();
    if (offset + buffers[i].data->size() * 4 > blob.size())
      throw CorruptionError(path + ": blob too short for '" + buffers[i].name + "'");
    read_f32le(blob, offset, *buffers[i].data);
  }
  return model;
}

} // namespace devid
