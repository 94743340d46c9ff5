#include "npath/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"
#include "npath/error.hpp"

namespace npath {
namespace {

using ordered_json = nlohmann::ordered_json;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

void put_f64(std::vector<std::uint8_t>& out, double d) {
  const auto bits = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

double get_f64(const std::uint8_t* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

ordered_json config_to_json(const VitConfig& c) {
  ordered_json j;
  j["image_size"] = c.image_size;
  j["patch_size"] = c.patch_size;
  j["channels"] = c.channels;
  j["layers"] = c.layers;
  j["hidden"] = c.hidden;
  j["ffn"] = c.ffn;
  j["heads"] = c.heads;
  j["classes"] = c.classes;
  j["seq_len"] = c.seq_len();
  return j;
}

VitConfig config_from_json(const nlohmann::json& j) {
  VitConfig c;
  try {
    c.image_size = j.at("image_size").get<std::size_t>();
    c.patch_size = j.at("patch_size").get<std::size_t>();
    c.channels = j.at("channels").get<std::size_t>();
    c.layers = j.at("layers").get<std::size_t>();
    c.hidden = j.at("hidden").get<std::size_t>();
    c.ffn = j.at("ffn").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.classes = j.at("classes").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what());
  }
  try {
    c.validate();
  } catch (const InvalidParameter& e) {
    throw FormatError(std::string("checkpoint config invalid: ") + e.what());
  }
  return c;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const VitModel& model) {
  ordered_json header;
  header["format_version"] = kCheckpointVersion;
  header["config"] = config_to_json(model.config);
  header["layer_norm_eps"] = model.layer_norm_eps;
  ordered_json table = ordered_json::object();
  std::size_t offset = 0;
  for (const auto& [name, t] : model.named_tensors()) {
    ordered_json e;
    e["dtype"] = "f64";
    e["shape"] = t->shape();
    e["byte_offset"] = offset;
    e["byte_len"] = t->numel() * 8;
    offset += t->numel() * 8;
    table[name] = std::move(e);
  }
  header["tensors"] = std::move(table);
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + offset);
  for (const auto& [name, t] : model.named_tensors()) {
    for (double v : t->data()) put_f64(out, v);
  }
  return out;
}

VitModel decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kCheckpointMagic, 7) != 0) {
    throw BadMagicError("not a neuron-path checkpoint (bad magic)");
  }
  if (bytes[7] != static_cast<std::uint8_t>(kCheckpointMagic[7])) {
    throw VersionMismatchError("checkpoint magic version '" + std::string(1, static_cast<char>(bytes[7])) +
                               "' is not supported (expected '1')");
  }
  if (bytes.size() < 12) throw TruncatedError("checkpoint ends inside the header length", "");
  const std::uint32_t hlen = get_u32(bytes.data() + 8);
  if (bytes.size() < 12 + static_cast<std::size_t>(hlen)) {
    throw TruncatedError("checkpoint ends inside the JSON header", "");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + hlen);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  if (!header.is_object() || !header.contains("format_version") || !header.contains("config") ||
      !header.contains("tensors")) {
    throw FormatError("checkpoint header lacks format_version/config/tensors");
  }
  if (header["format_version"] != kCheckpointVersion) {
    throw VersionMismatchError("checkpoint format_version " + header["format_version"].dump() + " is not supported");
  }

  VitModel model = make_zero_model(config_from_json(header["config"]));
  if (header.contains("layer_norm_eps")) model.layer_norm_eps = header["layer_norm_eps"].get<double>();
  if (!(model.layer_norm_eps > 0.0)) throw FormatError("checkpoint layer_norm_eps must be > 0");

  const auto& table = header["tensors"];
  const std::uint8_t* blob = bytes.data() + 12 + hlen;
  const std::size_t blob_size = bytes.size() - 12 - hlen;
  const auto shapes = expected_shapes(model.config);
  if (table.size() != shapes.size()) {
    throw FormatError("checkpoint declares " + std::to_string(table.size()) + " tensors, config needs " +
                      std::to_string(shapes.size()));
  }
  auto slots = model.named_tensors();
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const std::string& name = slots[i].first;
    if (!table.contains(name)) throw FormatError("checkpoint tensor table lacks '" + name + "'");
    const auto& e = table[name];
    if (e.value("dtype", "") != "f64") throw FormatError("tensor '" + name + "' has unsupported dtype");
    const Shape shape = e.at("shape").get<Shape>();
    if (shape != shapes[i].second) {
      throw ShapeMismatchError("tensor '" + name + "' has shape " + shape_string(shape) + ", config requires " +
                               shape_string(shapes[i].second));
    }
    const std::size_t offset = e.at("byte_offset").get<std::size_t>();
    const std::size_t len = e.at("byte_len").get<std::size_t>();
    if (len != shape_numel(shape) * 8) {
      throw ShapeMismatchError("tensor '" + name + "' byte_len " + std::to_string(len) + " disagrees with its shape");
    }
    if (offset > blob_size || len > blob_size - offset) {
      throw TruncatedError("checkpoint blob ends before tensor '" + name + "' is complete", name);
    }
    std::vector<double> data(shape_numel(shape));
    for (std::size_t k = 0; k < data.size(); ++k) data[k] = get_f64(blob + offset + 8 * k);
    *slots[i].second = Tensor(shape, std::move(data));
  }
  return model;
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw UsageError("cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

void save_checkpoint(const VitModel& model, const std::string& path) {
  const auto bytes = encode_checkpoint(model);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw UsageError("cannot write checkpoint " + path);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw UsageError("failed writing checkpoint " + path);
}

VitModel load_checkpoint(const std::string& path) { return decode_checkpoint(read_file_bytes(path)); }

}  // namespace npath
