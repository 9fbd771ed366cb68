#include "stfm/checkpoint.hpp"

#include <cstring>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "stfm/error.hpp"
#include "stfm/image_io.hpp"

namespace stfm {
namespace {

constexpr char kMagic[5] = {'S', 'T', 'F', 'M', '1'};

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i)
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

// Sequential reader that reports the byte offset of the first defect.
class Reader {
 public:
  Reader(const std::string& bytes, const std::string& path)
      : bytes_(bytes), path_(path) {}

  std::size_t offset() const { return pos_; }

  void expect(std::size_t n, const char* what) {
    if (pos_ + n > bytes_.size()) {
      throw FormatError(path_ + ": truncated reading " + std::string(what) +
                        " at offset " + std::to_string(pos_));
    }
  }

  std::uint16_t u16(const char* what) {
    expect(2, what);
    const auto* p = reinterpret_cast<const unsigned char*>(bytes_.data() + pos_);
    pos_ += 2;
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
  }

  std::uint32_t u32(const char* what) {
    expect(4, what);
    const auto* p = reinterpret_cast<const unsigned char*>(bytes_.data() + pos_);
    pos_ += 4;
    return static_cast<std::uint32_t>(p[0]) |
           (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) |
           (static_cast<std::uint32_t>(p[3]) << 24);
  }

  std::uint8_t u8(const char* what) {
    expect(1, what);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }

  float f32(const char* what) {
    const std::uint32_t bits = u32(what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }

  std::string str(std::size_t n, const char* what) {
    expect(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool exhausted() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string config_to_json(const MatcherConfig& config) {
  nlohmann::json j;
  j["input_channels"] = config.input_channels;
  j["coarse_dim"] = config.coarse_dim;
  j["fine_dim"] = config.fine_dim;
  j["coarse_layers"] = config.coarse_layers;
  j["fine_layers"] = config.fine_layers;
  j["heads"] = config.heads;
  j["tau"] = config.tau;
  j["theta_c"] = config.theta_c;
  j["window"] = config.window;
  return j.dump(2) + "\n";
}

MatcherConfig config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("config sidecar is not valid JSON: ") +
                      e.what());
  }
  MatcherConfig config;
  try {
    config.input_channels = j.at("input_channels").get<int>();
    config.coarse_dim = j.at("coarse_dim").get<int>();
    config.fine_dim = j.at("fine_dim").get<int>();
    config.coarse_layers = j.at("coarse_layers").get<int>();
    config.fine_layers = j.at("fine_layers").get<int>();
    config.heads = j.at("heads").get<int>();
    config.tau = j.at("tau").get<double>();
    config.theta_c = j.at("theta_c").get<double>();
    config.window = j.at("window").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("config sidecar is missing fields: ") +
                      e.what());
  }
  config.validate();
  return config;
}

void save_checkpoint(const ModelParams& params, const MatcherConfig& config,
                     const std::string& path) {
  std::string out(kMagic, sizeof(kMagic));
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const std::string& name : params.names()) {
    const Tensor& t = params.at(name);
    if (name.size() > 0xffff) {
      throw ContractError("parameter name too long for checkpoint: " + name);
    }
    put_u16(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(t.rank()));
    for (int d = 0; d < t.rank(); ++d)
      put_u32(out, static_cast<std::uint32_t>(t.dim(d)));
    for (double v : t.value()) put_f32(out, static_cast<float>(v));
  }
  write_file_atomic(path, out);
  write_file_atomic(path + ".json", config_to_json(config));
}

Checkpoint load_checkpoint(const std::string& path,
                           const std::optional<MatcherConfig>& expected) {
  const MatcherConfig config = config_from_json(read_file(path + ".json"));
  if (expected) {
    const MatcherConfig& e = *expected;
    if (config.input_channels != e.input_channels) {
      throw ConfigError(
          path + ": checkpoint has " + std::to_string(config.input_channels) +
          " input channels but " + std::to_string(e.input_channels) +
          " were requested");
    }
    if (config.coarse_dim != e.coarse_dim || config.fine_dim != e.fine_dim ||
        config.coarse_layers != e.coarse_layers ||
        config.fine_layers != e.fine_layers || config.heads != e.heads ||
        config.tau != e.tau || config.theta_c != e.theta_c ||
        config.window != e.window) {
      throw ConfigError(path +
                        ": checkpoint configuration does not match the "
                        "requested architecture");
    }
  }

  const std::string bytes = read_file(path);
  Reader r(bytes, path);
  const std::string magic = r.str(sizeof(kMagic), "magic");
  if (std::memcmp(magic.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError(path + ": bad checkpoint magic at offset 0");
  }
  const std::uint32_t count = r.u32("parameter count");

  // The architecture defines the expected names and shapes; values below
  // overwrite the placeholder initialization.
  Checkpoint ckpt;
  ckpt.config = config;
  ckpt.params = ModelParams::init(config, /*seed=*/0);
  if (count != ckpt.params.size()) {
    throw FormatError(path + ": parameter count " + std::to_string(count) +
                      " does not match the architecture (expected " +
                      std::to_string(ckpt.params.size()) + ")");
  }

  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t entry_offset = r.offset();
    const std::uint16_t name_len = r.u16("name length");
    const std::string name = r.str(name_len, "name");
    if (!seen.insert(name).second) {
      throw FormatError(path + ": duplicate parameter \"" + name +
                        "\" at offset " + std::to_string(entry_offset));
    }
    if (!ckpt.params.contains(name)) {
      throw FormatError(path + ": unknown parameter \"" + name +
                        "\" at offset " + std::to_string(entry_offset));
    }
    Tensor& t = ckpt.params.at(name);
    const int rank = static_cast<int>(r.u8("rank"));
    if (rank != t.rank()) {
      throw FormatError(path + ": rank mismatch for \"" + name +
                        "\" at offset " + std::to_string(entry_offset));
    }
    for (int d = 0; d < rank; ++d) {
      const std::uint32_t dim = r.u32("dimension");
      if (dim != static_cast<std::uint32_t>(t.dim(d))) {
        throw FormatError(path + ": shape mismatch for \"" + name +
                          "\" at offset " + std::to_string(entry_offset));
      }
    }
    auto& values = t.mutable_value();
    for (double& v : values) v = static_cast<double>(r.f32("values"));
  }
  if (!r.exhausted()) {
    throw FormatError(path + ": trailing bytes at offset " +
                      std::to_string(r.offset()));
  }
  return ckpt;
}

}  // namespace stfm
