#include "stfm/image_io.hpp"

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "stfm/error.hpp"

namespace stfm {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

std::uint32_t get_u32(const std::string& data, std::size_t offset) {
  const auto b = [&](std::size_t i) {
    return static_cast<std::uint32_t>(static_cast<unsigned char>(data[offset + i]));
  };
  return b(0) | (b(1) << 8) | (b(2) << 16) | (b(3) << 24);
}

void put_f32(std::string& out, float f) {
  std::uint32_t bits = 0;
  std::memcpy(&bits, &f, sizeof(bits));
  put_u32(out, bits);
}

float get_f32(const std::string& data, std::size_t offset) {
  const std::uint32_t bits = get_u32(data, offset);
  float f = 0.0f;
  std::memcpy(&f, &bits, sizeof(f));
  return f;
}

}  // namespace

void write_file_atomic(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + tmp);
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw IoError("short write: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw IoError("cannot rename " + tmp + " to " + path);
  }
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path);
  std::string data((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path);
  return data;
}

void write_ppm(const std::string& path, int height, int width,
               const std::vector<double>& rgb01) {
  if (height <= 0 || width <= 0) {
    throw DimensionError("write_ppm: non-positive image size");
  }
  const std::size_t expect = static_cast<std::size_t>(height) * width * 3;
  if (rgb01.size() != expect) {
    throw DimensionError("write_ppm: buffer holds " + std::to_string(rgb01.size()) +
                         " values, image needs " + std::to_string(expect));
  }
  std::string out = "P6\n" + std::to_string(width) + " " +
                    std::to_string(height) + "\n255\n";
  out.reserve(out.size() + expect);
  for (double v : rgb01) {
    const double clamped = std::min(1.0, std::max(0.0, v));
    out.push_back(static_cast<char>(
        static_cast<unsigned char>(std::lround(clamped * 255.0))));
  }
  write_file_atomic(path, out);
}

PpmImage read_ppm(const std::string& path) {
  const std::string data = read_file(path);
  std::size_t pos = 0;
  // Header tokens separated by whitespace; '#' starts a comment to end of line.
  const auto next_token = [&]() -> std::string {
    while (pos < data.size()) {
      const char c = data[pos];
      if (c == '#') {
        while (pos < data.size() && data[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < data.size() &&
           !std::isspace(static_cast<unsigned char>(data[pos]))) {
      ++pos;
    }
    if (start == pos) throw FormatError("truncated header: " + path);
    return data.substr(start, pos - start);
  };

  if (next_token() != "P6") throw FormatError("not a P6 file: " + path);
  const std::string w_tok = next_token();
  const std::string h_tok = next_token();
  const std::string max_tok = next_token();
  int width = 0, height = 0, maxval = 0;
  try {
    width = std::stoi(w_tok);
    height = std::stoi(h_tok);
    maxval = std::stoi(max_tok);
  } catch (const std::exception&) {
    throw FormatError("bad header field: " + path);
  }
  if (width <= 0 || height <= 0) throw FormatError("bad dimensions: " + path);
  if (maxval != 255) throw FormatError("unsupported maxval: " + path);
  if (pos >= data.size()) throw FormatError("truncated after header: " + path);
  ++pos;  // exactly one whitespace byte before the raster

  const std::size_t need = static_cast<std::size_t>(height) * width * 3;
  if (data.size() - pos < need) throw FormatError("truncated raster: " + path);

  PpmImage image;
  image.height = height;
  image.width = width;
  image.rgb.resize(need);
  for (std::size_t i = 0; i < need; ++i) {
    image.rgb[i] = static_cast<unsigned char>(data[pos + i]) / 255.0;
  }
  return image;
}

void write_depth(const std::string& path, const DepthMap& depth) {
  depth.validate();
  std::string out;
  out.reserve(16 + depth.values.size() * 4);
  out += "DPT1";
  put_u32(out, static_cast<std::uint32_t>(depth.height));
  put_u32(out, static_cast<std::uint32_t>(depth.width));
  put_u32(out, 0);  // reserved
  for (double v : depth.values) put_f32(out, static_cast<float>(v));
  write_file_atomic(path, out);
}

DepthMap read_depth(const std::string& path) {
  const std::string data = read_file(path);
  if (data.size() < 16) throw FormatError("truncated header: " + path);
  if (data.compare(0, 4, "DPT1") != 0) {
    throw FormatError("bad magic: " + path);
  }
  const std::uint32_t height = get_u32(data, 4);
  const std::uint32_t width = get_u32(data, 8);
  if (height == 0 || width == 0 || height > (1u << 20) || width > (1u << 20)) {
    throw FormatError("bad dimensions: " + path);
  }
  const std::size_t count = static_cast<std::size_t>(height) * width;
  if (data.size() != 16 + count * 4) {
    throw FormatError("size mismatch: " + path + " holds " +
                      std::to_string(data.size()) + " bytes, header implies " +
                      std::to_string(16 + count * 4));
  }
  DepthMap depth;
  depth.height = static_cast<int>(height);
  depth.width = static_cast<int>(width);
  depth.values.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    depth.values[i] = static_cast<double>(get_f32(data, 16 + i * 4));
  }
  return depth;
}

}  // namespace stfm
