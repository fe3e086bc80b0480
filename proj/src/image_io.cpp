#include "dcdnet/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "dcdnet/errors.hpp"

namespace dcdnet::io {

namespace {

unsigned char to_byte(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

void write_pnm(const std::filesystem::path& path, const char* magic, int w, int h,
               const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << magic << '\n' << w << ' ' << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

struct Pnm {
  int width = 0, height = 0, channels = 0;
  std::vector<unsigned char> bytes;
};

std::string next_token(std::istream& in) {
  std::string tok;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string rest;
      std::getline(in, rest);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(c);
  }
  return tok;
}

Pnm read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("cannot open " + path.string());
  Pnm p;
  const std::string magic = next_token(in);
  if (magic == "P6") {
    p.channels = 3;
  } else if (magic == "P5") {
    p.channels = 1;
  } else {
    throw std::runtime_error(path.string() + ": unsupported image format " + magic);
  }
  p.width = std::stoi(next_token(in));
  p.height = std::stoi(next_token(in));
  if (std::stoi(next_token(in)) != 255) throw std::runtime_error(path.string() + ": only 8-bit images");
  p.bytes.resize(static_cast<std::size_t>(p.width) * p.height * p.channels);
  in.read(reinterpret_cast<char*>(p.bytes.data()), static_cast<std::streamsize>(p.bytes.size()));
  if (!in) throw std::runtime_error(path.string() + ": truncated image");
  return p;
}

}  // namespace

void write_ppm(const std::filesystem::path& path, const data::ImageGrid& image) {
  const int h = image.height(), w = image.width();
  std::vector<unsigned char> bytes(static_cast<std::size_t>(h) * w * 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) bytes[(static_cast<std::size_t>(y) * w + x) * 3 + c] = to_byte(image.pixels.at(c, y, x));
    }
  }
  write_pnm(path, "P6", w, h, bytes);
}

data::ImageGrid read_ppm(const std::filesystem::path& path) {
  Pnm p = read_pnm(path);
  if (p.channels != 3) throw std::runtime_error(path.string() + ": expected a colour image");
  data::ImageGrid img{Tensor({3, p.height, p.width})};
  for (int y = 0; y < p.height; ++y) {
    for (int x = 0; x < p.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        img.pixels.at(c, y, x) = p.bytes[(static_cast<std::size_t>(y) * p.width + x) * 3 + c] / 255.0;
      }
    }
  }
  return img;
}

void write_pgm(const std::filesystem::path& path, const data::MaskGrid& mask) {
  std::vector<unsigned char> bytes(mask.labels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = mask.labels[i] ? 255 : 0;
  write_pnm(path, "P5", mask.width, mask.height, bytes);
}

data::MaskGrid read_pgm_mask(const std::filesystem::path& path) {
  Pnm p = read_pnm(path);
  if (p.channels != 1) throw std::runtime_error(path.string() + ": expected a grayscale mask");
  data::MaskGrid m(p.height, p.width);
  for (std::size_t i = 0; i < p.bytes.size(); ++i) m.labels[i] = p.bytes[i] >= 128 ? 1 : 0;
  return m;
}

void write_pgm(const std::filesystem::path& path, const Tensor& map01) {
  const int h = map01.dim(map01.rank() - 2), w = map01.dim(map01.rank() - 1);
  if (map01.size() != static_cast<std::size_t>(h) * w) throw ShapeError("write_pgm: expects a single-channel map");
  std::vector<unsigned char> bytes(map01.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = to_byte(map01[i]);
  write_pnm(path, "P5", w, h, bytes);
}

}  // namespace dcdnet::io
