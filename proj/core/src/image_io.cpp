#include "gradinv/image_io.hpp"

#include <cmath>
#include <fstream>

namespace gradinv::io {

namespace {

std::uint8_t to_byte(double v) {
  double scaled = std::lround(v * 255.0);
  if (scaled < 0.0) scaled = 0.0;
  if (scaled > 255.0) scaled = 255.0;
  return static_cast<std::uint8_t>(scaled);
}

}  // namespace

void write_image_grid(const std::vector<std::vector<Tensor>>& rows, const std::string& path) {
  if (rows.empty() || rows[0].empty()) throw ValueError("write_image_grid: no images");
  const Shape& s = rows[0][0].shape;
  if (s.size() != 3 || (s[0] != 1 && s[0] != 3)) {
    throw ShapeError("write_image_grid: expected [1,H,W] or [3,H,W] tiles, got " + shape_str(s));
  }
  std::size_t cols = rows[0].size();
  for (const auto& row : rows) {
    if (row.size() != cols) throw ShapeError("write_image_grid: ragged rows");
    for (const Tensor& t : row) {
      if (t.shape != s) {
        throw ShapeError("write_image_grid: mixed tile shapes " + shape_str(s) + " vs " +
                         shape_str(t.shape));
      }
    }
  }
  const int channels = s[0], th = s[1], tw = s[2];
  const int width = static_cast<int>(cols) * (tw + 1);
  const int height = static_cast<int>(rows.size()) * (th + 1);
  std::vector<std::uint8_t> pixels(static_cast<std::size_t>(width) * height * channels, 0);

  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const Tensor& tile = rows[r][c];
      int oy = static_cast<int>(r) * (th + 1);
      int ox = static_cast<int>(c) * (tw + 1);
      for (int y = 0; y < th; ++y) {
        for (int x = 0; x < tw; ++x) {
          for (int ch = 0; ch < channels; ++ch) {
            double v = tile[(static_cast<std::int64_t>(ch) * th + y) * tw + x];
            pixels[(static_cast<std::size_t>(oy + y) * width + (ox + x)) * channels + ch] =
                to_byte(v);
          }
        }
      }
    }
  }

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("write_image_grid: cannot open '" + path + "' for writing");
  out << (channels == 3 ? "P6" : "P5") << "\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()),
            static_cast<std::streamsize>(pixels.size()));
  if (!out) throw IoError("write_image_grid: write failed for '" + path + "'");
}

void write_image_grid(const std::vector<Tensor>& images, const std::string& path) {
  write_image_grid(std::vector<std::vector<Tensor>>{images}, path);
}

PnmImage read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("read_pnm: cannot open '" + path + "'");
  std::string magic;
  in >> magic;
  if (magic != "P5" && magic != "P6") throw IoError("read_pnm: unsupported format '" + magic + "'");
  int width = 0, height = 0, maxval = 0;
  in >> width >> height >> maxval;
  if (!in || width < 1 || height < 1) throw IoError("read_pnm: bad header in '" + path + "'");
  if (maxval != 255) throw IoError("read_pnm: only maxval 255 supported");
  in.get();  // single whitespace after header
  PnmImage img;
  img.width = width;
  img.height = height;
  img.channels = magic == "P6" ? 3 : 1;
  img.pixels.resize(static_cast<std::size_t>(width) * height * img.channels);
  in.read(reinterpret_cast<char*>(img.pixels.data()),
          static_cast<std::streamsize>(img.pixels.size()));
  if (!in) throw IoError("read_pnm: truncated pixel data in '" + path + "'");
  return img;
}

}  // namespace gradinv::io
