#include "crossinject/io.hpp"

#include <openssl/evp.h>
#include <openssl/sha.h>
#include <png.h>

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

namespace crossinject {

std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, SHA256_DIGEST_LENGTH> md{};
  SHA256(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(), md.data());
  std::ostringstream os;
  for (unsigned char b : md) os << std::hex << std::setw(2) << std::setfill('0') << int(b);
  return os.str();
}

std::string image_digest(const ImageTensor& img) {
  const auto rgb = to_rgb8(img);
  std::string buf = std::to_string(img.height()) + "x" + std::to_string(img.width()) + ":";
  buf.append(reinterpret_cast<const char*>(rgb.data()), rgb.size());
  return sha256_hex(buf);
}

std::string base64_encode(std::string_view bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(bytes.data()),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::string base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) throw ArgumentError("base64 input length must be a multiple of 4");
  std::string out(3 * text.size() / 4, '\0');
  const int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(text.data()),
                                static_cast<int>(text.size()));
  if (n < 0) throw ArgumentError("malformed base64 input");
  std::size_t len = static_cast<std::size_t>(n);
  // EVP_DecodeBlock keeps the padding bytes as zeros.
  if (!text.empty() && text.back() == '=') --len;
  if (text.size() >= 2 && text[text.size() - 2] == '=') --len;
  out.resize(len);
  return out;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArgumentError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_text_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ArgumentError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::vector<std::uint8_t> to_rgb8(const ImageTensor& img) {
  std::vector<std::uint8_t> out;
  out.reserve(img.numel());
  for (double v : img.values()) out.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
  return out;
}

ImageTensor from_rgb8(int height, int width, const std::vector<std::uint8_t>& rgb) {
  std::vector<double> data;
  data.reserve(rgb.size());
  for (auto b : rgb) data.push_back(b / 255.0);
  return ImageTensor::from_pixels(PixelArray(height, width, std::move(data)));
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

std::string lower_ext(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  for (auto& ch : ext) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return ext;
}

ImageTensor read_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw ArgumentError("cannot read PNG " + path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&image);
    throw ArgumentError("cannot decode PNG " + path.string() + ": " + image.message);
  }
  return from_rgb8(static_cast<int>(image.height), static_cast<int>(image.width), buf);
}

void write_png(const std::filesystem::path& path, const ImageTensor& img) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width());
  image.height = static_cast<png_uint_32>(img.height());
  image.format = PNG_FORMAT_RGB;
  const auto rgb = to_rgb8(img);
  if (!png_image_write_to_file(&image, path.c_str(), 0, rgb.data(), 0, nullptr)) {
    throw ArgumentError("cannot write PNG " + path.string() + ": " + image.message);
  }
}

ImageTensor read_ppm(const std::filesystem::path& path) {
  const std::string bytes = read_text_file(path);
  std::istringstream is(bytes);
  std::string magic;
  int width = 0, height = 0, maxval = 0;
  is >> magic;
  auto skip_comments = [&is] {
    is >> std::ws;
    while (is.peek() == '#') {
      std::string line;
      std::getline(is, line);
      is >> std::ws;
    }
  };
  skip_comments();
  is >> width;
  skip_comments();
  is >> height;
  skip_comments();
  is >> maxval;
  if (magic != "P6" || maxval != 255 || width <= 0 || height <= 0) {
    throw ArgumentError("unsupported PPM header in " + path.string());
  }
  is.get();  // single whitespace before raster
  const std::size_t n = static_cast<std::size_t>(width) * height * kChannels;
  std::vector<std::uint8_t> rgb(n);
  is.read(reinterpret_cast<char*>(rgb.data()), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) throw ShapeError("truncated PPM raster");
  return from_rgb8(height, width, rgb);
}

void write_ppm(const std::filesystem::path& path, const ImageTensor& img) {
  const auto rgb = to_rgb8(img);
  std::string out = "P6\n" + std::to_string(img.width()) + " " + std::to_string(img.height()) + "\n255\n";
  out.append(reinterpret_cast<const char*>(rgb.data()), rgb.size());
  write_text_file(path, out);
}

}  // namespace

ImageTensor read_image(const std::filesystem::path& path) {
  const auto ext = lower_ext(path);
  if (ext == ".png") return read_png(path);
  if (ext == ".ppm") return read_ppm(path);
  throw ArgumentError("unsupported image extension '" + ext + "' (use .png or .ppm)");
}

void write_image(const std::filesystem::path& path, const ImageTensor& img) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto ext = lower_ext(path);
  if (ext == ".png") return write_png(path, img);
  if (ext == ".ppm") return write_ppm(path, img);
  throw ArgumentError("unsupported image extension '" + ext + "' (use .png or .ppm)");
}

}  // namespace crossinject
