#include "pairdiff/dataset.hpp"

#include <json.hpp>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <stdexcept>

namespace pairdiff {

namespace fs = std::filesystem;

namespace {

Image read_png_as(const fs::path& path, int channels) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw std::runtime_error("cannot decode PNG " + path.string() + ": " + img.message);
  img.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&img);
    throw std::runtime_error("cannot decode PNG " + path.string() + ": " + img.message);
  }
  Image out(Shape{1, int(img.height), int(img.width), channels});
  for (std::size_t i = 0; i < buffer.size(); ++i) out.data()[i] = float(buffer[i]) / 255.0f;
  return out;
}

std::uint8_t quantize(float v) { return std::uint8_t(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

bool is_png(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return char(std::tolower(c)); });
  return ext == ".png";
}

std::map<std::string, fs::path> list_dir(const fs::path& dir, std::vector<std::string>& unmatched,
                                         std::vector<std::string>& warnings, const std::string& label) {
  std::map<std::string, fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    if (!is_png(entry.path())) {
      unmatched.push_back(label + "/" + entry.path().filename().string());
      warnings.push_back("skipping non-PNG file " + entry.path().string());
      continue;
    }
    out[entry.path().stem().string()] = entry.path();
  }
  return out;
}

}  // namespace

Image read_png(const fs::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw std::runtime_error("cannot decode PNG " + path.string() + ": " + img.message);
  const bool color = (img.format & PNG_FORMAT_FLAG_COLOR) != 0;
  png_image_free(&img);
  return read_png_as(path, color ? 3 : 1);
}

void write_png(const fs::path& path, const Image& image) {
  if (image.n() != 1 || (image.c() != 1 && image.c() != 3))
    throw std::invalid_argument("write_png: expected a single 1- or 3-channel image, got " + image.shape().str());
  std::vector<png_byte> buffer(image.size());
  for (std::size_t i = 0; i < buffer.size(); ++i) buffer[i] = quantize(image.data()[i]);
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = png_uint_32(image.w());
  img.height = png_uint_32(image.h());
  img.format = image.c() == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, buffer.data(), 0, nullptr))
    throw std::runtime_error("cannot write PNG " + path.string() + ": " + img.message);
}

void write_file_atomic(const fs::path& path, const std::string& content) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << content;
    if (!out) throw std::runtime_error("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

LoadResult load_dataset(const fs::path& root) {
  LoadResult result;
  auto images = list_dir(root / "images", result.unmatched, result.warnings, "images");
  auto masks = list_dir(root / "masks", result.unmatched, result.warnings, "masks");
  if (images.empty() && masks.empty()) {
    result.warnings.push_back("no image-mask pairs found under " + root.string());
    return result;
  }
  for (const auto& [id, image_path] : images) {
    auto it = masks.find(id);
    if (it == masks.end()) {
      result.unmatched.push_back("images/" + image_path.filename().string());
      continue;
    }
    ImageMaskPair pair{read_png_as(image_path, 3), read_png_as(it->second, 1), id};
    if (pair.image.h() != pair.mask.h() || pair.image.w() != pair.mask.w())
      throw std::runtime_error("size mismatch for pair '" + id + "': image " + pair.image.shape().str() + ", mask " +
                               pair.mask.shape().str());
    pair.mask.array() = (pair.mask.array() >= 128.0f / 255.0f).cast<float>();
    result.pairs.push_back(std::move(pair));
  }
  for (const auto& [id, mask_path] : masks)
    if (!images.count(id)) result.unmatched.push_back("masks/" + mask_path.filename().string());
  return result;
}

std::vector<ImageMaskPair> make_toy_dataset(int n, int size, std::uint64_t seed) {
  if (size < 16) throw std::invalid_argument("make_toy_dataset: size must be >= 16");
  std::vector<ImageMaskPair> out;
  out.reserve(std::size_t(std::max(n, 0)));
  const double pi = std::numbers::pi;
  for (int i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, std::uint64_t(i)));
    ImageMaskPair pair{Image(Shape{1, size, size, 3}), Image(Shape{1, size, size, 1}), "toy_" + std::to_string(i)};
    const double base[3] = {uniform_real(rng, 0.10, 0.20), uniform_real(rng, 0.25, 0.38), uniform_real(rng, 0.06, 0.14)};
    struct Wave {
      double fx, fy, phase, amp;
    };
    Wave waves[2];
    for (auto& w : waves) w = {uniform_real(rng, -2.0, 2.0), uniform_real(rng, -2.0, 2.0), uniform_real(rng, 0, 2 * pi),
                               uniform_real(rng, 0.02, 0.06)};
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        double tex = 0;
        for (const auto& w : waves)
          tex += w.amp * std::sin(2 * pi * (w.fx * (x + 0.5) + w.fy * (y + 0.5)) / size + w.phase);
        for (int c = 0; c < 3; ++c) pair.image(0, y, x, c) = float(std::clamp(base[c] + tex, 0.0, 0.5));
      }
    const int count = uniform_int(rng, 3, 12);
    const double r_lo = std::max(0.75, 0.07 * size);
    const double r_hi = std::max(r_lo, 0.11 * size);
    for (int e = 0; e < count; ++e) {
      const double cx = uniform_real(rng, 0, size), cy = uniform_real(rng, 0, size);
      const double a = uniform_real(rng, r_lo, r_hi), b = uniform_real(rng, r_lo, r_hi);
      const double theta = uniform_real(rng, 0, pi);
      const double color[3] = {uniform_real(rng, 0.75, 0.95), uniform_real(rng, 0.70, 0.90), uniform_real(rng, 0.35, 0.55)};
      const double ct = std::cos(theta), st = std::sin(theta);
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
          const double u = (dx * ct + dy * st) / a, v = (-dx * st + dy * ct) / b;
          if (u * u + v * v <= 1.0) {
            pair.mask(0, y, x, 0) = 1.0f;
            for (int c = 0; c < 3; ++c) pair.image(0, y, x, c) = float(color[c]);
          }
        }
    }
    out.push_back(std::move(pair));
  }
  return out;
}

fs::path export_generated(const std::vector<ImageMaskPair>& pairs, const fs::path& dir, const ExportInfo& info,
                          float threshold) {
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  fs::create_directories(dir / "masks", ec);
  if (ec || !fs::is_directory(dir / "images")) throw std::runtime_error("cannot create export directory " + dir.string());
  nlohmann::json ids = nlohmann::json::array();
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    char fallback[32];
    std::snprintf(fallback, sizeof fallback, "%06zu", i);
    const std::string id = pairs[i].id.empty() ? std::string(fallback) : pairs[i].id;
    write_png(dir / "images" / (id + ".png"), pairs[i].image);
    write_png(dir / "masks" / (id + ".png"), binarize(pairs[i].mask, threshold));
    ids.push_back(id);
  }
  nlohmann::json manifest = {{"count", pairs.size()},
                             {"checkpoint", info.checkpoint},
                             {"sampler_mode", info.sampler_mode},
                             {"sampler_steps", info.sampler_steps},
                             {"seed", info.seed},
                             {"config_hash", info.config_hash},
                             {"mask_threshold", threshold},
                             {"ids", ids}};
  const fs::path path = dir / "manifest.json";
  write_file_atomic(path, manifest.dump(2));
  return path;
}

}  // namespace pairdiff
