#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ddcn/arch.hpp"
#include "ddcn/errors.hpp"
#include "ddcn/parallel.hpp"
#include "ddcn/tensor.hpp"

namespace ddcn {

// ---------------------------------------------------------------------------
// Netpbm images (binary P6 / P5)

struct RgbImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;  // interleaved RGB, row-major
};

struct DepthImage {
  std::size_t width = 0, height = 0;
  std::uint16_t maxval = 65535;
  std::vector<std::uint16_t> pixels;  // millimeters, 0 = missing
};

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path + ": cannot open");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct PnmHeader {
  std::string magic;
  std::size_t width = 0, height = 0, maxval = 0;
  std::size_t data_offset = 0;
};

// Parses "Px <w> <h> <maxval>" with '#' comments and one whitespace byte
// before the raster.
inline PnmHeader parse_pnm_header(const std::vector<std::uint8_t>& bytes, const std::string& path) {
  PnmHeader h;
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto token = [&]() -> std::string {
    skip_space();
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos]) && bytes[pos] != '#') t += static_cast<char>(bytes[pos++]);
    if (t.empty()) throw FormatError(path + ": truncated header");
    return t;
  };
  auto number = [&](const char* what) -> std::size_t {
    const std::string t = token();
    if (!std::all_of(t.begin(), t.end(), [](char c) { return c >= '0' && c <= '9'; }) || t.size() > 9)
      throw FormatError(path + ": malformed " + std::string(what) + " '" + t + "' in header");
    return static_cast<std::size_t>(std::stoul(t));
  };
  h.magic = token();
  if (h.magic != "P5" && h.magic != "P6") throw FormatError(path + ": unsupported magic '" + h.magic + "'");
  h.width = number("width");
  h.height = number("height");
  h.maxval = number("maxval");
  if (h.width == 0 || h.height == 0) throw FormatError(path + ": zero image dimension");
  if (h.maxval == 0 || h.maxval > 65535) throw FormatError(path + ": unsupported maxval " + std::to_string(h.maxval));
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw FormatError(path + ": header not terminated");
  h.data_offset = pos + 1;
  return h;
}

inline void write_file(const std::string& path, const std::string& header, const std::vector<std::uint8_t>& raster) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(path + ": cannot write");
  out << header;
  out.write(reinterpret_cast<const char*>(raster.data()), static_cast<std::streamsize>(raster.size()));
  if (!out) throw FormatError(path + ": write failed");
}

}  // namespace detail

inline RgbImage read_ppm(const std::string& path) {
  const auto bytes = detail::read_file(path);
  const auto h = detail::parse_pnm_header(bytes, path);
  if (h.magic != "P6") throw FormatError(path + ": expected binary PPM (P6), got " + h.magic);
  if (h.maxval != 255) throw FormatError(path + ": unsupported PPM maxval " + std::to_string(h.maxval) + " (need 255)");
  const std::size_t n = h.width * h.height * 3;
  if (bytes.size() - h.data_offset < n) throw FormatError(path + ": truncated raster");
  RgbImage img{h.width, h.height, {}};
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(h.data_offset),
                    bytes.begin() + static_cast<std::ptrdiff_t>(h.data_offset + n));
  return img;
}

// 16-bit PGM: two bytes per sample, most significant first.
inline DepthImage read_pgm16(const std::string& path) {
  const auto bytes = detail::read_file(path);
  const auto h = detail::parse_pnm_header(bytes, path);
  if (h.magic != "P5") throw FormatError(path + ": expected binary PGM (P5), got " + h.magic);
  if (h.maxval < 256) throw FormatError(path + ": unsupported PGM maxval " + std::to_string(h.maxval) + " (depth needs 16-bit)");
  const std::size_t n = h.width * h.height;
  if (bytes.size() - h.data_offset < 2 * n) throw FormatError(path + ": truncated raster");
  DepthImage img{h.width, h.height, static_cast<std::uint16_t>(h.maxval), std::vector<std::uint16_t>(n)};
  for (std::size_t i = 0; i < n; ++i)
    img.pixels[i] = static_cast<std::uint16_t>((bytes[h.data_offset + 2 * i] << 8) | bytes[h.data_offset + 2 * i + 1]);
  return img;
}

inline void write_ppm(const std::string& path, const RgbImage& img) {
  detail::write_file(path, "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n", img.pixels);
}

inline void write_pgm16(const std::string& path, const DepthImage& img) {
  std::vector<std::uint8_t> raster(img.pixels.size() * 2);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    raster[2 * i] = static_cast<std::uint8_t>(img.pixels[i] >> 8);
    raster[2 * i + 1] = static_cast<std::uint8_t>(img.pixels[i] & 0xff);
  }
  detail::write_file(path,
                     "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n" +
                         std::to_string(img.maxval) + "\n",
                     raster);
}

inline void write_pgm8(const std::string& path, std::size_t width, std::size_t height, const std::vector<std::uint8_t>& gray) {
  detail::write_file(path, "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n", gray);
}

// ---------------------------------------------------------------------------
// Samples

// One RGB/depth pair at the training resolution.
struct Sample {
  Tensor4<float> rgb;                // (1, 3, h, w), values in [0, 1]
  Tensor4<float> depth;              // (1, 1, h, w), meters, 0 where masked
  std::vector<std::uint8_t> mask;    // depth > 0
};

// Bilinear resize with half-pixel centers. When mask is given, a target pixel
// that draws any weight from a masked source pixel is masked as well.
inline std::vector<float> resize_bilinear(const std::vector<float>& src, std::size_t src_h, std::size_t src_w,
                                          std::size_t dst_h, std::size_t dst_w,
                                          const std::vector<std::uint8_t>* src_mask = nullptr,
                                          std::vector<std::uint8_t>* dst_mask = nullptr) {
  std::vector<float> dst(dst_h * dst_w);
  if (dst_mask) dst_mask->assign(dst_h * dst_w, 1);
  struct Tap {
    std::size_t i0, i1;
    double f;
  };
  auto taps = [](std::size_t src_n, std::size_t dst_n) {
    std::vector<Tap> t(dst_n);
    const double scale = static_cast<double>(src_n) / static_cast<double>(dst_n);
    for (std::size_t i = 0; i < dst_n; ++i) {
      double s = (static_cast<double>(i) + 0.5) * scale - 0.5;
      s = std::clamp(s, 0.0, static_cast<double>(src_n - 1));
      const auto i0 = static_cast<std::size_t>(std::floor(s));
      const std::size_t i1 = std::min(i0 + 1, src_n - 1);
      t[i] = {i0, i1, s - static_cast<double>(i0)};
    }
    return t;
  };
  const auto ty = taps(src_h, dst_h);
  const auto tx = taps(src_w, dst_w);
  for (std::size_t y = 0; y < dst_h; ++y) {
    for (std::size_t x = 0; x < dst_w; ++x) {
      const Tap& a = ty[y];
      const Tap& b = tx[x];
      const std::array<std::pair<std::size_t, double>, 4> corners = {{
          {a.i0 * src_w + b.i0, (1 - a.f) * (1 - b.f)},
          {a.i0 * src_w + b.i1, (1 - a.f) * b.f},
          {a.i1 * src_w + b.i0, a.f * (1 - b.f)},
          {a.i1 * src_w + b.i1, a.f * b.f},
      }};
      double v = 0.0;
      bool valid = true;
      for (const auto& [idx, wgt] : corners) {
        if (wgt <= 0.0) continue;
        if (src_mask && !(*src_mask)[idx]) valid = false;
        v += wgt * src[idx];
      }
      dst[y * dst_w + x] = valid ? static_cast<float>(v) : 0.0f;
      if (dst_mask) (*dst_mask)[y * dst_w + x] = valid ? 1 : 0;
    }
  }
  return dst;
}

namespace detail {

inline Tensor4<float> rgb_tensor(const RgbImage& rgb, Size2 target) {
  const std::size_t h = rgb.height, w = rgb.width;
  Tensor4<float> out(Shape4{1, 3, target.h, target.w});
  for (std::size_t c = 0; c < 3; ++c) {
    std::vector<float> plane(h * w);
    for (std::size_t i = 0; i < h * w; ++i) plane[i] = static_cast<float>(rgb.pixels[3 * i + c]) / 255.0f;
    const auto resized = resize_bilinear(plane, h, w, target.h, target.w);
    std::copy(resized.begin(), resized.end(), out.plane(0, c));
  }
  return out;
}

}  // namespace detail

// RGB image alone, scaled to [0, 1] and resized to target.
inline Tensor4<float> load_rgb(const std::string& rgb_path, Size2 target) {
  return detail::rgb_tensor(read_ppm(rgb_path), target);
}

// Decodes a P6 RGB image and a P5 16-bit depth image (millimeters), resizes
// both bilinearly to target and converts depth to meters; zero depth is masked.
inline Sample load_pair(const std::string& rgb_path, const std::string& depth_path, Size2 target) {
  const RgbImage rgb = read_ppm(rgb_path);
  const DepthImage depth = read_pgm16(depth_path);
  if (rgb.width != depth.width || rgb.height != depth.height)
    throw FormatError(depth_path + ": size " + std::to_string(depth.width) + "x" + std::to_string(depth.height) +
                      " does not match " + rgb_path + " (" + std::to_string(rgb.width) + "x" +
                      std::to_string(rgb.height) + ")");
  const std::size_t h = rgb.height, w = rgb.width;
  Sample s{detail::rgb_tensor(rgb, target), Tensor4<float>(Shape4{1, 1, target.h, target.w}), {}};
  std::vector<float> meters(h * w);
  std::vector<std::uint8_t> valid(h * w);
  for (std::size_t i = 0; i < h * w; ++i) {
    meters[i] = static_cast<float>(depth.pixels[i]) / 1000.0f;
    valid[i] = depth.pixels[i] > 0 ? 1 : 0;
  }
  const auto resized = resize_bilinear(meters, h, w, target.h, target.w, &valid, &s.mask);
  std::copy(resized.begin(), resized.end(), s.depth.plane(0, 0));
  return s;
}

inline void save_pair(const Sample& s, const std::string& rgb_path, const std::string& depth_path) {
  const Shape4 shape = s.rgb.shape();
  RgbImage rgb{shape.w, shape.h, std::vector<std::uint8_t>(shape.h * shape.w * 3)};
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < shape.h * shape.w; ++i)
      rgb.pixels[3 * i + c] =
          static_cast<std::uint8_t>(std::lround(std::clamp(s.rgb.plane(0, c)[i], 0.0f, 1.0f) * 255.0f));
  DepthImage depth{shape.w, shape.h, 65535, std::vector<std::uint16_t>(shape.h * shape.w)};
  for (std::size_t i = 0; i < depth.pixels.size(); ++i) {
    const double mm = s.mask[i] ? std::clamp(std::round(static_cast<double>(s.depth[i]) * 1000.0), 1.0, 65535.0) : 0.0;
    depth.pixels[i] = static_cast<std::uint16_t>(mm);
  }
  write_ppm(rgb_path, rgb);
  write_pgm16(depth_path, depth);
}

// Synthetic indoor-like scene: a tilted background plane plus 2-5 axis-aligned
// rectangles at depths in [1, 10] m. Brightness falls linearly with depth and
// each rectangle carries its own hue, so depth is recoverable from color.
inline Sample synth_scene(std::uint64_t seed, Size2 size) {
  if (size.h < 8 || size.w < 8) throw ConfigError("synthetic scenes need at least 8x8 pixels");
  Rng rng(seed);
  const std::size_t h = size.h, w = size.w;
  std::vector<float> depth(h * w);
  std::vector<std::array<float, 3>> hue(h * w, {1.0f, 1.0f, 1.0f});

  const double top = rng.uniform(1.5, 9.5);
  const double bottom = rng.uniform(1.5, 9.5);
  const double tilt = rng.uniform(-0.5, 0.5);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double fy = static_cast<double>(y) / static_cast<double>(h - 1);
      const double fx = static_cast<double>(x) / static_cast<double>(w - 1) - 0.5;
      depth[y * w + x] = static_cast<float>(std::clamp(top + (bottom - top) * fy + tilt * fx, 1.0, 10.0));
    }

  struct Rect {
    std::size_t y0, x0, y1, x1;
    float depth;
    std::array<float, 3> hue;
  };
  std::vector<Rect> rects(2 + rng.below(4));
  for (auto& r : rects) {
    const std::size_t rh = h / 8 + rng.below(h / 2 - h / 8 + 1);
    const std::size_t rw = w / 8 + rng.below(w / 2 - w / 8 + 1);
    r.y0 = rng.below(h - rh + 1);
    r.x0 = rng.below(w - rw + 1);
    r.y1 = r.y0 + rh;
    r.x1 = r.x0 + rw;
    r.depth = static_cast<float>(rng.uniform(1.0, 10.0));
    float peak = 0.0f;
    for (auto& c : r.hue) {
      c = static_cast<float>(rng.uniform(0.2, 1.0));
      peak = std::max(peak, c);
    }
    for (auto& c : r.hue) c /= peak;
  }
  // Far to near, so nearer rectangles occlude.
  std::stable_sort(rects.begin(), rects.end(), [](const Rect& a, const Rect& b) { return a.depth > b.depth; });
  for (const auto& r : rects)
    for (std::size_t y = r.y0; y < r.y1; ++y)
      for (std::size_t x = r.x0; x < r.x1; ++x) {
        depth[y * w + x] = r.depth;
        hue[y * w + x] = r.hue;
      }

  Sample s{Tensor4<float>(Shape4{1, 3, h, w}), Tensor4<float>(Shape4{1, 1, h, w}),
           std::vector<std::uint8_t>(h * w, 1)};
  for (std::size_t i = 0; i < h * w; ++i) {
    // Quantized exactly as the 8-bit / millimeter files store them, so a
    // scene saved with save_pair loads back bit-identical.
    const float mm = std::round(depth[i] * 1000.0f);
    const float shade = 1.0f - 0.08f * (mm / 1000.0f - 1.0f);
    for (std::size_t c = 0; c < 3; ++c)
      s.rgb.plane(0, c)[i] = static_cast<float>(std::lround(hue[i][c] * shade * 255.0f)) / 255.0f;
    s.depth[i] = mm / 1000.0f;
  }
  return s;
}

// Scene i of a synthetic set is synth_scene(mix(seed, offset + i)).
inline std::vector<Sample> synthetic_set(std::size_t count, std::uint64_t seed, Size2 size, std::size_t offset = 0) {
  std::vector<Sample> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(synth_scene(Rng::mix(seed, offset + i), size));
  return out;
}

// Validation scenes come from a disjoint index range of the same stream.
inline constexpr std::size_t kSyntheticValOffset = 1'000'000;

// ---------------------------------------------------------------------------
// Manifest and splits

struct ManifestEntry {
  std::string id, rgb, depth;
};

struct Manifest {
  std::map<std::string, std::string> header;  // depth_unit=mm, rgb_norm=unit
  std::vector<ManifestEntry> entries;         // paths resolved against the manifest directory
};

inline Manifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(path + ": cannot open manifest");
  const auto base = std::filesystem::path(path).parent_path();
  Manifest m;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::string kv = line.substr(1);
      kv.erase(0, kv.find_first_not_of(' '));
      const auto eq = kv.find('=');
      if (eq != std::string::npos) m.header[kv.substr(0, eq)] = kv.substr(eq + 1);
      continue;
    }
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, '\t')) fields.push_back(f);
    if (fields.size() != 3)
      throw FormatError(path + ":" + std::to_string(line_no) + ": expected <id>\\t<rgb>\\t<depth>");
    auto resolve = [&](const std::string& p) {
      const std::filesystem::path fp(p);
      return (fp.is_absolute() ? fp : base / fp).string();
    };
    m.entries.push_back({fields[0], resolve(fields[1]), resolve(fields[2])});
  }
  if (auto it = m.header.find("depth_unit"); it != m.header.end() && it->second != "mm")
    throw FormatError(path + ": unsupported depth_unit '" + it->second + "'");
  return m;
}

inline void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError(path + ": cannot write manifest");
  out << "# depth_unit=mm\n# rgb_norm=unit\n";
  for (const auto& e : entries) out << e.id << '\t' << e.rgb << '\t' << e.depth << '\n';
}

enum class Split { Train, Val, Test };

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw ConfigError("unknown split '" + s + "' (train|val|test)");
}

struct SplitSizes {
  std::size_t train = 0, val = 0, test = 0;
};

// 800 / 200 / 449 for the 1449-image set; the same proportions otherwise.
inline SplitSizes default_split_sizes(std::size_t population) {
  if (population == 1449) return {800, 200, 449};
  const auto train = static_cast<std::size_t>(std::llround(static_cast<double>(population) * 800.0 / 1449.0));
  const auto val = std::min(population - train,
                            static_cast<std::size_t>(std::llround(static_cast<double>(population) * 200.0 / 1449.0)));
  return {train, val, population - train - val};
}

struct DatasetIndex {
  std::vector<std::string> entries;  // shuffled; train, then val, then test
  SplitSizes sizes;
  std::uint64_t seed = 0;

  std::pair<std::size_t, std::size_t> range(Split s) const {
    switch (s) {
      case Split::Train: return {0, sizes.train};
      case Split::Val: return {sizes.train, sizes.train + sizes.val};
      case Split::Test: return {sizes.train + sizes.val, sizes.train + sizes.val + sizes.test};
    }
    return {0, 0};
  }
  std::vector<std::string> ids(Split s) const {
    const auto [b, e] = range(s);
    return {entries.begin() + static_cast<std::ptrdiff_t>(b), entries.begin() + static_cast<std::ptrdiff_t>(e)};
  }
};

// Fisher-Yates with the module generator, then contiguous train/val/test.
template <typename Id>
void fisher_yates(std::vector<Id>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

inline DatasetIndex shuffle_split(std::vector<std::string> ids, std::uint64_t seed, SplitSizes sizes) {
  const std::size_t wanted = sizes.train + sizes.val + sizes.test;
  if (wanted > ids.size())
    throw ConfigError("split sizes " + std::to_string(wanted) + " exceed population " + std::to_string(ids.size()));
  Rng rng(seed);
  fisher_yates(ids, rng);
  ids.resize(wanted);
  return {std::move(ids), sizes, seed};
}

// Batches of positions [0, count) for one epoch, reshuffled per (seed, epoch);
// the last batch may be partial.
inline std::vector<std::vector<std::size_t>> batch_iter(std::size_t count, std::size_t batch_size,
                                                        std::uint64_t seed, std::uint64_t epoch) {
  if (count == 0) throw ConfigError("cannot iterate an empty split");
  if (batch_size == 0) throw ConfigError("batch size must be >= 1");
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(Rng::mix(seed, epoch));
  fisher_yates(order, rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t b = 0; b < count; b += batch_size)
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(count, b + batch_size)));
  return batches;
}

struct Batch {
  Tensor4<float> rgb;    // (B, 3, h, w)
  Tensor4<float> depth;  // (B, 1, h, w)
  std::vector<std::vector<std::uint8_t>> masks;
};

inline Batch assemble_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& picks) {
  if (picks.empty()) throw ConfigError("empty batch");
  const Shape4 rs = samples[picks[0]].rgb.shape();
  const Shape4 ds = samples[picks[0]].depth.shape();
  Batch b{Tensor4<float>(Shape4{picks.size(), 3, rs.h, rs.w}), Tensor4<float>(Shape4{picks.size(), 1, ds.h, ds.w}), {}};
  for (std::size_t k = 0; k < picks.size(); ++k) {
    const Sample& s = samples[picks[k]];
    if (s.rgb.shape() != rs || s.depth.shape() != ds)
      throw ShapeError("sample " + std::to_string(picks[k]) + " has size " + s.rgb.shape().str() +
                       ", batch expects " + rs.str());
    std::copy(s.rgb.data().begin(), s.rgb.data().end(), b.rgb.plane(k, 0));
    std::copy(s.depth.data().begin(), s.depth.data().end(), b.depth.plane(k, 0));
    b.masks.push_back(s.mask);
  }
  return b;
}

// Loads every manifest entry at the target size; order follows the manifest.
inline std::vector<Sample> load_manifest_samples(const Manifest& m, Size2 target) {
  std::vector<Sample> out(m.entries.size());
  parallel_for(m.entries.size(), [&](std::size_t i) { out[i] = load_pair(m.entries[i].rgb, m.entries[i].depth, target); });
  return out;
}

}  // namespace ddcn
