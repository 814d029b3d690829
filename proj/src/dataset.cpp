#include "epsilon/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include <zlib.h>

#include "epsilon/util.hpp"

namespace epsilon {

namespace {

constexpr uint32_t kImagesMagic = 0x00000803;
constexpr uint32_t kLabelsMagic = 0x00000801;

uint32_t read_u32_be(const uint8_t* p) {
  return static_cast<uint32_t>(p[0]) << 24 | static_cast<uint32_t>(p[1]) << 16 |
         static_cast<uint32_t>(p[2]) << 8 | static_cast<uint32_t>(p[3]);
}

void append_u32_be(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v >> 24));
  out.push_back(static_cast<uint8_t>(v >> 16));
  out.push_back(static_cast<uint8_t>(v >> 8));
  out.push_back(static_cast<uint8_t>(v));
}

std::vector<uint8_t> gunzip(const std::vector<uint8_t>& compressed, const std::string& path) {
  z_stream zs{};
  if (inflateInit2(&zs, 15 + 16) != Z_OK) {
    throw std::runtime_error("gunzip: inflateInit failed for " + path);
  }
  std::vector<uint8_t> out;
  out.reserve(compressed.size() * 4);
  uint8_t buf[1 << 16];
  zs.next_in = const_cast<Bytef*>(compressed.data());
  zs.avail_in = static_cast<uInt>(compressed.size());
  int rc = Z_OK;
  do {
    zs.next_out = buf;
    zs.avail_out = sizeof(buf);
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw std::runtime_error("gunzip: corrupt gzip stream in " + path);
    }
    out.insert(out.end(), buf, buf + (sizeof(buf) - zs.avail_out));
  } while (rc != Z_STREAM_END);
  inflateEnd(&zs);
  return out;
}

std::vector<uint8_t> gzip_bytes(const std::vector<uint8_t>& raw) {
  z_stream zs{};
  if (deflateInit2(&zs, Z_BEST_SPEED, Z_DEFLATED, 15 + 16, 8, Z_DEFAULT_STRATEGY) != Z_OK) {
    throw std::runtime_error("gzip_bytes: deflateInit failed");
  }
  std::vector<uint8_t> out(deflateBound(&zs, static_cast<uLong>(raw.size())));
  zs.next_in = const_cast<Bytef*>(raw.data());
  zs.avail_in = static_cast<uInt>(raw.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  if (deflate(&zs, Z_FINISH) != Z_STREAM_END) {
    deflateEnd(&zs);
    throw std::runtime_error("gzip_bytes: deflate failed");
  }
  out.resize(out.size() - zs.avail_out);
  deflateEnd(&zs);
  return out;
}

std::vector<uint8_t> read_maybe_gzipped(const std::string& path) {
  std::vector<uint8_t> bytes = read_file_bytes(path);
  if (bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b) return gunzip(bytes, path);
  return bytes;
}

std::string hex_magic(uint32_t v) {
  char buf[16];
  snprintf(buf, sizeof(buf), "0x%08x", v);
  return buf;
}

}  // namespace

Dataset Dataset::take(size_t count, const std::string& new_tag) const {
  return slice(0, count, new_tag);
}

Dataset Dataset::slice(size_t begin, size_t count, const std::string& new_tag) const {
  if (begin + count > size()) {
    throw std::out_of_range("Dataset::slice: range exceeds dataset of " + std::to_string(size()));
  }
  Dataset out;
  out.item_shape = item_shape;
  out.class_count = class_count;
  out.tag = new_tag;
  const auto isz = static_cast<size_t>(item_size());
  out.values.assign(values.begin() + static_cast<long>(begin * isz),
                    values.begin() + static_cast<long>((begin + count) * isz));
  out.labels.assign(labels.begin() + static_cast<long>(begin),
                    labels.begin() + static_cast<long>(begin + count));
  return out;
}

Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path) {
  const std::vector<uint8_t> img = read_maybe_gzipped(images_path);
  if (img.size() < 16) throw std::runtime_error("load_mnist_idx: " + images_path + ": truncated header");
  const uint32_t img_magic = read_u32_be(img.data());
  if (img_magic != kImagesMagic) {
    throw std::runtime_error("load_mnist_idx: " + images_path + ": bad magic " +
                             hex_magic(img_magic) + ", expected " + hex_magic(kImagesMagic));
  }
  const uint32_t count = read_u32_be(img.data() + 4);
  const uint32_t rows = read_u32_be(img.data() + 8);
  const uint32_t cols = read_u32_be(img.data() + 12);
  const size_t need = 16 + static_cast<size_t>(count) * rows * cols;
  if (img.size() < need) {
    throw std::runtime_error("load_mnist_idx: " + images_path + ": truncated pixel data (" +
                             std::to_string(img.size()) + " bytes, need " + std::to_string(need) +
                             ")");
  }

  const std::vector<uint8_t> lbl = read_maybe_gzipped(labels_path);
  if (lbl.size() < 8) throw std::runtime_error("load_mnist_idx: " + labels_path + ": truncated header");
  const uint32_t lbl_magic = read_u32_be(lbl.data());
  if (lbl_magic != kLabelsMagic) {
    throw std::runtime_error("load_mnist_idx: " + labels_path + ": bad magic " +
                             hex_magic(lbl_magic) + ", expected " + hex_magic(kLabelsMagic));
  }
  const uint32_t lbl_count = read_u32_be(lbl.data() + 4);
  if (lbl_count != count) {
    throw std::runtime_error("load_mnist_idx: image count " + std::to_string(count) +
                             " does not match label count " + std::to_string(lbl_count));
  }
  if (lbl.size() < 8 + static_cast<size_t>(count)) {
    throw std::runtime_error("load_mnist_idx: " + labels_path + ": truncated label data");
  }

  Dataset data;
  data.item_shape = {static_cast<int>(rows), static_cast<int>(cols)};
  data.tag = images_path;
  data.values.resize(static_cast<size_t>(count) * rows * cols);
  for (size_t i = 0; i < data.values.size(); ++i) {
    data.values[i] = static_cast<float>(img[16 + i]) / 255.0f;
  }
  data.labels.resize(count);
  int max_label = 0;
  for (uint32_t i = 0; i < count; ++i) {
    data.labels[i] = lbl[8 + i];
    max_label = std::max(max_label, data.labels[i]);
  }
  data.class_count = std::max(max_label + 1, 10);
  return data;
}

void save_idx(const Dataset& data, const std::string& images_path,
              const std::string& labels_path, bool gzip) {
  if (data.item_shape.size() != 2) {
    throw std::runtime_error("save_idx: dataset items must be 2-D images");
  }
  std::vector<uint8_t> img;
  img.reserve(16 + data.values.size());
  append_u32_be(img, kImagesMagic);
  append_u32_be(img, static_cast<uint32_t>(data.size()));
  append_u32_be(img, static_cast<uint32_t>(data.item_shape[0]));
  append_u32_be(img, static_cast<uint32_t>(data.item_shape[1]));
  for (float v : data.values) {
    img.push_back(static_cast<uint8_t>(std::clamp<long>(std::lround(v * 255.0f), 0, 255)));
  }
  std::vector<uint8_t> lbl;
  lbl.reserve(8 + data.size());
  append_u32_be(lbl, kLabelsMagic);
  append_u32_be(lbl, static_cast<uint32_t>(data.size()));
  for (int l : data.labels) lbl.push_back(static_cast<uint8_t>(l));
  if (gzip) {
    img = gzip_bytes(img);
    lbl = gzip_bytes(lbl);
  }
  write_file_bytes(images_path, img.data(), img.size());
  write_file_bytes(labels_path, lbl.data(), lbl.size());
}

Dataset gen_synthetic(SyntheticKind kind, int n, int classes, uint64_t seed) {
  if (classes < 2) throw std::invalid_argument("gen_synthetic: need at least 2 classes");
  if (n < classes) throw std::invalid_argument("gen_synthetic: n must be >= classes");
  std::mt19937_64 rng(mix64(seed, kind == SyntheticKind::Blobs ? 0xb10b5ULL : 0x5b17a1ULL));
  auto gauss = [&rng]() {
    // Box-Muller on explicit uniform draws keeps the stream reproducible.
    const double u1 = std::max(rng_unit(rng), 1e-12);
    const double u2 = rng_unit(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  };
  Dataset data;
  data.item_shape = {2};
  data.class_count = classes;
  data.tag = kind == SyntheticKind::Blobs ? "blobs" : "spiral";
  data.values.reserve(static_cast<size_t>(n) * 2);
  data.labels.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int c = i % classes;
    double x, y;
    if (kind == SyntheticKind::Blobs) {
      const double angle = 2.0 * M_PI * c / classes;
      x = 0.5 + 0.3 * std::cos(angle) + 0.05 * gauss();
      y = 0.5 + 0.3 * std::sin(angle) + 0.05 * gauss();
    } else {
      const double t = rng_unit(rng);
      const double r = 0.05 + 0.42 * t;
      const double angle = 2.0 * M_PI * c / classes + 3.5 * M_PI * t + 0.12 * gauss();
      x = 0.5 + r * std::cos(angle);
      y = 0.5 + r * std::sin(angle);
    }
    data.values.push_back(static_cast<float>(std::clamp(x, 0.0, 1.0)));
    data.values.push_back(static_cast<float>(std::clamp(y, 0.0, 1.0)));
    data.labels.push_back(c);
  }
  return data;
}

namespace {

// Seven-segment layout on a 28x28 canvas. Segment order: top, top-right,
// bottom-right, bottom, bottom-left, top-left, middle.
constexpr uint8_t kSegmentsPerDigit[10] = {
    0b0111111,  // 0
    0b0000110,  // 1
    0b1011011,  // 2
    0b1001111,  // 3
    0b1100110,  // 4
    0b1101101,  // 5
    0b1111101,  // 6
    0b0000111,  // 7
    0b1111111,  // 8
    0b1101111,  // 9
};

void draw_bar(std::vector<float>& canvas, int rows, int cols, int r0, int c0, int r1, int c1,
              float intensity) {
  for (int r = r0; r <= r1; ++r) {
    for (int c = c0; c <= c1; ++c) {
      if (r >= 0 && r < rows && c >= 0 && c < cols) {
        canvas[static_cast<size_t>(r) * cols + c] = intensity;
      }
    }
  }
}

}  // namespace

Dataset gen_digits(int n, uint64_t seed) {
  if (n < 1) throw std::invalid_argument("gen_digits: n must be >= 1");
  constexpr int kSide = 28;
  std::mt19937_64 rng(mix64(seed, 0xd161ULL));
  Dataset data;
  data.item_shape = {kSide, kSide};
  data.class_count = 10;
  data.tag = "digits";
  data.values.assign(static_cast<size_t>(n) * kSide * kSide, 0.0f);
  data.labels.resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int digit = static_cast<int>(rng_below(rng, 10));
    data.labels[static_cast<size_t>(i)] = digit;
    std::vector<float> canvas(kSide * kSide, 0.0f);
    const int dr = static_cast<int>(rng_below(rng, 5)) - 2;  // +-2 px jitter
    const int dc = static_cast<int>(rng_below(rng, 5)) - 2;
    const float ink = 0.55f + 0.45f * static_cast<float>(rng_unit(rng));
    const int t = 2 + static_cast<int>(rng_below(rng, 2));  // stroke half-width
    // Glyph box rows 4..23, cols 8..19, middle row 14.
    const int top = 4 + dr, bot = 23 + dr, mid = 14 + dr;
    const int left = 8 + dc, right = 19 + dc;
    const uint8_t segs = kSegmentsPerDigit[digit];
    if (segs & 0b0000001) draw_bar(canvas, kSide, kSide, top, left, top + t, right, ink);
    if (segs & 0b0000010) draw_bar(canvas, kSide, kSide, top, right - t, mid, right, ink);
    if (segs & 0b0000100) draw_bar(canvas, kSide, kSide, mid, right - t, bot, right, ink);
    if (segs & 0b0001000) draw_bar(canvas, kSide, kSide, bot - t, left, bot, right, ink);
    if (segs & 0b0010000) draw_bar(canvas, kSide, kSide, mid, left, bot, left + t, ink);
    if (segs & 0b0100000) draw_bar(canvas, kSide, kSide, top, left, mid, left + t, ink);
    if (segs & 0b1000000) draw_bar(canvas, kSide, kSide, mid - t / 2, left, mid + t / 2, right, ink);
    for (int p = 0; p < kSide * kSide; ++p) {
      double v = canvas[static_cast<size_t>(p)] + 0.3 * (rng_unit(rng) - 0.5);
      if (rng_below(rng, 50) == 0) v = rng_unit(rng);  // speckle
      data.values[static_cast<size_t>(i) * kSide * kSide + p] =
          static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return data;
}

Dataset pad_items(const Dataset& data, int rows, int cols) {
  if (data.item_shape.size() != 2) throw std::runtime_error("pad_items: items must be 2-D");
  const int r0 = data.item_shape[0], c0 = data.item_shape[1];
  if (rows < r0 || cols < c0) throw std::runtime_error("pad_items: target smaller than items");
  const int top = (rows - r0) / 2, left = (cols - c0) / 2;
  Dataset out;
  out.item_shape = {rows, cols};
  out.class_count = data.class_count;
  out.labels = data.labels;
  out.tag = data.tag;
  out.values.assign(data.size() * static_cast<size_t>(rows) * cols, 0.0f);
  for (size_t i = 0; i < data.size(); ++i) {
    const float* src = data.values.data() + i * static_cast<size_t>(r0) * c0;
    float* dst = out.values.data() + i * static_cast<size_t>(rows) * cols;
    for (int r = 0; r < r0; ++r) {
      std::copy(src + static_cast<size_t>(r) * c0, src + static_cast<size_t>(r + 1) * c0,
                dst + static_cast<size_t>(r + top) * cols + left);
    }
  }
  return out;
}

Dataset load_data_spec(const std::string& spec) {
  auto split = [](const std::string& s, char delim) {
    std::vector<std::string> parts;
    size_t start = 0;
    while (true) {
      const size_t pos = s.find(delim, start);
      parts.push_back(s.substr(start, pos - start));
      if (pos == std::string::npos) break;
      start = pos + 1;
    }
    return parts;
  };
  if (spec.rfind("idx:", 0) == 0) {
    const auto parts = split(spec.substr(4), ',');
    if (parts.size() != 2) {
      throw std::runtime_error("load_data_spec: idx spec needs '<images>,<labels>'");
    }
    return load_mnist_idx(parts[0], parts[1]);
  }
  const auto parts = split(spec, ':');
  auto arg = [&](size_t i, long long fallback) {
    return parts.size() > i ? std::stoll(parts[i]) : fallback;
  };
  if (parts[0] == "digits") {
    return gen_digits(static_cast<int>(arg(1, 1000)), static_cast<uint64_t>(arg(2, 7)));
  }
  if (parts[0] == "blobs" || parts[0] == "spiral") {
    const auto kind = parts[0] == "blobs" ? SyntheticKind::Blobs : SyntheticKind::Spiral;
    return gen_synthetic(kind, static_cast<int>(arg(1, 1000)), static_cast<int>(arg(2, 2)),
                         static_cast<uint64_t>(arg(3, 7)));
  }
  throw std::runtime_error("load_data_spec: unknown data spec '" + spec + "'");
}

}  // namespace epsilon
