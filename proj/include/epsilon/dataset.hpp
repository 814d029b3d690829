#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace epsilon {

/// Labeled real-valued samples in [0, 1]. Immutable after load; safe to
/// share across workers.
struct Dataset {
  std::vector<float> values;    // size() * item_size() entries, row-major
  std::vector<int> item_shape;  // e.g. {28, 28} for images, {2} for points
  std::vector<int> labels;
  int class_count = 0;
  std::string tag;

  size_t size() const { return labels.size(); }
  int item_size() const {
    int n = 1;
    for (int d : item_shape) n *= d;
    return n;
  }
  std::span<const float> item(size_t i) const {
    return {values.data() + i * static_cast<size_t>(item_size()),
            static_cast<size_t>(item_size())};
  }

  Dataset take(size_t count, const std::string& new_tag) const;
  Dataset slice(size_t begin, size_t count, const std::string& new_tag) const;
};

/// Reads an IDX image/label file pair (big-endian headers, magic 0x00000803
/// for images and 0x00000801 for labels). Pixel bytes are scaled by 1/255.
/// Files starting with the gzip prefix 0x1f 0x8b are decompressed first.
Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path);

/// Writes a dataset with 2-D items as an IDX image/label file pair,
/// optionally gzip-compressed. Pixels are stored as round(v * 255).
void save_idx(const Dataset& data, const std::string& images_path,
              const std::string& labels_path, bool gzip = false);

enum class SyntheticKind { Blobs, Spiral };

/// Deterministic 2-D point datasets: linearly separable Gaussian blobs or an
/// interleaved spiral that defeats linear classifiers.
Dataset gen_synthetic(SyntheticKind kind, int n, int classes, uint64_t seed);

/// Deterministic raster benchmark: 28x28 renderings of ten seven-segment
/// digit glyphs with random shift, stroke intensity and pixel noise. Serves
/// as an offline stand-in wherever a small labeled image corpus is needed.
Dataset gen_digits(int n, uint64_t seed);

/// Zero-pads 2-D items (centered) up to rows x cols.
Dataset pad_items(const Dataset& data, int rows, int cols);

/// Parses a data spec: "idx:<images>,<labels>", "digits:<n>[:seed]",
/// "blobs:<n>:<classes>[:seed]" or "spiral:<n>:<classes>[:seed]".
Dataset load_data_spec(const std::string& spec);

}  // namespace epsilon
