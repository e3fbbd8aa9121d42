#pragma once

// On-disk dataset bundle, one directory per split:
//
//   meta.txt     key=value lines: format, version, split, n_samples, channels,
//                height, width, n_classes, class_names (comma separated) and
//                any extra provenance keys
//   images.f32   n_samples * channels * height * width little-endian f32
//   labels.u32   n_samples little-endian u32

#include <map>
#include <string>
#include <vector>

#include "tokalign/image.hpp"

namespace tokalign {

inline constexpr const char* kDatasetFormat = "tokalign-dataset";
inline constexpr int kDatasetVersion = 1;

struct DatasetBundle {
  std::string split;  // source-train, source-val or test-shifted
  int channels = 1;
  int height = 0;
  int width = 0;
  int n_classes = 0;
  std::vector<std::string> class_names;
  std::vector<Image> images;
  std::vector<int> labels;
  /// Free-form provenance written to meta.txt (seed, shift...).
  std::map<std::string, std::string> extra;

  std::size_t size() const { return images.size(); }
  /// Throws DataError when buffers and meta disagree or a label is out of range.
  void validate() const;
  bool operator==(const DatasetBundle&) const = default;
};

void save_dataset(const DatasetBundle& bundle, const std::string& dir);
/// Throws DataError on missing files, bad sizes or bad labels and FormatError
/// on an unknown format or version.
DatasetBundle load_dataset(const std::string& dir);

/// Images stored as f32: round every pixel so that memory matches disk.
void quantize_to_f32(Image& image);

}  // namespace tokalign
