#include "tokalign/dataset.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "tokalign/binary_io.hpp"
#include "tokalign/errors.hpp"

namespace tokalign {

namespace fs = std::filesystem;

namespace {

int parse_int(const std::map<std::string, std::string>& meta, const std::string& key) {
  const auto it = meta.find(key);
  if (it == meta.end()) throw DataError("meta.txt: missing key '" + key + "'");
  try {
    std::size_t used = 0;
    const int v = std::stoi(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument(key);
    return v;
  } catch (const std::exception&) {
    throw DataError("meta.txt: '" + key + "' is not an integer: " + it->second);
  }
}

}  // namespace

void DatasetBundle::validate() const {
  if (channels < 1 || height < 1 || width < 1) throw DataError("dataset: invalid image shape");
  if (n_classes < 1) throw DataError("dataset: n_classes must be >= 1");
  if (!class_names.empty() && static_cast<int>(class_names.size()) != n_classes)
    throw DataError("dataset: class name count differs from n_classes");
  if (images.size() != labels.size()) throw DataError("dataset: image and label counts differ");
  for (const Image& im : images)
    if (im.channels != channels || im.height != height || im.width != width ||
        im.data.size() != static_cast<std::size_t>(channels * height * width))
      throw DataError("dataset: image shape differs from meta");
  for (int l : labels)
    if (l < 0 || l >= n_classes) throw DataError("dataset: label " + std::to_string(l) + " out of range");
}

void quantize_to_f32(Image& image) {
  for (double& v : image.data) v = static_cast<double>(static_cast<float>(v));
}

void save_dataset(const DatasetBundle& b, const std::string& dir) {
  b.validate();
  fs::create_directories(dir);
  std::ostringstream meta;
  meta << "format=" << kDatasetFormat << "\n"
       << "version=" << kDatasetVersion << "\n"
       << "split=" << b.split << "\n"
       << "n_samples=" << b.size() << "\n"
       << "channels=" << b.channels << "\n"
       << "height=" << b.height << "\n"
       << "width=" << b.width << "\n"
       << "n_classes=" << b.n_classes << "\n"
       << "class_names=";
  for (std::size_t i = 0; i < b.class_names.size(); ++i) meta << (i ? "," : "") << b.class_names[i];
  meta << "\n";
  for (const auto& [k, v] : b.extra) meta << k << "=" << v << "\n";
  const std::string text = meta.str();
  io::write_file((fs::path(dir) / "meta.txt").string(),
                 std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));

  io::ByteWriter images;
  for (const Image& im : b.images)
    for (double v : im.data) images.f32(static_cast<float>(v));
  io::write_file((fs::path(dir) / "images.f32").string(), images.buffer());
  io::ByteWriter labels;
  for (int l : b.labels) labels.u32(static_cast<std::uint32_t>(l));
  io::write_file((fs::path(dir) / "labels.u32").string(), labels.buffer());
}

DatasetBundle load_dataset(const std::string& dir) {
  const fs::path root(dir);
  if (!fs::is_directory(root)) throw DataError("dataset directory '" + dir + "' does not exist");
  const auto meta_bytes = io::read_file((root / "meta.txt").string());
  std::map<std::string, std::string> meta;
  std::istringstream in(std::string(meta_bytes.begin(), meta_bytes.end()));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError("meta.txt: malformed line '" + line + "'");
    meta[line.substr(0, eq)] = line.substr(eq + 1);
  }
  if (meta["format"] != kDatasetFormat) throw FormatError("meta.txt: unknown format '" + meta["format"] + "'");
  if (parse_int(meta, "version") != kDatasetVersion)
    throw FormatError("meta.txt: unsupported version " + meta["version"]);

  DatasetBundle b;
  b.split = meta["split"];
  b.channels = parse_int(meta, "channels");
  b.height = parse_int(meta, "height");
  b.width = parse_int(meta, "width");
  b.n_classes = parse_int(meta, "n_classes");
  const int n = parse_int(meta, "n_samples");
  if (n < 0 || b.channels < 1 || b.height < 1 || b.width < 1) throw DataError("meta.txt: invalid sizes");
  std::stringstream names(meta["class_names"]);
  for (std::string name; std::getline(names, name, ',');) b.class_names.push_back(name);
  for (const auto& [k, v] : meta)
    if (k != "format" && k != "version" && k != "split" && k != "n_samples" && k != "channels" && k != "height" &&
        k != "width" && k != "n_classes" && k != "class_names")
      b.extra[k] = v;

  const std::size_t pixels = static_cast<std::size_t>(b.channels) * b.height * b.width;
  const auto image_bytes = io::read_file((root / "images.f32").string());
  if (image_bytes.size() != static_cast<std::size_t>(n) * pixels * 4)
    throw DataError("images.f32: expected " + std::to_string(static_cast<std::size_t>(n) * pixels * 4) +
                    " bytes, found " + std::to_string(image_bytes.size()));
  const auto label_bytes = io::read_file((root / "labels.u32").string());
  if (label_bytes.size() != static_cast<std::size_t>(n) * 4)
    throw DataError("labels.u32: expected " + std::to_string(n * 4) + " bytes, found " +
                    std::to_string(label_bytes.size()));

  io::ByteReader ir(image_bytes, "images.f32");
  io::ByteReader lr(label_bytes, "labels.u32");
  for (int i = 0; i < n; ++i) {
    Image im(b.channels, b.height, b.width);
    for (double& v : im.data) v = static_cast<double>(ir.f32());
    b.images.push_back(std::move(im));
    const std::uint32_t label = lr.u32();
    if (label >= static_cast<std::uint32_t>(std::max(b.n_classes, 0)))
      throw DataError("labels.u32: label " + std::to_string(label) + " at index " + std::to_string(i) +
                      " is not below n_classes=" + std::to_string(b.n_classes));
    b.labels.push_back(static_cast<int>(label));
  }
  b.validate();
  return b;
}

}  // namespace tokalign
