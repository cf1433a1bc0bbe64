#include "simplerob/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "simplerob/common.hpp"

namespace simplerob::data {

// ---- Dataset -------------------------------------------------------------------

ad::Shape Dataset::example_shape() const {
  const auto& s = inputs.shape();
  return ad::Shape(s.begin() + 1, s.end());
}

void Dataset::validate() const {
  if (labels.empty()) throw PreconditionError("dataset '" + name + "' is empty");
  if (!inputs.defined() || inputs.rank() < 2 || inputs.dim(0) != labels.size()) {
    throw PreconditionError("dataset '" + name + "': " + std::to_string(labels.size()) + " labels for inputs " +
                            (inputs.defined() ? ad::shape_str(inputs.shape()) : std::string("<none>")));
  }
  for (auto y : labels) {
    if (y >= num_classes) {
      throw PreconditionError("dataset '" + name + "': label " + std::to_string(y) + " outside [0, " +
                              std::to_string(num_classes) + ")");
    }
  }
}

ad::Tensor Dataset::gather_inputs(std::span<const std::size_t> indices) const {
  const std::size_t stride = inputs.size() / inputs.dim(0);
  const auto src = inputs.data();
  std::vector<double> out(indices.size() * stride);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(indices[r] * stride), stride,
                out.begin() + static_cast<std::ptrdiff_t>(r * stride));
  }
  ad::Shape shape = inputs.shape();
  shape[0] = indices.size();
  return ad::Tensor(std::move(shape), std::move(out));
}

std::vector<std::size_t> Dataset::gather_labels(std::span<const std::size_t> indices) const {
  std::vector<std::size_t> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels.at(i));
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  return Dataset{gather_inputs(indices), gather_labels(indices), num_classes, name};
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(num_classes, 0);
  for (auto y : labels) ++counts.at(y);
  return counts;
}

void RelabelMap::validate() const {
  std::vector<bool> hit(new_num_classes, false);
  for (auto m : mapping) {
    if (m >= new_num_classes) throw PreconditionError("relabel map: target " + std::to_string(m) + " out of range");
    hit[m] = true;
  }
  if (std::find(hit.begin(), hit.end(), false) != hit.end()) {
    throw PreconditionError("relabel map is not surjective onto [0, " + std::to_string(new_num_classes) + ")");
  }
}

// ---- synthetic ---------------------------------------------------------------

Dataset gen_gaussians(std::size_t k, std::size_t n_per_class, double spread, std::uint64_t seed) {
  if (k < 2) throw PreconditionError("gen_gaussians: need k >= 2 classes");
  if (n_per_class == 0) throw PreconditionError("gen_gaussians: n_per_class must be positive");
  if (!(spread >= 0.0)) throw PreconditionError("gen_gaussians: spread must be >= 0");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> xs;
  std::vector<std::size_t> labels;
  xs.reserve(2 * k * n_per_class);
  for (std::size_t c = 0; c < k; ++c) {
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(k);
    const double cx = std::cos(angle), cy = std::sin(angle);
    for (std::size_t i = 0; i < n_per_class; ++i) {
      const double dx = normal(rng), dy = normal(rng);
      xs.push_back(cx + spread * dx);
      xs.push_back(cy + spread * dy);
      labels.push_back(c);
    }
  }
  const std::size_t n = labels.size();
  return Dataset{ad::Tensor({n, 2}, std::move(xs)), std::move(labels), k, "gaussians"};
}

// ---- IDX -----------------------------------------------------------------------

namespace {

std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError(IdxError::Kind::Io, "cannot open IDX file " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t big_endian_u32(const std::vector<std::uint8_t>& bytes, std::size_t offset, const std::string& file) {
  if (bytes.size() < offset + 4) throw IdxError(IdxError::Kind::Truncated, "IDX header truncated: " + file);
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void put_be32(std::ofstream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                     static_cast<char>(v)};
  out.write(b, 4);
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, bool downsample) {
  const auto img = slurp(images);
  const auto lab = slurp(labels);
  if (big_endian_u32(img, 0, images.string()) != 0x00000803) {
    throw IdxError(IdxError::Kind::BadMagic, "IDX images: bad magic in " + images.string());
  }
  if (big_endian_u32(lab, 0, labels.string()) != 0x00000801) {
    throw IdxError(IdxError::Kind::BadMagic, "IDX labels: bad magic in " + labels.string());
  }
  const std::size_t n = big_endian_u32(img, 4, images.string());
  const std::size_t rows = big_endian_u32(img, 8, images.string());
  const std::size_t cols = big_endian_u32(img, 12, images.string());
  const std::size_t n_labels = big_endian_u32(lab, 4, labels.string());
  if (n != n_labels) {
    throw IdxError(IdxError::Kind::CountMismatch,
                   "IDX: " + std::to_string(n) + " images but " + std::to_string(n_labels) + " labels");
  }
  if (n == 0 || rows == 0 || cols == 0) throw IdxError(IdxError::Kind::Truncated, "IDX: empty image file");
  if (img.size() < 16 + n * rows * cols) {
    throw IdxError(IdxError::Kind::Truncated, "IDX images truncated: " + images.string());
  }
  if (lab.size() < 8 + n) throw IdxError(IdxError::Kind::Truncated, "IDX labels truncated: " + labels.string());

  const std::size_t out_rows = downsample ? rows / 2 : rows;
  const std::size_t out_cols = downsample ? cols / 2 : cols;
  if (out_rows == 0 || out_cols == 0) throw IdxError(IdxError::Kind::Truncated, "IDX: image too small to downsample");
  std::vector<double> pixels(n * out_rows * out_cols);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* src = img.data() + 16 + i * rows * cols;
    double* dst = pixels.data() + i * out_rows * out_cols;
    for (std::size_t r = 0; r < out_rows; ++r)
      for (std::size_t c = 0; c < out_cols; ++c) {
        if (downsample) {
          const double s = src[(2 * r) * cols + 2 * c] + src[(2 * r) * cols + 2 * c + 1] +
                           src[(2 * r + 1) * cols + 2 * c] + src[(2 * r + 1) * cols + 2 * c + 1];
          dst[r * out_cols + c] = s / (4.0 * 255.0);
        } else {
          dst[r * out_cols + c] = src[r * cols + c] / 255.0;
        }
      }
  }
  std::vector<std::size_t> ys(lab.begin() + 8, lab.begin() + 8 + static_cast<std::ptrdiff_t>(n));
  const std::size_t k = *std::max_element(ys.begin(), ys.end()) + 1;
  return Dataset{ad::Tensor({n, 1, out_rows, out_cols}, std::move(pixels)), std::move(ys), std::max<std::size_t>(k, 2),
                 images.filename().string()};
}

void write_idx_images(const std::filesystem::path& path, std::size_t rows, std::size_t cols,
                      std::span<const std::uint8_t> pixels) {
  if (rows == 0 || cols == 0 || pixels.size() % (rows * cols) != 0) {
    throw PreconditionError("write_idx_images: pixel count not a multiple of rows*cols");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IdxError(IdxError::Kind::Io, "cannot write " + path.string());
  put_be32(out, 0x00000803);
  put_be32(out, static_cast<std::uint32_t>(pixels.size() / (rows * cols)));
  put_be32(out, static_cast<std::uint32_t>(rows));
  put_be32(out, static_cast<std::uint32_t>(cols));
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

void write_idx_labels(const std::filesystem::path& path, std::span<const std::uint8_t> labels) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IdxError(IdxError::Kind::Io, "cannot write " + path.string());
  put_be32(out, 0x00000801);
  put_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
}

// ---- relabelling -------------------------------------------------------------------

RelabelMap make_model_j(std::size_t k, std::size_t j) {
  if (j < 2 || j > k) {
    throw PreconditionError("make_model_j: j=" + std::to_string(j) + " outside [2, " + std::to_string(k) + "]");
  }
  RelabelMap map{std::vector<std::size_t>(k), j};
  for (std::size_t c = 0; c < k; ++c) map.mapping[c] = std::min(c, j - 1);
  return map;
}

RelabelMap make_one_vs_all(std::size_t k, std::size_t i) {
  if (i >= k) throw PreconditionError("make_one_vs_all: class " + std::to_string(i) + " outside [0, " + std::to_string(k) + ")");
  RelabelMap map{std::vector<std::size_t>(k, 0), 2};
  map.mapping[i] = 1;
  return map;
}

RelabelMap class_permutation(std::size_t k, std::uint64_t seed) {
  RelabelMap map{std::vector<std::size_t>(k), k};
  std::iota(map.mapping.begin(), map.mapping.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(map.mapping.begin(), map.mapping.end(), rng);
  return map;
}

Dataset relabel(const Dataset& dataset, const RelabelMap& map) {
  if (map.mapping.size() != dataset.num_classes) {
    throw PreconditionError("relabel: map covers " + std::to_string(map.mapping.size()) + " classes, dataset has " +
                            std::to_string(dataset.num_classes));
  }
  Dataset out{dataset.inputs, {}, map.new_num_classes, dataset.name};
  out.labels.reserve(dataset.size());
  for (auto y : dataset.labels) out.labels.push_back(map(y));
  return out;
}

// ---- batching ------------------------------------------------------------------

std::vector<std::vector<std::size_t>> shuffled_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed) {
  if (batch_size == 0) throw PreconditionError("batch_size must be positive");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

BalancedBatches::BalancedBatches(std::span<const std::size_t> binary_labels, std::size_t batch_size, std::uint64_t seed)
    : half_(batch_size / 2), seed_(seed) {
  if (batch_size == 0 || batch_size % 2 != 0) {
    throw PreconditionError("balanced batches need an even positive batch size, got " + std::to_string(batch_size));
  }
  for (std::size_t i = 0; i < binary_labels.size(); ++i) {
    if (binary_labels[i] > 1) throw PreconditionError("balanced batches need 0/1 labels");
    (binary_labels[i] == 1 ? positives_ : negatives_).push_back(i);
  }
  if (positives_.empty() || negatives_.empty()) {
    throw PreconditionError("balanced batches need both labels present (single-class dataset)");
  }
}

std::size_t BalancedBatches::batches_per_epoch() const { return (negatives_.size() + half_ - 1) / half_; }

std::vector<std::vector<std::size_t>> BalancedBatches::epoch(std::size_t index) const {
  std::mt19937_64 rng(derive_seed(seed_, index));
  std::vector<std::size_t> neg = negatives_;
  std::shuffle(neg.begin(), neg.end(), rng);
  const bool upsample = positives_.size() < negatives_.size();
  std::vector<std::size_t> pos = positives_;
  std::size_t pos_cursor = pos.size();
  std::uniform_int_distribution<std::size_t> pick(0, positives_.size() - 1);

  const std::size_t count = batches_per_epoch();
  std::vector<std::vector<std::size_t>> batches(count);
  for (std::size_t b = 0; b < count; ++b) {
    auto& batch = batches[b];
    batch.reserve(2 * half_);
    for (std::size_t i = 0; i < half_; ++i) {
      if (upsample) {
        batch.push_back(positives_[pick(rng)]);
      } else {
        if (pos_cursor == pos.size()) {
          std::shuffle(pos.begin(), pos.end(), rng);
          pos_cursor = 0;
        }
        batch.push_back(pos[pos_cursor++]);
      }
    }
    for (std::size_t i = 0; i < half_; ++i) batch.push_back(neg[(b * half_ + i) % neg.size()]);
  }
  return batches;
}

// ---- CSV -----------------------------------------------------------------------------

void write_csv(std::ostream& out, const Dataset& dataset) {
  if (dataset.example_shape() != ad::Shape{2}) {
    throw PreconditionError("write_csv: only 2-D datasets, got " + ad::shape_str(dataset.example_shape()));
  }
  out << "x0,x1,label\n" << std::setprecision(17);
  const auto v = dataset.inputs.data();
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    out << v[2 * i] << ',' << v[2 * i + 1] << ',' << dataset.labels[i] << '\n';
  }
}

Dataset read_csv(std::istream& in, const std::string& name) {
  std::string line;
  if (!std::getline(in, line) || line != "x0,x1,label") throw PreconditionError("read_csv: expected header x0,x1,label");
  std::vector<double> xs;
  std::vector<std::size_t> ys;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string a, b, c;
    if (!std::getline(ss, a, ',') || !std::getline(ss, b, ',') || !std::getline(ss, c)) {
      throw PreconditionError("read_csv: malformed line " + std::to_string(lineno));
    }
    try {
      xs.push_back(std::stod(a));
      xs.push_back(std::stod(b));
      ys.push_back(std::stoul(c));
    } catch (const std::exception&) {
      throw PreconditionError("read_csv: malformed line " + std::to_string(lineno));
    }
  }
  if (ys.empty()) throw PreconditionError("read_csv: no rows");
  const std::size_t k = std::max<std::size_t>(2, *std::max_element(ys.begin(), ys.end()) + 1);
  const std::size_t n = ys.size();
  return Dataset{ad::Tensor({n, 2}, std::move(xs)), std::move(ys), k, name};
}

}  // namespace simplerob::data
