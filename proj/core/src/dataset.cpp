#include "afan/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "afan/error.hpp"
#include "afan/rng.hpp"
#include "wire_io.hpp"

namespace afan {

std::vector<int64_t> Dataset::indices_of(Split s) const {
  std::vector<int64_t> out;
  for (size_t i = 0; i < tags.size(); ++i)
    if (tags[i] == s) out.push_back(static_cast<int64_t>(i));
  return out;
}

void Dataset::validate() const {
  const int64_t n = size();
  if (n == 0) throw DomainError("Dataset: empty");
  if (static_cast<int64_t>(labels.size()) != n || static_cast<int64_t>(tags.size()) != n)
    throw DomainError("Dataset: labels/tags do not cover all " + std::to_string(n) + " samples");
  if (classes < 2) throw DomainError("Dataset: need >= 2 classes");
  for (size_t i = 0; i < labels.size(); ++i)
    if (labels[i] < 0 || labels[i] >= classes)
      throw DomainError("Dataset: label " + std::to_string(labels[i]) + " out of range at index " +
                        std::to_string(i));
  for (double v : inputs.values())
    if (v < 0.0 || v > 1.0 || !std::isfinite(v))
      throw DomainError("Dataset: input value " + std::to_string(v) + " outside [0,1]");
}

// --------------------------------------------------------------------------
// Synthetic generators
// --------------------------------------------------------------------------

namespace {

constexpr double kPi = 3.14159265358979323846;

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

struct ClassPlan {
  std::vector<int64_t> counts;      // per class
  std::vector<int64_t> test_count;  // per class
};

ClassPlan plan_classes(int64_t n, int classes, double test_fraction) {
  ClassPlan plan;
  plan.counts.resize(static_cast<size_t>(classes));
  plan.test_count.resize(static_cast<size_t>(classes));
  for (int c = 0; c < classes; ++c) {
    plan.counts[static_cast<size_t>(c)] = n / classes + (c < n % classes ? 1 : 0);
    plan.test_count[static_cast<size_t>(c)] =
        static_cast<int64_t>(std::llround(test_fraction * static_cast<double>(plan.counts[static_cast<size_t>(c)])));
  }
  return plan;
}

Dataset gen_blobs(int64_t n, uint64_t seed, const SyntheticOptions& opt) {
  const int classes = opt.classes > 0 ? opt.classes : 2;
  Rng rng(derive_seed(seed, SeedDomain::kDataGen));
  const ClassPlan plan = plan_classes(n, classes, opt.test_fraction);
  std::vector<double> xs;
  std::vector<int> ys;
  std::vector<Split> tags;
  for (int c = 0; c < classes; ++c) {
    const double ang = 2.0 * kPi * c / classes;
    const double cx = 0.5 + 0.25 * std::cos(ang);
    const double cy = 0.5 + 0.25 * std::sin(ang);
    for (int64_t i = 0; i < plan.counts[static_cast<size_t>(c)]; ++i) {
      xs.push_back(clamp01(cx + opt.noise * rng.normal()));
      xs.push_back(clamp01(cy + opt.noise * rng.normal()));
      ys.push_back(c);
      tags.push_back(i < plan.test_count[static_cast<size_t>(c)] ? Split::kTest : Split::kTrain);
    }
  }
  Dataset ds;
  ds.inputs = Tensor::from_values({n, 2}, std::move(xs), false);
  ds.labels = std::move(ys);
  ds.classes = classes;
  ds.tags = std::move(tags);
  ds.provenance = "blobs:n=" + std::to_string(n) + ":seed=" + std::to_string(seed);
  return ds;
}

Dataset gen_spirals(int64_t n, uint64_t seed, const SyntheticOptions& opt) {
  const int classes = opt.classes > 0 ? opt.classes : 2;
  Rng rng(derive_seed(seed, SeedDomain::kDataGen));
  const ClassPlan plan = plan_classes(n, classes, opt.test_fraction);
  std::vector<double> xs;
  std::vector<int> ys;
  std::vector<Split> tags;
  for (int c = 0; c < classes; ++c) {
    const double phase = 2.0 * kPi * c / classes;
    for (int64_t i = 0; i < plan.counts[static_cast<size_t>(c)]; ++i) {
      const double t = rng.uniform();
      const double r = 0.05 + 0.40 * t;
      const double theta = 3.0 * kPi * t + phase;
      xs.push_back(clamp01(0.5 + r * std::cos(theta) + opt.noise * rng.normal()));
      xs.push_back(clamp01(0.5 + r * std::sin(theta) + opt.noise * rng.normal()));
      ys.push_back(c);
      tags.push_back(i < plan.test_count[static_cast<size_t>(c)] ? Split::kTest : Split::kTrain);
    }
  }
  Dataset ds;
  ds.inputs = Tensor::from_values({n, 2}, std::move(xs), false);
  ds.labels = std::move(ys);
  ds.classes = classes;
  ds.tags = std::move(tags);
  ds.provenance = "spirals:n=" + std::to_string(n) + ":seed=" + std::to_string(seed);
  return ds;
}

Dataset gen_shapes16(int64_t n, uint64_t seed, const SyntheticOptions& opt) {
  const int classes = opt.classes > 0 ? std::min(opt.classes, 4) : 4;
  constexpr int64_t H = 16, W = 16;
  Rng rng(derive_seed(seed, SeedDomain::kDataGen));
  const ClassPlan plan = plan_classes(n, classes, opt.test_fraction);
  std::vector<double> xs;
  xs.reserve(static_cast<size_t>(n * H * W));
  std::vector<int> ys;
  std::vector<Split> tags;
  for (int c = 0; c < classes; ++c) {
    for (int64_t i = 0; i < plan.counts[static_cast<size_t>(c)]; ++i) {
      const double cx = 7.5 + rng.uniform(-2.0, 2.0);
      const double cy = 7.5 + rng.uniform(-2.0, 2.0);
      const double r = rng.uniform(3.0, 5.0);
      const double fg = rng.uniform(0.65, 1.0);
      for (int64_t py = 0; py < H; ++py)
        for (int64_t px = 0; px < W; ++px) {
          const double dx = static_cast<double>(px) - cx;
          const double dy = static_cast<double>(py) - cy;
          const double dist = std::sqrt(dx * dx + dy * dy);
          bool inside = false;
          switch (c) {
            case 0: inside = dist <= r; break;                                     // disk
            case 1: inside = std::abs(dx) <= r * 0.82 && std::abs(dy) <= r * 0.82; break;  // square
            case 2: inside = (std::abs(dx) <= 1.2 && std::abs(dy) <= r) ||
                             (std::abs(dy) <= 1.2 && std::abs(dx) <= r);
                    break;                                                         // cross
            default: inside = std::abs(dist - r) <= 1.2; break;                    // ring
          }
          const double v = (inside ? fg : 0.0) + opt.noise * rng.normal();
          xs.push_back(clamp01(v));
        }
      ys.push_back(c);
      tags.push_back(i < plan.test_count[static_cast<size_t>(c)] ? Split::kTest : Split::kTrain);
    }
  }
  Dataset ds;
  ds.inputs = Tensor::from_values({n, 1, H, W}, std::move(xs), false);
  ds.labels = std::move(ys);
  ds.classes = classes;
  ds.tags = std::move(tags);
  ds.provenance = "shapes16:n=" + std::to_string(n) + ":seed=" + std::to_string(seed);
  return ds;
}

}  // namespace

Dataset gen_synthetic(const std::string& kind, int64_t n, uint64_t seed,
                      const SyntheticOptions& opt) {
  if (n < 10) throw DomainError("gen_synthetic: need n >= 10, got " + std::to_string(n));
  Dataset ds;
  if (kind == "blobs") ds = gen_blobs(n, seed, opt);
  else if (kind == "spirals") ds = gen_spirals(n, seed, opt);
  else if (kind == "shapes16") ds = gen_shapes16(n, seed, opt);
  else throw DomainError("gen_synthetic: unknown kind '" + kind + "'");
  ds.validate();
  return ds;
}

// --------------------------------------------------------------------------
// External formats
// --------------------------------------------------------------------------

Dataset load_csv_vectors(const std::string& path, int classes, Split tag) {
  std::ifstream is(path);
  if (!is) throw DataError("csv-vectors: cannot open '" + path + "'");
  std::vector<double> xs;
  std::vector<int> ys;
  int64_t dim = -1, line_no = 0;
  std::string line;
  int max_label = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string tok;
    std::vector<double> fields;
    while (std::getline(ss, tok, ',')) {
      try {
        size_t pos = 0;
        fields.push_back(std::stod(tok, &pos));
        if (pos != tok.size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw DataError("csv-vectors: '" + path + "' line " + std::to_string(line_no) +
                        ": bad field '" + tok + "'");
      }
    }
    if (fields.size() < 2)
      throw DataError("csv-vectors: '" + path + "' line " + std::to_string(line_no) +
                      ": need at least one feature and a label");
    const double raw_label = fields.back();
    fields.pop_back();
    const int label = static_cast<int>(raw_label);
    if (static_cast<double>(label) != raw_label || label < 0)
      throw DataError("csv-vectors: '" + path + "' line " + std::to_string(line_no) +
                      ": label must be a non-negative integer");
    if (dim == -1) dim = static_cast<int64_t>(fields.size());
    if (static_cast<int64_t>(fields.size()) != dim)
      throw DataError("csv-vectors: '" + path + "' line " + std::to_string(line_no) + ": expected " +
                      std::to_string(dim) + " features, got " + std::to_string(fields.size()));
    xs.insert(xs.end(), fields.begin(), fields.end());
    ys.push_back(label);
    max_label = std::max(max_label, label);
  }
  if (ys.empty()) throw DataError("csv-vectors: '" + path + "' has no samples");
  Dataset ds;
  const int64_t n = static_cast<int64_t>(ys.size());
  ds.inputs = Tensor::from_values({n, dim}, std::move(xs), false);
  ds.labels = std::move(ys);
  ds.classes = classes > 0 ? classes : max_label + 1;
  ds.tags.assign(static_cast<size_t>(n), tag);
  ds.provenance = path;
  ds.validate();
  return ds;
}

void save_csv_vectors(const Dataset& ds, const std::string& path) {
  if (!ds.inputs.defined() || ds.inputs.rank() != 2)
    throw DomainError("save_csv_vectors: need [N,D] vector inputs");
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("csv-vectors: cannot open '" + path + "' for writing");
  const int64_t n = ds.size(), d = ds.inputs.dim(1);
  char buf[32];
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < d; ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", ds.inputs.values()[static_cast<size_t>(i * d + j)]);
      os << buf << ",";
    }
    os << ds.labels[static_cast<size_t>(i)] << "\n";
  }
  if (!os) throw DataError("csv-vectors: write failed for '" + path + "'");
}

Dataset load_raw_gray(const std::string& path, Split tag) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("raw-gray-images: cannot open '" + path + "'");
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "AFIG")
    throw DataError("raw-gray-images: bad magic at offset 0 in '" + path + "'");
  const uint32_t count = wire::get_u32(is, "count");
  const uint32_t h = wire::get_u32(is, "height");
  const uint32_t w = wire::get_u32(is, "width");
  const uint32_t classes = wire::get_u32(is, "classes");
  if (count == 0 || h == 0 || w == 0 || classes < 2)
    throw DataError("raw-gray-images: invalid header in '" + path + "'");
  const size_t pixels = static_cast<size_t>(h) * w;
  std::vector<double> xs;
  xs.reserve(count * pixels);
  std::vector<int> ys;
  std::vector<unsigned char> row(pixels + 1);
  for (uint32_t i = 0; i < count; ++i) {
    if (!is.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(pixels + 1))) {
      const auto offset = 20 + static_cast<uint64_t>(i) * (pixels + 1);
      throw DataError("raw-gray-images: truncated sample " + std::to_string(i) + " at offset " +
                      std::to_string(offset) + " in '" + path + "'");
    }
    for (size_t p = 0; p < pixels; ++p) xs.push_back(static_cast<double>(row[p]) / 255.0);
    const unsigned char label = row[pixels];
    if (label >= classes) {
      const auto offset = 20 + static_cast<uint64_t>(i) * (pixels + 1) + pixels;
      throw DataError("raw-gray-images: label byte " + std::to_string(label) + " >= classes " +
                      std::to_string(classes) + " at offset " + std::to_string(offset) + " in '" +
                      path + "'");
    }
    ys.push_back(static_cast<int>(label));
  }
  Dataset ds;
  ds.inputs = Tensor::from_values(
      {static_cast<int64_t>(count), 1, static_cast<int64_t>(h), static_cast<int64_t>(w)},
      std::move(xs), false);
  ds.labels = std::move(ys);
  ds.classes = static_cast<int>(classes);
  ds.tags.assign(count, tag);
  ds.provenance = path;
  ds.validate();
  return ds;
}

void save_raw_gray(const Dataset& ds, const std::string& path) {
  if (!ds.inputs.defined() || ds.inputs.rank() != 4 || ds.inputs.dim(1) != 1)
    throw DomainError("save_raw_gray: need [N,1,H,W] image inputs");
  if (ds.classes > 256) throw DomainError("save_raw_gray: label byte supports <= 256 classes");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("raw-gray-images: cannot open '" + path + "' for writing");
  os.write("AFIG", 4);
  wire::put_u32(os, static_cast<uint32_t>(ds.size()));
  wire::put_u32(os, static_cast<uint32_t>(ds.inputs.dim(2)));
  wire::put_u32(os, static_cast<uint32_t>(ds.inputs.dim(3)));
  wire::put_u32(os, static_cast<uint32_t>(ds.classes));
  const size_t pixels = static_cast<size_t>(ds.inputs.dim(2) * ds.inputs.dim(3));
  for (int64_t i = 0; i < ds.size(); ++i) {
    for (size_t p = 0; p < pixels; ++p) {
      const double v = ds.inputs.values()[static_cast<size_t>(i) * pixels + p];
      const auto byte = static_cast<unsigned char>(std::llround(std::clamp(v, 0.0, 1.0) * 255.0));
      os.put(static_cast<char>(byte));
    }
    os.put(static_cast<char>(ds.labels[static_cast<size_t>(i)]));
  }
  if (!os) throw DataError("raw-gray-images: write failed for '" + path + "'");
}

Dataset concat_as_test(Dataset train, const Dataset& test) {
  if (!train.inputs.defined() || !test.inputs.defined())
    throw DomainError("concat_as_test: undefined inputs");
  if (train.inputs.shape().size() != test.inputs.shape().size())
    throw ShapeError("concat_as_test: rank mismatch " + shape_str(train.inputs.shape()) + " vs " +
                     shape_str(test.inputs.shape()));
  for (int a = 1; a < train.inputs.rank(); ++a)
    if (train.inputs.dim(a) != test.inputs.dim(a))
      throw ShapeError("concat_as_test: sample shape mismatch " + shape_str(train.inputs.shape()) +
                       " vs " + shape_str(test.inputs.shape()));
  Shape shape = train.inputs.shape();
  shape[0] += test.inputs.dim(0);
  std::vector<double> xs = train.inputs.values();
  xs.insert(xs.end(), test.inputs.values().begin(), test.inputs.values().end());
  train.inputs = Tensor::from_values(std::move(shape), std::move(xs), false);
  train.labels.insert(train.labels.end(), test.labels.begin(), test.labels.end());
  train.tags.insert(train.tags.end(), static_cast<size_t>(test.size()), Split::kTest);
  train.classes = std::max(train.classes, test.classes);
  train.provenance += "+" + test.provenance;
  train.validate();
  return train;
}

Dataset subset(const Dataset& ds, const std::vector<int64_t>& idx, Split tag) {
  Dataset out;
  out.inputs = gather_inputs(ds, idx);
  out.labels = gather_labels(ds, idx);
  out.classes = ds.classes;
  out.tags.assign(idx.size(), tag);
  out.provenance = ds.provenance;
  out.validate();
  return out;
}

Tensor gather_inputs(const Dataset& ds, const std::vector<int64_t>& idx) {
  if (idx.empty()) throw DomainError("gather_inputs: empty batch");
  Shape shape = ds.inputs.shape();
  int64_t row = 1;
  for (size_t a = 1; a < shape.size(); ++a) row *= shape[a];
  shape[0] = static_cast<int64_t>(idx.size());
  std::vector<double> out;
  out.reserve(idx.size() * static_cast<size_t>(row));
  for (int64_t i : idx) {
    if (i < 0 || i >= ds.size())
      throw DomainError("gather_inputs: index " + std::to_string(i) + " out of range");
    const auto base = static_cast<size_t>(i * row);
    out.insert(out.end(), ds.inputs.values().begin() + static_cast<long>(base),
               ds.inputs.values().begin() + static_cast<long>(base + static_cast<size_t>(row)));
  }
  return Tensor::from_values(std::move(shape), std::move(out), false);
}

std::vector<int> gather_labels(const Dataset& ds, const std::vector<int64_t>& idx) {
  if (idx.empty()) throw DomainError("gather_labels: empty batch");
  std::vector<int> out;
  out.reserve(idx.size());
  for (int64_t i : idx) {
    if (i < 0 || i >= ds.size())
      throw DomainError("gather_labels: index " + std::to_string(i) + " out of range");
    out.push_back(ds.labels[static_cast<size_t>(i)]);
  }
  return out;
}

}  // namespace afan
