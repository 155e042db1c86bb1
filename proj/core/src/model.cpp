#include "afan/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "afan/error.hpp"
#include "afan/rng.hpp"
#include "wire_io.hpp"

namespace afan {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

int64_t parse_i64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    int64_t r = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return r;
  } catch (const std::exception&) {
    throw DomainError("ModelSpec: invalid integer for " + key + ": '" + v + "'");
  }
}

std::vector<int64_t> parse_i64_list(const std::string& key, const std::string& v) {
  std::vector<int64_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_i64(key, item));
  }
  return out;
}

std::string join_i64(const std::vector<int64_t>& v) {
  std::ostringstream os;
  for (size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

}  // namespace

// --------------------------------------------------------------------------
// ModelSpec
// --------------------------------------------------------------------------

int64_t ModelSpec::block_count() const {
  return static_cast<int64_t>(arch == "mlp" ? hidden.size() : channels.size());
}

void ModelSpec::validate() const {
  if (arch != "mlp" && arch != "tiny-resnet")
    throw DomainError("ModelSpec.arch: unknown architecture '" + arch + "'");
  if (classes < 2) throw DomainError("ModelSpec.classes: need >= 2, got " + std::to_string(classes));
  if (arch == "mlp") {
    if (input_dim < 1) throw DomainError("ModelSpec.input_dim: need >= 1");
    if (hidden.empty()) throw DomainError("ModelSpec.hidden: need at least one block");
    for (int64_t h : hidden)
      if (h < 1) throw DomainError("ModelSpec.hidden: widths must be positive");
  } else {
    if (channels.empty()) throw DomainError("ModelSpec.channels: need at least one block");
    for (int64_t c : channels)
      if (c < 1) throw DomainError("ModelSpec.channels: counts must be positive");
    if (input_channels < 1) throw DomainError("ModelSpec.input_channels: need >= 1");
    if (input_height < 1) throw DomainError("ModelSpec.input_height: need >= 1");
    if (input_width < 1) throw DomainError("ModelSpec.input_width: need >= 1");
  }
  if (!split.empty()) {
    bool ok = false;
    for (int64_t b = 1; b <= block_count(); ++b)
      if (split == "after-block-" + std::to_string(b)) ok = true;
    if (!ok) throw DomainError("ModelSpec.split: unknown split point '" + split + "'");
  }
}

std::string ModelSpec::serialize() const {
  std::ostringstream os;
  os << "model.arch=" << arch << "\n";
  os << "model.hidden=" << join_i64(hidden) << "\n";
  os << "model.channels=" << join_i64(channels) << "\n";
  os << "model.input_dim=" << input_dim << "\n";
  os << "model.input_channels=" << input_channels << "\n";
  os << "model.input_height=" << input_height << "\n";
  os << "model.input_width=" << input_width << "\n";
  os << "model.classes=" << classes << "\n";
  os << "model.split=" << split << "\n";
  return os.str();
}

ModelSpec ModelSpec::parse(const std::string& text) {
  ModelSpec spec;
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key == "model.arch") spec.arch = val;
    else if (key == "model.hidden") spec.hidden = parse_i64_list(key, val);
    else if (key == "model.channels") spec.channels = parse_i64_list(key, val);
    else if (key == "model.input_dim") spec.input_dim = parse_i64(key, val);
    else if (key == "model.input_channels") spec.input_channels = parse_i64(key, val);
    else if (key == "model.input_height") spec.input_height = parse_i64(key, val);
    else if (key == "model.input_width") spec.input_width = parse_i64(key, val);
    else if (key == "model.classes") spec.classes = parse_i64(key, val);
    else if (key == "model.split") spec.split = val;
  }
  return spec;
}

// --------------------------------------------------------------------------
// SplitModel construction
// --------------------------------------------------------------------------

namespace {

Tensor he_init(Shape shape, int64_t fan_in, Rng& rng) {
  int64_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> v(static_cast<size_t>(n));
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& x : v) x = stddev * rng.normal();
  return Tensor::from_values(std::move(shape), std::move(v), true);
}

layers::Bn make_bn(int64_t c) {
  layers::Bn bn;
  bn.gamma = Tensor::full({c}, 1.0, true);
  bn.beta = Tensor::zeros({c}, true);
  bn.running_mean.assign(static_cast<size_t>(c), 0.0);
  bn.running_var.assign(static_cast<size_t>(c), 1.0);
  return bn;
}

}  // namespace

SplitModel SplitModel::build(const ModelSpec& spec, uint64_t seed) {
  spec.validate();
  SplitModel m;
  m.spec_ = spec;
  Rng rng(seed);

  if (spec.arch == "mlp") {
    int64_t in = spec.input_dim;
    for (int64_t width : spec.hidden) {
      layers::MlpBlock blk;
      blk.fc.w = he_init({in, width}, in, rng);
      blk.fc.b = Tensor::zeros({width}, true);
      blk.bn = make_bn(width);
      m.mlp_blocks_.push_back(std::move(blk));
      in = width;
    }
    m.head_.w = he_init({in, spec.classes}, in, rng);
    m.head_.b = Tensor::zeros({spec.classes}, true);
  } else {
    const int64_t c0 = spec.channels.front();
    m.stem_.w = he_init({c0, spec.input_channels, 3, 3}, spec.input_channels * 9, rng);
    m.stem_.stride = 1;
    m.stem_.pad = 1;
    m.stem_bn_ = make_bn(c0);
    int64_t in = c0;
    for (size_t j = 0; j < spec.channels.size(); ++j) {
      const int64_t out = spec.channels[j];
      const int stride = (j == 0) ? 1 : 2;
      layers::ResBlock blk;
      blk.conv1.w = he_init({out, in, 3, 3}, in * 9, rng);
      blk.conv1.stride = stride;
      blk.conv1.pad = 1;
      blk.bn1 = make_bn(out);
      blk.conv2.w = he_init({out, out, 3, 3}, out * 9, rng);
      blk.conv2.stride = 1;
      blk.conv2.pad = 1;
      blk.bn2 = make_bn(out);
      blk.project = (stride != 1 || in != out);
      if (blk.project) {
        blk.proj.w = he_init({out, in, 1, 1}, in, rng);
        blk.proj.stride = stride;
        blk.proj.pad = 0;
        blk.bnp = make_bn(out);
      }
      m.res_blocks_.push_back(std::move(blk));
      in = out;
    }
    m.head_.w = he_init({in, spec.classes}, in, rng);
    m.head_.b = Tensor::zeros({spec.classes}, true);
  }

  for (int64_t b = 1; b <= spec.block_count(); ++b)
    m.split_points_.push_back("after-block-" + std::to_string(b));
  m.active_split_ = spec.split.empty() ? m.split_points_.back() : spec.split;
  m.active_block_ = m.split_block_of(m.active_split_);
  m.spec_.split = m.active_split_;
  return m;
}

int SplitModel::split_block_of(const std::string& name) const {
  for (size_t i = 0; i < split_points_.size(); ++i)
    if (split_points_[i] == name) return static_cast<int>(i + 1);
  throw DomainError("SplitModel: unknown split point '" + name + "'");
}

void SplitModel::set_active_split(const std::string& name) {
  active_block_ = split_block_of(name);
  active_split_ = name;
  spec_.split = name;
}

// --------------------------------------------------------------------------
// Forward passes
// --------------------------------------------------------------------------

namespace {

Tensor bn_forward(const Tensor& x, layers::Bn& bn, const ForwardMode& mode) {
  return batch_norm(x, bn.gamma, bn.beta, mode.training, &bn.running_mean, &bn.running_var,
                    mode.bn_momentum, mode.training && mode.update_running);
}

Tensor res_block_forward(const Tensor& x, layers::ResBlock& blk, const ForwardMode& mode) {
  Tensor h = relu(bn_forward(conv2d(x, blk.conv1.w, blk.conv1.stride, blk.conv1.pad), blk.bn1, mode));
  Tensor h2 = bn_forward(conv2d(h, blk.conv2.w, blk.conv2.stride, blk.conv2.pad), blk.bn2, mode);
  Tensor sc = blk.project
                  ? bn_forward(conv2d(x, blk.proj.w, blk.proj.stride, blk.proj.pad), blk.bnp, mode)
                  : x;
  return relu(add(h2, sc));
}

}  // namespace

Tensor SplitModel::run_blocks(Tensor h, int first_block, int last_block, const ForwardMode& mode) {
  if (spec_.arch == "tiny-resnet" && first_block == 0 && last_block >= 0)
    h = relu(bn_forward(conv2d(h, stem_.w, stem_.stride, stem_.pad), stem_bn_, mode));
  const int from = std::max(first_block, 1);
  for (int b = from; b <= last_block; ++b) {
    if (spec_.arch == "mlp") {
      auto& blk = mlp_blocks_[static_cast<size_t>(b - 1)];
      h = relu(bn_forward(add_channel(matmul(h, blk.fc.w), blk.fc.b), blk.bn, mode));
    } else {
      h = res_block_forward(h, res_blocks_[static_cast<size_t>(b - 1)], mode);
    }
  }
  return h;
}

Tensor SplitModel::head_logits_from(Tensor h, const ForwardMode&) {
  if (spec_.arch == "tiny-resnet") h = global_avg_pool(h);
  return add_channel(matmul(h, head_.w), head_.b);
}

Tensor SplitModel::forward_backbone(const Tensor& x, const ForwardMode& mode) {
  if (spec_.arch == "mlp") {
    if (x.rank() != 2 || x.dim(1) != spec_.input_dim)
      throw ShapeError("forward_backbone: input " + shape_str(x.shape()) + " does not match [N," +
                       std::to_string(spec_.input_dim) + "]");
  } else {
    if (x.rank() != 4 || x.dim(1) != spec_.input_channels || x.dim(2) != spec_.input_height ||
        x.dim(3) != spec_.input_width)
      throw ShapeError("forward_backbone: input " + shape_str(x.shape()) + " does not match [N," +
                       std::to_string(spec_.input_channels) + "," + std::to_string(spec_.input_height) +
                       "," + std::to_string(spec_.input_width) + "]");
  }
  return run_blocks(x, 0, active_block_, mode);
}

Tensor SplitModel::forward_head_logits(const Tensor& features, const ForwardMode& mode) {
  Tensor h = run_blocks(features, active_block_ + 1, static_cast<int>(spec_.block_count()), mode);
  return head_logits_from(h, mode);
}

HeadOutput SplitModel::forward_head(const Tensor& features, const std::vector<int>& labels,
                                    const ForwardMode& mode) {
  Tensor logits = forward_head_logits(features, mode);
  return {softmax_cross_entropy(logits, labels), logits};
}

Tensor SplitModel::forward_logits(const Tensor& x, const ForwardMode& mode) {
  Tensor h = run_blocks(x, 0, static_cast<int>(spec_.block_count()), mode);
  return head_logits_from(h, mode);
}

HeadOutput SplitModel::forward_monolithic(const Tensor& x, const std::vector<int>& labels,
                                          const ForwardMode& mode) {
  Tensor logits = forward_logits(x, mode);
  return {softmax_cross_entropy(logits, labels), logits};
}

// --------------------------------------------------------------------------
// Registries / state
// --------------------------------------------------------------------------

std::vector<NamedParam> SplitModel::parameters() {
  std::vector<NamedParam> out;
  const int B = static_cast<int>(spec_.block_count());
  if (spec_.arch == "mlp") {
    for (int b = 1; b <= B; ++b) {
      auto& blk = mlp_blocks_[static_cast<size_t>(b - 1)];
      const std::string p = "block" + std::to_string(b);
      out.push_back({p + ".fc.w", blk.fc.w, b});
      out.push_back({p + ".fc.b", blk.fc.b, b});
      out.push_back({p + ".bn.gamma", blk.bn.gamma, b});
      out.push_back({p + ".bn.beta", blk.bn.beta, b});
    }
  } else {
    out.push_back({"stem.conv.w", stem_.w, 0});
    out.push_back({"stem.bn.gamma", stem_bn_.gamma, 0});
    out.push_back({"stem.bn.beta", stem_bn_.beta, 0});
    for (int b = 1; b <= B; ++b) {
      auto& blk = res_blocks_[static_cast<size_t>(b - 1)];
      const std::string p = "block" + std::to_string(b);
      out.push_back({p + ".conv1.w", blk.conv1.w, b});
      out.push_back({p + ".bn1.gamma", blk.bn1.gamma, b});
      out.push_back({p + ".bn1.beta", blk.bn1.beta, b});
      out.push_back({p + ".conv2.w", blk.conv2.w, b});
      out.push_back({p + ".bn2.gamma", blk.bn2.gamma, b});
      out.push_back({p + ".bn2.beta", blk.bn2.beta, b});
      if (blk.project) {
        out.push_back({p + ".proj.w", blk.proj.w, b});
        out.push_back({p + ".bnp.gamma", blk.bnp.gamma, b});
        out.push_back({p + ".bnp.beta", blk.bnp.beta, b});
      }
    }
  }
  out.push_back({"head.fc.w", head_.w, B + 1});
  out.push_back({"head.fc.b", head_.b, B + 1});
  return out;
}

std::vector<NamedParam> SplitModel::backbone_parameters() {
  std::vector<NamedParam> out;
  for (auto& p : parameters())
    if (p.block <= active_block_) out.push_back(p);
  return out;
}

std::vector<NamedParam> SplitModel::head_parameters() {
  std::vector<NamedParam> out;
  for (auto& p : parameters())
    if (p.block > active_block_) out.push_back(p);
  return out;
}

std::vector<NamedBufferRef> SplitModel::buffers() {
  std::vector<NamedBufferRef> out;
  auto push_bn = [&](const std::string& p, layers::Bn& bn, int b) {
    out.push_back({p + ".running_mean", &bn.running_mean, b});
    out.push_back({p + ".running_var", &bn.running_var, b});
  };
  const int B = static_cast<int>(spec_.block_count());
  if (spec_.arch == "mlp") {
    for (int b = 1; b <= B; ++b)
      push_bn("block" + std::to_string(b) + ".bn", mlp_blocks_[static_cast<size_t>(b - 1)].bn, b);
  } else {
    push_bn("stem.bn", stem_bn_, 0);
    for (int b = 1; b <= B; ++b) {
      auto& blk = res_blocks_[static_cast<size_t>(b - 1)];
      const std::string p = "block" + std::to_string(b);
      push_bn(p + ".bn1", blk.bn1, b);
      push_bn(p + ".bn2", blk.bn2, b);
      if (blk.project) push_bn(p + ".bnp", blk.bnp, b);
    }
  }
  return out;
}

int64_t SplitModel::parameter_count() {
  int64_t n = 0;
  for (auto& p : parameters()) n += p.tensor.numel();
  return n;
}

std::vector<double> SplitModel::flat_parameters() {
  std::vector<double> out;
  for (auto& p : parameters()) {
    const auto& v = p.tensor.values();
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

void SplitModel::set_flat_parameters(const std::vector<double>& theta) {
  size_t off = 0;
  for (auto& p : parameters()) {
    auto& v = p.tensor.values();
    if (off + v.size() > theta.size())
      throw ShapeError("set_flat_parameters: vector of size " + std::to_string(theta.size()) +
                       " too short for this model");
    std::copy(theta.begin() + static_cast<long>(off),
              theta.begin() + static_cast<long>(off + v.size()), v.begin());
    off += v.size();
  }
  if (off != theta.size())
    throw ShapeError("set_flat_parameters: vector of size " + std::to_string(theta.size()) +
                     " does not match parameter count " + std::to_string(off));
}

StateDict SplitModel::state() {
  StateDict sd;
  for (auto& p : parameters()) sd.emplace_back(p.name, p.tensor.values());
  for (auto& b : buffers()) sd.emplace_back(b.name, *b.data);
  return sd;
}

void SplitModel::load_state(const StateDict& sd) {
  std::unordered_map<std::string, const std::vector<double>*> lookup;
  for (const auto& [name, values] : sd) lookup[name] = &values;
  auto fetch = [&](const std::string& name, size_t expect) -> const std::vector<double>& {
    auto it = lookup.find(name);
    if (it == lookup.end()) throw DataError("load_state: missing blob '" + name + "'");
    if (it->second->size() != expect)
      throw DataError("load_state: blob '" + name + "' has " + std::to_string(it->second->size()) +
                      " values, expected " + std::to_string(expect));
    return *it->second;
  };
  for (auto& p : parameters()) p.tensor.values() = fetch(p.name, p.tensor.values().size());
  for (auto& b : buffers()) *b.data = fetch(b.name, b.data->size());
}

SplitModel SplitModel::clone() {
  SplitModel copy = build(spec_, 0);
  copy.set_active_split(active_split_);
  copy.load_state(state());
  return copy;
}

void SplitModel::zero_grads() {
  for (auto& p : parameters()) p.tensor.zero_grad();
}

// --------------------------------------------------------------------------
// Checkpoint format
// --------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'A', 'F', 'A', 'N'};
constexpr uint32_t kVersion = 1;

using wire::get_u32;
using wire::get_u64;
using wire::put_doubles;
using wire::put_u32;
using wire::put_u64;

}  // namespace

void save_checkpoint(SplitModel& model, const std::string& path, const std::string& config_text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("checkpoint: cannot open '" + path + "' for writing");
  os.write(kMagic, 4);
  put_u32(os, kVersion);
  const std::string text = config_text.empty() ? model.spec().serialize() : config_text;
  put_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  const StateDict sd = model.state();
  put_u64(os, sd.size());
  for (const auto& [name, values] : sd) {
    put_u64(os, name.size());
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u64(os, values.size() * 8);
    put_doubles(os, values);
  }
  if (!os) throw DataError("checkpoint: write failed for '" + path + "'");
}

SplitModel load_checkpoint(const std::string& path, std::string* config_text) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint: cannot open '" + path + "'");
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw DataError("checkpoint: bad magic at offset 0 in '" + path + "'");
  const uint32_t version = get_u32(is, "version");
  if (version != kVersion)
    throw DataError("checkpoint: unsupported version " + std::to_string(version));
  const uint64_t text_len = get_u64(is, "spec length");
  std::string text(text_len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(text_len)))
    throw DataError("checkpoint: truncated spec text");
  if (config_text) *config_text = text;

  ModelSpec spec = ModelSpec::parse(text);
  SplitModel model = SplitModel::build(spec, 0);

  const uint64_t blob_count = get_u64(is, "blob count");
  StateDict sd;
  for (uint64_t i = 0; i < blob_count; ++i) {
    const uint64_t name_len = get_u64(is, "blob name length");
    std::string name(name_len, '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(name_len)))
      throw DataError("checkpoint: truncated blob name");
    const uint64_t payload = get_u64(is, "blob payload length");
    if (payload % 8 != 0) throw DataError("checkpoint: blob '" + name + "' payload not 8-aligned");
    std::vector<double> values(payload / 8);
    for (auto& d : values) {
      const uint64_t bits = get_u64(is, "blob payload");
      std::memcpy(&d, &bits, 8);
    }
    sd.emplace_back(std::move(name), std::move(values));
  }
  model.load_state(sd);
  return model;
}

}  // namespace afan
