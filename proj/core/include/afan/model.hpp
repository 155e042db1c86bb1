#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "afan/tensor.hpp"

namespace afan {

// Desk-scale architectures:
//   "mlp"         dense-BN-ReLU blocks over vector inputs
//   "tiny-resnet" conv-BN-ReLU residual blocks (stride-2 downsampling from
//                 block 2 on), global-average-pool head
struct ModelSpec {
  std::string arch = "mlp";
  std::vector<int64_t> hidden = {32, 32};     // mlp widths, one block each
  std::vector<int64_t> channels = {8, 16, 32};  // tiny-resnet block channels
  int64_t input_dim = 2;  // mlp
  int64_t input_channels = 1, input_height = 16, input_width = 16;  // tiny-resnet
  int64_t classes = 2;
  std::string split;  // split point name; empty selects the last block

  int64_t block_count() const;
  void validate() const;  // throws DomainError naming the offending field
  std::string serialize() const;               // dotted key=value lines
  static ModelSpec parse(const std::string&);  // ignores unrelated keys
};

struct ForwardMode {
  bool training = true;        // batch statistics in BN when true, running otherwise
  bool update_running = false; // fold batch stats into running buffers (clean pass only)
  double bn_momentum = 0.1;
};

struct HeadOutput {
  Tensor loss;
  Tensor logits;
};

struct NamedParam {
  std::string name;
  Tensor tensor;
  int block;  // 0 = stem, 1..B = blocks, B+1 = head
};

struct NamedBufferRef {
  std::string name;
  std::vector<double>* data;
  int block;
};

using StateDict = std::vector<std::pair<std::string, std::vector<double>>>;

namespace layers {

struct Dense {
  Tensor w, b;
};
struct Bn {
  Tensor gamma, beta;
  std::vector<double> running_mean, running_var;
};
struct Conv {
  Tensor w;
  int stride = 1, pad = 1;
};
struct MlpBlock {
  Dense fc;
  Bn bn;
};
struct ResBlock {
  Conv conv1;
  Bn bn1;
  Conv conv2;
  Bn bn2;
  bool project = false;
  Conv proj;
  Bn bnp;
};

}  // namespace layers

// A network factored into backbone and head at a named split point.
// Move-only; clone() deep-copies parameters and buffers.
class SplitModel {
 public:
  SplitModel(SplitModel&&) = default;
  SplitModel& operator=(SplitModel&&) = default;
  SplitModel(const SplitModel&) = delete;
  SplitModel& operator=(const SplitModel&) = delete;

  // Fan-in-scaled normal init for weights, zeros/ones for biases and BN.
  // Identical seed yields bit-identical parameters.
  static SplitModel build(const ModelSpec& spec, uint64_t seed);

  const ModelSpec& spec() const { return spec_; }
  const std::vector<std::string>& split_points() const { return split_points_; }
  const std::string& active_split() const { return active_split_; }
  void set_active_split(const std::string& name);

  // Features at the active split; gradients flow into backbone parameters.
  Tensor forward_backbone(const Tensor& x, const ForwardMode& mode);
  // Remaining blocks plus classifier; loss is softmax cross-entropy.
  HeadOutput forward_head(const Tensor& features, const std::vector<int>& labels,
                          const ForwardMode& mode);
  Tensor forward_head_logits(const Tensor& features, const ForwardMode& mode);
  // Straight pass over all blocks, independent of the split point.
  HeadOutput forward_monolithic(const Tensor& x, const std::vector<int>& labels,
                                const ForwardMode& mode);
  Tensor forward_logits(const Tensor& x, const ForwardMode& mode);

  std::vector<NamedParam> parameters();           // declaration order
  std::vector<NamedParam> backbone_parameters();  // theta_b under the active split
  std::vector<NamedParam> head_parameters();      // theta_t
  std::vector<NamedBufferRef> buffers();
  int64_t parameter_count();

  std::vector<double> flat_parameters();
  void set_flat_parameters(const std::vector<double>& theta);

  StateDict state();  // parameters then buffers, declaration order
  void load_state(const StateDict& sd);
  SplitModel clone();
  void zero_grads();

 private:
  SplitModel() = default;

  Tensor run_blocks(Tensor h, int first_block, int last_block, const ForwardMode& mode);
  Tensor head_logits_from(Tensor h, const ForwardMode& mode);
  int split_block_of(const std::string& name) const;

  ModelSpec spec_;
  std::vector<layers::MlpBlock> mlp_blocks_;
  layers::Conv stem_;
  layers::Bn stem_bn_;
  std::vector<layers::ResBlock> res_blocks_;
  layers::Dense head_;
  std::vector<std::string> split_points_;
  std::string active_split_;
  int active_block_ = 0;
};

// Checkpoint: "AFAN" magic, u32 version, length-prefixed spec/config text,
// then named blobs in declaration order (u64 little-endian lengths, raw
// IEEE-754 payloads). config_text must contain the model.* keys.
void save_checkpoint(SplitModel& model, const std::string& path, const std::string& config_text);
SplitModel load_checkpoint(const std::string& path, std::string* config_text = nullptr);

}  // namespace afan
