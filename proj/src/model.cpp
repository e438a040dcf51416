#include "irnet/model.hpp"

#include <iomanip>
#include <sstream>

namespace irnet {

const char* node_kind_name(NodeKind kind) {
  switch (kind) {
    case NodeKind::Input: return "input";
    case NodeKind::Rescale: return "rescale";
    case NodeKind::Conv: return "conv";
    case NodeKind::BatchNorm: return "batchnorm";
    case NodeKind::Relu: return "relu";
    case NodeKind::MaxPool: return "maxpool";
    case NodeKind::AvgPool: return "avgpool";
    case NodeKind::Concat: return "concat";
    case NodeKind::ResidualAdd: return "residual_add";
    case NodeKind::GlobalAvgPool: return "global_avg_pool";
    case NodeKind::Dropout: return "dropout";
    case NodeKind::Dense: return "dense";
  }
  return "unknown";
}

void ModelConfig::validate() const {
  if (input_size < 1) throw config_error("model.input_size must be >= 1");
  if (input_channels < 1) throw config_error("model.input_channels must be >= 1");
  if (num_classes < 2) throw config_error("model.num_classes must be >= 2");
  if (!(width_multiplier > 0.0 && width_multiplier <= 1.0)) {
    throw config_error("model.width_multiplier must be in (0,1]");
  }
  if (num_a_blocks < 0 || num_b_blocks < 0 || num_c_blocks < 0) {
    throw config_error("block counts must be non-negative");
  }
  if (!(residual_scale > 0.0 && residual_scale <= 1.0)) {
    throw config_error("model.residual_scale must be in (0,1]");
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw config_error("model.dropout_rate must be in [0,1)");
  }
}

std::string layer_table(const ModelGraph& model) {
  std::ostringstream os;
  os << "layer\ttype\toutput_shape\tparams\n";
  int64_t total = 0;
  for (const Node& n : model.nodes) {
    int64_t count = 0;
    for (int p : {n.kernel_param, n.bias_param, n.gamma_param, n.beta_param}) {
      if (p >= 0) count += model.params[static_cast<size_t>(p)].value.size();
    }
    total += count;
    os << n.name << "\t" << node_kind_name(n.kind) << "\t" << shape_str(n.out_shape) << "\t"
       << count << "\n";
  }
  os << "# total_params\t" << total << "\n";
  os << "# parameterized_layers\t" << model.num_param_layers << "\n";
  return os.str();
}

}  // namespace irnet
