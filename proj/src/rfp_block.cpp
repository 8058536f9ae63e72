// SPDX-License-Identifier: Apache-2.0
#include "rfp/rfp_block.hpp"

#include "rfp/ops.hpp"

namespace rfp {

std::string to_string(Fusion f) {
  switch (f) {
    case Fusion::branch_pool: return "branch_pool";
    case Fusion::add: return "add";
    case Fusion::concat: return "concat";
  }
  return "?";
}

Fusion parse_fusion(std::string_view s) {
  if (s == "branch_pool" || s == "pool") return Fusion::branch_pool;
  if (s == "add") return Fusion::add;
  if (s == "concat") return Fusion::concat;
  throw ConfigError("unknown fusion '" + std::string(s) + "' (expected branch_pool, add or concat)");
}

std::vector<int> default_dilations(int branches) {
  std::vector<int> d;
  for (int i = 1; i <= branches; ++i) d.push_back(2 * i - 1);
  return d;
}

RfpConfig RfpConfig::with_branches(int branches, int channels) {
  RfpConfig c;
  c.branches = branches;
  c.dilations = default_dilations(branches);
  c.channels = channels;
  return c;
}

void RfpConfig::validate() const {
  if (branches < 1) throw ConfigError("rfp.branches must be >= 1");
  if (static_cast<int>(dilations.size()) != branches) {
    throw ConfigError("rfp.dilations has " + std::to_string(dilations.size()) +
                      " entries for " + std::to_string(branches) + " branches");
  }
  for (int d : dilations) {
    if (d < 1) throw ConfigError("rfp.dilations entries must be >= 1");
  }
  if (channels < 1) throw ConfigError("rfp channel count must be >= 1");
  if (kernel != 3) throw ConfigError("rfp kernel is fixed at 3");
  if (single_branch) {
    if (*single_branch < 1 || *single_branch > branches) {
      throw ConfigError("rfp.inference single:" + std::to_string(*single_branch) +
                        " is outside 1.." + std::to_string(branches));
    }
    if (fusion != Fusion::branch_pool) {
      throw ConfigError("rfp.inference single-branch requires branch_pool fusion; " +
                        to_string(fusion) +
                        " fusion does not yield a usable single-branch output");
    }
  }
}

RfpParams RfpParams::create(const RfpConfig& cfg, ParameterStore& store,
                            const std::string& prefix, std::mt19937_64& rng, double gain) {
  cfg.validate();
  RfpParams p;
  const int64_t c = cfg.channels, k = cfg.kernel;
  const int sets = cfg.weight_sets();
  const int refs = cfg.share_weights ? cfg.branches : 1;
  for (int i = 0; i < sets; ++i) {
    std::string name = prefix + (cfg.share_weights ? "/weight" : "/branch" + std::to_string(i + 1) + "/weight");
    p.weights.push_back(store.add_normal(name, Shape{c, c, k, k}, c * k * k, rng, gain, refs));
    if (cfg.use_bias) {
      std::string bname = prefix + (cfg.share_weights ? "/bias" : "/branch" + std::to_string(i + 1) + "/bias");
      p.biases.push_back(store.add_zeros(bname, Shape{c}, refs));
    }
  }
  if (cfg.fusion == Fusion::concat) {
    const int64_t in = c * cfg.branches;
    p.concat_proj = store.add_normal(prefix + "/concat_proj", Shape{c, in, 1, 1}, in, rng, 1.0);
  }
  return p;
}

Tensor rfp_branch(const Tensor& x, const RfpConfig& cfg, const RfpParams& params,
                  int branch_index) {
  if (branch_index < 1 || branch_index > cfg.branches) {
    throw ConfigError("rfp branch index " + std::to_string(branch_index) + " outside 1.." +
                      std::to_string(cfg.branches));
  }
  if (x.rank() != 4 || x.dim(1) != cfg.channels) {
    throw ConfigError("rfp input " + x.shape().str() + " does not have " +
                      std::to_string(cfg.channels) + " channels");
  }
  const size_t set = cfg.share_weights ? 0 : static_cast<size_t>(branch_index - 1);
  const int d = cfg.dilations[static_cast<size_t>(branch_index - 1)];
  std::optional<Tensor> bias;
  if (!params.biases.empty()) bias = params.biases.at(set);
  Tensor conv = conv2d(x, params.weights.at(set), bias, {.stride = 1, .padding = d, .dilation = d});
  if (conv.shape() != x.shape()) {
    throw ContractError("rfp branch changed shape " + x.shape().str() + " -> " + conv.shape().str());
  }
  return add(conv, x);
}

Tensor rfp_forward(const Tensor& x, const RfpConfig& cfg, const RfpParams& params) {
  cfg.validate();
  Tensor out;
  if (cfg.single_branch) {
    out = rfp_branch(x, cfg, params, *cfg.single_branch);
  } else {
    std::vector<Tensor> ys;
    ys.reserve(static_cast<size_t>(cfg.branches));
    for (int i = 1; i <= cfg.branches; ++i) ys.push_back(rfp_branch(x, cfg, params, i));
    switch (cfg.fusion) {
      case Fusion::branch_pool: out = mean_n(ys); break;
      case Fusion::add: out = sum_n(ys); break;
      case Fusion::concat:
        if (!params.concat_proj) throw ContractError("concat fusion without projection weight");
        out = conv2d(concat_channels(ys), *params.concat_proj, std::nullopt);
        break;
    }
  }
  if (cfg.post_relu) out = relu(out);
  return out;
}

RfpConfig fold_for_inference(RfpConfig cfg, int branch_index) {
  if (cfg.fusion != Fusion::branch_pool) {
    throw ConfigError("cannot fold a " + to_string(cfg.fusion) +
                      "-fusion RFP block: only branch pooling keeps a single branch on the "
                      "scale of the fused output (add and concat single-branch inference is "
                      "degraded or undefined)");
  }
  if (branch_index < 1 || branch_index > cfg.branches) {
    throw ConfigError("fold branch " + std::to_string(branch_index) + " outside 1.." +
                      std::to_string(cfg.branches));
  }
  cfg.single_branch = branch_index;
  cfg.validate();
  return cfg;
}

int64_t rfp_param_count(const RfpConfig& cfg) {
  const int64_t c = cfg.channels, k = cfg.kernel;
  int64_t per_set = c * c * k * k + (cfg.use_bias ? c : 0);
  int64_t n = per_set * cfg.weight_sets();
  if (cfg.fusion == Fusion::concat) n += static_cast<int64_t>(cfg.branches) * c * c;
  return n;
}

}  // namespace rfp
