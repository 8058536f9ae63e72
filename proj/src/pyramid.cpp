// SPDX-License-Identifier: Apache-2.0
#include "rfp/pyramid.hpp"

#include "rfp/kernels.hpp"

namespace rfp {

namespace {

constexpr int64_t kInputMultiple = 128;

int64_t stride2_size(int64_t n) {
  kernels::ConvGeometry g;
  g.in_h = g.in_w = n;
  g.kernel = 3;
  g.stride = 2;
  g.padding = 1;
  return g.out_h();
}

std::string level_name(size_t i) { return "p" + std::to_string(i + 2); }

}  // namespace

std::string to_string(InputPolicy p) {
  switch (p) {
    case InputPolicy::pad: return "pad";
    case InputPolicy::strict: return "strict";
    case InputPolicy::floor: return "floor";
  }
  return "?";
}

InputPolicy parse_input_policy(std::string_view s) {
  if (s == "pad") return InputPolicy::pad;
  if (s == "strict") return InputPolicy::strict;
  if (s == "floor") return InputPolicy::floor;
  throw ConfigError("unknown input policy '" + std::string(s) + "' (expected pad, strict or floor)");
}

void BackboneSpec::validate() const {
  if (in_channels < 1 || stem_channels < 1) throw ConfigError("backbone channels must be >= 1");
  for (int c : stage_channels) {
    if (c < 1) throw ConfigError("backbone.stage_channels entries must be >= 1");
  }
  for (int b : blocks) {
    if (b < 0) throw ConfigError("backbone.blocks entries must be >= 0");
  }
}

void PyramidSpec::validate() const {
  if (out_channels < 1) throw ConfigError("fpn.out_channels must be >= 1");
  if (levels < 4 || levels > 6) throw ConfigError("fpn.levels must be 4, 5 or 6");
}

ConvLayer ConvLayer::create(ParameterStore& store, const std::string& prefix, int in_c, int out_c,
                            int kernel, Conv2dOptions opts, bool bias, std::mt19937_64& rng,
                            double gain) {
  ConvLayer l;
  l.weight = store.add_normal(prefix + "/weight", Shape{out_c, in_c, kernel, kernel},
                              static_cast<int64_t>(in_c) * kernel * kernel, rng, gain);
  if (bias) l.bias = store.add_zeros(prefix + "/bias", Shape{out_c});
  l.opts = opts;
  return l;
}

BackboneParams BackboneParams::create(const BackboneSpec& spec, ParameterStore& store,
                                      std::mt19937_64& rng) {
  spec.validate();
  const Conv2dOptions s2{.stride = 2, .padding = 1};
  const Conv2dOptions s1{.stride = 1, .padding = 1};
  BackboneParams p;
  p.stem1 = ConvLayer::create(store, "backbone/stem1", spec.in_channels, spec.stem_channels, 3, s2,
                              true, rng);
  p.stem2 = ConvLayer::create(store, "backbone/stem2", spec.stem_channels, spec.stage_channels[0],
                              3, s2, true, rng);
  for (size_t s = 0; s < 4; ++s) {
    const std::string stage = "backbone/c" + std::to_string(s + 2);
    const int ch = spec.stage_channels[s];
    if (s > 0) {
      p.down[s] = ConvLayer::create(store, stage + "/down", spec.stage_channels[s - 1], ch, 3, s2,
                                    true, rng);
    }
    for (int b = 0; b < spec.blocks[s]; ++b) {
      const std::string blk = stage + "/block" + std::to_string(b + 1);
      // The second conv starts small so each block begins close to identity.
      p.blocks[s].push_back({ConvLayer::create(store, blk + "/conv1", ch, ch, 3, s1, true, rng),
                             ConvLayer::create(store, blk + "/conv2", ch, ch, 3, s1, true, rng,
                                               0.25)});
    }
  }
  return p;
}

std::pair<int64_t, int64_t> effective_input_size(const BackboneSpec& spec, int64_t h, int64_t w) {
  auto up = [](int64_t n) { return (n + kInputMultiple - 1) / kInputMultiple * kInputMultiple; };
  switch (spec.input_policy) {
    case InputPolicy::pad: return {up(h), up(w)};
    case InputPolicy::strict:
      if (h % kInputMultiple != 0 || w % kInputMultiple != 0) {
        throw ConfigError("input " + std::to_string(h) + "x" + std::to_string(w) +
                          " is not divisible by 128 (strict input policy)");
      }
      return {h, w};
    case InputPolicy::floor: return {h, w};
  }
  return {h, w};
}

BackboneOutput backbone_forward(const Tensor& image, const BackboneSpec& spec,
                                const BackboneParams& params) {
  if (image.rank() != 4 || image.dim(1) != spec.in_channels) {
    throw ConfigError("backbone expects [N," + std::to_string(spec.in_channels) + ",H,W], got " +
                      image.shape().str());
  }
  BackboneOutput out;
  auto [h, w] = effective_input_size(spec, image.dim(2), image.dim(3));
  Tensor x = image;
  if (h != image.dim(2) || w != image.dim(3)) {
    out.pad_h = h - image.dim(2);
    out.pad_w = w - image.dim(3);
    x = pad_bottom_right(image, h, w);
  }
  x = relu(params.stem1(x));
  x = relu(params.stem2(x));
  for (size_t s = 0; s < 4; ++s) {
    if (params.down[s]) x = relu((*params.down[s])(x));
    for (const auto& blk : params.blocks[s]) {
      x = relu(add(x, blk.conv2(relu(blk.conv1(x)))));
    }
    out.c[s] = x;
  }
  return out;
}

FpnParams FpnParams::create(const BackboneSpec& backbone, const PyramidSpec& spec,
                            ParameterStore& store, std::mt19937_64& rng) {
  spec.validate();
  FpnParams p;
  const int oc = spec.out_channels;
  for (size_t i = 0; i < 4; ++i) {
    const std::string lv = "fpn/" + level_name(i);
    p.lateral[i] = ConvLayer::create(store, lv + "/lateral", backbone.stage_channels[i], oc, 1, {},
                                     true, rng);
    p.smooth[i] = ConvLayer::create(store, lv + "/smooth", oc, oc, 3, {.stride = 1, .padding = 1},
                                    true, rng);
  }
  const Conv2dOptions s2{.stride = 2, .padding = 1};
  if (spec.levels >= 5) p.p6 = ConvLayer::create(store, "fpn/p6/conv", oc, oc, 3, s2, true, rng);
  if (spec.levels >= 6) p.p7 = ConvLayer::create(store, "fpn/p7/conv", oc, oc, 3, s2, true, rng);
  return p;
}

std::vector<Tensor> build_pyramid(const std::array<Tensor, 4>& c, const PyramidSpec& spec,
                                  const FpnParams& params) {
  spec.validate();
  std::array<Tensor, 4> merged;
  merged[3] = params.lateral[3](c[3]);
  for (int i = 2; i >= 0; --i) {
    Tensor lat = params.lateral[static_cast<size_t>(i)](c[static_cast<size_t>(i)]);
    Tensor up = upsample_nearest_2x(merged[static_cast<size_t>(i) + 1]);
    if (up.dim(2) < lat.dim(2) || up.dim(3) < lat.dim(3)) {
      throw ContractError("top-down map " + up.shape().str() + " smaller than lateral " +
                          lat.shape().str());
    }
    if (up.dim(2) != lat.dim(2) || up.dim(3) != lat.dim(3)) up = crop(up, lat.dim(2), lat.dim(3));
    merged[static_cast<size_t>(i)] = add(lat, up);
  }
  std::vector<Tensor> p;
  for (size_t i = 0; i < 4; ++i) p.push_back(params.smooth[i](merged[i]));
  if (spec.levels >= 5) p.push_back((*params.p6)(p[3]));
  if (spec.levels >= 6) p.push_back((*params.p7)(p[4]));
  return p;
}

std::vector<Tensor> attach_rfp(const std::vector<Tensor>& pyramid, const RfpConfig& cfg,
                               std::span<const RfpParams> params, std::optional<int> probe_branch) {
  if (params.size() != pyramid.size()) {
    throw ConfigError("attach_rfp: " + std::to_string(params.size()) + " RFP blocks for " +
                      std::to_string(pyramid.size()) + " levels");
  }
  std::vector<Tensor> out;
  out.reserve(pyramid.size());
  for (size_t i = 0; i < pyramid.size(); ++i) {
    if (pyramid[i].dim(1) != cfg.channels) {
      throw ConfigError("attach_rfp: level " + level_name(i) + " has " +
                        std::to_string(pyramid[i].dim(1)) + " channels, RFP expects " +
                        std::to_string(cfg.channels));
    }
    if (probe_branch) {
      Tensor y = rfp_branch(pyramid[i], cfg, params[i], *probe_branch);
      out.push_back(cfg.post_relu ? relu(y) : y);
    } else {
      out.push_back(rfp_forward(pyramid[i], cfg, params[i]));
    }
  }
  return out;
}

std::vector<std::pair<int64_t, int64_t>> pyramid_level_sizes(const BackboneSpec& backbone,
                                                             const PyramidSpec& spec, int64_t h,
                                                             int64_t w) {
  auto [eh, ew] = effective_input_size(backbone, h, w);
  std::vector<std::pair<int64_t, int64_t>> sizes;
  // Two stride-2 stem convs reach stride 4, then one stride-2 conv per level.
  int64_t ch = stride2_size(stride2_size(eh)), cw = stride2_size(stride2_size(ew));
  for (int i = 0; i < spec.levels; ++i) {
    if (i > 0) {
      ch = stride2_size(ch);
      cw = stride2_size(cw);
    }
    sizes.emplace_back(ch, cw);
  }
  return sizes;
}

}  // namespace rfp
