// SPDX-License-Identifier: Apache-2.0
#include "rfp/cost_model.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <sstream>

namespace rfp {

namespace {

struct MapShape {
  int64_t c = 0, h = 0, w = 0;
};

int64_t conv_out(int64_t n, const LayerDesc& l) {
  return (n + 2 * l.padding - l.dilation * (l.kernel - 1) - 1) / l.stride + 1;
}

CostReport evaluate(const Graph& g, bool spatial, int64_t h, int64_t w) {
  if (g.input_channels < 1) throw ConfigError("graph input needs channels >= 1");
  std::map<std::string, MapShape> maps{{g.input, {g.input_channels, h, w}}};
  std::map<std::string, std::vector<int64_t>> group_shape;
  CostReport rep;
  rep.input_h = spatial ? h : 0;
  rep.input_w = spatial ? w : 0;

  auto fetch = [&](const LayerDesc& l, const std::string& name) {
    auto it = maps.find(name);
    if (it == maps.end()) throw ConfigError("layer '" + l.name + "' reads undefined map '" + name + "'");
    return it->second;
  };

  for (const auto& l : g.layers) {
    if (l.inputs.empty()) throw ConfigError("layer '" + l.name + "' has no inputs");
    if (maps.count(l.output)) throw ConfigError("layer '" + l.name + "' redefines map '" + l.output + "'");
    LayerCost cost{l.name, l.component, l.kind};
    MapShape in = fetch(l, l.inputs[0]);
    MapShape out = in;
    switch (l.kind) {
      case LayerKind::conv: {
        if (l.inputs.size() != 1) throw ConfigError("conv '" + l.name + "' takes one input");
        if (l.out_channels < 1 || l.kernel < 1 || l.stride < 1 || l.dilation < 1 || l.padding < 0) {
          throw ConfigError("conv '" + l.name + "' has invalid geometry");
        }
        out.c = l.out_channels;
        if (spatial) {
          out.h = conv_out(in.h, l);
          out.w = conv_out(in.w, l);
          if (out.h < 1 || out.w < 1) {
            throw ConfigError("conv '" + l.name + "' produces non-positive output from " +
                              std::to_string(in.h) + "x" + std::to_string(in.w));
          }
        }
        const int64_t weights = out.c * in.c * l.kernel * l.kernel;
        const std::vector<int64_t> wshape{out.c, in.c, l.kernel, l.kernel, l.bias ? 1 : 0};
        bool counted = true;
        if (!l.shared_group.empty()) {
          auto [it, fresh] = group_shape.emplace(l.shared_group, wshape);
          if (!fresh && it->second != wshape) {
            throw ContractError("shared group '" + l.shared_group + "' mixes weight shapes at '" + l.name + "'");
          }
          counted = fresh;
        }
        if (counted) cost.params = weights + (l.bias ? out.c : 0);
        if (spatial) cost.macs = weights * out.h * out.w;
        break;
      }
      case LayerKind::add:
      case LayerKind::mean: {
        for (size_t i = 1; i < l.inputs.size(); ++i) {
          MapShape o = fetch(l, l.inputs[i]);
          if (o.c != in.c || (spatial && (o.h < in.h || o.w < in.w))) {
            throw ConfigError("layer '" + l.name + "' input '" + l.inputs[i] + "' does not cover '" + l.inputs[0] + "'");
          }
        }
        const int64_t n = static_cast<int64_t>(l.inputs.size());
        if (spatial) cost.elementwise = in.c * in.h * in.w * (l.kind == LayerKind::add ? n - 1 : n);
        break;
      }
      case LayerKind::upsample:
        out.h = in.h * 2;
        out.w = in.w * 2;
        break;
      case LayerKind::concat:
        for (size_t i = 1; i < l.inputs.size(); ++i) {
          MapShape o = fetch(l, l.inputs[i]);
          if (spatial && (o.h != in.h || o.w != in.w)) throw ConfigError("concat '" + l.name + "' inputs differ in size");
          out.c += o.c;
        }
        break;
      case LayerKind::maxpool:
        if (spatial) {
          out.h = conv_out(in.h, l);
          out.w = conv_out(in.w, l);
          cost.elementwise = out.c * out.h * out.w * (static_cast<int64_t>(l.kernel) * l.kernel - 1);
        }
        break;
    }
    cost.out_c = out.c;
    cost.out_h = spatial ? out.h : 0;
    cost.out_w = spatial ? out.w : 0;
    maps[l.output] = out;
    rep.params += cost.params;
    rep.macs += cost.macs;
    rep.elementwise += cost.elementwise;
    rep.layers.push_back(std::move(cost));
  }
  return rep;
}

// Builder for graph descriptions; returns output map names.
class GraphBuilder {
 public:
  explicit GraphBuilder(Graph& g) : g_(g) {}

  std::string conv(const std::string& name, const std::string& in, int cout, int k, int s, int p,
                   int d, bool bias, const std::string& component, const std::string& group = "") {
    LayerDesc l;
    l.name = name;
    l.kind = LayerKind::conv;
    l.inputs = {in};
    l.output = name;
    l.out_channels = cout;
    l.kernel = k;
    l.stride = s;
    l.padding = p;
    l.dilation = d;
    l.bias = bias;
    l.shared_group = group;
    l.component = component;
    g_.layers.push_back(l);
    return name;
  }

  std::string op(LayerKind kind, const std::string& name, std::vector<std::string> in,
                 const std::string& component, int k = 1, int s = 1, int p = 0) {
    LayerDesc l;
    l.name = name;
    l.kind = kind;
    l.inputs = std::move(in);
    l.output = name;
    l.kernel = k;
    l.stride = s;
    l.padding = p;
    l.component = component;
    g_.layers.push_back(l);
    return name;
  }

 private:
  Graph& g_;
};

std::array<std::string, 4> stub_backbone(GraphBuilder& b, const BackboneSpec& spec, const std::string& in) {
  std::array<std::string, 4> c;
  std::string x = b.conv("backbone/stem1", in, spec.stem_channels, 3, 2, 1, 1, true, "backbone");
  x = b.conv("backbone/stem2", x, spec.stage_channels[0], 3, 2, 1, 1, true, "backbone");
  for (size_t s = 0; s < 4; ++s) {
    const std::string stage = "backbone/c" + std::to_string(s + 2);
    const int ch = spec.stage_channels[s];
    if (s > 0) x = b.conv(stage + "/down", x, ch, 3, 2, 1, 1, true, "backbone");
    for (int k = 0; k < spec.blocks[s]; ++k) {
      const std::string blk = stage + "/block" + std::to_string(k + 1);
      std::string y = b.conv(blk + "/conv1", x, ch, 3, 1, 1, 1, true, "backbone");
      y = b.conv(blk + "/conv2", y, ch, 3, 1, 1, 1, true, "backbone");
      x = b.op(LayerKind::add, blk + "/add", {x, y}, "backbone");
    }
    c[s] = x;
  }
  return c;
}

// Bottleneck ResNet-50: 7x7/2 stem, 3x3/2 max pool, stages of 3, 4, 6, 3 blocks,
// stride on the 3x3 conv, projection shortcut on each stage's first block.
std::array<std::string, 4> resnet50_backbone(GraphBuilder& b, const std::string& in) {
  std::array<std::string, 4> c;
  std::string x = b.conv("backbone/conv1", in, 64, 7, 2, 3, 1, false, "backbone");
  x = b.op(LayerKind::maxpool, "backbone/maxpool", {x}, "backbone", 3, 2, 1);
  const int depth[4] = {3, 4, 6, 3};
  for (int s = 0; s < 4; ++s) {
    const int width = 64 << s;
    const std::string stage = "backbone/layer" + std::to_string(s + 1);
    for (int k = 0; k < depth[s]; ++k) {
      const std::string blk = stage + "/" + std::to_string(k);
      const int stride = (k == 0 && s > 0) ? 2 : 1;
      std::string y = b.conv(blk + "/conv1", x, width, 1, 1, 0, 1, false, "backbone");
      y = b.conv(blk + "/conv2", y, width, 3, stride, 1, 1, false, "backbone");
      y = b.conv(blk + "/conv3", y, 4 * width, 1, 1, 0, 1, false, "backbone");
      std::string shortcut = x;
      if (k == 0) shortcut = b.conv(blk + "/downsample", x, 4 * width, 1, stride, 0, 1, false, "backbone");
      x = b.op(LayerKind::add, blk + "/add", {y, shortcut}, "backbone");
    }
    c[static_cast<size_t>(s)] = x;
  }
  return c;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string describe_rfp(const RfpConfig& r) {
  std::string s = "B=" + std::to_string(r.branches) + (r.share_weights ? " shared" : " unshared") +
                  " " + to_string(r.fusion);
  return s;
}

}  // namespace

std::string to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::add: return "add";
    case LayerKind::mean: return "mean";
    case LayerKind::upsample: return "upsample";
    case LayerKind::concat: return "concat";
    case LayerKind::maxpool: return "maxpool";
  }
  return "?";
}

LayerKind parse_layer_kind(std::string_view s) {
  for (LayerKind k : {LayerKind::conv, LayerKind::add, LayerKind::mean, LayerKind::upsample,
                      LayerKind::concat, LayerKind::maxpool}) {
    if (s == to_string(k)) return k;
  }
  throw ConfigError("unknown layer kind '" + std::string(s) + "'");
}

Graph parse_graph(const std::string& text) {
  Graph g;
  g.layers.clear();
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  bool have_input = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    std::istringstream ls(line);
    std::string kind;
    if (!(ls >> kind)) continue;
    const std::string where = "graph line " + std::to_string(line_no);
    std::map<std::string, std::string> kv;
    std::string tok, first;
    while (ls >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos) {
        if (kind == "input" && first.empty()) {
          first = tok;
          continue;
        }
        throw ConfigError(where + ": expected key=value, got '" + tok + "'");
      }
      kv[tok.substr(0, eq)] = tok.substr(eq + 1);
    }
    auto num = [&](const std::string& key, int def) {
      auto it = kv.find(key);
      if (it == kv.end()) return def;
      try {
        return std::stoi(it->second);
      } catch (const std::exception&) {
        throw ConfigError(where + ": bad integer for " + key);
      }
    };
    if (kind == "input") {
      g.input = first.empty() ? "image" : first;
      g.input_channels = num("channels", 3);
      have_input = true;
      continue;
    }
    LayerDesc l;
    l.kind = parse_layer_kind(kind);
    l.name = kv.count("name") ? kv["name"] : "";
    if (l.name.empty()) throw ConfigError(where + ": layer needs name=");
    std::stringstream ins(kv["in"]);
    std::string item;
    while (std::getline(ins, item, ',')) l.inputs.push_back(item);
    l.output = kv.count("out") ? kv["out"] : l.name;
    l.out_channels = num("cout", 0);
    l.kernel = num("k", 1);
    l.stride = num("s", 1);
    l.padding = num("p", 0);
    l.dilation = num("d", 1);
    l.bias = kv.count("bias") && (kv["bias"] == "true" || kv["bias"] == "1");
    l.shared_group = kv.count("group") ? kv["group"] : "";
    l.component = kv.count("component") ? kv["component"] : "";
    g.layers.push_back(std::move(l));
  }
  if (!have_input) throw ConfigError("graph has no input line");
  return g;
}

std::string graph_to_text(const Graph& g) {
  std::ostringstream s;
  s << "input " << g.input << " channels=" << g.input_channels << "\n";
  for (const auto& l : g.layers) {
    s << to_string(l.kind) << " name=" << l.name << " in=";
    for (size_t i = 0; i < l.inputs.size(); ++i) s << (i ? "," : "") << l.inputs[i];
    if (l.output != l.name) s << " out=" << l.output;
    if (l.kind == LayerKind::conv) {
      s << " cout=" << l.out_channels << " k=" << l.kernel << " s=" << l.stride << " p=" << l.padding
        << " d=" << l.dilation << " bias=" << (l.bias ? "true" : "false");
    } else if (l.kind == LayerKind::maxpool) {
      s << " k=" << l.kernel << " s=" << l.stride << " p=" << l.padding;
    }
    if (!l.shared_group.empty()) s << " group=" << l.shared_group;
    if (!l.component.empty()) s << " component=" << l.component;
    s << "\n";
  }
  return s.str();
}

int64_t CostReport::params_of(std::string_view component) const {
  int64_t n = 0;
  for (const auto& l : layers) if (l.component == component) n += l.params;
  return n;
}

int64_t CostReport::macs_of(std::string_view component) const {
  int64_t n = 0;
  for (const auto& l : layers) if (l.component == component) n += l.macs;
  return n;
}

CostReport count_params(const Graph& g) { return evaluate(g, false, 0, 0); }

CostReport count_macs(const Graph& g, int64_t h, int64_t w) {
  if (h < 1 || w < 1) throw ConfigError("input size must be positive");
  return evaluate(g, true, h, w);
}

Graph describe_detector(const DetectorConfig& cfg, std::optional<int> probe_branch) {
  Graph g;
  g.input = "image";
  g.input_channels = cfg.backbone.in_channels;
  GraphBuilder b(g);
  const bool resnet = cfg.backbone_kind == BackboneKind::resnet50;
  auto c = resnet ? resnet50_backbone(b, g.input) : stub_backbone(b, cfg.backbone, g.input);

  const int oc = cfg.fpn.out_channels;
  auto lv = [](int i) { return "p" + std::to_string(i + 2); };
  std::array<std::string, 4> merged;
  merged[3] = b.conv("fpn/p5/lateral", c[3], oc, 1, 1, 0, 1, true, "fpn");
  for (int i = 2; i >= 0; --i) {
    const std::string pre = "fpn/" + lv(i);
    std::string lat = b.conv(pre + "/lateral", c[static_cast<size_t>(i)], oc, 1, 1, 0, 1, true, "fpn");
    std::string up = b.op(LayerKind::upsample, pre + "/upsample", {merged[static_cast<size_t>(i) + 1]}, "fpn");
    merged[static_cast<size_t>(i)] = b.op(LayerKind::add, pre + "/merge", {lat, up}, "fpn");
  }
  std::vector<std::string> p;
  for (int i = 0; i < 4; ++i) {
    p.push_back(b.conv("fpn/" + lv(i) + "/smooth", merged[static_cast<size_t>(i)], oc, 3, 1, 1, 1, true, "fpn"));
  }
  if (cfg.fpn.levels >= 5) p.push_back(b.conv("fpn/p6/conv", p[3], oc, 3, 2, 1, 1, true, "fpn"));
  if (cfg.fpn.levels >= 6) p.push_back(b.conv("fpn/p7/conv", p[4], oc, 3, 2, 1, 1, true, "fpn"));

  if (cfg.rfp_enabled) {
    const RfpConfig& r = cfg.rfp;
    std::optional<int> single = probe_branch ? probe_branch : r.single_branch;
    for (size_t i = 0; i < p.size(); ++i) {
      const std::string pre = "rfp/" + lv(static_cast<int>(i));
      std::vector<std::string> ys;
      for (int br = 1; br <= r.branches; ++br) {
        if (single && br != *single) continue;
        const int d = r.dilations[static_cast<size_t>(br - 1)];
        const std::string group = r.share_weights ? pre + "/weight" : pre + "/branch" + std::to_string(br) + "/weight";
        std::string y = b.conv(pre + "/branch" + std::to_string(br) + "/conv", p[i], oc, r.kernel, 1, d, d,
                               r.use_bias, "rfp", group);
        ys.push_back(b.op(LayerKind::add, pre + "/branch" + std::to_string(br) + "/shortcut", {y, p[i]}, "rfp"));
      }
      if (single) {
        p[i] = ys[0];
      } else if (r.fusion == Fusion::branch_pool) {
        p[i] = b.op(LayerKind::mean, pre + "/pool", ys, "rfp");
      } else if (r.fusion == Fusion::add) {
        p[i] = b.op(LayerKind::add, pre + "/sum", ys, "rfp");
      } else {
        std::string cat = b.op(LayerKind::concat, pre + "/concat", ys, "rfp");
        p[i] = b.conv(pre + "/concat_proj", cat, oc, 1, 1, 0, 1, false, "rfp");
      }
    }
  }
  for (size_t i = 0; i < p.size(); ++i) {
    const std::string pre = "head/" + lv(static_cast<int>(i));
    b.conv(pre + "/cls", p[i], 2, 3, 1, 1, 1, true, "head", "head/cls");
    b.conv(pre + "/reg", p[i], 4, 3, 1, 1, 1, true, "head", "head/reg");
  }
  return g;
}

std::pair<int64_t, int64_t> cost_input_size(const DetectorConfig& cfg, int64_t h, int64_t w) {
  if (cfg.backbone_kind == BackboneKind::resnet50) return {h, w};
  return effective_input_size(cfg.backbone, h, w);
}

CostReport detector_cost(const DetectorConfig& cfg, int64_t h, int64_t w, std::optional<int> probe_branch) {
  auto [eh, ew] = cost_input_size(cfg, h, w);
  return count_macs(describe_detector(cfg, probe_branch), eh, ew);
}

AblationAxis parse_ablation_axis(std::string_view s) {
  if (s == "branches") return AblationAxis::branches;
  if (s == "sharing") return AblationAxis::sharing;
  if (s == "fusion") return AblationAxis::fusion;
  throw ConfigError("unknown ablation axis '" + std::string(s) + "' (expected branches, sharing or fusion)");
}

std::vector<AblationRow> ablation_table(const DetectorConfig& base, AblationAxis axis, int64_t h, int64_t w) {
  std::vector<AblationRow> rows;
  auto add_row = [&](std::string label, bool enabled, RfpConfig r, std::optional<int> probe = std::nullopt) {
    DetectorConfig cfg = base;
    cfg.rfp_enabled = enabled;
    r.channels = cfg.fpn.out_channels;
    if (enabled) r.validate();
    cfg.rfp = r;
    rows.push_back({std::move(label), detector_cost(cfg, h, w, probe), enabled, r, probe});
  };
  RfpConfig r0 = base.rfp;
  r0.single_branch.reset();
  add_row("baseline (no RFP)", false, r0);

  switch (axis) {
    case AblationAxis::branches: {
      for (int b = 1; b <= 4; ++b) {
        RfpConfig r = RfpConfig::with_branches(b, base.fpn.out_channels);
        r.share_weights = true;
        r.fusion = Fusion::branch_pool;
        r.use_bias = base.rfp.use_bias;
        r.post_relu = base.rfp.post_relu;
        add_row("B=" + std::to_string(b), true, r);
      }
      for (size_t i = 2; i < rows.size(); ++i) {
        if (rows[i].report.params != rows[1].report.params) {
          throw ContractError("shared RFP params changed with B: " + rows[i].label);
        }
      }
      const int64_t step = rows[2].report.macs - rows[1].report.macs;
      for (size_t i = 3; i < rows.size(); ++i) {
        if (rows[i].report.macs - rows[i - 1].report.macs != step) {
          throw ContractError("per-branch MAC step is not constant at " + rows[i].label);
        }
      }
      break;
    }
    case AblationAxis::sharing: {
      RfpConfig r = r0;
      r.share_weights = false;
      add_row("without sharing, " + describe_rfp(r), true, r);
      r.share_weights = true;
      add_row("with sharing, " + describe_rfp(r), true, r);
      break;
    }
    case AblationAxis::fusion: {
      for (Fusion f : {Fusion::branch_pool, Fusion::add, Fusion::concat}) {
        RfpConfig r = r0;
        r.fusion = f;
        add_row(to_string(f) + ", all branches", true, r);
        if (f != Fusion::concat && r.branches >= 2) add_row(to_string(f) + ", branch 2 only", true, r, 2);
      }
      break;
    }
  }
  return rows;
}

std::string format_table_text(const std::vector<AblationRow>& rows) {
  size_t width = 6;
  for (const auto& r : rows) width = std::max(width, r.label.size());
  std::ostringstream s;
  auto pad = [&](const std::string& t) { return t + std::string(width - t.size(), ' '); };
  s << pad("config") << "  " << "     params" << "  " << "   GMACs" << "  " << "  GFLOPs" << "  "
    << "  dGMACs" << "  " << "elementwise(M)\n";
  for (size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i].report;
    const double dg = i == 0 ? 0.0 : (r.macs - rows[i - 1].report.macs) / 1e9;
    char buf[200];
    std::snprintf(buf, sizeof buf, "  %11lld  %8.2f  %8.2f  %8.2f  %14.2f\n", static_cast<long long>(r.params),
                  r.macs / 1e9, r.flops() / 1e9, dg, r.elementwise / 1e6);
    s << pad(rows[i].label) << buf;
  }
  return s.str();
}

std::string format_table_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream s;
  s << "config,params,macs,flops,elementwise,input_h,input_w\n";
  for (const auto& row : rows) {
    const auto& r = row.report;
    s << '"' << row.label << "\"," << r.params << ',' << r.macs << ',' << r.flops() << ',' << r.elementwise
      << ',' << r.input_h << ',' << r.input_w << '\n';
  }
  return s.str();
}

std::string format_report_text(const CostReport& r) {
  std::ostringstream s;
  s << "input " << r.input_h << "x" << r.input_w << "\n";
  for (const char* comp : {"backbone", "fpn", "rfp", "head"}) {
    s << "  " << comp << std::string(10 - std::string(comp).size(), ' ') << fmt("params %12.0f", r.params_of(comp))
      << fmt("  GMACs %9.3f", r.macs_of(comp) / 1e9) << "\n";
  }
  s << "  total     " << fmt("params %12.0f", static_cast<double>(r.params)) << fmt("  GMACs %9.3f", r.macs / 1e9)
    << fmt("  GFLOPs %9.3f", r.flops() / 1e9) << fmt("  elementwise(M) %.3f", r.elementwise / 1e6) << "\n";
  return s.str();
}

}  // namespace rfp
