// SPDX-License-Identifier: Apache-2.0
#include "rfp/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include "rfp/detection.hpp"
#include "rfp/ops.hpp"
#include "rfp/rfp_block.hpp"

namespace rfp {

namespace {

double rel_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, bool grad = true) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<Real> v(static_cast<size_t>(shape.numel()));
  for (auto& x : v) x = static_cast<Real>(nd(rng));
  return Tensor::from(shape, std::move(v), grad);
}

std::vector<Real> random_weights(int64_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<Real> v(static_cast<size_t>(n));
  for (auto& x : v) x = static_cast<Real>(nd(rng));
  return v;
}

// Fixed random linear readout of a tensor produced by `make`.
std::function<Tensor()> readout(std::function<Tensor()> make, const Shape& shape, std::mt19937_64& rng) {
  auto w = std::make_shared<std::vector<Real>>(random_weights(shape.numel(), rng));
  return [make = std::move(make), w]() { return dot_constant(make(), *w); };
}

Shape map_shape(std::mt19937_64& rng, int max_c = 3) {
  return Shape{uniform_int(rng, 1, 2), uniform_int(rng, 1, max_c), uniform_int(rng, 2, 6), uniform_int(rng, 2, 6)};
}

using Case = std::pair<std::function<Tensor()>, std::vector<Tensor>>;

Case make_case(const std::string& family, std::mt19937_64& rng) {
  if (family == "conv2d") {
    const int k = uniform_int(rng, 1, 3), d = uniform_int(rng, 1, 3), s = uniform_int(rng, 1, 2);
    const int p = uniform_int(rng, 0, d * (k - 1));
    const int64_t span = d * (k - 1) + 1 - 2 * p;
    const int64_t h = std::max<int64_t>(span, 1) + uniform_int(rng, 0, 4);
    const int64_t w = std::max<int64_t>(span, 1) + uniform_int(rng, 0, 4);
    const int cin = uniform_int(rng, 1, 3), cout = uniform_int(rng, 1, 3);
    Tensor x = random_tensor(Shape{uniform_int(rng, 1, 2), cin, h, w}, rng);
    Tensor wt = random_tensor(Shape{cout, cin, k, k}, rng);
    std::optional<Tensor> b;
    std::vector<Tensor> in{x, wt};
    if (uniform_int(rng, 0, 1)) {
      b = random_tensor(Shape{cout}, rng);
      in.push_back(*b);
    }
    const Conv2dOptions o{.stride = s, .padding = p, .dilation = d};
    NoGradGuard probe;
    const Shape out = conv2d(x, wt, b, o).shape();
    return {readout([=] { return conv2d(x, wt, b, o); }, out, rng), in};
  }
  if (family == "add") {
    const Shape s = map_shape(rng);
    Tensor a = random_tensor(s, rng), b = random_tensor(s, rng);
    return {readout([=] { return add(a, b); }, s, rng), {a, b}};
  }
  if (family == "relu") {
    const Shape s = map_shape(rng);
    Tensor a = random_tensor(s, rng);
    return {readout([=] { return relu(a); }, s, rng), {a}};
  }
  if (family == "scale") {
    const Shape s = map_shape(rng);
    Tensor a = random_tensor(s, rng);
    const Real f = static_cast<Real>(std::normal_distribution<double>(0, 2)(rng));
    return {readout([=] { return scale(a, f); }, s, rng), {a}};
  }
  if (family == "mean_n" || family == "sum_n" || family == "concat_channels") {
    Shape s = map_shape(rng);
    std::vector<Tensor> xs;
    const int n = uniform_int(rng, 1, 4);
    for (int i = 0; i < n; ++i) xs.push_back(random_tensor(s, rng));
    Shape out = s;
    if (family == "concat_channels") out = Shape{s[0], s[1] * n, s[2], s[3]};
    std::function<Tensor()> make;
    if (family == "mean_n") make = [=] { return mean_n(xs); };
    if (family == "sum_n") make = [=] { return sum_n(xs); };
    if (family == "concat_channels") make = [=] { return concat_channels(xs); };
    return {readout(make, out, rng), xs};
  }
  if (family == "sum") {
    Tensor a = random_tensor(map_shape(rng), rng);
    return {[=] { return sum(a); }, {a}};
  }
  if (family == "dot_constant") {
    const Shape s = map_shape(rng);
    Tensor a = random_tensor(s, rng);
    return {readout([=] { return a; }, s, rng), {a}};
  }
  if (family == "upsample_nearest_2x") {
    const Shape s = map_shape(rng);
    Tensor a = random_tensor(s, rng);
    return {readout([=] { return upsample_nearest_2x(a); }, Shape{s[0], s[1], 2 * s[2], 2 * s[3]}, rng), {a}};
  }
  if (family == "crop" || family == "pad_bottom_right") {
    const Shape s = map_shape(rng);
    Tensor a = random_tensor(s, rng);
    if (family == "crop") {
      const int64_t h = uniform_int(rng, 1, static_cast<int>(s[2])), w = uniform_int(rng, 1, static_cast<int>(s[3]));
      return {readout([=] { return crop(a, h, w); }, Shape{s[0], s[1], h, w}, rng), {a}};
    }
    const int64_t h = s[2] + uniform_int(rng, 0, 3), w = s[3] + uniform_int(rng, 0, 3);
    return {readout([=] { return pad_bottom_right(a, h, w); }, Shape{s[0], s[1], h, w}, rng), {a}};
  }
  if (family == "flatten_levels") {
    const int64_t n = uniform_int(rng, 1, 2), k = uniform_int(rng, 1, 4);
    std::vector<Tensor> maps;
    int64_t rows = 0;
    for (int i = uniform_int(rng, 1, 3); i > 0; --i) {
      const int64_t h = uniform_int(rng, 1, 4), w = uniform_int(rng, 1, 4);
      maps.push_back(random_tensor(Shape{n, k, h, w}, rng));
      rows += h * w;
    }
    return {readout([=] { return flatten_levels(maps, k); }, Shape{n, rows, k}, rng), maps};
  }
  if (family == "rfp_block") {
    RfpConfig cfg;
    cfg.branches = uniform_int(rng, 1, 4);
    cfg.dilations.clear();
    for (int i = 0; i < cfg.branches; ++i) cfg.dilations.push_back(uniform_int(rng, 1, 3));
    cfg.share_weights = uniform_int(rng, 0, 1) == 1;
    cfg.fusion = static_cast<Fusion>(uniform_int(rng, 0, 2));
    cfg.channels = uniform_int(rng, 1, 3);
    cfg.use_bias = uniform_int(rng, 0, 1) == 1;
    cfg.post_relu = uniform_int(rng, 0, 1) == 1;
    auto store = std::make_shared<ParameterStore>();
    auto params = std::make_shared<RfpParams>(RfpParams::create(cfg, *store, "rfp", rng));
    // Biases start at zero; randomise them so their gradients are exercised off the trivial point.
    for (auto& p : store->all()) {
      std::normal_distribution<double> nd(0.0, 0.5);
      for (auto& v : p.tensor.mutable_values()) v = static_cast<Real>(v + nd(rng));
    }
    const Shape s{uniform_int(rng, 1, 2), cfg.channels, uniform_int(rng, 3, 7), uniform_int(rng, 3, 7)};
    Tensor x = random_tensor(s, rng);
    std::vector<Tensor> in{x};
    for (auto& p : store->all()) in.push_back(p.tensor);
    return {readout([=] { (void)store; return rfp_forward(x, cfg, *params); }, s, rng), in};
  }
  if (family == "detection_loss") {
    const int64_t n = uniform_int(rng, 1, 2), a = uniform_int(rng, 4, 24);
    Tensor cls = random_tensor(Shape{n, a, 2}, rng);
    Tensor reg = random_tensor(Shape{n, a, 4}, rng);
    auto matches = std::make_shared<std::vector<MatchResult>>();
    std::normal_distribution<double> nd(0.0, 1.0);
    for (int64_t b = 0; b < n; ++b) {
      MatchResult m;
      for (int64_t i = 0; i < a; ++i) {
        const int r = uniform_int(rng, 0, 9);
        m.label.push_back(r < 3 ? r % 2 : (r < 8 ? MatchResult::kNegative : MatchResult::kIgnore));
        if (m.label.back() >= 0) {
          m.targets.push_back({nd(rng), nd(rng), nd(rng), nd(rng)});
        } else {
          m.targets.push_back({0, 0, 0, 0});
        }
      }
      matches->push_back(std::move(m));
    }
    LossConfig lc{std::uniform_real_distribution<double>(0.5, 2.0)(rng), uniform_int(rng, 1, 3)};
    return {[=] { return detection_loss(cls, reg, *matches, lc).total; }, {cls, reg}};
  }
  throw ConfigError("unknown gradcheck family '" + family + "'");
}

}  // namespace

bool GradcheckStats::passed() const {
  if (coords == 0) return false;
  return max_rel_error < tolerance &&
         static_cast<double>(skipped) <= max_skip_fraction * static_cast<double>(coords);
}

void GradcheckStats::merge(const GradcheckStats& o) {
  seeds += o.seeds;
  coords += o.coords;
  skipped += o.skipped;
  if (!o.worst.empty() && (o.max_rel_error >= max_rel_error || worst.empty())) worst = o.worst;
  max_rel_error = std::max(max_rel_error, o.max_rel_error);
  tolerance = o.tolerance;
  max_skip_fraction = o.max_skip_fraction;
}

GradcheckStats check_gradient(const std::string& family, const std::function<Tensor()>& f,
                              const std::vector<Tensor>& inputs, std::mt19937_64& rng,
                              const GradcheckOptions& opts) {
  GradcheckStats st;
  st.family = family;
  st.seeds = 1;
  st.tolerance = opts.tolerance;
  st.max_skip_fraction = opts.max_skip_fraction;

  for (Tensor t : inputs) t.clear_grad();
  {
    Tensor root = f();
    backward(root);
  }
  std::vector<std::vector<double>> analytic;
  int64_t total = 0;
  for (const auto& t : inputs) {
    std::vector<double> g(static_cast<size_t>(t.numel()), 0.0);
    if (t.has_grad()) {
      auto gs = t.grad();
      std::copy(gs.begin(), gs.end(), g.begin());
    }
    analytic.push_back(std::move(g));
    total += t.numel();
  }
  if (total == 0) return st;

  NoGradGuard no_grad;
  auto numeric = [&](Tensor& t, size_t j, double eps) {
    auto v = t.mutable_values();
    const Real orig = v[j];
    v[j] = static_cast<Real>(orig + eps);
    const double fp = f().item();
    v[j] = static_cast<Real>(orig - eps);
    const double fm = f().item();
    v[j] = orig;
    return (fp - fm) / (2 * eps);
  };

  std::uniform_int_distribution<int64_t> pick(0, total - 1);
  for (int c = 0; c < opts.coords_per_seed; ++c) {
    int64_t flat = pick(rng);
    size_t ti = 0;
    while (flat >= inputs[ti].numel()) flat -= inputs[ti++].numel();
    Tensor t = inputs[ti];
    const size_t j = static_cast<size_t>(flat);
    const double a = analytic[ti][j];
    const double n1 = numeric(t, j, opts.eps);
    double err = rel_error(a, n1, opts.floor);
    if (err >= opts.tolerance) {
      const double n2 = numeric(t, j, opts.eps / 2);
      if (rel_error(n1, n2, opts.floor) >= opts.tolerance) {
        ++st.skipped;
        ++st.coords;
        continue;
      }
      err = rel_error(a, n2, opts.floor);
    }
    ++st.coords;
    if (err >= st.max_rel_error) {
      st.max_rel_error = err;
      char buf[160];
      std::snprintf(buf, sizeof buf, "input %zu [%zu]: analytic %.12g numeric %.12g", ti, j, a, n1);
      st.worst = buf;
    }
  }
  return st;
}

std::vector<std::string> gradcheck_families() {
  return {"conv2d", "add", "relu", "scale", "mean_n", "sum_n", "sum", "dot_constant",
          "upsample_nearest_2x", "crop", "pad_bottom_right", "concat_channels", "flatten_levels",
          "rfp_block", "detection_loss"};
}

GradcheckStats run_gradcheck_family(const std::string& family, int seeds, uint64_t first_seed,
                                    const GradcheckOptions& opts) {
  GradcheckStats total;
  total.family = family;
  total.tolerance = opts.tolerance;
  total.max_skip_fraction = opts.max_skip_fraction;
  for (int s = 0; s < seeds; ++s) {
    std::mt19937_64 rng(first_seed + static_cast<uint64_t>(s));
    auto [f, inputs] = make_case(family, rng);
    total.merge(check_gradient(family, f, inputs, rng, opts));
  }
  return total;
}

DetectorConfig tiny_gradcheck_config() {
  DetectorConfig cfg;
  cfg.backbone.in_channels = 4;
  cfg.backbone.stem_channels = 4;
  cfg.backbone.stage_channels = {4, 4, 4, 4};
  cfg.backbone.blocks = {1, 1, 1, 1};
  cfg.backbone.input_policy = InputPolicy::floor;
  cfg.fpn.out_channels = 4;
  cfg.fpn.levels = 6;
  cfg.rfp = RfpConfig::with_branches(3, 4);
  cfg.image_h = cfg.image_w = 16;
  return cfg;
}

GradcheckStats run_model_gradcheck(const DetectorConfig& cfg, int input_hw, int seeds, uint64_t first_seed,
                                   const GradcheckOptions& opts) {
  GradcheckStats total;
  total.family = "detector";
  total.tolerance = opts.tolerance;
  total.max_skip_fraction = opts.max_skip_fraction;
  DetectorConfig c = cfg;
  c.image_h = c.image_w = input_hw;
  for (int s = 0; s < seeds; ++s) {
    const uint64_t seed = first_seed + static_cast<uint64_t>(s);
    std::mt19937_64 rng(seed);
    Detector det(c, seed);
    // Zero-initialised biases are randomised so the check is not at a special point.
    for (auto& p : det.params().all()) {
      std::normal_distribution<double> nd(0.0, 0.1);
      if (p.name.ends_with("/bias")) {
        for (auto& v : p.tensor.mutable_values()) v = static_cast<Real>(nd(rng));
      }
    }
    Tensor x = random_tensor(Shape{1, c.backbone.in_channels, input_hw, input_hw}, rng);
    std::vector<Tensor> inputs{x};
    for (auto& p : det.params().all()) inputs.push_back(p.tensor);

    // Pyramid readout.
    std::vector<std::vector<Real>> w;
    {
      NoGradGuard g;
      for (const auto& f : det.features(x)) w.push_back(random_weights(f.numel(), rng));
    }
    auto features = [&]() {
      auto feats = det.features(x);
      Tensor acc = dot_constant(feats[0], w[0]);
      for (size_t i = 1; i < feats.size(); ++i) acc = add(acc, dot_constant(feats[i], w[i]));
      return acc;
    };
    GradcheckStats a = check_gradient("detector", features, inputs, rng, opts);

    // Detection loss against random ground truth.
    std::uniform_real_distribution<double> pos(0.0, input_hw * 0.5), size(3.0, input_hw * 0.5);
    std::vector<Box> gts;
    for (int i = uniform_int(rng, 1, 2); i > 0; --i) gts.push_back({pos(rng), pos(rng), size(rng), size(rng)});
    const auto anchors = det.anchors();
    std::vector<MatchResult> matches{match_anchors(anchors, gts, c.head.pos_iou, c.head.neg_iou)};
    const LossConfig lc{c.head.loss_lambda, c.head.neg_pos_ratio};
    auto loss = [&]() {
      auto out = det.forward(x);
      return detection_loss(out.cls, out.reg, matches, lc).total;
    };
    GradcheckStats b = check_gradient("detector", loss, inputs, rng, opts);
    total.merge(a);
    total.merge(b);
    total.seeds -= 1;  // two readouts per seed
  }
  return total;
}

}  // namespace rfp
