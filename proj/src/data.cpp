// SPDX-License-Identifier: Apache-2.0
#include "rfp/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>
#include <sstream>

namespace rfp {

namespace {

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Uniform and normal draws built directly on the engine's 64-bit output so the
// stream does not depend on library distribution implementations.
class SceneRng {
 public:
  explicit SceneRng(uint64_t seed) : eng_(seed) {}
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  int integer(int lo, int hi) {  // inclusive
    return lo + static_cast<int>(uniform() * (hi - lo + 1));
  }
  double log_uniform(double lo, double hi) { return std::exp(uniform(std::log(lo), std::log(hi))); }
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }
  bool coin() { return uniform() < 0.5; }

 private:
  std::mt19937_64 eng_;
};

constexpr int kSuper = 3;  // supersampling per axis

class Canvas {
 public:
  Canvas(int size, int channels) : size_(size), channels_(channels), v_(static_cast<size_t>(channels) * size * size, 0.0) {}

  double& at(int c, int y, int x) { return v_[(static_cast<size_t>(c) * size_ + y) * size_ + x]; }

  // Blends `tone` (per channel) into pixels by the covered fraction of kSuper^2 samples.
  template <typename Inside>
  void paint(double x0, double y0, double x1, double y1, const std::vector<double>& tone, Inside inside) {
    const int ix0 = std::max(0, static_cast<int>(std::floor(x0)));
    const int iy0 = std::max(0, static_cast<int>(std::floor(y0)));
    const int ix1 = std::min(size_ - 1, static_cast<int>(std::ceil(x1)));
    const int iy1 = std::min(size_ - 1, static_cast<int>(std::ceil(y1)));
    for (int y = iy0; y <= iy1; ++y) {
      for (int x = ix0; x <= ix1; ++x) {
        int hits = 0;
        for (int sy = 0; sy < kSuper; ++sy) {
          for (int sx = 0; sx < kSuper; ++sx) {
            if (inside(x + (sx + 0.5) / kSuper, y + (sy + 0.5) / kSuper)) ++hits;
          }
        }
        if (!hits) continue;
        const double a = static_cast<double>(hits) / (kSuper * kSuper);
        for (int c = 0; c < channels_; ++c) at(c, y, x) = (1 - a) * at(c, y, x) + a * tone[static_cast<size_t>(c)];
      }
    }
  }

  Image quantize() const {
    Image img{size_, size_, channels_, std::vector<uint8_t>(v_.size())};
    for (size_t i = 0; i < v_.size(); ++i) {
      img.pixels[i] = static_cast<uint8_t>(std::clamp(std::lround(v_[i]), 0L, 255L));
    }
    return img;
  }

 private:
  int size_;
  int channels_;
  std::vector<double> v_;
};

std::vector<double> tone_near(SceneRng& rng, double base, int channels, double jitter) {
  std::vector<double> t(static_cast<size_t>(channels));
  for (auto& v : t) v = std::clamp(base + rng.uniform(-jitter, jitter), 0.0, 255.0);
  return t;
}

// A tone at least `lo` and at most `hi` away from `bg`, on whichever side has room.
double contrasting(SceneRng& rng, double bg, double lo, double hi) {
  const double delta = rng.uniform(lo, hi);
  bool up = rng.coin();
  if (up && bg + delta > 250) up = false;
  if (!up && bg - delta < 5) up = true;
  return std::clamp(up ? bg + delta : bg - delta, 0.0, 255.0);
}

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double dx = bx - ax, dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double qx = ax + t * dx - px, qy = ay + t * dy - py;
  return std::sqrt(qx * qx + qy * qy);
}

void render_scene(const SceneSpec& spec, uint64_t image_seed, Image& image, std::vector<Box>& boxes) {
  SceneRng rng(image_seed);
  const int size = spec.image_size, ch = spec.channels;
  Canvas canvas(size, ch);

  const double bg = rng.uniform(70, 185);
  const double gx = rng.uniform(-0.25, 0.25), gy = rng.uniform(-0.25, 0.25);
  std::vector<double> tint(static_cast<size_t>(ch));
  for (auto& t : tint) t = rng.uniform(-12, 12);
  for (int c = 0; c < ch; ++c)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        canvas.at(c, y, x) = bg + gx * (x - size / 2.0) + gy * (y - size / 2.0) + (ch > 1 ? tint[static_cast<size_t>(c)] : 0.0);

  // Clutter: rectangles and strokes.
  const int clutter_items = spec.clutter > 0 ? rng.integer(0, static_cast<int>(std::lround(6 * spec.clutter))) : 0;
  for (int i = 0; i < clutter_items; ++i) {
    const auto tone = tone_near(rng, contrasting(rng, bg, 35, 90), ch, 6);
    if (rng.uniform() < 0.6) {
      const double w = rng.log_uniform(5, 40), h = rng.log_uniform(5, 40);
      const double x0 = rng.uniform(-w / 2, size - w / 2), y0 = rng.uniform(-h / 2, size - h / 2);
      canvas.paint(x0, y0, x0 + w, y0 + h, tone,
                   [&](double px, double py) { return px >= x0 && px < x0 + w && py >= y0 && py < y0 + h; });
    } else {
      const double ax = rng.uniform(0, size), ay = rng.uniform(0, size);
      const double len = rng.uniform(10, 70), ang = rng.uniform(0, 2 * std::numbers::pi);
      const double bx = ax + len * std::cos(ang), by = ay + len * std::sin(ang);
      const double half = rng.uniform(0.5, 1.8);
      canvas.paint(std::min(ax, bx) - half, std::min(ay, by) - half, std::max(ax, bx) + half,
                   std::max(ay, by) + half, tone,
                   [&](double px, double py) { return segment_distance(px, py, ax, ay, bx, by) <= half; });
    }
  }

  // Faces, non-overlapping, fully inside the image.
  const int target = rng.integer(spec.objects_min, spec.objects_max);
  for (int i = 0; i < target; ++i) {
    for (int attempt = 0; attempt < 50; ++attempt) {
      const double s = rng.log_uniform(spec.min_size, spec.max_size);
      const double r = s / 2;
      const double cx = rng.uniform(r, size - r), cy = rng.uniform(r, size - r);
      Box box{cx - r, cy - r, s, s};
      bool clear = std::all_of(boxes.begin(), boxes.end(), [&](const Box& o) {
        return box.x >= o.x + o.w || o.x >= box.x + box.w || box.y >= o.y + o.h || o.y >= box.y + box.h;
      });
      if (!clear) continue;

      const double upper = contrasting(rng, bg, 45, 90);
      const double lower = std::clamp(upper + (rng.coin() ? 1 : -1) * rng.uniform(15, 35), 0.0, 255.0);
      const double eye = upper > 128 ? upper - rng.uniform(60, 90) : upper + rng.uniform(60, 90);
      const auto up_tone = tone_near(rng, upper, ch, 4);
      const auto low_tone = tone_near(rng, lower, ch, 4);
      const auto eye_tone = tone_near(rng, std::clamp(eye, 0.0, 255.0), ch, 4);
      canvas.paint(cx - r, cy - r, cx + r, cy, up_tone, [&](double px, double py) {
        return py < cy && (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r;
      });
      canvas.paint(cx - r, cy, cx + r, cy + r, low_tone, [&](double px, double py) {
        return py >= cy && (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r;
      });
      const double er = std::max(0.6, 0.14 * r);
      for (double side : {-1.0, 1.0}) {
        const double ex = cx + side * 0.38 * r, ey = cy - 0.22 * r;
        canvas.paint(ex - er, ey - er, ex + er, ey + er, eye_tone, [&](double px, double py) {
          return (px - ex) * (px - ex) + (py - ey) * (py - ey) <= er * er;
        });
      }
      boxes.push_back(box);
      break;
    }
  }

  const double noise = rng.uniform(3, 9);
  for (int c = 0; c < ch; ++c)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) canvas.at(c, y, x) += noise * rng.normal();
  image = canvas.quantize();
}

std::string image_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "synth_%06d", index);
  return buf;
}

std::vector<std::string> split_ws(const std::string& line) {
  std::istringstream is(line);
  return {std::istream_iterator<std::string>(is), std::istream_iterator<std::string>()};
}

bool parse_double(const std::string& s, double& out) {
  try {
    size_t pos = 0;
    out = std::stod(s, &pos);
    return pos == s.size();
  } catch (const std::exception&) {
    return false;
  }
}

// True when the line is entirely numeric with at least `min_fields` fields.
bool numeric_fields(const std::string& line, size_t min_fields, std::vector<double>& out) {
  out.clear();
  for (const auto& tok : split_ws(line)) {
    double v;
    if (!parse_double(tok, v)) return false;
    out.push_back(v);
  }
  return out.size() >= min_fields;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

bool blank(const std::string& s) { return s.find_first_not_of(" \t") == std::string::npos; }

}  // namespace

void SceneSpec::validate() const {
  if (image_size < 8) throw ConfigError("data.image_size must be >= 8");
  if (channels != 1 && channels != 3) throw ConfigError("data.channels must be 1 or 3");
  if (objects_min < 0 || objects_max < objects_min) {
    throw ConfigError("data.objects_min/objects_max must satisfy 0 <= min <= max");
  }
  if (!(min_size >= 2.0) || min_size > max_size) {
    throw ConfigError("data.min_size/max_size must satisfy 2 <= min <= max");
  }
  if (max_size > image_size) {
    throw ConfigError("data.max_size " + std::to_string(max_size) + " does not fit a " +
                      std::to_string(image_size) + "-pixel image");
  }
  if (clutter < 0) throw ConfigError("data.clutter must be >= 0");
}

std::vector<GroundTruthBox> Dataset::ground_truths() const {
  std::vector<GroundTruthBox> out;
  for (size_t i = 0; i < boxes.size(); ++i) {
    for (const auto& b : boxes[i]) out.push_back({b, static_cast<int>(i)});
  }
  return out;
}

Dataset generate_dataset(const SceneSpec& spec, int n_images, int first_index) {
  spec.validate();
  if (n_images < 0) throw ConfigError("image count must be >= 0");
  Dataset ds;
  ds.images.resize(static_cast<size_t>(n_images));
  ds.boxes.resize(static_cast<size_t>(n_images));
  ds.names.resize(static_cast<size_t>(n_images));
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n_images; ++i) {
    const int index = first_index + i;
    const uint64_t image_seed = splitmix64(spec.seed ^ splitmix64(static_cast<uint64_t>(index)));
    render_scene(spec, image_seed, ds.images[static_cast<size_t>(i)], ds.boxes[static_cast<size_t>(i)]);
    ds.names[static_cast<size_t>(i)] = image_name(index);
  }
  return ds;
}

Box hflip_box(const Box& b, int width) { return {width - b.x - b.w, b.y, b.w, b.h}; }

Tensor images_to_tensor(std::span<const Image> images, std::span<const char> flip) {
  if (images.empty()) throw ConfigError("images_to_tensor: empty batch");
  const Image& f = images[0];
  for (const auto& im : images) {
    if (im.height != f.height || im.width != f.width || im.channels != f.channels) {
      throw ConfigError("images_to_tensor: images differ in size");
    }
  }
  const int64_t n = static_cast<int64_t>(images.size());
  std::vector<Real> v(static_cast<size_t>(n * f.channels * f.height * f.width));
  size_t k = 0;
  for (int64_t b = 0; b < n; ++b) {
    const Image& im = images[static_cast<size_t>(b)];
    const bool mirror = !flip.empty() && flip[static_cast<size_t>(b)];
    for (int c = 0; c < im.channels; ++c)
      for (int y = 0; y < im.height; ++y)
        for (int x = 0; x < im.width; ++x)
          v[k++] = (static_cast<Real>(im.at(c, y, mirror ? im.width - 1 - x : x)) - Real(127.5)) / Real(64);
  }
  return Tensor::from(Shape{n, f.channels, f.height, f.width}, std::move(v));
}

void write_pnm(const std::filesystem::path& path, const Image& img, std::span<const std::string> comment) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << (img.channels == 1 ? "P5" : "P6") << '\n';
  for (const auto& c : comment) out << "# " << c << '\n';
  out << img.width << ' ' << img.height << "\n255\n";
  if (img.channels == 1) {
    out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  } else {
    const size_t plane = static_cast<size_t>(img.width) * img.height;
    std::vector<char> inter(plane * 3);
    for (size_t i = 0; i < plane; ++i)
      for (size_t c = 0; c < 3; ++c) inter[i * 3 + c] = static_cast<char>(img.pixels[c * plane + i]);
    out.write(inter.data(), static_cast<std::streamsize>(inter.size()));
  }
  if (!out) throw IoError("write failed: " + path.string());
}

Image read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  auto token = [&]() {
    std::string t;
    char c;
    while (in.get(c)) {
      if (c == '#') {
        std::string rest;
        std::getline(in, rest);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(c);
    }
    return t;
  };
  const std::string magic = token();
  if (magic != "P5" && magic != "P6") throw IoError(path.string() + ": not a binary PGM/PPM");
  Image img;
  try {
    img.width = std::stoi(token());
    img.height = std::stoi(token());
    if (std::stoi(token()) != 255) throw IoError(path.string() + ": maxval must be 255");
  } catch (const std::invalid_argument&) {
    throw IoError(path.string() + ": malformed PNM header");
  }
  img.channels = magic == "P5" ? 1 : 3;
  const size_t plane = static_cast<size_t>(img.width) * img.height;
  std::vector<char> raw(plane * static_cast<size_t>(img.channels));
  in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) throw IoError(path.string() + ": truncated pixel data");
  img.pixels.resize(raw.size());
  for (size_t i = 0; i < plane; ++i)
    for (size_t c = 0; c < static_cast<size_t>(img.channels); ++c)
      img.pixels[c * plane + i] = static_cast<uint8_t>(raw[i * static_cast<size_t>(img.channels) + c]);
  return img;
}

void write_dataset(const std::filesystem::path& dir, const Dataset& ds, std::span<const std::string> header) {
  std::filesystem::create_directories(dir / "images");
  std::ofstream list(dir / "images.txt");
  std::ofstream csv(dir / "annotations.csv");
  if (!list || !csv) throw IoError("cannot write dataset index in " + dir.string());
  for (const auto& h : header) {
    list << "# " << h << '\n';
    csv << "# " << h << '\n';
  }
  csv << "image,x,y,w,h\n";
  char buf[160];
  for (size_t i = 0; i < ds.size(); ++i) {
    const auto& img = ds.images[i];
    write_pnm(dir / "images" / (ds.names[i] + (img.channels == 1 ? ".pgm" : ".ppm")), img, header);
    list << ds.names[i] << '\n';
    for (const auto& b : ds.boxes[i]) {
      std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%.17g,%.17g\n", ds.names[i].c_str(), b.x, b.y, b.w, b.h);
      csv << buf;
    }
  }
}

Dataset read_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  for (const auto& name : read_lines(dir / "images.txt")) {
    if (blank(name) || name[0] == '#') continue;
    auto gray = dir / "images" / (name + ".pgm");
    ds.images.push_back(read_pnm(std::filesystem::exists(gray) ? gray : dir / "images" / (name + ".ppm")));
    ds.names.push_back(name);
    ds.boxes.emplace_back();
  }
  auto lines = read_lines(dir / "annotations.csv");
  size_t first = 0;
  while (first < lines.size() && !lines[first].empty() && lines[first][0] == '#') ++first;
  if (first >= lines.size() || lines[first] != "image,x,y,w,h") {
    throw ParseError("annotations.csv must start with header image,x,y,w,h", static_cast<int>(first + 1));
  }
  for (size_t i = first + 1; i < lines.size(); ++i) {
    if (blank(lines[i])) continue;
    std::vector<std::string> f;
    std::stringstream ss(lines[i]);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    Box b;
    if (f.size() != 5 || !parse_double(f[1], b.x) || !parse_double(f[2], b.y) ||
        !parse_double(f[3], b.w) || !parse_double(f[4], b.h)) {
      throw ParseError("malformed annotation row", static_cast<int>(i + 1));
    }
    auto it = std::find(ds.names.begin(), ds.names.end(), f[0]);
    if (it == ds.names.end()) throw ParseError("annotation for unlisted image " + f[0], static_cast<int>(i + 1));
    ds.boxes[static_cast<size_t>(it - ds.names.begin())].push_back(b);
  }
  return ds;
}

WiderAnnotations read_widerface_annotations(const std::filesystem::path& path) {
  auto lines = read_lines(path);
  WiderAnnotations out;
  size_t i = 0;
  std::vector<double> nums;
  auto skip_blank = [&]() {
    while (i < lines.size() && blank(lines[i])) ++i;
  };
  while (true) {
    skip_blank();
    if (i >= lines.size()) break;
    const std::string image_path = split_ws(lines[i]).front();
    ++i;
    if (i >= lines.size()) throw ParseError("missing face count after " + image_path, static_cast<int>(i));
    double count_d;
    const auto count_tok = split_ws(lines[i]);
    if (count_tok.size() != 1 || !parse_double(count_tok[0], count_d) || count_d < 0 ||
        count_d != std::floor(count_d)) {
      throw ParseError("malformed face count '" + lines[i] + "'", static_cast<int>(i + 1));
    }
    ++i;
    const int count = static_cast<int>(count_d);
    std::vector<Box> boxes;
    for (int k = 0; k < count; ++k, ++i) {
      if (i >= lines.size()) throw ParseError("truncated file: expected " + std::to_string(count) + " boxes for " + image_path, static_cast<int>(i + 1));
      if (!numeric_fields(lines[i], 4, nums)) {
        throw ParseError("malformed box line '" + lines[i] + "'", static_cast<int>(i + 1));
      }
      if (nums[2] <= 0 || nums[3] <= 0) {
        ++out.skipped_zero_size;
        continue;
      }
      boxes.push_back({nums[0], nums[1], nums[2], nums[3]});
    }
    if (count == 0 && i < lines.size() && numeric_fields(lines[i], 4, nums)) ++i;  // placeholder row
    out.paths.push_back(image_path);
    out.boxes.push_back(std::move(boxes));
  }
  return out;
}

void write_detections(const std::filesystem::path& path, std::span<const std::string> names,
                      std::span<const std::vector<Detection>> dets, std::span<const std::string> header) {
  if (names.size() != dets.size()) throw ContractError("write_detections: names/detections size mismatch");
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (const auto& h : header) out << "# " << h << '\n';
  char buf[160];
  for (size_t i = 0; i < names.size(); ++i) {
    out << names[i] << '\n' << dets[i].size() << '\n';
    for (const auto& d : dets[i]) {
      std::snprintf(buf, sizeof buf, "%.3f %.3f %.3f %.3f %.6f\n", d.box.x, d.box.y, d.box.w, d.box.h, d.score);
      out << buf;
    }
  }
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<std::vector<Detection>> read_detections(const std::filesystem::path& path,
                                                    std::vector<std::string>* names) {
  auto lines = read_lines(path);
  std::vector<std::vector<Detection>> out;
  std::vector<double> nums;
  size_t i = 0;
  while (i < lines.size() && !lines[i].empty() && lines[i][0] == '#') ++i;
  while (true) {
    while (i < lines.size() && blank(lines[i])) ++i;
    if (i >= lines.size()) break;
    if (names) names->push_back(split_ws(lines[i]).front());
    ++i;
    double count_d;
    const auto tok = i < lines.size() ? split_ws(lines[i]) : std::vector<std::string>{};
    if (tok.size() != 1 || !parse_double(tok[0], count_d) || count_d < 0) {
      throw ParseError("malformed detection count", static_cast<int>(i + 1));
    }
    ++i;
    std::vector<Detection> dets;
    const int image = static_cast<int>(out.size());
    for (int k = 0; k < static_cast<int>(count_d); ++k, ++i) {
      if (i >= lines.size() || !numeric_fields(lines[i], 5, nums)) {
        throw ParseError("malformed or missing detection line", static_cast<int>(i + 1));
      }
      dets.push_back({{nums[0], nums[1], nums[2], nums[3]}, nums[4], image});
    }
    out.push_back(std::move(dets));
  }
  return out;
}

}  // namespace rfp
