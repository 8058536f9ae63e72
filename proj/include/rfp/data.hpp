// SPDX-License-Identifier: Apache-2.0
//
// Deterministic synthetic detection scenes and dataset file formats.
//
// Objects are "faces": a disc whose upper and lower halves differ in tone, with
// two eye dots. Clutter is filled rectangles and straight strokes. Object sizes
// are log-uniform so one scene mixes several pyramid levels.
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "rfp/detection.hpp"
#include "rfp/tensor.hpp"

namespace rfp {

/// 8-bit image, channel-planar (C x H x W).
struct Image {
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<uint8_t> pixels;

  uint8_t at(int c, int y, int x) const {
    return pixels[(static_cast<size_t>(c) * height + y) * width + x];
  }
  friend bool operator==(const Image&, const Image&) = default;
};

struct SceneSpec {
  int image_size = 128;
  int channels = 1;
  int objects_min = 1;
  int objects_max = 3;
  double min_size = 8;   // object side range in pixels, log-uniform
  double max_size = 96;
  double clutter = 1.0;  // expected clutter items per image is 3 * clutter
  uint64_t seed = 1;

  void validate() const;
};

struct Dataset {
  std::vector<std::string> names;
  std::vector<Image> images;
  std::vector<std::vector<Box>> boxes;

  size_t size() const { return images.size(); }
  std::vector<GroundTruthBox> ground_truths() const;
};

/// Images [first_index, first_index + n). Image i depends only on (seed, i).
Dataset generate_dataset(const SceneSpec& spec, int n_images, int first_index = 0);

/// Batch tensor [N, C, H, W] with pixels mapped to (v - 127.5) / 64.
/// `flip[i]` mirrors image i horizontally (empty = none).
Tensor images_to_tensor(std::span<const Image> images, std::span<const char> flip = {});
Box hflip_box(const Box& b, int width);

// Portable graymap (P5) for one channel, pixmap (P6) for three; binary, maxval 255.
// `comment` lines are written as "# ..." header comments.
void write_pnm(const std::filesystem::path& path, const Image& img,
               std::span<const std::string> comment = {});
Image read_pnm(const std::filesystem::path& path);

// Dataset directory: <dir>/images/<name>.pgm|ppm plus <dir>/annotations.csv with
// header "image,x,y,w,h" and one row per box (images without boxes get no row
// but are listed in <dir>/images.txt, one name per line, defining order).
// Both text files may open with "# ..." comment lines, which readers skip.
void write_dataset(const std::filesystem::path& dir, const Dataset& ds,
                   std::span<const std::string> header = {});
Dataset read_dataset(const std::filesystem::path& dir);

struct WiderAnnotations {
  std::vector<std::string> paths;
  std::vector<std::vector<Box>> boxes;
  int skipped_zero_size = 0;
};

/// WIDER FACE ground-truth text: path line, count line, then `count` lines
/// "x y w h [attributes...]". A count of 0 is followed by one placeholder line.
WiderAnnotations read_widerface_annotations(const std::filesystem::path& path);

/// Submission format: per image a path line, a count line, then "x y w h score".
/// Optional leading "# ..." header lines are skipped by the reader.
void write_detections(const std::filesystem::path& path, std::span<const std::string> names,
                      std::span<const std::vector<Detection>> dets,
                      std::span<const std::string> header = {});
std::vector<std::vector<Detection>> read_detections(const std::filesystem::path& path,
                                                    std::vector<std::string>* names = nullptr);

}  // namespace rfp
