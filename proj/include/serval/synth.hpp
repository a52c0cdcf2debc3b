// Copyright 2026 The Serval Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "serval/common.hpp"
#include "serval/image.hpp"
#include "serval/manifest.hpp"
#include "serval/rng.hpp"

namespace serval::data {

/// Procedural camera-trap scenes: one shape/hue/texture motif per class
/// on a noisy savanna background, degraded by the classic field
/// conditions. Rates are probabilities; empty_frame, far_small and
/// grayscale_night apply per capture event, the rest per image.
struct SynthSceneConfig {
  int num_classes = 10;
  int image_side = 32;
  int train_per_class = 100;
  int eval_per_class = 40;
  double empty_frame = 0.0;
  double occlusion = 0.0;
  double blur = 0.0;
  double overexposure = 0.0;
  double partial_body = 0.0;
  double grayscale_night = 0.0;
  double far_small = 0.0;
  std::uint64_t seed = 0;
};

inline constexpr const char* kEmptyClass = "empty";

inline void validate_synth_config(const SynthSceneConfig& c) {
  if (c.num_classes < 1) {
    throw ConfigError("synth: num_classes must be >= 1, got " +
                      std::to_string(c.num_classes));
  }
  if (c.image_side < 8) {
    throw ConfigError("synth: image_side must be >= 8");
  }
  if (c.train_per_class < 0 || c.eval_per_class < 0) {
    throw ConfigError("synth: per-class counts must be >= 0");
  }
  for (double rate : {c.empty_frame, c.occlusion, c.blur, c.overexposure,
                      c.partial_body, c.grayscale_night, c.far_small}) {
    if (rate < 0.0 || rate > 1.0) {
      throw ConfigError("synth: condition rates must lie in [0, 1]");
    }
  }
}

inline std::string synth_class_name(int index) {
  std::string n = std::to_string(index);
  while (n.size() < 2) n = "0" + n;
  return "species-" + n;
}

namespace detail {

struct Rgb {
  std::uint8_t r, g, b;
};

inline Rgb hsv_to_rgb(double h, double s, double v) {
  double c = v * s;
  double hp = h / 60.0;
  double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) {
    r = c, g = x;
  } else if (hp < 2) {
    r = x, g = c;
  } else if (hp < 3) {
    g = c, b = x;
  } else if (hp < 4) {
    g = x, b = c;
  } else if (hp < 5) {
    r = x, b = c;
  } else {
    r = c, b = x;
  }
  double m = v - c;
  auto q = [&](double t) {
    return static_cast<std::uint8_t>(std::lround(255.0 * (t + m)));
  };
  return {q(r), q(g), q(b)};
}

/// Class k's look: golden-ratio-spaced hue, one of five silhouettes, one
/// of three surface textures.
struct Motif {
  Rgb color;
  int shape;    // 0 disc, 1 ring, 2 triangle, 3 rect, 4 cross
  int texture;  // 0 solid, 1 stripes, 2 checker
};

inline Motif class_motif(int k) {
  double hue = std::fmod(static_cast<double>(k) * 0.618033988749895, 1.0);
  Motif m;
  m.color = hsv_to_rgb(hue * 360.0, 0.65, 0.85);
  m.shape = k % 5;
  m.texture = (k / 5) % 3;
  return m;
}

inline bool inside_shape(const Motif& m, double dx, double dy, double size) {
  double r = size * 0.5;
  switch (m.shape) {
    case 0:
      return dx * dx + dy * dy <= r * r;
    case 1: {
      double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.35 * r * r;
    }
    case 2:
      return dy >= -r && dy <= r &&
             std::abs(dx) <= (dy + r) * 0.5;  // upward wedge
    case 3:
      return std::abs(dx) <= r && std::abs(dy) <= 0.6 * r;
    default:
      return (std::abs(dx) <= 0.3 * r && std::abs(dy) <= r) ||
             (std::abs(dy) <= 0.3 * r && std::abs(dx) <= r);
  }
}

struct DrawBounds {
  int x0 = 0, y0 = 0, x1 = -1, y1 = -1;  // inclusive; empty when x1 < x0
  bool any() const { return x1 >= x0 && y1 >= y0; }
};

inline DrawBounds draw_motif(Image& im, const Motif& m, double cx, double cy,
                             double size) {
  DrawBounds b;
  b.x0 = im.width;
  b.y0 = im.height;
  for (int y = 0; y < im.height; ++y) {
    for (int x = 0; x < im.width; ++x) {
      double dx = x - cx, dy = y - cy;
      if (!inside_shape(m, dx, dy, size)) continue;
      double shade = 1.0;
      if (m.texture == 1 && static_cast<int>(std::floor(dy / 2.0)) % 2 == 0) {
        shade = 0.55;  // horizontal stripes
      } else if (m.texture == 2 &&
                 (static_cast<int>(std::floor(dx / 2.0)) +
                  static_cast<int>(std::floor(dy / 2.0))) % 2 == 0) {
        shade = 0.55;  // checker
      }
      im.at(y, x, 0) = static_cast<std::uint8_t>(m.color.r * shade);
      im.at(y, x, 1) = static_cast<std::uint8_t>(m.color.g * shade);
      im.at(y, x, 2) = static_cast<std::uint8_t>(m.color.b * shade);
      b.x0 = std::min(b.x0, x);
      b.y0 = std::min(b.y0, y);
      b.x1 = std::max(b.x1, x);
      b.y1 = std::max(b.y1, y);
    }
  }
  return b;
}

inline void paint_background(Image& im, Rng& rng) {
  for (int y = 0; y < im.height; ++y) {
    double t = static_cast<double>(y) / im.height;
    // Dusty sky into dry grass.
    double r = 175.0 - 55.0 * t, g = 170.0 - 60.0 * t, b = 140.0 - 75.0 * t;
    for (int x = 0; x < im.width; ++x) {
      double n = rng.uniform(-14.0, 14.0);
      im.at(y, x, 0) =
          static_cast<std::uint8_t>(std::clamp(r + n, 0.0, 255.0));
      im.at(y, x, 1) =
          static_cast<std::uint8_t>(std::clamp(g + n, 0.0, 255.0));
      im.at(y, x, 2) =
          static_cast<std::uint8_t>(std::clamp(b + n * 0.5, 0.0, 255.0));
    }
  }
}

inline void apply_occlusion(Image& im, Rng& rng) {
  int strips = 2 + static_cast<int>(rng.uniform_index(3));
  int w = std::max(1, im.width / 14);
  for (int s = 0; s < strips; ++s) {
    int x0 = static_cast<int>(rng.uniform_index(
        static_cast<std::size_t>(std::max(1, im.width - w))));
    for (int y = 0; y < im.height; ++y) {
      for (int x = x0; x < x0 + w; ++x) {
        im.at(y, x, 0) = 52;
        im.at(y, x, 1) = 64;
        im.at(y, x, 2) = 28;
      }
    }
  }
}

inline void apply_box_blur(Image& im) {
  Image src = im;
  for (int y = 0; y < im.height; ++y) {
    for (int x = 0; x < im.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        int acc = 0, cnt = 0;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            int yy = y + dy, xx = x + dx;
            if (yy < 0 || yy >= im.height || xx < 0 || xx >= im.width) {
              continue;
            }
            acc += src.at(yy, xx, c);
            ++cnt;
          }
        }
        im.at(y, x, c) = static_cast<std::uint8_t>(acc / cnt);
      }
    }
  }
}

inline void apply_overexposure(Image& im, Rng& rng) {
  double cx = rng.uniform(0.2, 0.8) * im.width;
  double cy = rng.uniform(0.2, 0.8) * im.height;
  double radius = im.width / 2.2;
  for (int y = 0; y < im.height; ++y) {
    for (int x = 0; x < im.width; ++x) {
      double d = std::hypot(x - cx, y - cy);
      if (d > radius) continue;
      double t = 0.85 * (1.0 - d / radius) + 0.15;
      for (int c = 0; c < 3; ++c) {
        double v = im.at(y, x, c) * (1.0 - t) + 255.0 * t;
        im.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
      }
    }
  }
}

inline void apply_night(Image& im) {
  for (int y = 0; y < im.height; ++y) {
    for (int x = 0; x < im.width; ++x) {
      double luma = 0.299 * im.at(y, x, 0) + 0.587 * im.at(y, x, 1) +
                    0.114 * im.at(y, x, 2);
      auto v = static_cast<std::uint8_t>(std::clamp(luma * 0.55, 0.0, 255.0));
      im.at(y, x, 0) = v;
      im.at(y, x, 1) = v;
      im.at(y, x, 2) = v;
    }
  }
}

}  // namespace detail

/// Generates the image files under `out_dir`/images plus the manifest
/// describing them. Byte-deterministic: the same (config, out_dir-
/// independent) seed reproduces identical pixels and records.
inline Manifest synth_generate(const SynthSceneConfig& cfg,
                               const std::string& out_dir) {
  validate_synth_config(cfg);
  std::filesystem::create_directories(
      std::filesystem::path(out_dir) / "images");

  Manifest m;
  m.base_dir = out_dir;
  for (int k = 0; k < cfg.num_classes; ++k) {
    m.class_table.push_back(synth_class_name(k));
  }
  bool with_empty = cfg.empty_frame > 0.0;
  if (with_empty) m.class_table.push_back(kEmptyClass);
  m.provenance =
      "synthetic camera-trap scenes, seed " + std::to_string(cfg.seed);

  int side = cfg.image_side;
  for (int k = 0; k < cfg.num_classes; ++k) {
    auto motif = detail::class_motif(k);
    std::string cls = synth_class_name(k);
    for (Split split : {Split::Train, Split::Eval}) {
      std::string split_name = split_to_string(split);
      int remaining =
          split == Split::Train ? cfg.train_per_class : cfg.eval_per_class;
      int event_no = 0;
      while (remaining > 0) {
        Rng ev(sub_seed(cfg.seed, "synth." + cls + "." + split_name,
                        static_cast<std::uint64_t>(event_no)));
        int burst =
            std::min(remaining, 1 + static_cast<int>(ev.uniform_index(3)));
        bool empty = ev.bernoulli(cfg.empty_frame);
        bool far = !empty && ev.bernoulli(cfg.far_small);
        bool night = ev.bernoulli(cfg.grayscale_night);
        double base_size = far ? side / 7.5 : side / 2.6;
        double cx = ev.uniform(0.3, 0.7) * side;
        double cy = ev.uniform(0.35, 0.75) * side;

        std::string event_id =
            cls + "-" + split_name + "-e" + std::to_string(event_no);
        for (int i = 0; i < burst; ++i) {
          SampleRecord r;
          r.id = event_id + "-" + std::to_string(i);
          r.uri = "images/" + r.id + ".ppm";
          r.capture_event = event_id;
          r.burst_index = i;
          r.species = empty ? kEmptyClass : cls;
          r.foreground = !empty && !far;
          r.grayscale = night;

          Image im;
          im.width = side;
          im.height = side;
          im.pixels.resize(static_cast<std::size_t>(side) * side * 3);
          detail::paint_background(im, ev);
          if (!empty) {
            // The subject drifts a little between burst frames.
            double jx = ev.uniform(-0.06, 0.06) * side;
            double jy = ev.uniform(-0.04, 0.04) * side;
            double px = cx + jx, py = cy + jy;
            double size = base_size;
            if (ev.bernoulli(cfg.partial_body)) {
              // Push the subject mostly out of frame.
              px = ev.bernoulli(0.5) ? -0.15 * size : side - 1 + 0.15 * size;
            }
            auto bounds = detail::draw_motif(im, motif, px, py, size);
            if (bounds.any()) {
              int bx = std::max(0, bounds.x0 - 1);
              int by = std::max(0, bounds.y0 - 1);
              int bw = std::min(side, bounds.x1 + 2) - bx;
              int bh = std::min(side, bounds.y1 + 2) - by;
              r.crop_box = CropBox{bx, by, bw, bh};
            } else {
              r.foreground = false;  // subject fully cropped away
            }
          }
          if (ev.bernoulli(cfg.occlusion)) detail::apply_occlusion(im, ev);
          if (ev.bernoulli(cfg.overexposure)) {
            detail::apply_overexposure(im, ev);
          }
          if (ev.bernoulli(cfg.blur)) detail::apply_box_blur(im);
          if (night) detail::apply_night(im);

          save_ppm(im, m.resolve_uri(r));
          m.splits[r.id] = split;
          m.records.push_back(std::move(r));
        }
        remaining -= burst;
        ++event_no;
      }
    }
  }
  return m;
}

}  // namespace serval::data
