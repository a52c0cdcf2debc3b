// Copyright 2026 The Serval Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "serval/common.hpp"
#include "serval/image.hpp"
#include "serval/manifest.hpp"
#include "serval/rng.hpp"
#include "serval/tensor.hpp"

namespace serval::data {

struct Batch {
  nn::Tensor<float> images;  // N x 3 x S x S, values in [0, 1]
  std::vector<int> labels;
  std::vector<std::string> ids;
};

/// One epoch over one split: a seeded permutation of the split's records
/// delivered in batches, the final batch short when the split size is not
/// a multiple of batch_size. Images follow the manifest's pipeline:
/// crop-at-load when flagged, then bilinear resize to target_side.
class BatchIterator {
 public:
  BatchIterator(const Manifest& manifest, Split split, int batch_size,
                int target_side, std::uint64_t shuffle_seed,
                std::uint64_t epoch, bool shuffle = true)
      : manifest_(manifest), batch_size_(batch_size),
        target_side_(target_side) {
    if (batch_size < 1) {
      throw ConfigError("batch: batch_size must be >= 1");
    }
    if (target_side < 1) {
      throw ConfigError("batch: target_side must be >= 1");
    }
    for (std::size_t i = 0; i < manifest.records.size(); ++i) {
      auto it = manifest.splits.find(manifest.records[i].id);
      if (it != manifest.splits.end() && it->second == split) {
        order_.push_back(i);
      }
    }
    if (order_.empty()) {
      throw DataError("batch: split '" + split_to_string(split) +
                      "' has no records");
    }
    if (shuffle) {
      Rng rng(sub_seed(shuffle_seed, "shuffle", epoch));
      rng.shuffle(order_);
    }
  }

  std::size_t size() const { return order_.size(); }

  std::optional<Batch> next() {
    if (cursor_ >= order_.size()) return std::nullopt;
    std::size_t n = std::min(static_cast<std::size_t>(batch_size_),
                             order_.size() - cursor_);
    Batch batch;
    batch.images = nn::Tensor<float>::zeros(
        {static_cast<int>(n), 3, target_side_, target_side_});
    auto pixels = batch.images.data();
    std::size_t plane = static_cast<std::size_t>(target_side_) * target_side_;
    for (std::size_t b = 0; b < n; ++b) {
      const auto& r = manifest_.records[order_[cursor_ + b]];
      Image im;
      try {
        im = load_ppm(manifest_.resolve_uri(r));
        if (manifest_.crop_at_load && r.crop_box) {
          im = crop_image(im, r.crop_box->x, r.crop_box->y, r.crop_box->w,
                          r.crop_box->h);
        }
        im = resize_image(im, target_side_);
      } catch (const Error& e) {
        throw DataError("batch: record '" + r.id + "': " + e.what());
      }
      for (std::size_t p = 0; p < plane; ++p) {
        for (int c = 0; c < 3; ++c) {
          pixels[(b * 3 + static_cast<std::size_t>(c)) * plane + p] =
              static_cast<float>(im.pixels[p * 3 + c]) / 255.0f;
        }
      }
      batch.labels.push_back(manifest_.class_index(r.species));
      batch.ids.push_back(r.id);
    }
    cursor_ += n;
    return batch;
  }

 private:
  const Manifest& manifest_;
  int batch_size_;
  int target_side_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

}  // namespace serval::data
