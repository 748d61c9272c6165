/*
 * Copyright 2026 The lensnet Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *      http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "lensnet/autograd.hpp"

namespace lensnet {

/// H x W x C interleaved intensities, nominally in [0, 1].
class ImageTensor {
 public:
  ImageTensor() = default;
  ImageTensor(int height, int width, int channels = 3, double fill = 0.0);
  ImageTensor(int height, int width, int channels, std::vector<double> values);

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  bool empty() const { return data_.empty(); }
  std::size_t size() const { return data_.size(); }

  double& at(int y, int x, int c) { return data_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c]; }
  double at(int y, int x, int c) const { return data_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c]; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  double min_value() const;
  double max_value() const;
  /// Clamps every value into [lo, hi] in place.
  void clamp(double lo = 0.0, double hi = 1.0);

  /// Channel-planar copy (C x H x W).
  std::vector<double> to_planar() const;
  static ImageTensor from_planar(std::span<const double> planar, int height, int width, int channels);

  bool operator==(const ImageTensor& other) const = default;

 private:
  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  std::vector<double> data_;
};

/// Decodes PNG/JPEG/BMP/PPM to RGB in [0, 1]. Throws IoError when unreadable.
ImageTensor read_image(const std::filesystem::path& path);
/// Encodes by extension after clamping to [0, 1] and quantizing to 8 bits.
void write_image(const ImageTensor& image, const std::filesystem::path& path);

/// Half-pixel-center bilinear resize, no antialiasing.
ImageTensor resize_bilinear(const ImageTensor& image, int height, int width);

/// Packs equally sized images into an N x C x H x W tensor.
ag::Tensor to_batch(std::span<const ImageTensor> images);
ImageTensor from_batch(const ag::Tensor& batch, std::int64_t index);

/// FNV-1a over the raw value bytes and dimensions.
std::uint64_t content_hash(const ImageTensor& image);

}  // namespace lensnet
