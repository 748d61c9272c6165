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

#include "lensnet/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "lensnet/errors.hpp"

namespace lensnet {

ImageTensor::ImageTensor(int height, int width, int channels, double fill)
    : height_(height), width_(width), channels_(channels) {
  if (height < 0 || width < 0 || channels <= 0) throw ValidationError("invalid image dimensions");
  data_.assign(static_cast<std::size_t>(height) * width * channels, fill);
}

ImageTensor::ImageTensor(int height, int width, int channels, std::vector<double> values)
    : height_(height), width_(width), channels_(channels), data_(std::move(values)) {
  if (height < 0 || width < 0 || channels <= 0) throw ValidationError("invalid image dimensions");
  if (data_.size() != static_cast<std::size_t>(height) * width * channels)
    throw ValidationError("image value count does not match dimensions");
}

double ImageTensor::min_value() const {
  return data_.empty() ? 0.0 : *std::min_element(data_.begin(), data_.end());
}

double ImageTensor::max_value() const {
  return data_.empty() ? 0.0 : *std::max_element(data_.begin(), data_.end());
}

void ImageTensor::clamp(double lo, double hi) {
  for (auto& v : data_) v = std::max(lo, std::min(v, hi));
}

std::vector<double> ImageTensor::to_planar() const {
  std::vector<double> out(data_.size());
  const std::size_t plane = static_cast<std::size_t>(height_) * width_;
  for (std::size_t p = 0; p < plane; ++p)
    for (int c = 0; c < channels_; ++c) out[c * plane + p] = data_[p * channels_ + c];
  return out;
}

ImageTensor ImageTensor::from_planar(std::span<const double> planar, int height, int width, int channels) {
  ImageTensor img(height, width, channels);
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  if (planar.size() != plane * channels) throw ValidationError("planar buffer size mismatch");
  for (std::size_t p = 0; p < plane; ++p)
    for (int c = 0; c < channels; ++c) img.data_[p * channels + c] = planar[c * plane + p];
  return img;
}

ImageTensor read_image(const std::filesystem::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw IoError("cannot read image " + path.string());
  ImageTensor img(bgr.rows, bgr.cols, 3);
  for (int y = 0; y < bgr.rows; ++y) {
    const auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < bgr.cols; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = row[x][2 - c] / 255.0;
  }
  return img;
}

void write_image(const ImageTensor& image, const std::filesystem::path& path) {
  if (image.channels() != 3) throw ValidationError("write_image expects 3 channels");
  cv::Mat bgr(image.height(), image.width(), CV_8UC3);
  for (int y = 0; y < image.height(); ++y) {
    auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < image.width(); ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(image.at(y, x, c), 0.0, 1.0);
        row[x][2 - c] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), bgr)) throw IoError("cannot write image " + path.string());
}

ImageTensor resize_bilinear(const ImageTensor& image, int height, int width) {
  if (image.empty()) throw ValidationError("cannot resize an empty image");
  if (height == image.height() && width == image.width()) return image;
  ag::NoGradGuard no_grad;
  auto planar = ag::Tensor::from({1, image.channels(), image.height(), image.width()}, image.to_planar());
  auto out = ag::resize_bilinear(planar, height, width);
  return ImageTensor::from_planar(out.data(), height, width, image.channels());
}

ag::Tensor to_batch(std::span<const ImageTensor> images) {
  if (images.empty()) throw ValidationError("empty image batch");
  const int h = images[0].height();
  const int w = images[0].width();
  const int c = images[0].channels();
  std::vector<double> values;
  values.reserve(images.size() * images[0].size());
  for (const auto& img : images) {
    if (img.height() != h || img.width() != w || img.channels() != c)
      throw ValidationError("batch images must share dimensions");
    const auto planar = img.to_planar();
    values.insert(values.end(), planar.begin(), planar.end());
  }
  return ag::Tensor::from({static_cast<std::int64_t>(images.size()), c, h, w}, std::move(values));
}

ImageTensor from_batch(const ag::Tensor& batch, std::int64_t index) {
  const auto c = static_cast<int>(batch.dim(1));
  const auto h = static_cast<int>(batch.dim(2));
  const auto w = static_cast<int>(batch.dim(3));
  const std::size_t stride = static_cast<std::size_t>(c) * h * w;
  return ImageTensor::from_planar(batch.data().subspan(index * stride, stride), h, w, c);
}

std::uint64_t content_hash(const ImageTensor& image) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* bytes, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  const int dims[3] = {image.height(), image.width(), image.channels()};
  mix(dims, sizeof(dims));
  mix(image.values().data(), image.size() * sizeof(double));
  return h;
}

}  // namespace lensnet
