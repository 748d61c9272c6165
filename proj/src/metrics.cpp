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

#include "lensnet/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "lensnet/errors.hpp"

namespace lensnet {

double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

namespace {

std::vector<std::size_t> confidence_order(std::span<const Detection> detections) {
  std::vector<std::size_t> order(detections.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return detections[a].confidence > detections[b].confidence; });
  return order;
}

}  // namespace

MatchResult match_detections(std::span<const Detection> detections, std::span<const Box> ground_truths, double tau) {
  MatchResult r;
  r.true_positive.assign(detections.size(), false);
  r.matched_gt.assign(detections.size(), -1);
  std::vector<bool> taken(ground_truths.size(), false);
  for (std::size_t d : confidence_order(detections)) {
    int best = -1;
    double best_iou = tau;
    for (std::size_t g = 0; g < ground_truths.size(); ++g) {
      if (taken[g]) continue;
      const double v = iou(detections[d].box, ground_truths[g]);
      if (v >= best_iou && (best < 0 || v > best_iou)) {
        best = static_cast<int>(g);
        best_iou = v;
      }
    }
    if (best >= 0) {
      taken[best] = true;
      r.true_positive[d] = true;
      r.matched_gt[d] = best;
    }
  }
  r.unmatched_gt = static_cast<int>(std::count(taken.begin(), taken.end(), false));
  return r;
}

ApResult average_precision(const DetectionsByImage& detections, const BoxesByImage& ground_truths, double tau,
                           ApConvention convention) {
  if (detections.size() != ground_truths.size())
    throw ValidationError("detections and ground truths cover different image counts");
  std::size_t total_gt = 0;
  for (const auto& g : ground_truths) total_gt += g.size();
  if (total_gt == 0) return {0.0, true};

  struct Scored {
    double confidence;
    bool tp;
  };
  std::vector<Scored> scored;
  for (std::size_t i = 0; i < detections.size(); ++i) {
    const auto m = match_detections(detections[i], ground_truths[i], tau);
    for (std::size_t d = 0; d < detections[i].size(); ++d)
      scored.push_back({detections[i][d].confidence, static_cast<bool>(m.true_positive[d])});
  }
  std::stable_sort(scored.begin(), scored.end(),
                   [](const Scored& a, const Scored& b) { return a.confidence > b.confidence; });

  std::vector<double> precision;
  std::vector<double> recall;
  double tp = 0;
  double fp = 0;
  for (const auto& s : scored) {
    (s.tp ? tp : fp) += 1;
    precision.push_back(tp / (tp + fp));
    recall.push_back(tp / static_cast<double>(total_gt));
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);

  double ap = 0.0;
  if (convention == ApConvention::coco101) {
    for (int k = 0; k <= 100; ++k) {
      const double r = k / 100.0;
      auto it = std::lower_bound(recall.begin(), recall.end(), r);
      if (it != recall.end()) ap += precision[static_cast<std::size_t>(it - recall.begin())];
    }
    ap /= 101.0;
  } else {
    double prev = 0.0;
    for (std::size_t i = 0; i < recall.size(); ++i) {
      ap += (recall[i] - prev) * precision[i];
      prev = recall[i];
    }
  }
  return {ap, false};
}

ApResult average_precision(std::span<const Detection> detections, std::span<const Box> ground_truths, double tau,
                           ApConvention convention) {
  DetectionsByImage d{std::vector<Detection>(detections.begin(), detections.end())};
  BoxesByImage g{std::vector<Box>(ground_truths.begin(), ground_truths.end())};
  return average_precision(d, g, tau, convention);
}

std::vector<double> coco_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

double map_at(const DetectionsByImage& detections, const BoxesByImage& ground_truths,
              std::span<const double> thresholds, ApConvention convention) {
  if (thresholds.empty()) throw ValidationError("map_at needs at least one threshold");
  double total = 0.0;
  for (double t : thresholds) total += average_precision(detections, ground_truths, t, convention).ap;
  return total / static_cast<double>(thresholds.size());
}

DetectionSummary evaluate_detections(const DetectionsByImage& detections, const BoxesByImage& ground_truths) {
  const std::vector<double> fifty{0.5};
  const auto all = coco_thresholds();
  return {map_at(detections, ground_truths, fifty), map_at(detections, ground_truths, all)};
}

ClassReport classification_report(std::span<const int> predictions, std::span<const int> targets,
                                  const ClassList& classes, bool strict_zero) {
  if (predictions.size() != targets.size()) throw ValidationError("prediction and target counts differ");
  if (predictions.empty()) throw ValidationError("classification_report of an empty input");
  const auto n = static_cast<int>(classes.size());
  std::vector<std::int64_t> tp(n, 0), predicted(n, 0), support(n, 0);
  std::int64_t correct = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const int p = predictions[i];
    const int t = targets[i];
    if (p < 0 || p >= n || t < 0 || t >= n) throw ValidationError("class index out of range");
    ++predicted[p];
    ++support[t];
    if (p == t) {
      ++tp[p];
      ++correct;
    }
  }
  ClassReport r;
  double psum = 0;
  double rsum = 0;
  int pcount = 0;
  int rcount = 0;
  for (int c = 0; c < n; ++c) {
    ClassMetrics m;
    m.name = classes.name(c);
    m.support = support[c];
    m.predicted = predicted[c];
    m.precision_defined = predicted[c] > 0;
    m.recall_defined = support[c] > 0;
    m.precision = m.precision_defined ? static_cast<double>(tp[c]) / predicted[c] : 0.0;
    m.recall = m.recall_defined ? static_cast<double>(tp[c]) / support[c] : 0.0;
    const bool present = support[c] > 0 || predicted[c] > 0;
    if (m.precision_defined || (strict_zero && present)) {
      psum += m.precision;
      ++pcount;
    } else {
      ++r.excluded_from_precision;
    }
    if (m.recall_defined || (strict_zero && present)) {
      rsum += m.recall;
      ++rcount;
    } else {
      ++r.excluded_from_recall;
    }
    r.per_class.push_back(m);
  }
  r.macro_precision = pcount ? psum / pcount : 0.0;
  r.macro_recall = rcount ? rsum / rcount : 0.0;
  r.accuracy = static_cast<double>(correct) / static_cast<double>(predictions.size());
  return r;
}

nlohmann::json to_json(const ClassReport& report) {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& m : report.per_class) {
    per.push_back({{"class", m.name},
                   {"precision", m.precision_defined ? nlohmann::json(m.precision) : nlohmann::json(nullptr)},
                   {"recall", m.recall_defined ? nlohmann::json(m.recall) : nlohmann::json(nullptr)},
                   {"support", m.support},
                   {"predicted", m.predicted}});
  }
  return {{"per_class", per},
          {"macro_precision", report.macro_precision},
          {"macro_recall", report.macro_recall},
          {"accuracy", report.accuracy},
          {"excluded_from_precision", report.excluded_from_precision},
          {"excluded_from_recall", report.excluded_from_recall}};
}

std::string format_report_table(const ClassReport& report) {
  std::size_t width = 5;
  for (const auto& m : report.per_class) width = std::max(width, m.name.size());
  std::ostringstream out;
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%-*s  %13s  %10s  %8s\n", static_cast<int>(width), "class", "precision (%)",
                "recall (%)", "support");
  out << buf;
  auto pct = [](bool defined, double v) {
    char b[32];
    if (defined)
      std::snprintf(b, sizeof(b), "%.2f", 100.0 * v);
    else
      std::snprintf(b, sizeof(b), "-");
    return std::string(b);
  };
  for (const auto& m : report.per_class) {
    std::snprintf(buf, sizeof(buf), "%-*s  %13s  %10s  %8lld\n", static_cast<int>(width), m.name.c_str(),
                  pct(m.precision_defined, m.precision).c_str(), pct(m.recall_defined, m.recall).c_str(),
                  static_cast<long long>(m.support));
    out << buf;
  }
  std::snprintf(buf, sizeof(buf), "macro precision %.2f%%  macro recall %.2f%%  accuracy %.2f%%\n",
                100 * report.macro_precision, 100 * report.macro_recall, 100 * report.accuracy);
  out << buf;
  return out.str();
}

}  // namespace lensnet
