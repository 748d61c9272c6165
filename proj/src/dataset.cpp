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

#include "lensnet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "lensnet/errors.hpp"

namespace lensnet {

using nlohmann::json;

// ---- ClassList ----

ClassList::ClassList(std::vector<std::string> names) : names_(std::move(names)) {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i].empty()) throw ValidationError("empty class name at index " + std::to_string(i));
    if (!index_.emplace(names_[i], i).second) throw ValidationError("duplicate class name '" + names_[i] + "'");
  }
}

ClassList ClassList::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open class list " + path.string());
  std::vector<std::string> names;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t')) line.pop_back();
    if (!line.empty()) names.push_back(line);
  }
  return ClassList(std::move(names));
}

void ClassList::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write class list " + path.string());
  for (const auto& n : names_) out << n << '\n';
}

ClassList ClassList::from_records(std::span<const AnnotationRecord> records) {
  std::vector<std::string> names;
  std::set<std::string> seen;
  for (const auto& r : records)
    for (const auto& inst : r.instances)
      if (seen.insert(inst.class_name).second) names.push_back(inst.class_name);
  return ClassList(std::move(names));
}

std::optional<std::size_t> ClassList::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

// ---- manifest ----

namespace {

void check_keys(const json& obj, std::initializer_list<const char*> allowed, std::size_t line,
                const std::string& where) {
  for (const auto& [key, _] : obj.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ManifestError(line, where + key, "unexpected field");
  }
}

const json& require(const json& obj, const char* key, std::size_t line, const std::string& where) {
  if (!obj.contains(key)) throw ManifestError(line, where + key, "missing required field");
  return obj.at(key);
}

int positive_int(const json& v, std::size_t line, const std::string& field) {
  if (!v.is_number_integer() || v.get<long long>() <= 0)
    throw ManifestError(line, field, "must be a positive integer");
  const auto value = v.get<long long>();
  if (value > 1'000'000) throw ManifestError(line, field, "implausibly large");
  return static_cast<int>(value);
}

std::set<std::string> string_set(const json& v, std::size_t line, const std::string& field) {
  if (!v.is_array()) throw ManifestError(line, field, "must be an array of strings");
  std::set<std::string> out;
  for (const auto& e : v) {
    if (!e.is_string()) throw ManifestError(line, field, "must be an array of strings");
    out.insert(e.get<std::string>());
  }
  return out;
}

AnnotationRecord parse_record(const json& obj, std::size_t line, const ClassList* classes,
                              const std::filesystem::path& base_dir) {
  if (!obj.is_object()) throw ManifestError(line, "record", "must be a JSON object");
  check_keys(obj, {"image_id", "image_path", "width", "height", "instances", "tags"}, line, "");

  AnnotationRecord rec;
  const auto& id = require(obj, "image_id", line, "");
  if (!id.is_string() || id.get<std::string>().empty())
    throw ManifestError(line, "image_id", "must be a non-empty string");
  rec.image_id = id.get<std::string>();

  const auto& path = require(obj, "image_path", line, "");
  if (!path.is_string() || path.get<std::string>().empty())
    throw ManifestError(line, "image_path", "must be a non-empty string");
  rec.image_path = path.get<std::string>();
  if (rec.image_path.is_relative() && !base_dir.empty()) rec.image_path = base_dir / rec.image_path;

  rec.width = positive_int(require(obj, "width", line, ""), line, "width");
  rec.height = positive_int(require(obj, "height", line, ""), line, "height");

  if (obj.contains("tags")) rec.tags = string_set(obj.at("tags"), line, "tags");

  const auto& instances = require(obj, "instances", line, "");
  if (!instances.is_array()) throw ManifestError(line, "instances", "must be an array");
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const std::string where = "instances[" + std::to_string(i) + "].";
    const auto& inst = instances[i];
    if (!inst.is_object()) throw ManifestError(line, where.substr(0, where.size() - 1), "must be an object");
    check_keys(inst, {"box", "class_name", "attributes"}, line, where);

    SignInstance si;
    const auto& box = require(inst, "box", line, where);
    if (!box.is_array() || box.size() != 4)
      throw ManifestError(line, where + "box", "must be [x_min, y_min, x_max, y_max]");
    for (const auto& c : box)
      if (!c.is_number()) throw ManifestError(line, where + "box", "coordinates must be numbers");
    si.box = {box[0].get<double>(), box[1].get<double>(), box[2].get<double>(), box[3].get<double>()};
    for (double c : {si.box.x_min, si.box.y_min, si.box.x_max, si.box.y_max})
      if (!std::isfinite(c)) throw ManifestError(line, where + "box", "coordinates must be finite");
    if (!(si.box.x_min < si.box.x_max)) throw ManifestError(line, where + "box", "x_min must be < x_max");
    if (!(si.box.y_min < si.box.y_max)) throw ManifestError(line, where + "box", "y_min must be < y_max");
    if (si.box.x_min < 0) throw ManifestError(line, where + "box.x_min", "is negative");
    if (si.box.y_min < 0) throw ManifestError(line, where + "box.y_min", "is negative");
    if (si.box.x_max > rec.width)
      throw ManifestError(line, where + "box.x_max", "exceeds image width " + std::to_string(rec.width));
    if (si.box.y_max > rec.height)
      throw ManifestError(line, where + "box.y_max", "exceeds image height " + std::to_string(rec.height));

    const auto& cls = require(inst, "class_name", line, where);
    if (!cls.is_string() || cls.get<std::string>().empty())
      throw ManifestError(line, where + "class_name", "must be a non-empty string");
    si.class_name = cls.get<std::string>();
    if (classes && !classes->contains(si.class_name))
      throw ManifestError(line, where + "class_name", "'" + si.class_name + "' is not in the class list");

    if (inst.contains("attributes")) {
      si.attributes = string_set(inst.at("attributes"), line, where + "attributes");
      for (const auto& a : si.attributes)
        if (std::find(known_attributes().begin(), known_attributes().end(), a) == known_attributes().end())
          throw ManifestError(line, where + "attributes", "unknown attribute '" + a + "'");
    }
    rec.instances.push_back(std::move(si));
  }
  return rec;
}

}  // namespace

std::vector<AnnotationRecord> parse_manifest(std::istream& in, const ClassList* classes,
                                             const std::filesystem::path& base_dir) {
  std::vector<AnnotationRecord> records;
  std::set<std::string> ids;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json obj;
    try {
      obj = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ManifestError(line, "record", std::string("invalid JSON: ") + e.what());
    }
    auto rec = parse_record(obj, line, classes, base_dir);
    if (!ids.insert(rec.image_id).second)
      throw ManifestError(line, "image_id", "duplicate image_id '" + rec.image_id + "'");
    records.push_back(std::move(rec));
  }
  return records;
}

std::vector<AnnotationRecord> load_manifest(const std::filesystem::path& path, const ClassList* classes) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open manifest " + path.string());
  return parse_manifest(in, classes, path.parent_path());
}

void write_manifest(std::span<const AnnotationRecord> records, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest " + path.string());
  for (const auto& r : records) {
    json instances = json::array();
    for (const auto& inst : r.instances) {
      instances.push_back({{"box", {inst.box.x_min, inst.box.y_min, inst.box.x_max, inst.box.y_max}},
                           {"class_name", inst.class_name},
                           {"attributes", inst.attributes}});
    }
    json obj = {{"image_id", r.image_id}, {"image_path", r.image_path.generic_string()},
                {"width", r.width},       {"height", r.height},
                {"instances", instances}, {"tags", r.tags}};
    out << obj.dump() << '\n';
  }
}

// ---- census ----

std::int64_t ClassCensus::count(const std::string& name) const {
  auto it = counts.find(name);
  return it == counts.end() ? 0 : it->second;
}

ClassCensus census(std::span<const AnnotationRecord> records) {
  if (records.empty()) throw ValidationError("census of an empty record list");
  ClassCensus c;
  c.total_images = static_cast<std::int64_t>(records.size());
  for (const auto& r : records) {
    for (const auto& inst : r.instances) {
      ++c.counts[inst.class_name];
      ++c.total_instances;
    }
  }
  for (const auto& [_, n] : c.counts) c.count_max = std::max(c.count_max, n);
  return c;
}

// ---- stratified k-fold ----

namespace {

struct SplitState {
  int folds;
  int classes;
  std::vector<std::vector<std::pair<int, int>>> image_classes;  // (class, count) per image
  std::vector<double> desired;                                 // per class
  double desired_images;
  std::vector<int> fold_of;
  std::vector<std::vector<double>> counts;  // [fold][class]
  std::vector<double> images;               // [fold]

  static constexpr double kImageWeight = 0.5;

  void assign(int image, int fold) {
    fold_of[image] = fold;
    images[fold] += 1;
    for (auto [c, k] : image_classes[image]) counts[fold][c] += k;
  }
  void unassign(int image) {
    const int f = fold_of[image];
    images[f] -= 1;
    for (auto [c, k] : image_classes[image]) counts[f][c] -= k;
    fold_of[image] = -1;
  }

  double move_delta(int image, int to) const {
    const int from = fold_of[image];
    double d = 0.0;
    for (auto [c, k] : image_classes[image]) d += 2.0 * k * (counts[to][c] - counts[from][c]) + 2.0 * k * k;
    d += kImageWeight * (2.0 * (images[to] - images[from]) + 2.0);
    return d;
  }

  double swap_delta(int i, int j) const {
    const int a = fold_of[i];
    const int b = fold_of[j];
    // delta[c] = k_i(c) - k_j(c) moves from a to b
    double d = 0.0;
    auto term = [&](int c, double delta) { d += 2.0 * delta * (counts[b][c] - counts[a][c]) + 2.0 * delta * delta; };
    const auto& ci = image_classes[i];
    const auto& cj = image_classes[j];
    std::size_t p = 0;
    std::size_t q = 0;
    while (p < ci.size() || q < cj.size()) {
      if (q == cj.size() || (p < ci.size() && ci[p].first < cj[q].first)) {
        term(ci[p].first, ci[p].second);
        ++p;
      } else if (p == ci.size() || cj[q].first < ci[p].first) {
        term(cj[q].first, -cj[q].second);
        ++q;
      } else {
        if (ci[p].second != cj[q].second) term(ci[p].first, ci[p].second - cj[q].second);
        ++p;
        ++q;
      }
    }
    return d;
  }
};

}  // namespace

StratifiedSplit stratified_kfold(std::span<const AnnotationRecord> records, int folds, std::uint64_t seed) {
  if (folds < 2) throw ValidationError("stratified_kfold needs K >= 2");
  const int n = static_cast<int>(records.size());
  if (folds > n)
    throw ValidationError("K=" + std::to_string(folds) + " exceeds image count " + std::to_string(n));

  std::map<std::string, int> class_index;
  for (const auto& r : records)
    for (const auto& inst : r.instances) class_index.emplace(inst.class_name, 0);
  int next = 0;
  for (auto& [_, idx] : class_index) idx = next++;

  SplitState st;
  st.folds = folds;
  st.classes = next;
  st.image_classes.resize(n);
  std::vector<double> totals(next, 0.0);
  for (int i = 0; i < n; ++i) {
    std::map<int, int> local;
    for (const auto& inst : records[i].instances) ++local[class_index[inst.class_name]];
    for (auto [c, k] : local) {
      st.image_classes[i].emplace_back(c, k);
      totals[c] += k;
    }
  }
  st.desired.resize(next);
  for (int c = 0; c < next; ++c) st.desired[c] = totals[c] / folds;
  st.desired_images = static_cast<double>(n) / folds;
  st.fold_of.assign(n, -1);
  st.counts.assign(folds, std::vector<double>(next, 0.0));
  st.images.assign(folds, 0.0);

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<int> class_order(next);
  std::iota(class_order.begin(), class_order.end(), 0);
  std::stable_sort(class_order.begin(), class_order.end(), [&](int a, int b) { return totals[a] < totals[b]; });

  constexpr double kTol = 1e-9;
  auto best_fold = [&](int c) {
    int best = 0;
    for (int f = 1; f < folds; ++f) {
      const double dc = (st.desired[c] - st.counts[f][c]) - (st.desired[c] - st.counts[best][c]);
      if (dc > kTol || (std::abs(dc) <= kTol && st.images[f] < st.images[best] - kTol)) best = f;
    }
    return best;
  };

  for (int c : class_order) {
    for (int i : order) {
      if (st.fold_of[i] >= 0) continue;
      const auto& ic = st.image_classes[i];
      if (std::none_of(ic.begin(), ic.end(), [c](auto p) { return p.first == c; })) continue;
      st.assign(i, best_fold(c));
    }
  }
  for (int i : order) {
    if (st.fold_of[i] >= 0) continue;
    int best = 0;
    for (int f = 1; f < folds; ++f)
      if (st.images[f] < st.images[best] - kTol) best = f;
    st.assign(i, best);
  }

  // Local refinement: single-image moves, then pairwise swaps, until no strict improvement.
  constexpr int kMaxPasses = 50;
  for (int pass = 0; pass < kMaxPasses; ++pass) {
    bool improved = false;
    for (int i : order) {
      int best_to = -1;
      double best_delta = -kTol;
      for (int f = 0; f < folds; ++f) {
        if (f == st.fold_of[i]) continue;
        const double d = st.move_delta(i, f);
        if (d < best_delta) {
          best_delta = d;
          best_to = f;
        }
      }
      if (best_to >= 0) {
        st.unassign(i);
        st.assign(i, best_to);
        improved = true;
      }
    }
    for (std::size_t p = 0; p < order.size(); ++p) {
      const int i = order[p];
      int best_j = -1;
      double best_delta = -kTol;
      for (std::size_t q = p + 1; q < order.size(); ++q) {
        const int j = order[q];
        if (st.fold_of[j] == st.fold_of[i]) continue;
        const double d = st.swap_delta(i, j);
        if (d < best_delta) {
          best_delta = d;
          best_j = j;
        }
      }
      if (best_j >= 0) {
        const int a = st.fold_of[i];
        const int b = st.fold_of[best_j];
        st.unassign(i);
        st.unassign(best_j);
        st.assign(i, b);
        st.assign(best_j, a);
        improved = true;
      }
    }
    if (!improved) break;
  }

  StratifiedSplit split;
  split.folds.resize(folds);
  for (int f = 0; f < folds; ++f) split.folds[f].fold_index = f;
  for (int i = 0; i < n; ++i) split.folds[st.fold_of[i]].image_ids.push_back(records[i].image_id);
  for (int f = 0; f < folds; ++f) {
    split.max_image_deviation = std::max(split.max_image_deviation, std::abs(st.images[f] - st.desired_images));
    for (int c = 0; c < next; ++c)
      split.max_class_deviation = std::max(split.max_class_deviation, std::abs(st.counts[f][c] - st.desired[c]));
  }
  return split;
}

void write_folds(std::span<const FoldAssignment> folds, const std::filesystem::path& path) {
  json obj = json::object();
  for (const auto& f : folds) obj[std::to_string(f.fold_index)] = f.image_ids;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write fold file " + path.string());
  out << obj.dump(2) << '\n';
}

std::vector<FoldAssignment> read_folds(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open fold file " + path.string());
  json obj;
  try {
    obj = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError("fold file " + path.string() + ": " + e.what());
  }
  if (!obj.is_object()) throw ValidationError("fold file must map fold index to image ids");
  std::vector<FoldAssignment> folds;
  std::set<std::string> seen;
  for (const auto& [key, ids] : obj.items()) {
    FoldAssignment f;
    try {
      std::size_t used = 0;
      f.fold_index = std::stoi(key, &used);
      if (used != key.size() || f.fold_index < 0) throw std::invalid_argument(key);
    } catch (const std::exception&) {
      throw ValidationError("fold file: invalid fold index '" + key + "'");
    }
    if (!ids.is_array()) throw ValidationError("fold file: fold " + key + " must be an array");
    for (const auto& id : ids) {
      if (!id.is_string()) throw ValidationError("fold file: image ids must be strings");
      if (!seen.insert(id.get<std::string>()).second)
        throw ValidationError("fold file: image '" + id.get<std::string>() + "' appears in more than one fold");
      f.image_ids.push_back(id.get<std::string>());
    }
    folds.push_back(std::move(f));
  }
  std::sort(folds.begin(), folds.end(), [](const auto& a, const auto& b) { return a.fold_index < b.fold_index; });
  for (std::size_t i = 0; i < folds.size(); ++i)
    if (folds[i].fold_index != static_cast<int>(i)) throw ValidationError("fold file: fold indices must be 0..K-1");
  return folds;
}

// ---- crops ----

ImageTensor crop_box(const ImageTensor& image, const Box& box, int size, CropMode mode) {
  if (size <= 0) throw ValidationError("crop size must be positive");
  const int x0 = static_cast<int>(std::floor(std::max(0.0, box.x_min)));
  const int y0 = static_cast<int>(std::floor(std::max(0.0, box.y_min)));
  const int x1 = static_cast<int>(std::ceil(std::min<double>(image.width(), box.x_max)));
  const int y1 = static_cast<int>(std::ceil(std::min<double>(image.height(), box.y_max)));
  if (x1 <= x0 || y1 <= y0) throw ValidationError("degenerate box after clipping");
  const int w = x1 - x0;
  const int h = y1 - y0;
  const int side = mode == CropMode::letterbox ? std::max(w, h) : 0;
  const int canvas_w = mode == CropMode::letterbox ? side : w;
  const int canvas_h = mode == CropMode::letterbox ? side : h;
  const int off_x = (canvas_w - w) / 2;
  const int off_y = (canvas_h - h) / 2;
  ImageTensor canvas(canvas_h, canvas_w, image.channels(), 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < image.channels(); ++c) canvas.at(y + off_y, x + off_x, c) = image.at(y + y0, x + x0, c);
  auto out = resize_bilinear(canvas, size, size);
  out.clamp(0.0, 1.0);
  return out;
}

std::vector<LabeledCrop> extract_crops(std::span<const AnnotationRecord> records, int image_size, CropMode mode) {
  std::vector<const AnnotationRecord*> sorted;
  for (const auto& r : records) sorted.push_back(&r);
  std::sort(sorted.begin(), sorted.end(), [](auto a, auto b) { return a->image_id < b->image_id; });
  std::vector<LabeledCrop> crops;
  for (const auto* r : sorted) {
    if (r->instances.empty()) continue;
    const ImageTensor image = read_image(r->image_path);
    if (image.width() != r->width || image.height() != r->height)
      throw ValidationError("image " + r->image_path.string() + " is " + std::to_string(image.width()) + "x" +
                            std::to_string(image.height()) + " but the manifest says " + std::to_string(r->width) +
                            "x" + std::to_string(r->height));
    for (std::size_t i = 0; i < r->instances.size(); ++i) {
      crops.push_back({crop_box(image, r->instances[i].box, image_size, mode), r->instances[i].class_name,
                       r->image_id, static_cast<int>(i)});
    }
  }
  return crops;
}

}  // namespace lensnet
