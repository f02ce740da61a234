#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "fpcnet/tensor.hpp"

namespace fpcnet {

// Single-image binary mask, row-major, 1 = crack.
struct Mask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> data;

  Mask() = default;
  Mask(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), data(h * w, fill) {}

  std::uint8_t& operator()(std::size_t r, std::size_t c) { return data[r * width + c]; }
  std::uint8_t operator()(std::size_t r, std::size_t c) const { return data[r * width + c]; }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto v : data) n += v;
    return n;
  }
  friend bool operator==(const Mask&, const Mask&) = default;
};

// Mask of image n from a [N,1,H,W] tensor whose values are exactly 0 or 1.
template <class T>
Mask mask_from_tensor(const Tensor<T>& t, std::size_t n = 0) {
  if (t.rank() != 4 || t.dim(1) != 1 || n >= t.dim(0))
    throw ShapeError("mask tensor must be N x 1 x H x W, got " + t.shape().str());
  Mask m(t.dim(2), t.dim(3));
  const T* src = t.ptr() + n * m.height * m.width;
  for (std::size_t i = 0; i < m.data.size(); ++i) {
    if (src[i] != T(0) && src[i] != T(1)) throw DataError("mask tensor is not binary");
    m.data[i] = src[i] == T(1);
  }
  return m;
}

template <class T>
Tensor<T> mask_to_tensor(const Mask& m) {
  Tensor<T> t(Shape{1, 1, m.height, m.width});
  for (std::size_t i = 0; i < m.data.size(); ++i) t[i] = m.data[i] ? T(1) : T(0);
  return t;
}

// prob >= threshold.
template <class T>
Mask binarize(const Tensor<T>& prob, double threshold = 0.5, std::size_t n = 0) {
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw UsageError("binarize: threshold must lie in [0,1]");
  if (prob.rank() != 4 || prob.dim(1) != 1 || n >= prob.dim(0))
    throw ShapeError("probability map must be N x 1 x H x W, got " + prob.shape().str());
  Mask m(prob.dim(2), prob.dim(3));
  const T* src = prob.ptr() + n * m.height * m.width;
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = static_cast<double>(src[i]) >= threshold;
  return m;
}

namespace metrics_detail {

inline constexpr double kFar = std::numeric_limits<double>::infinity();

// Lower envelope of parabolas (q - v)^2 + f[v] over finite sites.
inline void edt_1d(const double* f, std::size_t n, std::size_t stride, double* out) {
  std::vector<std::size_t> v;
  std::vector<double> z;
  v.reserve(n);
  z.reserve(n + 1);
  for (std::size_t q = 0; q < n; ++q) {
    const double fq = f[q * stride];
    if (fq == kFar) continue;
    const double dq = static_cast<double>(q);
    while (!v.empty()) {
      const double dv = static_cast<double>(v.back());
      const double s = ((fq + dq * dq) - (f[v.back() * stride] + dv * dv)) / (2.0 * dq - 2.0 * dv);
      if (s <= z.back()) {
        v.pop_back();
        z.pop_back();
      } else {
        z.push_back(s);
        break;
      }
    }
    if (v.empty()) z.assign(1, -kFar);
    v.push_back(q);
  }
  if (v.empty()) {
    for (std::size_t q = 0; q < n; ++q) out[q * stride] = kFar;
    return;
  }
  z.push_back(kFar);
  std::size_t k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    const double dq = static_cast<double>(q);
    while (z[k + 1] < dq) ++k;
    const double d = dq - static_cast<double>(v[k]);
    out[q * stride] = d * d + f[v[k] * stride];
  }
}

}  // namespace metrics_detail

// Exact squared Euclidean distance from every pixel to the nearest set pixel
// of the mask (infinity when the mask is empty).
inline std::vector<double> squared_distance_transform(const Mask& m) {
  using metrics_detail::kFar;
  const std::size_t h = m.height, w = m.width;
  std::vector<double> f(h * w), g(h * w);
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = m.data[i] ? 0.0 : kFar;
  for (std::size_t c = 0; c < w; ++c) metrics_detail::edt_1d(f.data() + c, h, w, g.data() + c);
  for (std::size_t r = 0; r < h; ++r) metrics_detail::edt_1d(g.data() + r * w, w, 1, f.data() + r * w);
  return f;
}

// Raw pooled counts. tp is prediction-side, matched_gt is ground-truth-side.
struct EvalCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::size_t matched_gt = 0;

  std::size_t predicted() const { return tp + fp; }
  std::size_t ground_truth() const { return matched_gt + fn; }

  EvalCounts& operator+=(const EvalCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    matched_gt += o.matched_gt;
    return *this;
  }
  friend bool operator==(const EvalCounts&, const EvalCounts&) = default;
};

inline double f1_from_rates(double precision, double recall) {
  const double s = precision + recall;
  return s > 0.0 ? 2.0 * precision * recall / s : 0.0;
}

struct EvalReport {
  double margin = 0.0;
  EvalCounts counts;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  // Recall counts ground-truth pixels matched within the margin.
  static constexpr const char* kRecallConvention = "symmetric: recall over GT pixels within margin of a prediction";

  static EvalReport from_counts(const EvalCounts& c, double margin) {
    EvalReport r{margin, c};
    const std::size_t pred = c.predicted(), gt = c.ground_truth();
    if (pred == 0 && gt == 0) {
      r.precision = r.recall = r.f1 = 1.0;
      return r;
    }
    r.precision = pred ? static_cast<double>(c.tp) / static_cast<double>(pred) : 0.0;
    r.recall = gt ? static_cast<double>(c.matched_gt) / static_cast<double>(gt) : 0.0;
    r.f1 = (pred && gt) ? f1_from_rates(r.precision, r.recall) : 0.0;
    return r;
  }
};

inline EvalCounts evaluate_counts(const Mask& pred, const Mask& gt, double margin) {
  if (pred.height != gt.height || pred.width != gt.width)
    throw ShapeError("evaluate: prediction " + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                     " vs ground truth " + std::to_string(gt.height) + "x" + std::to_string(gt.width));
  if (margin < 0) throw UsageError("evaluate: margin must be non-negative");
  for (const Mask* m : {&pred, &gt})
    for (auto v : m->data)
      if (v > 1) throw DataError("evaluate: masks must be binary");
  const double r2 = margin * margin;
  const auto to_gt = squared_distance_transform(gt);
  const auto to_pred = squared_distance_transform(pred);
  EvalCounts c;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    if (pred.data[i]) (to_gt[i] <= r2 ? c.tp : c.fp)++;
    if (gt.data[i]) (to_pred[i] <= r2 ? c.matched_gt : c.fn)++;
  }
  return c;
}

inline EvalReport evaluate(const Mask& pred, const Mask& gt, double margin) {
  return EvalReport::from_counts(evaluate_counts(pred, gt, margin), margin);
}

// ---------------------------------------------------------------------------
// Per-crack-type tables, micro-averaged (counts pooled before rates).

inline const std::array<std::string, 4>& crack_types() {
  static const std::array<std::string, 4> kTypes{"transverse", "longitudinal", "block", "alligator"};
  return kTypes;
}

inline bool is_crack_type(const std::string& t) {
  for (const auto& k : crack_types())
    if (k == t) return true;
  return false;
}

struct TaggedCounts {
  std::string crack_type;
  EvalCounts counts;
};

struct GroupedReport {
  std::vector<std::pair<std::string, EvalReport>> rows;  // canonical type order
  EvalReport overall;
};

inline GroupedReport group_report(const std::vector<TaggedCounts>& items, double margin) {
  std::map<std::string, EvalCounts> pooled;
  EvalCounts all;
  for (const auto& it : items) {
    if (!is_crack_type(it.crack_type)) throw DataError("unknown crack type '" + it.crack_type + "'");
    pooled[it.crack_type] += it.counts;
    all += it.counts;
  }
  GroupedReport g;
  for (const auto& t : crack_types())
    if (auto p = pooled.find(t); p != pooled.end()) g.rows.emplace_back(t, EvalReport::from_counts(p->second, margin));
  g.overall = EvalReport::from_counts(all, margin);
  return g;
}

inline void write_report_csv(std::ostream& os, const std::vector<std::pair<std::string, EvalReport>>& rows) {
  os << "type,tp,fp,fn,precision,recall,f1,margin\n";
  os << std::setprecision(6) << std::fixed;
  for (const auto& [type, r] : rows)
    os << type << ',' << r.counts.tp << ',' << r.counts.fp << ',' << r.counts.fn << ',' << r.precision << ','
       << r.recall << ',' << r.f1 << ',' << std::setprecision(0) << r.margin << std::setprecision(6) << '\n';
}

inline void write_report_table(std::ostream& os, const std::vector<std::pair<std::string, EvalReport>>& rows) {
  os << std::left << std::setw(14) << "type" << std::right << std::setw(10) << "TP" << std::setw(10) << "FP"
     << std::setw(10) << "FN" << std::setw(11) << "Precision" << std::setw(9) << "Recall" << std::setw(9)
     << "F1" << std::setw(8) << "margin" << '\n';
  for (const auto& [type, r] : rows) {
    os << std::left << std::setw(14) << type << std::right << std::setw(10) << r.counts.tp << std::setw(10)
       << r.counts.fp << std::setw(10) << r.counts.fn << std::fixed << std::setprecision(2) << std::setw(10)
       << 100.0 * r.precision << '%' << std::setw(8) << 100.0 * r.recall << '%' << std::setw(8)
       << 100.0 * r.f1 << '%' << std::setprecision(0) << std::setw(8) << r.margin << '\n';
    os.unsetf(std::ios::fixed);
  }
  os << "# recall convention: " << EvalReport::kRecallConvention << '\n';
}

}  // namespace fpcnet
