#include "camforge/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

#include "camforge/error.hpp"

namespace camforge::eval {
namespace {

Ratio make_ratio(std::uint64_t num, std::uint64_t den) {
  if (den == 0) return num == 0 ? Ratio{} : Ratio{Ratio::Kind::Infinite, std::numeric_limits<double>::infinity()};
  return Ratio{Ratio::Kind::Finite, static_cast<double>(num) / static_cast<double>(den)};
}

nlohmann::json ratio_json(const Ratio& r) {
  switch (r.kind) {
    case Ratio::Kind::Finite: return r.value;
    case Ratio::Kind::Infinite: return "inf";
    case Ratio::Kind::Undefined: return nullptr;
  }
  return nullptr;
}

std::string ratio_text(const Ratio& r) {
  char buf[32];
  switch (r.kind) {
    case Ratio::Kind::Finite: std::snprintf(buf, sizeof buf, "%.4f", r.value); return buf;
    case Ratio::Kind::Infinite: return "inf";
    case Ratio::Kind::Undefined: return "-";
  }
  return "-";
}

std::optional<double> finite_mean(const std::vector<Ratio>& rs, std::size_t first) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = first; i < rs.size(); ++i) {
    if (rs[i].kind != Ratio::Kind::Finite) continue;
    s += rs[i].value;
    ++n;
  }
  if (n == 0) return std::nullopt;
  return s / static_cast<double>(n);
}

std::vector<std::string> label_names(const ConfusionTally& t, const std::vector<std::string>& names) {
  std::vector<std::string> out{"background"};
  for (std::size_t c = 1; c < t.num_labels(); ++c)
    out.push_back(c - 1 < names.size() ? names[c - 1] : "class" + std::to_string(c - 1));
  return out;
}

}  // namespace

ConfusionTally::ConfusionTally(std::size_t num_classes) : counts_(num_classes + 1) {}

void ConfusionTally::accumulate(const PseudoMask& pred, const PseudoMask& gt) {
  if (!(pred.grid == gt.grid) || pred.labels.size() != gt.labels.size())
    fail(ErrorCode::ShapeMismatch, "prediction and ground truth grids differ");
  const auto max_label = static_cast<std::uint32_t>(counts_.size() - 1);
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    const auto g = gt.labels[i];
    if (g == kIgnoreLabel) continue;
    const auto p = pred.labels[i];
    if (p > max_label || g > max_label) {
      fail(ErrorCode::LabelOutOfRange, "label " + std::to_string(std::max(p, g)) + " exceeds " +
                                           std::to_string(max_label));
    }
    ++pixels_;
    if (p == g) {
      ++counts_[p].tp;
    } else {
      ++counts_[p].fp;
      ++counts_[g].fn;
    }
  }
}

void ConfusionTally::merge(const ConfusionTally& other) {
  if (other.counts_.size() != counts_.size())
    fail(ErrorCode::ShapeMismatch, "cannot merge tallies with different class counts");
  for (std::size_t c = 0; c < counts_.size(); ++c) {
    counts_[c].tp += other.counts_[c].tp;
    counts_[c].fp += other.counts_[c].fp;
    counts_[c].fn += other.counts_[c].fn;
  }
  pixels_ += other.pixels_;
}

std::uint64_t ConfusionTally::correct() const noexcept {
  std::uint64_t s = 0;
  for (const auto& c : counts_) s += c.tp;
  return s;
}

double pixel_accuracy(const ConfusionTally& t) {
  if (t.pixels() == 0) fail(ErrorCode::NoValidClass, "no pixels counted");
  return static_cast<double>(t.correct()) / static_cast<double>(t.pixels());
}

IouReport miou(const ConfusionTally& t) {
  IouReport r;
  double sum = 0.0, sum_fg = 0.0;
  std::size_t n = 0, n_fg = 0;
  for (std::size_t c = 0; c < t.num_labels(); ++c) {
    const auto& k = t.counts(c);
    const std::uint64_t den = k.tp + k.fp + k.fn;
    if (den == 0) {
      r.per_class.emplace_back(std::nullopt);
      continue;
    }
    const double iou = static_cast<double>(k.tp) / static_cast<double>(den);
    r.per_class.emplace_back(iou);
    sum += iou;
    ++n;
    if (c > 0) {
      sum_fg += iou;
      ++n_fg;
    }
  }
  if (n == 0) fail(ErrorCode::NoValidClass, "every class has TP + FP + FN = 0");
  r.mean = sum / static_cast<double>(n);
  if (n_fg > 0) r.mean_foreground = sum_fg / static_cast<double>(n_fg);
  return r;
}

ConfusionRatioReport confusion_ratio(const ConfusionTally& t) {
  ConfusionRatioReport r;
  for (std::size_t c = 0; c < t.num_labels(); ++c)
    r.per_class.push_back(make_ratio(t.counts(c).fp, t.counts(c).tp));
  r.average = finite_mean(r.per_class, 0);
  r.average_foreground = finite_mean(r.per_class, 1);
  return r;
}

std::vector<Ratio> precision(const ConfusionTally& t) {
  std::vector<Ratio> out;
  for (std::size_t c = 0; c < t.num_labels(); ++c) {
    const auto& k = t.counts(c);
    out.push_back(k.tp + k.fp == 0 ? Ratio{} : make_ratio(k.tp, k.tp + k.fp));
  }
  return out;
}

std::vector<Ratio> recall(const ConfusionTally& t) {
  std::vector<Ratio> out;
  for (std::size_t c = 0; c < t.num_labels(); ++c) {
    const auto& k = t.counts(c);
    out.push_back(k.tp + k.fn == 0 ? Ratio{} : make_ratio(k.tp, k.tp + k.fn));
  }
  return out;
}

CooccurrenceSplit split_by_cooccurrence(const io::Manifest& manifest) {
  CooccurrenceSplit s;
  for (const auto& r : manifest.samples) {
    if (r.image_labels.size() == 1)
      s.single_class.push_back(r.id);
    else if (r.image_labels.size() >= 2)
      s.co_occurrence.push_back(r.id);
  }
  return s;
}

nlohmann::json report_json(const ConfusionTally& t, const std::vector<std::string>& names) {
  const auto labels = label_names(t, names);
  const auto iou = miou(t);
  const auto cr = confusion_ratio(t);
  const auto prec = precision(t);
  const auto rec = recall(t);
  nlohmann::json classes = nlohmann::json::array();
  for (std::size_t c = 0; c < t.num_labels(); ++c) {
    const auto& k = t.counts(c);
    classes.push_back({{"label", c},
                       {"name", labels[c]},
                       {"tp", k.tp},
                       {"fp", k.fp},
                       {"fn", k.fn},
                       {"iou", iou.per_class[c] ? nlohmann::json(*iou.per_class[c]) : nullptr},
                       {"precision", ratio_json(prec[c])},
                       {"recall", ratio_json(rec[c])},
                       {"confusion_ratio", ratio_json(cr.per_class[c])}});
  }
  const auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nullptr; };
  return {{"pixels", t.pixels()},
          {"pixel_accuracy", t.pixels() ? nlohmann::json(pixel_accuracy(t)) : nullptr},
          {"miou", iou.mean},
          {"miou_foreground", opt(iou.mean_foreground)},
          {"confusion_ratio_avg", opt(cr.average)},
          {"confusion_ratio_avg_foreground", opt(cr.average_foreground)},
          {"precision_avg", opt(finite_mean(prec, 0))},
          {"recall_avg", opt(finite_mean(rec, 0))},
          {"classes", classes}};
}

std::string report_table(const ConfusionTally& t, const std::vector<std::string>& names) {
  const auto labels = label_names(t, names);
  const auto iou = miou(t);
  const auto cr = confusion_ratio(t);
  const auto prec = precision(t);
  const auto rec = recall(t);
  std::size_t width = 7;
  for (const auto& l : labels) width = std::max(width, l.size());
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-*s %10s %10s %10s %10s\n", static_cast<int>(width), "class",
                "IoU", "precision", "recall", "CR");
  out += buf;
  for (std::size_t c = 0; c < t.num_labels(); ++c) {
    const Ratio iou_r = iou.per_class[c] ? Ratio{Ratio::Kind::Finite, *iou.per_class[c]} : Ratio{};
    std::snprintf(buf, sizeof buf, "%-*s %10s %10s %10s %10s\n", static_cast<int>(width),
                  labels[c].c_str(), ratio_text(iou_r).c_str(), ratio_text(prec[c]).c_str(),
                  ratio_text(rec[c]).c_str(), ratio_text(cr.per_class[c]).c_str());
    out += buf;
  }
  const auto opt = [](const std::optional<double>& v) {
    return ratio_text(v ? Ratio{Ratio::Kind::Finite, *v} : Ratio{});
  };
  std::snprintf(buf, sizeof buf, "%-*s %10s %10s %10s %10s\n", static_cast<int>(width), "mean",
                opt(iou.mean).c_str(), opt(finite_mean(prec, 0)).c_str(),
                opt(finite_mean(rec, 0)).c_str(), opt(cr.average).c_str());
  out += buf;
  std::snprintf(buf, sizeof buf, "%-*s %10s %10s %10s %10s\n", static_cast<int>(width), "mean-fg",
                opt(iou.mean_foreground).c_str(), opt(finite_mean(prec, 1)).c_str(),
                opt(finite_mean(rec, 1)).c_str(), opt(cr.average_foreground).c_str());
  out += buf;
  return out;
}

}  // namespace camforge::eval
