#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "camforge/dense.hpp"
#include "camforge/manifest.hpp"
#include "json.hpp"

namespace camforge::eval {

struct ClassCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;

  bool operator==(const ClassCounts&) const = default;
};

/// Per-class pixel counts over labels 0..C (0 = background). Ground-truth
/// pixels carrying kIgnoreLabel are skipped.
class ConfusionTally {
 public:
  explicit ConfusionTally(std::size_t num_classes);

  void accumulate(const PseudoMask& pred, const PseudoMask& gt);
  /// Exact, associative and commutative.
  void merge(const ConfusionTally& other);

  std::size_t num_labels() const noexcept { return counts_.size(); }
  const ClassCounts& counts(std::size_t label) const { return counts_.at(label); }
  std::uint64_t pixels() const noexcept { return pixels_; }
  std::uint64_t correct() const noexcept;

  bool operator==(const ConfusionTally&) const = default;

 private:
  std::vector<ClassCounts> counts_;
  std::uint64_t pixels_ = 0;
};

/// Correctly labelled fraction of counted pixels.
double pixel_accuracy(const ConfusionTally& t);

struct IouReport {
  std::vector<std::optional<double>> per_class;  // nullopt: TP + FP + FN = 0
  double mean = 0.0;                             // over included labels
  std::optional<double> mean_foreground;         // background label excluded
};

/// Throws NoValidClass when every label is 0/0.
IouReport miou(const ConfusionTally& t);

struct Ratio {
  enum class Kind { Finite, Infinite, Undefined };
  Kind kind = Kind::Undefined;
  double value = 0.0;
};

struct ConfusionRatioReport {
  std::vector<Ratio> per_class;        // FP / TP
  std::optional<double> average;       // over finite entries
  std::optional<double> average_foreground;
};

ConfusionRatioReport confusion_ratio(const ConfusionTally& t);

/// TP / (TP + FP); Undefined when nothing was predicted as the label.
std::vector<Ratio> precision(const ConfusionTally& t);
/// TP / (TP + FN); Undefined when the label never occurs.
std::vector<Ratio> recall(const ConfusionTally& t);

struct CooccurrenceSplit {
  std::vector<std::string> single_class;
  std::vector<std::string> co_occurrence;
};

/// One image label vs two or more; unlabeled samples land in neither.
CooccurrenceSplit split_by_cooccurrence(const io::Manifest& manifest);

/// `names` are the C foreground class names; the background row is prepended.
nlohmann::json report_json(const ConfusionTally& t, const std::vector<std::string>& names);
std::string report_table(const ConfusionTally& t, const std::vector<std::string>& names);

}  // namespace camforge::eval
