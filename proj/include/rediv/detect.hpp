#ifndef REDIV_DETECT_HPP
#define REDIV_DETECT_HPP

#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "rediv/binfmt.hpp"
#include "rediv/cfg.hpp"

namespace rediv {

enum class DetectorKind : uint8_t { BytesNGram, CfgFeature, Heuristic };
enum class HeuristicRule : uint8_t { R1, R2 };

struct LabeledImage {
  BinaryImage image;
  int label = 0;  // 1 = malicious-style class
};

// A trained target system: logistic scorer over either hashed byte trigrams
// or CFG structure features, or one of the heuristic rules. Immutable after
// training; predict is pure and safe under concurrent queries.
struct Detector {
  DetectorKind kind = DetectorKind::CfgFeature;
  std::vector<double> weights;
  double bias = 0.0;
  std::vector<double> feat_mean;
  std::vector<double> feat_scale;
  double theta = 0.5;
  bool probabilistic = true;  // false: label-only feedback capability
  uint64_t seed = 0;
  uint32_t ngram_buckets = 256;
  HeuristicRule rule = HeuristicRule::R1;
};

struct Prediction {
  int label = 0;
  std::optional<double> prob;
};

struct CalibrationResult {
  double theta = 0.0;
  double achieved_fpr = 0.0;
  double tpr_at_theta = 0.0;
};

// Hashed 3-gram frequencies over the serialized file bytes.
std::vector<double> bytes_features(const BinaryImage& image, uint32_t buckets);

// Raw-byte detector analog; logistic model fit by gradient descent.
// Throws SingleClassCorpus.
Detector train_bytes_detector(const std::vector<LabeledImage>& corpus, std::mt19937_64& rng);

// CFG-structure detector analog over extract_features vectors.
Detector train_cfg_detector(const std::vector<LabeledImage>& corpus, std::mt19937_64& rng);

// Picks the smallest threshold whose empirical false-positive rate on the
// goodware set is <= target, stores it on the detector, and reports the
// achieved FPR plus TPR on the optional held-out malicious set.
CalibrationResult calibrate_fpr(Detector& d, const std::vector<BinaryImage>& goodware,
                                double target_fpr,
                                const std::vector<BinaryImage>* malicious = nullptr);

// Heuristic adversarial detectors.
// R1: some section other than ".text" is executable.
bool r1(const BinaryImage& image);
// R2: some block contains a call, then zero or more grammar-whitelisted
// instructions, then an unconditional jump.
bool r2(const BinaryImage& image);

Prediction predict(const Detector& d, const BinaryImage& z);

// Area under the ROC curve by the rank statistic (ties get half credit).
double auc(const std::vector<double>& scores, const std::vector<int>& labels);

std::string detector_to_json(const Detector& d);
Detector detector_from_json(const std::string& json_text);

// Query surface the search optimizes against; hides whether the target is a
// built-in model or an external process.
class DetectorClient {
 public:
  virtual ~DetectorClient() = default;
  virtual Prediction query(const BinaryImage& z) const = 0;
};

class LocalDetectorClient final : public DetectorClient {
 public:
  explicit LocalDetectorClient(Detector d) : det_(std::move(d)) {}
  Prediction query(const BinaryImage& z) const override { return predict(det_, z); }
  const Detector& detector() const { return det_; }

 private:
  Detector det_;
};

// Bridges a third-party detector process speaking the line protocol:
// stdin one file path per line, stdout "LABEL <0|1> [PROB <p>]".
class ExternalDetector final : public DetectorClient {
 public:
  explicit ExternalDetector(const std::vector<std::string>& argv);
  ~ExternalDetector() override;

  ExternalDetector(const ExternalDetector&) = delete;
  ExternalDetector& operator=(const ExternalDetector&) = delete;

  Prediction query(const BinaryImage& z) const override;

 private:
  mutable std::mutex mu_;
  mutable uint64_t counter_ = 0;
  int to_child_ = -1;
  int from_child_ = -1;
  int pid_ = -1;
  std::string scratch_dir_;
};

}  // namespace rediv

#endif  // REDIV_DETECT_HPP
