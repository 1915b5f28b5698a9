#include "rediv/detect.hpp"

#include <fcntl.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "json.hpp"
#include "rediv/error.hpp"
#include "rediv/nopgen.hpp"

namespace rediv {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::vector<double> standardize(const Detector& d, const std::vector<double>& x) {
  std::vector<double> out(x.size());
  for (size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - d.feat_mean[i]) / d.feat_scale[i];
  return out;
}

std::vector<double> features_for(const Detector& d, const BinaryImage& z) {
  if (d.kind == DetectorKind::BytesNGram) return bytes_features(z, d.ngram_buckets);
  const FeatureVector fv = extract_features(build_cfg(z));
  return fv.values;
}

// Plain full-batch logistic regression. The corpus is tiny and separable by
// construction, so a fixed schedule converges comfortably.
Detector train_logistic(DetectorKind kind, const std::vector<LabeledImage>& corpus,
                        std::mt19937_64& rng, uint32_t buckets) {
  size_t pos = 0, neg = 0;
  for (const auto& s : corpus) (s.label ? pos : neg)++;
  if (pos == 0 || neg == 0) fail(errc::single_class_corpus, "need both classes to train");

  Detector d;
  d.kind = kind;
  d.ngram_buckets = buckets;
  d.seed = rng();

  std::vector<std::vector<double>> xs;
  std::vector<int> ys;
  xs.reserve(corpus.size());
  for (const auto& s : corpus) {
    xs.push_back(features_for(d, s.image));
    ys.push_back(s.label);
  }
  const size_t dim = xs.front().size();

  d.feat_mean.assign(dim, 0.0);
  d.feat_scale.assign(dim, 0.0);
  for (const auto& x : xs)
    for (size_t i = 0; i < dim; ++i) d.feat_mean[i] += x[i];
  for (size_t i = 0; i < dim; ++i) d.feat_mean[i] /= static_cast<double>(xs.size());
  for (const auto& x : xs)
    for (size_t i = 0; i < dim; ++i) {
      const double c = x[i] - d.feat_mean[i];
      d.feat_scale[i] += c * c;
    }
  for (size_t i = 0; i < dim; ++i) {
    d.feat_scale[i] = std::sqrt(d.feat_scale[i] / static_cast<double>(xs.size()));
    if (d.feat_scale[i] < 1e-12) d.feat_scale[i] = 1.0;
  }
  for (auto& x : xs) x = standardize(d, x);

  d.weights.assign(dim, 0.0);
  d.bias = 0.0;
  const double lr = 0.5;
  const double l2 = 1e-2;
  const int epochs = 300;
  const double inv_n = 1.0 / static_cast<double>(xs.size());
  std::vector<double> grad(dim);
  for (int e = 0; e < epochs; ++e) {
    std::fill(grad.begin(), grad.end(), 0.0);
    double grad_b = 0.0;
    for (size_t s = 0; s < xs.size(); ++s) {
      double z = d.bias;
      for (size_t i = 0; i < dim; ++i) z += d.weights[i] * xs[s][i];
      const double err = sigmoid(z) - static_cast<double>(ys[s]);
      for (size_t i = 0; i < dim; ++i) grad[i] += err * xs[s][i];
      grad_b += err;
    }
    for (size_t i = 0; i < dim; ++i)
      d.weights[i] -= lr * (grad[i] * inv_n + l2 * d.weights[i]);
    d.bias -= lr * grad_b * inv_n;
  }
  return d;
}

}  // namespace

std::vector<double> bytes_features(const BinaryImage& image, uint32_t buckets) {
  const auto bytes = serialize_image(image);
  std::vector<double> counts(buckets, 0.0);
  if (bytes.size() < 3) return counts;
  const size_t total = bytes.size() - 2;
  for (size_t i = 0; i + 2 < bytes.size(); ++i) {
    // FNV-1a over the trigram
    uint32_t h = 2166136261u;
    for (size_t j = 0; j < 3; ++j) {
      h ^= bytes[i + j];
      h *= 16777619u;
    }
    counts[h % buckets] += 1.0;
  }
  for (auto& c : counts) c /= static_cast<double>(total);
  return counts;
}

Detector train_bytes_detector(const std::vector<LabeledImage>& corpus, std::mt19937_64& rng) {
  return train_logistic(DetectorKind::BytesNGram, corpus, rng, 256);
}

Detector train_cfg_detector(const std::vector<LabeledImage>& corpus, std::mt19937_64& rng) {
  return train_logistic(DetectorKind::CfgFeature, corpus, rng, 0);
}

CalibrationResult calibrate_fpr(Detector& d, const std::vector<BinaryImage>& goodware,
                                double target_fpr, const std::vector<BinaryImage>* malicious) {
  if (goodware.empty()) fail(errc::empty_corpus, "goodware set is empty");
  if (!d.probabilistic) fail(errc::unachievable, "cannot calibrate a label-only detector");
  if (target_fpr < 0.0) fail(errc::unachievable, "negative FPR target");

  std::vector<double> probs;
  probs.reserve(goodware.size());
  for (const auto& z : goodware) probs.push_back(*predict(d, z).prob);

  const double n = static_cast<double>(probs.size());
  auto fpr_at = [&](double theta) {
    size_t flagged = 0;
    for (double p : probs)
      if (p >= theta) ++flagged;
    return static_cast<double>(flagged) / n;
  };

  std::vector<double> candidates = probs;
  candidates.push_back(0.0);
  candidates.push_back(*std::max_element(probs.begin(), probs.end()) + 1e-9);
  std::sort(candidates.begin(), candidates.end());

  CalibrationResult result;
  bool found = false;
  for (double theta : candidates) {
    const double fpr = fpr_at(theta);
    if (fpr <= target_fpr) {
      result.theta = theta;
      result.achieved_fpr = fpr;
      found = true;
      break;
    }
  }
  if (!found) fail(errc::unachievable, "no threshold satisfies the FPR target");

  d.theta = result.theta;
  if (malicious && !malicious->empty()) {
    size_t caught = 0;
    for (const auto& z : *malicious)
      if (predict(d, z).label == 1) ++caught;
    result.tpr_at_theta = static_cast<double>(caught) / static_cast<double>(malicious->size());
  }
  return result;
}

bool r1(const BinaryImage& image) {
  for (const auto& s : image.sections)
    if (s.name != ".text" && s.perms.execute) return true;
  return false;
}

bool r2(const BinaryImage& image) {
  const Cfg cfg = build_cfg(image);
  for (const auto& [id, b] : cfg.blocks) {
    const auto& ins = b.instructions;
    for (size_t i = 0; i < ins.size(); ++i) {
      if (ins[i].mnemonic != Mnemonic::CALL_REL32) continue;
      size_t j = i + 1;
      while (j < ins.size() && matches_nop_grammar(ins[j])) ++j;
      if (j < ins.size() && ins[j].mnemonic == Mnemonic::JMP_REL32) return true;
    }
  }
  return false;
}

Prediction predict(const Detector& d, const BinaryImage& z) {
  Prediction out;
  if (d.kind == DetectorKind::Heuristic) {
    out.label = (d.rule == HeuristicRule::R1 ? r1(z) : r2(z)) ? 1 : 0;
    return out;
  }
  const auto x = standardize(d, features_for(d, z));
  double score = d.bias;
  for (size_t i = 0; i < x.size(); ++i) score += d.weights[i] * x[i];
  const double prob = sigmoid(score);
  out.label = prob >= d.theta ? 1 : 0;
  if (d.probabilistic) out.prob = prob;
  return out;
}

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  size_t pos = 0, neg = 0;
  double u = 0.0;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    ++pos;
    for (size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] == 1) continue;
      if (scores[i] > scores[j]) u += 1.0;
      else if (scores[i] == scores[j]) u += 0.5;
    }
  }
  for (int l : labels)
    if (l != 1) ++neg;
  if (pos == 0 || neg == 0) fail(errc::single_class_corpus, "auc needs both classes");
  return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

std::string detector_to_json(const Detector& d) {
  nlohmann::json j;
  j["kind"] = d.kind == DetectorKind::BytesNGram   ? "bytes"
              : d.kind == DetectorKind::CfgFeature ? "cfg"
                                                   : "heuristic";
  j["weights"] = d.weights;
  j["bias"] = d.bias;
  j["feat_mean"] = d.feat_mean;
  j["feat_scale"] = d.feat_scale;
  j["theta"] = d.theta;
  j["probabilistic"] = d.probabilistic;
  j["seed"] = d.seed;
  j["ngram_buckets"] = d.ngram_buckets;
  j["rule"] = d.rule == HeuristicRule::R1 ? "r1" : "r2";
  return j.dump(2);
}

Detector detector_from_json(const std::string& json_text) {
  const auto j = nlohmann::json::parse(json_text);
  Detector d;
  const auto kind = j.at("kind").get<std::string>();
  d.kind = kind == "bytes"   ? DetectorKind::BytesNGram
           : kind == "cfg"   ? DetectorKind::CfgFeature
                             : DetectorKind::Heuristic;
  d.weights = j.at("weights").get<std::vector<double>>();
  d.bias = j.at("bias").get<double>();
  d.feat_mean = j.at("feat_mean").get<std::vector<double>>();
  d.feat_scale = j.at("feat_scale").get<std::vector<double>>();
  d.theta = j.at("theta").get<double>();
  d.probabilistic = j.at("probabilistic").get<bool>();
  d.seed = j.at("seed").get<uint64_t>();
  d.ngram_buckets = j.at("ngram_buckets").get<uint32_t>();
  d.rule = j.at("rule").get<std::string>() == "r2" ? HeuristicRule::R2 : HeuristicRule::R1;
  return d;
}

ExternalDetector::ExternalDetector(const std::vector<std::string>& argv) {
  if (argv.empty()) fail(errc::detector_error, "empty external detector command");
  int to_pipe[2], from_pipe[2];
  if (pipe(to_pipe) != 0 || pipe(from_pipe) != 0)
    fail(errc::detector_error, "cannot create pipes");
  const int pid = fork();
  if (pid < 0) fail(errc::detector_error, "fork failed");
  if (pid == 0) {
    dup2(to_pipe[0], STDIN_FILENO);
    dup2(from_pipe[1], STDOUT_FILENO);
    close(to_pipe[0]);
    close(to_pipe[1]);
    close(from_pipe[0]);
    close(from_pipe[1]);
    std::vector<char*> args;
    for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
    args.push_back(nullptr);
    execvp(args[0], args.data());
    _exit(127);
  }
  close(to_pipe[0]);
  close(from_pipe[1]);
  to_child_ = to_pipe[1];
  from_child_ = from_pipe[0];
  pid_ = pid;

  char dir_template[] = "/tmp/rediv-extdet-XXXXXX";
  const char* dir = mkdtemp(dir_template);
  if (!dir) fail(errc::detector_error, "cannot create scratch dir");
  scratch_dir_ = dir;
}

ExternalDetector::~ExternalDetector() {
  if (to_child_ >= 0) close(to_child_);
  if (from_child_ >= 0) close(from_child_);
  if (pid_ > 0) {
    int status = 0;
    waitpid(pid_, &status, 0);
  }
  if (!scratch_dir_.empty()) {
    // best-effort cleanup of the query files
    for (uint64_t i = 0; i < counter_; ++i)
      ::unlink((scratch_dir_ + "/q" + std::to_string(i) + ".bin").c_str());
    ::rmdir(scratch_dir_.c_str());
  }
}

Prediction ExternalDetector::query(const BinaryImage& z) const {
  std::lock_guard<std::mutex> lock(mu_);
  const std::string path = scratch_dir_ + "/q" + std::to_string(counter_++) + ".bin";
  {
    const auto bytes = serialize_image(z);
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  }
  const std::string line = path + "\n";
  if (write(to_child_, line.data(), line.size()) != static_cast<ssize_t>(line.size()))
    fail(errc::detector_error, "external detector pipe closed");

  std::string reply;
  char c;
  while (read(from_child_, &c, 1) == 1 && c != '\n') reply.push_back(c);

  int label = -1;
  double prob = 0.0;
  const int n = std::sscanf(reply.c_str(), "LABEL %d PROB %lf", &label, &prob);
  if (n < 1 || (label != 0 && label != 1))
    fail(errc::detector_error, "bad external detector reply: " + reply);
  Prediction out;
  out.label = label;
  if (n == 2) out.prob = prob;
  return out;
}

}  // namespace rediv
