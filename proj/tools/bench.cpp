// Compares the serial reference implementations against the OpenMP-parallel
// paths: corpus feature extraction and the campaign runner.

#include <chrono>
#include <cstdio>
#include <functional>
#include <random>

#include "rediv/detect.hpp"
#include "rediv/harness.hpp"
#include "rediv/mcts.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

using namespace rediv;

namespace {

double time_s(const std::function<void()>& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  fn();
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

int main(int argc, char** argv) {
  const uint32_t per_class = argc > 1 ? static_cast<uint32_t>(atoi(argv[1])) : 150;
#ifdef _OPENMP
  const int threads = omp_get_max_threads();
#else
  const int threads = 1;
#endif
  std::printf("corpus: %u per class, %d threads\n", per_class, threads);

  CorpusSpec spec;
  spec.count_per_class = per_class;
  spec.seed = 77;
  std::vector<SynthBinary> corpus;
  const double synth_s = time_s([&] { corpus = synth_corpus(spec); });
  std::printf("synth_corpus              %8.3fs\n", synth_s);

  std::vector<FeatureVector> fa, fb;
  const double feat_serial = time_s([&] { fa = extract_corpus_features_serial(corpus); });
  const double feat_omp = time_s([&] { fb = extract_corpus_features(corpus, 0); });
  std::printf("feature extraction serial %8.3fs\n", feat_serial);
  std::printf("feature extraction omp    %8.3fs   speedup %.2fx  equal=%s\n", feat_omp,
              feat_serial / feat_omp, fa == fb ? "yes" : "NO");

  std::vector<LabeledImage> labeled;
  std::vector<BinaryImage> goodware;
  for (const auto& s : corpus) {
    labeled.push_back({s.image, s.label});
    if (s.label == 0) goodware.push_back(s.image);
  }
  std::mt19937_64 rng(1);
  Detector d = train_cfg_detector(labeled, rng);
  calibrate_fpr(d, goodware, 0.01);
  const LocalDetectorClient client(d);

  MctsConfig config;
  config.seed = 5;
  CampaignOptions serial_opts, par_opts;
  par_opts.threads = 0;

  CampaignOutputs ra, rb;
  const double camp_serial =
      time_s([&] { ra = run_campaign_serial(corpus, client, config, serial_opts); });
  const double camp_omp = time_s([&] { rb = run_campaign(corpus, client, config, par_opts); });

  bool equal = ra.report.records.size() == rb.report.records.size() &&
               ra.report.aggregates.asr == rb.report.aggregates.asr;
  for (size_t i = 0; equal && i < ra.report.records.size(); ++i)
    equal = ra.report.records[i].evaded == rb.report.records[i].evaded &&
            ra.report.records[i].queries == rb.report.records[i].queries;
  std::printf("campaign serial           %8.3fs\n", camp_serial);
  std::printf("campaign omp              %8.3fs   speedup %.2fx  equal=%s\n", camp_omp,
              camp_serial / camp_omp, equal ? "yes" : "NO");
  std::printf("asr=%.3f\n", ra.report.aggregates.asr.value_or(-1));
  return equal && fa == fb ? 0 : 1;
}
