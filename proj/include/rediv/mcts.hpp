#ifndef REDIV_MCTS_HPP
#define REDIV_MCTS_HPP

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <vector>

#include "rediv/detect.hpp"
#include "rediv/transform.hpp"

namespace rediv {

enum class FeedbackMode : uint8_t { WithProb, LabelOnly };

struct MctsConfig {
  uint32_t max_length = 6;   // N: outer rounds / sequence cap
  uint32_t budget = 40;      // C: iterations per round
  uint32_t simulations = 1;  // S: rollout depth per simulation
  double lambda = 1.0;       // exploration weight in the UCB score
  uint64_t seed = 0;
  FeedbackMode feedback = FeedbackMode::WithProb;
  double size_budget_fraction = 0.05;
  uint32_t nop_draw_max = 32;  // per-expansion generator byte cap
  std::optional<MnemonicSet> nop_whitelist;
  StubOrder stub_order = StubOrder::CallFirst;
  bool keep_tree = false;  // retain the game tree on the result (tests)
};

struct MctsNode {
  CfgState state;
  std::optional<Transformation> step;  // edge from parent; absent on the root
  uint64_t visits = 0;
  double reward = 0.0;
  std::vector<std::unique_ptr<MctsNode>> children;
  MctsNode* parent = nullptr;
};

// UCB child score: exploit + lambda * sqrt(2 ln(parent visits) / child visits).
double ucb_score(uint64_t parent_visits, uint64_t child_visits, double child_reward,
                 double lambda);

// Highest-scoring visited child; ties go to the earlier child. Throws
// NoVisitedChildren when no child has a visit yet.
MctsNode& selection(MctsNode& node, double lambda);

// Samples a call site and a fresh nop sequence, applies the step, and
// attaches the new child (zero visits until backpropagation). Oversized nop
// draws are re-rolled a bounded number of times, then the draw is clamped to
// the remaining budget. Throws NoActions.
MctsNode& expansion(MctsNode& node, std::mt19937_64& rng, const MctsConfig& config);

// Rolls S transient expansions below the node and scores the final state:
// 1 - malicious probability (WithProb) or 1 - label (LabelOnly). Exactly one
// detector query per call.
double simulate(const MctsNode& node, const DetectorClient& detector, uint32_t rollout,
                std::mt19937_64& rng, const MctsConfig& config, const BinaryImage& image,
                uint64_t& query_counter);

// Adds the reward and a visit to the node and every ancestor.
void backpropagate(MctsNode& node, double reward);

// Reconstructs the patched binary for a search state (the original image for
// the empty sequence).
BinaryImage realize_state(const BinaryImage& image, const CfgState& state);

struct RoundLog {
  uint32_t round = 0;
  uint64_t sim_queries = 0;
  double best_child_reward = 0.0;
  rva_t committed_call_addr = 0;
  bool evaded = false;
};

enum class SearchOutcome : uint8_t { Evaded, Exhausted, NoCallSites };

struct SearchResult {
  SearchOutcome outcome = SearchOutcome::Exhausted;
  TransformationSequence sequence;  // committed steps (attempted ones on failure)
  uint32_t rounds = 0;
  uint64_t queries = 0;  // simulations plus commit-time evasion checks
  std::vector<RoundLog> log;
  std::unique_ptr<MctsNode> tree;  // populated when config.keep_tree

  bool evaded() const { return outcome == SearchOutcome::Evaded; }
};

// The full search loop: per round, C coin-flipped selection/expansion
// iterations with simulation and backpropagation, then commit the child with
// the highest accumulated reward and stop early once the committed state
// evades the detector.
SearchResult search(const BinaryImage& image, const Cfg& cfg, const DetectorClient& detector,
                    const MctsConfig& config);

std::string search_log_to_json(const SearchResult& result);

}  // namespace rediv

#endif  // REDIV_MCTS_HPP
