#include "rediv/mcts.hpp"

#include <cmath>

#include "json.hpp"
#include "rediv/error.hpp"
#include "rediv/patch.hpp"

namespace rediv {

namespace {

constexpr int kNopRerolls = 8;

bool coin_says_selection(std::mt19937_64& rng) { return (rng() >> 63) == 0; }

// Draws one applicable step for the state, or nullopt when nothing fits the
// remaining nop budget.
std::optional<Transformation> draw_action(const CfgState& state, std::mt19937_64& rng,
                                          const MctsConfig& config) {
  const auto actions = enumerate_actions(state);
  if (actions.empty()) return std::nullopt;
  const uint32_t remaining = state.budget_bytes - state.nop_bytes_used;
  if (remaining == 0) return std::nullopt;

  Transformation t;
  t.call_site = actions[rng() % actions.size()];
  for (int attempt = 0;; ++attempt) {
    const uint32_t cap = attempt < kNopRerolls ? config.nop_draw_max
                                               : std::min(config.nop_draw_max, remaining);
    try {
      t.nops = generate_nops(rng, cap, config.nop_whitelist);
    } catch (const Error& e) {
      if (e.code() == errc::budget_too_small) return std::nullopt;
      throw;
    }
    if (t.nops.byte_len <= remaining) return t;
    if (attempt >= kNopRerolls) return std::nullopt;
  }
}

double reward_of(const Prediction& p, FeedbackMode mode) {
  if (mode == FeedbackMode::WithProb) {
    if (!p.prob) fail(errc::detector_error, "detector gave no probability in WithProb mode");
    return 1.0 - *p.prob;
  }
  return 1.0 - static_cast<double>(p.label);
}

}  // namespace

double ucb_score(uint64_t parent_visits, uint64_t child_visits, double child_reward,
                 double lambda) {
  const double exploit = child_reward / static_cast<double>(child_visits);
  const double explore =
      std::sqrt(2.0 * std::log(static_cast<double>(parent_visits)) /
                static_cast<double>(child_visits));
  return exploit + lambda * explore;
}

MctsNode& selection(MctsNode& node, double lambda) {
  MctsNode* best = nullptr;
  double best_score = 0.0;
  for (const auto& child : node.children) {
    if (child->visits == 0) continue;
    const double score = ucb_score(node.visits, child->visits, child->reward, lambda);
    if (!best || score > best_score) {
      best = child.get();
      best_score = score;
    }
  }
  if (!best) fail(errc::no_visited_children, "selection needs a visited child");
  return *best;
}

MctsNode& expansion(MctsNode& node, std::mt19937_64& rng, const MctsConfig& config) {
  auto action = draw_action(node.state, rng, config);
  if (!action) fail(errc::no_actions, "no applicable transformation");
  auto child = std::make_unique<MctsNode>();
  child->state = apply_redividing(node.state, *action);
  child->step = child->state.applied.steps.back();
  child->parent = &node;
  node.children.push_back(std::move(child));
  return *node.children.back();
}

double simulate(const MctsNode& node, const DetectorClient& detector, uint32_t rollout,
                std::mt19937_64& rng, const MctsConfig& config, const BinaryImage& image,
                uint64_t& query_counter) {
  CfgState state = node.state;
  for (uint32_t i = 0; i < rollout; ++i) {
    auto action = draw_action(state, rng, config);
    if (!action) break;  // budget or actions exhausted mid-rollout
    state = apply_redividing(state, *action);
  }
  ++query_counter;
  return reward_of(detector.query(realize_state(image, state)), config.feedback);
}

void backpropagate(MctsNode& node, double reward) {
  for (MctsNode* n = &node; n; n = n->parent) {
    n->visits += 1;
    n->reward += reward;
  }
}

BinaryImage realize_state(const BinaryImage& image, const CfgState& state) {
  if (state.applied.steps.empty()) return image;
  const PatchPlan plan = plan_patch(image, state.applied);
  return adv_patch(image, state.applied, plan);
}

SearchResult search(const BinaryImage& image, const Cfg& cfg, const DetectorClient& detector,
                    const MctsConfig& config) {
  if (config.max_length == 0 || config.budget == 0 || config.simulations == 0 ||
      config.lambda < 0.0 || config.size_budget_fraction <= 0.0 ||
      config.size_budget_fraction > 1.0)
    fail(errc::invariant_violation, "bad search configuration");

  SearchResult result;
  result.sequence.order = config.stub_order;

  auto root = std::make_unique<MctsNode>();
  root->state = make_base_state(cfg, static_cast<uint32_t>(serialize_image(image).size()),
                                config.size_budget_fraction, config.stub_order);
  if (root->state.cfg.call_sites.empty()) {
    result.outcome = SearchOutcome::NoCallSites;
    if (config.keep_tree) result.tree = std::move(root);
    return result;
  }

  std::mt19937_64 rng(config.seed);
  MctsNode* current = root.get();

  for (uint32_t round = 1; round <= config.max_length; ++round) {
    RoundLog log;
    log.round = round;

    for (uint32_t iter = 0; iter < config.budget; ++iter) {
      MctsNode* picked = nullptr;
      const bool want_selection = coin_says_selection(rng);
      if (want_selection) {
        try {
          picked = &selection(*current, config.lambda);
        } catch (const Error& e) {
          if (e.code() != errc::no_visited_children) throw;
        }
      }
      if (!picked) {
        try {
          picked = &expansion(*current, rng, config);
        } catch (const Error& e) {
          if (e.code() != errc::no_actions) throw;
          if (!current->children.empty()) picked = &selection(*current, config.lambda);
        }
      }
      if (!picked) break;  // nothing to explore below this root

      uint64_t sim_queries = 0;
      const double reward =
          simulate(*picked, detector, config.simulations, rng, config, image, sim_queries);
      log.sim_queries += sim_queries;
      result.queries += sim_queries;
      backpropagate(*picked, reward);
    }

    if (current->children.empty()) break;  // exhausted without any viable step

    MctsNode* committed = nullptr;
    for (const auto& child : current->children)
      if (!committed || child->reward > committed->reward) committed = child.get();

    result.sequence.steps.push_back(*committed->step);
    result.rounds = round;
    log.best_child_reward = committed->reward;
    log.committed_call_addr = committed->step->call_addr;

    ++result.queries;  // commit-time evasion check
    const Prediction verdict = detector.query(realize_state(image, committed->state));
    if (verdict.label == 0) {
      log.evaded = true;
      result.log.push_back(log);
      result.outcome = SearchOutcome::Evaded;
      if (config.keep_tree) result.tree = std::move(root);
      return result;
    }
    result.log.push_back(log);
    current = committed;
  }

  result.outcome = SearchOutcome::Exhausted;
  if (config.keep_tree) result.tree = std::move(root);
  return result;
}

std::string search_log_to_json(const SearchResult& result) {
  nlohmann::json j;
  j["outcome"] = result.outcome == SearchOutcome::Evaded      ? "evaded"
                 : result.outcome == SearchOutcome::Exhausted ? "exhausted"
                                                              : "no_call_sites";
  j["rounds"] = result.rounds;
  j["queries"] = result.queries;
  j["log"] = nlohmann::json::array();
  for (const auto& r : result.log) {
    nlohmann::json e;
    e["round"] = r.round;
    e["sim_queries"] = r.sim_queries;
    e["best_child_reward"] = r.best_child_reward;
    e["committed_call_addr"] = r.committed_call_addr;
    e["evaded"] = r.evaded;
    j["log"].push_back(std::move(e));
  }
  return j.dump(2);
}

}  // namespace rediv
