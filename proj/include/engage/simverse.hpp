#pragma once

// Synthetic users chatting with a best-of-N system, and an A/B harness on
// top of them.
//
// Each response has a latent quality q and a "hook" h, both N(0, 1). Users
// continue, retry and rate based on them; retention depends on the mean
// quality a user has experienced. Text is templated from (q, h) so a hashed
// feature scorer can learn to read it back.

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "engage/convlog.hpp"
#include "engage/metrics.hpp"
#include "engage/scorer.hpp"
#include "json.hpp"

namespace engage::simverse {

struct UserModel {
  // P(continue) = logistic(continue_slope*q + hook_weight*h + offset_u
  //                        - fatigue*turn - latency_penalty*latency_s)
  double continue_slope = 0.6;
  double continue_offset = 0.8;
  double hook_weight = 0.6;
  // offset_u = continue_offset + min(Exp(engagement_tail), engagement_max)
  double engagement_tail = 0.65;
  double engagement_max = 7.0;
  double fatigue = 0.003;
  double latency_penalty = 0.062;

  // P(retry) = logistic((retry_threshold - q) / retry_noise). A retry draws a
  // fresh set of candidates whose qualities correlate with the rejected one.
  double retry_threshold = -1.0;
  double retry_noise = 0.4;
  double redraw_correlation = 0.6;

  // rating = 1 + #{cutpoints < q + N(0, rating_noise)}
  std::array<double, 3> star_cutpoints{-3.03, -2.37, -1.42};
  double rating_noise = 1.0;
  double rating_probability = 0.05;

  // Daily return probability retention_base^(frailty * exp(-retention_gain * mean_q)),
  // frailty ~ Gamma(frailty_shape, 1/frailty_shape). Users who miss a day churn.
  double retention_base = 0.8;
  double retention_gain = 0.3;
  double frailty_shape = 1.0;

  int max_turns = 5000;
  std::optional<int> message_cap;  // free-tier style hard stop, off by default

  // Throws Error(kInvalidArgument).
  void check() const;
  bool operator==(const UserModel&) const = default;
};

nlohmann::json to_json(const UserModel& model);
// Missing fields keep their defaults.
UserModel user_model_from_json(const nlohmann::json& j, UserModel base = {});

// Per-user draws from the population.
struct UserTraits {
  double engagement = 0.0;  // added to continue_offset
  double frailty = 1.0;
};

UserTraits draw_traits(const UserModel& model, std::uint64_t seed);

enum class ScorerKind { kNone, kOracle, kModel };

struct Policy {
  std::string name;
  bool baseline = false;
  int n = 1;
  ScorerKind scorer = ScorerKind::kNone;
  double sigma_obs = 0.0;                  // oracle observation noise
  std::shared_ptr<const Scorer> model;     // kModel
  int context_budget = 64;                 // kModel
  double added_latency_s = 0.0;

  void check() const;
};

// Greeting shared by every simulated conversation.
inline constexpr std::string_view kGreeting = "Hi there! What would you like to talk about today?";

// Maps a latent (q, h) to response text. Exposed for tests and training
// data generation.
std::string render_response(double q, double hook, std::uint64_t seed);

struct SessionStats {
  double selected_quality_sum = 0.0;  // first selection of every turn
  std::size_t selections = 0;
  double experienced_quality_sum = 0.0;  // final response of every turn
  std::size_t responses = 0;
};

struct Session {
  metrics::ConversationSummary summary;
  SessionStats stats;
  std::optional<convlog::Conversation> transcript;
};

struct SessionSpec {
  std::string conversation_id = "sim";
  std::string user_id = "sim-user";
  convlog::TimePoint started_at{};
  bool keep_transcript = true;
};

Session simulate_session(const UserModel& model, const UserTraits& traits, const Policy& policy,
                         std::uint64_t seed, const SessionSpec& spec = {});

// One conversation with a user drawn from the population. Deterministic per
// seed.
convlog::Conversation simulate_conversation(const UserModel& model, const Policy& policy,
                                            std::uint64_t rng_seed);

struct Population {
  int n_users = 1000;  // per arm
  UserModel model;
  std::uint64_t heterogeneity_seed = 0;
};

struct RetentionCurve {
  std::vector<int> days;
  std::vector<double> fractions;
  std::vector<metrics::MetricValue> values;
};

// The day grid intersected with [1, horizon].
std::vector<int> retention_days(int horizon_days);

struct ArmReport {
  std::string name;
  bool baseline = false;
  metrics::MetricValue mcl;
  metrics::MetricValue retry_rate;
  RetentionCurve retention;
  int n_users = 0;
  std::size_t n_conversations = 0;
  double mean_selected_quality = 0.0;
  std::size_t selections = 0;
};

struct Improvement {
  std::string arm;
  std::string metric;  // "mcl", "retry_rate", "retention_d<X>"
  metrics::MetricValue value;
};

struct ABReport {
  std::string baseline;
  int horizon_days = 0;
  std::vector<ArmReport> arms;
  std::vector<Improvement> improvements;

  const ArmReport& arm(std::string_view name) const;
  const Improvement& improvement(std::string_view arm, std::string_view metric) const;
};

nlohmann::json to_json(const ABReport& report);

struct RunOptions {
  metrics::BootstrapOptions bootstrap{200, 0};
  // Simulated conversations are written here in the conversation file format.
  std::ostream* conversation_log = nullptr;
  // Every arm's i-th user gets the same traits and random streams, so arm
  // differences come from the policies alone. Reported stderrs still assume
  // independent arms and are conservative in this mode.
  bool common_random_numbers = false;
  convlog::Date start_date = convlog::Date{std::chrono::days{19358}};  // 2023-01-01
};

// Disjoint cohorts of population.n_users per arm; day 0 is every user's first
// session and each later day the user returns with its daily return
// probability or churns. Throws Error(kConfig) unless exactly one arm is the
// baseline.
ABReport run_ab(std::span<const Policy> arms, const Population& population, int horizon_days,
                std::uint64_t rng_seed, const RunOptions& options = {});

// A/B experiment description, usually read from a JSON file:
//
//   {"seed": 7, "horizon_days": 30, "common_random_numbers": false,
//    "bootstrap": {"resamples": 200, "seed": 0},
//    "population": {"n_users": 5000, "heterogeneity_seed": 0, "user_model": {...}},
//    "arms": [{"name": "control", "baseline": true},
//             {"name": "bo4", "n": 4, "scorer": "oracle", "sigma_obs": 0.5},
//             {"name": "rm", "n": 4, "scorer": "model", "model": "rm.model"}]}
struct Scenario {
  std::vector<Policy> arms;
  Population population;
  int horizon_days = 30;
  std::uint64_t seed = 0;
  RunOptions options;
};

// Model paths resolve against `base_dir`. Throws Error(kConfig).
Scenario scenario_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
Scenario load_scenario(const std::filesystem::path& path);

struct CalibrationTargets {
  double mcl_latency_drop_1s = -3.01;  // percent
  double mcl_latency_drop_2s = -6.10;  // percent
  double tail_slope = -1.8;
};

struct CalibrationOptions {
  int tail_conversations = 100000;
  int latency_conversations = 100000;
  int x_min = 10;
  double max_fatigue = 0.05;
  double max_latency_penalty = 2.0;
  std::uint64_t seed = 0;
};

struct CalibrationReport {
  UserModel model;
  double tail_slope = 0.0;
  double mcl_drop_1s = 0.0;
  double mcl_drop_2s = 0.0;
};

// Bisection on fatigue for the tail slope, then on latency_penalty for the
// 1s MCL drop. Throws calibration_failed when a target cannot be met.
CalibrationReport calibrate(const UserModel& model, const CalibrationTargets& targets,
                            const CalibrationOptions& options = {});

nlohmann::json to_json(const CalibrationReport& report);

// Conversation lengths with fresh users per conversation.
std::vector<int> sample_lengths(const UserModel& model, const Policy& policy, int conversations,
                                std::uint64_t seed);

// Capped MCL over `conversations` users; shares random streams across calls
// with the same seed.
double sample_mcl(const UserModel& model, const Policy& policy, int conversations, std::uint64_t seed);

}  // namespace engage::simverse
