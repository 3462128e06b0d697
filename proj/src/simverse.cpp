#include "engage/simverse.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <ostream>

#include "engage/error.hpp"
#include "engage/hash.hpp"
#include "engage/labeler.hpp"
#include "engage/random.hpp"
#include "engage/reward.hpp"
#include "engage/selector.hpp"

namespace engage::simverse {

using nlohmann::json;

namespace {

enum Stream : std::uint64_t {
  kCandidates = 1,
  kBehavior = 2,
  kText = 3,
  kObservation = 4,
  kRedraw = 5,
  kTraits = 6,
  kSession = 7,
  kChurn = 8,
};

constexpr std::array<std::array<std::string_view, 3>, 7> kQualityWords{{
    {"dull", "meh", "whatever"},
    {"bland", "plain", "fine"},
    {"sure", "alright", "okay"},
    {"nice", "good", "cool"},
    {"great", "lovely", "fun"},
    {"wonderful", "brilliant", "delightful"},
    {"amazing", "incredible", "magical"},
}};

constexpr std::array<std::array<std::string_view, 2>, 4> kHookWords{{
    {"anyway.", "whatever."},
    {"so...", "right."},
    {"really?", "listen!"},
    {"secret!", "promise?!"},
}};

constexpr std::array<std::string_view, 16> kFiller{"I",     "think", "we",  "could", "talk", "about",
                                                   "that",  "the",   "story", "you", "and",  "me",
                                                   "here",  "now",   "it",  "is"};

constexpr std::array<std::string_view, 16> kUserMessages{
    "tell me more", "what do you mean?", "haha okay",         "and then?",
    "why?",         "I like that",       "go on",             "really?",
    "that's interesting", "hmm",         "what happened next?", "no way",
    "ok",           "cool",              "can you explain?",  "lol"};

constexpr double kTextNoise = 0.5;

// Random source with a persistent normal generator so paired draws are not
// wasted.
class Source {
 public:
  explicit Source(std::uint64_t seed) : rng_(seed) {}
  double uniform() { return uniform01(rng_); }
  double gauss() { return normal_(rng_); }
  std::uint64_t bits() { return rng_(); }

 private:
  Rng rng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

struct Candidate {
  double q = 0.0;
  double hook = 0.0;
  std::uint64_t text_seed = 0;
};

int bucket(double x, double width, int tiers) {
  const int mid = tiers / 2;
  const double shifted = std::floor(x / width + 0.5) + mid;
  return static_cast<int>(std::clamp(shifted, 0.0, static_cast<double>(tiers - 1)));
}

int star_rating(const UserModel& m, double q, double z) {
  const double x = q + m.rating_noise * z;
  int r = 1;
  for (double c : m.star_cutpoints) {
    r += c < x ? 1 : 0;
  }
  return r;
}

bool keeps_text(const Policy& policy, const SessionSpec& spec) {
  return spec.keep_transcript || policy.scorer == ScorerKind::kModel;
}

class SessionRunner {
 public:
  SessionRunner(const UserModel& model, const UserTraits& traits, const Policy& policy,
                std::uint64_t seed, const SessionSpec& spec)
      : m_(model),
        traits_(traits),
        policy_(policy),
        spec_(spec),
        candidates_(derive_seed(seed, kCandidates)),
        behavior_(derive_seed(seed, kBehavior)),
        text_(derive_seed(seed, kText)),
        observation_(derive_seed(seed, kObservation)),
        redraw_(derive_seed(seed, kRedraw)),
        with_text_(keeps_text(policy, spec)) {}

  Session run() {
    Session s;
    convlog::Conversation conv;
    conv.id = spec_.conversation_id;
    conv.user_id = spec_.user_id;
    conv.character_id = "sim-character";
    conv.started_at = spec_.started_at;
    conv.greeting = std::string(kGreeting);
    s.summary.user_key = fnv1a(spec_.user_id);

    const double offset = m_.continue_offset + traits_.engagement;
    const double latency_term = m_.latency_penalty * policy_.added_latency_s;
    const int limit = m_.message_cap ? std::min(*m_.message_cap, m_.max_turns) : m_.max_turns;
    const auto n = static_cast<std::size_t>(policy_.n);
    std::vector<Candidate> pool(n);

    for (int turn = 1;; ++turn) {
      const std::string_view user_message = kUserMessages[text_.bits() % kUserMessages.size()];
      for (auto& c : pool) {
        c.q = candidates_.gauss();
        c.hook = candidates_.gauss();
        c.text_seed = text_.bits();
      }
      Candidate chosen = pool[select(pool, conv, user_message)];
      s.stats.selected_quality_sum += chosen.q;
      s.stats.selections += 1;

      const double u_retry = behavior_.uniform();
      const double u_rate = behavior_.uniform();
      const double z_star = behavior_.gauss();
      const double u_continue = behavior_.uniform();

      bool regenerated = false;
      if (u_retry < logistic((m_.retry_threshold - chosen.q) / m_.retry_noise)) {
        regenerated = true;
        const double rho = m_.redraw_correlation;
        const double spread = std::sqrt(1.0 - rho * rho);
        for (auto& c : pool) {
          c.q = rho * chosen.q + spread * redraw_.gauss();
          c.hook = redraw_.gauss();
          c.text_seed = redraw_.bits();
        }
        chosen = pool[select(pool, conv, user_message)];
      }
      std::optional<int> stars;
      if (u_rate < m_.rating_probability) {
        stars = star_rating(m_, chosen.q, z_star);
        s.summary.star_counts[static_cast<std::size_t>(*stars - 1)] += 1;
      }
      s.summary.length += 1;
      s.summary.regenerated += regenerated ? 1 : 0;
      s.stats.experienced_quality_sum += chosen.q;
      s.stats.responses += 1;

      if (with_text_) {
        convlog::Turn t;
        t.user_message = std::string(user_message);
        t.response.text = render_response(chosen.q, chosen.hook, chosen.text_seed);
        t.response.regenerated = regenerated;
        t.response.star_rating = stars;
        t.response.latency_ms = std::llround(policy_.added_latency_s * 1000.0);
        conv.turns.push_back(std::move(t));
      }

      const double z = m_.continue_slope * chosen.q + m_.hook_weight * chosen.hook + offset -
                       m_.fatigue * turn - latency_term;
      if (turn >= limit || u_continue >= logistic(z)) {
        break;
      }
    }
    if (spec_.keep_transcript) {
      s.transcript = std::move(conv);
    }
    return s;
  }

 private:
  std::size_t select(std::span<const Candidate> pool, const convlog::Conversation& conv,
                     std::string_view user_message) {
    if (pool.size() == 1) {
      return 0;
    }
    switch (policy_.scorer) {
      case ScorerKind::kNone:
        return 0;
      case ScorerKind::kOracle: {
        std::vector<double> observed(pool.size());
        for (std::size_t i = 0; i < pool.size(); ++i) {
          observed[i] = pool[i].q + (policy_.sigma_obs > 0.0 ? policy_.sigma_obs * observation_.gauss() : 0.0);
        }
        return selector::argmax(observed);
      }
      case ScorerKind::kModel: {
        std::vector<std::string> texts;
        texts.reserve(pool.size());
        for (const auto& c : pool) {
          texts.push_back(render_response(c.q, c.hook, c.text_seed));
        }
        const auto window =
            labeler::render_context(conv.greeting, conv.turns, user_message, policy_.context_budget);
        return static_cast<std::size_t>(selector::best_of_n(texts, window.text, *policy_.model).chosen_index);
      }
    }
    return 0;
  }

  const UserModel& m_;
  const UserTraits& traits_;
  const Policy& policy_;
  const SessionSpec& spec_;
  Source candidates_;
  Source behavior_;
  Source text_;
  Source observation_;
  Source redraw_;
  bool with_text_;
};

void require(bool ok, const std::string& what) {
  if (!ok) {
    throw Error(ErrorCode::kInvalidArgument, what);
  }
}

json metric_json(const metrics::MetricValue& v) {
  return json{{"value", v.value}, {"stderr", v.std_error ? json(*v.std_error) : json(nullptr)}, {"n", v.n}};
}

Session conversation_with_fresh_user(const UserModel& model, const Policy& policy, std::uint64_t seed,
                                     bool keep_transcript) {
  const UserTraits traits = draw_traits(model, derive_seed(seed, kTraits));
  SessionSpec spec;
  spec.keep_transcript = keep_transcript;
  spec.conversation_id = "sim-" + std::to_string(seed);
  spec.user_id = "sim-user-" + std::to_string(seed);
  return simulate_session(model, traits, policy, derive_seed(seed, kSession), spec);
}

}  // namespace

void UserModel::check() const {
  require(continue_slope > 0.0 && std::isfinite(continue_slope), "continue_slope must be > 0");
  require(!std::isnan(continue_offset) && continue_offset < INFINITY, "continue_offset must be < +inf");
  require(std::isfinite(hook_weight) && hook_weight >= 0.0, "hook_weight must be >= 0");
  require(engagement_tail > 0.0, "engagement_tail must be > 0");
  require(engagement_max >= 0.0, "engagement_max must be >= 0");
  require(fatigue >= 0.0, "fatigue must be >= 0");
  require(latency_penalty >= 0.0, "latency_penalty must be >= 0");
  require(std::isfinite(retry_threshold), "retry_threshold must be finite");
  require(retry_noise > 0.0, "retry_noise must be > 0");
  require(redraw_correlation >= 0.0 && redraw_correlation < 1.0, "redraw_correlation must be in [0, 1)");
  require(star_cutpoints[0] < star_cutpoints[1] && star_cutpoints[1] < star_cutpoints[2],
          "star_cutpoints must be increasing");
  require(rating_noise >= 0.0, "rating_noise must be >= 0");
  require(rating_probability >= 0.0 && rating_probability <= 1.0, "rating_probability must be in [0, 1]");
  require(retention_base > 0.0 && retention_base < 1.0, "retention_base must be in (0, 1)");
  require(retention_gain >= 0.0, "retention_gain must be >= 0");
  require(frailty_shape > 0.0, "frailty_shape must be > 0");
  require(max_turns >= 1, "max_turns must be >= 1");
  require(!message_cap || *message_cap >= 1, "message_cap must be >= 1");
}

json to_json(const UserModel& m) {
  return json{{"continue_slope", m.continue_slope},
              {"continue_offset", m.continue_offset},
              {"hook_weight", m.hook_weight},
              {"engagement_tail", m.engagement_tail},
              {"engagement_max", m.engagement_max},
              {"fatigue", m.fatigue},
              {"latency_penalty", m.latency_penalty},
              {"retry_threshold", m.retry_threshold},
              {"retry_noise", m.retry_noise},
              {"redraw_correlation", m.redraw_correlation},
              {"star_cutpoints", m.star_cutpoints},
              {"rating_noise", m.rating_noise},
              {"rating_probability", m.rating_probability},
              {"retention_base", m.retention_base},
              {"retention_gain", m.retention_gain},
              {"frailty_shape", m.frailty_shape},
              {"max_turns", m.max_turns},
              {"message_cap", m.message_cap ? json(*m.message_cap) : json(nullptr)}};
}

UserModel user_model_from_json(const json& j, UserModel m) {
  if (!j.is_object()) {
    throw Error(ErrorCode::kConfig, "user model must be an object");
  }
  const json known = to_json(m);
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) {
      throw Error(ErrorCode::kConfig, "unknown user model field '" + key + "'");
    }
  }
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) {
        j.at(key).get_to(field);
      }
    };
    get("continue_slope", m.continue_slope);
    get("continue_offset", m.continue_offset);
    get("hook_weight", m.hook_weight);
    get("engagement_tail", m.engagement_tail);
    get("engagement_max", m.engagement_max);
    get("fatigue", m.fatigue);
    get("latency_penalty", m.latency_penalty);
    get("retry_threshold", m.retry_threshold);
    get("retry_noise", m.retry_noise);
    get("redraw_correlation", m.redraw_correlation);
    get("star_cutpoints", m.star_cutpoints);
    get("rating_noise", m.rating_noise);
    get("rating_probability", m.rating_probability);
    get("retention_base", m.retention_base);
    get("retention_gain", m.retention_gain);
    get("frailty_shape", m.frailty_shape);
    get("max_turns", m.max_turns);
    if (j.contains("message_cap")) {
      m.message_cap = j["message_cap"].is_null() ? std::nullopt : std::optional<int>(j["message_cap"].get<int>());
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kConfig, std::string("bad user model: ") + e.what());
  }
  try {
    m.check();
  } catch (const Error& e) {
    throw Error(ErrorCode::kConfig, e.what());
  }
  return m;
}

UserTraits draw_traits(const UserModel& model, std::uint64_t seed) {
  Rng rng(seed);
  std::exponential_distribution<double> engagement(model.engagement_tail);
  std::gamma_distribution<double> frailty(model.frailty_shape, 1.0 / model.frailty_shape);
  UserTraits t;
  t.engagement = std::min(engagement(rng), model.engagement_max);
  t.frailty = frailty(rng);
  return t;
}

void Policy::check() const {
  require(n >= 1, "policy n must be >= 1");
  require(sigma_obs >= 0.0, "sigma_obs must be >= 0");
  require(added_latency_s >= 0.0, "added_latency_s must be >= 0");
  require(scorer != ScorerKind::kModel || model != nullptr, "model policy needs a scorer");
  require(context_budget >= 1, "context_budget must be >= 1");
}

std::string render_response(double q, double hook, std::uint64_t seed) {
  SplitMix64 rng(seed);
  std::normal_distribution<double> noise(0.0, kTextNoise);
  auto quality = [&] {
    const auto tier = static_cast<std::size_t>(bucket(q + noise(rng), 0.5, 7));
    return kQualityWords[tier][rng() % 3];
  };
  auto hook_word = [&] {
    const auto tier = static_cast<std::size_t>(bucket(hook + noise(rng) + 0.5, 1.0, 4));
    return kHookWords[tier][rng() % 2];
  };
  auto filler = [&] { return kFiller[rng() % kFiller.size()]; };

  std::string out;
  auto add = [&](std::string_view w) {
    if (!out.empty()) {
      out.push_back(' ');
    }
    out.append(w);
  };
  add(filler());
  add(quality());
  add(filler());
  add(quality());
  add(hook_word());
  const int extra = static_cast<int>(rng() % 3);
  for (int i = 0; i < extra; ++i) {
    add(filler());
  }
  add(quality());
  add(hook_word());
  return out;
}

Session simulate_session(const UserModel& model, const UserTraits& traits, const Policy& policy,
                         std::uint64_t seed, const SessionSpec& spec) {
  return SessionRunner(model, traits, policy, seed, spec).run();
}

convlog::Conversation simulate_conversation(const UserModel& model, const Policy& policy,
                                            std::uint64_t rng_seed) {
  model.check();
  policy.check();
  return *conversation_with_fresh_user(model, policy, rng_seed, true).transcript;
}

std::vector<int> sample_lengths(const UserModel& model, const Policy& policy, int conversations,
                                std::uint64_t seed) {
  model.check();
  policy.check();
  std::vector<int> lengths;
  lengths.reserve(static_cast<std::size_t>(std::max(conversations, 0)));
  for (int c = 0; c < conversations; ++c) {
    lengths.push_back(
        conversation_with_fresh_user(model, policy, derive_seed(seed, static_cast<std::uint64_t>(c)), false)
            .summary.length);
  }
  return lengths;
}

double sample_mcl(const UserModel& model, const Policy& policy, int conversations, std::uint64_t seed) {
  const auto lengths = sample_lengths(model, policy, conversations, seed);
  double sum = 0.0;
  std::size_t n = 0;
  for (int len : lengths) {
    if (len <= metrics::kDefaultMclCap) {
      sum += len;
      ++n;
    }
  }
  if (n == 0) {
    throw Error(ErrorCode::kNoSamples, "no conversations within the MCL cap");
  }
  return sum / static_cast<double>(n);
}

std::vector<int> retention_days(int horizon_days) {
  static constexpr std::array<int, 12> kGrid{1, 2, 3, 4, 5, 6, 7, 10, 15, 20, 25, 30};
  std::vector<int> days;
  for (int d : kGrid) {
    if (d <= horizon_days) {
      days.push_back(d);
    }
  }
  return days;
}

const ArmReport& ABReport::arm(std::string_view name) const {
  for (const auto& a : arms) {
    if (a.name == name) {
      return a;
    }
  }
  throw Error(ErrorCode::kInvalidArgument, "no arm named '" + std::string(name) + "'");
}

const Improvement& ABReport::improvement(std::string_view arm_name, std::string_view metric) const {
  for (const auto& i : improvements) {
    if (i.arm == arm_name && i.metric == metric) {
      return i;
    }
  }
  throw Error(ErrorCode::kInvalidArgument,
              "no improvement '" + std::string(metric) + "' for arm '" + std::string(arm_name) + "'");
}

json to_json(const ABReport& r) {
  json arms = json::array();
  for (const auto& a : r.arms) {
    json curve = json::array();
    for (std::size_t i = 0; i < a.retention.days.size(); ++i) {
      json point = metric_json(a.retention.values[i]);
      point["day"] = a.retention.days[i];
      curve.push_back(std::move(point));
    }
    arms.push_back(json{{"name", a.name},
                        {"baseline", a.baseline},
                        {"mcl", metric_json(a.mcl)},
                        {"retry_rate", metric_json(a.retry_rate)},
                        {"retention", std::move(curve)},
                        {"n_users", a.n_users},
                        {"n_conversations", a.n_conversations},
                        {"mean_selected_quality", a.mean_selected_quality}});
  }
  json improvements = json::array();
  for (const auto& i : r.improvements) {
    json item = metric_json(i.value);
    item["arm"] = i.arm;
    item["metric"] = i.metric;
    improvements.push_back(std::move(item));
  }
  return json{{"baseline", r.baseline},
              {"horizon_days", r.horizon_days},
              {"arms", std::move(arms)},
              {"improvements", std::move(improvements)}};
}

ABReport run_ab(std::span<const Policy> arms, const Population& population, int horizon_days,
                std::uint64_t rng_seed, const RunOptions& options) {
  if (arms.size() < 2) {
    throw Error(ErrorCode::kConfig, "an A/B run needs at least two arms");
  }
  const auto baselines = std::count_if(arms.begin(), arms.end(), [](const Policy& p) { return p.baseline; });
  if (baselines != 1) {
    throw Error(ErrorCode::kConfig, baselines == 0 ? "no baseline arm designated"
                                                   : "more than one baseline arm designated");
  }
  for (std::size_t a = 0; a < arms.size(); ++a) {
    if (arms[a].name.empty()) {
      throw Error(ErrorCode::kConfig, "every arm needs a name");
    }
    for (std::size_t b = 0; b < a; ++b) {
      if (arms[a].name == arms[b].name) {
        throw Error(ErrorCode::kConfig, "duplicate arm name '" + arms[a].name + "'");
      }
    }
    try {
      arms[a].check();
    } catch (const Error& e) {
      throw Error(ErrorCode::kConfig, "arm '" + arms[a].name + "': " + e.what());
    }
  }
  if (population.n_users < 100) {
    throw Error(ErrorCode::kConfig, "population needs at least 100 users per arm");
  }
  if (horizon_days < 1) {
    throw Error(ErrorCode::kConfig, "horizon_days must be >= 1");
  }
  population.model.check();
  const UserModel& m = population.model;
  const double log_base = std::log(m.retention_base);
  const convlog::Date observed_through = options.start_date + std::chrono::days(horizon_days);
  const auto grid = retention_days(horizon_days);

  ABReport report;
  report.horizon_days = horizon_days;
  for (std::size_t a = 0; a < arms.size(); ++a) {
    const Policy& policy = arms[a];
    ArmReport arm;
    arm.name = policy.name;
    arm.baseline = policy.baseline;
    arm.n_users = population.n_users;
    if (policy.baseline) {
      report.baseline = policy.name;
    }
    std::vector<metrics::ConversationSummary> summaries;
    std::vector<convlog::UserActivity> activity;
    activity.reserve(static_cast<std::size_t>(population.n_users));
    double selected_sum = 0.0;

    for (int i = 0; i < population.n_users; ++i) {
      const auto user_index = static_cast<std::uint64_t>(i);
      const std::uint64_t stream = options.common_random_numbers ? 0 : a;
      const UserTraits traits = draw_traits(m, derive_seed(population.heterogeneity_seed, stream, user_index));
      const std::uint64_t user_seed = derive_seed(rng_seed, stream, user_index);
      Rng churn(derive_seed(user_seed, kChurn));
      convlog::UserActivity user;
      user.user_id = policy.name + "-u" + std::to_string(i);
      user.first_conversation_date = options.start_date;
      double quality_sum = 0.0;
      std::size_t responses = 0;

      for (int day = 0; day <= horizon_days; ++day) {
        if (day > 0) {
          const double mean_q = quality_sum / static_cast<double>(responses);
          const double p_return = std::exp(log_base * traits.frailty * std::exp(-m.retention_gain * mean_q));
          if (uniform01(churn) >= p_return) {
            break;
          }
        }
        const convlog::Date date = options.start_date + std::chrono::days(day);
        SessionSpec spec;
        spec.user_id = user.user_id;
        spec.conversation_id = user.user_id + "-d" + std::to_string(day);
        spec.started_at = std::chrono::time_point_cast<std::chrono::milliseconds>(
            convlog::TimePoint(date) + std::chrono::hours(9) + std::chrono::minutes(i % 600));
        spec.keep_transcript = options.conversation_log != nullptr;
        Session s = simulate_session(m, traits, policy, derive_seed(user_seed, static_cast<std::uint64_t>(day)),
                                     spec);
        if (s.transcript) {
          convlog::write_conversation(*options.conversation_log, *s.transcript);
        }
        quality_sum += s.stats.experienced_quality_sum;
        responses += s.stats.responses;
        selected_sum += s.stats.selected_quality_sum;
        arm.selections += s.stats.selections;
        summaries.push_back(s.summary);
        user.active_dates.insert(date);
      }
      activity.push_back(std::move(user));
    }

    arm.n_conversations = summaries.size();
    arm.mean_selected_quality = selected_sum / static_cast<double>(arm.selections);
    metrics::BootstrapOptions boot = options.bootstrap;
    boot.seed = derive_seed(options.bootstrap.seed, a);
    arm.mcl = metrics::mcl(summaries, {metrics::kDefaultMclCap, metrics::ClusterBy::kUser, boot});
    arm.retry_rate = metrics::retry_rate(summaries, {metrics::ClusterBy::kUser, boot});
    arm.retention.days = grid;
    for (int d : grid) {
      const auto v = metrics::retention(activity, d, observed_through);
      arm.retention.fractions.push_back(v.value);
      arm.retention.values.push_back(v);
    }
    report.arms.push_back(std::move(arm));
  }

  const ArmReport& base = report.arm(report.baseline);
  for (const auto& arm : report.arms) {
    if (arm.baseline) {
      continue;
    }
    auto add = [&](std::string metric, const metrics::MetricValue& t, const metrics::MetricValue& b) {
      if (b.value != 0.0) {
        report.improvements.push_back(Improvement{arm.name, std::move(metric), metrics::relative_improvement(t, b)});
      }
    };
    add("mcl", arm.mcl, base.mcl);
    add("retry_rate", arm.retry_rate, base.retry_rate);
    for (std::size_t k = 0; k < grid.size(); ++k) {
      add("retention_d" + std::to_string(grid[k]), arm.retention.values[k], base.retention.values[k]);
    }
  }
  return report;
}

namespace {

struct Probe {
  double parameter = 0.0;
  double value = 0.0;
};

// Bisection for f(x) = target with f decreasing on [lo, hi]. Returns the
// probe closest to the target.
template <typename F>
Probe bisect_decreasing(F f, double lo, double hi, double target, int iterations) {
  Probe best{lo, f(lo)};
  if (best.value <= target) {
    return best;
  }
  Probe high{hi, f(hi)};
  if (high.value >= target) {
    return high;
  }
  for (int it = 0; it < iterations; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double v = f(mid);
    if (std::abs(v - target) < std::abs(best.value - target)) {
      best = {mid, v};
    }
    (v > target ? lo : hi) = mid;
  }
  if (std::abs(high.value - target) < std::abs(best.value - target)) {
    best = high;
  }
  return best;
}

}  // namespace

CalibrationReport calibrate(const UserModel& model, const CalibrationTargets& targets,
                            const CalibrationOptions& options) {
  if (!std::isfinite(targets.mcl_latency_drop_1s) || !std::isfinite(targets.mcl_latency_drop_2s) ||
      !std::isfinite(targets.tail_slope)) {
    throw Error(ErrorCode::kInvalidArgument, "calibration targets must be finite");
  }
  model.check();
  CalibrationReport report;
  report.model = model;
  Policy baseline;
  baseline.name = "baseline";

  const std::uint64_t tail_seed = derive_seed(options.seed, 1);
  auto slope_at = [&](double fatigue) {
    UserModel m = report.model;
    m.fatigue = fatigue;
    const auto lengths = sample_lengths(m, baseline, options.tail_conversations, tail_seed);
    return metrics::fit_power_law_tail(lengths, options.x_min).value("slope");
  };
  const Probe tail = bisect_decreasing(slope_at, 0.0, options.max_fatigue, targets.tail_slope, 14);
  report.model.fatigue = tail.parameter;
  report.tail_slope = tail.value;
  if (std::abs(tail.value - targets.tail_slope) > 0.2) {
    throw Error(ErrorCode::kCalibrationFailed,
                "tail slope target " + std::to_string(targets.tail_slope) + " unreachable; best " +
                    std::to_string(tail.value) + " at fatigue " + std::to_string(tail.parameter) +
                    " (residual " + std::to_string(tail.value - targets.tail_slope) + ")");
  }

  const std::uint64_t latency_seed = derive_seed(options.seed, 2);
  auto drop_at = [&](double penalty, double seconds) {
    UserModel m = report.model;
    m.latency_penalty = penalty;
    Policy slow = baseline;
    slow.added_latency_s = seconds;
    const double base = sample_mcl(m, baseline, options.latency_conversations, latency_seed);
    const double treated = sample_mcl(m, slow, options.latency_conversations, latency_seed);
    return 100.0 * (treated - base) / base;
  };
  if (targets.mcl_latency_drop_1s >= 0.0) {
    report.model.latency_penalty = 0.0;
    report.mcl_drop_1s = drop_at(0.0, 1.0);
  } else {
    const Probe p = bisect_decreasing([&](double x) { return drop_at(x, 1.0); }, 0.0,
                                      options.max_latency_penalty, targets.mcl_latency_drop_1s, 16);
    report.model.latency_penalty = p.parameter;
    report.mcl_drop_1s = p.value;
  }
  report.mcl_drop_2s = drop_at(report.model.latency_penalty, 2.0);

  auto within = [](double got, double want) {
    return want == 0.0 ? std::abs(got) < 0.1 : std::abs(got - want) <= 0.2 * std::abs(want);
  };
  if (!within(report.mcl_drop_1s, targets.mcl_latency_drop_1s)) {
    throw Error(ErrorCode::kCalibrationFailed,
                "1s latency MCL drop target " + std::to_string(targets.mcl_latency_drop_1s) +
                    "% unreachable; best " + std::to_string(report.mcl_drop_1s) + "%");
  }
  if (!within(report.mcl_drop_2s, targets.mcl_latency_drop_2s)) {
    throw Error(ErrorCode::kCalibrationFailed,
                "2s latency MCL drop " + std::to_string(report.mcl_drop_2s) + "% misses target " +
                    std::to_string(targets.mcl_latency_drop_2s) + "% (residual " +
                    std::to_string(report.mcl_drop_2s - targets.mcl_latency_drop_2s) + ")");
  }
  return report;
}

json to_json(const CalibrationReport& r) {
  return json{{"model", to_json(r.model)},
              {"tail_slope", r.tail_slope},
              {"mcl_drop_1s", r.mcl_drop_1s},
              {"mcl_drop_2s", r.mcl_drop_2s}};
}

namespace {

void only_keys(const json& j, std::initializer_list<std::string_view> keys, const std::string& where) {
  if (!j.is_object()) {
    throw Error(ErrorCode::kConfig, where + " must be an object");
  }
  for (const auto& [key, value] : j.items()) {
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) {
      throw Error(ErrorCode::kConfig, "unknown field '" + key + "' in " + where);
    }
  }
}

Policy policy_from_json(const json& j, const std::filesystem::path& base_dir) {
  only_keys(j, {"name", "baseline", "n", "scorer", "sigma_obs", "model", "context_budget", "added_latency_s"},
            "arm");
  Policy p;
  p.name = j.at("name").get<std::string>();
  p.baseline = j.value("baseline", false);
  p.n = j.value("n", 1);
  const std::string scorer = j.value("scorer", std::string(p.n == 1 ? "none" : "oracle"));
  if (scorer == "none") {
    p.scorer = ScorerKind::kNone;
  } else if (scorer == "oracle") {
    p.scorer = ScorerKind::kOracle;
  } else if (scorer == "model") {
    p.scorer = ScorerKind::kModel;
  } else {
    throw Error(ErrorCode::kConfig, "arm '" + p.name + "': unknown scorer '" + scorer + "'");
  }
  p.sigma_obs = j.value("sigma_obs", 0.0);
  p.added_latency_s = j.value("added_latency_s", 0.0);
  if (p.scorer == ScorerKind::kModel) {
    if (!j.contains("model")) {
      throw Error(ErrorCode::kConfig, "arm '" + p.name + "': scorer \"model\" needs a model path");
    }
    std::filesystem::path path = j.at("model").get<std::string>();
    if (path.is_relative()) {
      path = base_dir / path;
    }
    auto model = std::make_shared<const reward::TrainedScorer>(reward::load_model(path));
    p.context_budget = j.value("context_budget", model->meta.context_budget);
    p.model = std::make_shared<reward::ModelScorer>(model);
  } else {
    p.context_budget = j.value("context_budget", p.context_budget);
  }
  try {
    p.check();
  } catch (const Error& e) {
    throw Error(ErrorCode::kConfig, "arm '" + p.name + "': " + e.what());
  }
  return p;
}

}  // namespace

Scenario scenario_from_json(const json& j, const std::filesystem::path& base_dir) {
  Scenario s;
  try {
    only_keys(j, {"seed", "horizon_days", "common_random_numbers", "bootstrap", "population", "arms"}, "scenario");
    s.seed = j.value("seed", std::uint64_t{0});
    s.horizon_days = j.value("horizon_days", s.horizon_days);
    s.options.common_random_numbers = j.value("common_random_numbers", false);
    if (j.contains("bootstrap")) {
      const json& b = j["bootstrap"];
      only_keys(b, {"resamples", "seed"}, "bootstrap");
      s.options.bootstrap.resamples = b.value("resamples", s.options.bootstrap.resamples);
      s.options.bootstrap.seed = b.value("seed", s.options.bootstrap.seed);
    }
    if (j.contains("population")) {
      const json& p = j["population"];
      only_keys(p, {"n_users", "heterogeneity_seed", "user_model"}, "population");
      s.population.n_users = p.value("n_users", s.population.n_users);
      s.population.heterogeneity_seed = p.value("heterogeneity_seed", std::uint64_t{0});
      if (p.contains("user_model")) {
        s.population.model = user_model_from_json(p["user_model"]);
      }
    }
    if (!j.contains("arms") || !j["arms"].is_array()) {
      throw Error(ErrorCode::kConfig, "scenario needs an \"arms\" array");
    }
    for (const auto& arm : j["arms"]) {
      s.arms.push_back(policy_from_json(arm, base_dir));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kConfig, std::string("bad scenario: ") + e.what());
  }
  if (s.options.bootstrap.resamples < 0) {
    throw Error(ErrorCode::kConfig, "bootstrap resamples must be >= 0");
  }
  return s;
}

Scenario load_scenario(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw Error(ErrorCode::kIo, "cannot open " + path.string());
  }
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kConfig, path.string() + ": " + e.what());
  }
  return scenario_from_json(j, path.parent_path());
}

}  // namespace engage::simverse
