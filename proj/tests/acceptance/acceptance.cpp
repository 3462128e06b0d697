// Acceptance run: one PASS/FAIL line per criterion. Tolerances, seeds and
// runtime limits are fixed here. Usage: engage_acceptance [criterion ...]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "engage/cli.hpp"
#include "engage/convlog.hpp"
#include "engage/gateway.hpp"
#include "engage/labeler.hpp"
#include "engage/metrics.hpp"
#include "engage/random.hpp"
#include "engage/reward.hpp"
#include "engage/simverse.hpp"
#include "httplib.h"
#include "json.hpp"
#include "oracles.hpp"

using namespace engage;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int number;
  const char* name;
  double limit_s;
  std::function<Outcome()> run;
};

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

double cv_of(const std::vector<double>& v) {
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) {
    ss += (x - m) * (x - m);
  }
  return std::sqrt(ss / (v.size() - 1)) / m;
}

struct LineFit {
  double slope = 0.0;
  double r2 = 0.0;
};

LineFit least_squares(const std::vector<double>& x, const std::vector<double>& y) {
  const double mx = mean_of(x);
  const double my = mean_of(y);
  double sxy = 0.0;
  double sxx = 0.0;
  double syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return {sxy / sxx, sxy * sxy / (sxx * syy)};
}

metrics::ConversationSummary summary_of_length(int length) {
  metrics::ConversationSummary s;
  s.length = length;
  return s;
}

// ---------------------------------------------------------------------------

Outcome additive_fixed_point() {
  const std::vector<metrics::ImprovementObservation> obs{
      {true, false, 16.40, 2.71}, {false, true, 36.87, 2.89}, {true, true, 54.33, 3.08}};
  const auto fit = metrics::fit_additive_improvement(obs);
  const double b = fit.parameters.at(0).value;
  const double c = fit.parameters.at(1).value;

  const char* argv[] = {"engage", "fit", "additive", "--format", "text"};
  std::istringstream in("1 0 16.40 2.71\n0 1 36.87 2.89\n1 1 54.33 3.08\n");
  std::ostringstream out;
  std::ostringstream err;
  const int code = cli::run(5, argv, in, out, err);
  double cli_b = NAN;
  double cli_c = NAN;
  std::sscanf(out.str().c_str(), "b=%lf ± %*s c=%lf", &cli_b, &cli_c);

  const bool pass = std::abs(b - 16.71) <= 0.02 && std::abs(c - 37.22) <= 0.02 && code == 0 &&
                    std::abs(cli_b - 16.71) <= 0.02 && std::abs(cli_c - 37.22) <= 0.02;
  return {pass, fmt("b=%.4f±%.2f c=%.4f±%.2f; cli b=%g c=%g (want 16.71, 37.22 within 0.02)", b,
                    fit.parameters[0].std_error, c, fit.parameters[1].std_error, cli_b, cli_c)};
}

Outcome star_survival() {
  // Rating fractions 1.6/3.1/10.8/84.3% as counts; they sum to 998.
  const std::array<int, 4> counts{16, 31, 108, 843};
  std::vector<metrics::ConversationSummary> data;
  for (int star = 0; star < 4; ++star) {
    for (int i = 0; i < counts[static_cast<std::size_t>(star)]; ++i) {
      metrics::ConversationSummary s;
      s.length = 1;
      s.star_counts[static_cast<std::size_t>(star)] = 1;
      data.push_back(s);
    }
  }
  const std::array<double, 3> want{0.984, 0.951, 0.843};
  bool pass = true;
  std::string detail;
  for (int s = 2; s <= 4; ++s) {
    const double got = metrics::star_rating_at_least(std::span<const metrics::ConversationSummary>(data), s).value;
    const double rounded = std::round(got * 1000.0) / 1000.0;
    const double expected = want[static_cast<std::size_t>(s - 2)];
    pass = pass && std::abs(rounded - expected) < 1e-9;
    detail += fmt("s=%d got %.5f (%.3f) want %.3f; ", s, got, rounded, expected);
  }
  return {pass, detail};
}

Outcome truncated_mcl_stability() {
  std::vector<double> capped;
  std::vector<double> uncapped;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::vector<metrics::ConversationSummary> data;
    for (int x : oracle::sample_zeta(1.8, 1, 10000, 300 + seed)) {
      data.push_back(summary_of_length(x));
    }
    const std::span<const metrics::ConversationSummary> span(data);
    capped.push_back(metrics::mcl(span, {100}).value);
    uncapped.push_back(metrics::mcl(span, {std::nullopt}).value);
  }
  const double cv_capped = cv_of(capped);
  const double cv_uncapped = cv_of(uncapped);
  return {cv_capped < 0.1 && cv_uncapped > 0.5,
          fmt("CV capped %.4f (< 0.1), uncapped %.3f (> 0.5)", cv_capped, cv_uncapped)};
}

Outcome power_law_recovery() {
  const auto lengths = oracle::sample_zeta(1.8, 10, 50000, 401);
  const auto fit = metrics::fit_power_law_tail(lengths, 10);
  const double slope = fit.parameters.at(0).value;
  return {std::abs(slope + 1.8) <= 0.05,
          fmt("slope %.4f ± %.4f (want -1.8 ± 0.05)", slope, fit.parameters[0].std_error)};
}

Outcome label_oracle_equivalence() {
  auto labels_of = [](const std::vector<labeler::LabeledRow>& rows) {
    std::vector<int> out;
    for (const auto& r : rows) {
      out.push_back(r.label);
    }
    return out;
  };
  std::size_t checked = 0;
  std::size_t mismatches = 0;
  for (int n = 1; n <= 8; ++n) {
    for (unsigned mask = 0; mask < (1U << n); ++mask) {
      auto c = oracle::random_conversation(n, 500 + static_cast<std::uint64_t>(n));
      for (int i = 0; i < n; ++i) {
        c.turns[static_cast<std::size_t>(i)].response.regenerated = (mask >> i) & 1U;
      }
      const auto rows = convlog::extract_rows(c);
      mismatches += labels_of(labeler::label_retry(rows)) == oracle::retry_labels(c) ? 0 : 1;
      ++checked;
      for (int k = 1; k <= 8; ++k) {
        mismatches += labels_of(labeler::label_continuation(rows, k)) == oracle::continuation_labels(c, k) ? 0 : 1;
        mismatches += labels_of(labeler::label_intersection(rows, k)) == oracle::intersection_labels(c, k) ? 0 : 1;
        checked += 2;
      }
    }
    int patterns = 1;
    for (int i = 0; i < n; ++i) {
      patterns *= 5;
    }
    auto c = oracle::random_conversation(n, 600 + static_cast<std::uint64_t>(n));
    for (int p = 0; p < patterns; ++p) {
      int code = p;
      for (auto& t : c.turns) {
        const int v = code % 5;
        code /= 5;
        t.response.star_rating = v == 0 ? std::nullopt : std::optional<int>(v);
      }
      const auto rows = convlog::extract_rows(c);
      for (int s = 2; s <= 4; ++s) {
        std::vector<int> expected;
        for (const auto& l : oracle::star_labels(c, s)) {
          if (l) {
            expected.push_back(*l);
          }
        }
        mismatches += labels_of(labeler::label_star(rows, s)) == expected ? 0 : 1;
        ++checked;
      }
    }
  }
  return {mismatches == 0, fmt("%zu label vectors, %zu mismatches", checked, mismatches)};
}

Outcome reward_learnability() {
  auto held_out_auc = [](bool shuffle) {
    const auto rows = oracle::separable_dataset(16000, shuffle ? 702 : 701, shuffle);
    std::vector<labeler::LabeledRow> train_rows;
    std::vector<labeler::LabeledRow> test_rows;
    for (const auto& r : rows) {
      (reward::in_validation_split(r.row.conversation_id, 0.2, 7) ? test_rows : train_rows).push_back(r);
    }
    reward::TrainConfig cfg;
    const auto model = std::make_shared<const reward::TrainedScorer>(reward::train(train_rows, cfg));
    const reward::ModelScorer scorer(model);
    return reward::evaluate(scorer, test_rows, cfg.context_budget).auc.value_or(NAN);
  };
  const double auc = held_out_auc(false);
  const double null_auc = held_out_auc(true);

  reward::FeaturizerConfig fc;
  fc.hash_dimension = 1u << 10;
  const auto data = oracle::separable_dataset(12, 4);
  std::mt19937_64 rng(17);
  std::normal_distribution<double> z(0.0, 0.7);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<reward::Example> batch;
    for (std::size_t i = 0; i < static_cast<std::size_t>(1 + trial % 6); ++i) {
      batch.push_back(reward::make_example(data[(trial + i) % data.size()], fc, 64));
    }
    std::vector<double> w(fc.hash_dimension);
    for (auto& x : w) {
      x = z(rng);
    }
    const double bias = z(rng);
    const double l2 = trial % 2 ? 0.01 : 0.0;
    const auto g = reward::logistic_loss_and_gradient(w, bias, batch, l2);
    std::vector<std::size_t> coords;
    for (const auto& e : batch) {
      coords.insert(coords.end(), e.x.index.begin(), e.x.index.end());
    }
    const double h = 1e-5;
    for (std::size_t k : coords) {
      auto wp = w;
      auto wm = w;
      wp[k] += h;
      wm[k] -= h;
      const double fd = (reward::logistic_loss_and_gradient(wp, bias, batch, l2).loss -
                         reward::logistic_loss_and_gradient(wm, bias, batch, l2).loss) /
                        (2 * h);
      worst = std::max(worst, std::abs(fd - g.grad_weights[k]) / std::max({std::abs(fd), std::abs(g.grad_weights[k]), 1e-3}));
    }
    const double fdb = (reward::logistic_loss_and_gradient(w, bias + h, batch, l2).loss -
                        reward::logistic_loss_and_gradient(w, bias - h, batch, l2).loss) /
                       (2 * h);
    worst = std::max(worst, std::abs(fdb - g.grad_bias) / std::max(std::abs(fdb), 1e-3));
  }
  return {auc >= 0.95 && null_auc >= 0.45 && null_auc <= 0.55 && worst < 1e-5,
          fmt("held-out AUC %.4f (>= 0.95), shuffled %.4f (in [0.45, 0.55]), gradient rel. error %.2e (< 1e-5)", auc,
              null_auc, worst)};
}

Outcome best_of_n_order_statistics() {
  const simverse::UserModel model;
  const int conversations = 20000;
  bool pass = true;
  std::string detail;
  double previous_mcl = -1.0;
  for (int n : {1, 4, 8, 16}) {
    simverse::Policy p;
    p.name = "n" + std::to_string(n);
    p.n = n;
    p.scorer = simverse::ScorerKind::kOracle;
    double q_sum = 0.0;
    std::size_t selections = 0;
    std::vector<metrics::ConversationSummary> summaries;
    for (int i = 0; i < conversations; ++i) {
      const auto seed = derive_seed(700, static_cast<std::uint64_t>(i));
      const auto traits = simverse::draw_traits(model, derive_seed(seed, 1));
      simverse::SessionSpec spec;
      spec.keep_transcript = false;
      const auto s = simverse::simulate_session(model, traits, p, derive_seed(seed, 2), spec);
      q_sum += s.stats.selected_quality_sum;
      selections += s.stats.selections;
      summaries.push_back(s.summary);
    }
    const double q = q_sum / static_cast<double>(selections);
    const double want = oracle::expected_max_normal(n);
    const double mcl = metrics::mcl(std::span<const metrics::ConversationSummary>(summaries)).value;
    pass = pass && std::abs(q - want) <= 0.02 && mcl > previous_mcl;
    detail += fmt("N=%d q %.4f vs %.4f, MCL %.2f; ", n, q, want, mcl);
    previous_mcl = mcl;
  }
  return {pass, detail};
}

Outcome retention_shape() {
  simverse::Policy control;
  control.name = "control";
  control.baseline = true;
  simverse::Policy bo4;
  bo4.name = "bo4";
  bo4.n = 4;
  bo4.scorer = simverse::ScorerKind::kOracle;
  const std::vector arms{control, bo4};
  simverse::Population pop;
  pop.n_users = 20000;
  simverse::RunOptions opt;
  opt.bootstrap.resamples = 50;

  bool pass = true;
  std::string detail;
  std::vector<double> mean_curve;
  std::vector<double> log_days;
  const int seeds = 5;
  for (int s = 0; s < seeds; ++s) {
    const auto report = simverse::run_ab(arms, pop, 30, 800 + static_cast<std::uint64_t>(s), opt);
    std::vector<double> curve;
    log_days.clear();
    for (int d : report.arm("control").retention.days) {
      log_days.push_back(std::log(d));
      curve.push_back(report.improvement("bo4", "retention_d" + std::to_string(d)).value.value);
    }
    mean_curve.resize(curve.size());
    for (std::size_t i = 0; i < curve.size(); ++i) {
      mean_curve[i] += curve[i] / seeds;
    }
    const auto fit = least_squares(log_days, curve);
    pass = pass && fit.slope > 0.0 && curve.back() > curve.front() && fit.r2 >= 0.8;
    detail += fmt("seed %d: R2 %.3f slope %.2f d1 %+.1f%% d30 %+.1f%%; ", s, fit.r2, fit.slope, curve.front(),
                  curve.back());
  }
  const auto fit = least_squares(log_days, mean_curve);
  pass = pass && fit.r2 >= 0.8 && fit.slope > 0.0;
  detail += fmt("mean curve R2 %.3f slope %.2f per log-day", fit.r2, fit.slope);
  return {pass, detail};
}

Outcome label_strategy_ordering() {
  const simverse::UserModel model;
  simverse::Policy control;
  control.name = "control";
  control.baseline = true;
  const int budget = 64;
  int wins = 0;
  std::string detail;
  for (std::uint64_t s = 0; s < 5; ++s) {
    std::vector<convlog::ResponseRow> rows;
    for (int i = 0; i < 3000; ++i) {
      const auto c = simverse::simulate_conversation(model, control, derive_seed(1000 + s, static_cast<std::uint64_t>(i)));
      const auto r = convlog::extract_rows(c, {budget});
      rows.insert(rows.end(), r.begin(), r.end());
    }
    std::vector<simverse::Policy> arms{control};
    for (const auto& strategy : {labeler::LabelStrategy::continuation(2), labeler::LabelStrategy::intersection(2)}) {
      reward::TrainConfig cfg;
      cfg.context_budget = budget;
      cfg.seed = s;
      cfg.featurizer.token_orders = {1, 2};
      cfg.featurizer.char_orders = {};
      cfg.featurizer.hash_dimension = 1u << 18;
      const auto trained =
          std::make_shared<const reward::TrainedScorer>(reward::train(labeler::apply(strategy, rows), cfg));
      simverse::Policy p;
      p.name = strategy.descriptor();
      p.n = 4;
      p.scorer = simverse::ScorerKind::kModel;
      p.context_budget = budget;
      p.model = std::make_shared<reward::ModelScorer>(trained);
      arms.push_back(p);
    }
    simverse::Population pop;
    pop.n_users = 2000;
    simverse::RunOptions opt;
    opt.common_random_numbers = true;
    opt.bootstrap.resamples = 50;
    const auto report = simverse::run_ab(arms, pop, 30, s, opt);
    const double cont = report.improvement(arms[1].name, "retention_d30").value.value;
    const double both = report.improvement(arms[2].name, "retention_d30").value.value;
    wins += both >= cont ? 1 : 0;
    detail += fmt("seed %d: d30 continuation %+.1f%% intersection %+.1f%%; ", static_cast<int>(s), cont, both);
  }
  return {wins >= 4, detail + fmt("intersection >= continuation in %d of 5", wins)};
}

Outcome aa_null() {
  simverse::Policy a;
  a.name = "a";
  a.baseline = true;
  simverse::Policy b = a;
  b.name = "b";
  b.baseline = false;
  const std::vector arms{a, b};
  simverse::Population pop;
  pop.n_users = 10000;
  int clean = 0;
  int seeds = 20;
  std::string worst;
  double worst_z = 0.0;
  for (int s = 0; s < seeds; ++s) {
    const auto report = simverse::run_ab(arms, pop, 7, 900 + static_cast<std::uint64_t>(s));
    const auto& x = report.arm("a");
    const auto& y = report.arm("b");
    auto z = [](const metrics::MetricValue& u, const metrics::MetricValue& v) {
      const double se = std::sqrt(std::pow(u.std_error.value_or(0.0), 2) + std::pow(v.std_error.value_or(0.0), 2));
      return std::abs(u.value - v.value) / se;
    };
    const double zs[3] = {z(x.mcl, y.mcl), z(x.retry_rate, y.retry_rate),
                          z(x.retention.values.back(), y.retention.values.back())};
    const double m = *std::max_element(std::begin(zs), std::end(zs));
    clean += m < 3.0 ? 1 : 0;
    if (m > worst_z) {
      worst_z = m;
      worst = fmt("seed %d (mcl %.2f, retry %.2f, d7 %.2f)", s, zs[0], zs[1], zs[2]);
    }
  }
  return {clean >= 19, fmt("%d of %d seeds within 3 combined stderrs on all three metrics; largest gap %.2f stderrs at %s",
                           clean, seeds, worst_z, worst.c_str())};
}

Outcome service_contract() {
  auto model_ptr =
      std::make_shared<const reward::TrainedScorer>(reward::train(oracle::separable_dataset(4000, 1100), {}));
  const reward::ModelScorer direct(model_ptr);
  gateway::ServiceConfig cfg;
  cfg.listen_address = "127.0.0.1:0";
  cfg.model_path = "in-memory";
  cfg.threads = 16;
  gateway::Service service(cfg, model_ptr);
  const int port = service.bind();
  std::thread server([&] { service.run(); });
  const std::string url = "http://127.0.0.1:" + std::to_string(port);
  {
    httplib::Client probe(url);
    for (int i = 0; i < 400 && !probe.Get("/healthz"); ++i) {
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
  }

  const auto rows = oracle::separable_dataset(400, 1101);
  std::vector<json> requests;
  for (std::size_t i = 0; i + 3 < rows.size(); i += 4) {
    json candidates = json::array();
    for (std::size_t j = i; j < i + 4; ++j) {
      candidates.push_back(rows[j].row.response_text);
    }
    requests.push_back({{"context", labeler::render_context(rows[i].row, 256).text}, {"candidates", candidates}});
  }

  auto post = [&](const json& body) -> json {
    httplib::Client client(url);
    const auto res = client.Post("/select", body.dump(), "application/json");
    if (!res || res->status != 200) {
      return json(nullptr);
    }
    auto j = json::parse(res->body);
    j.erase("latency_ms");
    return j;
  };

  std::vector<json> sequential;
  std::size_t contract_violations = 0;
  for (const auto& req : requests) {
    sequential.push_back(post(req));
    const auto& got = sequential.back();
    if (got.is_null()) {
      ++contract_violations;
      continue;
    }
    std::vector<double> expected;
    for (const auto& c : req["candidates"]) {
      expected.push_back(direct.score(req["context"].get<std::string>(), c.get<std::string>()));
    }
    const auto best = static_cast<int>(std::max_element(expected.begin(), expected.end()) - expected.begin());
    bool same = got["chosen_index"] == best && got["chosen_text"] == req["candidates"][best] &&
                got["scores"].size() == expected.size();
    for (std::size_t k = 0; same && k < expected.size(); ++k) {
      same = got["scores"][k].get<double>() == expected[k];
    }
    contract_violations += same ? 0 : 1;
  }

  std::vector<json> concurrent(requests.size());
  std::vector<std::thread> clients;
  for (std::size_t i = 0; i < requests.size(); ++i) {
    clients.emplace_back([&, i] { concurrent[i] = post(requests[i]); });
  }
  for (auto& t : clients) {
    t.join();
  }
  std::size_t replay_mismatches = 0;
  for (std::size_t i = 0; i < requests.size(); ++i) {
    replay_mismatches += concurrent[i] == sequential[i] ? 0 : 1;
  }
  service.stop();
  server.join();
  return {contract_violations == 0 && replay_mismatches == 0,
          fmt("%zu /select requests: %zu differ from in-process argmax/scores, %zu differ between 100-way "
              "concurrent and sequential replay",
              requests.size(), contract_violations, replay_mismatches)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria{
      {1, "additive-model fixed point", 1, additive_fixed_point},
      {2, "star survival fixed point", 1, star_survival},
      {3, "truncated MCL stability", 30, truncated_mcl_stability},
      {4, "power-law recovery", 30, power_law_recovery},
      {5, "pseudo-label oracle equivalence", 10, label_oracle_equivalence},
      {6, "reward-model learnability", 120, reward_learnability},
      {7, "best-of-N order statistics", 300, best_of_n_order_statistics},
      {8, "retention shape", 600, retention_shape},
      {9, "label-strategy ordering", 900, label_strategy_ordering},
      {10, "A/A null", 600, aa_null},
      {11, "service contract", 60, service_contract},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) {
    const int n = std::atoi(argv[i]);
    if (n < 1 || n > static_cast<int>(criteria.size())) {
      std::fprintf(stderr, "usage: %s [criterion 1-%zu ...]\n", argv[0], criteria.size());
      return 2;
    }
    selected.insert(n);
  }
  bool all = true;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.number)) {
      continue;
    }
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = elapsed < c.limit_s;
    const bool pass = o.pass && in_time;
    all = all && pass;
    std::printf("criterion %2d %s  %s: %s [%.2fs, limit %gs%s]\n", c.number, pass ? "PASS" : "FAIL", c.name,
                o.detail.c_str(), elapsed, c.limit_s, in_time ? "" : ", exceeded");
    std::fflush(stdout);
  }
  return all ? 0 : 1;
}
