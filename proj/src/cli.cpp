#include "engage/cli.hpp"

#include <pthread.h>

#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "engage/convlog.hpp"
#include "engage/error.hpp"
#include "engage/gateway.hpp"
#include "engage/labeler.hpp"
#include "engage/metrics.hpp"
#include "engage/random.hpp"
#include "engage/remote.hpp"
#include "engage/reward.hpp"
#include "engage/selector.hpp"
#include "engage/simverse.hpp"

namespace engage::cli {

namespace {

using nlohmann::json;

std::string dump(const json& j) { return j.dump(-1, ' ', false, json::error_handler_t::replace); }

void report_error(std::ostream& err, std::string_view code, std::string_view message) {
  json e{{"error", {{"code", code}, {"message", message}}}};
  err << dump(e) << '\n';
  err.flush();
}

void report_warning(std::ostream& err, std::string_view code, std::string_view message) {
  json w{{"warning", {{"code", code}, {"message", message}}}};
  err << dump(w) << '\n';
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

json stderr_json(const metrics::MetricValue& v) { return v.std_error ? json(*v.std_error) : json(nullptr); }

std::string pm(const metrics::MetricValue& v) {
  return num(v.value) + (v.std_error ? " ± " + num(*v.std_error) : std::string());
}

// "-" reads `fallback`.
class Source {
 public:
  Source(const std::string& path, std::istream& fallback) : stream_(&fallback) {
    if (path != "-") {
      file_.open(path, std::ios::binary);
      if (!file_) {
        throw Error(ErrorCode::kIo, "cannot open " + path);
      }
      stream_ = &file_;
    }
  }
  std::istream& get() { return *stream_; }

 private:
  std::ifstream file_;
  std::istream* stream_;
};

// "-" writes `fallback`.
class Sink {
 public:
  Sink(const std::string& path, std::ostream& fallback) : path_(path), stream_(&fallback) {
    if (path != "-") {
      file_.open(path, std::ios::binary | std::ios::trunc);
      if (!file_) {
        throw Error(ErrorCode::kIo, "cannot open " + path + " for writing");
      }
      stream_ = &file_;
    }
  }
  std::ostream& get() { return *stream_; }
  void finish() {
    stream_->flush();
    if (!*stream_) {
      throw Error(ErrorCode::kIo, "failed writing " + path_);
    }
  }

 private:
  std::string path_;
  std::ofstream file_;
  std::ostream* stream_;
};

[[noreturn]] void usage(const std::string& message) { throw CLI::ValidationError(message); }

std::vector<int> parse_int_list(const std::string& text, const std::string& flag) {
  std::vector<int> out;
  if (text.empty() || text == "none") {
    return out;
  }
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) {
        throw std::invalid_argument(item);
      }
    } catch (const std::exception&) {
      usage(flag + ": expected a comma-separated list of integers, got '" + text + "'");
    }
  }
  return out;
}

// Whitespace-separated columns, '#' starts a comment.
std::vector<std::pair<std::size_t, std::vector<std::string>>> read_table(std::istream& in) {
  std::vector<std::pair<std::size_t, std::vector<std::string>>> rows;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    line = line.substr(0, line.find('#'));
    std::stringstream ss(line);
    std::vector<std::string> cols;
    std::string col;
    while (ss >> col) {
      cols.push_back(col);
    }
    if (!cols.empty()) {
      rows.emplace_back(number, std::move(cols));
    }
  }
  if (in.bad()) {
    throw Error(ErrorCode::kIo, "read failed");
  }
  return rows;
}

double table_number(const std::string& text, std::size_t line) {
  char* end = nullptr;
  const double v = std::strtod(text.c_str(), &end);
  if (text.empty() || end != text.c_str() + text.size()) {
    throw Error(ErrorCode::kInvalidArgument, "line " + std::to_string(line) + ": bad number '" + text + "'");
  }
  return v;
}

bool table_flag(const std::string& text, std::size_t line) {
  if (text == "1" || text == "true" || text == "yes") {
    return true;
  }
  if (text == "0" || text == "false" || text == "no") {
    return false;
  }
  throw Error(ErrorCode::kInvalidArgument,
              "line " + std::to_string(line) + ": expected 0/1, got '" + text + "'");
}

void print_text(std::ostream& out, const json& j, const std::string& prefix = "") {
  for (const auto& [key, value] : j.items()) {
    if (value.is_object()) {
      print_text(out, value, prefix + key + ".");
    } else if (value.is_string()) {
      out << prefix << key << ": " << value.get<std::string>() << '\n';
    } else if (value.is_number_float()) {
      out << prefix << key << ": " << num(value.get<double>()) << '\n';
    } else {
      out << prefix << key << ": " << dump(value) << '\n';
    }
  }
}

struct Context {
  std::istream& in;
  std::ostream& out;
  std::ostream& err;
  std::uint64_t seed = 0;
  bool seed_given = false;
  bool text = false;
  std::string config_path;

  void emit(const json& j) const {
    if (text) {
      print_text(out, j);
    } else {
      out << dump(j) << '\n';
    }
  }
};

// ---------------------------------------------------------------------------

struct IngestArgs {
  std::string input = "-";
  std::string rows;
  bool strict = false;
  int context_limit = 0;
};

int run_ingest(const IngestArgs& a, Context& ctx) {
  Source src(a.input, ctx.in);
  const auto parsed = convlog::parse_conversations(src.get(), convlog::ParseOptions{a.strict});
  std::size_t row_count = 0;
  convlog::ExtractOptions extract;
  if (a.context_limit > 0) {
    extract.context_token_limit = a.context_limit;
  }
  if (!a.rows.empty()) {
    Sink sink(a.rows, ctx.out);
    for (const auto& c : parsed.conversations) {
      for (const auto& row : convlog::extract_rows(c, extract)) {
        convlog::write_row(sink.get(), row);
        ++row_count;
      }
    }
    sink.finish();
  }
  json issues = json::array();
  for (const auto& i : parsed.issues) {
    issues.push_back({{"line", i.line},
                      {"severity", i.severity == convlog::Severity::kError ? "error" : "warning"},
                      {"reason", i.reason}});
  }
  json summary{{"conversations", parsed.conversations.size()},
               {"rows", row_count},
               {"errors", parsed.error_count()},
               {"warnings", parsed.warning_count()},
               {"issues", issues}};
  std::ostream& out = a.rows == "-" ? ctx.err : ctx.out;
  if (ctx.text) {
    out << "conversations: " << parsed.conversations.size() << "\nrows: " << row_count
        << "\nerrors: " << parsed.error_count() << "\nwarnings: " << parsed.warning_count() << '\n';
    for (const auto& i : parsed.issues) {
      out << "line " << i.line << ": " << (i.severity == convlog::Severity::kError ? "error" : "warning")
          << ": " << i.reason << '\n';
    }
  } else {
    out << dump(summary) << '\n';
  }
  if (a.strict && parsed.error_count() > 0) {
    throw Error(ErrorCode::kValidation, std::to_string(parsed.error_count()) + " invalid records");
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct LabelArgs {
  std::string input = "-";
  std::string output = "-";
  std::string strategy;
  int k = 1;
  int s = 0;
  CLI::Option* k_opt = nullptr;
  CLI::Option* s_opt = nullptr;
};

labeler::LabelStrategy strategy_from_flags(const LabelArgs& a) {
  const bool uses_k = a.strategy == "continuation" || a.strategy == "intersection";
  if (a.k_opt->count() > 0 && !uses_k) {
    usage("--k only applies to --strategy continuation or intersection");
  }
  if (a.s_opt->count() > 0 && a.strategy != "star") {
    usage("--s only applies to --strategy star");
  }
  if (a.strategy == "star" && a.s_opt->count() == 0) {
    usage("--strategy star needs --s");
  }
  labeler::LabelStrategy st;
  if (a.strategy == "continuation") {
    st = labeler::LabelStrategy::continuation(a.k);
  } else if (a.strategy == "intersection") {
    st = labeler::LabelStrategy::intersection(a.k);
  } else if (a.strategy == "retry") {
    st = labeler::LabelStrategy::retry();
  } else {
    st = labeler::LabelStrategy::star(a.s);
  }
  try {
    st.check();
  } catch (const Error& e) {
    usage(e.what());
  }
  return st;
}

void fail_on_issues(const std::vector<convlog::ValidationIssue>& issues, const std::string& input) {
  if (!issues.empty()) {
    const auto& first = issues.front();
    throw Error(ErrorCode::kValidation, input + ":" + std::to_string(first.line) + ": " + first.reason +
                                            (issues.size() > 1 ? " (and " + std::to_string(issues.size() - 1) +
                                                                     " more)"
                                                               : ""));
  }
}

int run_label(const LabelArgs& a, Context& ctx) {
  const auto strategy = strategy_from_flags(a);
  Source src(a.input, ctx.in);
  const auto parsed = convlog::parse_rows(src.get());
  fail_on_issues(parsed.issues, a.input);
  const auto labeled = labeler::apply(strategy, parsed.rows);
  Sink sink(a.output, ctx.out);
  std::size_t positives = 0;
  for (const auto& r : labeled) {
    labeler::write_labeled_row(sink.get(), r);
    positives += r.label == 1 ? 1 : 0;
  }
  sink.finish();
  if (a.output != "-") {
    ctx.emit({{"rows_in", parsed.rows.size()},
              {"rows_out", labeled.size()},
              {"positives", positives},
              {"strategy", strategy.descriptor()}});
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string input = "-";
  std::string output;
  int epochs = 5;
  double learning_rate = 0.5;
  double l2 = 1e-6;
  double val_fraction = 0.1;
  int context_budget = 256;
  std::string token_orders = "1,2,3";
  std::string char_orders = "3,4,5";
  int hash_bits = 20;
  std::uint64_t hash_seed = 0;
};

int run_train(const TrainArgs& a, Context& ctx) {
  reward::TrainConfig config;
  config.featurizer.token_orders = parse_int_list(a.token_orders, "--token-orders");
  config.featurizer.char_orders = parse_int_list(a.char_orders, "--char-orders");
  config.featurizer.hash_dimension = 1u << a.hash_bits;
  config.featurizer.seed = a.hash_seed;
  config.epochs = a.epochs;
  config.learning_rate = a.learning_rate;
  config.l2 = a.l2;
  config.val_fraction = a.val_fraction;
  config.context_budget = a.context_budget;
  config.seed = ctx.seed;

  Source src(a.input, ctx.in);
  const auto parsed = labeler::parse_labeled_rows(src.get());
  fail_on_issues(parsed.issues, a.input);
  if (!labeler::is_standard_budget(a.context_budget)) {
    report_warning(ctx.err, "nonstandard_budget",
                   "context budget " + std::to_string(a.context_budget) + " is not one of 128, 256, 512");
  }
  const auto model = reward::train(parsed.rows, config);
  reward::save_model(model, a.output);
  const auto& m = model.meta;
  const auto chosen = static_cast<std::size_t>(m.chosen_epoch - 1);
  ctx.emit({{"model", a.output},
            {"model_version", reward::model_version(model)},
            {"epochs_run", m.epochs_run},
            {"chosen_epoch", m.chosen_epoch},
            {"train_loss", m.train_loss_by_epoch.at(chosen)},
            {"val_loss", m.val_loss_by_epoch.at(chosen)},
            {"n_train", m.n_train},
            {"n_val", m.n_val},
            {"label_strategy", m.label_strategy ? json(m.label_strategy->descriptor()) : json(nullptr)},
            {"data_fingerprint", m.data_fingerprint}});
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string input = "-";
  std::string model;
  std::string scorer_url;
  int context_budget = 256;
  CLI::Option* budget_opt = nullptr;
  bool force = false;
  int timeout_ms = 10000;
};

int run_eval(const EvalArgs& a, Context& ctx) {
  std::unique_ptr<Scorer> scorer;
  int budget = a.context_budget;
  if (!a.model.empty()) {
    auto model = std::make_shared<const reward::TrainedScorer>(reward::load_model(a.model));
    const std::optional<int> requested =
        a.budget_opt->count() > 0 ? std::optional<int>(a.context_budget) : std::nullopt;
    auto ms = std::make_unique<reward::ModelScorer>(model, requested, a.force);
    budget = ms->context_budget();
    scorer = std::move(ms);
  } else {
    scorer = std::make_unique<remote::RemoteScorer>(a.scorer_url, a.timeout_ms);
  }
  Source src(a.input, ctx.in);
  const auto parsed = labeler::parse_labeled_rows(src.get());
  fail_on_issues(parsed.issues, a.input);
  const auto r = reward::evaluate(*scorer, parsed.rows, budget);
  ctx.emit({{"n", r.n},
            {"accuracy", r.accuracy},
            {"auc", r.auc ? json(*r.auc) : json(nullptr)},
            {"log_loss", r.log_loss},
            {"context_budget", budget}});
  return 0;
}

// ---------------------------------------------------------------------------

struct MetricsArgs {
  std::vector<std::string> inputs{"-"};
  int cap = metrics::kDefaultMclCap;
  bool uncapped = false;
  std::string days = "1,7,30";
  std::string star_s = "4";
  int bootstrap = 1000;
  std::string cluster = "conversation";
  std::string observed_through;
};

int run_metrics(const MetricsArgs& a, Context& ctx) {
  const auto days = parse_int_list(a.days, "--days");
  const auto stars = parse_int_list(a.star_s, "--star-s");
  for (int s : stars) {
    if (s < 1 || s > 4) {
      usage("--star-s values must be in 1..4");
    }
  }
  std::optional<convlog::Date> observed;
  if (!a.observed_through.empty()) {
    try {
      observed = convlog::parse_date(a.observed_through);
    } catch (const Error& e) {
      usage(std::string("--observed-through: ") + e.what());
    }
  }
  std::vector<convlog::Conversation> dataset;
  std::size_t skipped = 0;
  for (const auto& path : a.inputs) {
    Source src(path, ctx.in);
    auto parsed = convlog::parse_conversations(src.get());
    skipped += parsed.error_count();
    std::move(parsed.conversations.begin(), parsed.conversations.end(), std::back_inserter(dataset));
  }
  if (skipped > 0) {
    report_warning(ctx.err, "validation", "skipped " + std::to_string(skipped) + " invalid records");
  }

  const auto cluster = a.cluster == "user" ? metrics::ClusterBy::kUser : metrics::ClusterBy::kConversation;
  std::optional<metrics::BootstrapOptions> boot;
  if (a.bootstrap > 0) {
    boot = metrics::BootstrapOptions{a.bootstrap, ctx.seed};
  }
  const auto summaries = metrics::summarize(dataset);

  auto record = [&](json base, const std::string& label, const std::function<metrics::MetricValue()>& compute) {
    try {
      const auto v = compute();
      base["value"] = v.value;
      base["stderr"] = stderr_json(v);
      base["n"] = v.n;
      if (ctx.text) {
        ctx.out << label << ": " << pm(v) << " (n=" << v.n << ")\n";
      } else {
        ctx.out << dump(base) << '\n';
      }
    } catch (const Error& e) {
      if (ctx.text) {
        ctx.out << label << ": " << to_string(e.code()) << ": " << e.what() << '\n';
      } else {
        base["error"] = {{"code", to_string(e.code())}, {"message", e.what()}};
        ctx.out << dump(base) << '\n';
      }
    }
  };

  const std::optional<int> cap = a.uncapped ? std::nullopt : std::optional<int>(a.cap);
  record({{"name", "mcl"}, {"cap", cap ? json(*cap) : json(nullptr)}},
         cap ? "mcl (cap " + std::to_string(*cap) + ")" : "mcl (uncapped)",
         [&] { return metrics::mcl(std::span<const metrics::ConversationSummary>(summaries), {cap, cluster, boot}); });
  record({{"name", "retry_rate"}}, "retry_rate", [&] {
    return metrics::retry_rate(std::span<const metrics::ConversationSummary>(summaries), {cluster, boot});
  });
  for (int s : stars) {
    record({{"name", "star_rating_at_least"}, {"s", s}}, "star_rating >= " + std::to_string(s), [&] {
      return metrics::star_rating_at_least(std::span<const metrics::ConversationSummary>(summaries), s);
    });
  }
  const auto users = convlog::user_activity(dataset);
  for (int d : days) {
    json base{{"name", "retention"}, {"day", d}};
    if (observed) {
      base["observed_through"] = convlog::format_date(*observed);
    }
    record(base, "retention day " + std::to_string(d), [&] {
      return observed ? metrics::retention(users, d, *observed) : metrics::retention(users, d);
    });
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct FitArgs {
  std::string kind;
  std::string input = "-";
  int x_min = 10;
  bool conversations = false;
};

int run_fit(const FitArgs& a, Context& ctx) {
  Source src(a.input, ctx.in);
  metrics::FitResult fit;
  std::size_t n = 0;
  json extra = json::object();
  if (a.kind == "powerlaw") {
    std::vector<int> lengths;
    if (a.conversations) {
      const auto parsed = convlog::parse_conversations(src.get());
      fail_on_issues(parsed.issues, a.input);
      for (const auto& c : parsed.conversations) {
        lengths.push_back(convlog::conversation_length(c));
      }
    } else {
      for (const auto& [line, cols] : read_table(src.get())) {
        for (const auto& c : cols) {
          const double v = table_number(c, line);
          if (v != static_cast<int>(v) || v < 0) {
            throw Error(ErrorCode::kInvalidArgument,
                        "line " + std::to_string(line) + ": lengths must be non-negative integers");
          }
          lengths.push_back(static_cast<int>(v));
        }
      }
    }
    n = lengths.size();
    fit = metrics::fit_power_law_tail(lengths, a.x_min);
    extra["x_min"] = a.x_min;
  } else {
    const auto table = read_table(src.get());
    n = table.size();
    if (a.kind == "log-linear") {
      std::vector<metrics::Point> points;
      std::vector<double> weights;
      std::optional<std::size_t> columns;
      for (const auto& [line, cols] : table) {
        if (cols.size() != 2 && cols.size() != 3) {
          throw Error(ErrorCode::kInvalidArgument, "line " + std::to_string(line) + ": expected 'x y [sigma]'");
        }
        if (columns && *columns != cols.size()) {
          throw Error(ErrorCode::kInvalidArgument,
                      "line " + std::to_string(line) + ": sigma must be given on every line or none");
        }
        columns = cols.size();
        points.push_back({table_number(cols[0], line), table_number(cols[1], line)});
        if (cols.size() == 3) {
          const double sigma = table_number(cols[2], line);
          weights.push_back(1.0 / (sigma * sigma));
        }
      }
      fit = weights.empty() ? metrics::fit_log_linear(points)
                            : metrics::fit_log_linear(points, std::span<const double>(weights));
    } else {
      std::vector<metrics::ImprovementObservation> obs;
      for (const auto& [line, cols] : table) {
        if (cols.size() != 4) {
          throw Error(ErrorCode::kInvalidArgument,
                      "line " + std::to_string(line) + ": expected 'alt_model reward_model y sigma'");
        }
        obs.push_back({table_flag(cols[0], line), table_flag(cols[1], line), table_number(cols[2], line),
                       table_number(cols[3], line)});
      }
      fit = metrics::fit_additive_improvement(obs);
    }
  }
  if (ctx.text) {
    for (const auto& p : fit.parameters) {
      ctx.out << p.name << '=' << num(p.value) << " ± " << num(p.std_error) << '\n';
    }
    return 0;
  }
  json params = json::object();
  for (const auto& p : fit.parameters) {
    params[p.name] = {{"value", p.value}, {"stderr", p.std_error}};
  }
  json j{{"fit", a.kind}, {"parameters", params}, {"residual_norm", fit.residual_norm}, {"n", n}};
  j.update(extra);
  ctx.out << dump(j) << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct SimulateArgs {
  std::string scenario;
  std::string log;
  int users = 0;
  bool calibrate = false;
  int calibration_conversations = 100000;
};

int run_simulate(const SimulateArgs& a, Context& ctx) {
  if (a.calibrate) {
    simverse::UserModel model;
    if (!a.scenario.empty()) {
      model = simverse::load_scenario(a.scenario).population.model;
    }
    simverse::CalibrationOptions opts;
    opts.tail_conversations = a.calibration_conversations;
    opts.latency_conversations = a.calibration_conversations;
    opts.seed = ctx.seed;
    const auto report = simverse::calibrate(model, {}, opts);
    ctx.out << (ctx.text ? simverse::to_json(report).dump(2) : dump(simverse::to_json(report))) << '\n';
    return 0;
  }
  if (a.scenario.empty()) {
    usage("simulate needs --scenario (or --calibrate)");
  }
  auto scenario = simverse::load_scenario(a.scenario);
  if (ctx.seed_given) {
    scenario.seed = ctx.seed;
  }
  if (a.users > 0) {
    scenario.population.n_users = a.users;
  }
  std::optional<Sink> log;
  if (!a.log.empty()) {
    log.emplace(a.log, ctx.out);
    scenario.options.conversation_log = &log->get();
  }
  const auto report =
      simverse::run_ab(scenario.arms, scenario.population, scenario.horizon_days, scenario.seed, scenario.options);
  if (log) {
    log->finish();
  }
  std::ostream& out = a.log == "-" ? ctx.err : ctx.out;
  if (!ctx.text) {
    out << dump(simverse::to_json(report)) << '\n';
    return 0;
  }
  for (const auto& arm : report.arms) {
    out << arm.name << (arm.baseline ? " (baseline)" : "") << ": mcl " << pm(arm.mcl) << ", retry_rate "
        << pm(arm.retry_rate);
    if (!arm.retention.days.empty()) {
      out << ", retention d" << arm.retention.days.back() << ' ' << pm(arm.retention.values.back());
    }
    out << '\n';
  }
  for (const auto& i : report.improvements) {
    out << i.arm << ' ' << i.metric << ": " << pm(i.value) << "%\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct ServeArgs {
  std::string listen_address;
  std::string model_path;
  std::string generator_backend;
  std::string default_n;
  std::string request_timeout_ms;
  std::string max_body_bytes;
  std::string threads;
  bool hot_reload = false;
  std::vector<std::pair<std::string, CLI::Option*>> fields;
};

gateway::ConfigLayer file_layer(const std::string& path) {
  gateway::ConfigLayer layer;
  if (path.empty()) {
    return layer;
  }
  for (const auto& item : CLI::ConfigTOML().from_file(path)) {
    if (item.parents.size() == 1 && item.parents[0] == "serve" && item.name != "++" && item.name != "--") {
      std::string value;
      for (const auto& v : item.inputs) {
        value += value.empty() ? v : "," + v;
      }
      layer[item.name] = value;
    }
  }
  return layer;
}

int run_serve(const ServeArgs& a, Context& ctx) {
  gateway::ConfigLayer flags;
  for (const auto& [field, opt] : a.fields) {
    if (opt->count() > 0) {
      flags[field] = field == "hot_reload" ? "true" : opt->as<std::string>();
    }
  }
  const auto config = gateway::resolve_service_config(file_layer(ctx.config_path),
                                                      gateway::env_layer([](const char* k) { return std::getenv(k); }),
                                                      flags);

  // Signals are handled on a dedicated thread; every other thread keeps them blocked.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  sigaddset(&signals, SIGHUP);
  sigset_t previous;
  pthread_sigmask(SIG_BLOCK, &signals, &previous);
  struct RestoreMask {
    sigset_t mask;
    ~RestoreMask() { pthread_sigmask(SIG_SETMASK, &mask, nullptr); }
  } restore{previous};

  auto service = gateway::Service::from_config(config);
  const int port = service->bind();
  const auto hp = gateway::parse_listen_address(config.listen_address);
  ctx.out << dump({{"event", "ready"},
                   {"listen_address", hp.host + ":" + std::to_string(port)},
                   {"model_version", service->model_version()},
                   {"config", gateway::to_json(config)}})
          << std::endl;

  std::thread waiter([&] {
    for (;;) {
      int sig = 0;
      if (sigwait(&signals, &sig) != 0) {
        continue;
      }
      if (sig == SIGHUP) {
        if (!config.hot_reload) {
          continue;
        }
        try {
          service->reload();
          ctx.out << dump({{"event", "reloaded"}, {"model_version", service->model_version()}}) << std::endl;
        } catch (const Error& e) {
          report_error(ctx.err, to_string(e.code()), std::string("reload failed: ") + e.what());
        }
        continue;
      }
      service->stop();
      return;
    }
  });
  try {
    service->run();
  } catch (...) {
    pthread_kill(waiter.native_handle(), SIGTERM);
    waiter.join();
    throw;
  }
  waiter.join();
  ctx.out << dump({{"event", "stopped"}}) << std::endl;
  return 0;
}

// ---------------------------------------------------------------------------

struct ChatArgs {
  std::string model;
  std::string generator;
  std::string stub;
  int n = 4;
  bool verbose = false;
  bool partial = false;
  int timeout_ms = 10000;
  std::string greeting;
};

int run_chat(const ChatArgs& a, Context& ctx) {
  auto model = std::make_shared<const reward::TrainedScorer>(reward::load_model(a.model));
  const reward::ModelScorer scorer(model);
  std::unique_ptr<selector::Generator> generator;
  if (!a.stub.empty()) {
    generator = std::make_unique<selector::StubGenerator>(selector::StubGenerator::from_file(a.stub));
  } else {
    generator = std::make_unique<remote::RemoteGenerator>(a.generator, a.timeout_ms);
  }
  const std::optional<std::string> greeting = a.greeting.empty() ? std::nullopt : std::optional(a.greeting);
  if (greeting) {
    ctx.out << (ctx.text ? "BOT: " + *greeting : dump({{"greeting", *greeting}})) << '\n';
  }
  std::vector<convlog::Turn> history;
  bool failed = false;
  std::string line;
  while (std::getline(ctx.in, line)) {
    const std::string message(convlog::trim(line));
    if (message.empty()) {
      continue;
    }
    if (message == "/quit" || message == "/exit") {
      break;
    }
    const int turn = static_cast<int>(history.size()) + 1;
    const auto context = labeler::render_context(greeting, history, message, scorer.context_budget());
    try {
      const auto r = selector::generate_and_select(*generator, context.text, a.n, scorer,
                                                   derive_seed(ctx.seed, static_cast<std::uint64_t>(turn)),
                                                   {a.partial, a.n});
      if (ctx.text) {
        ctx.out << "BOT: " << r.chosen_text << '\n';
        if (a.verbose) {
          for (std::size_t i = 0; i < r.candidates.size(); ++i) {
            ctx.out << (static_cast<int>(i) == r.chosen_index ? "  * [" : "    [") << i << "] "
                    << num(r.scores[i]) << ' ' << r.candidates[i] << '\n';
          }
        }
      } else {
        json j{{"turn", turn}, {"response", r.chosen_text}, {"chosen_index", r.chosen_index}};
        if (a.verbose) {
          j["candidates"] = r.candidates;
          j["scores"] = r.scores;
        }
        ctx.out << dump(j) << '\n';
      }
      ctx.out.flush();
      convlog::Turn done;
      done.user_message = message;
      done.response.text = r.chosen_text;
      history.push_back(std::move(done));
    } catch (const Error& e) {
      failed = true;
      report_error(ctx.err, to_string(e.code()), "turn " + std::to_string(turn) + ": " + e.what());
    }
  }
  return failed ? 1 : 0;
}

// ---------------------------------------------------------------------------

struct Common {
  std::uint64_t seed = 0;
  std::string format = "json";
  CLI::Option* seed_opt = nullptr;
};

void add_common(CLI::App* sub, Common& c) {
  c.seed_opt = sub->add_option("--seed", c.seed, "Random seed");
  sub->add_option("--format", c.format, "Output format")->check(CLI::IsMember({"json", "text"}));
}

}  // namespace

int run(int argc, const char* const* argv, std::istream& in, std::ostream& out, std::ostream& err) {
  CLI::App app{"Engagement-optimized response selection: logs, labels, reward models, experiments.", "engage"};
  app.failure_message(CLI::FailureMessage::help);
  app.require_subcommand(1);
  app.fallthrough();
  auto* config_opt = app.set_config("--config", "", "TOML file; a [<subcommand>] table sets that subcommand's flags");

  std::map<const CLI::App*, Common> common;
  auto add = [&](const char* name, const char* description) {
    auto* sub = app.add_subcommand(name, description);
    sub->fallthrough();
    add_common(sub, common[sub]);
    return sub;
  };

  IngestArgs ingest;
  auto* ingest_cmd = add("ingest", "Validate a conversation file and extract response rows");
  ingest_cmd->add_option("--input,-i", ingest.input, "Conversation JSONL ('-' for stdin)");
  ingest_cmd->add_option("--rows", ingest.rows, "Write response rows here ('-' for stdout)");
  ingest_cmd->add_option("--context-limit", ingest.context_limit,
                         "Keep only the prior turns a context window of this many tokens can reach (0 keeps all)")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  ingest_cmd->add_flag("--strict", ingest.strict, "Treat warnings as errors and fail on any invalid record");

  LabelArgs label;
  auto* label_cmd = add("label", "Attach pseudo-labels to response rows");
  label_cmd->add_option("--input,-i", label.input, "Row JSONL ('-' for stdin)");
  label_cmd->add_option("--output,-o", label.output, "Labeled-row JSONL ('-' for stdout)");
  label_cmd->add_option("--strategy", label.strategy, "Label family")
      ->required()
      ->check(CLI::IsMember({"continuation", "retry", "star", "intersection"}));
  label.k_opt = label_cmd->add_option("--k", label.k, "Subsequent user messages required (continuation, intersection)");
  label.s_opt = label_cmd->add_option("--s", label.s, "Minimum star rating (star)");

  TrainArgs train;
  auto* train_cmd = add("train", "Train a reward model on labeled rows");
  train_cmd->add_option("--input,-i", train.input, "Labeled-row JSONL ('-' for stdin)");
  train_cmd->add_option("--output,-o", train.output, "Model file to write")->required();
  train_cmd->add_option("--epochs", train.epochs, "Passes over the training split")->capture_default_str();
  train_cmd->add_option("--learning-rate,--lr", train.learning_rate, "SGD step size")->capture_default_str();
  train_cmd->add_option("--l2", train.l2, "L2 penalty")->capture_default_str();
  train_cmd->add_option("--val-fraction", train.val_fraction, "Share of conversations held out")->capture_default_str();
  train_cmd->add_option("--context-budget", train.context_budget, "Context tokens seen by the model")
      ->capture_default_str();
  train_cmd->add_option("--token-orders", train.token_orders, "Token n-gram orders, e.g. 1,2,3")->capture_default_str();
  train_cmd->add_option("--char-orders", train.char_orders, "Character n-gram orders, or 'none'")
      ->capture_default_str();
  train_cmd->add_option("--hash-bits", train.hash_bits, "log2 of the feature dimension")
      ->check(CLI::Range(10, 28))
      ->capture_default_str();
  train_cmd->add_option("--hash-seed", train.hash_seed, "Feature hash salt")->capture_default_str();

  EvalArgs eval;
  auto* eval_cmd = add("eval", "Evaluate a scorer on labeled rows");
  eval_cmd->add_option("--input,-i", eval.input, "Labeled-row JSONL ('-' for stdin)");
  auto* model_opt = eval_cmd->add_option("--model,-m", eval.model, "Model file");
  auto* url_opt = eval_cmd->add_option("--scorer-url", eval.scorer_url, "Remote scorer base URL");
  model_opt->excludes(url_opt);
  url_opt->excludes(model_opt);
  eval.budget_opt = eval_cmd->add_option("--context-budget", eval.context_budget, "Context tokens per row");
  eval_cmd->add_flag("--force", eval.force, "Score with a budget other than the model's");
  eval_cmd->add_option("--timeout-ms", eval.timeout_ms, "Remote scorer timeout")->capture_default_str();

  MetricsArgs met;
  auto* metrics_cmd = add("metrics", "Engagement metrics over conversation files");
  metrics_cmd->add_option("--input,-i", met.inputs, "Conversation JSONL files ('-' for stdin)");
  auto* cap_opt = metrics_cmd->add_option("--cap", met.cap, "MCL length cap")->check(CLI::PositiveNumber);
  metrics_cmd->add_flag("--uncapped", met.uncapped, "Plain mean conversation length")->excludes(cap_opt);
  metrics_cmd->add_option("--days", met.days, "Retention days, e.g. 1,7,30")->capture_default_str();
  metrics_cmd->add_option("--star-s", met.star_s, "Star thresholds, e.g. 3,4")->capture_default_str();
  metrics_cmd->add_option("--bootstrap", met.bootstrap, "Bootstrap resamples (0 disables)")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  metrics_cmd->add_option("--cluster", met.cluster, "Bootstrap resampling unit")
      ->check(CLI::IsMember({"conversation", "user"}))
      ->capture_default_str();
  metrics_cmd->add_option("--observed-through", met.observed_through, "Last observed date (YYYY-MM-DD)");

  FitArgs fit;
  auto* fit_cmd = add("fit", "Regression fits for experiment series");
  fit_cmd->add_option("kind", fit.kind, "log-linear | additive | powerlaw")
      ->required()
      ->check(CLI::IsMember({"log-linear", "additive", "powerlaw"}));
  fit_cmd->add_option("--input,-i", fit.input, "Data file ('-' for stdin)");
  fit_cmd->add_option("--x-min", fit.x_min, "Smallest length in the power-law tail")->capture_default_str();
  fit_cmd->add_flag("--conversations", fit.conversations, "powerlaw: read lengths from a conversation file");

  SimulateArgs sim;
  auto* sim_cmd = add("simulate", "Run a simulated A/B experiment");
  sim_cmd->add_option("--scenario,-s", sim.scenario, "Scenario JSON file");
  sim_cmd->add_option("--log", sim.log, "Write simulated conversations here");
  sim_cmd->add_option("--users", sim.users, "Override users per arm")->check(CLI::PositiveNumber);
  sim_cmd->add_flag("--calibrate", sim.calibrate, "Fit fatigue and latency sensitivity to the reference targets");
  sim_cmd->add_option("--calibration-conversations", sim.calibration_conversations,
                      "Conversations per calibration probe")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

  ServeArgs serve;
  auto* serve_cmd = add("serve", "Run the scoring and selection service");
  serve_cmd->allow_config_extras(CLI::config_extras_mode::ignore_all);
  auto serve_field = [&](const char* flag, const char* field, std::string& target, const char* description) {
    auto* opt = serve_cmd->add_option(flag, target, description)->configurable(false);
    serve.fields.emplace_back(field, opt);
  };
  serve_field("--listen", "listen_address", serve.listen_address, "host:port (port 0 picks a free port)");
  serve_field("--model,-m", "model_path", serve.model_path, "Model file");
  serve_field("--generator", "generator_backend", serve.generator_backend, "Generator backend base URL");
  serve_field("--default-n", "default_n", serve.default_n, "Candidates per /select without n");
  serve_field("--request-timeout-ms", "request_timeout_ms", serve.request_timeout_ms, "Per-request timeout");
  serve_field("--max-body-bytes", "max_body_bytes", serve.max_body_bytes, "Largest accepted request body");
  serve_field("--threads", "threads", serve.threads, "Worker threads");
  serve.fields.emplace_back("hot_reload",
                            serve_cmd->add_flag("--hot-reload", serve.hot_reload, "Reload the model on SIGHUP")
                                ->configurable(false));
  for (auto* opt : {serve_cmd->get_option("--seed"), serve_cmd->get_option("--format")}) {
    opt->configurable(false);
  }

  ChatArgs chat;
  auto* chat_cmd = add("chat", "Interactive best-of-N chat loop on standard input");
  chat_cmd->add_option("--model,-m", chat.model, "Model file")->required();
  auto* gen_opt = chat_cmd->add_option("--generator", chat.generator, "Generator backend base URL");
  auto* stub_opt = chat_cmd->add_option("--stub", chat.stub, "Canned candidates, one per line");
  gen_opt->excludes(stub_opt);
  stub_opt->excludes(gen_opt);
  chat_cmd->add_option("--n", chat.n, "Candidates per turn")->check(CLI::Range(1, gateway::kMaxSelectN))
      ->capture_default_str();
  chat_cmd->add_flag("--verbose,-v", chat.verbose, "Show every candidate with its score");
  chat_cmd->add_flag("--partial", chat.partial, "Select among the candidates that were generated");
  chat_cmd->add_option("--timeout-ms", chat.timeout_ms, "Generator timeout")->capture_default_str();
  chat_cmd->add_option("--greeting", chat.greeting, "Opening bot message");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  CLI::App* sub = app.get_subcommands().front();
  const Common& c = common.at(sub);
  Context ctx{in, out, err, c.seed, c.seed_opt->count() > 0, c.format == "text",
              config_opt->count() > 0 ? config_opt->as<std::string>() : std::string()};

  try {
    if (sub == ingest_cmd) {
      return run_ingest(ingest, ctx);
    }
    if (sub == label_cmd) {
      return run_label(label, ctx);
    }
    if (sub == train_cmd) {
      return run_train(train, ctx);
    }
    if (sub == eval_cmd) {
      if (eval.model.empty() && eval.scorer_url.empty()) {
        usage("eval needs --model or --scorer-url");
      }
      return run_eval(eval, ctx);
    }
    if (sub == metrics_cmd) {
      return run_metrics(met, ctx);
    }
    if (sub == fit_cmd) {
      return run_fit(fit, ctx);
    }
    if (sub == sim_cmd) {
      return run_simulate(sim, ctx);
    }
    if (sub == serve_cmd) {
      return run_serve(serve, ctx);
    }
    if (chat.generator.empty() && chat.stub.empty()) {
      usage("chat needs --generator or --stub");
    }
    return run_chat(chat, ctx);
  } catch (const CLI::ParseError& e) {
    err << sub->get_name() << ": " << e.what() << "\n\n" << sub->help();
    return 2;
  } catch (const Error& e) {
    report_error(err, to_string(e.code()), e.what());
    return 1;
  } catch (const std::exception& e) {
    report_error(err, "internal", e.what());
    return 1;
  }
}

}  // namespace engage::cli
