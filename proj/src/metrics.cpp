#include "engage/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "engage/error.hpp"
#include "engage/hash.hpp"
#include "engage/random.hpp"

namespace engage::metrics {

namespace {

[[noreturn]] void no_samples(const std::string& what) {
  throw Error(ErrorCode::kNoSamples, what + ": no samples");
}

template <typename Fn>
std::vector<ClusterSums> cluster_sums(std::span<const ConversationSummary> dataset, ClusterBy by,
                                      Fn&& per_conversation) {
  std::vector<ClusterSums> clusters;
  if (by == ClusterBy::kConversation) {
    clusters.reserve(dataset.size());
    for (const auto& s : dataset) {
      clusters.push_back(per_conversation(s));
    }
    return clusters;
  }
  std::unordered_map<std::uint64_t, std::size_t> index;
  for (const auto& s : dataset) {
    auto [it, inserted] = index.try_emplace(s.user_key, clusters.size());
    if (inserted) {
      clusters.emplace_back();
    }
    const ClusterSums add = per_conversation(s);
    clusters[it->second].numerator += add.numerator;
    clusters[it->second].denominator += add.denominator;
  }
  return clusters;
}

MetricValue ratio_metric(std::vector<ClusterSums> clusters,
                         const std::optional<BootstrapOptions>& bootstrap,
                         const std::string& name) {
  std::erase_if(clusters, [](const ClusterSums& c) { return c.denominator <= 0.0; });
  double num = 0.0;
  double den = 0.0;
  for (const auto& c : clusters) {
    num += c.numerator;
    den += c.denominator;
  }
  if (den <= 0.0) {
    no_samples(name);
  }
  MetricValue mv;
  mv.value = num / den;
  mv.n = static_cast<std::size_t>(den);
  if (bootstrap && clusters.size() >= 2) {
    mv.std_error = bootstrap_ratio_stderr(clusters, *bootstrap);
  }
  return mv;
}

}  // namespace

std::optional<double> bootstrap_ratio_stderr(std::span<const ClusterSums> clusters,
                                             const BootstrapOptions& options) {
  if (clusters.size() < 2 || options.resamples < 2) {
    return std::nullopt;
  }
  Rng rng(derive_seed(options.seed, 0xb007));
  std::uniform_int_distribution<std::size_t> pick(0, clusters.size() - 1);
  std::vector<double> stats;
  stats.reserve(static_cast<std::size_t>(options.resamples));
  for (int b = 0; b < options.resamples; ++b) {
    double num = 0.0;
    double den = 0.0;
    for (std::size_t i = 0; i < clusters.size(); ++i) {
      const auto& c = clusters[pick(rng)];
      num += c.numerator;
      den += c.denominator;
    }
    if (den > 0.0) {
      stats.push_back(num / den);
    }
  }
  if (stats.size() < 2) {
    return std::nullopt;
  }
  double mean = 0.0;
  for (double s : stats) {
    mean += s;
  }
  mean /= static_cast<double>(stats.size());
  double ss = 0.0;
  for (double s : stats) {
    ss += (s - mean) * (s - mean);
  }
  return std::sqrt(ss / static_cast<double>(stats.size() - 1));
}

ConversationSummary summarize(const convlog::Conversation& c) {
  ConversationSummary s;
  s.user_key = fnv1a(c.user_id);
  s.length = convlog::conversation_length(c);
  for (const auto& t : c.turns) {
    s.regenerated += t.response.regenerated ? 1 : 0;
    if (t.response.star_rating) {
      ++s.star_counts[static_cast<std::size_t>(*t.response.star_rating - 1)];
    }
  }
  return s;
}

std::vector<ConversationSummary> summarize(std::span<const convlog::Conversation> dataset) {
  std::vector<ConversationSummary> out;
  out.reserve(dataset.size());
  for (const auto& c : dataset) {
    out.push_back(summarize(c));
  }
  return out;
}

MetricValue mcl(std::span<const convlog::Conversation> dataset, const MclOptions& options) {
  const auto summaries = summarize(dataset);
  return mcl(summaries, options);
}

MetricValue mcl(std::span<const ConversationSummary> dataset, const MclOptions& options) {
  if (options.cap && *options.cap < 1) {
    throw Error(ErrorCode::kInvalidArgument, "mcl cap must be >= 1");
  }
  const auto cap = options.cap;
  auto clusters = cluster_sums(dataset, options.cluster_by, [cap](const ConversationSummary& s) {
    if (cap && s.length > *cap) {
      return ClusterSums{};
    }
    return ClusterSums{static_cast<double>(s.length), 1.0};
  });
  return ratio_metric(std::move(clusters), options.bootstrap, "mcl");
}

MetricValue retry_rate(std::span<const convlog::Conversation> dataset, const RateOptions& options) {
  const auto summaries = summarize(dataset);
  return retry_rate(summaries, options);
}

MetricValue retry_rate(std::span<const ConversationSummary> dataset, const RateOptions& options) {
  auto clusters = cluster_sums(dataset, options.cluster_by, [](const ConversationSummary& s) {
    return ClusterSums{static_cast<double>(s.regenerated), static_cast<double>(s.length)};
  });
  return ratio_metric(std::move(clusters), options.bootstrap, "retry_rate");
}

MetricValue star_rating_at_least(std::span<const convlog::Conversation> dataset, int s) {
  const auto summaries = summarize(dataset);
  return star_rating_at_least(summaries, s);
}

MetricValue star_rating_at_least(std::span<const ConversationSummary> dataset, int s) {
  if (s < 1 || s > 4) {
    throw Error(ErrorCode::kInvalidArgument, "star threshold must be in 1..4");
  }
  std::size_t rated = 0;
  std::size_t hits = 0;
  for (const auto& c : dataset) {
    for (int r = 1; r <= 4; ++r) {
      const auto count = static_cast<std::size_t>(c.star_counts[static_cast<std::size_t>(r - 1)]);
      rated += count;
      if (r >= s) {
        hits += count;
      }
    }
  }
  if (rated == 0) {
    no_samples("star_rating_at_least");
  }
  MetricValue mv;
  mv.value = static_cast<double>(hits) / static_cast<double>(rated);
  mv.n = rated;
  mv.std_error = std::sqrt(mv.value * (1.0 - mv.value) / static_cast<double>(rated));
  return mv;
}

MetricValue retention(std::span<const convlog::UserActivity> users, int day_x,
                      convlog::Date observed_through) {
  if (day_x < 1) {
    throw Error(ErrorCode::kInvalidArgument, "retention day must be >= 1");
  }
  const std::chrono::days offset{day_x};
  std::size_t eligible = 0;
  std::size_t active = 0;
  for (const auto& u : users) {
    const convlog::Date target = u.first_conversation_date + offset;
    if (target > observed_through) {
      continue;
    }
    ++eligible;
    active += u.active_dates.contains(target) ? 1 : 0;
  }
  if (eligible == 0) {
    no_samples("retention day " + std::to_string(day_x));
  }
  MetricValue mv;
  mv.value = static_cast<double>(active) / static_cast<double>(eligible);
  mv.n = eligible;
  mv.std_error = std::sqrt(mv.value * (1.0 - mv.value) / static_cast<double>(eligible));
  return mv;
}

MetricValue retention(std::span<const convlog::UserActivity> users, int day_x) {
  if (users.empty()) {
    no_samples("retention");
  }
  convlog::Date last = users.front().first_conversation_date;
  for (const auto& u : users) {
    if (!u.active_dates.empty()) {
      last = std::max(last, *u.active_dates.rbegin());
    }
  }
  return retention(users, day_x, last);
}

MetricValue relative_improvement(const MetricValue& treatment, const MetricValue& baseline) {
  if (baseline.value == 0.0) {
    throw Error(ErrorCode::kDomain, "relative improvement undefined for a zero baseline");
  }
  const double t = treatment.value;
  const double b = baseline.value;
  MetricValue mv;
  mv.value = 100.0 * (t - b) / b;
  mv.n = treatment.n + baseline.n;
  if (treatment.std_error || baseline.std_error) {
    const double st = treatment.std_error.value_or(0.0);
    const double sb = baseline.std_error.value_or(0.0);
    // d/dt = 100/b, d/db = -100 t / b^2
    const double gt = 100.0 / b;
    const double gb = -100.0 * t / (b * b);
    mv.std_error = std::sqrt(gt * gt * st * st + gb * gb * sb * sb);
  }
  return mv;
}

}  // namespace engage::metrics
