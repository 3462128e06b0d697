#include "engage/reward.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "engage/error.hpp"
#include "engage/hash.hpp"
#include "engage/random.hpp"

namespace engage::reward {

namespace {

constexpr double kProbabilityFloor = 1e-12;

// log(1 + exp(z)) without overflow.
double softplus(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

// -log p(y | z) for a logistic model.
double logistic_nll(double z, int y) { return y == 1 ? softplus(-z) : softplus(z); }

double clamped_nll(double p, int y) {
  p = std::clamp(p, kProbabilityFloor, 1.0 - kProbabilityFloor);
  return y == 1 ? -std::log(p) : -std::log1p(-p);
}

double dot(std::span<const double> w, const SparseVector& x) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.index.size(); ++i) {
    s += w[x.index[i]] * x.value[i];
  }
  return s;
}

double mean_nll(const TrainedScorer& model, std::span<const Example> examples) {
  double total = 0.0;
  for (const auto& e : examples) {
    total += clamped_nll(model.probability(e.x), e.y);
  }
  return total / static_cast<double>(examples.size());
}

struct ClassCounts {
  std::size_t pos = 0;
  std::size_t neg = 0;
};

ClassCounts count_classes(std::span<const Example> examples) {
  ClassCounts c;
  for (const auto& e : examples) {
    (e.y == 1 ? c.pos : c.neg) += 1;
  }
  return c;
}

}  // namespace

double TrainedScorer::logit(const SparseVector& x) const { return bias + dot(weights, x); }

double TrainedScorer::probability(const SparseVector& x) const { return logistic(logit(x)); }

Example make_example(const labeler::LabeledRow& row, const FeaturizerConfig& featurizer,
                     int context_budget) {
  const auto window = labeler::render_context(row.row, context_budget);
  return Example{featurize(window.text, row.row.response_text, featurizer), row.label};
}

std::string data_fingerprint(std::span<const labeler::LabeledRow> rows, int context_budget) {
  std::uint64_t h = kFnvOffset;
  for (const auto& r : rows) {
    h = fnv1a(labeler::render_context(r.row, context_budget).text, h);
    h = fnv1a_byte(0x1e, h);
    h = fnv1a(r.row.response_text, h);
    h = fnv1a_byte(static_cast<unsigned char>('0' + r.label), h);
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

bool in_validation_split(std::string_view conversation_id, double val_fraction, std::uint64_t seed) {
  const std::uint64_t h = mix64(fnv1a(conversation_id) ^ mix64(seed ^ 0x5eedULL));
  return static_cast<double>(h >> 11) * 0x1.0p-53 < val_fraction;
}

LossAndGradient logistic_loss_and_gradient(std::span<const double> weights, double bias,
                                           std::span<const Example> batch, double l2) {
  LossAndGradient out;
  out.grad_weights.assign(weights.size(), 0.0);
  if (batch.empty()) {
    return out;
  }
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (const auto& e : batch) {
    const double z = bias + dot(weights, e.x);
    out.loss += logistic_nll(z, e.y) * inv_n;
    const double residual = (logistic(z) - e.y) * inv_n;
    for (std::size_t i = 0; i < e.x.index.size(); ++i) {
      out.grad_weights[e.x.index[i]] += residual * e.x.value[i];
    }
    out.grad_bias += residual;
  }
  double norm2 = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    norm2 += weights[i] * weights[i];
    out.grad_weights[i] += l2 * weights[i];
  }
  out.loss += 0.5 * l2 * norm2;
  return out;
}

TrainedScorer train(std::span<const labeler::LabeledRow> labeled, const TrainConfig& config) {
  config.featurizer.check();
  if (config.epochs < 1) {
    throw Error(ErrorCode::kInvalidArgument, "epochs must be >= 1");
  }
  if (!(config.learning_rate > 0.0) || !(config.l2 >= 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "learning rate must be > 0 and l2 >= 0");
  }
  if (!(config.val_fraction > 0.0 && config.val_fraction < 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "val_fraction must be in (0, 1)");
  }
  if (config.context_budget < 1) {
    throw Error(ErrorCode::kInvalidArgument, "context budget must be positive");
  }
  std::size_t positives = 0;
  for (const auto& r : labeled) {
    positives += r.label == 1 ? 1 : 0;
  }
  if (positives == 0 || positives == labeled.size()) {
    throw Error(ErrorCode::kDegenerateLabels, "training data contains a single class");
  }

  std::vector<Example> train_set;
  std::vector<Example> val_set;
  for (const auto& r : labeled) {
    auto& target = in_validation_split(r.row.conversation_id, config.val_fraction, config.seed)
                       ? val_set
                       : train_set;
    target.push_back(make_example(r, config.featurizer, config.context_budget));
  }
  for (const auto* split : {&train_set, &val_set}) {
    const ClassCounts c = count_classes(*split);
    if (c.pos < 2 || c.neg < 2) {
      throw Error(ErrorCode::kInsufficientData,
                  std::string(split == &train_set ? "training" : "validation") +
                      " split needs at least two examples of each class");
    }
  }

  TrainedScorer model;
  model.featurizer = config.featurizer;
  model.weights.assign(config.featurizer.hash_dimension, 0.0);
  TrainedScorer best;

  TrainingMeta& meta = model.meta;
  meta.context_budget = config.context_budget;
  meta.context_format = std::string(labeler::kContextFormat);
  meta.data_fingerprint = data_fingerprint(labeled, config.context_budget);
  meta.n_train = train_set.size();
  meta.n_val = val_set.size();
  meta.seed = config.seed;
  meta.learning_rate = config.learning_rate;
  meta.l2 = config.l2;
  const auto first_strategy = labeled.front().strategy;
  if (std::all_of(labeled.begin(), labeled.end(),
                  [&](const auto& r) { return r.strategy == first_strategy; })) {
    meta.label_strategy = first_strategy;
  }

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const double lr = config.learning_rate;
  const double decay = 1.0 - lr * config.l2;
  double best_val = std::numeric_limits<double>::infinity();

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    // Weights are stored as scale * v so L2 shrinkage stays O(1) per step.
    double scale = 1.0;
    double epoch_loss = 0.0;
    for (const std::size_t idx : order) {
      const Example& e = train_set[idx];
      const double z = model.bias + scale * dot(model.weights, e.x);
      epoch_loss += logistic_nll(z, e.y);
      const double residual = logistic(z) - e.y;
      if (config.l2 > 0.0) {
        scale *= decay;
        if (scale < 1e-9) {
          for (double& w : model.weights) {
            w *= scale;
          }
          scale = 1.0;
        }
      }
      const double step = lr * residual / scale;
      for (std::size_t i = 0; i < e.x.index.size(); ++i) {
        model.weights[e.x.index[i]] -= step * e.x.value[i];
      }
      model.bias -= lr * residual;
    }
    if (scale != 1.0) {
      for (double& w : model.weights) {
        w *= scale;
      }
    }
    const double train_loss = epoch_loss / static_cast<double>(train_set.size());
    const double val_loss = mean_nll(model, val_set);
    if (!std::isfinite(train_loss) || !std::isfinite(val_loss) || !std::isfinite(model.bias)) {
      throw Error(ErrorCode::kDiverged, "loss is not finite at epoch " + std::to_string(epoch));
    }
    meta.train_loss_by_epoch.push_back(train_loss);
    meta.val_loss_by_epoch.push_back(val_loss);
    meta.epochs_run = epoch;
    if (val_loss < best_val) {
      best_val = val_loss;
      meta.chosen_epoch = epoch;
      best.weights = model.weights;
      best.bias = model.bias;
    }
  }
  model.weights = std::move(best.weights);
  model.bias = best.bias;
  return model;
}

EvalResult evaluate_scores(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) {
    throw Error(ErrorCode::kInvalidArgument, "scores and labels differ in length");
  }
  if (scores.empty()) {
    throw Error(ErrorCode::kNoSamples, "evaluation set is empty");
  }
  EvalResult r;
  r.n = scores.size();
  std::size_t positives = 0;
  for (int y : labels) {
    positives += y == 1 ? 1 : 0;
  }
  const std::size_t negatives = r.n - positives;
  const int majority = positives >= negatives ? 1 : 0;
  std::size_t correct = 0;
  double nll = 0.0;
  for (std::size_t i = 0; i < r.n; ++i) {
    const int predicted = scores[i] > 0.5 ? 1 : scores[i] < 0.5 ? 0 : majority;
    correct += predicted == labels[i] ? 1 : 0;
    nll += clamped_nll(scores[i], labels[i]);
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(r.n);
  r.log_loss = nll / static_cast<double>(r.n);
  if (positives > 0 && negatives > 0) {
    // Mann-Whitney U with mid-ranks for ties.
    std::vector<std::size_t> order(r.n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < r.n;) {
      std::size_t j = i;
      while (j < r.n && scores[order[j]] == scores[order[i]]) {
        ++j;
      }
      const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);
      for (std::size_t k = i; k < j; ++k) {
        if (labels[order[k]] == 1) {
          rank_sum += mid_rank;
        }
      }
      i = j;
    }
    const double p = static_cast<double>(positives);
    r.auc = (rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(negatives));
  }
  return r;
}

EvalResult evaluate(const Scorer& scorer, std::span<const labeler::LabeledRow> labeled, int context_budget) {
  std::vector<double> scores;
  std::vector<int> labels;
  scores.reserve(labeled.size());
  labels.reserve(labeled.size());
  for (const auto& r : labeled) {
    const auto window = labeler::render_context(r.row, context_budget);
    scores.push_back(scorer.score(window.text, r.row.response_text));
    labels.push_back(r.label);
  }
  return evaluate_scores(scores, labels);
}

ModelScorer::ModelScorer(std::shared_ptr<const TrainedScorer> model, std::optional<int> requested_budget,
                         bool force)
    : model_(std::move(model)), budget_(model_->meta.context_budget) {
  if (requested_budget && *requested_budget != budget_) {
    if (!force) {
      throw Error(ErrorCode::kBudgetMismatch,
                  "model was trained with context budget " + std::to_string(budget_) +
                      ", requested " + std::to_string(*requested_budget) + " (use --force to override)");
    }
    budget_ = *requested_budget;
  }
}

double ModelScorer::score(std::string_view context, std::string_view response) const {
  const auto window = labeler::keep_last_tokens(context, budget_);
  return model_->probability(featurize(window.text, response, model_->featurizer));
}

std::vector<double> ModelScorer::score_all(std::string_view context,
                                           std::span<const std::string> responses) const {
  const auto window = labeler::keep_last_tokens(context, budget_);
  const ContextFeatures shared(window.text, model_->featurizer);
  std::vector<double> out;
  out.reserve(responses.size());
  for (const auto& r : responses) {
    out.push_back(model_->probability(shared.featurize(r)));
  }
  return out;
}

double ModelScorer::score_row(const convlog::ResponseRow& row) const {
  const auto window = labeler::render_context(row, budget_);
  return model_->probability(featurize(window.text, row.response_text, model_->featurizer));
}

}  // namespace engage::reward
