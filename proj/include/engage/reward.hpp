#pragma once

// Engagement reward model: a logistic scorer over hashed n-gram features,
// trained with plain SGD on pseudo-labeled rows, plus evaluation and model
// persistence.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "engage/featurizer.hpp"
#include "engage/labeler.hpp"
#include "engage/scorer.hpp"

namespace engage::reward {

struct TrainConfig {
  FeaturizerConfig featurizer;
  int epochs = 5;
  double learning_rate = 0.5;
  double val_fraction = 0.1;
  std::uint64_t seed = 0;
  double l2 = 1e-6;
  int context_budget = 256;
};

struct TrainingMeta {
  int epochs_run = 0;
  int chosen_epoch = 0;  // 1-based
  std::vector<double> train_loss_by_epoch;
  std::vector<double> val_loss_by_epoch;
  std::optional<labeler::LabelStrategy> label_strategy;  // unset for mixed strategies
  int context_budget = 256;
  std::string context_format;
  std::string data_fingerprint;  // 16 hex digits
  std::size_t n_train = 0;
  std::size_t n_val = 0;
  std::uint64_t seed = 0;
  double learning_rate = 0.0;
  double l2 = 0.0;

  bool operator==(const TrainingMeta&) const = default;
};

struct TrainedScorer {
  FeaturizerConfig featurizer;
  std::vector<double> weights;  // dense, hash_dimension entries
  double bias = 0.0;
  TrainingMeta meta;

  // z = bias + w . x
  double logit(const SparseVector& x) const;
  double probability(const SparseVector& x) const;

  bool operator==(const TrainedScorer&) const = default;
};

struct Example {
  SparseVector x;
  int y = 0;
};

Example make_example(const labeler::LabeledRow& row, const FeaturizerConfig& featurizer,
                     int context_budget);

// Hex digest over rendered inputs and labels.
std::string data_fingerprint(std::span<const labeler::LabeledRow> rows, int context_budget);

// True when the conversation lands in the validation split.
bool in_validation_split(std::string_view conversation_id, double val_fraction, std::uint64_t seed);

// Throws degenerate_labels for single-class data, insufficient_data when a
// split lacks two examples of each class, diverged on a non-finite loss.
TrainedScorer train(std::span<const labeler::LabeledRow> labeled, const TrainConfig& config);

struct LossAndGradient {
  double loss = 0.0;
  std::vector<double> grad_weights;
  double grad_bias = 0.0;
};

// Mean logistic loss over `batch` plus (l2/2)|w|^2, and its exact gradient.
LossAndGradient logistic_loss_and_gradient(std::span<const double> weights, double bias,
                                           std::span<const Example> batch, double l2);

struct EvalResult {
  double accuracy = 0.0;
  std::optional<double> auc;  // undefined with a single class
  double log_loss = 0.0;
  std::size_t n = 0;
};

// Accuracy uses threshold 0.5; a score of exactly 0.5 predicts the majority
// class. AUC counts ties as one half. Log loss clamps probabilities at 1e-12.
EvalResult evaluate_scores(std::span<const double> scores, std::span<const int> labels);

EvalResult evaluate(const Scorer& scorer, std::span<const labeler::LabeledRow> labeled,
                    int context_budget);

// Scorer backed by a trained model. The context passed to score() is cut to
// the model's token budget.
class ModelScorer : public Scorer {
 public:
  // Throws budget_mismatch when `requested_budget` differs from the budget the
  // model was trained with, unless `force` is set.
  explicit ModelScorer(std::shared_ptr<const TrainedScorer> model,
                       std::optional<int> requested_budget = std::nullopt, bool force = false);

  double score(std::string_view context, std::string_view response) const override;
  std::vector<double> score_all(std::string_view context, std::span<const std::string> responses) const override;
  double score_row(const convlog::ResponseRow& row) const;

  const TrainedScorer& model() const { return *model_; }
  int context_budget() const { return budget_; }

 private:
  std::shared_ptr<const TrainedScorer> model_;
  int budget_;
};

inline constexpr int kModelFormatVersion = 1;

void write_model(std::ostream& out, const TrainedScorer& model);
TrainedScorer read_model(std::istream& in);
void save_model(const TrainedScorer& model, const std::filesystem::path& path);
TrainedScorer load_model(const std::filesystem::path& path);

// Short identifier for a model file's contents (its checksum).
std::string model_version(const TrainedScorer& model);

}  // namespace engage::reward
