#pragma once

// Pseudo-labels derived from conversation outcomes, and the bounded context
// window handed to a scorer.

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "engage/convlog.hpp"
#include "json.hpp"

namespace engage::labeler {

enum class LabelKind { kContinuation, kRetry, kStar, kIntersection };

struct LabelStrategy {
  LabelKind kind = LabelKind::kContinuation;
  std::optional<int> k;  // continuation, intersection
  std::optional<int> s;  // star

  static LabelStrategy continuation(int k);
  static LabelStrategy retry();
  static LabelStrategy star(int s);
  static LabelStrategy intersection(int k);

  // Throws Error(kInvalidArgument) if fields do not match the kind.
  void check() const;
  // Compact form, e.g. "continuation:k=2", "star:s=3", "retry".
  std::string descriptor() const;
  static LabelStrategy parse(std::string_view descriptor);

  bool operator==(const LabelStrategy&) const = default;
};

std::string_view to_string(LabelKind kind);

nlohmann::json to_json(const LabelStrategy& strategy);
LabelStrategy strategy_from_json(const nlohmann::json& j);

struct LabeledRow {
  convlog::ResponseRow row;
  int label = 0;
  LabelStrategy strategy;
};

// label = 1 iff at least k user messages followed the response, so the last
// k responses of each conversation are 0.
std::vector<LabeledRow> label_continuation(std::span<const convlog::ResponseRow> rows, int k);
// label = 1 iff the response was never regenerated.
std::vector<LabeledRow> label_retry(std::span<const convlog::ResponseRow> rows);
// Unrated rows are dropped; label = 1 iff rating >= s.
std::vector<LabeledRow> label_star(std::span<const convlog::ResponseRow> rows, int s);
// Continuation-k AND not regenerated.
std::vector<LabeledRow> label_intersection(std::span<const convlog::ResponseRow> rows, int k);

std::vector<LabeledRow> apply(const LabelStrategy& strategy,
                              std::span<const convlog::ResponseRow> rows);

nlohmann::json to_json(const LabeledRow& row);
LabeledRow labeled_row_from_json(const nlohmann::json& j);

struct LabeledParseResult {
  std::vector<LabeledRow> rows;
  std::vector<convlog::ValidationIssue> issues;
};
LabeledParseResult parse_labeled_rows(std::istream& in);
void write_labeled_row(std::ostream& out, const LabeledRow& row);

// ---------------------------------------------------------------------------
// Context rendering

inline constexpr std::string_view kContextFormat = "speaker-tags-v1";
inline constexpr std::string_view kUserTag = "USER:";
inline constexpr std::string_view kBotTag = "BOT:";

struct ContextWindow {
  std::string text;
  int token_budget = 256;
  bool truncated = false;
};

bool is_standard_budget(int token_budget);

// Serializes the context as "USER: ..." / "BOT: ..." lines, oldest first,
// and keeps the final `token_budget` whitespace-delimited tokens. Budgets
// other than 128/256/512 are accepted; callers may warn via
// is_standard_budget.
ContextWindow render_context(const convlog::ResponseRow& row, int token_budget);

// Same rendering from loose parts. Only the turns that can contribute to the
// window are serialized.
ContextWindow render_context(const std::optional<std::string>& greeting,
                             std::span<const convlog::Turn> prior_turns,
                             std::string_view user_message, int token_budget);

// Keeps the last `token_budget` tokens of `text` without splitting tokens.
ContextWindow keep_last_tokens(std::string_view text, int token_budget);

// Tokens are maximal runs of non-whitespace.
std::vector<std::string_view> tokenize(std::string_view text);

}  // namespace engage::labeler
