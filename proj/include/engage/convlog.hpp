#pragma once

// Conversation log data model: conversations, per-response rows and
// per-user activity, plus line-delimited JSON ingestion.

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace engage::convlog {

using TimePoint = std::chrono::sys_time<std::chrono::milliseconds>;
using Date = std::chrono::sys_days;

struct ChatResponse {
  std::string text;
  // True iff the user asked for this response to be regenerated at least once.
  // The stored text is the accepted (final) response.
  bool regenerated = false;
  std::optional<int> star_rating;  // 1..4
  std::optional<std::int64_t> latency_ms;

  bool operator==(const ChatResponse&) const = default;
};

struct Turn {
  std::string user_message;
  ChatResponse response;

  bool operator==(const Turn&) const = default;
};

struct Conversation {
  std::string id;
  std::string user_id;
  std::string character_id;
  TimePoint started_at{};
  // Opening message from the character; not a turn.
  std::optional<std::string> greeting;
  std::vector<Turn> turns;

  bool operator==(const Conversation&) const = default;
};

// One chatbot response with the context that preceded it. The context is
// `prior_turns` (turns 1..turn_index-1, or only the most recent of them when
// the row was extracted with a context limit) followed by `user_message`.
struct ResponseRow {
  std::string conversation_id;
  int turn_index = 1;
  std::optional<std::string> greeting;
  std::vector<Turn> prior_turns;
  std::string user_message;
  std::string response_text;
  int n_subsequent_user_messages = 0;
  bool regenerated = false;
  std::optional<int> star_rating;

  bool operator==(const ResponseRow&) const = default;
};

struct UserActivity {
  std::string user_id;
  Date first_conversation_date{};
  std::set<Date> active_dates;
};

enum class Severity { kWarning, kError };

struct ValidationIssue {
  std::size_t line = 0;  // 1-based; 0 when not tied to a line
  Severity severity = Severity::kError;
  std::string reason;
};

struct ParseOptions {
  // Upgrade warnings to errors (the record is then rejected).
  bool strict = false;
};

struct ParseResult {
  std::vector<Conversation> conversations;
  std::vector<ValidationIssue> issues;

  std::size_t error_count() const;
  std::size_t warning_count() const;
};

// Invariant violations for a conversation; empty when valid.
std::vector<std::string> validate(const Conversation& conversation);

// Platform-side soft checks; reported as warnings.
std::vector<std::string> soft_checks(const Conversation& conversation);

// Reads one conversation per line. Invalid lines are reported in `issues`
// and skipped; blank lines are ignored. Throws Error(kIo) if the stream
// cannot be read.
ParseResult parse_conversations(std::istream& in, const ParseOptions& options = {});

// Throws Error(kValidation) with the first reason on malformed input.
Conversation conversation_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Conversation& conversation);

void write_conversation(std::ostream& out, const Conversation& conversation);

int conversation_length(const Conversation& conversation);

struct ExtractOptions {
  // Keep only the prior turns that can reach a context window of this many
  // tokens; older turns (and the greeting) are dropped. Rendering with any
  // budget up to the limit is unchanged. nullopt keeps everything.
  std::optional<int> context_token_limit;
};

std::vector<ResponseRow> extract_rows(const Conversation& conversation, const ExtractOptions& options = {});

ResponseRow row_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ResponseRow& row);

struct RowParseResult {
  std::vector<ResponseRow> rows;
  std::vector<ValidationIssue> issues;
};
RowParseResult parse_rows(std::istream& in);
void write_row(std::ostream& out, const ResponseRow& row);

// Groups conversations by user; first date is the earliest start date.
std::vector<UserActivity> user_activity(std::span<const Conversation> conversations);

// ISO-8601 "YYYY-MM-DDTHH:MM:SS[.mmm](Z|+HH:MM|-HH:MM)". Throws Error(kValidation).
TimePoint parse_timestamp(std::string_view text);
std::string format_timestamp(TimePoint t);
Date parse_date(std::string_view text);
std::string format_date(Date d);

std::string_view trim(std::string_view s);

// Number of maximal runs of non-whitespace characters.
std::size_t count_tokens(std::string_view text);

}  // namespace engage::convlog
