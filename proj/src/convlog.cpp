#include "engage/convlog.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <istream>
#include <map>
#include <ostream>

#include "engage/error.hpp"

namespace engage::convlog {

using nlohmann::json;

namespace {

// Howard Hinnant's days_from_civil.
constexpr std::int64_t days_from_civil(std::int64_t y, unsigned m, unsigned d) {
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const auto yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

[[noreturn]] void invalid(const std::string& reason) {
  throw Error(ErrorCode::kValidation, reason);
}

int parse_fixed(std::string_view text, std::size_t pos, std::size_t len,
                std::string_view what) {
  if (pos + len > text.size()) {
    invalid("timestamp too short at " + std::string(what));
  }
  int value = 0;
  for (std::size_t i = pos; i < pos + len; ++i) {
    if (!std::isdigit(static_cast<unsigned char>(text[i]))) {
      invalid("timestamp has non-digit in " + std::string(what));
    }
    value = value * 10 + (text[i] - '0');
  }
  return value;
}

void expect_char(std::string_view text, std::size_t pos, char c) {
  if (pos >= text.size() || text[pos] != c) {
    invalid(std::string("timestamp expected '") + c + "' at offset " + std::to_string(pos));
  }
}

const json& require(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end()) {
    invalid(std::string("missing field ") + key);
  }
  return *it;
}

std::string require_string(const json& j, const char* key) {
  const json& v = require(j, key);
  if (!v.is_string()) {
    invalid(std::string(key) + " must be a string");
  }
  return v.get<std::string>();
}

std::optional<int> optional_star(const json& j) {
  auto it = j.find("star_rating");
  if (it == j.end() || it->is_null()) {
    return std::nullopt;
  }
  if (!it->is_number_integer()) {
    invalid("star_rating must be an integer");
  }
  const auto v = it->get<std::int64_t>();
  if (v < 1 || v > 4) {
    invalid("star_rating out of range");
  }
  return static_cast<int>(v);
}

bool optional_bool(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) {
    return false;
  }
  if (!it->is_boolean()) {
    invalid(std::string(key) + " must be a boolean");
  }
  return it->get<bool>();
}

ChatResponse response_from_json(const json& j) {
  if (!j.is_object()) {
    invalid("response must be an object");
  }
  ChatResponse r;
  r.text = require_string(j, "text");
  r.regenerated = optional_bool(j, "regenerated");
  r.star_rating = optional_star(j);
  if (auto it = j.find("latency_ms"); it != j.end() && !it->is_null()) {
    if (!it->is_number_integer() || it->get<std::int64_t>() < 0) {
      invalid("latency_ms must be a non-negative integer");
    }
    r.latency_ms = it->get<std::int64_t>();
  }
  return r;
}

json to_json(const ChatResponse& r) {
  json j = {{"text", r.text}, {"regenerated", r.regenerated}};
  j["star_rating"] = r.star_rating ? json(*r.star_rating) : json(nullptr);
  if (r.latency_ms) {
    j["latency_ms"] = *r.latency_ms;
  }
  return j;
}

Turn turn_from_json(const json& j) {
  if (!j.is_object()) {
    invalid("turn must be an object");
  }
  return Turn{require_string(j, "user_message"), response_from_json(require(j, "response"))};
}

json to_json(const Turn& t) {
  return json{{"user_message", t.user_message}, {"response", to_json(t.response)}};
}

std::vector<Turn> turns_from_json(const json& j, const char* key) {
  const json& arr = require(j, key);
  if (!arr.is_array()) {
    invalid(std::string(key) + " must be an array");
  }
  std::vector<Turn> turns;
  turns.reserve(arr.size());
  for (const auto& t : arr) {
    turns.push_back(turn_from_json(t));
  }
  return turns;
}

json turns_to_json(const std::vector<Turn>& turns) {
  json arr = json::array();
  for (const auto& t : turns) {
    arr.push_back(to_json(t));
  }
  return arr;
}

std::optional<std::string> optional_string(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) {
    return std::nullopt;
  }
  if (!it->is_string()) {
    invalid(std::string(key) + " must be a string");
  }
  return it->get<std::string>();
}

template <typename ParseFn>
void for_each_line(std::istream& in, ParseFn&& fn) {
  if (!in.good() && !in.eof()) {
    throw Error(ErrorCode::kIo, "input stream is not readable");
  }
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) {
      continue;
    }
    fn(line_no, line);
  }
  if (in.bad()) {
    throw Error(ErrorCode::kIo, "read failure after line " + std::to_string(line_no));
  }
}

}  // namespace

std::string_view trim(std::string_view s) {
  const auto is_space = [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; };
  while (!s.empty() && is_space(s.front())) {
    s.remove_prefix(1);
  }
  while (!s.empty() && is_space(s.back())) {
    s.remove_suffix(1);
  }
  return s;
}

TimePoint parse_timestamp(std::string_view text) {
  const int year = parse_fixed(text, 0, 4, "year");
  expect_char(text, 4, '-');
  const int month = parse_fixed(text, 5, 2, "month");
  expect_char(text, 7, '-');
  const int day = parse_fixed(text, 8, 2, "day");
  if (month < 1 || month > 12 || day < 1 || day > 31) {
    invalid("timestamp date out of range");
  }
  std::int64_t ms = days_from_civil(year, static_cast<unsigned>(month),
                                    static_cast<unsigned>(day)) * 86'400'000LL;
  if (text.size() == 10) {
    return TimePoint{std::chrono::milliseconds{ms}};
  }
  if (text[10] != 'T' && text[10] != ' ') {
    invalid("timestamp expected 'T' after date");
  }
  const int hh = parse_fixed(text, 11, 2, "hour");
  expect_char(text, 13, ':');
  const int mm = parse_fixed(text, 14, 2, "minute");
  expect_char(text, 16, ':');
  const int ss = parse_fixed(text, 17, 2, "second");
  if (hh > 23 || mm > 59 || ss > 60) {
    invalid("timestamp time out of range");
  }
  ms += ((hh * 60LL + mm) * 60LL + ss) * 1000LL;
  std::size_t pos = 19;
  if (pos < text.size() && text[pos] == '.') {
    ++pos;
    int frac = 0;
    int digits = 0;
    while (pos < text.size() && std::isdigit(static_cast<unsigned char>(text[pos]))) {
      if (digits < 3) {
        frac = frac * 10 + (text[pos] - '0');
      }
      ++digits;
      ++pos;
    }
    if (digits == 0) {
      invalid("timestamp has empty fraction");
    }
    for (int d = digits; d < 3; ++d) {
      frac *= 10;
    }
    ms += frac;
  }
  if (pos == text.size()) {
    invalid("timestamp is missing a UTC offset");
  }
  if (text[pos] == 'Z') {
    ++pos;
  } else if (text[pos] == '+' || text[pos] == '-') {
    const int sign = text[pos] == '+' ? 1 : -1;
    const int oh = parse_fixed(text, pos + 1, 2, "offset hour");
    expect_char(text, pos + 3, ':');
    const int om = parse_fixed(text, pos + 4, 2, "offset minute");
    ms -= sign * (oh * 60LL + om) * 60'000LL;
    pos += 6;
  } else {
    invalid("timestamp has an invalid UTC offset");
  }
  if (pos != text.size()) {
    invalid("trailing characters after timestamp");
  }
  return TimePoint{std::chrono::milliseconds{ms}};
}

std::string format_date(Date d) {
  const std::chrono::year_month_day ymd{d};
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()));
  return buf;
}

Date parse_date(std::string_view text) {
  if (text.size() != 10) {
    invalid("date must be YYYY-MM-DD");
  }
  return std::chrono::floor<std::chrono::days>(parse_timestamp(text));
}

std::string format_timestamp(TimePoint t) {
  const auto day = std::chrono::floor<std::chrono::days>(t);
  const auto ms = (t - day).count();
  const auto secs = ms / 1000;
  char buf[40];
  if (ms % 1000 == 0) {
    std::snprintf(buf, sizeof buf, "%sT%02lld:%02lld:%02lldZ", format_date(day).c_str(),
                  static_cast<long long>(secs / 3600), static_cast<long long>(secs / 60 % 60),
                  static_cast<long long>(secs % 60));
  } else {
    std::snprintf(buf, sizeof buf, "%sT%02lld:%02lld:%02lld.%03lldZ", format_date(day).c_str(),
                  static_cast<long long>(secs / 3600), static_cast<long long>(secs / 60 % 60),
                  static_cast<long long>(secs % 60), static_cast<long long>(ms % 1000));
  }
  return buf;
}

std::size_t ParseResult::error_count() const {
  return static_cast<std::size_t>(std::count_if(
      issues.begin(), issues.end(), [](const auto& i) { return i.severity == Severity::kError; }));
}

std::size_t ParseResult::warning_count() const { return issues.size() - error_count(); }

std::vector<std::string> validate(const Conversation& c) {
  std::vector<std::string> reasons;
  if (c.id.empty()) {
    reasons.emplace_back("id is empty");
  }
  if (c.turns.empty()) {
    reasons.emplace_back("turns is empty");
  }
  for (std::size_t i = 0; i < c.turns.size(); ++i) {
    const auto& t = c.turns[i];
    const std::string where = "turn " + std::to_string(i + 1) + ": ";
    if (trim(t.user_message).empty()) {
      reasons.push_back(where + "user_message is empty");
    }
    if (trim(t.response.text).empty()) {
      reasons.push_back(where + "response text is empty");
    }
    if (t.response.star_rating && (*t.response.star_rating < 1 || *t.response.star_rating > 4)) {
      reasons.push_back(where + "star_rating out of range");
    }
    if (t.response.latency_ms && *t.response.latency_ms < 0) {
      reasons.push_back(where + "latency_ms is negative");
    }
  }
  return reasons;
}

std::vector<std::string> soft_checks(const Conversation& c) {
  std::vector<std::string> warnings;
  // The platform records a conversation once it holds a character message
  // and a user reply; a lone turn without a greeting cannot show that.
  if (c.turns.size() == 1 && !c.greeting) {
    warnings.emplace_back("conversation has fewer than two messages before the first response");
  }
  return warnings;
}

Conversation conversation_from_json(const json& j) {
  if (!j.is_object()) {
    invalid("record must be a JSON object");
  }
  Conversation c;
  c.id = require_string(j, "id");
  c.user_id = require_string(j, "user_id");
  c.character_id = require_string(j, "character_id");
  c.started_at = parse_timestamp(require_string(j, "started_at"));
  c.greeting = optional_string(j, "greeting");
  c.turns = turns_from_json(j, "turns");
  if (auto reasons = validate(c); !reasons.empty()) {
    invalid(reasons.front());
  }
  return c;
}

json to_json(const Conversation& c) {
  json j = {{"id", c.id},
            {"user_id", c.user_id},
            {"character_id", c.character_id},
            {"started_at", format_timestamp(c.started_at)}};
  if (c.greeting) {
    j["greeting"] = *c.greeting;
  }
  j["turns"] = turns_to_json(c.turns);
  return j;
}

void write_conversation(std::ostream& out, const Conversation& c) {
  out << to_json(c).dump() << '\n';
}

ParseResult parse_conversations(std::istream& in, const ParseOptions& options) {
  ParseResult result;
  for_each_line(in, [&](std::size_t line_no, const std::string& line) {
    try {
      Conversation c = conversation_from_json(json::parse(line));
      const auto warnings = soft_checks(c);
      const Severity severity = options.strict ? Severity::kError : Severity::kWarning;
      for (const auto& w : warnings) {
        result.issues.push_back({line_no, severity, w});
      }
      if (!options.strict || warnings.empty()) {
        result.conversations.push_back(std::move(c));
      }
    } catch (const json::exception& e) {
      result.issues.push_back({line_no, Severity::kError, std::string("malformed record: ") + e.what()});
    } catch (const Error& e) {
      result.issues.push_back({line_no, Severity::kError, e.what()});
    }
  });
  return result;
}

int conversation_length(const Conversation& c) { return static_cast<int>(c.turns.size()); }

std::size_t count_tokens(std::string_view text) {
  std::size_t n = 0;
  bool in_token = false;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch)) != 0) {
      in_token = false;
    } else if (!in_token) {
      in_token = true;
      ++n;
    }
  }
  return n;
}

std::vector<ResponseRow> extract_rows(const Conversation& c, const ExtractOptions& options) {
  if (options.context_token_limit && *options.context_token_limit < 1) {
    throw Error(ErrorCode::kInvalidArgument, "context token limit must be positive");
  }
  const int n = conversation_length(c);
  std::vector<ResponseRow> rows;
  rows.reserve(c.turns.size());
  for (int i = 1; i <= n; ++i) {
    const Turn& turn = c.turns[static_cast<std::size_t>(i - 1)];
    ResponseRow row;
    row.conversation_id = c.id;
    row.turn_index = i;
    auto first = static_cast<std::size_t>(i - 1);
    if (options.context_token_limit) {
      // Same walk as the context renderer: stop once the window is overfull.
      const auto limit = static_cast<std::size_t>(*options.context_token_limit);
      std::size_t tokens = 1 + count_tokens(turn.user_message);
      while (first > 0 && tokens <= limit) {
        const Turn& t = c.turns[first - 1];
        tokens += 2 + count_tokens(t.user_message) + count_tokens(t.response.text);
        --first;
      }
    } else {
      first = 0;
    }
    if (first == 0) {
      row.greeting = c.greeting;
    }
    row.prior_turns.assign(c.turns.begin() + static_cast<std::ptrdiff_t>(first), c.turns.begin() + (i - 1));
    row.user_message = turn.user_message;
    row.response_text = turn.response.text;
    row.n_subsequent_user_messages = n - i;
    row.regenerated = turn.response.regenerated;
    row.star_rating = turn.response.star_rating;
    rows.push_back(std::move(row));
  }
  return rows;
}

ResponseRow row_from_json(const json& j) {
  if (!j.is_object()) {
    invalid("row must be a JSON object");
  }
  ResponseRow row;
  row.conversation_id = require_string(j, "conversation_id");
  const json& ti = require(j, "turn_index");
  if (!ti.is_number_integer() || ti.get<std::int64_t>() < 1) {
    invalid("turn_index must be an integer >= 1");
  }
  row.turn_index = ti.get<int>();
  row.greeting = optional_string(j, "greeting");
  row.prior_turns = turns_from_json(j, "context_turns");
  row.user_message = require_string(j, "user_message");
  row.response_text = require_string(j, "response_text");
  const json& ns = require(j, "n_subsequent_user_messages");
  if (!ns.is_number_integer() || ns.get<std::int64_t>() < 0) {
    invalid("n_subsequent_user_messages must be a non-negative integer");
  }
  row.n_subsequent_user_messages = ns.get<int>();
  row.regenerated = optional_bool(j, "regenerated");
  row.star_rating = optional_star(j);
  if (row.prior_turns.size() + 1 > static_cast<std::size_t>(row.turn_index)) {
    invalid("context_turns holds more than turn_index - 1 turns");
  }
  if (row.greeting && row.prior_turns.size() + 1 != static_cast<std::size_t>(row.turn_index)) {
    invalid("greeting present but context_turns is truncated");
  }
  return row;
}

json to_json(const ResponseRow& row) {
  json j = {{"conversation_id", row.conversation_id}, {"turn_index", row.turn_index}};
  if (row.greeting) {
    j["greeting"] = *row.greeting;
  }
  j["context_turns"] = turns_to_json(row.prior_turns);
  j["user_message"] = row.user_message;
  j["response_text"] = row.response_text;
  j["n_subsequent_user_messages"] = row.n_subsequent_user_messages;
  j["regenerated"] = row.regenerated;
  j["star_rating"] = row.star_rating ? json(*row.star_rating) : json(nullptr);
  return j;
}

RowParseResult parse_rows(std::istream& in) {
  RowParseResult result;
  for_each_line(in, [&](std::size_t line_no, const std::string& line) {
    try {
      result.rows.push_back(row_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      result.issues.push_back({line_no, Severity::kError, std::string("malformed record: ") + e.what()});
    } catch (const Error& e) {
      result.issues.push_back({line_no, Severity::kError, e.what()});
    }
  });
  return result;
}

void write_row(std::ostream& out, const ResponseRow& row) { out << to_json(row).dump() << '\n'; }

std::vector<UserActivity> user_activity(std::span<const Conversation> conversations) {
  std::map<std::string, UserActivity> by_user;
  for (const auto& c : conversations) {
    const Date day = std::chrono::floor<std::chrono::days>(c.started_at);
    auto [it, inserted] = by_user.try_emplace(c.user_id);
    UserActivity& ua = it->second;
    if (inserted) {
      ua.user_id = c.user_id;
      ua.first_conversation_date = day;
    } else {
      ua.first_conversation_date = std::min(ua.first_conversation_date, day);
    }
    ua.active_dates.insert(day);
  }
  std::vector<UserActivity> out;
  out.reserve(by_user.size());
  for (auto& [_, ua] : by_user) {
    out.push_back(std::move(ua));
  }
  return out;
}

}  // namespace engage::convlog
