#include "engage/labeler.hpp"

#include <cctype>
#include <istream>
#include <ostream>

#include "engage/error.hpp"

namespace engage::labeler {

using nlohmann::json;

namespace {

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

using convlog::count_tokens;

void require_k(int k) {
  if (k < 1) {
    throw Error(ErrorCode::kInvalidArgument, "k must be >= 1");
  }
}

template <typename LabelFn>
std::vector<LabeledRow> label_all(std::span<const convlog::ResponseRow> rows,
                                  const LabelStrategy& strategy, LabelFn&& fn) {
  std::vector<LabeledRow> out;
  out.reserve(rows.size());
  for (const auto& r : rows) {
    out.push_back(LabeledRow{r, fn(r) ? 1 : 0, strategy});
  }
  return out;
}

}  // namespace

std::string_view to_string(LabelKind kind) {
  switch (kind) {
    case LabelKind::kContinuation: return "continuation";
    case LabelKind::kRetry: return "retry";
    case LabelKind::kStar: return "star";
    case LabelKind::kIntersection: return "intersection";
  }
  return "unknown";
}

LabelStrategy LabelStrategy::continuation(int k) { return {LabelKind::kContinuation, k, std::nullopt}; }
LabelStrategy LabelStrategy::retry() { return {LabelKind::kRetry, std::nullopt, std::nullopt}; }
LabelStrategy LabelStrategy::star(int s) { return {LabelKind::kStar, std::nullopt, s}; }
LabelStrategy LabelStrategy::intersection(int k) { return {LabelKind::kIntersection, k, std::nullopt}; }

void LabelStrategy::check() const {
  const bool wants_k = kind == LabelKind::kContinuation || kind == LabelKind::kIntersection;
  const bool wants_s = kind == LabelKind::kStar;
  if (wants_k != k.has_value()) {
    throw Error(ErrorCode::kInvalidArgument,
                std::string(to_string(kind)) + (wants_k ? " requires k" : " does not take k"));
  }
  if (wants_s != s.has_value()) {
    throw Error(ErrorCode::kInvalidArgument,
                std::string(to_string(kind)) + (wants_s ? " requires s" : " does not take s"));
  }
  if (k && *k < 1) {
    throw Error(ErrorCode::kInvalidArgument, "k must be >= 1");
  }
  if (s && (*s < 2 || *s > 4)) {
    throw Error(ErrorCode::kInvalidArgument, "s must be in 2..4");
  }
}

std::string LabelStrategy::descriptor() const {
  std::string d(to_string(kind));
  if (k) {
    d += ":k=" + std::to_string(*k);
  }
  if (s) {
    d += ":s=" + std::to_string(*s);
  }
  return d;
}

namespace {

LabelKind parse_kind(std::string_view name) {
  if (name == "continuation") {
    return LabelKind::kContinuation;
  }
  if (name == "retry") {
    return LabelKind::kRetry;
  }
  if (name == "star") {
    return LabelKind::kStar;
  }
  if (name == "intersection") {
    return LabelKind::kIntersection;
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown label strategy: " + std::string(name));
}

}  // namespace

LabelStrategy LabelStrategy::parse(std::string_view descriptor) {
  const auto colon = descriptor.find(':');
  LabelStrategy st;
  st.kind = parse_kind(descriptor.substr(0, colon));
  if (colon != std::string_view::npos) {
    const std::string_view param = descriptor.substr(colon + 1);
    if (param.size() < 3 || param[1] != '=') {
      throw Error(ErrorCode::kInvalidArgument, "malformed strategy parameter: " + std::string(param));
    }
    int value = 0;
    try {
      value = std::stoi(std::string(param.substr(2)));
    } catch (const std::exception&) {
      throw Error(ErrorCode::kInvalidArgument, "malformed strategy parameter: " + std::string(param));
    }
    if (param[0] == 'k') {
      st.k = value;
    } else if (param[0] == 's') {
      st.s = value;
    } else {
      throw Error(ErrorCode::kInvalidArgument, "unknown strategy parameter: " + std::string(param));
    }
  }
  st.check();
  return st;
}

json to_json(const LabelStrategy& st) {
  json j = {{"kind", std::string(to_string(st.kind))}};
  if (st.k) {
    j["k"] = *st.k;
  }
  if (st.s) {
    j["s"] = *st.s;
  }
  return j;
}

LabelStrategy strategy_from_json(const json& j) {
  if (j.is_string()) {
    return LabelStrategy::parse(j.get<std::string>());
  }
  if (!j.is_object() || !j.contains("kind") || !j["kind"].is_string()) {
    throw Error(ErrorCode::kValidation, "strategy must be an object with a kind");
  }
  LabelStrategy st;
  st.kind = parse_kind(j["kind"].get<std::string>());
  if (j.contains("k")) {
    st.k = j["k"].get<int>();
  }
  if (j.contains("s")) {
    st.s = j["s"].get<int>();
  }
  st.check();
  return st;
}

std::vector<LabeledRow> label_continuation(std::span<const convlog::ResponseRow> rows, int k) {
  require_k(k);
  return label_all(rows, LabelStrategy::continuation(k),
                   [k](const convlog::ResponseRow& r) { return r.n_subsequent_user_messages >= k; });
}

std::vector<LabeledRow> label_retry(std::span<const convlog::ResponseRow> rows) {
  return label_all(rows, LabelStrategy::retry(),
                   [](const convlog::ResponseRow& r) { return !r.regenerated; });
}

std::vector<LabeledRow> label_star(std::span<const convlog::ResponseRow> rows, int s) {
  const LabelStrategy st = LabelStrategy::star(s);
  st.check();
  std::vector<LabeledRow> out;
  for (const auto& r : rows) {
    if (r.star_rating) {
      out.push_back(LabeledRow{r, *r.star_rating >= s ? 1 : 0, st});
    }
  }
  return out;
}

std::vector<LabeledRow> label_intersection(std::span<const convlog::ResponseRow> rows, int k) {
  require_k(k);
  return label_all(rows, LabelStrategy::intersection(k), [k](const convlog::ResponseRow& r) {
    return r.n_subsequent_user_messages >= k && !r.regenerated;
  });
}

std::vector<LabeledRow> apply(const LabelStrategy& st, std::span<const convlog::ResponseRow> rows) {
  st.check();
  switch (st.kind) {
    case LabelKind::kContinuation: return label_continuation(rows, *st.k);
    case LabelKind::kRetry: return label_retry(rows);
    case LabelKind::kStar: return label_star(rows, *st.s);
    case LabelKind::kIntersection: return label_intersection(rows, *st.k);
  }
  return {};
}

json to_json(const LabeledRow& row) {
  json j = convlog::to_json(row.row);
  j["label"] = row.label;
  j["strategy"] = to_json(row.strategy);
  return j;
}

LabeledRow labeled_row_from_json(const json& j) {
  LabeledRow lr;
  lr.row = convlog::row_from_json(j);
  if (!j.contains("label") || !j["label"].is_number_integer()) {
    throw Error(ErrorCode::kValidation, "missing integer field label");
  }
  lr.label = j["label"].get<int>();
  if (lr.label != 0 && lr.label != 1) {
    throw Error(ErrorCode::kValidation, "label must be 0 or 1");
  }
  if (!j.contains("strategy")) {
    throw Error(ErrorCode::kValidation, "missing field strategy");
  }
  lr.strategy = strategy_from_json(j["strategy"]);
  return lr;
}

LabeledParseResult parse_labeled_rows(std::istream& in) {
  LabeledParseResult result;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (convlog::trim(line).empty()) {
      continue;
    }
    try {
      result.rows.push_back(labeled_row_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      result.issues.push_back({line_no, convlog::Severity::kError, std::string("malformed record: ") + e.what()});
    } catch (const Error& e) {
      result.issues.push_back({line_no, convlog::Severity::kError, e.what()});
    }
  }
  if (in.bad()) {
    throw Error(ErrorCode::kIo, "read failure after line " + std::to_string(line_no));
  }
  return result;
}

void write_labeled_row(std::ostream& out, const LabeledRow& row) { out << to_json(row).dump() << '\n'; }

bool is_standard_budget(int token_budget) {
  return token_budget == 128 || token_budget == 256 || token_budget == 512;
}

std::vector<std::string_view> tokenize(std::string_view text) {
  std::vector<std::string_view> tokens;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) {
      ++i;
    }
    const std::size_t start = i;
    while (i < text.size() && !is_space(text[i])) {
      ++i;
    }
    if (i > start) {
      tokens.push_back(text.substr(start, i - start));
    }
  }
  return tokens;
}

ContextWindow keep_last_tokens(std::string_view text, int token_budget) {
  if (token_budget < 1) {
    throw Error(ErrorCode::kInvalidArgument, "token budget must be positive");
  }
  ContextWindow w;
  w.token_budget = token_budget;
  // Walk backwards to the first character of the token_budget-th last token.
  std::size_t kept = 0;
  std::size_t pos = text.size();
  std::size_t start = text.size();
  while (pos > 0) {
    while (pos > 0 && is_space(text[pos - 1])) {
      --pos;
    }
    if (pos == 0) {
      break;
    }
    if (kept == static_cast<std::size_t>(token_budget)) {
      w.truncated = true;
      break;
    }
    while (pos > 0 && !is_space(text[pos - 1])) {
      --pos;
    }
    start = pos;
    ++kept;
  }
  if (!w.truncated) {
    start = 0;
  }
  w.text = std::string(text.substr(start));
  return w;
}

ContextWindow render_context(const std::optional<std::string>& greeting,
                             std::span<const convlog::Turn> prior_turns,
                             std::string_view user_message, int token_budget) {
  if (token_budget < 1) {
    throw Error(ErrorCode::kInvalidArgument, "token budget must be positive");
  }
  const auto budget = static_cast<std::size_t>(token_budget);
  std::size_t tokens = 1 + count_tokens(user_message);
  std::size_t first = prior_turns.size();
  while (first > 0 && tokens <= budget) {
    const auto& t = prior_turns[first - 1];
    tokens += 2 + count_tokens(t.user_message) + count_tokens(t.response.text);
    --first;
  }
  const bool with_greeting = first == 0 && greeting && tokens <= budget;
  std::string text;
  const auto line = [&text](std::string_view tag, std::string_view body) {
    if (!text.empty()) {
      text += '\n';
    }
    text += tag;
    text += ' ';
    text += body;
  };
  if (with_greeting) {
    line(kBotTag, *greeting);
  }
  for (std::size_t i = first; i < prior_turns.size(); ++i) {
    line(kUserTag, prior_turns[i].user_message);
    line(kBotTag, prior_turns[i].response.text);
  }
  line(kUserTag, user_message);
  ContextWindow w = keep_last_tokens(text, token_budget);
  // Turns or greeting skipped above count as truncation too.
  w.truncated = w.truncated || first > 0 || (greeting && !with_greeting);
  return w;
}

ContextWindow render_context(const convlog::ResponseRow& row, int token_budget) {
  return render_context(row.greeting, row.prior_turns, row.user_message, token_budget);
}

}  // namespace engage::labeler
