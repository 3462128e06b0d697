#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "engage/error.hpp"
#include "engage/hash.hpp"
#include "engage/reward.hpp"

namespace engage::reward {

using nlohmann::json;

namespace {

constexpr std::string_view kMagic = "engage-scorer";

std::string hex_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
  return buf;
}

[[noreturn]] void corrupt(const std::string& what) {
  throw Error(ErrorCode::kCorruptFile, "corrupt model file: " + what);
}

double parse_double(std::string_view text) {
  const std::string s(text);
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) {
    corrupt("bad number '" + s + "'");
  }
  return v;
}

json meta_to_json(const TrainingMeta& m) {
  json j{{"epochs_run", m.epochs_run},
         {"chosen_epoch", m.chosen_epoch},
         {"train_loss_by_epoch", m.train_loss_by_epoch},
         {"val_loss_by_epoch", m.val_loss_by_epoch},
         {"label_strategy", nullptr},
         {"context_budget", m.context_budget},
         {"context_format", m.context_format},
         {"data_fingerprint", m.data_fingerprint},
         {"n_train", m.n_train},
         {"n_val", m.n_val},
         {"seed", m.seed},
         {"learning_rate", m.learning_rate},
         {"l2", m.l2}};
  if (m.label_strategy) {
    j["label_strategy"] = m.label_strategy->descriptor();
  }
  return j;
}

TrainingMeta meta_from_json(const json& j) {
  TrainingMeta m;
  m.epochs_run = j.at("epochs_run").get<int>();
  m.chosen_epoch = j.at("chosen_epoch").get<int>();
  m.train_loss_by_epoch = j.at("train_loss_by_epoch").get<std::vector<double>>();
  m.val_loss_by_epoch = j.at("val_loss_by_epoch").get<std::vector<double>>();
  if (!j.at("label_strategy").is_null()) {
    m.label_strategy = labeler::LabelStrategy::parse(j.at("label_strategy").get<std::string>());
  }
  m.context_budget = j.at("context_budget").get<int>();
  m.context_format = j.at("context_format").get<std::string>();
  m.data_fingerprint = j.at("data_fingerprint").get<std::string>();
  m.n_train = j.at("n_train").get<std::size_t>();
  m.n_val = j.at("n_val").get<std::size_t>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.learning_rate = j.at("learning_rate").get<double>();
  m.l2 = j.at("l2").get<double>();
  return m;
}

std::string serialize_body(const TrainedScorer& model) {
  std::string out;
  out.append(kMagic).append(" ").append(std::to_string(kModelFormatVersion)).append("\n");
  const json header{{"featurizer", to_json(model.featurizer)}, {"meta", meta_to_json(model.meta)}};
  out.append(header.dump()).append("\n");
  std::size_t nonzero = 0;
  for (double w : model.weights) {
    nonzero += w != 0.0 ? 1 : 0;
  }
  out.append("weights ").append(std::to_string(nonzero)).append("\n");
  for (std::size_t i = 0; i < model.weights.size(); ++i) {
    if (model.weights[i] != 0.0) {
      out.append(std::to_string(i)).append(" ").append(hex_double(model.weights[i])).append("\n");
    }
  }
  out.append("bias ").append(hex_double(model.bias)).append("\n");
  return out;
}

bool is_hex_digest(std::string_view s) {
  return s.size() == 16 && s.find_first_not_of("0123456789abcdef") == std::string_view::npos;
}

}  // namespace

void write_model(std::ostream& out, const TrainedScorer& model) {
  const std::string body = serialize_body(model);
  out << body << "checksum " << hex64(fnv1a(body)) << "\n";
  if (!out) {
    throw Error(ErrorCode::kIo, "failed to write model");
  }
}

std::string model_version(const TrainedScorer& model) { return hex64(fnv1a(serialize_body(model))); }

TrainedScorer read_model(std::istream& in) {
  std::ostringstream buffer;
  buffer << in.rdbuf();
  const std::string data = buffer.str();

  const std::string_view all(data);
  std::size_t pos = 0;
  auto next_line = [&]() -> std::string_view {
    const std::size_t eol = all.find('\n', pos);
    if (eol == std::string_view::npos) {
      corrupt("unexpected end of file");
    }
    const std::string_view line = all.substr(pos, eol - pos);
    pos = eol + 1;
    return line;
  };

  const std::string_view magic = next_line();
  if (magic.substr(0, kMagic.size()) != kMagic || magic.size() <= kMagic.size() + 1 ||
      magic[kMagic.size()] != ' ') {
    corrupt("missing header");
  }
  const std::string_view version = magic.substr(kMagic.size() + 1);
  if (version != std::to_string(kModelFormatVersion)) {
    throw Error(ErrorCode::kVersionMismatch, "model format version " + std::string(version) +
                                                 " is not supported (expected " +
                                                 std::to_string(kModelFormatVersion) + ")");
  }

  TrainedScorer model;
  try {
    const json header = json::parse(next_line());
    model.featurizer = featurizer_config_from_json(header.at("featurizer"));
    model.meta = meta_from_json(header.at("meta"));
  } catch (const json::exception& e) {
    corrupt(std::string("bad header: ") + e.what());
  } catch (const Error& e) {
    corrupt(std::string("bad header: ") + e.what());
  }
  if (!is_hex_digest(model.meta.data_fingerprint)) {
    corrupt("bad data fingerprint");
  }

  const std::string_view count_line = next_line();
  if (count_line.substr(0, 8) != "weights ") {
    corrupt("missing weights section");
  }
  const double count = parse_double(count_line.substr(8));
  model.weights.assign(model.featurizer.hash_dimension, 0.0);
  for (std::size_t k = 0; k < static_cast<std::size_t>(count); ++k) {
    const std::string_view line = next_line();
    const std::size_t space = line.find(' ');
    if (space == std::string_view::npos) {
      corrupt("bad weight line");
    }
    const double idx = parse_double(line.substr(0, space));
    if (idx < 0 || idx >= model.weights.size() || idx != static_cast<double>(static_cast<std::size_t>(idx))) {
      corrupt("weight index out of range");
    }
    model.weights[static_cast<std::size_t>(idx)] = parse_double(line.substr(space + 1));
  }
  const std::string_view bias_line = next_line();
  if (bias_line.substr(0, 5) != "bias ") {
    corrupt("missing bias");
  }
  model.bias = parse_double(bias_line.substr(5));
  const std::size_t body_end = pos;
  const std::string_view checksum_line = next_line();
  if (checksum_line.substr(0, 9) != "checksum " || pos != all.size()) {
    corrupt("missing checksum");
  }
  if (checksum_line.substr(9) != hex64(fnv1a(all.substr(0, body_end)))) {
    corrupt("checksum mismatch");
  }
  for (double w : model.weights) {
    if (!std::isfinite(w)) {
      corrupt("non-finite weight");
    }
  }
  if (!std::isfinite(model.bias)) {
    corrupt("non-finite bias");
  }
  return model;
}

void save_model(const TrainedScorer& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw Error(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  }
  write_model(out, model);
}

TrainedScorer load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error(ErrorCode::kIo, "cannot open " + path.string());
  }
  return read_model(in);
}

}  // namespace engage::reward
