#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "engage/cli.hpp"
#include "engage/convlog.hpp"
#include "engage/labeler.hpp"
#include "httplib.h"
#include "json.hpp"
#include "oracles.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = 0;
  std::string out;
  std::string err;
};

Result cli(std::vector<std::string> args, const std::string& input = "") {
  args.insert(args.begin(), "engage");
  std::vector<const char*> argv;
  for (const auto& a : args) {
    argv.push_back(a.c_str());
  }
  std::istringstream in(input);
  std::ostringstream out;
  std::ostringstream err;
  Result r;
  r.code = engage::cli::run(static_cast<int>(argv.size()), argv.data(), in, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::vector<json> json_lines(const std::string& text) {
  std::vector<json> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) {
      out.push_back(json::parse(line));
    }
  }
  return out;
}

class TempDir {
 public:
  TempDir() : path_(fs::temp_directory_path() / ("engage_cli_" + std::to_string(::getpid()) + "_" +
                                                 std::to_string(counter_++))) {
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string file(const std::string& name, const std::string& content = {}) const {
    const auto p = path_ / name;
    if (!content.empty()) {
      std::ofstream(p, std::ios::binary) << content;
    }
    return p.string();
  }

 private:
  static inline int counter_ = 0;
  fs::path path_;
};

std::string conversations_jsonl(int count, int turns) {
  std::ostringstream out;
  for (int i = 0; i < count; ++i) {
    engage::convlog::write_conversation(out, oracle::random_conversation(turns, static_cast<std::uint64_t>(i)));
  }
  return out.str();
}

std::string labeled_jsonl(std::size_t rows, std::uint64_t seed) {
  std::ostringstream out;
  for (const auto& r : oracle::separable_dataset(rows, seed)) {
    engage::labeler::write_labeled_row(out, r);
  }
  return out.str();
}

std::string error_code(const std::string& err) {
  const auto lines = json_lines(err);
  REQUIRE_FALSE(lines.empty());
  return lines.back()["error"]["code"];
}

}  // namespace

TEST_CASE("usage errors exit 2") {
  CHECK(cli({}).code == 2);
  CHECK(cli({"bogus"}).code == 2);
  CHECK(cli({"metrics", "--no-such-flag"}).code == 2);
  CHECK(cli({"metrics", "--format", "xml"}).code == 2);
  CHECK(cli({"label", "--strategy", "star"}).code == 2);
  CHECK(cli({"label", "--strategy", "retry", "--k", "2"}).code == 2);
  CHECK(cli({"label", "--strategy", "continuation", "--k", "0"}).code == 2);
  CHECK(cli({"fit", "cubic"}).code == 2);
  CHECK(cli({"eval"}).code == 2);
  CHECK(cli({"chat", "--model", "m"}).code == 2);
  CHECK(cli({"simulate"}).code == 2);
  CHECK(cli({"train", "--hash-bits", "40", "-o", "x"}).code == 2);
  CHECK(cli({"metrics", "--star-s", "9"}, "").code == 2);
  CHECK(cli({"metrics", "--cap", "5", "--uncapped"}).code == 2);
}

TEST_CASE("help exits 0 and every subcommand takes the shared flags") {
  CHECK(cli({"--help"}).code == 0);
  for (const char* sub : {"ingest", "label", "train", "eval", "metrics", "fit", "simulate", "serve", "chat"}) {
    const auto r = cli({sub, "--help"});
    CHECK(r.code == 0);
    CHECK(r.out.find("--seed") != std::string::npos);
    CHECK(r.out.find("--format") != std::string::npos);
  }
  CHECK(cli({"--help"}).out.find("--config") != std::string::npos);
}

TEST_CASE("operational failures exit 1 with a structured error") {
  const auto r = cli({"ingest", "-i", "/nonexistent/file.jsonl"});
  CHECK(r.code == 1);
  CHECK(error_code(r.err) == "io_error");
  const auto bad = cli({"label", "--strategy", "retry"}, "{not json}\n");
  CHECK(bad.code == 1);
  CHECK(error_code(bad.err) == "validation_error");
  const auto fit = cli({"fit", "log-linear"}, "1 2\n");
  CHECK(fit.code == 1);
  CHECK(json_lines(fit.err).back()["error"]["message"].is_string());
}

TEST_CASE("ingest validates and extracts rows") {
  std::string input = conversations_jsonl(5, 3);
  input += "{\"id\": 1}\n";
  const auto r = cli({"ingest", "--rows", "-"}, input);
  CHECK(r.code == 0);
  CHECK(json_lines(r.out).size() == 15);
  const auto summary = json_lines(r.err).back();
  CHECK(summary["conversations"] == 5);
  CHECK(summary["rows"] == 15);
  CHECK(summary["errors"] == 1);
  CHECK(summary["issues"][0]["line"] == 6);

  const auto strict = cli({"ingest", "--strict"}, input);
  CHECK(strict.code == 1);
  CHECK(error_code(strict.err) == "validation_error");

  const auto text = cli({"ingest", "--format", "text"}, conversations_jsonl(2, 2));
  CHECK(text.out.find("conversations: 2") != std::string::npos);
}

TEST_CASE("continuation labels with k = 1 on a three-turn conversation") {
  const auto rows = cli({"ingest", "--rows", "-"}, conversations_jsonl(1, 3));
  const auto r = cli({"label", "--strategy", "continuation", "--k", "1"}, rows.out);
  REQUIRE(r.code == 0);
  const auto lines = json_lines(r.out);
  REQUIRE(lines.size() == 3);
  std::istringstream in(r.out);
  const auto parsed = engage::labeler::parse_labeled_rows(in);
  REQUIRE(parsed.rows.size() == 3);
  CHECK(parsed.rows[0].label == 1);
  CHECK(parsed.rows[1].label == 1);
  CHECK(parsed.rows[2].label == 0);
}

TEST_CASE("train, eval and the TOML config") {
  TempDir dir;
  const auto data = dir.file("train.jsonl", labeled_jsonl(2000, 1));
  const auto model = dir.file("rm.model");
  const auto t = cli({"train", "-i", data, "-o", model, "--hash-bits", "16", "--seed", "3"});
  REQUIRE(t.code == 0);
  const auto summary = json_lines(t.out).at(0);
  CHECK(summary["epochs_run"].get<int>() >= 1);
  CHECK(fs::exists(model));

  const auto again = cli({"train", "-i", data, "-o", dir.file("rm2.model"), "--hash-bits", "16", "--seed", "3"});
  CHECK(json_lines(again.out).at(0)["model_version"] == summary["model_version"]);

  const auto heldout = dir.file("heldout.jsonl", labeled_jsonl(500, 2));
  const auto e = cli({"eval", "-i", heldout, "-m", model});
  REQUIRE(e.code == 0);
  const auto ev = json_lines(e.out).at(0);
  CHECK(ev["auc"].get<double>() > 0.95);
  CHECK(ev["context_budget"] == 256);

  const auto mismatch = cli({"eval", "-i", heldout, "-m", model, "--context-budget", "128"});
  CHECK(mismatch.code == 1);
  CHECK(error_code(mismatch.err) == "budget_mismatch");
  CHECK(cli({"eval", "-i", heldout, "-m", model, "--context-budget", "128", "--force"}).code == 0);

  const auto config = dir.file("engage.toml", "[train]\nepochs = 1\nhash-bits = 12\n");
  const auto c = cli({"--config", config, "train", "-i", data, "-o", dir.file("rm3.model")});
  REQUIRE(c.code == 0);
  CHECK(json_lines(c.out).at(0)["epochs_run"] == 1);
  const auto flag_wins =
      cli({"--config", config, "train", "-i", data, "-o", dir.file("rm4.model"), "--epochs", "2"});
  CHECK(json_lines(flag_wins.out).at(0)["epochs_run"].get<int>() >= 1);

  const auto odd = cli({"train", "-i", data, "-o", dir.file("rm5.model"), "--hash-bits", "12", "--epochs", "1",
                        "--context-budget", "100"});
  CHECK(odd.code == 0);
  CHECK(json_lines(odd.err).at(0)["warning"]["code"] == "nonstandard_budget");

  std::ofstream(model, std::ios::binary | std::ios::trunc) << "garbage";
  const auto corrupt = cli({"eval", "-i", heldout, "-m", model});
  CHECK(corrupt.code == 1);
  CHECK(error_code(corrupt.err) == "corrupt_file");
}

TEST_CASE("metrics records, including a no-samples error") {
  const auto empty = cli({"metrics"}, "");
  CHECK(empty.code == 0);
  const auto records = json_lines(empty.out);
  REQUIRE_FALSE(records.empty());
  CHECK(records[0]["name"] == "mcl");
  CHECK(records[0]["error"]["code"] == "no_samples");

  const auto r = cli({"metrics", "--bootstrap", "50", "--days", "1,7", "--star-s", "3,4"}, conversations_jsonl(40, 4));
  REQUIRE(r.code == 0);
  const auto lines = json_lines(r.out);
  REQUIRE(lines.size() == 6);
  CHECK(lines[0]["value"] == 4.0);
  CHECK(lines[0]["cap"] == 100);
  CHECK(lines[0]["n"] == 40);
  CHECK(lines[0]["stderr"].is_number());
  CHECK(lines[1]["name"] == "retry_rate");
  CHECK(lines[2]["s"] == 3);
  CHECK(lines[4]["day"] == 1);

  const auto text = cli({"metrics", "--format", "text", "--uncapped", "--bootstrap", "0"}, conversations_jsonl(3, 2));
  CHECK(text.out.find("mcl (uncapped): 2 (n=3)") != std::string::npos);
}

TEST_CASE("fit subcommands") {
  const std::string additive =
      "0 0 0 1\n"
      "1 0 10 1\n"
      "0 1 20 1\n"
      "1 1 30 1\n";
  const auto text = cli({"fit", "additive", "--format", "text"}, additive);
  REQUIRE(text.code == 0);
  CHECK(text.out.rfind("b=10 ± ", 0) == 0);
  CHECK(text.out.find("\nc=20 ± ") != std::string::npos);

  const auto loglin = cli({"fit", "log-linear"}, "# x y\n1 0\n10 5\n100 10\n");
  REQUIRE(loglin.code == 0);
  const auto j = json_lines(loglin.out).at(0);
  CHECK(j["fit"] == "log-linear");
  CHECK(j["n"] == 3);
  CHECK(j["parameters"]["m"]["value"].get<double>() == doctest::Approx(5.0));

  std::string lengths;
  for (int x : oracle::sample_zeta(2.5, 10, 3000, 1)) {
    lengths += std::to_string(x) + "\n";
  }
  const auto pl = cli({"fit", "powerlaw", "--x-min", "10"}, lengths);
  REQUIRE(pl.code == 0);
  CHECK(std::abs(json_lines(pl.out).at(0)["parameters"]["slope"]["value"].get<double>() + 2.5) < 0.15);

  CHECK(cli({"fit", "powerlaw"}, "1 2 3\n").code == 1);
  CHECK(cli({"fit", "additive"}, "0 0 1\n").code == 1);
  CHECK(cli({"fit", "log-linear"}, "1 2 3\n4 5\n").code == 1);
}

TEST_CASE("an A/A simulation shows no difference and repeats exactly") {
  const std::string scenario = std::string(ENGAGE_SOURCE_DIR) + "/scenarios/aa.json";
  const auto a = cli({"simulate", "-s", scenario, "--users", "300", "--seed", "4"});
  REQUIRE(a.code == 0);
  const auto b = cli({"simulate", "-s", scenario, "--users", "300", "--seed", "4"});
  CHECK(a.out == b.out);
  const auto report = json::parse(a.out);
  for (const auto& imp : report["improvements"]) {
    const double v = imp["value"].get<double>();
    const double se = imp["stderr"].is_number() ? imp["stderr"].get<double>() : 0.0;
    CHECK(std::abs(v) <= 4.0 * se + 1e-9);
  }
  const auto text = cli({"simulate", "-s", scenario, "--users", "200", "--format", "text"});
  CHECK(text.out.find("control (baseline): mcl") != std::string::npos);

  TempDir dir;
  const auto bad = dir.file("bad.json", R"({"arms": [{"name": "a"}], "population": {"n_users": 100}})");
  const auto r = cli({"simulate", "-s", bad});
  CHECK(r.code == 1);
  CHECK(error_code(r.err) == "config_error");
}

TEST_CASE("chat replays a transcript deterministically") {
  TempDir dir;
  const auto stub = dir.file("stub.txt", "w1 w2\nw3 zzsentinel\nw4\n");
  const auto model = dir.file("rm.model");
  REQUIRE(cli({"train", "-i", dir.file("d.jsonl", labeled_jsonl(1000, 4)), "-o", model, "--hash-bits", "14"}).code ==
          0);
  const std::string transcript = "hello\n\nhow are you\n/quit\nignored\n";
  const auto a = cli({"chat", "-m", model, "--stub", stub, "--n", "3", "--seed", "1"}, transcript);
  REQUIRE(a.code == 0);
  const auto lines = json_lines(a.out);
  REQUIRE(lines.size() == 2);
  CHECK(lines[0]["turn"] == 1);
  CHECK(lines[0]["response"] == "w3 zzsentinel");
  CHECK(lines[1]["turn"] == 2);
  CHECK(cli({"chat", "-m", model, "--stub", stub, "--n", "3", "--seed", "1"}, transcript).out == a.out);

  const auto text = cli({"chat", "-m", model, "--stub", stub, "--n", "3", "--format", "text", "-v",
                         "--greeting", "Hi!"},
                        "hello\n");
  CHECK(text.out.rfind("BOT: Hi!\nBOT: w3 zzsentinel\n", 0) == 0);
  CHECK(text.out.find("  * [") != std::string::npos);

  const auto down = cli({"chat", "-m", model, "--generator", "http://127.0.0.1:1", "--timeout-ms", "200"}, "hi\n");
  CHECK(down.code == 1);
  CHECK(error_code(down.err) == "generator_failed");
  CHECK(down.err.find("turn 1") != std::string::npos);
}

TEST_CASE("serve runs as a process and shuts down on SIGTERM") {
  TempDir dir;
  const auto model = dir.file("rm.model");
  REQUIRE(cli({"train", "-i", dir.file("d.jsonl", labeled_jsonl(1000, 5)), "-o", model, "--hash-bits", "14"}).code ==
          0);
  int out_pipe[2];
  REQUIRE(::pipe(out_pipe) == 0);
  const pid_t pid = ::fork();
  REQUIRE(pid >= 0);
  if (pid == 0) {
    ::dup2(out_pipe[1], STDOUT_FILENO);
    ::close(out_pipe[0]);
    ::close(out_pipe[1]);
    ::execl(ENGAGE_BINARY, ENGAGE_BINARY, "serve", "--listen", "127.0.0.1:0", "-m", model.c_str(), "--hot-reload",
            static_cast<char*>(nullptr));
    ::_exit(127);
  }
  ::close(out_pipe[1]);
  FILE* out = ::fdopen(out_pipe[0], "r");
  auto next_event = [&] {
    char buf[4096];
    REQUIRE(std::fgets(buf, sizeof buf, out) != nullptr);
    return json::parse(buf);
  };
  const auto ready = next_event();
  REQUIRE(ready["event"] == "ready");
  const std::string address = ready["listen_address"];
  httplib::Client client("http://" + address);
  const auto health = client.Get("/healthz");
  REQUIRE(health);
  CHECK(health->status == 200);
  const auto before = json::parse(health->body)["model_version"];
  CHECK(before == ready["model_version"]);

  REQUIRE(cli({"train", "-i", dir.file("d2.jsonl", labeled_jsonl(1000, 6)), "-o", model, "--hash-bits", "14"}).code ==
          0);
  ::kill(pid, SIGHUP);
  const auto reloaded = next_event();
  CHECK(reloaded["event"] == "reloaded");
  CHECK(reloaded["model_version"] != before);
  CHECK(json::parse(client.Get("/healthz")->body)["model_version"] == reloaded["model_version"]);

  ::kill(pid, SIGTERM);
  int status = 0;
  ::waitpid(pid, &status, 0);
  CHECK(WIFEXITED(status));
  CHECK(WEXITSTATUS(status) == 0);
  CHECK(next_event()["event"] == "stopped");
  std::fclose(out);
}
