#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "seqtrace/synthdata.hpp"

// Spawns the real binary (path from SEQTRACE_CLI, set by ctest) and checks
// the workflow plus the exit-code contract from the outside.

using namespace seqtrace;
namespace fs = std::filesystem;

namespace {

std::string cli() {
  const char* p = std::getenv("SEQTRACE_CLI");
  REQUIRE(p != nullptr);
  return p;
}

struct RunResult {
  int rc = -1;
  std::string out;
};

RunResult run(const std::string& args) {
  std::string cmd = cli() + " " + args + " 2>/dev/null";
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  RunResult r;
  char buf[4096];
  size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  int status = pclose(p);
  r.rc = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in),
                     std::istreambuf_iterator<char>());
}

fs::path work_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("seqtrace_cli_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

}  // namespace

TEST_CASE("generate: reruns are byte-identical and the manifest loads") {
  fs::path dir = work_dir("gen");
  RunResult a = run("generate --out " + q(dir / "d1") + " --n 24 --seed 11");
  REQUIRE(a.rc == 0);
  RunResult b = run("generate --out " + q(dir / "d2") + " --n 24 --seed 11");
  REQUIRE(b.rc == 0);

  REQUIRE(read_file(dir / "d1/manifest.jsonl") ==
          read_file(dir / "d2/manifest.jsonl"));
  Manifest m = load_manifest((dir / "d1/manifest.jsonl").string());
  REQUIRE(m.records.size() == 24);
  for (long long id : {0LL, 7LL, 23LL})
    REQUIRE(read_file(dir / "d1" / (std::to_string(id) + ".png")) ==
            read_file(dir / "d2" / (std::to_string(id) + ".png")));

  // a different seed actually changes content
  RunResult c = run("generate --out " + q(dir / "d3") + " --n 24 --seed 12");
  REQUIRE(c.rc == 0);
  REQUIRE(read_file(dir / "d1/0.png") != read_file(dir / "d3/0.png"));

  // weights that do not sum to one are a config error
  RunResult bad = run("generate --out " + q(dir / "d4") +
                      " --n 4 --seed 1 --length-dist 1,1,1,1,1,1");
  REQUIRE(bad.rc == 2);
  fs::remove_all(dir);
}

TEST_CASE("train, eval, infer, recover round trip") {
  fs::path dir = work_dir("roundtrip");
  REQUIRE(run("generate --out " + q(dir / "data") + " --n 40 --seed 3").rc == 0);

  std::string train_args =
      "train --data " + q(dir / "data") + " --model seqfakeformer --out " +
      q(dir / "sf.ckpt") +
      " --arch narrow --epochs 2 --warmup 1 --decay 2 --batch 16 --seed 7";
  RunResult tr = run(train_args);
  REQUIRE(tr.rc == 0);
  REQUIRE(tr.out.find("epoch 0 ") != std::string::npos);
  REQUIRE(tr.out.find("epoch 1 ") != std::string::npos);

  // same flags, same bytes
  std::string again = train_args;
  again.replace(again.find("sf.ckpt"), 7, "sf2.ckpt");
  REQUIRE(run(again).rc == 0);
  REQUIRE(read_file(dir / "sf.ckpt") == read_file(dir / "sf2.ckpt"));

  RunResult ev = run("eval --data " + q(dir / "data") + " --ckpt " +
                     q(dir / "sf.ckpt") + " --split test --report " +
                     q(dir / "rep.jsonl"));
  REQUIRE(ev.rc == 0);
  REQUIRE(ev.out.find("fixed_acc ") != std::string::npos);
  REQUIRE(ev.out.find("adaptive_acc ") != std::string::npos);
  REQUIRE(ev.out.find("length") != std::string::npos);  // per-length table

  std::ifstream rep(dir / "rep.jsonl");
  std::string header_line;
  REQUIRE(std::getline(rep, header_line));
  nlohmann::json head = nlohmann::json::parse(header_line);
  REQUIRE(head.at("kind") == "seqfakeformer");
  REQUIRE(head.contains("fixed_acc"));
  REQUIRE(head.contains("adaptive_acc"));
  REQUIRE(head.contains("per_length"));
  REQUIRE(head.at("ckpt_hash").get<std::string>().size() == 16);
  size_t samples = 0;
  for (std::string line; std::getline(rep, line);)
    if (!line.empty()) ++samples;
  REQUIRE(samples == head.at("pair_count").get<size_t>());

  // one line of labels, nothing else
  RunResult inf = run("infer --image " + q(dir / "data/0.png") + " --ckpt " +
                      q(dir / "sf.ckpt"));
  REQUIRE(inf.rc == 0);
  REQUIRE(std::count(inf.out.begin(), inf.out.end(), '\n') == 1);

  // truth-mode recovery restores every original exactly
  RunResult rec = run("recover --data " + q(dir / "data") + " --report " +
                      q(dir / "rep.jsonl") + " --out " + q(dir / "rec") +
                      " --mode truth --split test");
  REQUIRE(rec.rc == 0);
  std::ifstream rj(dir / "rec/recovery.jsonl");
  REQUIRE(std::getline(rj, header_line));
  nlohmann::json rhead = nlohmann::json::parse(header_line);
  REQUIRE(rhead.at("mean_distance").get<double>() == 0.0);
  REQUIRE(rhead.at("exact").get<size_t>() == rhead.at("samples").get<size_t>());
  REQUIRE(rhead.at("samples").get<size_t>() >= 1);

  // predicted mode consumes the eval report
  RunResult rp = run("recover --data " + q(dir / "data") + " --report " +
                     q(dir / "rep.jsonl") + " --out " + q(dir / "recp") +
                     " --mode predicted --split test");
  REQUIRE(rp.rc == 0);
  REQUIRE(fs::exists(dir / "recp/recovery.jsonl"));
  fs::remove_all(dir);
}

TEST_CASE("config files mirror flags, explicit flags win, unknown keys fail") {
  fs::path dir = work_dir("config");
  REQUIRE(run("generate --out " + q(dir / "data") + " --n 16 --seed 2").rc == 0);

  {
    std::ofstream cfg(dir / "run.cfg");
    cfg << "# comment\n"
        << "epochs=1\n"
        << "warmup=0\n"
        << "batch=8\n"
        << "arch=narrow\n"
        << "model=multi_cls\n";
  }
  std::string base = "train --data " + q(dir / "data") + " --out " +
                     q(dir / "m.ckpt") + " --config " + q(dir / "run.cfg");
  RunResult one = run(base);
  REQUIRE(one.rc == 0);
  REQUIRE(one.out.find("epoch 0 ") != std::string::npos);
  REQUIRE(one.out.find("epoch 1 ") == std::string::npos);

  RunResult two = run(base + " --epochs 2");  // flag beats file
  REQUIRE(two.rc == 0);
  REQUIRE(two.out.find("epoch 1 ") != std::string::npos);

  {
    std::ofstream cfg(dir / "bad.cfg");
    cfg << "epochs=1\nwarmup=0\nnot_a_flag=5\n";
  }
  REQUIRE(run("train --data " + q(dir / "data") + " --out " + q(dir / "x.ckpt") +
              " --config " + q(dir / "bad.cfg"))
              .rc == 2);
  fs::remove_all(dir);
}

TEST_CASE("exit codes separate i/o, compat, and parse failures") {
  fs::path dir = work_dir("codes");
  REQUIRE(run("generate --out " + q(dir / "data") + " --n 12 --seed 4").rc == 0);
  REQUIRE(run("train --data " + q(dir / "data") + " --model multi_cls --out " +
              q(dir / "m.ckpt") + " --arch narrow --epochs 1 --warmup 0 --batch 8")
              .rc == 0);

  REQUIRE(run("--help").rc == 0);
  REQUIRE(run("eval --data " + q(dir / "nope") + " --ckpt " + q(dir / "m.ckpt") +
              " --split test --report " + q(dir / "r.jsonl"))
              .rc == 2);
  REQUIRE(run("train --data " + q(dir / "data") + " --out x.ckpt --model bogus")
              .rc == 2);
  REQUIRE(run("infer --image " + q(dir / "data/0.png") + " --ckpt " +
              q(dir / "data/manifest.jsonl"))
              .rc == 2);  // not a checkpoint file
  REQUIRE(run("recover --data " + q(dir / "data") + " --out " + q(dir / "rr") +
              " --mode predicted")
              .rc == 2);  // predicted mode without a report

  // flip one byte of the stored hash: loads fine, fails the compat check
  std::string bytes = read_file(dir / "m.ckpt");
  bytes[12] = static_cast<char>(bytes[12] ^ 1);
  {
    std::ofstream out(dir / "tampered.ckpt", std::ios::binary);
    out << bytes;
  }
  REQUIRE(run("infer --image " + q(dir / "data/0.png") + " --ckpt " +
              q(dir / "tampered.ckpt"))
              .rc == 3);
  fs::remove_all(dir);
}
