// seqtrace: one binary for the whole workflow — generate a synthetic
// dataset, train either model, evaluate, run single-image inference, sweep
// the ablation grid, and invert manipulations back toward the original
// face.
//
// Exit codes: 0 success, 1 internal error, 2 I/O or configuration error,
// 3 artifact compatibility error (checkpoint vs. dataset vs. report).
//
// Every artifact written here embeds the hash of the resolved run
// configuration. Given identical flags and seed, reruns are byte-identical;
// the only timestamp is the single start line on stderr.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include <seqtrace/checkpoint.hpp>
#include <seqtrace/inference.hpp>
#include <seqtrace/metrics.hpp>
#include <seqtrace/model.hpp>
#include <seqtrace/synthdata.hpp>
#include <seqtrace/training.hpp>

namespace {

using namespace seqtrace;
namespace fs = std::filesystem;

// Thrown for cross-artifact mismatches (exit 3); everything rethrown as
// IoError maps to exit 2.
struct CompatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename F>
auto io_step(F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const CompatError&) {
    throw;
  } catch (const std::exception& e) {
    throw IoError(e.what());
  }
}

void apply_thread_cap() {
  int n = 1;  // deterministic by default; SEQTRACE_THREADS raises the cap
  if (const char* env = std::getenv("SEQTRACE_THREADS"))
    if (*env) n = std::max(1, std::atoi(env));
#ifdef SEQTRACE_WITH_CBLAS
  openblas_set_num_threads(n);
#else
  (void)n;
#endif
}

// The one permitted timestamp, confined to a single stderr line.
void log_start(const char* cmd) {
  std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  std::fprintf(stderr, "[seqtrace] %s started %s\n", cmd, buf);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return std::string(std::istreambuf_iterator<char>(in),
                     std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << content;
  if (!out) throw std::runtime_error("failed while writing " + path);
}

Manifest open_dataset(const std::string& dir) {
  return io_step([&] { return load_manifest(dir + "/manifest.jsonl"); });
}

// ---- checkpoint loading ---------------------------------------------------

struct LoadedModel {
  CheckpointData ckpt;
  Vocabulary vocab;
  std::unique_ptr<SeqFakeFormer> sf;
  std::unique_ptr<MultiCls> mc;

  const std::string& kind() const { return ckpt.kind; }
  const std::string& hash() const { return ckpt.config_hash; }

  DecodeResult predict(const Tensor& image) const {
    return sf ? greedy_decode(*sf, image) : predict_multi_cls(*mc, image);
  }
};

LoadedModel load_model(const std::string& path) {
  LoadedModel lm;
  lm.ckpt = io_step([&] { return load_checkpoint(path); });
  ParsedModel parsed;
  try {
    parsed = parse_model_kv(lm.ckpt.model_kv);
  } catch (const std::exception& e) {
    throw CompatError(path + ": unreadable model config: " + e.what());
  }
  if (parsed.kind != lm.ckpt.kind)
    throw CompatError(path + ": header kind " + lm.ckpt.kind +
                      " disagrees with stored config " + parsed.kind);
  if (parsed.vocab_labels != lm.ckpt.vocab_labels)
    throw CompatError(path + ": header vocabulary disagrees with stored config");
  lm.vocab = Vocabulary{lm.ckpt.vocab_labels};
  try {
    std::string rehash;
    if (parsed.kind == "seqfakeformer") {
      lm.sf = std::make_unique<SeqFakeFormer>(parsed.config, lm.vocab, 0);
      restore(lm.ckpt, lm.sf->params);
      rehash = lm.sf->config_hash();
    } else if (parsed.kind == "multi_cls") {
      lm.mc = std::make_unique<MultiCls>(parsed.config, lm.vocab, 0);
      restore(lm.ckpt, lm.mc->params);
      rehash = lm.mc->config_hash();
    } else {
      throw std::runtime_error("unknown model kind " + parsed.kind);
    }
    if (rehash != lm.ckpt.config_hash)
      throw std::runtime_error("stored config hash " + lm.ckpt.config_hash +
                               " does not match rebuilt model " + rehash);
  } catch (const std::exception& e) {
    throw CompatError(path + ": " + e.what());
  }
  return lm;
}

void check_vocab(const LoadedModel& lm, const Manifest& m) {
  if (lm.vocab.labels != m.vocab.labels)
    throw CompatError("checkpoint vocabulary does not match the dataset");
}

// ---- generate -------------------------------------------------------------

struct GenerateOpts {
  std::string out;
  long long n = 100;
  unsigned long long seed = 0;
  std::vector<double> length_dist;
};

int cmd_generate(const GenerateOpts& o) {
  log_start("generate");
  GenConfig cfg;
  cfg.n = o.n;
  cfg.seed = o.seed;
  if (!o.length_dist.empty()) {
    if (o.length_dist.size() != 6)
      throw IoError("--length-dist wants six weights (lengths 0..5), got " +
                    std::to_string(o.length_dist.size()));
    for (int i = 0; i < 6; ++i) cfg.length_dist[static_cast<size_t>(i)] = o.length_dist[static_cast<size_t>(i)];
  }
  io_step([&] { validate_length_dist(cfg.length_dist); });
  Manifest m = io_step([&] { return generate(cfg, o.out); });
  size_t per_split[3] = {0, 0, 0};
  for (const SampleRecord& r : m.records) per_split[static_cast<size_t>(r.split)]++;
  std::printf("wrote %zu samples to %s (train %zu, val %zu, test %zu)\n",
              m.records.size(), o.out.c_str(), per_split[0], per_split[1],
              per_split[2]);
  std::printf("config_hash %s\n", m.config_hash.c_str());
  return 0;
}

// ---- train ----------------------------------------------------------------

struct TrainOpts {
  std::string data;
  std::string model = "seqfakeformer";
  std::string out;
  std::string arch = "desk";
  std::string seca = "multi";
  bool no_autoregressive = false;
  std::string log_csv;
  TrainConfig tc;
};

ModelConfig arch_config(const std::string& arch) {
  return arch == "narrow" ? ModelConfig::narrow() : ModelConfig::desk();
}

std::string train_run_kv(const TrainOpts& o) {
  KvBuilder kv;
  kv.add("cmd", std::string("train"))
      .add("model", o.model)
      .add("arch", o.arch)
      .add("seca", o.seca)
      .add("autoregressive", !o.no_autoregressive);
  return kv.s + o.tc.canonical();
}

int cmd_train(const TrainOpts& o) {
  log_start("train");
  Manifest m = open_dataset(o.data);
  io_step([&] { o.tc.validate(); });
  ModelConfig cfg = arch_config(o.arch);
  cfg.decoder.seca = io_step([&] { return seca_mode_from(o.seca); });
  cfg.decoder.autoregressive = !o.no_autoregressive;

  TrainResult r;
  if (o.model == "seqfakeformer") {
    SeqFakeFormer model(cfg, m.vocab, o.tc.seed);
    r = train_seqfakeformer(model, m, o.data, o.tc, o.out);
  } else {
    MultiCls model(cfg, m.vocab, o.tc.seed);
    r = train_multi_cls(model, m, o.data, o.tc, o.out);
  }

  for (const EpochLog& e : r.log)
    std::printf("epoch %d loss %.6g val_fixed %.6g val_adaptive %.6g\n",
                e.epoch, e.train_loss, e.val_fixed, e.val_adaptive);
  std::printf("best_epoch %d best_val_adaptive %.6g\n", r.best_epoch,
              r.best_val_adaptive);
  std::printf("model_hash %s run_hash %s\n", r.config_hash.c_str(),
              hex64(fnv1a64(train_run_kv(o))).c_str());
  if (!o.log_csv.empty()) {
    std::string csv = "# run_hash=" + hex64(fnv1a64(train_run_kv(o))) + "\n" +
                      format_csv(r.log);
    io_step([&] { write_file(o.log_csv, csv); });
  }
  return 0;
}

// ---- eval -----------------------------------------------------------------

struct EvalOpts {
  std::string data;
  std::string ckpt;
  std::string split = "test";
  std::string report;
};

nlohmann::json row_json(const MetricRow& r) {
  nlohmann::json j;
  j["pairs"] = r.pairs;
  j["fixed_acc"] = r.fixed_acc;
  j["adaptive_acc"] = r.adaptive_acc;
  j["gap"] = r.gap;
  j["adaptive_matches"] = r.adaptive_matches;
  j["adaptive_total"] = r.adaptive_total;
  return j;
}

int cmd_eval(const EvalOpts& o) {
  log_start("eval");
  LoadedModel lm = load_model(o.ckpt);
  Manifest m = open_dataset(o.data);
  check_vocab(lm, m);
  int split = o.split == "all" ? -1 : split_from_name(o.split);

  InferResult ir = batch_infer(
      m, o.data, split, [&](const Tensor& img) { return lm.predict(img); },
      lm.hash());
  EvalReport rep = breakdown(ir.pairs, m.vocab);

  KvBuilder kv;
  kv.add("cmd", std::string("eval"))
      .add("ckpt_hash", lm.hash())
      .add("data_hash", m.config_hash)
      .add("split", o.split);
  nlohmann::json head;
  head["version"] = 1;
  head["kind"] = lm.kind();
  head["split"] = o.split;
  head["ckpt_hash"] = lm.hash();
  head["data_hash"] = m.config_hash;
  head["run_hash"] = kv.hash();
  head["pair_count"] = rep.pair_count;
  head["errors"] = ir.errors;
  head["fixed_acc"] = rep.fixed_acc;
  head["adaptive_acc"] = rep.adaptive_acc;
  head["adaptive_acc_macro"] = rep.adaptive_acc_macro;
  for (const auto& [len, row] : rep.per_length)
    head["per_length"][std::to_string(len)] = row_json(row);
  for (const auto& [key, row] : rep.per_type) head["per_type"][key] = row_json(row);

  // report = metrics header, then the per-sample records from inference
  std::string body = ir.jsonl;
  size_t nl = body.find('\n');
  body = nl == std::string::npos ? std::string() : body.substr(nl + 1);
  io_step([&] { write_file(o.report, head.dump() + "\n" + body); });

  std::printf("pairs %zu errors %d\n", rep.pair_count, ir.errors);
  std::printf("fixed_acc %.6g\n", rep.fixed_acc);
  std::printf("adaptive_acc %.6g (macro %.6g)\n", rep.adaptive_acc,
              rep.adaptive_acc_macro);
  std::printf("%-8s %6s %10s %13s %9s\n", "length", "pairs", "fixed_acc",
              "adaptive_acc", "gap");
  for (const auto& [len, row] : rep.per_length)
    std::printf("%-8d %6zu %10.4f %13.4f %9.4f\n", len, row.pairs,
                row.fixed_acc, row.adaptive_acc, row.gap);
  return 0;
}

// ---- infer ----------------------------------------------------------------

struct InferOpts {
  std::string image;
  std::string ckpt;
};

int cmd_infer(const InferOpts& o) {
  log_start("infer");
  LoadedModel lm = load_model(o.ckpt);
  ImageU8 im = io_step([&] { return read_png(o.image); });
  DecodeResult r = lm.predict(image_to_tensor(im));
  std::string line;
  for (int lbl : r.labels) {
    if (!line.empty()) line += ' ';
    line += lm.vocab.token_name(lbl);
  }
  std::printf("%s\n", line.c_str());
  return 0;
}

// ---- ablate ---------------------------------------------------------------

struct AblateOpts {
  std::string data;
  std::string out;
  int seeds = 3;
  std::string arch = "desk";
  TrainConfig tc;
};

int cmd_ablate(const AblateOpts& o) {
  log_start("ablate");
  Manifest m = open_dataset(o.data);
  io_step([&] { o.tc.validate(); });
  if (o.seeds < 1) throw IoError("--seeds must be at least 1");
  std::vector<AblationRow> rows =
      ablate(m, o.data, arch_config(o.arch), o.tc, o.seeds);

  KvBuilder kv;
  kv.add("cmd", std::string("ablate"))
      .add("arch", o.arch)
      .add("seeds", o.seeds)
      .add("data_hash", m.config_hash);
  std::string csv = "# run_hash=" + KvBuilder{kv.s + o.tc.canonical()}.hash() +
                    "\n" + ablation_csv(rows);
  io_step([&] { write_file(o.out, csv); });
  std::fputs(csv.c_str(), stdout);
  return 0;
}

// ---- recover ----------------------------------------------------------------

struct RecoverOpts {
  std::string data;
  std::string report;
  std::string out;
  std::string mode = "predicted";
  std::string split = "test";
  unsigned long long seed = 0;
};

int cmd_recover(const RecoverOpts& o) {
  log_start("recover");
  Manifest m = open_dataset(o.data);
  int split = o.split == "all" ? -1 : split_from_name(o.split);

  std::map<long long, LabelSequence> predicted;
  if (o.mode != "truth") {
    if (o.report.empty())
      throw IoError("--report is required for --mode " + o.mode);
    std::string text = io_step([&] { return read_file(o.report); });
    std::vector<InferRecord> recs;
    try {
      recs = parse_infer_jsonl(text, m.vocab);
    } catch (const std::exception& e) {
      throw CompatError(o.report + ": " + e.what());
    }
    for (const InferRecord& r : recs) predicted[r.id] = r.predicted;
  }

  io_step([&] { fs::create_directories(o.out); });
  Rng base(o.seed);
  KvBuilder kv;
  kv.add("cmd", std::string("recover"))
      .add("mode", o.mode)
      .add("split", o.split)
      .add("seed", o.seed)
      .add("data_hash", m.config_hash);

  std::string lines;
  double dist_sum = 0.0;
  size_t n = 0, exact = 0, skipped = 0;
  for (const SampleRecord& rec : m.records) {
    if (split >= 0 && rec.split != split) continue;
    std::vector<OpInstance> ops;
    if (o.mode == "truth") {
      ops = rec.ops;
    } else {
      auto it = predicted.find(rec.id);
      if (it == predicted.end()) {  // sample missing from the report
        ++skipped;
        continue;
      }
      // control tokens an undertrained model may emit carry no inverse
      LabelSequence usable;
      for (int lbl : it->second)
        if (m.vocab.is_label(lbl)) usable.push_back(lbl);
      ops = resolve_ops(usable, rec);
    }
    ImageU8 final_image = io_step([&] { return read_png(o.data + "/" + rec.image); });
    ImageU8 orig = io_step([&] { return read_png(o.data + "/" + rec.orig_image); });
    Rng rng = base.stream("recover", static_cast<uint64_t>(rec.id));
    ImageU8 rec_img = recover(final_image, ops, o.mode == "shuffled", rng);
    double dist = identity_distance(rec_img, orig);
    io_step([&] {
      write_png(o.out + "/" + std::to_string(rec.id) + ".recovered.png", rec_img);
    });
    nlohmann::json j;
    j["id"] = rec.id;
    j["distance"] = dist;
    j["exact"] = rec_img.rgb == orig.rgb;
    lines += j.dump() + "\n";
    dist_sum += dist;
    ++n;
    if (rec_img.rgb == orig.rgb) ++exact;
  }

  nlohmann::json head;
  head["version"] = 1;
  head["mode"] = o.mode;
  head["split"] = o.split;
  head["run_hash"] = kv.hash();
  head["data_hash"] = m.config_hash;
  head["samples"] = n;
  head["skipped"] = skipped;
  head["exact"] = exact;
  head["mean_distance"] = n ? dist_sum / static_cast<double>(n) : 0.0;
  io_step([&] {
    write_file(o.out + "/recovery.jsonl", head.dump() + "\n" + lines);
  });
  std::printf("mode %s: mean_identity_distance %.8g over %zu samples (%zu exact, %zu skipped)\n",
              o.mode.c_str(), n ? dist_sum / static_cast<double>(n) : 0.0, n,
              exact, skipped);
  return 0;
}

// ---- flag wiring ------------------------------------------------------------

// Any subcommand takes `--config FILE`: flat `key=value` lines whose keys
// mirror the subcommand's long flags (`epochs=30`, `lr-backbone=1e-4`,
// `no-autoregressive=true`).  Lines expand to ordinary `--key=value`
// tokens, so unknown keys are rejected by the regular parser; flags given
// explicitly on the command line win over the file.
std::vector<std::string> expand_config(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  std::string file;
  for (size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw IoError("--config wants a file path");
      file = args[i + 1];
      args.erase(args.begin() + static_cast<long>(i),
                 args.begin() + static_cast<long>(i) + 2);
      break;
    }
    if (args[i].rfind("--config=", 0) == 0) {
      file = args[i].substr(9);
      args.erase(args.begin() + static_cast<long>(i));
      break;
    }
  }
  if (file.empty()) return args;

  std::ifstream in(file);
  if (!in) throw IoError("cannot open config file " + file);
  auto given = [&](const std::string& flag) {
    for (const std::string& a : args)
      if (a == flag || a.rfind(flag + "=", 0) == 0) return true;
    return false;
  };
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos || line[b] == '#') continue;
    size_t eq = line.find('=', b);
    if (eq == std::string::npos)
      throw IoError(file + ":" + std::to_string(lineno) +
                    ": expected key=value");
    size_t ke = line.find_last_not_of(" \t", eq - 1);
    std::string key = line.substr(b, ke - b + 1);
    size_t vb = line.find_first_not_of(" \t", eq + 1);
    size_t ve = line.find_last_not_of(" \t\r");
    std::string value = vb == std::string::npos || vb > ve
                            ? std::string()
                            : line.substr(vb, ve - vb + 1);
    if (key == "config")
      throw IoError(file + ": config files cannot nest");
    if (given("--" + key)) continue;
    args.push_back("--" + key + "=" + value);
  }
  return args;
}

void add_train_config_flags(CLI::App* c, TrainConfig& tc) {
  c->add_option("--epochs", tc.epochs, "training epochs");
  c->add_option("--warmup", tc.warmup_epochs, "linear warmup epochs");
  c->add_option("--decay", tc.decay_epochs, "epochs where the rate drops 10x")
      ->delimiter(',');
  c->add_option("--lr-transformer", tc.lr_transformer,
                "rate for encoder/decoder/head parameters");
  c->add_option("--lr-backbone", tc.lr_backbone, "rate for backbone parameters");
  c->add_option("--momentum", tc.momentum, "sgd momentum");
  c->add_option("--weight-decay", tc.weight_decay, "l2 coefficient");
  c->add_option("--clip-norm", tc.clip_norm,
                "global gradient-norm ceiling, 0 disables");
  c->add_option("--batch", tc.batch_size, "minibatch size");
  c->add_option("--seed", tc.seed, "seed for init and data order (default 0)");
}

}  // namespace

int main(int argc, char** argv) {
  apply_thread_cap();
  CLI::App app{"sequential facial-manipulation detection workbench"};
  app.require_subcommand(1);

  app.footer(
      "Each subcommand also accepts --config FILE: flat key=value lines\n"
      "mirroring its long flags; explicit flags win; unknown keys error.");

  GenerateOpts gen;
  CLI::App* g = app.add_subcommand("generate", "write a synthetic dataset");
  g->add_option("--out", gen.out, "output directory")->required();
  g->add_option("--n", gen.n, "sample count")->required();
  g->add_option("--seed", gen.seed, "rng seed (default 0)");
  g->add_option("--length-dist", gen.length_dist,
                "six comma-separated weights for sequence lengths 0..5")
      ->delimiter(',');

  TrainOpts tr;
  CLI::App* t = app.add_subcommand("train", "fit a model on a dataset");
  t->add_option("--data", tr.data, "dataset directory")->required();
  t->add_option("--model", tr.model, "model kind")
      ->check(CLI::IsMember({"seqfakeformer", "multi_cls"}));
  t->add_option("--out", tr.out, "checkpoint path")->required();
  t->add_option("--arch", tr.arch, "model size preset")
      ->check(CLI::IsMember({"desk", "narrow"}));
  t->add_option("--seca", tr.seca, "cross-attention spatial weighting")
      ->check(CLI::IsMember({"off", "basic", "multi"}));
  t->add_flag("--no-autoregressive", tr.no_autoregressive,
              "drop the causal mask (parallel decoding)");
  t->add_option("--log", tr.log_csv, "write the per-epoch log as csv");
  add_train_config_flags(t, tr.tc);

  EvalOpts ev;
  CLI::App* e = app.add_subcommand("eval", "score a checkpoint on a split");
  e->add_option("--data", ev.data, "dataset directory")->required();
  e->add_option("--ckpt", ev.ckpt, "checkpoint path")->required();
  e->add_option("--split", ev.split, "train|val|test|all");
  e->add_option("--report", ev.report, "output report path (json-lines)")
      ->required();

  InferOpts in;
  CLI::App* i = app.add_subcommand("infer", "predict one image's sequence");
  i->add_option("--image", in.image, "png path")->required();
  i->add_option("--ckpt", in.ckpt, "checkpoint path")->required();

  AblateOpts ab;
  CLI::App* a = app.add_subcommand("ablate", "sweep the ar x seca grid");
  a->add_option("--data", ab.data, "dataset directory")->required();
  a->add_option("--out", ab.out, "output csv path")->required();
  a->add_option("--seeds", ab.seeds, "runs per grid corner");
  a->add_option("--arch", ab.arch, "model size preset")
      ->check(CLI::IsMember({"desk", "narrow"}));
  add_train_config_flags(a, ab.tc);

  RecoverOpts rc;
  CLI::App* r = app.add_subcommand("recover", "invert manipulations");
  r->add_option("--data", rc.data, "dataset directory")->required();
  r->add_option("--report", rc.report, "eval report supplying predictions");
  r->add_option("--out", rc.out, "output directory")->required();
  r->add_option("--mode", rc.mode,
                "predicted: invert the predicted sequence; truth: stored "
                "ops; shuffled: predicted ops in a wrong order")
      ->check(CLI::IsMember({"predicted", "truth", "shuffled"}));
  r->add_option("--split", rc.split, "train|val|test|all");
  r->add_option("--seed", rc.seed, "seed for the shuffled control (default 0)");

  std::vector<std::string> args;
  try {
    args = expand_config(argc, argv);
  } catch (const std::exception& e2) {
    std::fprintf(stderr, "seqtrace: %s\n", e2.what());
    return 2;
  }
  std::reverse(args.begin(), args.end());

  try {
    app.parse(std::move(args));
  } catch (const CLI::CallForHelp& h) {
    return app.exit(h);
  } catch (const CLI::CallForAllHelp& h) {
    return app.exit(h);
  } catch (const CLI::ParseError& pe) {
    app.exit(pe);
    return 2;
  }

  try {
    if (g->parsed()) return cmd_generate(gen);
    if (t->parsed()) return cmd_train(tr);
    if (e->parsed()) return cmd_eval(ev);
    if (i->parsed()) return cmd_infer(in);
    if (a->parsed()) return cmd_ablate(ab);
    if (r->parsed()) return cmd_recover(rc);
  } catch (const CompatError& ce) {
    std::fprintf(stderr, "seqtrace: %s\n", ce.what());
    return 3;
  } catch (const IoError& ie) {
    std::fprintf(stderr, "seqtrace: %s\n", ie.what());
    return 2;
  } catch (const std::exception& ex) {
    std::fprintf(stderr, "seqtrace: internal error: %s\n", ex.what());
    return 1;
  }
  return 1;
}
