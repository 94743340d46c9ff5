// neuronpath: command-line front end for path discovery and analysis.
//
// Exit codes: 0 success, 1 usage or input error, 2 numeric or verification
// failure. Every run writes manifest.json next to its outputs.

#include <openssl/evp.h>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "npath/analysis.hpp"
#include "npath/attribution.hpp"
#include "npath/checkpoint.hpp"
#include "npath/dataset.hpp"
#include "npath/error.hpp"
#include "npath/parallel.hpp"
#include "npath/trainer.hpp"
#include "npath/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace npath;

namespace {

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return os.str();
}

std::string file_sha256(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  return sha256_hex(std::string(bytes.begin(), bytes.end()));
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

// Options shared by most subcommands. Unset optionals fall back to the
// subcommand's own default.
struct Options {
  std::string checkpoint;
  std::string data;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
  std::uint64_t data_seed = kDefaultTestSeed;
  std::optional<std::size_t> count;
  std::size_t m = 20;
  std::string scope = "all-tokens";
  std::string output_mode = "prob";
  std::string method = "neuron_path";
  std::optional<std::size_t> threads;
  std::size_t image = 0;
  std::optional<std::size_t> topk;
  std::string op = "zero";

  std::size_t epochs = 3;
  std::size_t train_count = 2000;
  std::size_t test_count = 500;
  double lr = 2e-3;

  std::string utilization;
  double quantile = 0.05;

  std::vector<std::size_t> topk_list{1, 5, 10, 30, 50};
  std::vector<double> mask_fracs{0.1, 0.3, 0.5, 1.0};

  std::vector<std::size_t> m_grid{16, 32, 64, 128, 256};
  std::size_t repeats = 3;
};

// Records what a run produced and writes the manifest at the end.
class Run {
 public:
  Run(std::string subcommand, const Options& o, const CLI::App& app) : sub_(std::move(subcommand)), o_(o) {
    started_ = utc_now();
    for (const CLI::Option* opt : app.get_options()) {
      if (opt->get_lnames().empty()) continue;
      const std::string key = opt->get_lnames().front();
      if (key == "help") continue;
      if (opt->count() > 0) {
        const auto& res = opt->results();
        flags_[key] = res.size() == 1 ? json(res.front()) : json(res);
      } else {
        flags_[key] = opt->get_default_str();
      }
    }
    fs::create_directories(o_.out);
  }

  std::string path(const std::string& name) const { return (fs::path(o_.out) / name).string(); }

  void write(const std::string& name, const std::string& content) {
    std::ofstream f(path(name), std::ios::binary);
    if (!f) throw UsageError("cannot write " + path(name));
    f << content;
    if (!f) throw UsageError("write failed for " + path(name));
    outputs_.push_back({{"file", name}, {"sha256", sha256_hex(content)}, {"bytes", content.size()}});
  }

  void add_output_file(const std::string& name) {
    outputs_.push_back({{"file", name}, {"sha256", file_sha256(path(name))}});
  }

  void seed(const std::string& what, std::uint64_t v) { seeds_[what] = v; }
  void note(const std::string& key, json v) { extra_[key] = std::move(v); }
  void checkpoint_hash(const std::string& file) { ckpt_ = file_sha256(file); }

  void finish(int exit_code) {
    json m;
    m["subcommand"] = sub_;
    m["flags"] = flags_;
    m["seeds"] = seeds_;
    m["checkpoint_sha256"] = ckpt_.empty() ? json(nullptr) : json(ckpt_);
    m["code_version"] = NPATH_VERSION;
    m["started_at"] = started_;
    m["finished_at"] = utc_now();
    m["exit_code"] = exit_code;
    m["outputs"] = outputs_;
    for (auto& [k, v] : extra_.items()) m[k] = v;
    std::ofstream f(path("manifest.json"));
    f << m.dump(2) << "\n";
  }

 private:
  std::string sub_;
  const Options& o_;
  std::string started_;
  json flags_ = json::object();
  json seeds_ = json::object();
  json outputs_ = json::array();
  json extra_ = json::object();
  std::string ckpt_;
};

VitModel load_model(const Options& o, Run& run) {
  if (o.checkpoint.empty()) throw UsageError("--checkpoint is required");
  VitModel model = load_checkpoint(o.checkpoint);
  run.checkpoint_hash(o.checkpoint);
  return model;
}

std::vector<Sample> load_samples(const Options& o, Run& run, std::size_t default_count) {
  std::vector<Sample> samples;
  if (!o.data.empty()) {
    samples = load_dataset(o.data);
    if (o.count && *o.count < samples.size()) samples.resize(*o.count);
    run.note("data_sha256", file_sha256(o.data));
  } else {
    samples = generate_toy_dataset(o.data_seed, o.count.value_or(default_count));
    run.seed("data", o.data_seed);
  }
  if (samples.empty()) throw UsageError("dataset is empty");
  return samples;
}

IntegrationConfig integration(const Options& o) {
  IntegrationConfig c;
  c.m = o.m;
  c.scope = parse_scope(o.scope);
  c.output_mode = parse_output_mode(o.output_mode);
  c.validate();
  return c;
}

std::string fmt(double v) { return format_double(v); }

// --- subcommands ------------------------------------------------------------

int cmd_train_toy(const Options& o, Run& run) {
  const std::uint64_t seed = o.seed.value_or(7);
  run.seed("init", seed);
  run.seed("train_data", kDefaultTrainSeed);
  run.seed("test_data", kDefaultTestSeed);
  const auto train = generate_toy_dataset(kDefaultTrainSeed, o.train_count);
  const auto test = generate_toy_dataset(kDefaultTestSeed, o.test_count);
  TrainOptions opts;
  opts.learning_rate = o.lr;
  std::ostringstream log;
  log << "epoch,mean_loss,train_accuracy\n";
  const VitModel model = train_toy(VitConfig{}, train, seed, o.epochs, opts, [&](const EpochStats& s) {
    log << s.epoch << ',' << fmt(s.mean_loss) << ',' << fmt(s.train_accuracy) << '\n';
    std::cerr << "epoch " << s.epoch << ": loss " << s.mean_loss << ", train accuracy " << s.train_accuracy << "\n";
  });
  save_checkpoint(model, run.path("toy.ck"));
  run.add_output_file("toy.ck");
  run.write("train_log.csv", log.str());
  const double acc = accuracy(model, test);
  json summary = {{"test_accuracy", acc}, {"test_count", test.size()}, {"epochs", o.epochs}};
  run.write("summary.json", summary.dump(2) + "\n");
  std::cout << "test accuracy " << acc << " on " << test.size() << " samples; checkpoint " << run.path("toy.ck")
            << "\n";
  return 0;
}

int cmd_gen_data(const Options& o, Run& run) {
  const std::uint64_t seed = o.seed.value_or(kDefaultTestSeed);
  run.seed("data", seed);
  const auto samples = generate_toy_dataset(seed, o.count.value_or(500));
  std::ostringstream os;
  write_dataset_ndjson(os, samples);
  run.write("dataset.ndjson", os.str());
  const auto hist = class_histogram(samples, kToyClasses);
  std::cout << samples.size() << " samples; per class:";
  for (auto h : hist) std::cout << ' ' << h;
  std::cout << "\n";
  return 0;
}

int cmd_find_path(const Options& o, Run& run) {
  const VitModel model = load_model(o, run);
  const auto samples = load_samples(o, run, o.image + 1);
  if (o.image >= samples.size()) throw UsageError("--image is outside the dataset");
  const IntegrationConfig integ = integration(o);
  const Sample& s = samples[o.image];

  std::vector<Criterion> methods;
  if (o.method == "all") {
    methods = {Criterion::jas, Criterion::activation, Criterion::influence_pattern};
  } else {
    methods = {parse_criterion(o.method)};
  }
  if (o.topk && methods != std::vector<Criterion>{Criterion::jas}) {
    throw UsageError("--topk applies to the neuron_path method only");
  }

  std::ostringstream out;
  for (Criterion c : methods) {
    std::string line;
    if (o.topk) {
      const TopkResult r = locate_topk(model, s, integ, *o.topk);
      json j = json::parse(path_record(o.image, r.chain, integ));
      json layers = json::array();
      for (std::size_t l = 0; l < r.per_layer.size(); ++l) {
        json entries = json::array();
        for (std::size_t i = 0; i < r.per_layer[l].size(); ++i) {
          entries.push_back({{"channel", r.per_layer[l][i].channel}, {"score", r.scores[l][i]}});
        }
        layers.push_back({{"layer", l + 1}, {"top", entries}});
      }
      j["topk"] = layers;
      line = j.dump();
    } else {
      line = path_record(o.image, find_path(model, s, integ, c), integ);
    }
    out << line << "\n";
    std::cout << line << "\n";
  }
  run.write("paths.ndjson", out.str());
  return 0;
}

int cmd_compare_methods(const Options& o, Run& run) {
  const VitModel model = load_model(o, run);
  const auto samples = load_samples(o, run, 200);
  const IntegrationConfig integ = integration(o);
  const std::size_t threads = resolve_threads(o.threads);

  std::ostringstream paths_out, table;
  table << "method,samples,mean_jas,median_jas,removal_mean,removal_median,removal_delta_accuracy,"
           "enhancement_mean,enhancement_median,enhancement_delta_accuracy,excluded\n";
  for (Criterion c : {Criterion::jas, Criterion::activation, Criterion::influence_pattern}) {
    std::cerr << method_name(c) << "...\n";
    const auto paths = find_paths(model, samples, c, integ, threads);
    std::vector<double> scores;
    for (std::size_t i = 0; i < paths.size(); ++i) {
      paths_out << path_record(i, paths[i], integ) << "\n";
      scores.push_back(paths[i].score);
    }
    const auto rem = measure_deviation(model, samples, paths, Operation::zero, integ.scope, threads);
    const auto enh = measure_deviation(model, samples, paths, Operation::twice, integ.scope, threads);
    table << method_name(c) << ',' << samples.size() << ',' << fmt(mean_of(scores)) << ','
          << fmt(median_of(scores)) << ',' << fmt(rem.mean) << ',' << fmt(rem.median) << ','
          << fmt(rem.delta_accuracy) << ',' << fmt(enh.mean) << ',' << fmt(enh.median) << ','
          << fmt(enh.delta_accuracy) << ',' << rem.excluded.size() << '\n';
  }
  run.write("paths.ndjson", paths_out.str());
  run.write("methods.csv", table.str());
  std::cout << table.str();
  return 0;
}

int cmd_intervene(const Options& o, Run& run) {
  const VitModel model = load_model(o, run);
  const auto samples = load_samples(o, run, 200);
  const IntegrationConfig integ = integration(o);
  const auto r = intervene_and_measure(model, samples, parse_criterion(o.method), parse_operation(o.op), integ,
                                       resolve_threads(o.threads));
  std::ostringstream csv;
  write_deviation_csv(csv, r);
  run.write("deviation.csv", csv.str());
  json summary = {{"method", method_name(r.method)},
                  {"operation", to_string(r.operation)},
                  {"scope", to_string(r.scope)},
                  {"samples", r.sample_ids.size()},
                  {"excluded", r.excluded},
                  {"mean", r.mean},
                  {"median", r.median},
                  {"accuracy_before", r.accuracy_before},
                  {"accuracy_after", r.accuracy_after},
                  {"delta_accuracy", r.delta_accuracy}};
  run.write("deviation_summary.json", summary.dump(2) + "\n");
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int cmd_aggregate(const Options& o, Run& run) {
  const VitModel model = load_model(o, run);
  const auto samples = load_samples(o, run, 500);
  const IntegrationConfig integ = integration(o);
  const auto paths = find_paths(model, samples, parse_criterion(o.method), integ, resolve_threads(o.threads));
  std::vector<std::vector<NeuronPath>> by_class(model.config.classes);
  std::ostringstream paths_out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].y >= by_class.size()) throw UsageError("label outside the model's classes");
    by_class[samples[i].y].push_back(paths[i]);
    paths_out << path_record(i, paths[i], integ) << "\n";
  }
  const auto util = build_utilization(by_class, model.config);
  std::ostringstream u, f;
  write_utilization_ndjson(u, util);
  write_frequency_csv(f, util);
  run.write("paths.ndjson", paths_out.str());
  run.write("utilization.ndjson", u.str());
  run.write("frequency.csv", f.str());
  std::cout << "utilization for " << util.size() << " classes from " << samples.size() << " paths\n";
  return 0;
}

int cmd_similarity(const Options& o, Run& run) {
  const std::string in = o.utilization.empty() ? run.path("utilization.ndjson") : o.utilization;
  std::ifstream f(in);
  if (!f) throw UsageError("cannot open " + in);
  const auto util = read_utilization_ndjson(f);
  run.note("utilization_sha256", file_sha256(in));
  const SimilarityMatrix sim = class_similarity(util);
  const auto neighbors = similarity_neighbors(sim, o.quantile);
  std::ostringstream csv, nb;
  write_similarity_csv(csv, sim);
  const auto& names = toy_class_names();
  auto name = [&](std::size_t c) { return c < names.size() ? names[c] : std::to_string(c); };
  for (std::size_t c = 0; c < neighbors.size(); ++c) {
    json j = {{"class", c}, {"name", name(c)}, {"top", neighbors[c].top}, {"bottom", neighbors[c].bottom},
              {"zero_norm", bool(sim.zero_norm[c])}};
    nb << j.dump() << "\n";
    std::cout << name(c) << ": most similar";
    for (auto t : neighbors[c].top) std::cout << ' ' << name(t);
    std::cout << "; least similar";
    for (auto b : neighbors[c].bottom) std::cout << ' ' << name(b);
    std::cout << "\n";
  }
  if (sim.warning) std::cerr << "warning: some classes have an all-zero utilization matrix\n";
  run.write("similarity.csv", csv.str());
  run.write("neighbors.ndjson", nb.str());
  return 0;
}

int cmd_prune(const Options& o, Run& run) {
  const VitModel model = load_model(o, run);
  const auto samples = load_samples(o, run, 500);
  const IntegrationConfig integ = integration(o);
  PruneConfig cfg;
  cfg.t_values = o.topk_list;
  cfg.p_values = o.mask_fracs;
  cfg.split_seed = o.seed.value_or(0);
  run.seed("split", cfg.split_seed);
  const PruneResult r = prune_and_eval(model, samples, cfg, integ, resolve_threads(o.threads));
  std::ostringstream csv, svg;
  write_prune_csv(csv, r);
  write_prune_svg(svg, r);
  run.write("prune.csv", csv.str());
  run.write("prune.svg", svg.str());
  std::cout << "baseline accuracy " << r.baseline << "\n";
  for (const auto& c : r.cells) std::cout << "t=" << c.t << " p=" << c.p << " accuracy " << c.accuracy << "\n";
  return 0;
}

int cmd_bench(const Options& o, Run& run) {
  VitModel model;
  if (o.checkpoint.empty()) {
    model = initial_model(VitConfig{}, o.seed.value_or(7));
    run.seed("init", o.seed.value_or(7));
  } else {
    model = load_model(o, run);
  }
  const auto samples = load_samples(o, run, o.image + 1);
  if (o.image >= samples.size()) throw UsageError("--image is outside the dataset");
  const BenchReport r =
      complexity_benchmark(model, samples[o.image], o.m_grid, o.repeats, parse_scope(o.scope));
  std::ostringstream csv;
  write_bench_csv(csv, r);
  run.write("bench.csv", csv.str());
  std::cout << csv.str();
  return 0;
}

int cmd_verify(const Options& o, Run& run) {
  VitModel model;
  if (o.checkpoint.empty()) {
    model = initial_model(VitConfig{}, o.seed.value_or(7));
    run.seed("init", o.seed.value_or(7));
  } else {
    model = load_model(o, run);
  }
  const auto samples = load_samples(o, run, 20);
  const std::uint64_t seed = o.seed.value_or(11);
  run.seed("verify", seed);
  const auto checks = run_verify_suite(model, samples, seed);
  std::ostringstream csv;
  csv << "check,pass,detail\n";
  bool ok = true;
  for (const auto& c : checks) {
    ok = ok && c.pass;
    csv << '"' << c.name << "\"," << (c.pass ? 1 : 0) << ",\"" << c.detail << "\"\n";
    std::cout << (c.pass ? "PASS " : "FAIL ") << c.name << ": " << c.detail << "\n";
  }
  run.write("verify.csv", csv.str());
  return ok ? 0 : 2;
}

void add_model_flags(CLI::App* s, Options& o) {
  s->add_option("--checkpoint", o.checkpoint, "model checkpoint file");
  s->add_option("--data", o.data, "dataset NDJSON (default: generated test split)");
  s->add_option("--data-seed", o.data_seed, "seed of the generated dataset")->capture_default_str();
  s->add_option("--count", o.count, "number of samples to use");
  s->add_option("--threads", o.threads, "worker threads (default NEURONPATH_THREADS or 1)");
}

void add_integration_flags(CLI::App* s, Options& o) {
  s->add_option("--m", o.m, "Riemann steps")->capture_default_str();
  s->add_option("--scope", o.scope, "all-tokens or cls")->capture_default_str();
  s->add_option("--output-mode", o.output_mode, "prob or logit")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  Options o;
  CLI::App app{"Neuron path discovery for a small vision transformer"};
  app.set_version_flag("--version", std::string(NPATH_VERSION));
  app.require_subcommand(1);

  auto out_flag = [&](CLI::App* s) { s->add_option("--out", o.out, "output directory")->capture_default_str(); };

  auto* train = app.add_subcommand("train-toy", "train the toy classifier");
  out_flag(train);
  train->add_option("--seed", o.seed, "initialization and shuffle seed (default 7)");
  train->add_option("--epochs", o.epochs)->capture_default_str();
  train->add_option("--train-count", o.train_count)->capture_default_str();
  train->add_option("--test-count", o.test_count)->capture_default_str();
  train->add_option("--lr", o.lr)->capture_default_str();

  auto* gen = app.add_subcommand("gen-data", "write a procedural dataset");
  out_flag(gen);
  gen->add_option("--seed", o.seed, "dataset seed (default 2)");
  gen->add_option("--count", o.count, "samples (default 500)");

  auto* find = app.add_subcommand("find-path", "locate the path of one image");
  out_flag(find);
  add_model_flags(find, o);
  add_integration_flags(find, o);
  find->add_option("--image", o.image, "sample index")->capture_default_str();
  find->add_option("--method", o.method, "neuron_path, activation, influence_pattern or all")->capture_default_str();
  find->add_option("--topk", o.topk, "report the t best neurons per layer");

  auto* compare = app.add_subcommand("compare-methods", "score and intervene on paths of every method");
  out_flag(compare);
  add_model_flags(compare, o);
  add_integration_flags(compare, o);

  auto* intervene = app.add_subcommand("intervene", "probability deviation under an intervention");
  out_flag(intervene);
  add_model_flags(intervene, o);
  add_integration_flags(intervene, o);
  intervene->add_option("--method", o.method)->capture_default_str();
  intervene->add_option("--op", o.op, "none, zero or double")->capture_default_str();

  auto* aggregate = app.add_subcommand("aggregate", "per-class neuron utilization");
  out_flag(aggregate);
  add_model_flags(aggregate, o);
  add_integration_flags(aggregate, o);
  aggregate->add_option("--method", o.method)->capture_default_str();

  auto* similarity = app.add_subcommand("similarity", "class similarity from utilization matrices");
  out_flag(similarity);
  similarity->add_option("--utilization", o.utilization, "utilization NDJSON (default <out>/utilization.ndjson)");
  similarity->add_option("--quantile", o.quantile, "neighbor fraction q")->capture_default_str();

  auto* prune = app.add_subcommand("prune", "mask non-path neurons and measure accuracy");
  out_flag(prune);
  add_model_flags(prune, o);
  add_integration_flags(prune, o);
  prune->add_option("--topk", o.topk_list, "comma-separated t values")->delimiter(',')->capture_default_str();
  prune->add_option("--mask-frac", o.mask_fracs, "comma-separated p values")->delimiter(',')->capture_default_str();
  prune->add_option("--seed", o.seed, "probe/test split seed (default 0)");

  auto* bench = app.add_subcommand("bench", "time the path search against m");
  out_flag(bench);
  add_model_flags(bench, o);
  bench->add_option("--scope", o.scope)->capture_default_str();
  bench->add_option("--image", o.image)->capture_default_str();
  bench->add_option("--m-grid", o.m_grid, "comma-separated m values")->delimiter(',')->capture_default_str();
  bench->add_option("--repeats", o.repeats)->capture_default_str();
  bench->add_option("--seed", o.seed, "init seed when no checkpoint is given (default 7)");

  auto* verify = app.add_subcommand("verify", "run the invariant checks");
  out_flag(verify);
  add_model_flags(verify, o);
  verify->add_option("--seed", o.seed, "check seed (default 11)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  const std::map<CLI::App*, int (*)(const Options&, Run&)> handlers = {
      {train, cmd_train_toy},   {gen, cmd_gen_data},     {find, cmd_find_path},
      {compare, cmd_compare_methods}, {intervene, cmd_intervene}, {aggregate, cmd_aggregate},
      {similarity, cmd_similarity},   {prune, cmd_prune},         {bench, cmd_bench},
      {verify, cmd_verify}};
  CLI::App* sub = app.get_subcommands().front();

  std::optional<Run> run;
  int code = 0;
  try {
    run.emplace(sub->get_name(), o, *sub);
    code = handlers.at(sub)(o, *run);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    code = 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    code = 2;
  }
  if (run) {
    try {
      run->finish(code);
    } catch (const std::exception& e) {
      std::cerr << "error: manifest: " << e.what() << "\n";
      if (code == 0) code = 1;
    }
  }
  return code;
}
