// devos command-line tool: synth, train, propagate, eval, gradcheck, bench.
// Exit codes: 0 success, 1 check or evaluation failure, 2 usage or input error.

#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"

#include "devos/dataio.hpp"
#include "devos/metrics.hpp"
#include "devos/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace devos;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

struct Global {
  std::uint64_t seed = 0;
  int threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  std::string out = ".";
};

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

json run_config(const std::string& command, const Global& g, json params) {
  return {{"command", command}, {"seed", g.seed}, {"threads", g.threads}, {"out", g.out}, {"params", params}};
}

// A spec file holds one sequence spec or {"sequences": [...]}.
std::vector<SyntheticSpec> parse_specs(const json& j) {
  std::vector<SyntheticSpec> specs;
  if (j.contains("sequences")) {
    for (const auto& s : j.at("sequences")) specs.push_back(SyntheticSpec::from_json(s));
  } else {
    specs.push_back(SyntheticSpec::from_json(j));
  }
  return specs;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// --flow values: oracle (regenerated from <data>/synth.json), files (.flo
// under <data>/flow), noisy:<sigma> (files plus Gaussian noise).
struct FlowChoice {
  enum class Kind { Oracle, Files, Noisy } kind = Kind::Oracle;
  double sigma = 0;

  static FlowChoice parse(const std::string& s) {
    FlowChoice c;
    if (s == "oracle") return c;
    if (s == "files") {
      c.kind = Kind::Files;
      return c;
    }
    if (s.rfind("noisy:", 0) == 0) {
      c.kind = Kind::Noisy;
      try {
        c.sigma = std::stod(s.substr(6));
      } catch (const std::exception&) {
        throw InputError("bad noise level in --flow=" + s);
      }
      if (!(c.sigma >= 0)) throw InputError("noise level must be >= 0");
      return c;
    }
    throw InputError("--flow must be oracle, files or noisy:<sigma>, got " + s);
  }
};

void apply_flow_choice(Sequence& seq, const fs::path& data, const FlowChoice& choice, std::uint64_t seed) {
  if (choice.kind == FlowChoice::Kind::Oracle) {
    const fs::path spec_path = data / "synth.json";
    if (!fs::exists(spec_path)) throw InputError("--flow=oracle needs " + spec_path.string() + " from `devos synth`");
    for (const auto& spec : parse_specs(read_json(spec_path))) {
      if (spec.name != seq.name) continue;
      const Sequence exact = gen_synthetic(spec);
      seq.flow_direct = exact.flow_direct;
      seq.flow_inverse = exact.flow_inverse;
      return;
    }
    throw InputError("no synthetic spec named " + seq.name + " in " + spec_path.string());
  }
  if (!seq.has_flows() && seq.length() > 1) {
    throw InputError("sequence " + seq.name + " has no flow files under " + (data / "flow" / seq.name).string());
  }
  if (choice.kind == FlowChoice::Kind::Noisy) {
    for (int t = 1; t < seq.length(); ++t) {
      seq.flow_direct[t] = add_flow_noise(seq.flow_direct[t], choice.sigma, seed + 2 * t);
      seq.flow_inverse[t] = add_flow_noise(seq.flow_inverse[t], choice.sigma, seed + 2 * t + 1);
    }
  }
}

std::vector<ObjectMask> ground_truth(const Sequence& seq) {
  std::vector<ObjectMask> gt;
  for (const auto& a : seq.annotations) {
    if (!a) return {};
    gt.push_back(*a);
  }
  return gt;
}

std::string frame_file(int t) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%05d.png", t);
  return buf;
}

// ---------------------------------------------------------------------------

int cmd_synth(const Global& g, const std::string& spec_path) {
  const json spec_json = read_json(spec_path);
  auto specs = parse_specs(spec_json);
  const fs::path out = g.out;
  json stored = json::object();
  stored["sequences"] = json::array();
  for (auto& spec : specs) {
    const Sequence seq = gen_synthetic(spec);
    save_sequence(out, seq);
    stored["sequences"].push_back(spec.to_json());
    std::cout << "wrote " << spec.name << ": " << seq.length() << " frames, " << spec.shapes.size() << " objects\n";
  }
  fs::create_directories(out / "ImageSets" / "2017");
  std::ofstream list(out / "ImageSets" / "2017" / "val.txt");
  for (const auto& s : specs) list << s.name << "\n";
  write_json(out / "synth.json", stored);
  write_json(out / "run_config.json", run_config("synth", g, {{"spec", spec_path}}));
  return 0;
}

struct TrainArgs {
  std::string data;
  std::string sequences;
  std::string preset = "toy";
  std::string checkpoint = "model.ckpt";
  std::string resume;
  long steps = 500;
  double lr = 1e-3;
  bool no_shuffle = false;
};

int cmd_train(const Global& g, const TrainArgs& a) {
  const fs::path data = a.data;
  std::vector<std::string> names = a.sequences.empty() ? list_sequences(data) : split_list(a.sequences);
  std::vector<Sequence> seqs;
  for (const auto& n : names) seqs.push_back(load_sequence(data, n));

  std::optional<Checkpoint> resumed;
  if (!a.resume.empty()) resumed = load_checkpoint(a.resume);
  ModelConfig cfg = resumed ? resumed->model.config() : ModelConfig::preset_named(a.preset);
  if (!resumed) cfg.init_seed = g.seed;
  Model<float> model = resumed ? resumed->model : Model<float>(cfg);

  TrainOptions opt;
  opt.steps = a.steps;
  opt.lr = a.lr;
  opt.seed = g.seed;
  opt.shuffle_channels = !a.no_shuffle;
  opt.on_step = [&](long step, double loss) {
    if (step % 50 == 0 || step + 1 == a.steps) std::cout << "step " << step << " loss " << loss << "\n";
  };
  const TrainState state =
      train_toy(model, seqs, opt, resumed && resumed->state ? &*resumed->state : nullptr);

  const fs::path ck = fs::path(g.out) / a.checkpoint;
  fs::create_directories(ck.parent_path());
  save_checkpoint(ck, model, &state);
  json log{{"losses", state.losses},
           {"steps", state.steps},
           {"model", cfg.to_json()},
           {"run_config", run_config("train", g,
                                     {{"data", a.data}, {"sequences", names}, {"preset", cfg.preset},
                                      {"steps", a.steps}, {"lr", a.lr}, {"shuffle_channels", !a.no_shuffle},
                                      {"resume", a.resume}})}};
  write_json(fs::path(ck).concat(".json"), log);
  std::cout << "saved " << ck.string() << "\n";
  return 0;
}

struct PropagateArgs {
  std::string checkpoint;
  std::string data;
  std::string sequences;
  std::string flow = "oracle";
  int mem_every = kMemorizeEvery;
  int mem_cap = kMemoryCapacity;
  std::string disable;
};

int cmd_propagate(const Global& g, const PropagateArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const FlowChoice flow = FlowChoice::parse(a.flow);
  PropagateOptions opt;
  opt.memory = {a.mem_cap, a.mem_every};
  opt.memory.validate();
  opt.gates = Gates::disabling(a.disable);

  const fs::path data = a.data, out = g.out;
  const auto names = a.sequences.empty() ? list_sequences(data) : split_list(a.sequences);
  EvalReport report;
  json timings = json::object();
  for (const auto& name : names) {
    Sequence seq = load_sequence(data, name);
    apply_flow_choice(seq, data, flow, g.seed);
    const PropagationTrace trace = propagate(ck.model, seq, opt);
    const auto masks = full_prediction(seq, trace);
    const fs::path dir = out / name;
    fs::create_directories(dir);
    for (std::size_t t = 0; t < masks.size(); ++t) write_mask(dir / frame_file(static_cast<int>(t)), masks[t]);
    timings[name] = {{"seconds", trace.seconds}, {"bank_sizes", trace.bank_sizes}};
    if (const auto gt = ground_truth(seq); !gt.empty()) report.sequences.push_back(evaluate_sequence(name, masks, gt));
  }
  json j = report.sequences.empty() ? json::object() : report.to_json();
  j["trace"] = timings;
  j["run_config"] = run_config("propagate", g,
                               {{"checkpoint", a.checkpoint}, {"data", a.data}, {"sequences", names},
                                {"flow", a.flow}, {"mem_every", a.mem_every}, {"mem_cap", a.mem_cap},
                                {"disable", a.disable}, {"model", ck.model.config().to_json()}});
  write_json(out / "report.json", j);
  if (!report.sequences.empty()) std::cout << report.to_table();
  return 0;
}

int cmd_eval(const Global& g, const std::string& pred, const std::string& data, const std::string& sequences,
             double min_jf) {
  const auto names = sequences.empty() ? list_sequences(data) : split_list(sequences);
  EvalReport report;
  for (const auto& name : names) {
    const Sequence seq = load_sequence(data, name);
    const auto gt = ground_truth(seq);
    if (gt.empty()) throw InputError("sequence " + name + " lacks ground truth for some frames");
    std::vector<ObjectMask> masks;
    for (int t = 0; t < seq.length(); ++t) masks.push_back(read_mask(fs::path(pred) / name / frame_file(t)));
    report.sequences.push_back(evaluate_sequence(name, masks, gt));
  }
  json j = report.to_json();
  j["run_config"] = run_config("eval", g, {{"pred", pred}, {"data", data}, {"sequences", names}, {"min_jf", min_jf}});
  write_json(fs::path(g.out) / "eval.json", j);
  std::cout << report.to_table();
  return report.jf() >= min_jf ? 0 : kExitFailure;
}

int cmd_gradcheck(const Global& g, const std::string& preset, long entries, double tolerance, double fault_scale) {
  const ModelConfig cfg = ModelConfig::preset_named(preset);
  const GradCheckReport report = gradcheck_model(cfg, g.seed, entries, tolerance, fault_scale);
  std::size_t width = 0;
  for (const auto& grp : report.groups) width = std::max(width, grp.name.size());
  for (const auto& grp : report.groups) {
    std::cout << std::left << std::setw(static_cast<int>(width)) << grp.name << "  " << std::scientific
              << std::setprecision(3) << grp.max_rel_error << "  " << (grp.pass ? "ok" : "FAIL") << "\n";
  }
  std::cout << (report.pass() ? "PASS" : "FAIL") << " (" << report.groups.size() << " groups, tolerance "
            << tolerance << ")\n";
  json j = report.to_json();
  j["run_config"] = run_config("gradcheck", g, {{"preset", preset}, {"entries", entries}, {"tolerance", tolerance},
                                                {"fault_scale", fault_scale}});
  write_json(fs::path(g.out) / "gradcheck.json", j);
  return report.pass() ? 0 : kExitFailure;
}

int cmd_bench(const Global& g, const std::string& preset, const std::string& sizes, int repeats) {
  std::vector<int> sz;
  for (const auto& s : split_list(sizes)) {
    try {
      sz.push_back(std::stoi(s));
    } catch (const std::exception&) {
      throw InputError("bad size '" + s + "'");
    }
  }
  const BenchReport report = bench(ModelConfig::preset_named(preset), sz, repeats, g.seed);
  std::cout << report.to_table();
  json j = report.to_json();
  j["run_config"] = run_config("bench", g, {{"preset", preset}, {"sizes", sz}, {"repeats", repeats}});
  write_json(fs::path(g.out) / "bench.json", j);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"devos: flow-guided deformable video object segmentation"};
  app.require_subcommand(1);
  Global g;
  app.add_option("--seed", g.seed, "random seed")->capture_default_str();
  app.add_option("--threads", g.threads, "worker threads (results do not depend on it)")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app.add_option("--out", g.out, "output directory")->capture_default_str();

  std::string spec_path;
  auto* synth = app.add_subcommand("synth", "generate a synthetic sequence directory from a JSON spec");
  synth->add_option("spec", spec_path, "spec JSON")->required();

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train a model on sequences with full annotations and flow");
  train->add_option("--data", ta.data, "dataset root")->required();
  train->add_option("--sequences", ta.sequences, "comma list (default: all)");
  train->add_option("--preset", ta.preset, "base, toy or micro")->capture_default_str();
  train->add_option("--steps", ta.steps)->capture_default_str();
  train->add_option("--lr", ta.lr)->capture_default_str();
  train->add_option("--checkpoint", ta.checkpoint, "file name under --out")->capture_default_str();
  train->add_option("--resume", ta.resume, "checkpoint to continue from");
  train->add_flag("--no-shuffle", ta.no_shuffle, "keep object labels fixed");

  PropagateArgs pa;
  auto* prop = app.add_subcommand("propagate", "segment sequences from their first-frame annotation");
  prop->add_option("--checkpoint", pa.checkpoint)->required();
  prop->add_option("--data", pa.data, "dataset root")->required();
  prop->add_option("--sequences", pa.sequences, "comma list (default: all)");
  prop->add_option("--flow", pa.flow, "oracle, files or noisy:<sigma>")->capture_default_str();
  prop->add_option("--mem-every", pa.mem_every)->capture_default_str();
  prop->add_option("--mem-cap", pa.mem_cap)->capture_default_str();
  prop->add_option("--disable", pa.disable, "comma list of flow-offsets, qk-flow, long-term, multi-scale");

  std::string pred, data, eval_seqs;
  double min_jf = 0;
  auto* eval = app.add_subcommand("eval", "score predicted masks against ground truth");
  eval->add_option("--pred", pred, "directory of <seq>/%05d.png predictions")->required();
  eval->add_option("--data", data, "dataset root")->required();
  eval->add_option("--sequences", eval_seqs, "comma list (default: all)");
  eval->add_option("--min-jf", min_jf, "exit 1 if J&F is below this")->capture_default_str();

  std::string gc_preset = "micro";
  long entries = 4;
  double tolerance = 1e-2, fault_scale = 1.0;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every parameter tensor");
  gc->add_option("--preset", gc_preset)->capture_default_str();
  gc->add_option("--entries", entries, "probes per parameter tensor")->capture_default_str();
  gc->add_option("--tolerance", tolerance)->capture_default_str();
  gc->add_option("--fault-scale", fault_scale, "scale analytic gradients (negative control)")->capture_default_str();

  std::string bench_preset = "base", sizes = "64,128,256";
  int repeats = 5;
  auto* bn = app.add_subcommand("bench", "time ADVA against dense attention across frame sizes");
  bn->add_option("--preset", bench_preset)->capture_default_str();
  bn->add_option("--sizes", sizes)->capture_default_str();
  bn->add_option("--repeats", repeats)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    fs::create_directories(g.out);
    if (*synth) return cmd_synth(g, spec_path);
    if (*train) return cmd_train(g, ta);
    if (*prop) return cmd_propagate(g, pa);
    if (*eval) return cmd_eval(g, pred, data, eval_seqs, min_jf);
    if (*gc) return cmd_gradcheck(g, gc_preset, entries, tolerance, fault_scale);
    if (*bn) return cmd_bench(g, bench_preset, sizes, repeats);
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DimensionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "failed: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}
