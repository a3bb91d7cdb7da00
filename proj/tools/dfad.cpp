// dfad: command-line front end.
//
//   dfad train-teacher --dataset-root data --dataset MUTAG --family GIN --layers 3 --hidden 64 --out runs/teacher
//   dfad distill       --dataset-root data --dataset MUTAG --teacher-dir runs/teacher --layers 3 --hidden 32 --out runs/dfad
//   dfad baseline      --which kd --fraction 0.1,0.5,1.0 ...
//   dfad export-graphs --generator runs/dfad/fold0/generator.json --count 3 --format dot --out graphs
//   dfad param-report  --teacher GIN-5-128 --student GIN-5-32 --dataset-root data --dataset MUTAG
//
// Exit codes: 0 success, 2 usage or configuration error, 3 training failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dfad/experiment.hpp"

namespace fs = std::filesystem;
using namespace dfad;

namespace {

constexpr int kUsageError = 2;
constexpr int kRuntimeError = 3;

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::vector<std::string> split(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, sep)) {
    auto b = item.find_first_not_of(" \t"), e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

double parse_double(const std::string& s, const std::string& flag) {
  try {
    std::size_t used = 0;
    double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw UsageError(flag + ": not a number: '" + s + "'");
}

std::size_t parse_size(const std::string& s, const std::string& flag) {
  double v = parse_double(s, flag);
  if (v < 0 || v != std::floor(v)) throw UsageError(flag + ": not a non-negative integer: '" + s + "'");
  return static_cast<std::size_t>(v);
}

/// "GIN-5-128" -> config with family, layers and hidden set.
GnnConfig parse_model_label(const std::string& label, std::size_t heads) {
  auto parts = split(label, '-');
  if (parts.size() != 3) throw UsageError("model label '" + label + "' is not FAMILY-LAYERS-HIDDEN");
  GnnConfig c;
  c.family = family_from_string(parts[0]);
  c.layers = parse_size(parts[1], "model label");
  c.hidden = parse_size(parts[2], "model label");
  c.gat_heads = heads;
  return c;
}

/// Flag values as strings; only options actually given override the spec.
struct Flags {
  std::string config;
  std::string dataset_root, dataset, features;
  std::string family, teacher_dir, loss, gen_nodes, edge_mode, fraction, folds_only, which;
  std::size_t layers = 0, hidden = 0, heads = 0, epochs = 0, iters = 0, batch = 0, k = 0, folds = 0,
              workers = 0, toy_graphs = 0;
  double tau = 0, student_lr = 0, gen_lr = 0, lr = 0;
  std::uint64_t seed = 0;
  std::string out;
  // export-graphs / param-report
  std::string generator, format = "dot", teacher_label, student_label;
  std::size_t count = 3;
};

struct Options {
  CLI::App* app;
  std::map<std::string, CLI::Option*> opt;
  bool given(const std::string& name) const {
    auto it = opt.find(name);
    return it != opt.end() && it->second->count() > 0;
  }
};

void add_common(Options& o, Flags& f) {
  auto* a = o.app;
  o.opt["config"] = a->add_option("--config", f.config, "JSON run spec; flags override it");
  o.opt["dataset-root"] = a->add_option("--dataset-root", f.dataset_root,
                                        "directory holding TU datasets (env DFAD_DATA_ROOT)");
  o.opt["dataset"] = a->add_option("--dataset", f.dataset, "dataset name, or CYCLES_VS_STARS");
  o.opt["features"] = a->add_option("--features", f.features,
                                    "node-label-onehot | degree-onehot | constant");
  o.opt["toy-graphs"] = a->add_option("--toy-graphs", f.toy_graphs, "size of the synthetic set");
  o.opt["family"] = a->add_option("--family", f.family, "GIN | GCN | SAGE | GAT");
  o.opt["layers"] = a->add_option("--layers", f.layers, "message-passing layers");
  o.opt["hidden"] = a->add_option("--hidden", f.hidden, "hidden width");
  o.opt["heads"] = a->add_option("--heads", f.heads, "GAT attention heads");
  o.opt["epochs"] = a->add_option("--epochs", f.epochs, "training epochs");
  o.opt["batch-size"] = a->add_option("--batch-size", f.batch, "mini-batch size");
  o.opt["folds"] = a->add_option("--folds", f.folds, "number of cross-validation folds");
  o.opt["only-folds"] = a->add_option("--only-folds", f.folds_only, "comma list of folds to run");
  o.opt["seed"] = a->add_option("--seed", f.seed, "run seed");
  o.opt["workers"] = a->add_option("--workers", f.workers, "folds trained in parallel");
  o.opt["out"] = a->add_option("--out", f.out, "output directory")->required();
}

void add_student(Options& o, Flags& f) {
  auto* a = o.app;
  o.opt["teacher-dir"] = a->add_option("--teacher-dir", f.teacher_dir,
                                       "directory of per-fold teacher checkpoints");
  o.opt["loss"] = a->add_option("--loss", f.loss, "L-MAE | S-MAE | MSE | KLD | CE, comma list or all");
  o.opt["iters-per-epoch"] = a->add_option("--iters-per-epoch", f.iters, "iterations per epoch");
  o.opt["k"] = a->add_option("--k", f.k, "student steps per generator step");
  o.opt["tau"] = a->add_option("--tau", f.tau, "edge threshold");
  o.opt["gen-nodes"] = a->add_option("--gen-nodes", f.gen_nodes,
                                     "generated node count N, comma list, or auto");
  o.opt["edge-mode"] = a->add_option("--edge-mode", f.edge_mode, "hard-st | soft");
  o.opt["student-lr"] = a->add_option("--student-lr", f.student_lr, "student learning rate");
  o.opt["gen-lr"] = a->add_option("--gen-lr", f.gen_lr, "generator learning rate");
}

RunSpec resolve(const Options& o, const Flags& f, const std::string& command) {
  RunSpec s;
  if (o.given("config")) {
    std::ifstream in(f.config);
    if (!in) throw UsageError("cannot read config file " + f.config);
    try {
      s = nlohmann::json::parse(in).get<RunSpec>();
    } catch (const nlohmann::json::exception& e) {
      throw UsageError(f.config + ": " + e.what());
    }
  }
  s.command = command;
  if (o.given("dataset-root")) {
    s.dataset_root = f.dataset_root;
  } else if (s.dataset_root.empty()) {
    if (const char* env = std::getenv("DFAD_DATA_ROOT")) s.dataset_root = env;
  }
  if (o.given("dataset")) s.dataset = f.dataset;
  if (o.given("features")) s.features = feature_policy_from_string(f.features);
  if (o.given("toy-graphs")) s.toy_graphs = f.toy_graphs;
  GnnConfig& model = command == "train-teacher" ? s.teacher : s.student;
  if (o.given("family")) model.family = family_from_string(f.family);
  if (o.given("layers")) model.layers = f.layers;
  if (o.given("hidden")) model.hidden = f.hidden;
  if (o.given("heads")) model.gat_heads = f.heads;
  if (o.given("epochs")) {
    s.teacher_training.epochs = f.epochs;
    s.distill.epochs = f.epochs;
  }
  if (o.given("batch-size")) {
    s.teacher_training.batch_size = f.batch;
    s.distill.batch_size = f.batch;
  }
  if (o.given("lr")) s.teacher_training.lr = f.lr;
  if (o.given("folds")) s.folds = f.folds;
  if (o.given("only-folds")) {
    s.only_folds.clear();
    for (const auto& x : split(f.folds_only)) s.only_folds.push_back(parse_size(x, "--only-folds"));
  }
  if (o.given("seed")) s.seed = f.seed;
  if (o.given("workers")) s.workers = f.workers;
  s.out = f.out;
  if (o.given("teacher-dir")) s.teacher_dir = f.teacher_dir;
  if (o.given("iters-per-epoch")) s.distill.iterations_per_epoch = f.iters;
  if (o.given("k")) s.distill.k = f.k;
  if (o.given("tau")) s.generator.tau = f.tau;
  if (o.given("edge-mode")) s.generator.edge_mode = edge_mode_from_string(f.edge_mode);
  if (o.given("student-lr")) s.distill.student_lr = f.student_lr;
  if (o.given("gen-lr")) s.distill.generator_lr = f.gen_lr;
  if (o.given("which")) s.method = method_from_string(f.which);
  if (s.workers == 0) throw UsageError("--workers must be >= 1");
  return s;
}

std::vector<LossKind> loss_list(const Options& o, const Flags& f, const RunSpec& s) {
  if (!o.given("loss")) return {s.distill.loss};
  if (f.loss == "all") return {std::begin(kAllLossKinds), std::end(kAllLossKinds)};
  std::vector<LossKind> out;
  for (const auto& x : split(f.loss)) out.push_back(loss_kind_from_string(x));
  if (out.empty()) throw UsageError("--loss: empty list");
  return out;
}

/// Empty optional = automatic N.
std::vector<std::optional<std::size_t>> node_list(const Options& o, const Flags& f,
                                                  const RunSpec& s) {
  if (!o.given("gen-nodes")) {
    if (s.auto_node_count) return {std::nullopt};
    return {s.generator.node_count};
  }
  std::vector<std::optional<std::size_t>> out;
  for (const auto& x : split(f.gen_nodes)) {
    if (x == "auto") {
      out.push_back(std::nullopt);
    } else {
      out.push_back(parse_size(x, "--gen-nodes"));
    }
  }
  if (out.empty()) throw UsageError("--gen-nodes: empty list");
  return out;
}

void say(const std::string& line) { std::cerr << line << std::endl; }

void emit(const fs::path& dir, const ExperimentReport& rep, const RunSpec& spec) {
  write_report(dir, rep, spec);
  std::cout << rep.text() << "written to " << dir.string() << "\n\n";
}

std::vector<Model> teachers_for(const RunSpec& spec) {
  if (spec.teacher_dir.empty()) throw UsageError("--teacher-dir is required");
  return load_teachers(spec);
}

int cmd_train_teacher(const Options& o, const Flags& f) {
  RunSpec spec = resolve(o, f, "train-teacher");
  spec.method = Method::teacher;
  PreparedData data = prepare_data(spec);
  TeacherRun run = run_teachers(spec, data, say);
  emit(spec.out, run.report, spec);
  return 0;
}

int cmd_distill(const Options& o, const Flags& f) {
  RunSpec base = resolve(o, f, "distill");
  base.method = Method::dfad;
  PreparedData data = prepare_data(base);
  auto teachers = teachers_for(base);
  auto losses = loss_list(o, f, base);
  auto nodes = node_list(o, f, base);
  for (LossKind loss : losses) {
    for (auto n : nodes) {
      RunSpec spec = base;
      spec.distill.loss = loss;
      spec.auto_node_count = !n.has_value();
      if (n) spec.generator.node_count = *n;
      fs::path dir = spec.out;
      if (losses.size() > 1) dir /= "loss-" + to_string(loss);
      if (nodes.size() > 1) dir /= "nodes-" + (n ? std::to_string(*n) : std::string("auto"));
      spec.out = dir.string();
      StudentRun run = run_students(spec, data, teachers, say);
      emit(dir, run.report, spec);
    }
  }
  return 0;
}

int cmd_baseline(const Options& o, const Flags& f) {
  RunSpec base = resolve(o, f, "baseline");
  if (base.method != Method::kd && base.method != Method::random) {
    throw UsageError("--which must be kd or random");
  }
  PreparedData data = prepare_data(base);
  auto teachers = teachers_for(base);
  std::vector<double> fractions;
  if (o.given("fraction")) {
    for (const auto& x : split(f.fraction)) fractions.push_back(parse_double(x, "--fraction"));
  } else {
    fractions.push_back(base.fraction);
  }
  if (base.method == Method::random && fractions.size() > 1) {
    throw UsageError("--fraction lists only apply to --which kd");
  }
  std::ostringstream csv;
  csv << "fraction,mean,std,teacher_mean,relative_percent\n";
  for (double fr : fractions) {
    RunSpec spec = base;
    spec.fraction = fr;
    fs::path dir = spec.out;
    if (fractions.size() > 1) {
      std::ostringstream name;
      name << "fraction-" << fr;
      dir /= name.str();
    }
    spec.out = dir.string();
    StudentRun run = run_students(spec, data, teachers, say);
    emit(dir, run.report, spec);
    csv << std::setprecision(17) << fr << "," << run.report.mean() << ","
        << run.report.stddev() << "," << run.report.teacher_mean() << ","
        << run.report.relative_percent() << "\n";
  }
  if (fractions.size() > 1) {
    write_text(fs::path(base.out) / "fractions.csv", csv.str());
    std::cout << csv.str();
  }
  return 0;
}

int cmd_export(const Flags& f) {
  if (f.format != "dot" && f.format != "jsonl") {
    throw UsageError("unknown format '" + f.format + "' (expected dot or jsonl)");
  }
  Generator gen = generator_from_checkpoint(read_checkpoint(f.generator));
  std::mt19937_64 rng(f.seed);
  Tensor z = sample_latent(std::max<std::size_t>(f.count, 1), gen.config.latent_dim, rng);
  GeneratedBatch g = generate(gen.config, gen.params, z);
  fs::create_directories(f.out);
  if (f.format == "dot") {
    for (std::size_t i = 0; i < f.count; ++i) {
      write_text(fs::path(f.out) / ("graph" + std::to_string(i) + ".dot"),
                 to_dot(g, i, "generated" + std::to_string(i)));
    }
  } else {
    std::string rows;
    for (std::size_t i = 0; i < f.count; ++i) rows += to_json_row(g, i).dump() + "\n";
    write_text(fs::path(f.out) / "graphs.jsonl", rows);
  }
  std::cout << "wrote " << f.count << " graph(s) to " << f.out << "\n";
  return 0;
}

int cmd_param_report(const Options& o, const Flags& f) {
  GnnConfig t = parse_model_label(f.teacher_label, o.given("heads") ? f.heads : 4);
  GnnConfig s = parse_model_label(f.student_label, o.given("heads") ? f.heads : 4);
  std::size_t input_dim = 1, classes = 2;
  std::string root = f.dataset_root;
  if (root.empty()) {
    if (const char* env = std::getenv("DFAD_DATA_ROOT")) root = env;
  }
  if (o.given("dataset")) {
    RunSpec spec;
    spec.dataset_root = root;
    spec.dataset = f.dataset;
    if (o.given("features")) spec.features = feature_policy_from_string(f.features);
    spec.folds = 1;
    PreparedData d = prepare_data(spec);
    input_dim = d.data.feature_dim;
    classes = d.data.num_classes;
  }
  t.input_dim = s.input_dim = input_dim;
  t.num_classes = s.num_classes = classes;
  std::cout << "input dim " << input_dim << ", classes " << classes << "\n"
            << param_table(t, s);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  dfad::retain_heap_memory();
  CLI::App app{"Data-free adversarial distillation for graph classifiers"};
  app.require_subcommand(1);
  Flags f;

  Options teacher{app.add_subcommand("train-teacher", "train one teacher per fold"), {}};
  add_common(teacher, f);
  teacher.opt["lr"] = teacher.app->add_option("--lr", f.lr, "teacher learning rate");

  Options dist{app.add_subcommand("distill", "data-free distillation per fold"), {}};
  add_common(dist, f);
  add_student(dist, f);

  Options base{app.add_subcommand("baseline", "KD or RANDOM baseline per fold"), {}};
  add_common(base, f);
  add_student(base, f);
  base.opt["which"] = base.app->add_option("--which", f.which, "kd | random")->required();
  base.opt["fraction"] = base.app->add_option("--fraction", f.fraction,
                                              "real-data fraction(s) for kd, comma list");

  Options exp{app.add_subcommand("export-graphs", "write generated graphs as DOT or JSONL"), {}};
  exp.app->add_option("--generator", f.generator, "generator checkpoint")->required();
  exp.app->add_option("--count", f.count, "number of graphs");
  exp.app->add_option("--format", f.format, "dot | jsonl");
  exp.app->add_option("--seed", f.seed, "latent seed");
  exp.app->add_option("--out", f.out, "output directory")->required();

  Options par{app.add_subcommand("param-report", "compare teacher and student sizes"), {}};
  par.app->add_option("--teacher", f.teacher_label, "e.g. GIN-5-128")->required();
  par.app->add_option("--student", f.student_label, "e.g. GIN-5-32")->required();
  par.opt["heads"] = par.app->add_option("--heads", f.heads, "GAT attention heads");
  par.opt["dataset"] = par.app->add_option("--dataset", f.dataset, "dataset for input/class dims");
  par.app->add_option("--dataset-root", f.dataset_root, "directory holding TU datasets");
  par.opt["features"] = par.app->add_option("--features", f.features, "feature policy");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }

  try {
    if (*teacher.app) return cmd_train_teacher(teacher, f);
    if (*dist.app) return cmd_distill(dist, f);
    if (*base.app) return cmd_baseline(base, f);
    if (*exp.app) return cmd_export(f);
    if (*par.app) return cmd_param_report(par, f);
  } catch (const TrainingDiverged& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsageError;
  } catch (const DatasetError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsageError;
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsageError;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kUsageError;
}
