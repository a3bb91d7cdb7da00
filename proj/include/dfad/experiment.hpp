#pragma once

// Fold-level orchestration shared by the command-line tool and the
// acceptance runner: run specifications, per-fold teacher / student
// training, aggregate reports, and generated-graph export.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "dfad/checkpoint.hpp"
#include "dfad/distill.hpp"
#include "dfad/generator.hpp"
#include "dfad/gnn.hpp"
#include "dfad/graph_data.hpp"

namespace dfad {

inline constexpr const char* kReportSchema = "dfad-report";
inline constexpr int kReportVersion = 1;
inline constexpr const char* kToyDataset = "CYCLES_VS_STARS";

enum class Method { teacher, dfad, random, kd };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::teacher: return "teacher";
    case Method::dfad: return "dfad";
    case Method::random: return "random";
    case Method::kd: return "kd";
  }
  return "?";
}

inline Method method_from_string(const std::string& s) {
  for (Method m : {Method::teacher, Method::dfad, Method::random, Method::kd}) {
    if (to_string(m) == s) return m;
  }
  throw std::invalid_argument("unknown method '" + s + "' (expected teacher, dfad, random or kd)");
}

/// Everything needed to re-execute one experiment.
struct RunSpec {
  std::string command = "distill";
  Method method = Method::dfad;
  std::string dataset_root;
  std::string dataset = "MUTAG";
  FeaturePolicy features = FeaturePolicy::node_label_onehot;
  std::size_t cap_degree = 64;
  std::size_t toy_graphs = 40;  // size of the built-in synthetic set
  GnnConfig teacher{Family::gin, 5, 128, 1, 2, 4};
  std::string teacher_dir;  // per-fold checkpoints fold<i>.json
  TeacherOptions teacher_training{};
  GnnConfig student{Family::gin, 5, 32, 1, 2, 4};
  GeneratorConfig generator{};
  bool auto_node_count = true;  // N = round(avg nodes of the training split)
  DistillConfig distill{};
  double fraction = 1.0;
  std::size_t folds = 10;
  std::vector<std::size_t> only_folds;  // empty: all folds
  std::size_t workers = 1;
  std::string out;
  std::uint64_t seed = 0;

  std::vector<std::size_t> fold_list() const {
    if (!only_folds.empty()) return only_folds;
    std::vector<std::size_t> f(folds);
    std::iota(f.begin(), f.end(), std::size_t{0});
    return f;
  }
};

inline void to_json(nlohmann::json& j, const TeacherOptions& t) {
  j = {{"epochs", t.epochs},
       {"lr", t.lr},
       {"weight_decay", t.weight_decay},
       {"batch_size", t.batch_size},
       {"seed", t.seed}};
}

inline void from_json(const nlohmann::json& j, TeacherOptions& t) {
  t.epochs = j.at("epochs").get<std::size_t>();
  t.lr = j.at("lr").get<double>();
  t.weight_decay = j.at("weight_decay").get<double>();
  t.batch_size = j.at("batch_size").get<std::size_t>();
  t.seed = j.value("seed", std::uint64_t{0});
}

inline void to_json(nlohmann::json& j, const RunSpec& s) {
  j = {{"command", s.command},
       {"method", to_string(s.method)},
       {"dataset_root", s.dataset_root},
       {"dataset", s.dataset},
       {"features", to_string(s.features)},
       {"cap_degree", s.cap_degree},
       {"toy_graphs", s.toy_graphs},
       {"teacher", s.teacher},
       {"teacher_dir", s.teacher_dir},
       {"teacher_training", s.teacher_training},
       {"student", s.student},
       {"generator", s.generator},
       {"auto_node_count", s.auto_node_count},
       {"distill", s.distill},
       {"fraction", s.fraction},
       {"folds", s.folds},
       {"only_folds", s.only_folds},
       {"workers", s.workers},
       {"out", s.out},
       {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, RunSpec& s) {
  RunSpec d;
  s.command = j.value("command", d.command);
  s.method = method_from_string(j.value("method", to_string(d.method)));
  s.dataset_root = j.value("dataset_root", d.dataset_root);
  s.dataset = j.value("dataset", d.dataset);
  s.features = feature_policy_from_string(j.value("features", to_string(d.features)));
  s.cap_degree = j.value("cap_degree", d.cap_degree);
  s.toy_graphs = j.value("toy_graphs", d.toy_graphs);
  s.teacher = j.contains("teacher") ? j.at("teacher").get<GnnConfig>() : d.teacher;
  s.teacher_dir = j.value("teacher_dir", d.teacher_dir);
  s.teacher_training = j.contains("teacher_training")
                           ? j.at("teacher_training").get<TeacherOptions>()
                           : d.teacher_training;
  s.student = j.contains("student") ? j.at("student").get<GnnConfig>() : d.student;
  s.generator = j.contains("generator") ? j.at("generator").get<GeneratorConfig>() : d.generator;
  s.auto_node_count = j.value("auto_node_count", d.auto_node_count);
  s.distill = j.contains("distill") ? j.at("distill").get<DistillConfig>() : d.distill;
  s.fraction = j.value("fraction", d.fraction);
  s.folds = j.value("folds", d.folds);
  s.only_folds = j.value("only_folds", d.only_folds);
  s.workers = j.value("workers", d.workers);
  s.out = j.value("out", d.out);
  s.seed = j.value("seed", d.seed);
}

/// Seed for fold `f` of a run seeded with `seed`.
inline std::uint64_t fold_seed(std::uint64_t seed, std::size_t fold) {
  return seed * 1000003ULL + 7919ULL * (fold + 1);
}

/// Parsed dataset with features and its fold plan.
struct PreparedData {
  Dataset data;
  FoldPlan plan;

  std::vector<Graph> train(std::size_t f) const { return data.subset(plan.train_indices(f)); }
  std::vector<Graph> val(std::size_t f) const { return data.subset(plan.folds.at(f)); }
};

inline PreparedData prepare_data(const RunSpec& spec) {
  PreparedData p;
  if (spec.dataset == kToyDataset && spec.dataset_root.empty()) {
    p.data = make_cycles_vs_stars(spec.toy_graphs, spec.seed);
  } else {
    if (spec.dataset_root.empty()) {
      throw DatasetError("no dataset root given (use --dataset-root or DFAD_DATA_ROOT)");
    }
    std::filesystem::path root = std::filesystem::path(spec.dataset_root);
    if (std::filesystem::exists(root / spec.dataset / (spec.dataset + "_A.txt"))) {
      root /= spec.dataset;
    }
    p.data = build_features(parse_tu_dataset(root, spec.dataset), spec.features, spec.cap_degree);
  }
  p.plan = stratified_kfold(p.data, spec.folds, spec.seed);
  for (auto f : spec.fold_list()) {
    if (f >= spec.folds) {
      throw std::invalid_argument("fold index " + std::to_string(f) + " outside 0.." +
                                  std::to_string(spec.folds - 1));
    }
  }
  return p;
}

/// Copies dataset dimensions into a model config.
inline GnnConfig with_dims(GnnConfig c, const Dataset& d) {
  c.input_dim = d.feature_dim;
  c.num_classes = d.num_classes;
  return c;
}

inline std::size_t rounded_avg_nodes(std::span<const Graph> graphs) {
  double s = 0.0;
  for (const auto& g : graphs) s += static_cast<double>(g.n);
  return std::max<std::size_t>(2, static_cast<std::size_t>(std::llround(s / double(graphs.size()))));
}

struct FoldResult {
  std::size_t fold = 0;
  double accuracy = 0.0;
  double teacher_accuracy = 0.0;
  std::size_t node_count = 0;  // generator N (0 when unused)
  double wall_seconds = 0.0;
  TrainLog log;
};

struct ExperimentReport {
  std::string command;
  Method method = Method::dfad;
  std::string dataset;
  std::string loss;
  double fraction = 1.0;
  std::vector<FoldResult> folds;
  std::size_t teacher_params = 0;
  std::size_t student_params = 0;
  nlohmann::json config;
  double total_seconds = 0.0;

  static double mean_of(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  }
  /// Population standard deviation.
  static double std_of(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double m = mean_of(v), s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size()));
  }

  std::vector<double> accuracies() const {
    std::vector<double> v;
    for (const auto& f : folds) v.push_back(f.accuracy);
    return v;
  }
  std::vector<double> teacher_accuracies() const {
    std::vector<double> v;
    for (const auto& f : folds) v.push_back(f.teacher_accuracy);
    return v;
  }
  double mean() const { return mean_of(accuracies()); }
  double stddev() const { return std_of(accuracies()); }
  double teacher_mean() const { return mean_of(teacher_accuracies()); }
  double relative_percent() const {
    double t = teacher_mean();
    return t > 0.0 ? 100.0 * mean() / t : 0.0;
  }
  double param_ratio_percent() const {
    return teacher_params ? 100.0 * double(student_params) / double(teacher_params) : 0.0;
  }

  nlohmann::json to_json() const {
    nlohmann::json fj = nlohmann::json::array();
    for (const auto& f : folds) {
      nlohmann::json e{{"fold", f.fold},
                       {"accuracy", f.accuracy},
                       {"teacher_accuracy", f.teacher_accuracy},
                       {"wall_seconds", f.wall_seconds}};
      if (f.node_count) e["node_count"] = f.node_count;
      if (!f.log.student_loss.empty()) {
        e["student_steps"] = f.log.student_steps;
        e["final_student_loss"] = f.log.student_loss.back();
      }
      if (!f.log.generator_loss.empty()) {
        e["generator_steps"] = f.log.generator_steps;
        e["generator_loss"] = f.log.generator_loss;
      }
      fj.push_back(std::move(e));
    }
    return {{"schema", kReportSchema},
            {"version", kReportVersion},
            {"command", command},
            {"method", to_string(method)},
            {"dataset", dataset},
            {"loss", loss},
            {"fraction", fraction},
            {"folds", fj},
            {"mean", mean()},
            {"std", stddev()},
            {"teacher_mean", teacher_mean()},
            {"relative_percent", relative_percent()},
            {"teacher_params", teacher_params},
            {"student_params", student_params},
            {"param_ratio_percent", param_ratio_percent()},
            {"config", config},
            {"timing", {{"total_seconds", total_seconds}}}};
  }

  /// Aligned plain-text summary.
  std::string text() const {
    std::ostringstream o;
    o << std::fixed;
    o << "method   " << to_string(method) << "\n";
    o << "dataset  " << dataset << "\n";
    if (!loss.empty()) o << "loss     " << loss << "\n";
    if (method == Method::kd) o << "fraction " << std::setprecision(3) << fraction << "\n";
    o << "\nfold  accuracy  teacher\n";
    for (const auto& f : folds) {
      o << std::setw(4) << f.fold << "  " << std::setprecision(4) << std::setw(8) << f.accuracy
        << "  " << std::setw(7) << f.teacher_accuracy << "\n";
    }
    o << "\nmean     " << std::setprecision(1) << 100.0 * mean() << " +- " << 100.0 * stddev()
      << "\n";
    o << "teacher  " << 100.0 * teacher_mean() << "\n";
    if (method != Method::teacher) {
      o << "relative " << relative_percent() << "%\n";
      o << "params   " << student_params << " / " << teacher_params << " ("
        << param_ratio_percent() << "%)\n";
    } else {
      o << "params   " << teacher_params << "\n";
    }
    o << "time     " << std::setprecision(1) << total_seconds << " s\n";
    return o.str();
  }
};

/// Structural and arithmetic checks of a serialised report. Returns the
/// list of problems; empty means valid.
inline std::vector<std::string> validate_report(const nlohmann::json& r) {
  std::vector<std::string> bad;
  auto need = [&](const char* key, auto pred, const char* what) {
    if (!r.contains(key)) {
      bad.push_back(std::string("missing '") + key + "'");
      return false;
    }
    if (!pred(r.at(key))) {
      bad.push_back(std::string("'") + key + "' must be " + what);
      return false;
    }
    return true;
  };
  auto is_num = [](const nlohmann::json& v) { return v.is_number(); };
  auto is_str = [](const nlohmann::json& v) { return v.is_string(); };
  auto is_uint = [](const nlohmann::json& v) { return v.is_number_unsigned(); };
  auto is_unit = [](const nlohmann::json& v) {
    return v.is_number() && v.get<double>() >= 0.0 && v.get<double>() <= 1.0;
  };
  if (need("schema", is_str, "a string") && r.at("schema") != kReportSchema) {
    bad.push_back("unknown schema " + r.at("schema").dump());
  }
  if (need("version", is_uint, "an unsigned integer") && r.at("version") != kReportVersion) {
    bad.push_back("unsupported version " + r.at("version").dump());
  }
  need("command", is_str, "a string");
  if (need("method", is_str, "a string")) {
    try {
      method_from_string(r.at("method").get<std::string>());
    } catch (const std::exception& e) {
      bad.push_back(e.what());
    }
  }
  need("dataset", is_str, "a string");
  need("loss", is_str, "a string");
  need("fraction", [](const nlohmann::json& v) {
    return v.is_number() && v.get<double>() > 0.0 && v.get<double>() <= 1.0;
  }, "a number in (0, 1]");
  need("mean", is_unit, "a number in [0, 1]");
  need("std", is_num, "a number");
  need("teacher_mean", is_unit, "a number in [0, 1]");
  need("relative_percent", is_num, "a number");
  need("teacher_params", is_uint, "an unsigned integer");
  need("student_params", is_uint, "an unsigned integer");
  need("param_ratio_percent", is_num, "a number");
  need("config", [](const nlohmann::json& v) { return v.is_object(); }, "an object");
  need("timing", [](const nlohmann::json& v) {
    return v.is_object() && v.contains("total_seconds") && v.at("total_seconds").is_number();
  }, "an object with total_seconds");
  if (!need("folds", [](const nlohmann::json& v) { return v.is_array() && !v.empty(); },
            "a non-empty array")) {
    return bad;
  }
  std::vector<double> acc, tacc;
  for (const auto& f : r.at("folds")) {
    if (!f.is_object() || !f.contains("fold") || !f.at("fold").is_number_unsigned() ||
        !f.contains("accuracy") || !is_unit(f.at("accuracy")) ||
        !f.contains("teacher_accuracy") || !is_unit(f.at("teacher_accuracy")) ||
        !f.contains("wall_seconds") || !f.at("wall_seconds").is_number()) {
      bad.push_back("malformed fold entry " + f.dump());
      continue;
    }
    acc.push_back(f.at("accuracy").get<double>());
    tacc.push_back(f.at("teacher_accuracy").get<double>());
  }
  if (!bad.empty()) return bad;
  auto close = [](double a, double b) { return std::fabs(a - b) <= 1e-12; };
  double m = ExperimentReport::mean_of(acc), t = ExperimentReport::mean_of(tacc);
  if (!close(m, r.at("mean").get<double>())) bad.push_back("mean disagrees with folds");
  if (!close(ExperimentReport::std_of(acc), r.at("std").get<double>())) {
    bad.push_back("std disagrees with folds");
  }
  if (!close(t, r.at("teacher_mean").get<double>())) {
    bad.push_back("teacher_mean disagrees with folds");
  }
  double rel = t > 0.0 ? 100.0 * m / t : 0.0;
  if (!close(rel, r.at("relative_percent").get<double>())) {
    bad.push_back("relative_percent disagrees with mean / teacher_mean");
  }
  auto tp = r.at("teacher_params").get<std::size_t>();
  auto sp = r.at("student_params").get<std::size_t>();
  double ratio = tp ? 100.0 * double(sp) / double(tp) : 0.0;
  if (!close(ratio, r.at("param_ratio_percent").get<double>())) {
    bad.push_back("param_ratio_percent disagrees with parameter counts");
  }
  return bad;
}

/// Copy of a serialised report with wall-clock fields removed, for
/// comparing reruns.
inline nlohmann::json strip_timing(nlohmann::json r) {
  r.erase("timing");
  if (r.contains("folds")) {
    for (auto& f : r["folds"]) f.erase("wall_seconds");
  }
  return r;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

/// Writes report.json, report.txt and runspec.json under `dir`.
inline void write_report(const std::filesystem::path& dir, const ExperimentReport& rep,
                         const RunSpec& spec) {
  write_text(dir / "report.json", rep.to_json().dump(2) + "\n");
  write_text(dir / "report.txt", rep.text());
  write_text(dir / "runspec.json", nlohmann::json(spec).dump(2) + "\n");
}

using ProgressFn = std::function<void(const std::string&)>;

namespace detail {

/// Runs `job(i)` for i in [0, n) on up to `workers` threads. Each thread
/// owns its own tape; results are written to caller-provided slots.
inline void parallel_for(std::size_t n, std::size_t workers,
                         const std::function<void(std::size_t)>& job) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          job(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

struct TeacherRun {
  ExperimentReport report;
  std::vector<Model> teachers;  // indexed like report.folds
};

/// Trains one teacher per fold (train split, validated on the held-out
/// fold). Checkpoints go to `<spec.out>/fold<i>.json` when `spec.out` is set.
inline TeacherRun run_teachers(const RunSpec& spec, const PreparedData& data,
                               const ProgressFn& progress = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  const GnnConfig cfg = with_dims(spec.teacher, data.data);
  auto folds = spec.fold_list();
  TeacherRun run;
  run.report.command = spec.command;
  run.report.method = Method::teacher;
  run.report.dataset = data.data.name;
  run.report.loss = "CE";
  run.report.teacher_params = param_count(cfg);
  run.report.student_params = run.report.teacher_params;
  run.report.config = spec;
  run.report.folds.resize(folds.size());
  run.teachers.resize(folds.size());
  std::mutex log_mutex;
  detail::parallel_for(folds.size(), spec.workers, [&](std::size_t i) {
    const auto f0 = std::chrono::steady_clock::now();
    std::size_t f = folds[i];
    TeacherOptions opt = spec.teacher_training;
    opt.seed = fold_seed(spec.seed, f);
    auto train = data.train(f);
    auto val = data.val(f);
    TeacherResult r = pretrain_teacher(cfg, train, val, opt);
    Model m{cfg, r.params};
    FoldResult fr;
    fr.fold = f;
    fr.accuracy = evaluate(m, val);
    fr.teacher_accuracy = fr.accuracy;
    fr.wall_seconds = detail::seconds_since(f0);
    if (!spec.out.empty()) {
      write_checkpoint(std::filesystem::path(spec.out) / ("fold" + std::to_string(f) + ".json"),
                       to_checkpoint(m));
    }
    run.report.folds[i] = fr;
    run.teachers[i] = std::move(m);
    if (progress) {
      std::lock_guard lock(log_mutex);
      std::ostringstream o;
      o << "teacher fold " << f << ": accuracy " << std::fixed << std::setprecision(4)
        << fr.accuracy << " (best epoch " << r.best_epoch << ", " << std::setprecision(1)
        << fr.wall_seconds << " s)";
      progress(o.str());
    }
  });
  run.report.total_seconds = detail::seconds_since(t0);
  return run;
}

/// Loads `<dir>/fold<i>.json` for every fold of the spec.
inline std::vector<Model> load_teachers(const RunSpec& spec) {
  std::vector<Model> out;
  for (auto f : spec.fold_list()) {
    auto path = std::filesystem::path(spec.teacher_dir) / ("fold" + std::to_string(f) + ".json");
    if (!std::filesystem::exists(path)) {
      throw CheckpointError("missing teacher checkpoint for fold " + std::to_string(f) + ": " +
                            path.string());
    }
    out.push_back(model_from_checkpoint(read_checkpoint(path)));
  }
  return out;
}

struct StudentRun {
  ExperimentReport report;
  std::vector<DistillResult> results;  // indexed like report.folds
};

/// Trains one student per fold with `spec.method` (dfad, random or kd)
/// against the given per-fold teachers and evaluates it on the held-out
/// fold. The last-epoch student is reported.
inline StudentRun run_students(const RunSpec& spec, const PreparedData& data,
                               std::span<const Model> teachers, const ProgressFn& progress = {}) {
  if (spec.method == Method::teacher) {
    throw std::invalid_argument("run_students: method must be dfad, random or kd");
  }
  auto folds = spec.fold_list();
  if (teachers.size() != folds.size()) {
    throw std::invalid_argument("run_students: " + std::to_string(teachers.size()) +
                                " teachers for " + std::to_string(folds.size()) + " folds");
  }
  const auto t0 = std::chrono::steady_clock::now();
  const GnnConfig scfg = with_dims(spec.student, data.data);
  StudentRun run;
  run.report.command = spec.command;
  run.report.method = spec.method;
  run.report.dataset = data.data.name;
  run.report.loss = to_string(spec.distill.loss);
  run.report.fraction = spec.method == Method::kd ? spec.fraction : 1.0;
  run.report.teacher_params = param_count(teachers[0].config);
  run.report.student_params = param_count(scfg);
  run.report.config = spec;
  run.report.folds.resize(folds.size());
  run.results.resize(folds.size());
  std::mutex log_mutex;
  detail::parallel_for(folds.size(), spec.workers, [&](std::size_t i) {
    const auto f0 = std::chrono::steady_clock::now();
    std::size_t f = folds[i];
    const Model& teacher = teachers[i];
    auto train = data.train(f);
    auto val = data.val(f);
    DistillConfig dc = spec.distill;
    dc.seed = fold_seed(spec.seed, f);
    FoldResult fr;
    fr.fold = f;
    DistillResult res;
    if (spec.method == Method::kd) {
      res = kd_baseline(teacher, scfg, train, spec.fraction, dc, val);
    } else {
      GeneratorConfig gc = spec.generator;
      gc.feature_dim = data.data.feature_dim;
      if (spec.auto_node_count) gc.node_count = rounded_avg_nodes(train);
      fr.node_count = gc.node_count;
      res = spec.method == Method::dfad ? distill(teacher, scfg, gc, dc, val)
                                        : random_baseline(teacher, scfg, gc, dc, val);
    }
    fr.accuracy = evaluate({scfg, res.student}, val);
    fr.teacher_accuracy = evaluate(teacher, val);
    fr.log = res.log;
    fr.wall_seconds = detail::seconds_since(f0);
    if (!spec.out.empty()) {
      auto dir = std::filesystem::path(spec.out) / ("fold" + std::to_string(f));
      write_checkpoint(dir / "student.json", to_checkpoint(Model{scfg, res.student}));
      if (!res.generator.empty()) {
        GeneratorConfig gc = spec.generator;
        gc.feature_dim = data.data.feature_dim;
        gc.node_count = fr.node_count ? fr.node_count : gc.node_count;
        write_checkpoint(dir / "generator.json", to_checkpoint(Generator{gc, res.generator}));
      }
      write_text(dir / "trainlog.jsonl", res.log.to_jsonl());
    }
    run.report.folds[i] = fr;
    run.results[i] = std::move(res);
    if (progress) {
      std::lock_guard lock(log_mutex);
      std::ostringstream o;
      o << to_string(spec.method) << " fold " << f << ": accuracy " << std::fixed
        << std::setprecision(4) << fr.accuracy << " (teacher " << fr.teacher_accuracy << ", "
        << std::setprecision(1) << fr.wall_seconds << " s)";
      progress(o.str());
    }
  });
  run.report.total_seconds = detail::seconds_since(t0);
  return run;
}

// ---------------------------------------------------------------------------
// Generated-graph export

/// Undirected DOT description of graph `index` of a generated batch.
inline std::string to_dot(const GeneratedBatch& g, std::size_t index, const std::string& name) {
  const std::size_t n = g.a_hard.dim(1);
  std::ostringstream o;
  o << "graph " << name << " {\n";
  for (std::size_t i = 0; i < n; ++i) o << "  n" << i << ";\n";
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (g.a_hard.at((index * n + i) * n + j) > 0.0) o << "  n" << i << " -- n" << j << ";\n";
  o << "}\n";
  return o.str();
}

/// One JSON object: {"index", "nodes", "edges": [[i, j], ...] (i < j),
/// "features": [[...], ...]}.
inline nlohmann::json to_json_row(const GeneratedBatch& g, std::size_t index) {
  const std::size_t n = g.a_hard.dim(1), t = g.features.dim(2);
  nlohmann::json edges = nlohmann::json::array(), feats = nlohmann::json::array();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (g.a_hard.at((index * n + i) * n + j) > 0.0) edges.push_back({i, j});
    }
    std::vector<double> row(t);
    for (std::size_t c = 0; c < t; ++c) row[c] = g.features.at((index * n + i) * t + c);
    feats.push_back(row);
  }
  return {{"index", index}, {"nodes", n}, {"edges", edges}, {"features", feats}};
}

/// Dense 0/1 adjacency rebuilt from a to_json_row() object.
inline std::vector<double> adjacency_from_json_row(const nlohmann::json& row) {
  const auto n = row.at("nodes").get<std::size_t>();
  std::vector<double> a(n * n, 0.0);
  for (const auto& e : row.at("edges")) {
    auto i = e.at(0).get<std::size_t>(), j = e.at(1).get<std::size_t>();
    if (i >= n || j >= n) throw std::out_of_range("edge endpoint outside node range");
    a[i * n + j] = a[j * n + i] = 1.0;
  }
  return a;
}

// ---------------------------------------------------------------------------
// Parameter comparison

inline std::string param_table(const GnnConfig& teacher, const GnnConfig& student) {
  std::size_t m = param_count(teacher), s = param_count(student);
  std::ostringstream o;
  o << std::left << std::setw(10) << "role" << std::setw(14) << "model" << std::right
    << std::setw(12) << "params" << std::setw(10) << "ratio" << "\n";
  o << std::fixed << std::setprecision(1);
  o << std::left << std::setw(10) << "teacher" << std::setw(14) << teacher.label() << std::right
    << std::setw(12) << m << std::setw(9) << 100.0 << "%\n";
  o << std::left << std::setw(10) << "student" << std::setw(14) << student.label() << std::right
    << std::setw(12) << s << std::setw(9) << 100.0 * double(s) / double(m) << "%\n";
  return o.str();
}

}  // namespace dfad
