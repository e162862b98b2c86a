// hvcm: fit, score, evaluate and train grouped class-density OOD detectors.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hvcm/hvcm.hpp"
#include "hvcm/synthetic.hpp"

namespace fs = std::filesystem;
using namespace hvcm;

namespace {

struct GlobalOptions {
  bool deterministic = false;
  std::optional<std::uint64_t> seed;

  std::size_t threads() const { return deterministic ? 1 : thread_budget(); }
};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

FeatureDataset load_checked(const fs::path& path) {
  auto ds = load_features(path);
  const auto report = validate(ds);
  if (!report.clean()) {
    fail(path.string() + ": " + std::to_string(report.nonfinite_rows.size()) +
         " rows with non-finite values, " + std::to_string(report.out_of_range_rows.size()) +
         " rows with out-of-range labels");
  }
  return ds;
}

std::vector<std::vector<double>> read_weight_file(const fs::path& path, std::size_t classes, int groups) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    fail(path.string() + ": " + e.what());
  }
  std::vector<std::vector<double>> w;
  try {
    w = j.get<std::vector<std::vector<double>>>();
  } catch (const nlohmann::json::exception&) {
    fail(path.string() + ": expected an array of per-class weight arrays");
  }
  require(w.size() == classes, path.string() + ": expected " + std::to_string(classes) + " weight rows");
  for (const auto& row : w) {
    require(row.size() == static_cast<std::size_t>(groups),
            path.string() + ": every weight row needs " + std::to_string(groups) + " entries");
  }
  return w;
}

// Column `name` of a headed CSV file.
std::vector<double> read_score_column(const fs::path& path, const std::string& name = "score") {
  std::istringstream in(io::read_file(path));
  std::string line;
  if (!std::getline(in, line)) fail(path.string() + ": empty score file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = detail::split_fields(line);
  const auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) fail(path.string() + ": no '" + name + "' column");
  const auto col = static_cast<std::size_t>(it - header.begin());
  std::vector<double> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = detail::split_fields(line);
    double v = 0;
    if (fields.size() != header.size() || !detail::parse_number(fields[col], v)) {
      fail(path.string() + ": malformed row at line " + std::to_string(line_no));
    }
    out.push_back(v);
  }
  return out;
}

// ---------------------------------------------------------------------------

struct FitArgs {
  fs::path features, out, weights_file;
  int groups = 32;
  std::string ridge = "auto";
  std::string stats_mode = "raw";
  std::string weights = "uniform";
  double temperature = 1.0;
};

int cmd_fit(const FitArgs& a, const GlobalOptions& g) {
  const auto ds = load_checked(a.features);
  require(ds.has_labels, a.features.string() + ": fit needs labeled features");
  require(ds.c_max >= 1, a.features.string() + ": no classes declared");

  ModelConfig cfg;
  cfg.groups = a.groups;
  cfg.attr_dim = ds.dim;
  cfg.input_dim = ds.dim;
  require(a.groups >= 1 && ds.dim % static_cast<std::uint32_t>(a.groups) == 0,
          "G must divide d (G=" + std::to_string(a.groups) + ", d=" + std::to_string(ds.dim) + ")");
  if (a.ridge != "auto") {
    double r = 0;
    require(detail::parse_number(std::string_view(a.ridge), r) && r > 0.0,
            "--ridge must be 'auto' or a positive number");
    cfg.ridge = RidgePolicy::fixed(r);
  }
  cfg.stats = parse_stats_mode(a.stats_mode);
  require(a.temperature > 0.0, "--temperature must be positive");
  cfg.softmax_temperature = a.temperature;
  cfg.encoder.head = ProjectionHead::identity(ds.dim);

  std::vector<std::vector<GroupedAttributes>> per_class(ds.c_max);
  for (std::size_t i = 0; i < ds.n; ++i) {
    const auto l = ds.labels[i];
    if (l >= 0) per_class[l].push_back(model_groups(cfg, to_vector(ds.row(i))));
  }
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    require(!per_class[c].empty(), "class " + std::to_string(c) + " has zero samples");
  }
  std::vector<std::vector<double>> weights;
  if (a.weights == "uniform") {
    weights.assign(ds.c_max, uniform_weights(a.groups));
  } else {
    weights = read_weight_file(a.weights, ds.c_max, a.groups);
  }

  const auto model = freeze(per_class, weights, cfg, g.threads());
  save_model(model, a.out);
  for (const auto& cm : model.classes) {
    double lo = cm.components.front().ridge, hi = lo;
    for (const auto& comp : cm.components) {
      lo = std::min(lo, comp.ridge);
      hi = std::max(hi, comp.ridge);
    }
    std::cout << "class=" << cm.class_id << " n=" << per_class[cm.class_id].size()
              << " ridge_min=" << num(lo) << " ridge_max=" << num(hi) << "\n";
  }
  std::cout << "wrote " << a.out.string() << " (C=" << model.class_count() << ", G=" << a.groups
            << ", d=" << ds.dim << ")\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct ScoreArgs {
  fs::path model, features, out;
  bool per_class = false;
};

int cmd_score(const ScoreArgs& a, const GlobalOptions& g) {
  const auto model = load_model(a.model);
  const auto ds = load_checked(a.features);
  require(ds.dim == model.config.input_dim,
          "feature dimension " + std::to_string(ds.dim) + " does not match model input " +
              std::to_string(model.config.input_dim));

  const auto c_count = model.class_count();
  std::vector<DatasetScore> best(ds.n);
  std::vector<std::vector<double>> per(ds.n);
  parallel_for(ds.n, [&](std::size_t i) {
    const auto ga = feature_groups(model.config, to_vector(ds.row(i)));
    best[i] = dataset_score(model, ga);
    if (a.per_class) {
      per[i].reserve(c_count);
      for (const auto& cm : model.classes) per[i].push_back(class_score(cm, ga));
    }
  }, g.threads());

  std::string out = "index,score,argmax_class";
  if (a.per_class) {
    for (std::size_t c = 0; c < c_count; ++c) out += ",class_" + std::to_string(c);
  }
  out += "\n";
  for (std::size_t i = 0; i < ds.n; ++i) {
    out += std::to_string(i) + "," + num(best[i].score) + "," + std::to_string(best[i].argmax_class);
    for (double s : per[i]) out += "," + num(s);
    out += "\n";
  }
  io::write_file_atomic(a.out, out);
  std::cout << "scored " << ds.n << " rows -> " << a.out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  fs::path ind, ood, out, dump;
  double tpr = 0.95;
  int sweep = 0;
};

int cmd_eval(const EvalArgs& a, const GlobalOptions&) {
  const auto ind = read_score_column(a.ind);
  const auto ood = read_score_column(a.ood);
  const auto scores = ScoreSet::from(ind, ood);
  require(a.sweep == 0 || a.sweep >= 2, "--sweep must be 0 or at least 2");
  const auto report = metric_report(scores, a.tpr, a.sweep);
  const auto text = report.dump(2) + "\n";
  std::cout << text;
  if (!a.out.empty()) io::write_file_atomic(a.out, text);
  if (!a.dump.empty()) {
    std::string csv = "score,is_ind\n";
    for (const auto& e : scores.entries) csv += num(e.score) + "," + (e.is_ind ? "1" : "0") + "\n";
    io::write_file_atomic(a.dump, csv);
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  fs::path features, config, log, out;
};

int cmd_train_toy(const TrainArgs& a, const GlobalOptions& g) {
  TrainConfig cfg;
  if (!a.config.empty()) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(io::read_file(a.config));
    } catch (const nlohmann::json::exception& e) {
      fail(a.config.string() + ": " + e.what());
    }
    cfg = config_from_json(j);
  }
  if (g.seed) cfg.seed = *g.seed;
  validate(cfg);

  const auto ds = load_checked(a.features);
  require(ds.has_labels, a.features.string() + ": training needs labeled features");
  auto state = init_state(cfg, static_cast<int>(ds.dim), static_cast<int>(ds.c_max));

  std::string log;
  double first = 0.0, last = 0.0;
  std::uint64_t steps = 0;
  try {
    train(state, ds, cfg, [&](const StepReport& r) {
      if (steps == 0) first = r.loss.total;
      last = r.loss.total;
      ++steps;
      log += to_json(r).dump() + "\n";
    });
  } catch (const Error& e) {
    if (!a.log.empty()) io::write_file_atomic(a.log, log);
    throw;
  }
  if (!a.log.empty()) io::write_file_atomic(a.log, log);

  const auto model = export_to_density(state, ds);
  save_model(model, a.out);
  std::cout << "steps=" << steps << " initial_loss=" << num(first) << " final_loss=" << num(last) << "\n";
  std::cout << "wrote " << a.out.string() << " (C=" << model.class_count() << ", G=" << cfg.groups
            << ", d=" << cfg.attr_dim << ")\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct RankArgs {
  fs::path model, candidates, out;
  int bins = 9;
};

int cmd_rank_ood(const RankArgs& a, const GlobalOptions&) {
  const auto model = load_model(a.model);
  const auto ds = load_checked(a.candidates);
  require(ds.has_labels, a.candidates.string() + ": candidates must be labeled by class");
  require(ds.dim == model.config.input_dim, "candidate dimension does not match model input");

  std::vector<Vector> ind_centers;
  for (const auto& cm : model.classes) ind_centers.push_back(cm.concatenated_centers());

  std::map<int, Vector> sums;
  std::map<int, std::size_t> counts;
  for (std::size_t i = 0; i < ds.n; ++i) {
    const auto l = ds.labels[i];
    if (l < 0) continue;
    const Vector attr = feature_groups(model.config, to_vector(ds.row(i))).concatenate();
    auto [it, inserted] = sums.try_emplace(l, Vector::Zero(attr.size()));
    it->second += attr;
    ++counts[l];
  }
  for (auto& [id, v] : sums) v /= static_cast<double>(counts[id]);

  const auto ranking = rank_ood_classes(ind_centers, sums, a.bins);
  nlohmann::json j;
  j["bins"] = ranking.bins;
  auto order = nlohmann::json::array();
  for (const auto& r : ranking.order) order.push_back({{"class", r.class_id}, {"distance", r.distance}});
  j["ranking"] = order;
  io::write_file_atomic(a.out, j.dump(2) + "\n");
  std::cout << "ranked " << ranking.order.size() << " candidate classes into " << a.bins << " bins -> "
            << a.out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct ClassifyArgs {
  fs::path model, features, out;
};

int cmd_classify(const ClassifyArgs& a, const GlobalOptions& g) {
  const auto model = load_model(a.model);
  const auto ds = load_checked(a.features);
  require(ds.dim == model.config.input_dim, "feature dimension does not match model input");

  std::vector<int> pred(ds.n);
  parallel_for(ds.n, [&](std::size_t i) {
    const Vector attr = model.config.encoder.encode(to_vector(ds.row(i)));
    if (attr.norm() == 0.0) fail("row " + std::to_string(i) + " has a zero-norm attribute vector");
    pred[i] = classify_cosine(model, attr);
  }, g.threads());

  std::string out = "index,predicted_class\n";
  std::size_t labeled = 0, hits = 0;
  for (std::size_t i = 0; i < ds.n; ++i) {
    out += std::to_string(i) + "," + std::to_string(pred[i]) + "\n";
    if (ds.has_labels && ds.labels[i] >= 0) {
      ++labeled;
      if (ds.labels[i] == pred[i]) ++hits;
    }
  }
  io::write_file_atomic(a.out, out);
  if (labeled > 0) {
    std::cout << "accuracy=" << num(static_cast<double>(hits) / static_cast<double>(labeled)) << " ("
              << hits << "/" << labeled << ")\n";
  }
  std::cout << "classified " << ds.n << " rows -> " << a.out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct ValidateArgs {
  fs::path features;
};

int cmd_validate(const ValidateArgs& a, const GlobalOptions&) {
  const auto ds = load_features(a.features);
  const auto report = validate(ds);
  nlohmann::json j;
  j["n"] = ds.n;
  j["dim"] = ds.dim;
  j["c_max"] = ds.c_max;
  j["has_labels"] = ds.has_labels;
  j["nonfinite_rows"] = report.nonfinite_rows;
  j["out_of_range_rows"] = report.out_of_range_rows;
  nlohmann::json counts = nlohmann::json::object();
  for (const auto& [c, n] : report.class_counts) counts[std::to_string(c)] = n;
  j["class_counts"] = counts;
  j["ood_count"] = report.ood_count;
  j["clean"] = report.clean();
  std::cout << j.dump(2) << "\n";
  return report.clean() ? 0 : 2;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  fs::path train, test, ood;
  std::size_t per_class = 100;
  std::size_t ood_count = 300;
};

int cmd_synth(const SynthArgs& a, const GlobalOptions& g) {
  const auto seed = g.seed.value_or(0);
  const auto task = synthetic::BlobTask::standard();
  save_features(task.ind(a.per_class, seed * 3 + 1), a.train);
  if (!a.test.empty()) save_features(task.ind(a.per_class, seed * 3 + 2), a.test);
  if (!a.ood.empty()) save_features(task.ood(a.ood_count, seed * 3 + 3), a.ood);
  std::cout << "wrote synthetic blob task (seed " << seed << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Grouped class-density out-of-distribution detection"};
  app.require_subcommand(1);
  app.fallthrough();

  GlobalOptions global;
  std::uint64_t seed = 0;
  app.add_flag("--deterministic", global.deterministic, "Single-threaded, fixed-order execution");
  auto* seed_opt = app.add_option("--seed", seed, "Random seed");

  FitArgs fit;
  auto* fit_cmd = app.add_subcommand("fit", "Fit per-class grouped Gaussians from labeled features");
  fit_cmd->add_option("--features", fit.features, "Labeled feature file (.hvcf or .csv)")->required();
  fit_cmd->add_option("--groups", fit.groups, "Number of attribute groups G")->capture_default_str();
  fit_cmd->add_option("--ridge", fit.ridge, "'auto' or a fixed ridge value")->capture_default_str();
  fit_cmd->add_option("--stats-mode", fit.stats_mode, "raw or softmax")->capture_default_str();
  fit_cmd->add_option("--temperature", fit.temperature, "Softmax temperature for --stats-mode softmax")
      ->capture_default_str();
  fit_cmd->add_option("--weights", fit.weights, "'uniform' or a JSON file of per-class weight rows")
      ->capture_default_str();
  fit_cmd->add_option("--out", fit.out, "Model file to write")->required();

  ScoreArgs score;
  auto* score_cmd = app.add_subcommand("score", "Score features against a model");
  score_cmd->add_option("--model", score.model)->required();
  score_cmd->add_option("--features", score.features)->required();
  score_cmd->add_option("--out", score.out, "CSV: index,score,argmax_class")->required();
  score_cmd->add_flag("--per-class", score.per_class, "Append one score column per class");

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "AUROC / FPR report from InD and OOD score files");
  eval_cmd->add_option("--ind", eval.ind)->required();
  eval_cmd->add_option("--ood", eval.ood)->required();
  eval_cmd->add_option("--tpr", eval.tpr)->capture_default_str();
  eval_cmd->add_option("--sweep", eval.sweep, "Threshold sweep points (0 disables)")->capture_default_str();
  eval_cmd->add_option("--out", eval.out, "Also write the JSON report here");
  eval_cmd->add_option("--dump", eval.dump, "Write the merged score,is_ind CSV here");

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train-toy", "Jointly train a toy encoder and export a model");
  train_cmd->add_option("--features", train_args.features)->required();
  train_cmd->add_option("--config", train_args.config, "Training config JSON");
  train_cmd->add_option("--log", train_args.log, "JSON-lines step log");
  train_cmd->add_option("--out", train_args.out)->required();

  RankArgs rank;
  auto* rank_cmd = app.add_subcommand("rank-ood", "Order candidate classes near-to-far and bin them");
  rank_cmd->add_option("--ind-model", rank.model)->required();
  rank_cmd->add_option("--candidates", rank.candidates)->required();
  rank_cmd->add_option("--bins", rank.bins)->capture_default_str();
  rank_cmd->add_option("--out", rank.out)->required();

  ClassifyArgs classify;
  auto* classify_cmd = app.add_subcommand("classify", "Cosine classification against class centers");
  classify_cmd->add_option("--model", classify.model)->required();
  classify_cmd->add_option("--features", classify.features)->required();
  classify_cmd->add_option("--out", classify.out)->required();

  ValidateArgs validate_args;
  auto* validate_cmd = app.add_subcommand("validate", "Report defects in a feature file");
  validate_cmd->add_option("--features", validate_args.features)->required();

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "Write the synthetic blob task");
  synth_cmd->add_option("--train", synth.train)->required();
  synth_cmd->add_option("--test", synth.test);
  synth_cmd->add_option("--ood", synth.ood);
  synth_cmd->add_option("--per-class", synth.per_class)->capture_default_str();
  synth_cmd->add_option("--ood-count", synth.ood_count)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  if (seed_opt->count() > 0) global.seed = seed;

  try {
    if (*fit_cmd) return cmd_fit(fit, global);
    if (*score_cmd) return cmd_score(score, global);
    if (*eval_cmd) return cmd_eval(eval, global);
    if (*train_cmd) return cmd_train_toy(train_args, global);
    if (*rank_cmd) return cmd_rank_ood(rank, global);
    if (*classify_cmd) return cmd_classify(classify, global);
    if (*validate_cmd) return cmd_validate(validate_args, global);
    if (*synth_cmd) return cmd_synth(synth, global);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
