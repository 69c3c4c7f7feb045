// Command-line front end for the hand-distillation laboratory: rig and
// dataset generation, teacher training, knowledge distillation, evaluation,
// benchmarking, the ablation sweep, and report emission.
//
// Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
// abort during optimization.
#include <CLI11.hpp>
#include <json.hpp>

#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "handkd/binio.hpp"
#include "handkd/common.hpp"
#include "handkd/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace handkd;

namespace {

/// Bad flag values discovered after CLI11 parsing (exit code 1).
struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Relative output paths honor the optional HANDKD_OUT_DIR override.
/// Parent directories are created on demand.
fs::path resolve_out(const std::string& path) {
  fs::path p(path);
  const char* base = std::getenv("HANDKD_OUT_DIR");
  if (base && *base && p.is_relative()) p = fs::path(base) / p;
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  return p;
}

void write_text(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() +
                                     " for writing");
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::string iso_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Writes `<artifact>.manifest.json` next to the artifact: the command,
/// every resolved option, content digests of all input files, the tool
/// version, a timestamp, and the run seed. Everything except the
/// timestamp is deterministic for identical invocations.
void write_manifest(const fs::path& artifact, const std::string& command,
                    const json& options,
                    const std::vector<std::string>& inputs, uint64_t seed) {
  json j;
  j["command"] = command;
  j["options"] = options;
  json in = json::object();
  for (const std::string& p : inputs) in[p] = file_digest(p);
  j["inputs"] = in;
  j["seed"] = seed;
  j["timestamp"] = iso_timestamp();
  j["tool_version"] = kToolVersion;
  write_text(artifact.string() + ".manifest.json", j.dump(2) + "\n");
}

/// Training options come as a compact `key=value[,key=value...]` string:
/// epochs, batch, lr, beta1, beta2, eps, seed, w2d, w3d, wmano.
TrainConfig parse_train_config(const std::string& text, bool allow_seed) {
  TrainConfig cfg;
  if (text.empty()) return cfg;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    const size_t eq = item.find('=');
    if (eq == std::string::npos || eq == 0)
      throw UsageError("--config expects key=value pairs, got '" + item +
                       "'");
    const std::string key = item.substr(0, eq);
    const std::string val = item.substr(eq + 1);
    try {
      if (key == "epochs") cfg.epochs = std::stoi(val);
      else if (key == "batch") cfg.batch_size = std::stoi(val);
      else if (key == "lr") cfg.adam.learning_rate = std::stod(val);
      else if (key == "beta1") cfg.adam.beta1 = std::stod(val);
      else if (key == "beta2") cfg.adam.beta2 = std::stod(val);
      else if (key == "eps") cfg.adam.epsilon = std::stod(val);
      else if (key == "seed") {
        if (!allow_seed)
          throw UsageError("--config key 'seed' conflicts with --seed; "
                           "use the flag");
        cfg.seed = std::stoull(val);
      } else if (key == "w2d") cfg.gt_weights.w_2d = std::stod(val);
      else if (key == "w3d") cfg.gt_weights.w_3d = std::stod(val);
      else if (key == "wmano") cfg.gt_weights.w_mano = std::stod(val);
      else
        throw UsageError("--config: unknown key '" + key +
                         "' (known: epochs, batch, lr, beta1, beta2, eps, "
                         "seed, w2d, w3d, wmano)");
    } catch (const UsageError&) {
      throw;
    } catch (const std::exception&) {
      throw UsageError("--config: cannot parse value '" + val + "' for '" +
                       key + "'");
    }
  }
  return cfg;
}

std::vector<double> parse_thresholds(const std::string& text) {
  std::vector<double> out;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw UsageError("--thresholds: cannot parse '" + item + "'");
    }
    if (!(out.back() > 0.0))
      throw UsageError("--thresholds: values must be positive, got '" +
                       item + "'");
  }
  if (out.empty()) throw UsageError("--thresholds: no values given");
  return out;
}

/// Grid file: one sweep cell per line, `mode lambda gamma student_size
/// seed`, with `#` comments and blank lines allowed.
std::vector<SweepCell> parse_grid_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open grid file " + path);
  std::vector<SweepCell> grid;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string mode_name, size;
    double lambda = 0.0, gamma = 0.0;
    uint64_t seed = 0;
    if (!(ls >> mode_name)) continue;  // blank or comment-only line
    const std::string where = path + ": line " + std::to_string(line_no);
    if (!(ls >> lambda >> gamma >> size >> seed))
      throw FormatError(where +
                        ": expected 'mode lambda gamma student_size seed'");
    std::string extra;
    if (ls >> extra)
      throw FormatError(where + ": unexpected trailing token '" + extra +
                        "'");
    SweepCell cell;
    try {
      cell.mode = kd_mode_from_name(mode_name);
    } catch (const std::invalid_argument& e) {
      throw FormatError(where + ": " + e.what());
    }
    if (!(lambda >= 0.0) || !(gamma >= 0.0))
      throw FormatError(where + ": lambda and gamma must be >= 0");
    cell.lambda_kd = lambda;
    cell.gamma_fd = gamma;
    cell.student_size = size;
    cell.seed = seed;
    grid.push_back(cell);
  }
  if (grid.empty()) throw FormatError(path + ": grid file holds no cells");
  return grid;
}

// ---------------------------------------------------------------------
// Report: parse a sweep CSV back into rows, aggregate over seeds, and
// emit a Markdown or CSV table with the ablation-style columns.
// ---------------------------------------------------------------------

struct ParsedSweep {
  std::vector<std::string> f_names;  // f_at_*mm column headers, in order
  // key: (mode order, lambda, gamma, backbone) -> accumulated values
  struct Agg {
    int n = 0;
    double j = 0.0, v = 0.0;
    std::vector<double> f;
    double params = 0.0;
  };
  std::map<std::tuple<int, double, double, std::string>, Agg> cells;
  int failed = 0;
};

ParsedSweep parse_sweep_csv(const std::string& text,
                            const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line))
    throw FormatError(origin + ": empty sweep table");
  std::vector<std::string> header;
  {
    std::istringstream hs(line);
    std::string f;
    while (std::getline(hs, f, ',')) header.push_back(f);
  }
  auto col = [&](const std::string& name) {
    for (size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    throw FormatError(origin + ": missing column '" + name + "'");
  };
  const int c_backbone = col("backbone"), c_mode = col("mode"),
            c_lambda = col("lambda_kd"), c_gamma = col("gamma_fd"),
            c_j = col("j_err_mm"), c_v = col("v_err_mm"),
            c_params = col("params"), c_status = col("status");
  ParsedSweep ps;
  std::vector<int> c_f;
  for (size_t i = 0; i < header.size(); ++i)
    if (header[i].rfind("f_at_", 0) == 0) {
      c_f.push_back(static_cast<int>(i));
      ps.f_names.push_back(header[i]);
    }

  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    {
      std::istringstream ls(line);
      std::string f;
      while (std::getline(ls, f, ',')) fields.push_back(f);
      if (!line.empty() && line.back() == ',') fields.push_back("");
    }
    const std::string where = origin + ": line " + std::to_string(line_no);
    if (fields.size() != header.size())
      throw FormatError(where + ": expected " +
                        std::to_string(header.size()) + " fields, got " +
                        std::to_string(fields.size()));
    if (fields[c_status].rfind("ok", 0) != 0) {
      ++ps.failed;
      continue;
    }
    try {
      const int mode_order =
          static_cast<int>(kd_mode_from_name(fields[c_mode]));
      auto key = std::make_tuple(mode_order, std::stod(fields[c_lambda]),
                                 std::stod(fields[c_gamma]),
                                 fields[c_backbone]);
      ParsedSweep::Agg& a = ps.cells[key];
      if (a.f.empty()) a.f.assign(c_f.size(), 0.0);
      a.n += 1;
      a.j += std::stod(fields[c_j]);
      a.v += std::stod(fields[c_v]);
      for (size_t k = 0; k < c_f.size(); ++k)
        a.f[k] += std::stod(fields[c_f[k]]);
      a.params += std::stod(fields[c_params]);
    } catch (const std::exception& e) {
      throw FormatError(where + ": " + e.what());
    }
  }
  return ps;
}

const char* mode_display(int order) {
  switch (static_cast<KDMode>(order)) {
    case KDMode::kNone: return "none";
    case KDMode::kOutput: return "output";
    case KDMode::kFeature: return "feature";
    case KDMode::kCombined: return "combined";
  }
  return "?";
}

/// "f_at_5mm" -> "F@5mm".
std::string f_display(const std::string& csv_name) {
  std::string t = csv_name.substr(5);  // drop "f_at_"
  return "F@" + t;
}

std::string report_markdown(const ParsedSweep& ps) {
  std::ostringstream os;
  os << "# Distillation ablation (means over seeds)\n\n";
  os << "| Backbone-cfg | Mode | λ_KD | γ_FD | J_err (mm) ↓ | V_err (mm) ↓";
  for (const std::string& f : ps.f_names) os << " | " << f_display(f)
                                             << " ↑";
  os << " | Params | Seeds |\n";
  os << "|---|---|---|---|---|---";
  for (size_t i = 0; i < ps.f_names.size(); ++i) os << "|---";
  os << "|---|---|\n";
  os.setf(std::ios::fixed);
  for (const auto& [key, a] : ps.cells) {
    const auto& [mode_order, lambda, gamma, backbone] = key;
    os.precision(2);
    os << "| " << backbone << " | " << mode_display(mode_order) << " | "
       << lambda << " | " << gamma << " | ";
    os.precision(3);
    os << a.j / a.n << " | " << a.v / a.n;
    for (double f : a.f) os << " | " << f / a.n;
    os << " | " << static_cast<long long>(a.params / a.n) << " | " << a.n
       << " |\n";
  }
  if (ps.failed > 0)
    os << "\n" << ps.failed << " cell(s) failed and were excluded.\n";
  return os.str();
}

std::string report_csv(const ParsedSweep& ps) {
  std::ostringstream os;
  os.precision(17);
  os << "backbone,mode,lambda_kd,gamma_fd,j_err_mm,v_err_mm";
  for (const std::string& f : ps.f_names) os << ',' << f;
  os << ",params,seeds\n";
  for (const auto& [key, a] : ps.cells) {
    const auto& [mode_order, lambda, gamma, backbone] = key;
    os << backbone << ',' << mode_display(mode_order) << ',' << lambda << ','
       << gamma << ',' << a.j / a.n << ',' << a.v / a.n;
    for (double f : a.f) os << ',' << f / a.n;
    os << ',' << static_cast<long long>(a.params / a.n) << ',' << a.n
       << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------
// Commands.
// ---------------------------------------------------------------------

struct GenRigArgs {
  uint64_t seed = 0;
  int vertices = 97;
  std::string out;
};

void cmd_gen_rig(const GenRigArgs& a) {
  HandRig rig = make_synthetic_rig(a.seed, a.vertices);
  fs::path out = resolve_out(a.out);
  save_rig(rig, out.string());
  write_manifest(out, "gen-rig",
                 {{"seed", a.seed}, {"vertices", a.vertices},
                  {"out", a.out}},
                 {}, a.seed);
  std::cout << "wrote rig (" << rig.n_joints() << " joints, " << rig.n_v
            << " vertices) to " << out.string() << "\n";
}

struct GenDataArgs {
  std::string rig;
  int n = 0;
  uint64_t seed = 0;
  double frac_2d_only = 0.0;
  std::string out;
};

void cmd_gen_data(const GenDataArgs& a) {
  if (a.frac_2d_only < 0.0 || a.frac_2d_only > 1.0)
    throw UsageError("--frac-2d-only must lie in [0, 1]");
  HandRig rig = load_rig(a.rig);
  Dataset ds = make_dataset(a.n, a.seed, rig, a.frac_2d_only);
  fs::path out = resolve_out(a.out);
  save_dataset(ds, out.string());
  write_manifest(out, "gen-data",
                 {{"rig", a.rig}, {"n", a.n}, {"seed", a.seed},
                  {"frac_2d_only", a.frac_2d_only}, {"out", a.out}},
                 {a.rig}, a.seed);
  std::cout << "wrote " << ds.size() << "-sample dataset to " << out.string()
            << "\n";
}

struct TrainTeacherArgs {
  std::string data;
  std::string rig;
  std::string config;
  std::string out;
};

void cmd_train_teacher(const TrainTeacherArgs& a) {
  TrainConfig cfg = parse_train_config(a.config, /*allow_seed=*/true);
  Dataset ds = load_dataset(a.data);
  HandRig rig = load_rig(a.rig);
  TrainResult res = train_teacher(ds, rig, cfg);
  fs::path out = resolve_out(a.out);
  save_model(res.model, out.string());
  save_train_log(res.log, out.string() + ".log.csv");
  write_manifest(out, "train-teacher",
                 {{"data", a.data}, {"rig", a.rig}, {"config", a.config},
                  {"out", a.out}},
                 {a.data, a.rig}, cfg.seed);
  const EpochRecord& last = res.log.epochs.back();
  std::cout << "trained teacher for " << cfg.epochs << " epoch(s); final "
            << "loss " << last.loss_total << ", quick J_err " << last.j_err
            << " mm\nwrote " << out.string() << " and " << out.string()
            << ".log.csv\n";
}

struct DistillArgs {
  std::string teacher;
  std::string data;
  std::string rig;
  std::string mode = "output";
  double lambda_kd = 0.5;
  double gamma_fd = 6.0;
  std::string student_size = "small";
  uint64_t seed = 0;
  std::string config;
  std::string out;
  bool lambda_given = false;
  bool gamma_given = false;
};

void cmd_distill(const DistillArgs& a) {
  KDMode mode;
  try {
    mode = kd_mode_from_name(a.mode);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (mode == KDMode::kNone && a.lambda_given)
    std::cerr << "warning: --mode none ignores --lambda-kd; proceeding as "
                 "the supervised baseline\n";
  if ((mode == KDMode::kNone || mode == KDMode::kOutput) && a.gamma_given)
    std::cerr << "warning: --gamma-fd only affects the feature modes; "
                 "ignored for mode " << a.mode << "\n";
  if (!(a.lambda_kd >= 0.0) || !(a.gamma_fd >= 0.0))
    throw UsageError("--lambda-kd and --gamma-fd must be >= 0");

  NetConfig scfg;
  try {
    scfg = student_config(a.student_size, a.seed);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  TrainConfig cfg = parse_train_config(a.config, /*allow_seed=*/false);
  cfg.seed = a.seed;
  cfg.kd.mode = mode;
  cfg.kd.lambda_kd = a.lambda_kd;
  cfg.kd.gamma_fd = a.gamma_fd;

  Model teacher = load_model(a.teacher);
  freeze(teacher);  // the teacher is a fixed target by definition here
  Dataset ds = load_dataset(a.data);
  HandRig rig = load_rig(a.rig);
  TrainResult res = distill(teacher, scfg, cfg, ds, rig);
  fs::path out = resolve_out(a.out);
  save_model(res.model, out.string());
  save_train_log(res.log, out.string() + ".log.csv");
  write_manifest(out, "distill",
                 {{"teacher", a.teacher}, {"data", a.data}, {"rig", a.rig},
                  {"mode", a.mode}, {"lambda_kd", a.lambda_kd},
                  {"gamma_fd", a.gamma_fd},
                  {"student_size", a.student_size}, {"seed", a.seed},
                  {"config", a.config}, {"out", a.out}},
                 {a.teacher, a.data, a.rig}, a.seed);
  const EpochRecord& last = res.log.epochs.back();
  std::cout << "distilled " << a.student_size << " student (mode " << a.mode
            << ") for " << cfg.epochs << " epoch(s); final loss "
            << last.loss_total << ", quick J_err " << last.j_err
            << " mm\nwrote " << out.string() << " and " << out.string()
            << ".log.csv\n";
}

struct EvalArgs {
  std::string model;
  std::string data;
  std::string rig;
  std::string thresholds = "5,15";
  std::string out;
};

void cmd_eval(const EvalArgs& a) {
  std::vector<double> thr = parse_thresholds(a.thresholds);
  Model model = load_model(a.model);
  Dataset ds = load_dataset(a.data);
  HandRig rig = load_rig(a.rig);
  MetricsReport report = evaluate(model, ds, rig, thr);
  std::cout << metrics_text(report);
  const std::string csv =
      metrics_csv_header(report) + metrics_csv_row(report);
  std::cout << csv;
  if (!a.out.empty()) {
    fs::path out = resolve_out(a.out);
    write_text(out, csv);
    write_manifest(out, "eval",
                   {{"model", a.model}, {"data", a.data}, {"rig", a.rig},
                    {"thresholds", a.thresholds}, {"out", a.out}},
                   {a.model, a.data, a.rig}, 0);
    std::cout << "wrote " << out.string() << "\n";
  }
}

struct BenchArgs {
  std::string model;
  std::string rig;
  int warmup = 20;
  int iters = 100;
};

void cmd_bench(const BenchArgs& a) {
  Model model = load_model(a.model);
  HandRig rig = load_rig(a.rig);
  BenchResult r = bench(model, rig, a.warmup, a.iters);
  std::cout << "params_total " << r.params_total << "\nparams_trainable "
            << r.params_trainable << "\nthroughput_fps " << r.throughput
            << "\n";
}

struct SweepArgs {
  std::string teacher;
  std::string data;
  std::string eval_data;
  std::string rig;
  std::string grid_file;
  std::string config;
  std::string out_dir;
  int bench_warmup = 3;
  int bench_iters = 12;
};

void cmd_sweep(const SweepArgs& a) {
  Model teacher = load_model(a.teacher);
  freeze(teacher);
  Dataset train_ds = load_dataset(a.data);
  Dataset eval_ds =
      a.eval_data.empty() ? load_dataset(a.data) : load_dataset(a.eval_data);
  HandRig rig = load_rig(a.rig);
  std::vector<SweepCell> grid =
      a.grid_file.empty() ? default_grid() : parse_grid_file(a.grid_file);
  TrainConfig base = parse_train_config(a.config, /*allow_seed=*/false);

  std::vector<SweepRow> rows =
      run_sweep(grid, teacher, train_ds, eval_ds, rig, base,
                kDefaultThresholds, a.bench_warmup, a.bench_iters);

  fs::path dir = resolve_out(a.out_dir);
  fs::create_directories(dir);
  const std::string csv = sweep_csv(rows);
  write_text(dir / "sweep.csv", csv);
  ParsedSweep ps = parse_sweep_csv(csv, (dir / "sweep.csv").string());
  write_text(dir / "report.md", report_markdown(ps));

  std::vector<std::string> inputs{a.teacher, a.data, a.rig};
  if (!a.eval_data.empty()) inputs.push_back(a.eval_data);
  if (!a.grid_file.empty()) inputs.push_back(a.grid_file);
  write_manifest(dir / "sweep.csv", "sweep",
                 {{"teacher", a.teacher}, {"data", a.data},
                  {"eval_data", a.eval_data}, {"rig", a.rig},
                  {"grid_file", a.grid_file}, {"config", a.config},
                  {"out_dir", a.out_dir}, {"bench_warmup", a.bench_warmup},
                  {"bench_iters", a.bench_iters}},
                 inputs, 0);
  int failed = 0;
  for (const SweepRow& r : rows)
    if (!r.ok) ++failed;
  std::cout << "swept " << rows.size() << " cell(s), " << failed
            << " failed; wrote " << (dir / "sweep.csv").string() << " and "
            << (dir / "report.md").string() << "\n";
}

struct ReportArgs {
  std::string sweep_dir;
  std::string format = "md";
  std::string out;
};

void cmd_report(const ReportArgs& a) {
  if (a.format != "md" && a.format != "csv")
    throw UsageError("--format must be 'md' or 'csv'");
  const fs::path csv_path = fs::path(a.sweep_dir) / "sweep.csv";
  std::ifstream in(csv_path, std::ios::binary);
  if (!in)
    throw FormatError("cannot open " + csv_path.string() +
                      " (expected a sweep output directory)");
  std::stringstream buf;
  buf << in.rdbuf();
  ParsedSweep ps = parse_sweep_csv(buf.str(), csv_path.string());
  const std::string text =
      a.format == "md" ? report_markdown(ps) : report_csv(ps);
  std::cout << text;
  if (!a.out.empty()) {
    fs::path out = resolve_out(a.out);
    write_text(out, text);
    write_manifest(out, "report",
                   {{"sweep_dir", a.sweep_dir}, {"format", a.format},
                    {"out", a.out}},
                   {csv_path.string()}, 0);
    std::cout << "wrote " << out.string() << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "handkd: a desk-scale laboratory for knowledge distillation of "
      "parametric 3D hand reconstruction.\n"
      "Relative output paths go under $HANDKD_OUT_DIR when it is set."};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));

  GenRigArgs gr;
  CLI::App* c_gr = app.add_subcommand(
      "gen-rig", "Generate a synthetic hand rig and save it");
  c_gr->add_option("--seed", gr.seed, "RNG seed")->capture_default_str();
  c_gr->add_option("--vertices", gr.vertices, "mesh vertex count (>= 16)")
      ->check(CLI::Range(16, 100000))
      ->capture_default_str();
  c_gr->add_option("--out", gr.out, "output rig file")->required();
  c_gr->callback([&gr] { cmd_gen_rig(gr); });

  GenDataArgs gd;
  CLI::App* c_gd = app.add_subcommand(
      "gen-data", "Render a synthetic dataset from a rig");
  c_gd->add_option("--rig", gd.rig, "rig file")->required();
  c_gd->add_option("--n", gd.n, "number of samples")
      ->check(CLI::PositiveNumber)
      ->required();
  c_gd->add_option("--seed", gd.seed, "RNG seed")->capture_default_str();
  c_gd->add_option("--frac-2d-only", gd.frac_2d_only,
                   "fraction of samples with 2D-only annotations")
      ->capture_default_str();
  c_gd->add_option("--out", gd.out, "output dataset file")->required();
  c_gd->callback([&gd] { cmd_gen_data(gd); });

  TrainTeacherArgs tt;
  CLI::App* c_tt = app.add_subcommand(
      "train-teacher", "Train the default teacher network (supervised)");
  c_tt->add_option("--data", tt.data, "training dataset file")->required();
  c_tt->add_option("--rig", tt.rig, "rig file the dataset was built from")
      ->required();
  c_tt->add_option("--config", tt.config,
                   "training options as key=value,... (epochs, batch, lr, "
                   "beta1, beta2, eps, seed, w2d, w3d, wmano)");
  c_tt->add_option("--out", tt.out, "output model file")->required();
  c_tt->callback([&tt] { cmd_train_teacher(tt); });

  DistillArgs di;
  CLI::App* c_di = app.add_subcommand(
      "distill", "Train a student against a frozen teacher");
  c_di->add_option("--teacher", di.teacher, "teacher model file")
      ->required();
  c_di->add_option("--data", di.data, "training dataset file")->required();
  c_di->add_option("--rig", di.rig, "rig file the dataset was built from")
      ->required();
  CLI::Option* o_mode = c_di->add_option(
      "--mode", di.mode, "distillation mode: none|output|feature|combined");
  o_mode->capture_default_str();
  CLI::Option* o_lambda =
      c_di->add_option("--lambda-kd", di.lambda_kd,
                       "distillation loss weight λ_KD");
  o_lambda->capture_default_str();
  CLI::Option* o_gamma = c_di->add_option(
      "--gamma-fd", di.gamma_fd, "feature-loss scale γ_FD");
  o_gamma->capture_default_str();
  c_di->add_option("--student-size", di.student_size,
                   "student backbone: small|large")
      ->capture_default_str();
  c_di->add_option("--seed", di.seed, "run seed (init + shuffling)")
      ->capture_default_str();
  c_di->add_option("--config", di.config,
                   "training options as key=value,... (epochs, batch, lr, "
                   "beta1, beta2, eps, w2d, w3d, wmano)");
  c_di->add_option("--out", di.out, "output student model file")->required();
  c_di->callback([&di, o_lambda, o_gamma] {
    di.lambda_given = o_lambda->count() > 0;
    di.gamma_given = o_gamma->count() > 0;
    cmd_distill(di);
  });

  EvalArgs ev;
  CLI::App* c_ev = app.add_subcommand(
      "eval", "Evaluate a model on a dataset (PA-aligned metrics)");
  c_ev->add_option("--model", ev.model, "model file")->required();
  c_ev->add_option("--data", ev.data, "evaluation dataset file")->required();
  c_ev->add_option("--rig", ev.rig, "rig file")->required();
  c_ev->add_option("--thresholds", ev.thresholds,
                   "F-score thresholds in mm, comma separated")
      ->capture_default_str();
  c_ev->add_option("--out", ev.out, "optional output CSV file");
  c_ev->callback([&ev] { cmd_eval(ev); });

  BenchArgs be;
  CLI::App* c_be = app.add_subcommand(
      "bench", "Measure single-threaded forward throughput");
  c_be->add_option("--model", be.model, "model file")->required();
  c_be->add_option("--rig", be.rig, "rig file")->required();
  c_be->add_option("--warmup", be.warmup, "untimed warmup forwards")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  c_be->add_option("--iters", be.iters, "timed forwards")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  c_be->callback([&be] { cmd_bench(be); });

  SweepArgs sw;
  CLI::App* c_sw = app.add_subcommand(
      "sweep", "Run the ablation grid: distill, evaluate, and bench each "
               "cell");
  c_sw->add_option("--teacher", sw.teacher, "teacher model file")
      ->required();
  c_sw->add_option("--data", sw.data, "training dataset file")->required();
  c_sw->add_option("--eval-data", sw.eval_data,
                   "evaluation dataset file (defaults to --data)");
  c_sw->add_option("--rig", sw.rig, "rig file")->required();
  c_sw->add_option("--grid-file", sw.grid_file,
                   "cells as 'mode lambda gamma student_size seed' lines "
                   "(# comments); default: the full built-in grid");
  c_sw->add_option("--config", sw.config,
                   "training options as key=value,... (no seed: cells "
                   "carry their own)");
  c_sw->add_option("--out-dir", sw.out_dir, "output directory")->required();
  c_sw->add_option("--bench-warmup", sw.bench_warmup,
                   "untimed warmup forwards per cell")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  c_sw->add_option("--bench-iters", sw.bench_iters,
                   "timed forwards per cell")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  c_sw->callback([&sw] { cmd_sweep(sw); });

  ReportArgs re;
  CLI::App* c_re = app.add_subcommand(
      "report", "Aggregate a sweep into an ablation table");
  c_re->add_option("--sweep-dir", re.sweep_dir,
                   "directory holding sweep.csv")
      ->required();
  c_re->add_option("--format", re.format, "md or csv")
      ->capture_default_str();
  c_re->add_option("--out", re.out, "optional output file");
  c_re->callback([&re] { cmd_report(re); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);  // prints the one-line message
    return 1;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
