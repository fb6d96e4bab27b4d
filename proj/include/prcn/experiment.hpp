#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "prcn/presets.hpp"
#include "prcn/trainer.hpp"

namespace prcn {

struct DataPaths {
  std::string train_images, train_labels, test_images, test_labels;
  bool operator==(const DataPaths&) const = default;

  // Standard MNIST file names under `root`.
  static DataPaths under(const std::string& root) {
    const std::filesystem::path r(root);
    return {(r / "train-images-idx3-ubyte.gz").string(), (r / "train-labels-idx1-ubyte.gz").string(),
            (r / "t10k-images-idx3-ubyte.gz").string(), (r / "t10k-labels-idx1-ubyte.gz").string()};
  }
};

// Data root: $PRCN_DATA_ROOT, else data/mnist.
inline std::string default_data_root() {
  const char* env = std::getenv("PRCN_DATA_ROOT");
  return env && *env ? env : "data/mnist";
}

struct ExperimentConfig {
  std::vector<std::string> models{"convnet36", "prcn(12,3)"};
  std::vector<AugmentSpec> augments{{0.0, 0}, {60.0, 0}};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::size_t epochs = 30;
  std::size_t train_subset = 10000;
  std::size_t test_subset = 2000;
  std::size_t batch_size = 64;
  double lr = 0.1, momentum = 0.9, weight_decay = 1e-5;
  std::optional<double> clip_norm = 1.0;
  std::uint64_t test_seed = 12345;
  std::size_t workers = 1;
  bool save_checkpoints = true;
  DataPaths data = DataPaths::under(default_data_root());
  std::string output_dir = "runs";

  bool operator==(const ExperimentConfig& o) const {
    auto aug_eq = [](const AugmentSpec& a, const AugmentSpec& b) {
      return a.max_rotation_deg == b.max_rotation_deg && a.max_translation_px == b.max_translation_px;
    };
    return models == o.models && std::equal(augments.begin(), augments.end(), o.augments.begin(), o.augments.end(), aug_eq) &&
           seeds == o.seeds && epochs == o.epochs && train_subset == o.train_subset && test_subset == o.test_subset &&
           batch_size == o.batch_size && lr == o.lr && momentum == o.momentum && weight_decay == o.weight_decay &&
           clip_norm == o.clip_norm && test_seed == o.test_seed && workers == o.workers &&
           save_checkpoints == o.save_checkpoints && data == o.data && output_dir == o.output_dir;
  }

  OptimState optim() const {
    OptimState s;
    s.lr = lr;
    s.momentum = momentum;
    s.weight_decay = weight_decay;
    s.clip_norm = clip_norm;
    s.epochs = epochs;
    s.batch_size = batch_size;
    return s;
  }

  void validate() const {
    for (const auto& m : models) presets::by_name(m);
    for (const auto& a : augments) a.validate();
    if (batch_size == 0) throw ConfigError("config: batch_size must be >= 1");
    if (train_subset == 0 || test_subset == 0) throw ConfigError("config: subsets must be >= 1");
    if (workers == 0) throw ConfigError("config: workers must be >= 1");
  }
};

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["models"] = c.models;
  j["augments"] = nlohmann::json::array();
  for (const auto& a : c.augments) j["augments"].push_back({{"theta_deg", a.max_rotation_deg}, {"trans_px", a.max_translation_px}});
  j["seeds"] = c.seeds;
  j["epochs"] = c.epochs;
  j["train_subset"] = c.train_subset;
  j["test_subset"] = c.test_subset;
  j["batch_size"] = c.batch_size;
  j["lr"] = c.lr;
  j["momentum"] = c.momentum;
  j["weight_decay"] = c.weight_decay;
  j["clip_norm"] = c.clip_norm ? nlohmann::json(*c.clip_norm) : nlohmann::json(nullptr);
  j["test_seed"] = c.test_seed;
  j["workers"] = c.workers;
  j["save_checkpoints"] = c.save_checkpoints;
  j["data"] = {{"train_images", c.data.train_images},
               {"train_labels", c.data.train_labels},
               {"test_images", c.data.test_images},
               {"test_labels", c.data.test_labels}};
  j["output_dir"] = c.output_dir;
  return j;
}

// Missing fields keep their defaults; unknown fields are rejected.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> known{"models",  "augments",  "seeds",        "epochs",       "train_subset",
                                           "test_subset", "batch_size", "lr",       "momentum",     "weight_decay",
                                           "clip_norm", "test_seed", "workers",     "save_checkpoints", "data",
                                           "output_dir"};
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw ConfigError("config: unknown field '" + k + "'");
  ExperimentConfig c;
  try {
    if (j.contains("models")) c.models = j["models"].get<std::vector<std::string>>();
    if (j.contains("augments")) {
      c.augments.clear();
      for (const auto& a : j["augments"])
        c.augments.push_back({a.value("theta_deg", 0.0), a.value("trans_px", 0)});
    }
    if (j.contains("seeds")) c.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    c.epochs = j.value("epochs", c.epochs);
    c.train_subset = j.value("train_subset", c.train_subset);
    c.test_subset = j.value("test_subset", c.test_subset);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.momentum = j.value("momentum", c.momentum);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    if (j.contains("clip_norm")) c.clip_norm = j["clip_norm"].is_null() ? std::nullopt : std::optional(j["clip_norm"].get<double>());
    c.test_seed = j.value("test_seed", c.test_seed);
    c.workers = j.value("workers", c.workers);
    c.save_checkpoints = j.value("save_checkpoints", c.save_checkpoints);
    if (j.contains("data")) {
      const auto& d = j["data"];
      c.data.train_images = d.value("train_images", c.data.train_images);
      c.data.train_labels = d.value("train_labels", c.data.train_labels);
      c.data.test_images = d.value("test_images", c.data.test_images);
      c.data.test_labels = d.value("test_labels", c.data.test_labels);
    }
    c.output_dir = j.value("output_dir", c.output_dir);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline ExperimentConfig parse_config(const std::string& text) {
  try {
    return config_from_json(nlohmann::json::parse(text));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("config: ") + e.what(), e.byte);
  }
}

inline std::string serialize_config(const ExperimentConfig& c) { return to_json(c).dump(2); }

// ---- Results

struct ResultRow {
  std::string model;
  double theta_deg = 0.0;
  int trans_px = 0;
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  double test_err = std::nan("");
  double train_err = std::nan("");
  double seconds = 0.0;

  bool errored() const { return std::isnan(test_err); }
  auto key() const { return std::make_tuple(model, theta_deg, trans_px, seed, epochs); }
  bool operator==(const ResultRow& o) const {
    auto eq = [](double a, double b) { return (std::isnan(a) && std::isnan(b)) || a == b; };
    return key() == o.key() && eq(test_err, o.test_err) && eq(train_err, o.train_err) && eq(seconds, o.seconds);
  }
};

struct Aggregate {
  std::string model;
  double theta_deg = 0.0;
  int trans_px = 0;
  std::size_t count = 0;
  double mean = 0.0;
  double std = 0.0;  // sample std (n-1); 0 for a single row
};

// Mean and sample standard deviation.
inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {std::nan(""), std::nan("")};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  if (v.size() == 1) return {m, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

inline const char* kResultsHeader = "model,theta_deg,trans_px,seed,epochs,test_err,train_err,seconds";

namespace detail {
inline std::string fmt_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
inline double parse_double(const std::string& s) {
  if (s == "nan") return std::nan("");
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw std::invalid_argument(s);
  return v;
}
// Model names contain commas, so that field is quoted.
inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (char ch : line) {
    if (ch == '"') quoted = !quoted;
    else if (ch == ',' && !quoted) {
      out.push_back(cur);
      cur.clear();
    } else cur += ch;
  }
  out.push_back(cur);
  return out;
}
}  // namespace detail

class ResultsTable {
 public:
  std::vector<ResultRow> rows;

  bool operator==(const ResultsTable& o) const { return rows == o.rows; }

  static std::string csv_line(const ResultRow& r) {
    return "\"" + r.model + "\"," + detail::fmt_double(r.theta_deg) + "," + std::to_string(r.trans_px) + "," +
           std::to_string(r.seed) + "," + std::to_string(r.epochs) + "," + detail::fmt_double(r.test_err) + "," +
           detail::fmt_double(r.train_err) + "," + detail::fmt_double(r.seconds);
  }

  std::string to_csv() const {
    std::string s = std::string(kResultsHeader) + "\n";
    for (const auto& r : rows) s += csv_line(r) + "\n";
    return s;
  }

  static ResultsTable from_csv(const std::string& text) {
    ResultsTable t;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0, offset = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const std::size_t at = offset;
      offset += line.size() + 1;
      if (line.empty()) continue;
      if (lineno == 1) {
        if (line != kResultsHeader) throw ParseError("results: unexpected header", 0);
        continue;
      }
      const auto f = detail::split_csv_line(line);
      if (f.size() != 8) throw ParseError("results: expected 8 fields on line " + std::to_string(lineno), at);
      try {
        ResultRow r;
        r.model = f[0];
        r.theta_deg = detail::parse_double(f[1]);
        r.trans_px = std::stoi(f[2]);
        r.seed = std::stoull(f[3]);
        r.epochs = std::stoul(f[4]);
        r.test_err = detail::parse_double(f[5]);
        r.train_err = detail::parse_double(f[6]);
        r.seconds = detail::parse_double(f[7]);
        t.rows.push_back(r);
      } catch (const std::logic_error&) {
        throw ParseError("results: malformed line " + std::to_string(lineno), at);
      }
    }
    return t;
  }

  static ResultsTable load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error("cannot open results " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return from_csv(ss.str());
  }

  const ResultRow* find(const std::string& model, double theta, int trans, std::uint64_t seed, std::size_t epochs) const {
    for (const auto& r : rows)
      if (r.key() == std::make_tuple(model, theta, trans, seed, epochs)) return &r;
    return nullptr;
  }

  std::size_t errored() const {
    return static_cast<std::size_t>(std::count_if(rows.begin(), rows.end(), [](const auto& r) { return r.errored(); }));
  }

  // Per (model, theta, trans) over non-errored rows, in first-seen order.
  std::vector<Aggregate> aggregate() const {
    std::vector<Aggregate> out;
    std::vector<std::vector<double>> vals;
    for (const auto& r : rows) {
      if (r.errored()) continue;
      auto it = std::find_if(out.begin(), out.end(), [&](const Aggregate& a) {
        return a.model == r.model && a.theta_deg == r.theta_deg && a.trans_px == r.trans_px;
      });
      if (it == out.end()) {
        out.push_back({r.model, r.theta_deg, r.trans_px});
        vals.emplace_back();
        it = out.end() - 1;
      }
      vals[static_cast<std::size_t>(it - out.begin())].push_back(r.test_err);
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i].count = vals[i].size();
      std::tie(out[i].mean, out[i].std) = mean_std(vals[i]);
    }
    return out;
  }
};

// ---- Report: aggregate CSV and an SVG line chart

inline std::string aggregate_csv(const std::vector<Aggregate>& aggs) {
  std::string s = "model,theta_deg,trans_px,runs,mean_test_err,std_test_err\n";
  for (const auto& a : aggs)
    s += "\"" + a.model + "\"," + detail::fmt_double(a.theta_deg) + "," + std::to_string(a.trans_px) + "," +
         std::to_string(a.count) + "," + detail::fmt_double(a.mean) + "," + detail::fmt_double(a.std) + "\n";
  return s;
}

// Mean test error (percent) against transformation magnitude, one series per
// model, error bars of one std. The x axis is rotation when it varies,
// otherwise translation.
inline std::string render_svg(const std::vector<Aggregate>& aggs) {
  if (aggs.empty()) throw ConfigError("report: no rows to plot");
  bool theta_varies = false;
  for (const auto& a : aggs) theta_varies |= a.theta_deg != aggs[0].theta_deg;
  auto xval = [&](const Aggregate& a) { return theta_varies ? a.theta_deg : static_cast<double>(a.trans_px); };
  std::vector<std::string> models;
  for (const auto& a : aggs)
    if (std::find(models.begin(), models.end(), a.model) == models.end()) models.push_back(a.model);

  double xmin = HUGE_VAL, xmax = -HUGE_VAL, ymax = 0.0;
  for (const auto& a : aggs) {
    xmin = std::min(xmin, xval(a));
    xmax = std::max(xmax, xval(a));
    ymax = std::max(ymax, 100.0 * (a.mean + a.std));
  }
  if (xmax == xmin) {
    xmin -= 1.0;
    xmax += 1.0;
  }
  if (ymax <= 0.0) ymax = 1.0;
  ymax *= 1.1;
  const double W = 640, H = 400, L = 60, R = 170, T = 20, B = 50;
  auto px = [&](double x) { return L + (x - xmin) / (xmax - xmin) * (W - L - R); };
  auto py = [&](double y) { return H - B - y / ymax * (H - T - B); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

  std::ostringstream s;
  s << std::fixed << std::setprecision(2);
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double yv = ymax * i / 4.0, xv = xmin + (xmax - xmin) * i / 4.0;
    s << "<text x=\"" << L - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << yv << "</text>\n";
    s << "<text x=\"" << px(xv) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << xv << "</text>\n";
  }
  s << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">"
    << (theta_varies ? "max rotation (deg)" : "max translation (px)") << "</text>\n";
  s << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " << (T + H - B) / 2
    << ")\">test error (%)</text>\n";
  for (std::size_t m = 0; m < models.size(); ++m) {
    const char* color = colors[m % 8];
    std::vector<const Aggregate*> pts;
    for (const auto& a : aggs)
      if (a.model == models[m]) pts.push_back(&a);
    std::stable_sort(pts.begin(), pts.end(), [&](auto* a, auto* b) { return xval(*a) < xval(*b); });
    s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < pts.size(); ++i) s << (i ? " " : "") << px(xval(*pts[i])) << "," << py(100.0 * pts[i]->mean);
    s << "\"/>\n";
    for (const auto* a : pts) {
      const double x = px(xval(*a));
      s << "<line x1=\"" << x << "\" y1=\"" << py(100.0 * (a->mean - a->std)) << "\" x2=\"" << x << "\" y2=\""
        << py(100.0 * (a->mean + a->std)) << "\" stroke=\"" << color << "\"/>\n";
      s << "<circle cx=\"" << x << "\" cy=\"" << py(100.0 * a->mean) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    }
    const double ly = T + 10 + 18.0 * static_cast<double>(m);
    s << "<line x1=\"" << W - R + 10 << "\" y1=\"" << ly << "\" x2=\"" << W - R + 30 << "\" y2=\"" << ly << "\" stroke=\"" << color
      << "\" stroke-width=\"2\"/>\n";
    s << "<text x=\"" << W - R + 36 << "\" y=\"" << ly + 4 << "\">" << models[m] << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

// Writes <prefix>.csv and <prefix>.svg.
inline void report(const ResultsTable& table, const std::string& prefix) {
  const auto aggs = table.aggregate();
  std::ofstream(prefix + ".csv") << aggregate_csv(aggs);
  std::ofstream(prefix + ".svg") << render_svg(aggs);
}

// ---- Grid runner

inline std::string run_slug(const std::string& model, const AugmentSpec& a, std::uint64_t seed) {
  std::string m;
  for (char ch : model) m += std::isalnum(static_cast<unsigned char>(ch)) ? ch : '_';
  std::ostringstream s;
  s << m << "_r" << a.max_rotation_deg << "_t" << a.max_translation_px << "_s" << seed;
  return s.str();
}

struct LoadedData {
  Dataset train, test;
};

inline LoadedData load_data(const ExperimentConfig& c) {
  for (const auto& p : {c.data.train_images, c.data.train_labels, c.data.test_images, c.data.test_labels})
    if (!std::filesystem::exists(p)) throw Error("missing data file " + p + " (run `prcn fetch` or set PRCN_DATA_ROOT)");
  return {load_idx(c.data.train_images, c.data.train_labels).head(c.train_subset),
          load_idx(c.data.test_images, c.data.test_labels).head(c.test_subset)};
}

struct SingleRun {
  RunMetrics metrics;
  std::string checkpoint;
};

// Trains one (model, augment, seed) cell. Weights come from
// substream(seed, "init"); shuffling and augmentation from train().
inline SingleRun run_single(const ExperimentConfig& c, const LoadedData& data, const std::string& model_name,
                            const AugmentSpec& aug, std::uint64_t seed, const std::string& metrics_csv = "",
                            const std::string& checkpoint = "") {
  auto model = compile(presets::by_name(model_name), substream(seed, "init"));
  TrainConfig tc;
  tc.optim = c.optim();
  tc.augment = aug;
  tc.test_seed = c.test_seed;
  tc.metrics_csv = metrics_csv;
  if (!metrics_csv.empty()) std::filesystem::remove(metrics_csv);
  tc.checkpoint_path = checkpoint;
  tc.checkpoint_every = checkpoint.empty() ? 0 : c.epochs;
  nlohmann::json echo{{"model", model_name}, {"theta_deg", aug.max_rotation_deg}, {"trans_px", aug.max_translation_px},
                      {"seed", seed},        {"epochs", c.epochs}};
  tc.config_json = echo.dump();
  return {train(model.net, data.train, &data.test, tc, seed), checkpoint};
}

struct GridCell {
  std::string model;
  AugmentSpec augment;
  std::uint64_t seed;
};

inline std::vector<GridCell> grid_cells(const ExperimentConfig& c) {
  std::vector<GridCell> cells;
  for (const auto& m : c.models)
    for (const auto& a : c.augments)
      for (auto s : c.seeds) cells.push_back({m, a, s});
  return cells;
}

// Runs every grid cell not already present in <output_dir>/results.csv,
// appending one row per finished cell. Divergence marks the row errored
// (test_err nan) and the grid continues. Returns the table in grid order.
inline ResultsTable run_grid(const ExperimentConfig& c, std::ostream* log = nullptr) {
  c.validate();
  namespace fs = std::filesystem;
  fs::create_directories(c.output_dir);
  const std::string results_path = (fs::path(c.output_dir) / "results.csv").string();
  ResultsTable done;
  if (fs::exists(results_path)) done = ResultsTable::load(results_path);
  else std::ofstream(results_path) << kResultsHeader << "\n";
  std::ofstream(fs::path(c.output_dir) / "config.json") << serialize_config(c) << "\n";

  const auto cells = grid_cells(c);
  std::vector<GridCell> todo;
  for (const auto& cell : cells)
    if (!done.find(cell.model, cell.augment.max_rotation_deg, cell.augment.max_translation_px, cell.seed, c.epochs))
      todo.push_back(cell);

  std::optional<LoadedData> data;
  if (!todo.empty()) data = load_data(c);
  if (c.save_checkpoints) fs::create_directories(fs::path(c.output_dir) / "checkpoints");
  fs::create_directories(fs::path(c.output_dir) / "metrics");

  std::mutex mu;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < todo.size(); i = next++) {
      const auto& cell = todo[i];
      const auto slug = run_slug(cell.model, cell.augment, cell.seed);
      ResultRow row{cell.model, cell.augment.max_rotation_deg, cell.augment.max_translation_px, cell.seed, c.epochs};
      std::string err;
      try {
        const auto ckpt = c.save_checkpoints ? (fs::path(c.output_dir) / "checkpoints" / (slug + ".ckpt")).string() : "";
        const auto r = run_single(c, *data, cell.model, cell.augment, cell.seed,
                                  (fs::path(c.output_dir) / "metrics" / (slug + ".csv")).string(), ckpt);
        row.test_err = r.metrics.final_test_err;
        row.train_err = r.metrics.final_train_err;
        row.seconds = r.metrics.wall_seconds;
      } catch (const NumericError& e) {
        err = e.what();
      }
      std::lock_guard lock(mu);
      std::ofstream(results_path, std::ios::app) << ResultsTable::csv_line(row) << "\n";
      done.rows.push_back(row);
      if (log) {
        *log << slug << ": " << (err.empty() ? "test_err " + detail::fmt_double(row.test_err) : "ERROR " + err) << "\n";
        log->flush();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < std::min(c.workers, todo.size()); ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  ResultsTable out;
  for (const auto& cell : cells)
    if (const auto* r = done.find(cell.model, cell.augment.max_rotation_deg, cell.augment.max_translation_px, cell.seed, c.epochs))
      out.rows.push_back(*r);
  return out;
}

}  // namespace prcn
