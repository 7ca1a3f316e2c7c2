#include "opcal/runner.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "opcal/verify.hpp"

namespace opcal {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

// Atomic write: temp file in the target directory, then rename.
void write_file(const fs::path& path, const std::string& content) {
  const fs::path tmp = path.parent_path() / (".tmp." + path.filename().string());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << content;
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw std::invalid_argument(std::string("config field '") + key + "' has the wrong type");
  }
}

void reject_unknown(const json& j, std::initializer_list<const char*> known,
                    const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* k : known) {
      if (key == k) ok = true;
    }
    if (!ok) throw std::invalid_argument("unknown config field '" + where + key + "'");
  }
}

struct DatasetFile {
  std::vector<double> x, data, truth_a, truth_signal_response;
};

DatasetFile read_dataset_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot read dataset " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::invalid_argument("dataset is empty: " + path.string());
  if (line != "pixel_index,x,data,truth_a,truth_signal_response") {
    throw std::invalid_argument("dataset header mismatch in " + path.string());
  }
  DatasetFile d;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string cell;
    std::vector<double> cells;
    while (std::getline(row, cell, ',')) {
      try {
        cells.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw std::invalid_argument("dataset " + path.string() + " line " +
                                    std::to_string(line_no) + ": bad number '" + cell + "'");
      }
    }
    if (cells.size() != 5) {
      throw std::invalid_argument("dataset " + path.string() + " line " +
                                  std::to_string(line_no) + ": expected 5 columns");
    }
    d.x.push_back(cells[1]);
    d.data.push_back(cells[2]);
    d.truth_a.push_back(cells[3]);
    d.truth_signal_response.push_back(cells[4]);
  }
  return d;
}

// ---- minimal SVG line plots -------------------------------------------------

struct PlotRange {
  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  void include(double x, double y) {
    xmin = std::min(xmin, x);
    xmax = std::max(xmax, x);
    ymin = std::min(ymin, y);
    ymax = std::max(ymax, y);
  }
};

constexpr int kPlotW = 800;
constexpr int kPlotH = 480;
constexpr int kMargin = 46;

double px(const PlotRange& r, double x) {
  return kMargin + (x - r.xmin) / (r.xmax - r.xmin) * (kPlotW - 2 * kMargin);
}
double py(const PlotRange& r, double y) {
  return kPlotH - kMargin - (y - r.ymin) / (r.ymax - r.ymin) * (kPlotH - 2 * kMargin);
}

std::string svg_polyline(const PlotRange& r, const std::vector<double>& x,
                         const std::vector<double>& y, const char* style) {
  std::ostringstream os;
  os << "<polyline fill=\"none\" " << style << " points=\"";
  for (std::size_t i = 0; i < x.size(); ++i) {
    os << px(r, x[i]) << "," << py(r, y[i]) << " ";
  }
  os << "\"/>\n";
  return os.str();
}

std::string svg_header(const std::string& title, const PlotRange& r) {
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kPlotW << "\" height=\""
     << kPlotH << "\" viewBox=\"0 0 " << kPlotW << " " << kPlotH << "\">\n"
     << "<rect x=\"" << kMargin << "\" y=\"" << kMargin << "\" width=\""
     << kPlotW - 2 * kMargin << "\" height=\"" << kPlotH - 2 * kMargin
     << "\" fill=\"white\" stroke=\"black\"/>\n"
     << "<text x=\"" << kPlotW / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">"
     << title << "</text>\n"
     << "<text x=\"" << kMargin << "\" y=\"" << kPlotH - 12 << "\" font-size=\"11\">x="
     << r.xmin << "</text>\n"
     << "<text x=\"" << kPlotW - kMargin << "\" y=\"" << kPlotH - 12
     << "\" text-anchor=\"end\" font-size=\"11\">x=" << r.xmax << "</text>\n"
     << "<text x=\"6\" y=\"" << kPlotH - kMargin << "\" font-size=\"11\">" << r.ymin
     << "</text>\n"
     << "<text x=\"6\" y=\"" << kMargin + 10 << "\" font-size=\"11\">" << r.ymax
     << "</text>\n";
  return os.str();
}

void write_fig1(const fs::path& path, const std::vector<double>& x,
                const std::vector<double>& data, const std::vector<double>& truth_response,
                const std::vector<double>& posterior_mean) {
  PlotRange r{x.front(), x.back(), data[0], data[0]};
  for (std::size_t i = 0; i < x.size(); ++i) {
    r.include(x[i], data[i]);
    r.include(x[i], truth_response[i]);
    r.include(x[i], posterior_mean[i]);
  }
  std::ostringstream os;
  os << svg_header("signal response: truth, posterior mean, data", r);
  os << svg_polyline(r, x, truth_response, "stroke=\"black\" stroke-width=\"1.5\"");
  os << svg_polyline(r, x, posterior_mean,
                     "stroke=\"crimson\" stroke-width=\"1.5\" stroke-dasharray=\"6,4\"");
  for (std::size_t i = 0; i < x.size(); ++i) {
    os << "<circle cx=\"" << px(r, x[i]) << "\" cy=\"" << py(r, data[i])
       << "\" r=\"2\" fill=\"steelblue\"/>\n";
  }
  os << "</svg>\n";
  write_file(path, os.str());
}

void write_fig2(const fs::path& path, const std::vector<double>& x,
                const std::vector<double>& m_a, const std::vector<double>& band,
                const std::vector<double>& truth_a) {
  PlotRange r{x.front(), x.back(), m_a[0], m_a[0]};
  for (std::size_t i = 0; i < x.size(); ++i) {
    r.include(x[i], m_a[i] - band[i]);
    r.include(x[i], m_a[i] + band[i]);
    r.include(x[i], truth_a[i]);
  }
  std::ostringstream os;
  os << svg_header("signal reconstruction with 1-sigma band", r);
  os << "<polygon fill=\"lightsteelblue\" fill-opacity=\"0.6\" stroke=\"none\" points=\"";
  for (std::size_t i = 0; i < x.size(); ++i) {
    os << px(r, x[i]) << "," << py(r, m_a[i] + band[i]) << " ";
  }
  for (std::size_t i = x.size(); i-- > 0;) {
    os << px(r, x[i]) << "," << py(r, m_a[i] - band[i]) << " ";
  }
  os << "\"/>\n";
  os << svg_polyline(r, x, truth_a, "stroke=\"black\" stroke-width=\"1\"");
  os << svg_polyline(r, x, m_a,
                     "stroke=\"crimson\" stroke-width=\"1.5\" stroke-dasharray=\"6,4\"");
  os << "</svg>\n";
  write_file(path, os.str());
}

}  // namespace

ModelConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("config parse error: ") + e.what());
  }
  reject_unknown(j, {"grid", "spectrum", "noise_sigma", "r0", "response_prior_variance",
                     "newton", "seed"},
                 "");
  ModelConfig config;
  if (j.contains("grid")) {
    const json& g = j.at("grid");
    reject_unknown(g, {"n_pixels", "length"}, "grid.");
    config.grid = Grid1D(get_or(g, "n_pixels", 128), get_or(g, "length", 1.0));
  }
  if (j.contains("spectrum")) {
    const json& s = j.at("spectrum");
    reject_unknown(s, {"p0", "k0", "gamma"}, "spectrum.");
    config.spectrum =
        PowerSpectrum(get_or(s, "p0", 4.0), get_or(s, "k0", 4.0), get_or(s, "gamma", 4.0));
  }
  config.sigma_n = get_or(j, "noise_sigma", 0.1);
  config.r0 = get_or(j, "r0", 3.0);
  config.response_var = get_or(j, "response_prior_variance", 1.0);
  if (j.contains("newton")) {
    const json& n = j.at("newton");
    reject_unknown(n, {"max_iter", "grad_tol", "backtrack_factor", "min_step"}, "newton.");
    config.newton.max_iter = get_or(n, "max_iter", 100);
    config.newton.grad_tol = get_or(n, "grad_tol", 1e-8);
    config.newton.backtrack_factor = get_or(n, "backtrack_factor", 0.5);
    config.newton.min_step = get_or(n, "min_step", 1e-10);
  }
  config.seed = get_or(j, "seed", std::uint64_t{1});
  config.validate();
  return config;
}

ModelConfig load_config(const std::string& path) {
  return parse_config(read_file(path));
}

std::string config_to_json(const ModelConfig& c) {
  json j;
  j["grid"] = {{"n_pixels", c.grid.n_pixels}, {"length", c.grid.length}};
  j["spectrum"] = {{"p0", c.spectrum.p0}, {"k0", c.spectrum.k0}, {"gamma", c.spectrum.gamma}};
  j["noise_sigma"] = c.sigma_n;
  j["r0"] = c.r0;
  j["response_prior_variance"] = c.response_var;
  j["newton"] = {{"max_iter", c.newton.max_iter},
                 {"grad_tol", c.newton.grad_tol},
                 {"backtrack_factor", c.newton.backtrack_factor},
                 {"min_step", c.newton.min_step}};
  j["seed"] = c.seed;
  return j.dump(2);
}

int cmd_simulate(const std::string& config_path, std::optional<std::uint64_t> seed,
                 const std::string& out_dir) {
  ModelConfig config;
  try {
    config = load_config(config_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  const std::uint64_t use_seed = seed.value_or(config.seed);
  const MockDataset data = make_mock_data(config, use_seed);

  fs::create_directories(out_dir);
  const int n = config.grid.n_pixels;
  const double dx = config.grid.length / n;
  std::ostringstream csv;
  csv << "pixel_index,x,data,truth_a,truth_signal_response\n";
  for (int i = 0; i < n; ++i) {
    const double response = data.truth_response * std::exp(data.truth_a.values[i]);
    csv << i << "," << fmt(i * dx) << "," << fmt(data.d.values[i]) << ","
        << fmt(data.truth_a.values[i]) << "," << fmt(response) << "\n";
  }
  write_file(fs::path(out_dir) / "dataset.csv", csv.str());

  json truth;
  truth["truth_r"] = data.truth_r;
  truth["truth_response"] = data.truth_response;
  truth["seed"] = use_seed;
  write_file(fs::path(out_dir) / "truth.json", truth.dump(2) + "\n");
  return kExitOk;
}

int cmd_infer(const std::string& config_path, const std::string& dataset_path,
              const std::string& out_dir, bool plots) {
  ModelConfig config;
  DatasetFile dataset;
  json truth;
  try {
    config = load_config(config_path);
    dataset = read_dataset_csv(dataset_path);
    if (static_cast<int>(dataset.data.size()) != config.grid.n_pixels) {
      throw std::invalid_argument("dataset has " + std::to_string(dataset.data.size()) +
                                  " rows but the config grid has " +
                                  std::to_string(config.grid.n_pixels) + " pixels");
    }
    truth = json::parse(read_file(fs::path(dataset_path).parent_path() / "truth.json"));
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  const Field d(config.grid,
                Eigen::Map<const Eigen::VectorXd>(dataset.data.data(), dataset.data.size()));
  const auto t0 = std::chrono::steady_clock::now();
  const InferenceResult result = minimize_gibbs(d, config);
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const Field band = uncertainty_band(result.state);
  const Field response_mean = posterior_response_mean(result.state, config);

  fs::create_directories(out_dir);
  const int n = config.grid.n_pixels;
  std::ostringstream csv;
  csv << "pixel_index,x,m_a,band,posterior_response_mean,data\n";
  for (int i = 0; i < n; ++i) {
    csv << i << "," << fmt(dataset.x[i]) << "," << fmt(result.state.m_a.values[i]) << ","
        << fmt(band.values[i]) << "," << fmt(response_mean.values[i]) << ","
        << fmt(dataset.data[i]) << "\n";
  }
  write_file(fs::path(out_dir) / "reconstruction.csv", csv.str());

  RunSummary summary;
  summary.config_echo = config_to_json(config);
  summary.truth_response = truth.at("truth_response").get<double>();
  summary.gibbs_response = config.r0 + result.state.m_r;
  summary.gibbs_sigma = result.gibbs_sigma_r;
  summary.map_response = config.r0 + result.map_r;
  summary.map_sigma = result.map_sigma_r;
  summary.iterations = result.iterations;
  summary.converged = result.converged;
  summary.final_grad_norm = result.final_grad_norm;
  summary.wall_time = wall;

  json js;
  js["config"] = json::parse(summary.config_echo);
  js["truth_response"] = summary.truth_response;
  js["gibbs_response"] = summary.gibbs_response;
  js["gibbs_sigma"] = summary.gibbs_sigma;
  js["map_response"] = summary.map_response;
  js["map_sigma"] = summary.map_sigma;
  js["iterations"] = summary.iterations;
  js["converged"] = summary.converged;
  js["final_grad_norm"] = summary.final_grad_norm;
  js["wall_time"] = summary.wall_time;
  write_file(fs::path(out_dir) / "summary.json", js.dump(2) + "\n");

  if (plots) {
    std::vector<double> m_a(n), band_v(n), mean_v(n);
    for (int i = 0; i < n; ++i) {
      m_a[i] = result.state.m_a.values[i];
      band_v[i] = band.values[i];
      mean_v[i] = response_mean.values[i];
    }
    write_fig1(fs::path(out_dir) / "fig1.svg", dataset.x, dataset.data,
               dataset.truth_signal_response, mean_v);
    write_fig2(fs::path(out_dir) / "fig2.svg", dataset.x, m_a, band_v, dataset.truth_a);
  }

  if (!result.converged) {
    std::cerr << "inference did not converge (grad norm " << result.final_grad_norm << ")\n";
    return kExitNotConverged;
  }
  return kExitOk;
}

int cmd_compare(const std::string& config_path, int n_seeds, const std::string& out_dir) {
  ModelConfig config;
  try {
    if (n_seeds < 1) throw std::invalid_argument("n_seeds must be >= 1");
    config = load_config(config_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  fs::create_directories(out_dir);

  std::ostringstream csv;
  csv << "seed,truth,gibbs,gibbs_sigma,map,map_sigma,gibbs_z,map_z,converged\n";
  std::vector<double> gibbs_z, map_z, agree;
  int failures = 0;
  for (int seed = 1; seed <= n_seeds; ++seed) {
    try {
      const MockDataset data = make_mock_data(config, seed);
      const InferenceResult result = minimize_gibbs(data.d, config);
      const double gibbs = config.r0 + result.state.m_r;
      const double map = config.r0 + result.map_r;
      const double gz = (gibbs - data.truth_response) / result.gibbs_sigma_r;
      const double mz = (map - data.truth_response) / result.map_sigma_r;
      csv << seed << "," << fmt(data.truth_response) << "," << fmt(gibbs) << ","
          << fmt(result.gibbs_sigma_r) << "," << fmt(map) << "," << fmt(result.map_sigma_r)
          << "," << fmt(gz) << "," << fmt(mz) << "," << (result.converged ? 1 : 0) << "\n";
      if (result.converged) {
        gibbs_z.push_back(gz);
        map_z.push_back(mz);
        agree.push_back(std::abs(gibbs - map) /
                        std::sqrt(result.gibbs_sigma_r * result.gibbs_sigma_r +
                                  result.map_sigma_r * result.map_sigma_r));
      } else {
        ++failures;
      }
    } catch (const std::exception& e) {
      csv << seed << ",nan,nan,nan,nan,nan,nan,nan,0\n";
      std::cerr << "seed " << seed << " failed: " << e.what() << "\n";
      ++failures;
    }
  }
  write_file(fs::path(out_dir) / "compare.csv", csv.str());

  const auto coverage = [](const std::vector<double>& z, double limit) {
    if (z.empty()) return 0.0;
    int inside = 0;
    for (double v : z) {
      if (std::abs(v) <= limit) ++inside;
    }
    return static_cast<double>(inside) / static_cast<double>(z.size());
  };
  const auto mean_abs = [](const std::vector<double>& z) {
    if (z.empty()) return 0.0;
    double s = 0.0;
    for (double v : z) s += std::abs(v);
    return s / static_cast<double>(z.size());
  };

  json stats;
  stats["n_seeds"] = n_seeds;
  stats["failures"] = failures;
  stats["gibbs"] = {{"mean_abs_z", mean_abs(gibbs_z)},
                    {"coverage_1s", coverage(gibbs_z, 1.0)},
                    {"coverage_2s", coverage(gibbs_z, 2.0)},
                    {"coverage_3s", coverage(gibbs_z, 3.0)}};
  stats["map"] = {{"mean_abs_z", mean_abs(map_z)},
                  {"coverage_1s", coverage(map_z, 1.0)},
                  {"coverage_2s", coverage(map_z, 2.0)},
                  {"coverage_3s", coverage(map_z, 3.0)}};
  stats["gibbs_map_agreement_2s"] = coverage(agree, 2.0);
  write_file(fs::path(out_dir) / "compare_stats.json", stats.dump(2) + "\n");
  return kExitOk;
}

int cmd_verify(const std::string& level, double inject_gradient_error) {
  VerifyLevel lvl;
  if (level == "fast") {
    lvl = VerifyLevel::fast;
  } else if (level == "full") {
    lvl = VerifyLevel::full;
  } else {
    std::cerr << "error: unknown verify level '" << level << "' (expected fast|full)\n";
    return kExitUsage;
  }
  VerifyHooks hooks;
  hooks.gradient_bias = inject_gradient_error;
  const auto results = run_verification(lvl, hooks);
  bool all_pass = true;
  std::size_t width = 0;
  for (const auto& r : results) width = std::max(width, r.name.size());
  for (const auto& r : results) {
    all_pass = all_pass && r.pass;
    std::cout << (r.pass ? "[PASS] " : "[FAIL] ") << r.name
              << std::string(width - r.name.size() + 2, ' ') << r.detail << "\n";
  }
  std::cout << (all_pass ? "verification passed" : "verification FAILED") << "\n";
  return all_pass ? kExitOk : kExitVerifyFailed;
}

}  // namespace opcal
