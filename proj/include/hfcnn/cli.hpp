#pragma once

// Command-line driver: argument parsing, dataset resolution, the train and
// bench runs, and the artifacts they write.

#include <CLI11.hpp>

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "hfcnn/data.hpp"
#include "hfcnn/diffprod.hpp"
#include "hfcnn/gv_timing.hpp"
#include "hfcnn/model.hpp"
#include "hfcnn/solver.hpp"

namespace hfcnn {

enum class RunMode { train, bench };

struct CliConfig {
  std::string optim = "newtoncg";
  std::optional<std::size_t> gn_size;  // empty: the whole training set
  std::vector<std::string> train_set;
  std::vector<std::string> test_set;
  std::optional<std::array<std::size_t, 3>> dim;
  std::size_t bsize = 128;
  std::size_t workers = hardware_workers();
  std::size_t iters = 30;
  std::uint64_t seed = 42;
  std::string net;  // empty: default architecture
  RunMode mode = RunMode::train;
  std::string out;     // empty: iterations.csv (train) or timing.csv (bench)
  std::string params = "params.bin";
  std::size_t repeats = 3;
  std::vector<std::size_t> gn_sizes{std::begin(kDefaultGnSizes), std::end(kDefaultGnSizes)};
  NewtonConfig solver;

  std::string out_path() const {
    if (!out.empty()) return out;
    return mode == RunMode::train ? "iterations.csv" : "timing.csv";
  }
};

/// Thrown by parse_args for --help; carries the usage text.
struct HelpRequested {
  std::string text;
};

inline constexpr const char* kSupportedOptimizers = "newtoncg";

inline std::string lowercase(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

/// Parses the flags after the program name.
inline CliConfig parse_args(std::vector<std::string> args) {
  CliConfig cfg;
  CLI::App app{"Hessian-free Newton-CG training of small CNNs", "hfcnn"};
  app.allow_extras(false);

  std::string gn_text, mode_text = "train";
  std::vector<std::size_t> dim;
  NewtonConfig& s = cfg.solver;

  app.add_option("--optim", cfg.optim, "Optimizer (supported: newtoncg)");
  app.add_option("--GNsize", gn_text, "Samples used for the Gauss-Newton matrix, or 'full' (default)");
  app.add_option("--train_set", cfg.train_set,
                 "Training data: a directory, IDX image+label files, CIFAR-10 .bin files, or synthetic:N");
  app.add_option("--test_set", cfg.test_set, "Test data, same forms as --train_set");
  app.add_option("--dim", dim, "Sample dimensions H W C")->expected(3);
  app.add_option("--bsize", cfg.bsize, "Mini-batch size")->check(CLI::PositiveNumber);
  app.add_option("--workers", cfg.workers, "Worker threads")->check(CLI::PositiveNumber);
  app.add_option("--iters", cfg.iters, "Newton iterations")->check(CLI::PositiveNumber);
  app.add_option("--seed", cfg.seed, "Seed for parameter initialisation and synthetic data");
  app.add_option("--net", cfg.net, "Architecture file");
  app.add_option("--mode", mode_text, "train or bench");
  app.add_option("--out", cfg.out, "Iteration log (train) or timing table (bench) CSV");
  app.add_option("--params", cfg.params, "Final parameters file (train)");
  app.add_option("--repeats", cfg.repeats, "Gv calls per timing point (bench)")->check(CLI::PositiveNumber);
  app.add_option("--gn_sizes", cfg.gn_sizes, "Gauss-Newton sizes to time (bench)");
  app.add_option("--eta", s.armijo_eta, "Sufficient-decrease constant");
  app.add_option("--drop", s.drop, "Damping factor applied when rho > rho_upper");
  app.add_option("--boost", s.boost, "Damping factor applied when rho < rho_lower");
  app.add_option("--rho_lower", s.rho_lower);
  app.add_option("--rho_upper", s.rho_upper);
  app.add_option("--lambda", s.lambda_init, "Initial damping");
  app.add_option("--cg_rtol", s.cg_rtol, "CG relative residual tolerance");
  app.add_option("--cg_max", s.cg_max_iters, "CG iteration cap");
  app.add_option("--grad_tol", s.grad_tol, "Stop when ||grad|| <= grad_tol * max(1, ||grad_0||)");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    throw HelpRequested{app.help()};
  } catch (const CLI::ParseError& e) {
    throw Error(Errc::invalid_argument, e.what());
  }

  if (lowercase(cfg.optim) != "newtoncg")
    throw Error(Errc::invalid_argument, "unsupported optimizer '" + cfg.optim + "' (supported: " +
                                            kSupportedOptimizers + ")");
  cfg.optim = "newtoncg";

  if (!gn_text.empty() && lowercase(gn_text) != "full") {
    std::size_t pos = 0;
    long long v = 0;
    try {
      v = std::stoll(gn_text, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != gn_text.size() || v <= 0)
      throw Error(Errc::invalid_argument, "--GNsize expects a positive integer or 'full', got '" + gn_text + "'");
    cfg.gn_size = static_cast<std::size_t>(v);
  }

  if (!dim.empty()) {
    if (dim.size() != 3 || std::find(dim.begin(), dim.end(), 0) != dim.end())
      throw Error(Errc::invalid_argument, "--dim expects three positive extents H W C");
    cfg.dim = std::array<std::size_t, 3>{dim[0], dim[1], dim[2]};
  }

  const std::string m = lowercase(mode_text);
  if (m == "train") cfg.mode = RunMode::train;
  else if (m == "bench") cfg.mode = RunMode::bench;
  else throw Error(Errc::invalid_argument, "--mode expects train or bench, got '" + mode_text + "'");

  if (cfg.mode == RunMode::train) {
    if (cfg.train_set.empty()) throw Error(Errc::invalid_argument, "--train_set is required in train mode");
    if (!cfg.dim) throw Error(Errc::invalid_argument, "--dim is required in train mode");
  }
  if (cfg.gn_sizes.empty() || std::find(cfg.gn_sizes.begin(), cfg.gn_sizes.end(), 0) != cfg.gn_sizes.end())
    throw Error(Errc::invalid_argument, "--gn_sizes must be positive");

  s.max_outer_iters = cfg.iters;
  s.validate();
  return cfg;
}

inline CliConfig parse_args(int argc, const char* const* argv) {
  return parse_args(std::vector<std::string>(argv + 1, argv + argc));
}

// ---------------------------------------------------------------------------
// Datasets

enum class DataRole { train, test };

namespace detail {

inline std::optional<std::string> find_first(const std::filesystem::path& dir, std::initializer_list<const char*> names) {
  for (const char* n : names)
    if (std::filesystem::is_regular_file(dir / n)) return (dir / n).string();
  return std::nullopt;
}

inline bool has_suffix(const std::string& s, const std::string& suf) {
  return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

inline Dataset load_directory(const std::filesystem::path& dir, DataRole role) {
  const bool train = role == DataRole::train;
  auto images = train ? find_first(dir, {"train-images-idx3-ubyte", "train-images-idx3-ubyte.gz",
                                         "train-images.idx3-ubyte"})
                      : find_first(dir, {"t10k-images-idx3-ubyte", "t10k-images-idx3-ubyte.gz",
                                         "t10k-images.idx3-ubyte"});
  auto labels = train ? find_first(dir, {"train-labels-idx1-ubyte", "train-labels-idx1-ubyte.gz",
                                         "train-labels.idx1-ubyte"})
                      : find_first(dir, {"t10k-labels-idx1-ubyte", "t10k-labels-idx1-ubyte.gz",
                                         "t10k-labels.idx1-ubyte"});
  if (images && labels) return load_mnist_idx(*images, *labels);

  for (const auto& sub : {dir, dir / "cifar-10-batches-bin"}) {
    std::vector<std::string> bins;
    if (train) {
      for (int b = 1; b <= 5; ++b)
        if (auto p = find_first(sub, {("data_batch_" + std::to_string(b) + ".bin").c_str()})) bins.push_back(*p);
    } else if (auto p = find_first(sub, {"test_batch.bin"})) {
      bins.push_back(*p);
    }
    if (!bins.empty()) return load_cifar10(bins);
  }
  throw Error(Errc::io, "no " + std::string(train ? "training" : "test") + " MNIST or CIFAR-10 files in " +
                            dir.string());
}

}  // namespace detail

/// Resolves --train_set / --test_set values. `dim` reshapes the samples and
/// sets the shape of synthetic data (default 28x28x1).
inline Dataset load_dataset(const std::vector<std::string>& paths, DataRole role,
                            const std::optional<std::array<std::size_t, 3>>& dim, std::uint64_t seed) {
  if (paths.empty()) throw Error(Errc::invalid_argument, "no dataset given");
  Dataset d;
  if (paths.size() == 1 && paths[0].rfind("synthetic:", 0) == 0) {
    const std::string n_text = paths[0].substr(10);
    std::size_t pos = 0;
    long long n = 0;
    try {
      n = std::stoll(n_text, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != n_text.size() || n <= 0) throw Error(Errc::invalid_argument, "bad synthetic dataset '" + paths[0] + "'");
    const auto a = dim.value_or(std::array<std::size_t, 3>{28, 28, 1});
    return synthetic_dataset(static_cast<std::size_t>(n), Shape{a[0], a[1], a[2]}, 10,
                             role == DataRole::train ? seed : seed + 1);
  }
  if (paths.size() == 1 && std::filesystem::is_directory(paths[0])) {
    d = detail::load_directory(paths[0], role);
  } else if (std::all_of(paths.begin(), paths.end(), [](const auto& p) { return detail::has_suffix(p, ".bin"); })) {
    d = load_cifar10(paths);
  } else if (paths.size() == 2) {
    d = load_mnist_idx(paths[0], paths[1]);
  } else {
    throw Error(Errc::invalid_argument, "expected a directory, an IDX image and label file, CIFAR-10 .bin files "
                                        "or synthetic:N");
  }
  if (dim) d = with_dims(std::move(d), (*dim)[0], (*dim)[1], (*dim)[2]);
  return d;
}

// ---------------------------------------------------------------------------
// Artifacts

inline constexpr char kParamsMagic[4] = {'H', 'F', 'C', 'N'};
inline constexpr std::uint32_t kParamsVersion = 1;

/// 16-byte header ("HFCN", u32 version, u64 count) followed by the values,
/// all little-endian.
inline std::string encode_params(std::span<const double> values) {
  std::string out(kParamsMagic, 4);
  auto put = [&](std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  put(kParamsVersion, 4);
  put(values.size(), 8);
  for (double v : values) put(std::bit_cast<std::uint64_t>(v), 8);
  return out;
}

inline std::vector<double> decode_params(const std::string& bytes) {
  if (bytes.size() < 16 || bytes.compare(0, 4, std::string(kParamsMagic, 4)) != 0)
    throw Error(Errc::format, "not a parameters file");
  auto get = [&](std::size_t off, int n) {
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= std::uint64_t{static_cast<unsigned char>(bytes[off + i])} << (8 * i);
    return v;
  };
  if (get(4, 4) != kParamsVersion) throw Error(Errc::format, "unsupported parameters file version");
  const std::uint64_t n = get(8, 8);
  if (bytes.size() != 16 + n * 8) throw Error(Errc::format, "parameters file length does not match its count");
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = std::bit_cast<double>(get(16 + 8 * i, 8));
  return out;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(Errc::io, "cannot open " + path);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

/// Writes every (path, content) pair through temporary files and renames
/// them only once all writes succeeded.
inline void commit_files(const std::vector<std::pair<std::string, std::string>>& files) {
  std::vector<std::string> temps;
  auto cleanup = [&] {
    std::error_code ec;
    for (const auto& t : temps) std::filesystem::remove(t, ec);
  };
  try {
    for (const auto& [path, content] : files) {
      const std::string tmp = path + ".tmp";
      temps.push_back(tmp);
      std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
      if (!f) throw Error(Errc::io, "cannot write " + tmp);
      f.write(content.data(), static_cast<std::streamsize>(content.size()));
      f.close();
      if (!f) throw Error(Errc::io, "short write to " + tmp);
    }
    for (std::size_t i = 0; i < files.size(); ++i) std::filesystem::rename(temps[i], files[i].first);
  } catch (const std::filesystem::filesystem_error& e) {
    cleanup();
    throw Error(Errc::io, e.what());
  } catch (...) {
    cleanup();
    throw;
  }
}

// ---------------------------------------------------------------------------
// Runs

struct TrainSummary {
  NewtonState state;
  double train_accuracy = 0.0;
  std::optional<double> test_accuracy;
  std::string iteration_csv;
};

inline Network build_network(const CliConfig& cfg, const Dataset& d) {
  auto layers = cfg.net.empty() ? default_architecture(d.n_classes) : load_architecture(cfg.net);
  Network net(d.sample_shape, std::move(layers));
  if (net.n_classes() != d.n_classes)
    throw Error(Errc::shape_mismatch, "network has " + std::to_string(net.n_classes()) + " outputs, data has " +
                                          std::to_string(d.n_classes) + " classes");
  net.set_theta(init_params(net, cfg.seed));
  return net;
}

/// Trains without touching the filesystem except to read data.
inline TrainSummary train(const CliConfig& cfg, std::ostream& log) {
  const Dataset train_data = load_dataset(cfg.train_set, DataRole::train, cfg.dim, cfg.seed);
  std::optional<Dataset> test_data;
  if (!cfg.test_set.empty()) test_data = load_dataset(cfg.test_set, DataRole::test, cfg.dim, cfg.seed);

  Network net = build_network(cfg, train_data);
  NewtonConfig solver = cfg.solver;
  solver.max_outer_iters = cfg.iters;
  if (cfg.gn_size) {
    if (*cfg.gn_size > train_data.size())
      throw Error(Errc::invalid_argument, "--GNsize " + std::to_string(*cfg.gn_size) + " exceeds the " +
                                              std::to_string(train_data.size()) + " training samples");
    solver.gn_size = *cfg.gn_size;
  }
  Objective obj{&net, &train_data, 1e-5, cfg.bsize};
  Executor exec(cfg.workers, cfg.workers > 1 ? ExecMode::parallel : ExecMode::serial);

  log << "training on " << train_data.size() << " samples of shape " << train_data.sample_shape.str() << ", "
      << net.param_count() << " parameters, GNsize "
      << (solver.gn_size ? std::to_string(solver.gn_size) : "full") << ", " << exec.workers() << " worker(s)\n";

  TrainSummary out;
  std::ostringstream csv;
  write_iteration_csv_header(csv);
  out.state = newton_train(obj, solver, exec, [&](const IterationContext& ctx) {
    write_iteration_csv_row(csv, ctx.record);
    char buf[160];
    std::snprintf(buf, sizeof buf, "iter %3zu  f %.6e  |g| %.3e  alpha %-9g lambda %.3e  cg %zu\n", ctx.record.iter,
                  ctx.record.f, ctx.record.grad_norm, ctx.record.alpha, ctx.record.lambda, ctx.record.cg_iters);
    log << buf << std::flush;
  });
  out.iteration_csv = csv.str();
  net.set_theta(out.state.theta);
  out.train_accuracy = accuracy(net, out.state.theta, train_data, exec);
  if (test_data) out.test_accuracy = accuracy(net, out.state.theta, *test_data, exec);
  return out;
}

inline int run_train(const CliConfig& cfg, std::ostream& log) {
  const TrainSummary s = train(cfg, log);
  commit_files({{cfg.out_path(), s.iteration_csv}, {cfg.params, encode_params(s.state.theta.span())}});
  char buf[256];
  std::snprintf(buf, sizeof buf, "final f %.9e  |grad f| %.6e  train accuracy %.4f", s.state.f_val,
                norm2(s.state.grad), s.train_accuracy);
  log << buf;
  if (s.test_accuracy) {
    std::snprintf(buf, sizeof buf, "  test accuracy %.4f", *s.test_accuracy);
    log << buf;
  }
  log << "\nwrote " << cfg.out_path() << " and " << cfg.params << "\n";
  return 0;
}

inline int run_bench(const CliConfig& cfg, std::ostream& log) {
  std::vector<std::size_t> sizes = cfg.gn_sizes;
  const std::size_t largest = *std::max_element(sizes.begin(), sizes.end());
  const std::vector<std::string> source =
      cfg.train_set.empty() ? std::vector<std::string>{"synthetic:" + std::to_string(largest)} : cfg.train_set;
  const Dataset data = load_dataset(source, DataRole::train, cfg.dim, cfg.seed);
  for (auto& n : sizes) n = std::min(n, data.size());
  std::sort(sizes.begin(), sizes.end());
  sizes.erase(std::unique(sizes.begin(), sizes.end()), sizes.end());

  Network net = build_network(cfg, data);
  Objective obj{&net, &data, 1e-5, cfg.bsize};
  SweepOptions opt;
  opt.gn_sizes = sizes;
  opt.modes = {{ExecMode::serial, 1}, {ExecMode::parallel, cfg.workers}};
  opt.repeats = cfg.repeats;
  opt.seed = cfg.seed;
  log << "timing Gv on " << data.size() << " samples, " << net.param_count() << " parameters, sizes";
  for (auto n : sizes) log << ' ' << n;
  log << ", parallel workers " << cfg.workers << "\n" << std::flush;

  const auto rows = timed_gv_sweep(obj, net.theta(), opt);
  std::ostringstream csv;
  write_timing_csv(csv, rows);
  commit_files({{cfg.out_path(), csv.str()}});

  char buf[256];
  for (ExecMode m : {ExecMode::serial, ExecMode::parallel}) {
    std::vector<double> x, y;
    for (const auto& r : rows)
      if (r.mode == m) {
        x.push_back(static_cast<double>(r.gnsize));
        y.push_back(r.seconds_per_gv);
      }
    if (x.size() >= 2) {
      const LinearFit fit = fit_line(x, y);
      std::snprintf(buf, sizeof buf, "%-8s slope %.6e s/sample  intercept %.4e s  R^2 %.5f\n", mode_name(m), fit.slope,
                    fit.intercept, fit.r2);
      log << buf;
    }
  }
  for (std::size_t n : sizes) {
    double ser = 0, par = 0;
    for (const auto& r : rows)
      if (r.gnsize == n) (r.mode == ExecMode::serial ? ser : par) = r.seconds_per_gv;
    std::snprintf(buf, sizeof buf, "GNsize %6zu  serial %.4f s  parallel %.4f s  speedup %.3f\n", n, ser, par,
                  par > 0 ? ser / par : 0.0);
    log << buf;
  }
  log << "wrote " << cfg.out_path() << "\n";
  return 0;
}

/// Full entry point: returns the process exit status.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  try {
    const CliConfig cfg = parse_args(args);
    return cfg.mode == RunMode::train ? run_train(cfg, out) : run_bench(cfg, out);
  } catch (const HelpRequested& h) {
    out << h.text;
    return 0;
  } catch (const std::exception& e) {
    err << "hfcnn: error: " << e.what() << "\n";
    const auto* he = dynamic_cast<const Error*>(&e);
    return he && he->code() == Errc::invalid_argument ? 2 : 1;
  }
}

}  // namespace hfcnn
