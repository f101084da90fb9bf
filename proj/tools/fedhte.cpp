// fedhte: command-line front end.
//
//   fedhte estimate --target T.csv --config C.json [--sources ...] [--select]
//                   [--bootstrap B --seed S] [--transport loopback|file|tcp]
//   fedhte site     --data S.csv --config C.json (--listen HOST:PORT | --handoff DIR)
//   fedhte simulate --scenario transportable --setting I --reps R --bootstrap B
//   fedhte truth    --scenario transportable --n-oracle N
//
// Exit codes: 0 ok, 2 configuration error, 3 protocol error, 4 non-convergence.

#include "fedhte/config.hpp"
#include "fedhte/fedhte.hpp"
#include "fedhte/reference_truth.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace fs = std::filesystem;
using Json = nlohmann::json;
using namespace fedhte;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitProtocol = 3;
constexpr int kExitNonConvergence = 4;

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("fedhte");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%l] %v");
  spdlog::set_level(spdlog::level::warn);
  if (const char* env = std::getenv("FEDHTE_LOG")) {
    const std::string v = env;
    if (v == "error") spdlog::set_level(spdlog::level::err);
    else if (v == "warn") spdlog::set_level(spdlog::level::warn);
    else if (v == "info") spdlog::set_level(spdlog::level::info);
    else if (v == "debug") spdlog::set_level(spdlog::level::debug);
    else spdlog::warn("FEDHTE_LOG='{}' not recognised; using warn", v);
  }
}

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& given) {
  if (given) return *given;
  std::random_device rd;
  const std::uint64_t s = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
  std::cerr << "seed: " << s << '\n';
  return s;
}

Json vec_json(const Vector& v) {
  Json a = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (std::isfinite(v[i])) a.push_back(v[i]);
    else a.push_back(nullptr);
  }
  return a;
}

std::pair<std::string, std::uint16_t> parse_host_port(const std::string& s) {
  const auto colon = s.rfind(':');
  if (colon == std::string::npos) throw ConfigError("expected HOST:PORT, got '" + s + "'");
  const std::string host = s.substr(0, colon);
  int port = 0;
  try {
    port = std::stoi(s.substr(colon + 1));
  } catch (const std::exception&) {
    throw ConfigError("bad port in '" + s + "'");
  }
  if (port < 0 || port > 65535) throw ConfigError("port out of range in '" + s + "'");
  return {host.empty() ? "127.0.0.1" : host, static_cast<std::uint16_t>(port)};
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

std::vector<fs::path> csv_inputs(const std::string& spec) {
  std::vector<fs::path> out;
  if (fs::is_directory(spec)) {
    for (const auto& e : fs::directory_iterator(spec)) {
      if (e.is_regular_file() && e.path().extension() == ".csv") out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    if (out.empty()) throw ConfigError("no .csv files in '" + spec + "'");
    return out;
  }
  for (const auto& p : split_list(spec)) out.emplace_back(p);
  return out;
}

wire::RoundConfig round_config_of(const AnalysisSpec& spec) {
  wire::RoundConfig rc;
  rc.design = wire::DesignDescriptor::from(spec.design);
  rc.tilt = spec.tilt;
  rc.tilt_enabled = spec.tilt_enabled;
  rc.ps = spec.ps;
  rc.or_spec = spec.or_spec;
  return rc;
}

// ---------------------------------------------------------------------------
// estimate

struct EstimateArgs {
  std::string target;
  std::string config;
  std::string sources;
  std::string sites;
  bool select = false;
  std::string weights;
  int bootstrap = 0;
  std::optional<std::uint64_t> seed;
  std::string transport = "loopback";
  std::string out = ".";
  double timeout = 300.0;
  bool strict = false;
};

Json selection_json(const SelectionReport& r) {
  Json j;
  Json sources = Json::array();
  for (const auto& s : r.sources) {
    Json e;
    e["site_id"] = s.site_id;
    e["retained"] = s.retained;
    e["reason"] = s.reason;
    e["mean_delta"] = vec_json(s.mean_delta);
    e["sd_delta"] = vec_json(s.sd_delta);
    e["ci_lower"] = vec_json(s.ci_lower);
    e["ci_upper"] = vec_json(s.ci_upper);
    if (std::isfinite(s.chi_square)) e["chi_square"] = s.chi_square;
    else e["chi_square"] = nullptr;
    e["replicates_used"] = s.replicates_used;
    e["replicates_failed"] = s.replicates_failed;
    sources.push_back(e);
  }
  j["sources"] = sources;
  j["final_weights"] = r.final_weights;
  j["warnings"] = r.warnings;
  j["excluded"] = r.excluded();
  return j;
}

std::string estimate_text(const AnalysisResult& r, const AnalysisSpec& spec) {
  std::ostringstream out;
  const bool logit = spec.design.link().kind() == LinkKind::logit;
  out << "Heterogeneous treatment effect estimates ("
      << (logit ? "log odds ratio scale" : to_string(spec.design.link().kind()) + " link") << ")\n\n";
  out << std::left << std::setw(16) << "coefficient" << std::right << std::setw(12) << "target"
      << std::setw(10) << "SE" << std::setw(12) << "federated" << std::setw(10) << "SE"
      << std::setw(24) << "95% CI" << '\n';
  const Vector tse = r.target_only.standard_errors();
  const auto& labels = spec.design.labels();
  for (std::size_t j = 0; j < labels.size(); ++j) {
    const auto k = static_cast<Eigen::Index>(j);
    std::ostringstream ci;
    ci << std::fixed << std::setprecision(3) << '[' << r.ci_lower[k] << ", " << r.ci_upper[k] << ']';
    out << std::left << std::setw(16) << labels[j] << std::right << std::fixed << std::setprecision(4)
        << std::setw(12) << r.target_only.beta[k] << std::setw(10) << tse[k] << std::setw(12)
        << r.federated.beta[k] << std::setw(10) << r.se[k] << std::setw(24) << ci.str() << '\n';
  }
  out << "\nSite weights\n";
  for (const auto& [site, w] : r.weights) {
    out << "  " << std::left << std::setw(24) << site << std::right << std::fixed << std::setprecision(4)
        << w << '\n';
  }
  if (r.selection) {
    out << "\nSource selection (paired bootstrap differences)\n";
    for (const auto& s : r.selection->sources) {
      out << "  " << std::left << std::setw(24) << s.site_id << (s.retained ? "retained" : "excluded");
      if (!s.reason.empty()) out << "  (" << s.reason << ')';
      out << '\n';
    }
  }
  for (const auto& u : r.unavailable) out << "\nunavailable: " << u.site_id << ": " << u.reason << '\n';
  for (const auto& w : r.warnings) out << "warning: " << w << '\n';
  out << "\ntranscript digest " << r.transcript_digest << ", rounds " << r.rounds << '\n';
  return out.str();
}

int run_estimate(const EstimateArgs& a) {
  AnalysisSpec spec = load_analysis_spec(a.config);
  if (!a.weights.empty()) {
    const WeightKind k = weight_kind_from_string(a.weights);
    if (k == WeightKind::explicit_weights) {
      throw ConfigError("--weights explicit needs a site map in the config file");
    }
    spec.weights = WeightScheme{k, {}};
  }
  const ObservationTable target = load_csv(a.target, spec.schema);
  spdlog::info("target '{}': {} rows", target.site_id(), target.n());

  AnalysisConfig cfg;
  cfg.design = spec.design;
  cfg.ps = spec.ps;
  cfg.or_spec = spec.or_spec;
  cfg.tilt = spec.tilt;
  cfg.tilt_enabled = spec.tilt_enabled;
  cfg.weights = spec.weights;
  cfg.select = a.select;
  cfg.selection = spec.selection;
  cfg.B = a.bootstrap;
  cfg.strict = a.strict;
  cfg.seed = (a.bootstrap > 0 || a.seed) ? resolve_seed(a.seed) : 0;

  const auto timeout = std::chrono::milliseconds(static_cast<long>(a.timeout * 1000.0));
  std::vector<ObservationTable> local_tables;
  std::vector<std::unique_ptr<wire::Channel>> channels;
  if (!a.sources.empty()) {
    if (a.transport == "loopback") {
      for (const auto& p : csv_inputs(a.sources)) local_tables.push_back(load_csv(p, spec.schema));
      for (const auto& t : local_tables) {
        const ObservationTable* tp = &t;
        channels.push_back(std::make_unique<wire::LoopbackChannel>(
            t.site_id(), [tp](const std::string& req) { return wire::handle_request(*tp, req); }));
      }
    } else if (a.transport == "file") {
      std::vector<std::string> ids = split_list(a.sites);
      if (ids.empty()) {
        if (!fs::is_directory(a.sources)) throw ConfigError("hand-off directory '" + a.sources + "' not found");
        for (const auto& e : fs::directory_iterator(a.sources)) {
          if (e.is_directory()) ids.push_back(e.path().filename().string());
        }
        std::sort(ids.begin(), ids.end());
      }
      if (ids.empty()) throw ConfigError("no site directories under '" + a.sources + "' (use --sites)");
      for (const auto& id : ids) {
        channels.push_back(std::make_unique<wire::FileExchangeChannel>(a.sources, id, timeout));
      }
    } else if (a.transport == "tcp") {
      for (const auto& item : split_list(a.sources)) {
        const auto at = item.find('@');
        if (at == std::string::npos) throw ConfigError("tcp sources are SITE@HOST:PORT, got '" + item + "'");
        const auto [host, port] = parse_host_port(item.substr(at + 1));
        channels.push_back(std::make_unique<wire::TcpChannel>(item.substr(0, at), host, port, timeout));
      }
    } else {
      throw ConfigError("unknown transport '" + a.transport + "'");
    }
  }
  std::vector<wire::Channel*> raw;
  for (auto& c : channels) raw.push_back(c.get());

  const AnalysisResult r = run_analysis(target, raw, cfg);
  for (const auto& w : r.warnings) spdlog::warn("{}", w);

  Json j;
  j["version"] = kConfigVersion;
  j["labels"] = spec.design.labels();
  j["link"] = to_string(spec.design.link().kind());
  j["beta"] = vec_json(r.federated.beta);
  j["se"] = vec_json(r.se);
  j["ci_lower"] = vec_json(r.ci_lower);
  j["ci_upper"] = vec_json(r.ci_upper);
  j["se_source"] = to_string(r.federated.se_source);
  j["converged"] = r.federated.converged;
  j["target_only"] = {{"beta", vec_json(r.target_only.beta)},
                      {"se", vec_json(r.target_only.standard_errors())},
                      {"se_source", to_string(r.target_only.se_source)},
                      {"converged", r.target_only.converged}};
  j["weights"] = r.weights;
  j["selection"] = r.selection ? selection_json(*r.selection) : Json(nullptr);
  Json unavailable = Json::array();
  for (const auto& u : r.unavailable) unavailable.push_back({{"site_id", u.site_id}, {"reason", u.reason}});
  j["unavailable"] = unavailable;
  j["warnings"] = r.warnings;
  j["transcript_digest"] = r.transcript_digest;
  j["rounds"] = r.rounds;
  j["bootstrap"] = {{"B", cfg.B}, {"seed", cfg.seed}, {"failures", r.bootstrap_failures}};

  const fs::path out(a.out);
  write_file_atomic(out / "estimate.json", j.dump(2) + "\n");
  write_file_atomic(out / "estimate.txt", estimate_text(r, spec));
  std::cout << estimate_text(r, spec);
  if (!r.federated.converged || !r.target_only.converged) {
    spdlog::error("estimating equation did not converge");
    return kExitNonConvergence;
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// site

struct SiteArgs {
  std::string data;
  std::string config;
  std::string site_id;
  std::string listen;
  std::string handoff;
  bool persist = false;
  double timeout = 300.0;
};

int run_site(const SiteArgs& a) {
  if (a.listen.empty() == a.handoff.empty()) throw ConfigError("give exactly one of --listen or --handoff");
  const AnalysisSpec spec = load_analysis_spec(a.config);
  const ObservationTable table = load_csv(a.data, spec.schema, a.site_id);
  wire::SiteOptions opt;
  opt.expected_config_hash = round_config_of(spec).hash();
  const wire::Handler handler = [&](const std::string& req) {
    spdlog::info("site '{}': request of {} bytes", table.site_id(), req.size());
    return wire::handle_request(table, req, opt);
  };
  const auto timeout = std::chrono::milliseconds(static_cast<long>(a.timeout * 1000.0));
  if (!a.listen.empty()) {
    const auto [host, port] = parse_host_port(a.listen);
    wire::TcpListener listener(port, host);
    std::cout << "site " << table.site_id() << " listening on " << host << ':' << listener.port() << std::endl;
    do {
      listener.serve_one(handler, timeout);
    } while (a.persist);
  } else {
    const wire::FileExchangeLayout layout{a.handoff, table.site_id()};
    fs::create_directories(layout.site_dir());
    std::cout << "site " << table.site_id() << " waiting in " << layout.site_dir().string() << std::endl;
    do {
      wire::serve_file_exchange(layout, handler, timeout);
    } while (a.persist);
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// simulate

struct SimulateArgs {
  std::string scenario = "transportable";
  std::string setting = "I";
  int reps = 100;
  int bootstrap = 200;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  int threads = 0;
  int n1 = 300;
  int ks = 10;
  std::string estimators;
};

int run_simulate(const SimulateArgs& a) {
  const sim::Scenario scenario = sim::scenario_from_string(a.scenario);
  sim::DgpConfig cfg = scenario == sim::Scenario::transportable
                           ? sim::DgpConfig::transportable(a.n1, a.ks, sim::setting_from_string(a.setting))
                           : sim::DgpConfig::non_transportable();
  cfg.seed = resolve_seed(a.seed);
  sim::StudyOptions opt;
  opt.reps = a.reps;
  opt.B = a.bootstrap;
  opt.threads = a.threads > 0 ? a.threads : std::max(1u, std::thread::hardware_concurrency());
  if (!a.estimators.empty()) {
    opt.estimators.clear();
    for (const auto& e : split_list(a.estimators)) opt.estimators.push_back(sim::estimator_from_string(e));
  } else if (scenario == sim::Scenario::non_transportable && a.bootstrap > 0) {
    opt.estimators.push_back(sim::Estimator::fed_bs);
  }
  opt.progress = [](int done, int total) {
    if (done % 10 == 0 || done == total) spdlog::info("replicate {}/{}", done, total);
  };
  const sim::StudyResult r = sim::run_study(cfg, sim::reference_truth(scenario), opt);
  for (const auto& m : r.failure_messages) spdlog::warn("{}", m);
  std::ostringstream title;
  title << sim::to_string(scenario) << ", setting " << sim::to_string(cfg.setting) << ", n1 = " << cfg.n1
        << ", Ks = " << cfg.Ks << ", reps = " << a.reps << ", B = " << a.bootstrap << ", seed = " << cfg.seed;
  const fs::path out(a.out);
  write_file_atomic(out / "metrics.csv", sim::metrics_csv(r));
  write_file_atomic(out / "table.txt", sim::metrics_table(r, title.str()));
  std::cout << sim::metrics_table(r, title.str());
  return kExitOk;
}

// ---------------------------------------------------------------------------
// truth

struct TruthArgs {
  std::string scenario = "transportable";
  long n_oracle = 2'000'000;
  std::optional<std::uint64_t> seed;
  std::string out;
};

int run_truth(const TruthArgs& a) {
  const sim::Scenario scenario = sim::scenario_from_string(a.scenario);
  const sim::DgpConfig cfg = scenario == sim::Scenario::transportable
                                 ? sim::DgpConfig::transportable(300, 10, sim::Setting::I)
                                 : sim::DgpConfig::non_transportable();
  sim::TruthOptions opt;
  opt.n_oracle = a.n_oracle;
  if (a.seed) opt.seed = *a.seed;
  const sim::TruthResult r = sim::truth_oracle(cfg, sim::default_design(), opt);
  Json j;
  j["scenario"] = sim::to_string(scenario);
  j["labels"] = r.labels;
  j["beta"] = vec_json(r.beta);
  j["n_oracle"] = a.n_oracle;
  j["seed"] = opt.seed;
  j["certificate"] = {{"half_a", vec_json(r.half_a)},
                      {"half_b", vec_json(r.half_b)},
                      {"max_half_diff", r.max_half_diff},
                      {"agreement_ok", r.agreement_ok},
                      {"mc_se", vec_json(r.mc_se)},
                      {"check_residual", vec_json(r.check_residual)},
                      {"check_residual_se", vec_json(r.check_residual_se)},
                      {"residual_ok", r.residual_ok}};
  const std::string text = j.dump(2) + "\n";
  if (a.out.empty()) std::cout << text;
  else write_file_atomic(a.out, text);
  if (!r.agreement_ok) {
    spdlog::error("half-sample oracles disagree by {:.2e} (> 0.005); increase --n-oracle", r.max_half_diff);
    return kExitNonConvergence;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"Doubly robust targeted-federated estimation of heterogeneous treatment effects"};
  app.require_subcommand(1);

  EstimateArgs ea;
  auto* est = app.add_subcommand("estimate", "Estimate on a target dataset, optionally federated with sources");
  est->add_option("--target", ea.target, "Target CSV")->required();
  est->add_option("--config", ea.config, "Analysis config (JSON)")->required();
  est->add_option("--sources", ea.sources,
                  "loopback: CSV directory or comma list; file: hand-off directory; tcp: SITE@HOST:PORT list");
  est->add_option("--sites", ea.sites, "file transport: comma list of site ids (default: subdirectories)");
  est->add_flag("--select", ea.select, "Bootstrap source selection (needs --bootstrap)");
  est->add_option("--weights", ea.weights, "target_only | sample_size | uniform");
  est->add_option("--bootstrap", ea.bootstrap, "Bootstrap replicates B (0: sandwich SE for target-only)")
      ->check(CLI::NonNegativeNumber);
  est->add_option("--seed", ea.seed, "Random seed (default: entropy, printed)");
  est->add_option("--transport", ea.transport, "loopback | file | tcp")
      ->check(CLI::IsMember({"loopback", "file", "tcp"}));
  est->add_option("--out", ea.out, "Output directory");
  est->add_option("--timeout", ea.timeout, "Per-site timeout in seconds");
  est->add_flag("--strict", ea.strict, "Fail instead of dropping sources with failed fits");

  SiteArgs sa;
  auto* site = app.add_subcommand("site", "Serve one protocol round for a local dataset");
  site->add_option("--data", sa.data, "Local CSV")->required();
  site->add_option("--config", sa.config, "Analysis config (JSON); supplies the schema and expected hash")
      ->required();
  site->add_option("--site-id", sa.site_id, "Site id (default: CSV file stem)");
  site->add_option("--listen", sa.listen, "HOST:PORT to listen on (port 0 picks one)");
  site->add_option("--handoff", sa.handoff, "Hand-off directory for file exchange");
  site->add_flag("--persist", sa.persist, "Keep serving rounds until killed");
  site->add_option("--timeout", sa.timeout, "Seconds to wait for a request");

  SimulateArgs ma;
  auto* simc = app.add_subcommand("simulate", "Monte Carlo study");
  simc->add_option("--scenario", ma.scenario, "transportable | non_transportable")
      ->check(CLI::IsMember({"transportable", "non_transportable"}));
  simc->add_option("--setting", ma.setting, "I | II | III")->check(CLI::IsMember({"I", "II", "III"}));
  simc->add_option("--reps", ma.reps, "Replicates")->check(CLI::PositiveNumber);
  simc->add_option("--bootstrap", ma.bootstrap, "Bootstrap B per replicate (0: point estimates only)")
      ->check(CLI::NonNegativeNumber);
  simc->add_option("--seed", ma.seed, "Random seed (default: entropy, printed)");
  simc->add_option("--out", ma.out, "Output directory for metrics.csv and table.txt");
  simc->add_option("--threads", ma.threads, "Worker threads (default: available parallelism)");
  simc->add_option("--n1", ma.n1, "Target size (transportable scenario)")->check(CLI::PositiveNumber);
  simc->add_option("--ks", ma.ks, "Number of sources (transportable scenario)")->check(CLI::PositiveNumber);
  simc->add_option("--estimators", ma.estimators, "Comma list: target_only,fed_ss,fed_ss_naive,fed_bs");

  TruthArgs ta;
  auto* truth = app.add_subcommand("truth", "Projection truth by brute-force oracle");
  truth->add_option("--scenario", ta.scenario, "transportable | non_transportable")
      ->check(CLI::IsMember({"transportable", "non_transportable"}));
  truth->add_option("--n-oracle", ta.n_oracle, "Oracle draws, split into two halves")->check(CLI::PositiveNumber);
  truth->add_option("--seed", ta.seed, "Oracle seed");
  truth->add_option("--out", ta.out, "Write JSON here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  }

  try {
    if (*est) return run_estimate(ea);
    if (*site) return run_site(sa);
    if (*simc) return run_simulate(ma);
    if (*truth) return run_truth(ta);
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    return kExitConfig;
  } catch (const DataError& e) {
    spdlog::error("{}", e.what());
    return kExitConfig;
  } catch (const ProtocolError& e) {
    spdlog::error("{}", e.what());
    return kExitProtocol;
  } catch (const NumericalError& e) {
    spdlog::error("{}", e.what());
    return kExitNonConvergence;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kExitConfig;
  }
  return kExitOk;
}
