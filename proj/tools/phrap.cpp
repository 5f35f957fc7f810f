#include <CLI11.hpp>

#include <phrap/scenario.hpp>

#include <iostream>

namespace {

namespace fs = std::filesystem;
namespace sc = phrap::scenario;

constexpr int kSchemaExit = 2;
constexpr int kPhysicsExit = 3;
constexpr int kCheckExit = 4;

std::vector<fs::path> bundled(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto ext = e.path().extension();
    if (e.is_regular_file() && (ext == ".jsonc" || ext == ".json")) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

// Accepts a path or the id of a bundled scenario.
fs::path resolve(const std::string& s, const fs::path& dir) {
  if (fs::exists(s)) return s;
  for (const auto& p : bundled(dir))
    if (p.stem() == s) return p;
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Phonon rapid adiabatic passage in two-ion crystals"};
  app.require_subcommand(1);

  std::string scenario, out_dir = "out", backend, scenario_dir = PHRAP_SCENARIO_DIR;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> traj;
  unsigned threads = 0;
  bool check = false;

  auto* run = app.add_subcommand("run", "run a scenario and write its outputs");
  run->add_option("--scenario", scenario, "scenario file or bundled id")->required();
  run->add_option("--out", out_dir, "output directory");
  run->add_option("--backend", backend, "dynamics backend")->check(CLI::IsMember({"linear", "ensemble", "both"}));
  run->add_option("--seed", seed, "ensemble seed");
  run->add_option("--traj", traj, "ensemble trajectories")->check(CLI::Range(std::size_t{2}, std::size_t{100000000}));
  run->add_option("--threads", threads, "worker threads (0: hardware)");
  run->add_flag("--check", check, "exit with 4 when a scenario check fails");

  auto* val = app.add_subcommand("validate", "dry-run confinement, continuity and adiabaticity checks");
  val->add_option("--scenario", scenario, "scenario file or bundled id")->required();

  auto* list = app.add_subcommand("list-scenarios", "list bundled scenarios");
  for (auto* s : {run, val, list}) s->add_option("--scenario-dir", scenario_dir, "bundled scenario directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (list->parsed()) {
      for (const auto& p : bundled(scenario_dir)) {
        try {
          const sc::Scenario s = sc::load(p);
          std::cout << std::left << std::setw(28) << s.id << std::setw(24) << s.experiment.type << s.description
                    << "\n";
        } catch (const phrap::SchemaError& e) {
          std::cout << std::left << std::setw(28) << p.stem().string() << "invalid: " << e.what() << "\n";
        }
      }
      return 0;
    }

    const sc::Scenario s = sc::load(resolve(scenario, scenario_dir));

    if (val->parsed()) {
      // findings are reported, never fatal
      for (const auto& f : sc::validate(s)) std::cout << f.severity << ": " << f.message << "\n";
      return 0;
    }

    sc::RunOptions opt;
    opt.out_dir = out_dir;
    if (!backend.empty()) opt.backend = sc::backend_from_string(backend);
    opt.seed = seed;
    opt.trajectories = traj;
    opt.threads = threads;
    const sc::RunOutcome r = sc::run(s, opt);
    std::cout << r.report;
    for (const auto& f : r.files) std::cout << "wrote " << f.string() << "\n";
    std::cout << "runtime " << std::setprecision(3) << r.runtime_s << " s (budget " << s.runtime_budget_s << " s)\n";
    if (check && !r.checks_passed()) return kCheckExit;
    return 0;
  } catch (const phrap::SchemaError& e) {
    std::cerr << "schema error: " << e.what() << "\n";
    return kSchemaExit;
  } catch (const phrap::PhysicsError& e) {
    std::cerr << "physics error: " << e.what() << "\n";
    return kPhysicsExit;
  }
}
