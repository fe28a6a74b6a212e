// memo: command-line runner for the desk-scale memorization experiments.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "memo.hpp"

namespace {

struct RunFlags {
  std::string config_path;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  std::string mnist_dir;
  std::vector<std::string> assignments;
};

std::string default_mnist_dir() {
  if (const char* env = std::getenv("MEMO_MNIST_DIR"); env && *env) return env;
  return "data/mnist-5k";
}

int run(memo::ExperimentKind kind, const RunFlags& f) {
  memo::Config flags;
  for (const auto& a : f.assignments) flags.set_assignment(a);
  if (f.seed) flags.set("seed", std::to_string(*f.seed));
  if (f.workers) flags.set("workers", std::to_string(*f.workers));
  std::optional<memo::Config> file;
  if (!f.config_path.empty()) file = memo::Config::load(f.config_path);

  memo::ExperimentContext ctx;
  ctx.config = memo::resolve_config(kind, file, flags);
  ctx.out = f.out.empty() ? std::string("out/") + memo::to_string(kind) : f.out;
  const std::string dir = f.mnist_dir.empty() ? default_mnist_dir() : f.mnist_dir;
  memo::MnistSplits data;
  if (kind != memo::ExperimentKind::dump_filters || ctx.config.str("filters.params").empty()) {
    data = memo::load_mnist_dir(dir);
    ctx.data = &data;
  }
  memo::run_experiment(kind, ctx);
  std::cout << "wrote " << ctx.written.size() << " artifact(s) and manifest.json to " << ctx.out.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Memorization measurements for small MLPs on MNIST"};
  app.set_version_flag("--version", memo::kVersion);
  app.require_subcommand(1);

  RunFlags flags;
  std::optional<memo::ExperimentKind> chosen;
  for (auto kind : memo::all_experiments()) {
    auto* sub = app.add_subcommand(memo::to_string(kind), std::string("run the ") + memo::to_string(kind) + " experiment");
    sub->add_option("--config", flags.config_path, "key = value config file");
    sub->add_option("--out", flags.out, "output directory (default out/<experiment>)");
    sub->add_option("--seed", flags.seed, "global seed");
    sub->add_option("--workers", flags.workers, "concurrent cells");
    sub->add_option("--mnist-dir", flags.mnist_dir, "directory with the IDX files (env MEMO_MNIST_DIR, default data/mnist-5k)");
    sub->add_option("--set", flags.assignments, "override a config key: --set train.epochs=10");
    sub->callback([&chosen, kind] { chosen = kind; });
  }

  std::string defaults_for;
  auto* defaults = app.add_subcommand("defaults", "print an experiment's config keys and defaults");
  defaults->add_option("experiment", defaults_for)->required();

  std::string manifest;
  auto* verify = app.add_subcommand("verify", "check artifact hashes listed in a manifest.json");
  verify->add_option("manifest", manifest)->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);
  try {
    if (defaults->parsed()) {
      std::cout << memo::default_config(memo::parse_experiment_kind(defaults_for)).dump();
      return 0;
    }
    if (verify->parsed()) {
      const auto problems = memo::verify_manifest(manifest);
      for (const auto& p : problems) std::cerr << p << "\n";
      if (problems.empty()) std::cout << "ok\n";
      return problems.empty() ? 0 : 1;
    }
    return run(*chosen, flags);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
