#pragma once

// Command-line front end: datagen, pretrain, metatrain, eval, spectrum.
//
// Every subcommand accepts `--config FILE` holding `key = value` lines (`#`
// starts a comment). Keys are the long flag names; `_` and `-` are
// interchangeable. Precedence: flag > config file > built-in default.
// Unknown keys are rejected.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "protokd/protokd.hpp"

namespace protokd::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Everything a run can be configured with, across all subcommands.
struct RunConfig {
  std::string command;
  fs::path out;
  fs::path data;        // directory holding dataset.csv and splits.csv
  fs::path init;        // metatrain starting checkpoint
  fs::path checkpoint;  // eval / spectrum model
  std::uint64_t seed = 0;
  unsigned threads = 1;

  GenSpec gen;
  PretrainConfig pre;
  TrainConfig train;
  std::vector<double> lambda_sweep;
  int checkpoint_every = 0;

  EvalSettings eval;
  std::string eval_split = "novel";

  SpectrumSettings spectrum;
  std::string spectrum_split = "base";
  bool no_center = false;
};

/// Config reader for flat `key = value` files. Keys are routed to whichever
/// subcommand was selected on the command line; snake_case is accepted.
class KeyValueConfig : public CLI::ConfigBase {
 public:
  explicit KeyValueConfig(const CLI::App* root) : root_(root) {}

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    auto items = CLI::ConfigBase::from_config(input);
    const auto selected = root_->get_subcommands();
    for (auto& item : items) {
      if (item.name == "++" || item.name == "--") continue;
      std::replace(item.name.begin(), item.name.end(), '_', '-');
      if (item.parents.empty() && !selected.empty()) item.parents.push_back(selected.front()->get_name());
    }
    return items;
  }

 private:
  const CLI::App* root_;
};

namespace detail {

inline CLI::App* add_command(CLI::App& app, const std::string& name, const std::string& help, RunConfig& cfg) {
  CLI::App* sub = app.add_subcommand(name, help);
  sub->fallthrough(true);  // lets --config follow the subcommand name
  sub->add_option("--seed", cfg.seed, "master seed")->capture_default_str();
  sub->add_option("--threads", cfg.threads, "worker threads (1 = exact reproducibility)")
      ->capture_default_str()
      ->check(CLI::Range(1u, 1024u));
  return sub;
}

inline void add_data_option(CLI::App* sub, RunConfig& cfg) {
  sub->add_option("--data", cfg.data, "directory containing dataset.csv and splits.csv")
      ->required()
      ->check(CLI::ExistingDirectory);
}

inline void add_out_option(CLI::App* sub, RunConfig& cfg, bool required) {
  auto* opt = sub->add_option("--out", cfg.out, "output directory");
  if (required) opt->required();
}

inline const std::vector<std::string> kSplitNames{"base", "val", "novel"};

inline Split split_from(const std::string& s) { return *parse_split(s); }

inline Dataset load_data_dir(const fs::path& dir) { return load_dataset(dir / "dataset.csv", dir / "splits.csv"); }

inline void prepare_out(const fs::path& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out)) throw std::runtime_error("cannot create output directory " + out.string());
}

inline void require_file(const fs::path& p, const char* what) {
  if (!fs::is_regular_file(p)) throw std::invalid_argument(std::string(what) + " not found: " + p.string());
}

/// Lambda values become directory names; %.17g keeps them exact and stable.
inline std::string lambda_dir(double v) { return "lambda_" + format_double(v); }

}  // namespace detail

/// Build the parser, binding every option to a field of `cfg`.
inline std::unique_ptr<CLI::App> build_app(RunConfig& cfg) {
  auto app = std::make_unique<CLI::App>("Prototype-based few-shot learning with self-distillation", "protokd");
  app->require_subcommand(1);
  app->config_formatter(std::make_shared<KeyValueConfig>(app.get()));
  app->set_config("--config", "", "key = value configuration file; flags override it");
  app->allow_config_extras(CLI::config_extras_mode::error);

  // datagen
  {
    CLI::App* sub = detail::add_command(*app, "datagen", "generate a synthetic few-shot dataset", cfg);
    detail::add_out_option(sub, cfg, true);
    GenSpec& g = cfg.gen;
    sub->add_option("--n-base", g.n_base)->capture_default_str();
    sub->add_option("--n-val", g.n_val)->capture_default_str();
    sub->add_option("--n-novel", g.n_novel)->capture_default_str();
    sub->add_option("--samples-per-class", g.samples_per_class)->capture_default_str();
    sub->add_option("--ambient-dim", g.ambient_dim)->capture_default_str();
    sub->add_option("--signal-dim", g.signal_dim)->capture_default_str();
    sub->add_option("--shared-dim", g.shared_dim)->capture_default_str();
    sub->add_option("--noise-sigma", g.noise_sigma)->capture_default_str();
    sub->add_option("--class-scale", g.class_scale)->capture_default_str();
    sub->add_option("--novel-shared-scale", g.novel_shared_scale)->capture_default_str();
    sub->add_option("--base-shared-scale", g.base_shared_scale)->capture_default_str();
    sub->add_option("--nuisance-sigma", g.nuisance_sigma)->capture_default_str();
    sub->add_option("--novel-signal-scale", g.novel_signal_scale)->capture_default_str();
  }

  // pretrain
  {
    CLI::App* sub = detail::add_command(*app, "pretrain", "cross-entropy pre-training on base classes", cfg);
    detail::add_data_option(sub, cfg);
    detail::add_out_option(sub, cfg, true);
    PretrainConfig& p = cfg.pre;
    sub->add_option("--hidden", p.hidden_dims, "layer widths after the input; the last is the embedding dim")
        ->delimiter(',')
        ->expected(1, 64)
        ->capture_default_str();
    sub->add_option("--epochs", p.epochs)->capture_default_str()->check(CLI::NonNegativeNumber);
    sub->add_option("--batch-size", p.batch_size)->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_option("--lr", p.lr, "peak learning rate, cosine-annealed to 0")->capture_default_str();
    sub->add_option("--momentum", p.momentum)->capture_default_str();
    sub->add_option("--weight-decay", p.weight_decay)->capture_default_str();
    sub->add_option("--val-episodes", p.val_episodes, "per-epoch val episodes; 0 disables")->capture_default_str();
  }

  // metatrain
  {
    CLI::App* sub = detail::add_command(*app, "metatrain", "episodic meta-training with self-distillation", cfg);
    detail::add_data_option(sub, cfg);
    detail::add_out_option(sub, cfg, true);
    sub->add_option("--init", cfg.init, "pre-trained checkpoint (initial student and teacher)")
        ->required()
        ->check(CLI::ExistingFile);
    TrainConfig& t = cfg.train;
    sub->add_option("--epochs", t.epochs)->capture_default_str();
    sub->add_option("--iters-per-epoch", t.iters_per_epoch)->capture_default_str();
    sub->add_option("--n-way", t.n_way)->capture_default_str();
    sub->add_option("--k-shot", t.k_shot)->capture_default_str();
    sub->add_option("--q-per-class", t.q_per_class)->capture_default_str();
    sub->add_option("--lambda1", t.lambda1, "SKL weight")->capture_default_str();
    sub->add_option("--lambda2", t.lambda2, "NNSKL weight")->capture_default_str();
    sub->add_option("--lambda-sweep", cfg.lambda_sweep,
                    "run once per value with lambda1 = lambda2 = value, each into out/lambda_<value>/")
        ->delimiter(',');
    sub->add_option("--skl-batch-size", t.skl_batch_size)->capture_default_str();
    sub->add_option("--val-episodes", t.val_episodes)->capture_default_str();
    sub->add_option("--val-n-way", t.val_n_way)->capture_default_str();
    sub->add_option("--lr", t.lr)->capture_default_str();
    sub->add_option("--momentum", t.momentum)->capture_default_str();
    sub->add_option("--weight-decay", t.weight_decay)->capture_default_str();
    sub->add_option("--tau", t.tau, "softmax temperature over negative distances")->capture_default_str();
    const std::map<std::string, NnsklGradMode> modes{{"exact", NnsklGradMode::exact},
                                                     {"paper_approx", NnsklGradMode::paper_approx}};
    sub->add_option("--nnskl-grad", t.nnskl_grad, "exact | paper_approx")
        ->transform(CLI::CheckedTransformer(modes, CLI::ignore_case));
    sub->add_option("--checkpoint-every", cfg.checkpoint_every, "write epoch_<n>.ckpt every n epochs; 0 disables")
        ->capture_default_str()
        ->check(CLI::NonNegativeNumber);
  }

  // eval
  {
    CLI::App* sub = detail::add_command(*app, "eval", "few-shot accuracy with a 95% confidence interval", cfg);
    detail::add_data_option(sub, cfg);
    detail::add_out_option(sub, cfg, false);
    sub->add_option("--checkpoint", cfg.checkpoint)->required()->check(CLI::ExistingFile);
    sub->add_option("--split", cfg.eval_split)->capture_default_str()->check(CLI::IsMember(detail::kSplitNames));
    sub->add_option("--episodes", cfg.eval.n_episodes)->capture_default_str()->check(CLI::Range(2, 1 << 30));
    sub->add_option("--n-way", cfg.eval.n_way)->capture_default_str();
    sub->add_option("--k-shot", cfg.eval.k_shot)->capture_default_str();
    sub->add_option("--q-per-class", cfg.eval.q_per_class)->capture_default_str();
  }

  // spectrum
  {
    CLI::App* sub = detail::add_command(*app, "spectrum", "singular-value spectrum and class geometry of embeddings", cfg);
    detail::add_data_option(sub, cfg);
    detail::add_out_option(sub, cfg, true);
    sub->add_option("--checkpoint", cfg.checkpoint)->required()->check(CLI::ExistingFile);
    sub->add_option("--split", cfg.spectrum_split)->capture_default_str()->check(CLI::IsMember(detail::kSplitNames));
    sub->add_option("--max-samples", cfg.spectrum.max_samples)->capture_default_str();
    sub->add_option("--threshold", cfg.spectrum.threshold, "relative effective-rank cut")->capture_default_str();
    sub->add_flag("--no-center", cfg.no_center, "skip column mean-centering before the SVD");
  }
  return app;
}

/// Parse `args` (without the program name) into `cfg`. Returns an exit code
/// when the process should stop (help, usage error), or -1 to continue.
inline int parse_args(const std::vector<std::string>& args, RunConfig& cfg, std::ostream& out, std::ostream& err) {
  auto app = build_app(cfg);
  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app->parse(reversed);
  } catch (const CLI::CallForHelp&) {
    auto* sub = app->get_subcommands().empty() ? app.get() : app->get_subcommands().front();
    out << sub->help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app->help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    err << "run with --help for usage\n";
    return kExitUsage;
  }
  cfg.command = app->get_subcommands().front()->get_name();
  cfg.gen.seed = cfg.seed;
  cfg.pre.seed = cfg.seed;
  cfg.train.seed = cfg.seed;
  cfg.pre.threads = cfg.threads;
  cfg.train.threads = cfg.threads;
  cfg.eval.threads = cfg.threads;
  cfg.spectrum.seed = cfg.seed;
  cfg.spectrum.center = !cfg.no_center;
  return -1;
}

// ---------------------------------------------------------------------------
// Commands

/// Checks that need no heavy work: input paths and option values.
inline void validate_run(const RunConfig& cfg) {
  if (cfg.command == "datagen") cfg.gen.validate();
  if (cfg.command == "metatrain") {
    cfg.train.validate();
    for (double v : cfg.lambda_sweep)
      if (!(v >= 0.0)) throw std::invalid_argument("lambda-sweep values must be non-negative");
  }
  if (!cfg.data.empty()) {
    detail::require_file(cfg.data / "dataset.csv", "dataset file");
    detail::require_file(cfg.data / "splits.csv", "splits file");
  }
}

inline int cmd_datagen(const RunConfig& cfg, std::ostream& out) {
  cfg.gen.validate();
  detail::prepare_out(cfg.out);
  const Generated g = generate(cfg.gen);
  write_dataset(g.dataset, cfg.out / "dataset.csv", cfg.out / "splits.csv");
  write_metadata(g.meta, cfg.out / "metadata.txt");
  out << "datagen: " << g.dataset.size() << " samples, dim " << g.dataset.dim() << ", classes base/val/novel "
      << g.dataset.n_classes(Split::base) << '/' << g.dataset.n_classes(Split::val) << '/'
      << g.dataset.n_classes(Split::novel) << " -> " << cfg.out.string() << '\n';
  return kExitOk;
}

inline int cmd_pretrain(const RunConfig& cfg, std::ostream& out) {
  const Dataset ds = detail::load_data_dir(cfg.data);
  detail::prepare_out(cfg.out);
  const PretrainResult res = pretrain(ds, cfg.pre);
  save_checkpoint(cfg.out / "pretrain.ckpt", res.params);
  {
    auto log = open_for_write(cfg.out / "pretrain_log.csv");
    log << "epoch,loss,train_acc,val_acc\n";
    for (const auto& l : res.logs)
      log << l.epoch << ',' << format_double(l.loss) << ',' << format_double(l.train_acc) << ','
          << format_double(l.val_acc) << '\n';
    if (!log) throw std::runtime_error("write failed: pretrain_log.csv");
  }
  out << "pretrain: " << res.logs.size() << " epochs, final base train accuracy "
      << format_double(base_train_accuracy(res.params, ds)) << " -> " << cfg.out.string() << '\n';
  return kExitOk;
}

inline void write_epoch_logs(const std::vector<EpochLog>& logs, const fs::path& path) {
  auto out = open_for_write(path);
  out << "epoch,sc,skl,nnskl,meta,val_acc,teacher_replaced,teacher_val_acc\n";
  for (const auto& l : logs)
    out << l.epoch << ',' << format_double(l.mean_sc) << ',' << format_double(l.mean_skl) << ','
        << format_double(l.mean_nnskl) << ',' << format_double(l.mean_meta) << ',' << format_double(l.val_acc_kshot)
        << ',' << (l.teacher_replaced ? 1 : 0) << ',' << format_double(l.teacher_val_acc) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline int run_metatrain_once(const ModelParams& init, const Dataset& ds, const TrainConfig& tc, int checkpoint_every,
                              const fs::path& dir, std::ostream& out, std::ostream& err) {
  detail::prepare_out(dir);
  std::vector<EpochLog> logs;
  auto observer = [&](const EpochLog& log, const ModelParams& student, const TeacherSnapshot&) {
    logs.push_back(log);
    if (checkpoint_every > 0 && log.epoch % checkpoint_every == 0)
      save_checkpoint(dir / ("epoch_" + std::to_string(log.epoch) + ".ckpt"), student);
  };
  try {
    const MetatrainResult res = metatrain(init, ds, tc, {}, observer);
    save_checkpoint(dir / "teacher.ckpt", res.best.params());
    save_checkpoint(dir / "final.ckpt", res.final_params);
    write_epoch_logs(res.logs, dir / "metatrain_log.csv");
    out << "metatrain: lambda1 " << format_double(tc.lambda1) << " lambda2 " << format_double(tc.lambda2)
        << ", teacher from epoch " << res.best.epoch_taken() << " val_acc " << format_double(res.best.val_accuracy());
    if (!res.logs.empty() && !std::isnan(res.logs.back().nnskl_grad_cosine))
      out << ", last-epoch cosine(exact, approx NNSKL grad) " << format_double(res.logs.back().nnskl_grad_cosine);
    out << " -> " << dir.string() << '\n';
  } catch (const TrainingDiverged& e) {
    save_checkpoint(dir / "diverged.ckpt", e.last_good());
    write_epoch_logs(logs, dir / "metatrain_log.csv");
    err << "error: " << e.what() << "\nlast good parameters written to " << (dir / "diverged.ckpt").string() << '\n';
    return kExitFailure;
  }
  return kExitOk;
}

inline int cmd_metatrain(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  cfg.train.validate();
  const Dataset ds = detail::load_data_dir(cfg.data);
  const ModelParams init = load_checkpoint(cfg.init);
  const int n_way = effective_n_way(ds, cfg.train);
  if (n_way < cfg.train.n_way)
    err << "warning: n_way " << cfg.train.n_way << " exceeds the " << n_way << " base classes; using " << n_way << '\n';
  if (cfg.lambda_sweep.empty()) return run_metatrain_once(init, ds, cfg.train, cfg.checkpoint_every, cfg.out, out, err);
  int status = kExitOk;
  for (double v : cfg.lambda_sweep) {
    TrainConfig tc = cfg.train;
    tc.lambda1 = tc.lambda2 = v;
    tc.validate();
    status = std::max(status, run_metatrain_once(init, ds, tc, cfg.checkpoint_every, cfg.out / detail::lambda_dir(v), out, err));
  }
  return status;
}

inline int cmd_eval(const RunConfig& cfg, std::ostream& out) {
  const Dataset ds = detail::load_data_dir(cfg.data);
  const ModelParams params = load_checkpoint(cfg.checkpoint);
  const Split split = detail::split_from(cfg.eval_split);
  const AccuracyReport rep = evaluate_accuracy(params, ds, split, cfg.eval, Rng(cfg.seed).split("eval"));
  out << "eval: " << cfg.eval_split << ' ' << cfg.eval.n_way << "-way " << cfg.eval.k_shot << "-shot over "
      << cfg.eval.n_episodes << " episodes: accuracy " << format_double(rep.mean_acc) << " +- "
      << format_double(rep.ci95_halfwidth) << '\n';
  if (!cfg.out.empty()) {
    detail::prepare_out(cfg.out);
    auto f = open_for_write(cfg.out / "eval.csv");
    f << "split,n_way,k_shot,q_per_class,episodes,mean_acc,ci95_halfwidth\n"
      << cfg.eval_split << ',' << cfg.eval.n_way << ',' << cfg.eval.k_shot << ',' << cfg.eval.q_per_class << ','
      << cfg.eval.n_episodes << ',' << format_double(rep.mean_acc) << ',' << format_double(rep.ci95_halfwidth) << '\n';
    if (!f) throw std::runtime_error("write failed: eval.csv");
  }
  return kExitOk;
}

inline int cmd_spectrum(const RunConfig& cfg, std::ostream& out) {
  const Dataset ds = detail::load_data_dir(cfg.data);
  const ModelParams params = load_checkpoint(cfg.checkpoint);
  const Split split = detail::split_from(cfg.spectrum_split);
  detail::prepare_out(cfg.out);
  const SpectrumReport rep = embedding_spectrum(params, ds, split, cfg.spectrum);
  write_spectrum_csv(rep, cfg.out / "spectrum.csv");
  write_geometry_csv(class_geometry(params, ds, split), cfg.out / "geometry.csv");
  out << "spectrum: " << cfg.spectrum_split << " split, " << rep.n_samples << " samples, embed dim " << rep.embed_dim
      << ", effective rank " << rep.effective_rank << " -> " << cfg.out.string() << '\n';
  return kExitOk;
}

/// Full entry point; `args` excludes the program name.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  RunConfig cfg;
  if (const int code = parse_args(args, cfg, out, err); code >= 0) return code;
  try {
    validate_run(cfg);
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  try {
    if (cfg.command == "datagen") return cmd_datagen(cfg, out);
    if (cfg.command == "pretrain") return cmd_pretrain(cfg, out);
    if (cfg.command == "metatrain") return cmd_metatrain(cfg, out, err);
    if (cfg.command == "eval") return cmd_eval(cfg, out);
    if (cfg.command == "spectrum") return cmd_spectrum(cfg, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  err << "error: unknown command " << cfg.command << '\n';
  return kExitUsage;
}

}  // namespace protokd::cli
