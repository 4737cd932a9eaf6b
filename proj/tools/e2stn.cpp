#include "e2stn/e2stn.hpp"

#include <CLI11.hpp>

#include <iomanip>
#include <iostream>
#include <optional>

namespace {

using namespace e2stn;

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

// Training options shared by run and ablation. Explicit flags override the
// --config file, which overrides the built-in defaults.
struct TrainFlags {
  std::string config_path;
  std::optional<std::string> mode;
  std::optional<int> epochs;
  std::optional<int> batch_size;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> weights;
  std::optional<std::string> ce_reduction;
  std::optional<int> eval_every;
  bool freeze_eval_stack = false;
  bool normalize_graph = false;
  std::vector<std::string> model_overrides;

  void attach(CLI::App* app, bool with_mode) {
    app->add_option("--config", config_path, "key=value file overriding defaults")->check(CLI::ExistingFile);
    if (with_mode) app->add_option("--mode", mode, "full | ablation-t");
    app->add_option("--epochs", epochs, "training epochs");
    app->add_option("--batch-size", batch_size, "source samples per step");
    app->add_option("--lr", lr, "learning rate");
    app->add_option("--seed", seed, "random seed");
    app->add_option("--weights", weights, "loss weights lambda,mu,nu,xi");
    app->add_option("--ce-reduction", ce_reduction, "sum | mean");
    app->add_option("--eval-every", eval_every, "epochs between metrics records");
    app->add_flag("--freeze-eval-stack", freeze_eval_stack, "keep the evaluation stack at its random init");
    app->add_flag("--normalize-graph", normalize_graph, "row-normalize each per-band adjacency");
    app->add_option("--set", model_overrides, "extra key=value settings (e.g. model_dim=16)");
  }

  TrainConfig resolve() const {
    TrainConfig cfg;
    if (!config_path.empty()) load_config_file(cfg, config_path);
    for (const auto& kv : model_overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      apply_setting(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (mode) cfg.mode = parse_mode(*mode);
    if (epochs) cfg.epochs = *epochs;
    if (batch_size) cfg.batch_size = *batch_size;
    if (lr) cfg.learning_rate = *lr;
    if (seed) cfg.seed = *seed;
    if (weights) cfg.weights = parse_weights(*weights);
    if (ce_reduction) cfg.ce_reduction = parse_reduction(*ce_reduction);
    if (eval_every) cfg.eval_every = *eval_every;
    if (freeze_eval_stack) cfg.freeze_eval_stack = true;
    if (normalize_graph) cfg.model.normalize_graph = true;
    cfg.validate();
    return cfg;
  }
};

struct ProtocolFlags {
  std::string source, target, class_map, name;
  bool normalize_subjects = false;

  void attach(CLI::App* app) {
    app->add_option("--source", source, "labeled source dataset")->required()->check(CLI::ExistingFile);
    app->add_option("--target", target, "target dataset")->required()->check(CLI::ExistingFile);
    app->add_option("--class-map", class_map, "file of source=target class-name pairs")
        ->check(CLI::ExistingFile);
    app->add_option("--name", name, "protocol name used in messages");
    app->add_flag("--normalize-subjects", normalize_subjects, "z-score features within each subject");
  }

  ProtocolData load() const {
    ProtocolSpec spec;
    spec.name = name.empty() ? source + "->" + target : name;
    spec.source_path = source;
    spec.target_path = target;
    if (!class_map.empty()) spec.class_map = load_class_map(class_map);
    ProtocolData d = load_protocol(spec);
    if (normalize_subjects) {
      d.source = normalize_per_subject(std::move(d.source));
      d.target = normalize_per_subject(std::move(d.target));
    }
    return d;
  }
};

void print_record(const MetricsRecord& r) {
  std::cerr << "epoch " << r.epoch << "  L_c=" << r.L_c << " L_s=" << r.L_s << " L_id=" << r.L_id
            << " L_ce=" << r.L_ce << " L_total=" << r.L_total << "  train=" << r.train_acc
            << " ACC=" << r.acc << " STD=" << r.std << '\n';
}

int print_gradcheck(std::uint64_t seed) {
  GradCheckConfig g;
  g.seed = seed;
  const GradCheckReport rep = gradient_check(g);
  for (const auto& t : rep.tensors)
    std::cout << std::left << std::setw(32) << t.name << ' ' << std::setw(14) << t.rel_error << ' '
              << to_string(t.status) << '\n';
  std::cout << "max relative error " << rep.max_rel_error << " (tolerance " << g.tolerance << "), "
            << rep.seconds << " s\n";
  if (!rep.passed) {
    std::cout << "FAILED:";
    for (const auto& n : rep.failed) std::cout << ' ' << n;
    std::cout << '\n';
    return kExitRuntime;
  }
  std::cout << "gradient check passed\n";
  return 0;
}

// Restores the model and the class names it was trained with.
struct LoadedModel {
  Model<float> model;
  std::vector<std::string> class_names;
};

LoadedModel load_trained(const std::string& path) {
  CheckpointData ck = load_checkpoint(path);
  LoadedModel out{cast_model<float>(ck.model), {}};
  for (int i = 0; i < ck.model.cfg.classes; ++i) {
    auto it = ck.extra.find("class" + std::to_string(i));
    out.class_names.push_back(it == ck.extra.end() ? default_class_names(ck.model.cfg.classes)[static_cast<std::size_t>(i)]
                                                   : it->second);
  }
  return out;
}

void write_atomic(const std::filesystem::path& path, const std::function<void(std::ostream&)>& body) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  AtomicFile f(path);
  body(f.stream());
  f.commit();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-dataset EEG emotion recognition with stylized sample transfer"};
  app.require_subcommand(0, 1);
  bool top_gradcheck = false;
  std::uint64_t gradcheck_seed = 7;
  app.add_flag("--gradcheck", top_gradcheck, "run the finite-difference gradient check and exit");

  // generate
  auto* gen = app.add_subcommand("generate", "write a synthetic source/target dataset pair");
  SynthShiftConfig scfg;
  std::string gen_source, gen_target;
  gen->add_option("--out-source", gen_source, "source dataset path")->required();
  gen->add_option("--out-target", gen_target, "target dataset path")->required();
  gen->add_option("--channels", scfg.channels);
  gen->add_option("--bands", scfg.bands);
  gen->add_option("--classes", scfg.classes);
  gen->add_option("--subjects", scfg.subjects_per_dataset);
  gen->add_option("--per-class", scfg.samples_per_class_per_subject, "samples per class per subject");
  gen->add_option("--separation", scfg.class_separation);
  gen->add_option("--scale", scfg.domain_shift_scale, "target gain (1 = no shift)");
  gen->add_option("--offset", scfg.domain_shift_offset, "target offset");
  gen->add_option("--noise", scfg.noise_std);
  gen->add_option("--seed", scfg.seed);

  // extract
  auto* ext = app.add_subcommand("extract", "DE features from raw recordings");
  std::vector<std::string> raw_paths;
  std::string ext_out, ext_role = "source";
  int ext_classes = 0;
  ext->add_option("raw", raw_paths, "raw recording files")->required()->check(CLI::ExistingFile);
  ext->add_option("--out", ext_out, "dataset path")->required();
  ext->add_option("--role", ext_role, "source | target");
  ext->add_option("--classes", ext_classes, "class count (default: max label + 1)");

  // run
  auto* run = app.add_subcommand("run", "train, evaluate and write artifacts");
  ProtocolFlags run_proto;
  TrainFlags run_train;
  std::string run_out = "out";
  bool run_gradcheck = false;
  run_proto.attach(run);
  run_train.attach(run, true);
  run->add_option("--out", run_out, "output directory");
  run->add_flag("--gradcheck", run_gradcheck, "run the gradient check before training");

  // evaluate
  auto* evl = app.add_subcommand("evaluate", "score a checkpoint on a labeled target dataset");
  std::string evl_ckpt, evl_target, evl_map, evl_out;
  evl->add_option("--checkpoint", evl_ckpt)->required()->check(CLI::ExistingFile);
  evl->add_option("--target", evl_target)->required()->check(CLI::ExistingFile);
  evl->add_option("--class-map", evl_map)->check(CLI::ExistingFile);
  evl->add_option("--out", evl_out, "directory for subjects.csv and confusion_matrix.csv");

  // activity-map
  auto* act = app.add_subcommand("activity-map", "per-channel mean |H_DG|, max-normalized");
  std::string act_ckpt, act_data, act_out;
  act->add_option("--checkpoint", act_ckpt)->required()->check(CLI::ExistingFile);
  act->add_option("--dataset", act_data)->required()->check(CLI::ExistingFile);
  act->add_option("--out", act_out, "CSV path (default: stdout)");

  // ablation
  auto* abl = app.add_subcommand("ablation", "paired full vs ablation-t runs over seeds");
  ProtocolFlags abl_proto;
  TrainFlags abl_train;
  int abl_seeds = 10;
  std::string abl_out;
  abl_proto.attach(abl);
  abl_train.attach(abl, false);
  abl->add_option("--seeds", abl_seeds, "seeds 0..N-1 (offset by --seed)")->check(CLI::PositiveNumber);
  abl->add_option("--out", abl_out, "CSV path (default: stdout)");

  // gradcheck
  auto* gck = app.add_subcommand("gradcheck", "finite-difference gradient check in 64-bit");
  gck->add_option("--seed", gradcheck_seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  bool inputs_phase = false;
  try {
    if (top_gradcheck || gck->parsed()) return print_gradcheck(gradcheck_seed);

    if (gen->parsed()) {
      const DatasetPair pair = generate_synthetic_pair(scfg);
      save_dataset(pair.source, gen_source);
      save_dataset(pair.target, gen_target);
      std::cerr << "wrote " << pair.source.size() << " source and " << pair.target.size() << " target samples\n";
      return 0;
    }

    if (ext->parsed()) {
      Dataset ds;
      ds.role = ext_role == "target" ? DatasetRole::target : DatasetRole::source;
      if (ext_role != "source" && ext_role != "target") throw ConfigError("--role must be source or target");
      int max_label = -1;
      for (const auto& p : raw_paths) {
        const RawRecording rec = load_raw(p);
        auto samples = extract_features(rec);
        if (ds.samples.empty()) {
          ds.channel_count = static_cast<int>(rec.channels());
          ds.band_count = static_cast<int>(default_bands().size());
        } else if (ds.channel_count != rec.channels()) {
          throw DimensionError(p + ": " + std::to_string(rec.channels()) + " channels, expected " +
                               std::to_string(ds.channel_count));
        }
        max_label = std::max(max_label, rec.label);
        for (auto& s : samples) ds.samples.push_back(std::move(s));
      }
      ds.class_names = default_class_names(ext_classes > 0 ? ext_classes : std::max(2, max_label + 1));
      save_dataset(ds, ext_out);
      std::cerr << "wrote " << ds.size() << " samples to " << ext_out << '\n';
      return 0;
    }

    if (run->parsed()) {
      if (run_gradcheck && print_gradcheck(gradcheck_seed) != 0) return kExitRuntime;
      const TrainConfig cfg = run_train.resolve();
      inputs_phase = true;
      const ProtocolData data = run_proto.load();
      const ExperimentOutputs out = execute_experiment(data, cfg, run_out, print_record);
      std::cout << "ACC " << format_fixed(out.eval.acc, 2) << " STD " << format_fixed(out.eval.std, 2) << '\n';
      return 0;
    }

    if (evl->parsed()) {
      inputs_phase = true;
      LoadedModel lm = load_trained(evl_ckpt);
      Dataset src_names;
      src_names.class_names = lm.class_names;
      const Dataset target =
          align_classes(src_names, load_dataset(evl_target), evl_map.empty() ? std::map<std::string, std::string>{}
                                                                            : load_class_map(evl_map));
      const EvalResult ev = evaluate(lm.model, target);
      if (ev.skipped_groups) std::cerr << "warning: " << ev.skipped_groups << " empty subject groups skipped\n";
      write_subjects_csv(std::cout, ev);
      if (!evl_out.empty()) {
        write_atomic(std::filesystem::path(evl_out) / "subjects.csv",
                     [&](std::ostream& o) { write_subjects_csv(o, ev); });
        write_atomic(std::filesystem::path(evl_out) / "confusion_matrix.csv",
                     [&](std::ostream& o) { write_confusion_csv(o, ev.confusion, lm.class_names); });
      }
      return 0;
    }

    if (act->parsed()) {
      inputs_phase = true;
      LoadedModel lm = load_trained(act_ckpt);
      const auto scores = export_activity_map(lm.model, load_dataset(act_data));
      if (act_out.empty()) write_activity_csv(std::cout, scores);
      else write_atomic(act_out, [&](std::ostream& o) { write_activity_csv(o, scores); });
      return 0;
    }

    if (abl->parsed()) {
      const TrainConfig cfg = abl_train.resolve();
      inputs_phase = true;
      const ProtocolData data = abl_proto.load();
      std::vector<std::uint64_t> seeds;
      for (int i = 0; i < abl_seeds; ++i) seeds.push_back(cfg.seed + static_cast<std::uint64_t>(i));
      const auto rows = ablation_report(data, cfg, seeds, [](const AblationRow& r) {
        std::cerr << "seed " << r.seed << ": full " << r.acc_full << " ablation-t " << r.acc_t << '\n';
      });
      if (abl_out.empty()) write_ablation_csv(std::cout, rows);
      else write_atomic(abl_out, [&](std::ostream& o) { write_ablation_csv(o, rows); });
      return 0;
    }

    std::cerr << app.help();
    return kExitUsage;
  } catch (const ConfigError& e) {
    // Bad options are usage errors; inconsistent input data is a runtime error.
    std::cerr << "error: " << e.what() << '\n';
    return inputs_phase ? kExitRuntime : kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}
