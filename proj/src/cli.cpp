#include "quantkit/cli.hpp"

#include <cstdlib>
#include <iostream>
#include <limits>
#include <optional>

#include <CLI11.hpp>

#include "graph_json.hpp"
#include "quantkit/fixtures.hpp"
#include "quantkit/prune.hpp"

namespace quantkit {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct Globals {
  std::optional<std::uint64_t> seed;
  int threads = 1;
};

std::uint64_t resolve_seed(const Globals& g) {
  if (g.seed) return *g.seed;
  if (const char* env = std::getenv("QUANTKIT_SEED"); env != nullptr && *env != '\0') {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(env, &used);
      if (used == std::string(env).size()) return v;
    } catch (const std::exception&) {
    }
    throw ValidationError("QUANTKIT_SEED is not an unsigned integer: '" + std::string(env) + "'");
  }
  return 1;
}

void write_manifest(const fs::path& out_dir, const std::string& command, json options, const Globals& g) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string());
  options["command"] = command;
  options["seed"] = resolve_seed(g);
  options["threads"] = g.threads;
  detail::write_json_file(options, out_dir / "run_options.json");
}

json accuracy_json(const Accuracy& a) {
  json j{{"top1", a.top1}, {"count", a.count}};
  j["top5"] = a.top5 ? json(*a.top5) : json(nullptr);
  return j;
}

/// A dataset directory, or a gen-data output whose `eval` (or `train`) split is chosen.
Dataset load_split(const fs::path& dir, const std::string& split) {
  if (fs::is_directory(dir / split)) return load_dataset(dir / split);
  return load_dataset(dir);
}

TrainConfig read_train_config(const fs::path& path, TrainConfig c = {}) {
  const auto j = detail::read_json_file(path);
  try {
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.decay_factor = j.value("decay_factor", c.decay_factor);
    c.decay_epochs = j.value("decay_epochs", c.decay_epochs);
    c.momentum = j.value("momentum", c.momentum);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.augmentation = parse_augmentation(j.value("augmentation", std::string(augmentation_name(c.augmentation))));
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return c;
}

json train_config_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"decay_factor", c.decay_factor}, {"decay_epochs", c.decay_epochs},
          {"momentum", c.momentum},           {"batch_size", c.batch_size},     {"epochs", c.epochs},
          {"augmentation", augmentation_name(c.augmentation)}, {"seed", c.seed}};
}

json qat_config_json(const QatConfig& c) {
  return {{"epochs", c.epochs},         {"learning_rate", c.learning_rate}, {"decay_factor", c.decay_factor},
          {"decay_epoch", c.decay_epoch}, {"momentum", c.momentum},         {"batch_size", c.batch_size},
          {"augmentation", augmentation_name(c.augmentation)}, {"seed", c.seed}, {"weight_bits", c.weight_bits}};
}

json overflow_json(const std::map<std::string, OverflowAudit>& audits) {
  json layers = json::object();
  OverflowAudit total;
  for (const auto& [id, a] : audits) {
    layers[id] = {{"saturated", a.saturated}, {"total", a.total}};
    total += a;
  }
  return {{"layers", layers}, {"saturated", total.saturated}, {"total", total.total}};
}

bool is_quantized_model(const fs::path& dir) {
  const auto path = fs::is_directory(dir) ? dir / "model.json" : dir;
  return detail::read_json_file(path).contains("quantization");
}

const CLI::Validator kOpenUnit([](std::string& s) -> std::string {
  try {
    const double v = std::stod(s);
    if (v >= 0.0 && v < 1.0) return {};
  } catch (const std::exception&) {
  }
  return "value must be in [0, 1), got " + s;
}, "[0,1)");

}  // namespace

int run_cli(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Post-training quantization, quantization-aware training and pruning toolkit", "quantkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals globals;
  app.add_option("--seed", globals.seed, "Global seed (falls back to QUANTKIT_SEED, then 1)");
  app.add_option("--threads", globals.threads, "Thread cap")->check(CLI::PositiveNumber);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic toy dataset");
  ToyDataOptions data_opts;
  fs::path gen_out;
  gen->add_option("--classes", data_opts.classes)->check(CLI::Range(std::size_t{1}, std::size_t{1000}));
  gen->add_option("--per-class", data_opts.per_class)->check(CLI::Range(std::size_t{2}, std::size_t{100000}));
  gen->add_option("--image-size", data_opts.image_size)->check(CLI::Range(std::size_t{4}, std::size_t{256}));
  gen->add_option("--channels", data_opts.channels)->check(CLI::Range(std::size_t{1}, std::size_t{16}));
  gen->add_option("--noise", data_opts.noise)->check(CLI::NonNegativeNumber);
  gen->add_option("--eval-fraction", data_opts.eval_fraction)->check(kOpenUnit);
  gen->add_option("--out", gen_out)->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a toy network in full precision");
  std::string arch = "resnet";
  fs::path train_data, train_out, train_config_path, train_init;
  TrainConfig tcfg;
  train_cmd->add_option("--arch", arch)->check(CLI::IsMember({"resnet", "mobilenet"}));
  train_cmd->add_option("--init", train_init, "Start from this model instead of a fresh fixture");
  train_cmd->add_option("--data", train_data)->required();
  train_cmd->add_option("--config", train_config_path, "JSON training config; flags override it");
  auto* o_epochs = train_cmd->add_option("--epochs", tcfg.epochs)->check(CLI::NonNegativeNumber);
  auto* o_lr = train_cmd->add_option("--lr", tcfg.learning_rate)->check(CLI::NonNegativeNumber);
  auto* o_decay = train_cmd->add_option("--decay-epochs", tcfg.decay_epochs);
  auto* o_batch = train_cmd->add_option("--batch-size", tcfg.batch_size)->check(CLI::PositiveNumber);
  std::string aug_name = "aggressive_crop";
  auto* o_aug = train_cmd->add_option("--augmentation", aug_name)->check(CLI::IsMember({"none", "weak_crop", "aggressive_crop"}));
  train_cmd->add_option("--out", train_out)->required();

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a fp or quantized model");
  fs::path eval_model, eval_data, eval_out;
  eval_cmd->add_option("--model", eval_model)->required();
  eval_cmd->add_option("--data", eval_data)->required();
  eval_cmd->add_option("--out", eval_out)->required();

  // calibrate
  auto* cal = app.add_subcommand("calibrate", "Tolerance-KL activation calibration");
  fs::path cal_model, cal_data, cal_out;
  CalibConfig ccfg;
  bool dump_kl = false;
  PlacementOptions cal_place;
  cal->add_option("--model", cal_model)->required();
  cal->add_option("--data", cal_data)->required();
  cal->add_option("--tolerance", ccfg.tolerance)->check(CLI::Range(1.0, std::numeric_limits<double>::max()));
  cal->add_option("--batches", ccfg.batches)->check(CLI::PositiveNumber);
  cal->add_option("--batch-size", ccfg.batch_size)->check(CLI::PositiveNumber);
  cal->add_option("--bits", ccfg.bitwidth)->check(CLI::Range(2, 8));
  cal->add_flag("--dump-kl", dump_kl, "Write one KL curve CSV per site");
  cal->add_flag("--signed-only", cal_place.signed_only);
  cal->add_flag("--quantize-add-inputs", cal_place.quantize_add_inputs, "Ablation: quantize Add inputs");
  cal->add_option("--out", cal_out)->required();

  // quantize
  auto* quant = app.add_subcommand("quantize", "Build the integer model");
  fs::path q_model, q_data, q_profile, q_out;
  WeightQuantConfig wcfg;
  int abits = 8;
  std::string granularity = "channel", accum = "int32";
  PlacementOptions q_place;
  CalibConfig q_ccfg;
  quant->add_option("--model", q_model)->required();
  quant->add_option("--data", q_data, "Calibration data (when no profile) and overflow-audit inputs");
  quant->add_option("--profile", q_profile);
  quant->add_option("--wbits", wcfg.bitwidth)->check(CLI::Range(2, 8));
  quant->add_option("--abits", abits)->check(CLI::Range(2, 8));
  quant->add_option("--granularity", granularity)->check(CLI::IsMember({"layer", "channel"}));
  quant->add_option("--accum", accum)->check(CLI::IsMember({"int16", "int32"}));
  quant->add_option("--tolerance", q_ccfg.tolerance)->check(CLI::Range(1.0, std::numeric_limits<double>::max()));
  quant->add_flag("--signed-only", q_place.signed_only);
  quant->add_flag("--quantize-add-inputs", q_place.quantize_add_inputs, "Ablation: quantize Add inputs");
  quant->add_option("--out", q_out)->required();

  // pipeline
  auto* pipe = app.add_subcommand("pipeline", "Prune -> fp fine-tune -> PTQ -> QAT");
  fs::path p_model, p_data, p_out, p_ft_config, p_qat_config;
  PipelineConfig pcfg;
  pcfg.finetune.learning_rate = 0.005;
  pcfg.finetune.epochs = 4;
  pcfg.finetune.augmentation = Augmentation::WeakCrop;
  std::string p_accum = "int32";
  int p_abits = 8;
  pipe->add_option("--model", p_model)->required();
  pipe->add_option("--data", p_data)->required();
  pipe->add_option("--sparsity", pcfg.sparsity)->check(kOpenUnit);
  pipe->add_option("--finetune-config", p_ft_config, "JSON fp fine-tune config");
  pipe->add_option("--qat-config", p_qat_config, "JSON QAT config");
  pipe->add_option("--wbits", pcfg.weights.bitwidth)->check(CLI::Range(2, 8));
  pipe->add_option("--abits", p_abits)->check(CLI::Range(2, 8));
  pipe->add_option("--accum", p_accum)->check(CLI::IsMember({"int16", "int32"}));
  pipe->add_option("--tolerance", pcfg.calib.tolerance)->check(CLI::Range(1.0, std::numeric_limits<double>::max()));
  pipe->add_flag("--aggressive-reference", pcfg.aggressive_reference, "Also report an aggressive-crop M2");
  pipe->add_option("--out", p_out)->required();

  std::vector<const char*> args;
  for (const auto& a : argv) args.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(args.size()), args.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  }

  try {
    const auto seed = resolve_seed(globals);
    if (gen->parsed()) {
      data_opts.seed = seed;
      const auto split = make_toy_dataset(data_opts);
      save_dataset(split.train, gen_out / "train");
      save_dataset(split.eval, gen_out / "eval");
      write_manifest(gen_out, "gen-data",
                     {{"classes", data_opts.classes}, {"per_class", data_opts.per_class},
                      {"image_size", data_opts.image_size}, {"channels", data_opts.channels},
                      {"noise", data_opts.noise}, {"eval_fraction", data_opts.eval_fraction}},
                     globals);
      out << "wrote " << split.train.size() << " train and " << split.eval.size() << " eval samples to "
          << gen_out.string() << "\n";
    } else if (train_cmd->parsed()) {
      TrainConfig cfg = train_config_path.empty() ? TrainConfig{} : read_train_config(train_config_path);
      if (train_config_path.empty() || o_aug->count() > 0) cfg.augmentation = parse_augmentation(aug_name);
      if (o_epochs->count() > 0) cfg.epochs = tcfg.epochs;
      if (o_lr->count() > 0) cfg.learning_rate = tcfg.learning_rate;
      if (o_decay->count() > 0) cfg.decay_epochs = tcfg.decay_epochs;
      if (o_batch->count() > 0) cfg.batch_size = tcfg.batch_size;
      cfg.seed = seed;
      const auto data = load_split(train_data, "train");
      const auto& sample = data.samples.at(0).input;
      ModelGraph g;
      if (!train_init.empty()) {
        g = load_model(train_init);
      } else {
        ToyNetOptions net{sample.dim(0), sample.dim(1), data.num_classes, seed};
        g = arch == "resnet" ? toy_resnet(net) : toy_mobilenet(net);
      }
      const auto trained = train(g, data, cfg);
      save_model(trained, train_out);
      auto opts = train_config_json(cfg);
      opts["arch"] = arch;
      opts["data"] = train_data.string();
      write_manifest(train_out, "train", opts, globals);
      out << "trained " << trained.name << " for " << cfg.epochs << " epochs -> " << train_out.string() << "\n";
    } else if (eval_cmd->parsed()) {
      const auto data = load_split(eval_data, "eval");
      const bool quantized = is_quantized_model(eval_model);
      const auto acc = quantized ? evaluate_quantized(load_quantized(eval_model), data) : evaluate(load_model(eval_model), data);
      auto metrics = accuracy_json(acc);
      metrics["quantized"] = quantized;
      write_manifest(eval_out, "eval", {{"model", eval_model.string()}, {"data", eval_data.string()}}, globals);
      detail::write_json_file(metrics, eval_out / "metrics.json");
      out << metrics.dump() << "\n";
    } else if (cal->parsed()) {
      const auto data = load_split(cal_data, "train");
      const auto prepared = prepare_ptq(load_model(cal_model), cal_place);
      const auto profile = calibrate(prepared.graph, data, ccfg);
      write_manifest(cal_out, "calibrate",
                     {{"model", cal_model.string()}, {"data", cal_data.string()}, {"tolerance", ccfg.tolerance},
                      {"batches", ccfg.batches}, {"batch_size", ccfg.batch_size}, {"bits", ccfg.bitwidth},
                      {"dump_kl", dump_kl}, {"signed_only", cal_place.signed_only},
                      {"quantize_add_inputs", cal_place.quantize_add_inputs}},
                     globals);
      save_profile(profile, cal_out / "profile.json");
      if (dump_kl) dump_kl_curves(profile, cal_out / "kl");
      out << "calibrated " << profile.sites.size() << " sites -> " << (cal_out / "profile.json").string() << "\n";
    } else if (quant->parsed()) {
      const auto mode = parse_accum_mode(accum);
      wcfg.granularity = parse_granularity(granularity);
      check_accum_contract(mode, abits, wcfg.bitwidth);
      const auto prepared = prepare_ptq(load_model(q_model), q_place);
      CalibrationProfile profile;
      if (!q_profile.empty()) {
        profile = load_profile(q_profile);
        for (const auto& [id, s] : profile.sites)
          if (s.params.bitwidth != abits)
            throw ValidationError("profile site " + id + " has " + std::to_string(s.params.bitwidth) +
                                  " bits, --abits is " + std::to_string(abits));
      } else {
        if (q_data.empty()) throw ValidationError("quantize needs --profile or --data");
        q_ccfg.bitwidth = abits;
        profile = calibrate(prepared.graph, load_split(q_data, "train"), q_ccfg);
      }
      const auto qm = build_quantized(prepared.graph, profile, wcfg, mode);
      save_quantized(qm, q_out);
      json report = json::object();
      if (!q_data.empty()) {
        const auto data = load_split(q_data, "eval");
        std::map<std::string, OverflowAudit> audits;
        for (std::size_t b = 0; b < data.size(); b += 64) {
          const auto run = run_quantized(qm, data.batch(b, std::min(data.size(), b + 64)).inputs);
          for (const auto& [id, a] : run.audits) audits[id] += a;
        }
        report = overflow_json(audits);
      }
      report["accum"] = accum;
      detail::write_json_file(report, q_out / "overflow_report.json");
      write_manifest(q_out, "quantize",
                     {{"model", q_model.string()}, {"data", q_data.string()}, {"profile", q_profile.string()},
                      {"wbits", wcfg.bitwidth}, {"abits", abits}, {"granularity", granularity}, {"accum", accum},
                      {"tolerance", q_ccfg.tolerance}, {"signed_only", q_place.signed_only},
                      {"quantize_add_inputs", q_place.quantize_add_inputs}},
                     globals);
      out << "quantized " << qm.layers.size() << " layers -> " << q_out.string() << "\n";
    } else if (pipe->parsed()) {
      if (!p_ft_config.empty()) {
        pcfg.finetune = read_train_config(p_ft_config, pcfg.finetune);
      }
      if (!p_qat_config.empty()) pcfg.qat = read_qat_config(p_qat_config);
      pcfg.finetune.seed = seed;
      pcfg.qat.seed = seed;
      pcfg.accum = parse_accum_mode(p_accum);
      pcfg.calib.bitwidth = p_abits;
      check_accum_contract(pcfg.accum, p_abits, pcfg.weights.bitwidth);
      DatasetSplit data{load_split(p_data, "train"), load_split(p_data, "eval")};
      const auto state = run_pipeline(load_model(p_model), data, pcfg);
      save_model(state.m1, p_out / "m1");
      save_model(state.m2, p_out / "m2");
      save_quantized(state.m3, p_out / "m3");
      save_quantized(state.m4, p_out / "m4");
      save_profile(state.profile, p_out / "profile.json");
      write_pipeline_report(state, p_out);
      write_manifest(p_out, "pipeline",
                     {{"model", p_model.string()}, {"data", p_data.string()}, {"sparsity", pcfg.sparsity},
                      {"finetune", train_config_json(pcfg.finetune)}, {"qat", qat_config_json(pcfg.qat)},
                      {"wbits", pcfg.weights.bitwidth}, {"abits", p_abits}, {"accum", p_accum},
                      {"tolerance", pcfg.calib.tolerance}, {"aggressive_reference", pcfg.aggressive_reference}},
                     globals);
      for (const auto& m : state.metrics)
        out << m.stage << " sparsity=" << m.sparsity << " nnz=" << m.nnz << " top1=" << m.accuracy.top1 << "\n";
    }
  } catch (const ValidationError& e) {
    err << "validation error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << "\n";
    return kExitIo;
  }
  return kExitOk;
}

}  // namespace quantkit
