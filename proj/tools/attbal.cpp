#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "attbalance/analysis.hpp"
#include "attbalance/config.hpp"
#include "attbalance/synthetic.hpp"
#include "attbalance/trainer.hpp"

namespace {

using namespace attbalance;

RunConfig load_config(const std::string& config_path, const std::vector<std::string>& overrides) {
  RunConfig cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
  for (const auto& assignment : overrides) apply_config_override(cfg, assignment);
  return cfg;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open output file: " + path);
  out << text;
  if (!out) throw IoError("failed writing output file: " + path);
}

std::vector<int> parse_layer_list(const std::string& spec) {
  std::vector<int> layers;
  std::istringstream is(spec);
  std::string tok;
  while (std::getline(is, tok, ',')) {
    if (!tok.empty()) layers.push_back(static_cast<int>(parse_int(tok)));
  }
  return layers;
}

int run_cli(int argc, char** argv) {
  CLI::App app{"AttBalance training framework for toy visual grounding"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic grounding dataset");
  std::string gen_out;
  gen->add_option("--config", config_path, "Run config file (data.* keys are used)");
  gen->add_option("--set", overrides, "Config override key=value")->take_all();
  gen->add_option("--out", gen_out, "Output dataset path")->required();

  // train
  auto* tr = app.add_subcommand("train", "Train a model per the run config");
  std::string resume_path;
  tr->add_option("--config", config_path, "Run config file");
  tr->add_option("--set", overrides, "Config override key=value")->take_all();
  tr->add_option("--resume", resume_path, "Resume from a checkpoint");

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  std::string eval_ckpt, eval_dataset, eval_split = "val", eval_layers, eval_out, eval_csv;
  ev->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  ev->add_option("--dataset", eval_dataset, "Dataset file")->required();
  ev->add_option("--split", eval_split, "Split to evaluate: train or val");
  ev->add_option("--layers", eval_layers, "Comma-separated capture layers (default all)");
  ev->add_option("--out", eval_out, "Report JSON path (default stdout)");
  ev->add_option("--csv", eval_csv, "Also dump per-sample records as CSV");

  // grad-check
  auto* gc = app.add_subcommand("grad-check", "Finite-difference audit of the full loss");
  bool corrupt = false;
  gc->add_option("--config", config_path, "Run config file");
  gc->add_option("--set", overrides, "Config override key=value")->take_all();
  gc->add_flag("--corrupt-grad", corrupt, "Inject a wrong gradient rule (negative control)");

  // compare
  auto* cp = app.add_subcommand("compare", "Compare two finished runs");
  std::string run_a, run_b, compare_out;
  cp->add_option("--run-a", run_a, "First run directory")->required();
  cp->add_option("--run-b", run_b, "Second run directory")->required();
  cp->add_option("--out", compare_out, "Report JSON path (default stdout)");

  // analyze
  auto* an = app.add_subcommand("analyze", "Recompute the analysis report from a records CSV");
  std::string records_path, analyze_out;
  an->add_option("--records", records_path, "EvalRecord CSV produced by eval")->required();
  an->add_option("--out", analyze_out, "Report JSON path (default stdout)");

  CLI11_PARSE(app, argc, argv);

  if (gen->parsed()) {
    RunConfig cfg = load_config(config_path, overrides);
    Dataset ds = generate(cfg.data);
    save_dataset(ds, gen_out);
    std::cout << "wrote " << ds.train.size() << " train + " << ds.val.size()
              << " val samples to " << gen_out << "\n";
    return 0;
  }

  if (tr->parsed()) {
    TrainResult result;
    if (!resume_path.empty()) {
      result = resume(resume_path);
    } else {
      result = train(load_config(config_path, overrides));
    }
    std::cout << "trained " << result.epochs_run << " epochs (" << result.global_steps
              << " steps); final total loss " << result.final_breakdown.total << "\n"
              << "checkpoint: " << result.checkpoint_path << "\n"
              << "metrics:    " << result.metrics_path << "\n";
    return 0;
  }

  if (ev->parsed()) {
    const Checkpoint ckpt = load_checkpoint(eval_ckpt);
    const Dataset ds = load_dataset(eval_dataset);
    const auto& samples = split_from_name(eval_split) == Split::kTrain ? ds.train : ds.val;
    const std::vector<int> layers = eval_layers.empty() ? std::vector<int>{}
                                                        : parse_layer_list(eval_layers);
    if (!eval_csv.empty()) {
      const ModelConfig mc = model_config_from_kv(ckpt.model_config);
      ModelParams params = params_from_checkpoint(ckpt, "");
      std::vector<int> capture = layers;
      if (capture.empty()) {
        for (int l = 0; l < mc.n_layers; ++l) capture.push_back(l);
      }
      write_records_csv(collect(params, samples, capture), eval_csv);
    }
    const AnalysisReport report = evaluate_checkpoint(ckpt, samples, layers);
    const std::string text = report_json(report) + "\n";
    if (eval_out.empty()) {
      std::cout << text;
    } else {
      write_text(eval_out, text);
    }
    return 0;
  }

  if (gc->parsed()) {
    RunConfig cfg = load_config(config_path, overrides);
    const GradCheckReport report = grad_check_run(cfg, corrupt);
    for (const auto& entry : report.entries) {
      std::cout << (entry.pass ? "pass " : "FAIL ") << entry.name
                << "  max_rel_err=" << entry.max_rel_err << "\n";
    }
    std::cout << (report.pass ? "PASS" : "FAIL") << " worst " << report.worst_rel_err << " ("
              << report.worst_param << ")\n";
    return report.pass ? 0 : 2;
  }

  if (cp->parsed()) {
    const ComparisonReport report = compare_runs(run_a, run_b);
    const std::string text = comparison_json(report) + "\n";
    if (compare_out.empty()) {
      std::cout << text;
    } else {
      write_text(compare_out, text);
    }
    return 0;
  }

  if (an->parsed()) {
    const auto records = read_records_csv(records_path);
    const std::string text = report_json(analyze(records)) + "\n";
    if (analyze_out.empty()) {
      std::cout << text;
    } else {
      write_text(analyze_out, text);
    }
    return 0;
  }

  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_cli(argc, argv);
  } catch (const NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
