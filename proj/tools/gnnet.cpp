// gnnet: dataset generation, training, alignment, evaluation, gradient check.
//
// Exit codes: 0 ok, 1 usage or configuration, 2 data fault, 3 numerical fault.
// Relative paths, inputs included, are resolved against $GNNET_OUTPUT_ROOT
// when it is set.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "gnnet/bench.hpp"
#include "gnnet/gradcheck_suite.hpp"
#include "gnnet/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace gnnet;

namespace {

constexpr int kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumerical = 3;

fs::path output_path(const std::string& p) {
  const fs::path path(p);
  if (path.is_absolute()) return path;
  if (const char* root = std::getenv("GNNET_OUTPUT_ROOT"); root && *root) return fs::path(root) / path;
  return path;
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!(os << text)) throw DataError("cannot write " + p.string());
}

json run_echo(const std::string& subcommand, const json& config) {
  return {{"subcommand", subcommand}, {"version", GNNET_VERSION}, {"config", config}};
}

json network_json(const NetworkConfig& n) {
  return {{"input_channels", n.input_channels}, {"descriptor_dim", n.descriptor_dim},
          {"pyramid_levels", n.pyramid_levels}, {"base_width", n.base_width}, {"seed", n.seed}};
}

json loss_json(const LossConfig& l) {
  return {{"margin", l.margin},
          {"gn_weight", l.gn_weight},
          {"vicinity_radius", l.vicinity_radius},
          {"vicinity_levels", l.vicinity_levels},
          {"epsilon", l.epsilon},
          {"levels_used", l.levels_used},
          {"gn_starts", l.gn_starts}};
}

json alignment_json(const AlignmentConfig& a) {
  return {{"max_iterations", a.max_iterations}, {"step_norm_tol", a.step_norm_tol},
          {"huber_delta", a.huber_delta},       {"gradient_weighting", a.gradient_weighting},
          {"gradient_weight_const", a.gradient_weight_const}, {"levels", a.levels},
          {"initial_damping", a.initial_damping}, {"min_points", a.min_points}};
}

json summary_json(const bench::EvalSummary& s) {
  return {{"candidates", s.candidates},         {"failures", s.failures},
          {"auc", s.auc},                       {"success_at_0_1", s.success_at_0_1},
          {"success_at_0_5", s.success_at_0_5}, {"success_at_1_0", s.success_at_1_0}};
}

std::optional<pipeline::Method> parse_method(const std::string& s) {
  for (auto m : {pipeline::Method::intensity, pipeline::Method::trained, pipeline::Method::contrastive}) {
    if (pipeline::method_name(m) == s) return m;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
  std::string out = "dataset";
  bench::DatasetConfig cfg;
};

int cmd_generate(const GenerateArgs& a) {
  const fs::path root = output_path(a.out);
  std::cout << "generating dataset into " << root << " (seed " << a.cfg.seed << ")\n";
  const bench::Dataset ds = bench::generate_dataset(a.cfg);
  bench::write_dataset(ds, root);
  for (const auto& s : ds.splits) {
    std::size_t frames = 0, candidates = 0, pairs = 0;
    for (std::size_t k = 0; k < s.scenes.size(); ++k) {
      frames += s.scenes[k].frames.size();
      candidates += s.scenes[k].candidates.size();
      pairs += s.pairs[k].size();
    }
    std::cout << "  " << s.name << ": " << s.scenes.size() << " scenes, " << frames << " frames, " << candidates
              << " candidates, " << pairs << " training pairs\n";
  }
  return kExitOk;
}

struct TrainArgs {
  std::string dataset = "dataset";
  std::string out = "weights.gnnw";
  pipeline::TrainConfig cfg;
  bool no_validate = false;
};

int cmd_train(TrainArgs a) {
  a.cfg.validate = !a.no_validate;
  std::cout << "learning rate " << a.cfg.adam.lr;
  if (a.cfg.adam.lr == 1e-4) std::cout << " (desk-scale default; the reference setting is 1e-6)";
  std::cout << "\n";
  const bench::Dataset ds = bench::read_dataset(output_path(a.dataset), {"train", "val"});
  const fs::path weights = output_path(a.out);
  fs::path log_path = weights;
  log_path.replace_extension(".csv");
  fs::path run_path = weights;
  run_path.replace_extension(".json");

  const json config{{"dataset", a.dataset},
                    {"network", network_json(a.cfg.network)},
                    {"loss", loss_json(a.cfg.loss)},
                    {"lr", a.cfg.adam.lr},
                    {"epochs", a.cfg.epochs},
                    {"max_frame_gap", a.cfg.max_frame_gap},
                    {"pairs_per_epoch", a.cfg.pairs_per_epoch},
                    {"seed", a.cfg.seed},
                    {"validate", a.cfg.validate},
                    {"dataset_version", ds.version}};
  std::vector<pipeline::EpochLog> log;
  const auto res = pipeline::train(ds, a.cfg, [&](const pipeline::EpochLog& e) {
    log.push_back(e);
    std::printf("epoch %3d  total %.6f  contrastive %.6f  gauss-newton %.6f  val-auc %.4f  (%.1fs)\n", e.epoch,
                e.total, e.contrastive, e.gauss_newton, e.validation_auc, e.seconds);
    std::fflush(stdout);
    write_text(log_path, pipeline::training_log_csv(log));
  });
  if (weights.has_parent_path()) fs::create_directories(weights.parent_path());
  save_network(weights.string(), res.best);
  json run = run_echo("train", config);
  run["best_epoch"] = res.best_epoch;
  run["weights"] = weights.filename().string();
  run["log"] = log_path.filename().string();
  write_text(run_path, run.dump(1) + "\n");
  std::cout << "best epoch " << res.best_epoch << ", weights written to " << weights << "\n";
  return kExitOk;
}

struct AlignArgs {
  std::string dataset = "dataset";
  std::string split = "test";
  int candidate = 0;
  std::string method = "intensity";
  std::string weights;
};

int cmd_align(const AlignArgs& a) {
  const auto method = parse_method(a.method);
  if (!method) throw ConfigError("unknown method '" + a.method + "'");
  const bench::Dataset ds = bench::read_dataset(output_path(a.dataset), {a.split});
  const bench::Split& split = ds.split(a.split);
  int k = a.candidate;
  for (const auto& scene : split.scenes) {
    if (k >= static_cast<int>(scene.candidates.size())) {
      k -= static_cast<int>(scene.candidates.size());
      continue;
    }
    if (k < 0) break;
    const auto& c = scene.candidates[static_cast<std::size_t>(k)];
    NetworkWeights net;
    PyramidExtractor extract = pipeline::intensity_extractor(scene.config.pyramid_levels);
    if (*method != pipeline::Method::intensity) {
      if (a.weights.empty()) throw DataError("method " + a.method + " needs --weights");
      net = load_network(output_path(a.weights).string());
      extract = pipeline::network_extractor(net);
    }
    const Keyframe kf = pipeline::make_keyframe(scene.frame(c.reference_frame), scene.intrinsics, {});
    const TrackResult r = track_candidate(kf, pipeline::image_tensor(scene.frame(c.candidate_frame).image), extract,
                                          pipeline::alignment_for(*method));
    json out{{"candidate", a.candidate},
             {"method", a.method},
             {"converged", r.converged},
             {"iterations", r.iterations},
             {"final_residual", r.final_residual},
             {"inlier_fraction", r.inlier_fraction},
             {"pose", bench::pose_json(r.pose)},
             {"ground_truth", bench::pose_json(c.relative_pose)},
             {"translation_error", bench::relocalization_error(c, r)}};
    std::cout << out.dump(1) << "\n";
    return kExitOk;
  }
  throw ConfigError("candidate index " + std::to_string(a.candidate) + " out of range");
}

struct EvaluateArgs {
  std::string dataset = "dataset";
  std::string split = "test";
  std::string out = "evaluation";
  std::vector<std::string> methods{"intensity", "gn_net", "contrastive_only"};
  std::string weights_gn;
  std::string weights_contrastive;
};

int cmd_evaluate(const EvaluateArgs& a) {
  std::vector<std::pair<pipeline::Method, std::string>> runs;
  for (const auto& name : a.methods) {
    const auto m = parse_method(name);
    if (!m) throw ConfigError("unknown method '" + name + "'");
    std::string weights;
    if (*m == pipeline::Method::trained) weights = a.weights_gn;
    if (*m == pipeline::Method::contrastive) weights = a.weights_contrastive;
    if (*m != pipeline::Method::intensity && weights.empty()) {
      throw DataError("method " + name + " needs a weights file");
    }
    runs.emplace_back(*m, weights);
  }
  const bench::Dataset ds = bench::read_dataset(output_path(a.dataset), {a.split});
  const bench::Split& split = ds.split(a.split);
  const fs::path out = output_path(a.out);
  std::vector<bench::NamedCurve> curves;
  json summary = json::object();
  for (const auto& [m, weights] : runs) {
    NetworkWeights net;
    PyramidExtractor extract = pipeline::intensity_extractor(ds.config.scene.pyramid_levels);
    if (m != pipeline::Method::intensity) {
      net = load_network(output_path(weights).string());
      extract = pipeline::network_extractor(net);
    }
    const bench::Evaluation ev = pipeline::evaluate_split(split, extract, pipeline::alignment_for(m));
    const std::string name = pipeline::method_name(m);
    write_text(out / (name + ".csv"), bench::curve_csv(ev.curve));
    const std::vector<bench::NamedCurve> one{{name, ev.curve}};
    write_text(out / (name + ".svg"), bench::curves_svg(one, name));
    curves.push_back({name, ev.curve});
    summary[name] = summary_json(ev.summary);
    summary[name]["alignment"] = alignment_json(pipeline::alignment_for(m));
    std::printf("%-18s AUC %.4f  success@0.1 %.3f  @0.5 %.3f  @1.0 %.3f  failures %zu/%zu\n", name.c_str(),
                ev.summary.auc, ev.summary.success_at_0_1, ev.summary.success_at_0_5, ev.summary.success_at_1_0,
                ev.summary.failures, ev.summary.candidates);
  }
  write_text(out / "combined.csv", bench::combined_csv(curves));
  write_text(out / "combined.svg", bench::curves_svg(curves, "relocalization tracking, split " + a.split));
  json config{{"dataset", a.dataset},
              {"split", a.split},
              {"methods", a.methods},
              {"weights_gn", a.weights_gn},
              {"weights_contrastive", a.weights_contrastive},
              {"dataset_version", ds.version}};
  json run = run_echo("evaluate", config);
  run["results"] = summary;
  write_text(out / "summary.json", run.dump(1) + "\n");
  return kExitOk;
}

struct GradcheckArgs {
  NetworkGradcheckConfig cfg;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  const NetworkGradcheckReport r = network_gradcheck(a.cfg);
  for (const auto& [term, report] : r.terms) {
    for (const auto& b : report.blocks) {
      std::printf("%-13s %-24s entries %5zu  max rel err %.3e  max |grad| %.3e  %s\n", term.c_str(), b.name.c_str(),
                  b.entries, b.max_relative_error, b.max_abs_gradient,
                  b.max_relative_error < a.cfg.tolerance ? "ok" : "FAIL");
    }
  }
  const bool ok = r.passed(a.cfg.tolerance);
  std::printf("gradcheck %s: max relative error %.3e (tolerance %.1e)\n", ok ? "passed" : "FAILED",
              r.max_relative_error(), a.cfg.tolerance);
  return ok ? kExitOk : kExitNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GN-Net feature learning and feature-metric alignment"};
  app.set_version_flag("--version", std::string(GNNET_VERSION));
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Render the synthetic relocalization dataset");
  g->add_option("--out", gen.out, "Dataset directory")->capture_default_str();
  g->add_option("--seed", gen.cfg.seed, "Base seed")->capture_default_str();
  g->add_option("--frames", gen.cfg.scene.frames, "Frames per sequence")->capture_default_str();
  g->add_option("--candidates", gen.cfg.scene.candidates, "Relocalization candidates per scene")->capture_default_str();
  g->add_option("--train-scenes", gen.cfg.train_scenes)->capture_default_str();
  g->add_option("--val-scenes", gen.cfg.val_scenes)->capture_default_str();
  g->add_option("--test-scenes", gen.cfg.test_scenes)->capture_default_str();
  g->add_option("--pairs-per-scene", gen.cfg.pairs_per_scene, "Training pairs per scene")->capture_default_str();
  g->add_option("--positives", gen.cfg.positives)->capture_default_str();
  g->add_option("--negatives", gen.cfg.negatives)->capture_default_str();
  g->add_option("--max-frame-gap", gen.cfg.max_frame_gap, "Largest frame index gap of a training pair")
      ->capture_default_str();
  g->add_option("--max-translation", gen.cfg.scene.candidate_max_translation, "Candidate baseline bound [m]")
      ->capture_default_str();
  g->add_option("--max-rotation", gen.cfg.scene.candidate_max_rotation, "Candidate rotation bound [rad]")
      ->capture_default_str();
  g->add_option("--frame-step", gen.cfg.scene.frame_step, "Distance between frames [m]")->capture_default_str();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a feature network");
  t->add_option("--dataset", tr.dataset)->capture_default_str();
  t->add_option("--out", tr.out, "Weights file; the loss log and run record sit next to it")->capture_default_str();
  t->add_option("--epochs", tr.cfg.epochs)->capture_default_str();
  t->add_option("--lr", tr.cfg.adam.lr, "ADAM learning rate")->capture_default_str();
  t->add_option("--margin", tr.cfg.loss.margin, "Contrastive margin; 0 disables the term")->capture_default_str();
  t->add_option("--gn-weight", tr.cfg.loss.gn_weight, "Gauss-Newton loss weight; 0 trains contrastive only")
      ->capture_default_str();
  t->add_option("--vicinity", tr.cfg.loss.vicinity_radius, "Start-point radius in each level's px")
      ->capture_default_str();
  t->add_option("--vicinity-levels", tr.cfg.loss.vicinity_levels, "Per-level start-point radii, finest first")
      ->delimiter(',');
  t->add_option("--epsilon", tr.cfg.loss.epsilon)->capture_default_str();
  t->add_option("--max-frame-gap", tr.cfg.max_frame_gap)->capture_default_str();
  t->add_option("--pairs-per-epoch", tr.cfg.pairs_per_epoch, "0 uses every pair once")->capture_default_str();
  t->add_option("--seed", tr.cfg.seed)->capture_default_str();
  t->add_option("--descriptor-dim", tr.cfg.network.descriptor_dim)->capture_default_str();
  t->add_option("--base-width", tr.cfg.network.base_width)->capture_default_str();
  t->add_option("--levels", tr.cfg.network.pyramid_levels)->capture_default_str();
  t->add_option("--init-seed", tr.cfg.network.seed, "Weight initialization seed")->capture_default_str();
  t->add_flag("--no-validate", tr.no_validate, "Skip validation and keep the last epoch");

  AlignArgs al;
  auto* a = app.add_subcommand("align", "Track one relocalization candidate");
  a->add_option("--dataset", al.dataset)->capture_default_str();
  a->add_option("--split", al.split)->capture_default_str();
  a->add_option("--candidate", al.candidate, "Index within the split")->capture_default_str();
  a->add_option("--method", al.method, "intensity | gn_net | contrastive_only")->capture_default_str();
  a->add_option("--weights", al.weights);

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "Cumulative relocalization error curves");
  e->add_option("--dataset", ev.dataset)->capture_default_str();
  e->add_option("--split", ev.split)->capture_default_str();
  e->add_option("--out", ev.out, "Output directory")->capture_default_str();
  e->add_option("--methods", ev.methods)->delimiter(',')->capture_default_str();
  e->add_option("--weights-gn", ev.weights_gn);
  e->add_option("--weights-contrastive", ev.weights_contrastive);

  GradcheckArgs gc;
  auto* c = app.add_subcommand("gradcheck", "Finite-difference check of every loss gradient");
  c->add_option("--seed", gc.cfg.seed)->capture_default_str();
  c->add_option("--size", gc.cfg.image_size, "Image side [px]")->capture_default_str();
  c->add_option("--descriptor-dim", gc.cfg.network.descriptor_dim)->capture_default_str();
  c->add_option("--levels", gc.cfg.network.pyramid_levels)->capture_default_str();
  c->add_option("--base-width", gc.cfg.network.base_width)->capture_default_str();
  c->add_option("--tolerance", gc.cfg.tolerance)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*g) return cmd_generate(gen);
    if (*t) return cmd_train(tr);
    if (*a) return cmd_align(al);
    if (*e) return cmd_evaluate(ev);
    if (*c) return cmd_gradcheck(gc);
  } catch (const ConfigError& err) {
    std::cerr << "configuration error: " << err.what() << "\n";
    return kExitUsage;
  } catch (const NumericalError& err) {
    std::cerr << "numerical fault: " << err.what() << "\n";
    return kExitNumerical;
  } catch (const DataError& err) {
    std::cerr << "data fault: " << err.what() << "\n";
    return kExitData;
  } catch (const fs::filesystem_error& err) {
    std::cerr << "data fault: " << err.what() << "\n";
    return kExitData;
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitNumerical;
  }
  return kExitUsage;
}
