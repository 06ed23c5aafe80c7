#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "p2mx/error.hpp"
#include "p2mx/pipeline.hpp"

namespace {

using namespace p2mx;

int run_synth(const fs::path& spec_path, const fs::path& out, std::uint64_t seed) {
  const SynthSpec spec = load_synth_spec(spec_path);
  const std::size_t n = synth_dataset(spec, out, seed);
  std::cout << "wrote " << n << " scenes to " << out.string() << '\n';
  return 0;
}

int run_train(const fs::path& config_path) {
  const RunConfig config = load_run_config(config_path);
  const TrainSummary s = train(config, [](const StepRecord& r) {
    if (r.step == 1 || r.step % 10 == 0)
      std::printf("step %zu phase %d scene %s total %.6g chamfer %.6g\n", r.step, r.phase, r.scene_id.c_str(),
                  r.total, r.chamfer);
  });
  std::cout << "checkpoint " << s.checkpoint.string() << "\nloss curve " << s.loss_curve.string() << '\n';
  return 0;
}

int run_refine(const fs::path& mesh_path, const fs::path& scene_dir, const fs::path& ckpt, std::size_t iters,
               const fs::path& out, std::size_t views) {
  const Mesh mesh = load_obj(mesh_path);
  const Scene scene = load_scene(scene_dir);
  if (iters == 0) {
    save_obj(mesh, out);
    std::cout << "0 iterations; copied input to " << out.string() << '\n';
    return 0;
  }
  const LoadedModel loaded = load_model_checkpoint(ckpt);
  const auto meshes = refine_mesh(loaded, mesh, scene, iters, views);
  if (scene.gt_cloud.size() > 0) {
    const MetricConfig metric;
    Rng rng0(1);
    std::printf("iteration 0 cd %.6g\n", evaluate_mesh(scene.id, mesh, scene.gt_cloud, metric, rng0).cd);
    for (std::size_t i = 0; i < meshes.size(); ++i) {
      Rng rng(1);
      std::printf("iteration %zu cd %.6g\n", i + 1, evaluate_mesh(scene.id, meshes[i], scene.gt_cloud, metric, rng).cd);
    }
  }
  save_obj(meshes.back(), out);
  std::cout << "wrote " << out.string() << '\n';
  return 0;
}

int run_eval(const fs::path& ckpt, const fs::path& data, const EvalOptions& options, const fs::path& report) {
  const auto rows = evaluate(ckpt, data, options);
  write_report(rows, report);
  for (const auto& r : rows)
    std::printf("%s cd %.6g f_tau %.3f f_2tau %.3f\n", r.scene_id.c_str(), r.cd, r.f_tau, r.f_2tau);
  std::cout << "report " << report.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-view mesh refinement: synthesis, training, refinement, evaluation"};
  app.require_subcommand(1);

  std::string spec, out_dir;
  std::uint64_t seed = 1;
  auto* synth = app.add_subcommand("synth", "Render a synthetic dataset");
  synth->add_option("--spec", spec, "key = value dataset spec")->required();
  synth->add_option("--out", out_dir, "output directory")->required();
  synth->add_option("--seed", seed, "random seed");

  std::string config;
  auto* trn = app.add_subcommand("train", "Train from a run config");
  trn->add_option("--config", config, "key = value run config")->required();

  std::string mesh, scene, ckpt, out_obj;
  std::size_t iters = 3, refine_views = 0;
  auto* ref = app.add_subcommand("refine", "Refine an external mesh against a scene's views");
  ref->add_option("--mesh", mesh, "input OBJ")->required();
  ref->add_option("--scene", scene, "scene directory")->required();
  ref->add_option("--ckpt", ckpt, "checkpoint")->required();
  ref->add_option("--iters", iters, "refinement iterations");
  ref->add_option("--out", out_obj, "output OBJ")->required();
  ref->add_option("--views", refine_views, "use the first K views (0: all)");

  std::string data, report;
  EvalOptions eval_options;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  ev->add_option("--ckpt", ckpt, "checkpoint")->required();
  ev->add_option("--data", data, "dataset root")->required();
  ev->add_option("--tau", eval_options.metric.tau, "squared-distance threshold");
  ev->add_option("--samples", eval_options.metric.samples, "points sampled from each prediction");
  ev->add_option("--views", eval_options.views, "use the first K views of each scene");
  ev->add_option("--split", eval_options.split, "test, train or all");
  ev->add_option("--seed", eval_options.seed, "sampling seed");
  ev->add_option("--report", report, "output JSON")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "E_USAGE: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*synth) return run_synth(spec, out_dir, seed);
    if (*trn) return run_train(config);
    if (*ref) return run_refine(mesh, scene, ckpt, iters, out_obj, refine_views);
    if (*ev) return run_eval(ckpt, data, eval_options, report);
  } catch (const p2mx::Error& e) {
    std::cerr << p2mx::error_code_name(e.code()) << ": " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "E_INTERNAL: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
