// Command-line harness: dataset generation, training, evaluation, plots.

#include <CLI11.hpp>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "snp/checkpoint.hpp"
#include "snp/config.hpp"
#include "snp/episode_io.hpp"
#include "snp/gp_episodes.hpp"
#include "snp/metrics_log.hpp"
#include "snp/plot.hpp"
#include "snp/shapes2d.hpp"
#include "snp/snp_model.hpp"
#include "snp/tgqn.hpp"
#include "snp/train.hpp"

namespace fs = std::filesystem;
using namespace snp;

namespace {

int cmd_gen_data(const std::string& task, int count, uint64_t seed, const std::string& out_dir,
                 int T) {
  fs::create_directories(out_dir);
  for (int i = 0; i < count; ++i) {
    char name[64];
    snprintf(name, sizeof(name), "ep_%06d.snpe", i);
    const std::string path = (fs::path(out_dir) / name).string();
    const uint64_t ep_seed = derive_seed(seed, kStreamTrainData, i);
    if (task == "prediction" || task == "tracking") {
      const auto regime = task == "tracking" ? Regime2D::tracking : Regime2D::prediction;
      serialize_episode(env2d::sample_episode2d(regime, T > 0 ? T : 20, ep_seed), path);
    } else if (task == "a" || task == "b" || task == "c") {
      serialize_episode(gp::sample_episode(task[0], ep_seed), path);
    } else {
      std::cerr << "gen-data: unknown task '" << task << "'\n";
      return 1;
    }
  }
  std::cout << "wrote " << count << " episodes to " << out_dir << "\n";
  return 0;
}

std::string resolve_checkpoint(const RunConfig& cfg, std::string checkpoint) {
  if (!checkpoint.empty()) return checkpoint;
  const fs::path latest = fs::path(cfg.out_dir) / "latest";
  std::ifstream lf(latest);
  std::string path;
  if (!lf || !std::getline(lf, path))
    throw std::runtime_error("eval: no --checkpoint given and no " + latest.string());
  return path;
}

std::vector<std::string> dataset_files(const std::string& dir) {
  std::vector<std::string> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".snpe") files.push_back(e.path().string());
  std::sort(files.begin(), files.end());
  return files;
}

std::vector<Episode1D> eval_set_1d(const RunConfig& cfg, int n) {
  std::vector<Episode1D> out;
  if (cfg.data != "generate") {
    const auto files = dataset_files(cfg.data);
    for (int i = 0; i < n && i < static_cast<int>(files.size()); ++i)
      out.push_back(load_episode1d(files[i]));
    return out;
  }
  for (int i = 0; i < n; ++i) out.push_back(eval_episode_1d(cfg, i));
  return out;
}

std::vector<Episode2D> eval_set_2d(const RunConfig& cfg, int n) {
  std::vector<Episode2D> out;
  if (cfg.data != "generate") {
    const auto files = dataset_files(cfg.data);
    for (int i = 0; i < n && i < static_cast<int>(files.size()); ++i)
      out.push_back(load_episode2d(files[i]));
    return out;
  }
  for (int i = 0; i < n; ++i) out.push_back(eval_episode_2d(cfg, i));
  return out;
}

/// NaN-aware per-step mean across episodes.
std::vector<double> mean_curve(const std::vector<std::vector<double>>& curves) {
  size_t T = 0;
  for (const auto& c : curves) T = std::max(T, c.size());
  std::vector<double> acc(T, 0.0);
  std::vector<int> cnt(T, 0);
  for (const auto& c : curves)
    for (size_t t = 0; t < c.size(); ++t)
      if (std::isfinite(c[t])) {
        acc[t] += c[t];
        cnt[t]++;
      }
  std::vector<double> out(T, std::numeric_limits<double>::quiet_NaN());
  for (size_t t = 0; t < T; ++t)
    if (cnt[t]) out[t] = acc[t] / cnt[t];
  return out;
}

template <class T>
int eval_typed(const RunConfig& cfg, const std::string& checkpoint, const std::string& metric,
               int K, int S, int episodes, const std::string& out_path) {
  MetricsLog log;
  log.open(out_path, /*append=*/true);
  const uint64_t eval_seed = derive_seed(cfg.seed, kStreamEvalData, 999);
  const int n_eval = episodes > 0 ? episodes : cfg.eval_episodes;

  auto emit_curve = [&](const std::vector<double>& curve, const std::string& name) {
    for (size_t t = 0; t < curve.size(); ++t)
      log.row(static_cast<int64_t>(t + 1), "eval", name, curve[t], cfg.seed);
    double mean = 0;
    int cnt = 0;
    for (double v : curve)
      if (std::isfinite(v)) {
        mean += v;
        cnt++;
      }
    std::cout << name << " per-step curve written (" << curve.size() << " steps), mean "
              << (cnt ? mean / cnt : std::numeric_limits<double>::quiet_NaN()) << "\n";
  };

  if (!cfg.is_scene_model()) {
    const auto episodes_1d = eval_set_1d(cfg, n_eval);
    if (cfg.model == "snp") {
      SnpModel<T> model(snp_config_from<T>(cfg));
      load_checkpoint<T>(checkpoint, cfg.model, model.params());
      if (metric == "nll-is") {
        double mean = 0;
        for (size_t i = 0; i < episodes_1d.size(); ++i) {
          Rng rng(derive_seed(eval_seed, 21, i));
          const double nll = importance_nll(K, [&]() {
            const auto cs = model.posterior_chain_sample(episodes_1d[i], rng);
            return cs.loglik + cs.logp - cs.logq;
          });
          log.row(static_cast<int64_t>(i), "eval", "nll_is", nll, cfg.seed);
          mean += nll;
        }
        mean /= episodes_1d.size();
        log.row(static_cast<int64_t>(episodes_1d.size()), "eval", "nll_is_mean", mean, cfg.seed);
        std::cout << "nll-is (K=" << K << ") mean over " << episodes_1d.size()
                  << " episodes: " << mean << "\n";
      } else if (metric == "nll-target") {
        std::vector<std::vector<double>> curves;
        for (size_t i = 0; i < episodes_1d.size(); ++i)
          curves.push_back(model.target_nll(episodes_1d[i], S, Rng(derive_seed(eval_seed, 22, i))));
        emit_curve(mean_curve(curves), "nll_target");
      } else {
        std::cerr << "eval: metric '" << metric << "' not available for model snp\n";
        return 1;
      }
    } else {  // np
      NpModel<T> model(snp_config_from<T>(cfg));
      load_checkpoint<T>(checkpoint, cfg.model, model.params());
      if (metric == "nll-target") {
        std::vector<std::vector<double>> curves;
        for (size_t i = 0; i < episodes_1d.size(); ++i)
          curves.push_back(model.target_nll(episodes_1d[i], S, Rng(derive_seed(eval_seed, 22, i))));
        emit_curve(mean_curve(curves), "nll_target");
      } else if (metric == "nll-is") {
        double mean = 0;
        for (size_t i = 0; i < episodes_1d.size(); ++i) {
          Rng rng(derive_seed(eval_seed, 21, i));
          const double nll = importance_nll(K, [&]() {
            const auto cs = model.posterior_chain_sample(episodes_1d[i], rng);
            return cs.loglik + cs.logp - cs.logq;
          });
          log.row(static_cast<int64_t>(i), "eval", "nll_is", nll, cfg.seed);
          mean += nll;
        }
        mean /= episodes_1d.size();
        log.row(static_cast<int64_t>(episodes_1d.size()), "eval", "nll_is_mean", mean, cfg.seed);
        std::cout << "nll-is (K=" << K << ") mean: " << mean << "\n";
      } else {
        std::cerr << "eval: metric '" << metric << "' not available for model np\n";
        return 1;
      }
    }
    return 0;
  }

  const auto episodes_2d = eval_set_2d(cfg, n_eval);
  auto run_scene = [&](auto& model) -> int {
    load_checkpoint<T>(checkpoint, cfg.model, model.params());
    if (metric == "pixel-mse") {
      std::vector<std::vector<double>> curves;
      for (size_t i = 0; i < episodes_2d.size(); ++i)
        curves.push_back(model.pixel_mse(episodes_2d[i], S, Rng(derive_seed(eval_seed, 23, i)),
                                         cfg.target_subsample));
      emit_curve(mean_curve(curves), "pixel_mse");
      return 0;
    }
    if (metric == "nll-is") {
      double mean = 0;
      for (size_t i = 0; i < episodes_2d.size(); ++i) {
        Rng rng(derive_seed(eval_seed, 21, i));
        const double nll = importance_nll(K, [&]() {
          const auto cs = model.posterior_chain_sample(episodes_2d[i], rng, cfg.target_subsample);
          return cs.loglik + cs.logp - cs.logq;
        });
        log.row(static_cast<int64_t>(i), "eval", "nll_is", nll, cfg.seed);
        mean += nll;
      }
      mean /= episodes_2d.size();
      log.row(static_cast<int64_t>(episodes_2d.size()), "eval", "nll_is_mean", mean, cfg.seed);
      std::cout << "nll-is (K=" << K << ") mean: " << mean << "\n";
      return 0;
    }
    std::cerr << "eval: metric '" << metric << "' not available for model " << cfg.model << "\n";
    return 1;
  };
  if (cfg.model == "tgqn") {
    TgqnModel<T> model(tgqn_config_from<T>(cfg));
    return run_scene(model);
  }
  GqnModel<T> model(tgqn_config_from<T>(cfg));
  return run_scene(model);
}

int cmd_plot_curves(const std::string& metrics_path, const std::string& metric_list,
                    const std::string& split, const std::string& out) {
  const auto rows = read_metrics(metrics_path);
  std::vector<std::pair<std::string, std::vector<double>>> series;
  std::vector<std::string> missing;
  std::string name;
  std::istringstream ss(metric_list);
  while (std::getline(ss, name, ',')) {
    auto ys = metric_series(rows, name, split);
    if (ys.empty())
      missing.push_back(name);
    else
      series.emplace_back(name, std::move(ys));
  }
  if (!missing.empty()) {
    std::cerr << "plot: no rows for metric key(s):";
    for (const auto& m : missing) std::cerr << " " << m;
    std::cerr << " in " << metrics_path << "\n";
    return 1;
  }
  plot_curves(series, out);
  std::cout << "wrote " << out << "\n";
  return 0;
}

template <class T>
int plot_1d_typed(const RunConfig& cfg, const std::string& checkpoint, uint64_t episode_seed,
                  int step, const std::string& out) {
  SnpModel<T> model(snp_config_from<T>(cfg));
  load_checkpoint<T>(checkpoint, cfg.model, model.params());
  const Episode1D ep = gp::sample_episode(cfg.task[0], episode_seed);
  if (step < 1 || step > ep.T) throw std::runtime_error("plot: step out of range");
  std::vector<double> xgrid;
  for (double x = -2.0; x <= 2.0 + 1e-9; x += 0.05) xgrid.push_back(x);
  const auto preds = model.predict_grid(ep, xgrid, Rng(derive_seed(cfg.seed, 31, episode_seed)));
  Plot1dLayers layers;
  layers.xgrid = xgrid;
  layers.mean = preds[step - 1].mean;
  layers.band = preds[step - 1].std;
  for (int s = 0; s < step - 1; ++s)
    for (size_t i = 0; i < ep.steps[s].x.size(); ++i)
      if (ep.steps[s].ctx_mask[i])
        layers.past_context.emplace_back(ep.steps[s].x[i], ep.steps[s].y[i]);
  for (size_t i = 0; i < ep.steps[step - 1].x.size(); ++i) {
    if (ep.steps[step - 1].ctx_mask[i])
      layers.current_context.emplace_back(ep.steps[step - 1].x[i], ep.steps[step - 1].y[i]);
    if (ep.steps[step - 1].tgt_mask[i])
      layers.truth.emplace_back(ep.steps[step - 1].x[i], ep.steps[step - 1].y[i]);
  }
  plot_1d(layers, out);
  std::cout << "wrote " << out << "\n";
  return 0;
}

template <class T, class CanvasT>
std::vector<float> chw_to_patch(const CanvasT& cv, int hw) {
  std::vector<float> img(static_cast<size_t>(hw) * hw * 3);
  for (int rr = 0; rr < hw; ++rr)
    for (int cc = 0; cc < hw; ++cc)
      for (int ch = 0; ch < 3; ++ch)
        img[(static_cast<size_t>(rr) * hw + cc) * 3 + ch] = std::clamp(
            static_cast<float>(cv.data[(static_cast<size_t>(ch) * hw + rr) * hw + cc]), 0.f, 1.f);
  return img;
}

template <class T>
int plot_grid_typed(const RunConfig& cfg, const std::string& checkpoint, uint64_t episode_seed,
                    const std::vector<int>& steps, const std::string& out) {
  const auto regime = cfg.task == "tracking" ? Regime2D::tracking : Regime2D::prediction;
  const Episode2D ep = env2d::sample_episode2d(regime, cfg.task_T(), episode_seed);
  // Rows: context patch, truth patch, two prior-chain samples at the truth query.
  std::vector<std::vector<std::vector<float>>> rows(4);
  for (int s : steps) {
    if (s < 1 || s > ep.T) throw std::runtime_error("plot: step out of range");
    const auto ctxs = TgqnModel<T>::step_obs(ep, s - 1, true, false);
    const auto tgts = TgqnModel<T>::step_obs(ep, s - 1, false, true);
    rows[0].push_back(ctxs.empty() ? std::vector<float>() : ctxs[0]->patch);
    rows[1].push_back(tgts.empty() ? std::vector<float>() : tgts[0]->patch);
  }

  if (cfg.model == "tgqn") {
    TgqnModel<T> model(tgqn_config_from<T>(cfg));
    load_checkpoint<T>(checkpoint, cfg.model, model.params());
    for (int sample = 0; sample < 2; ++sample) {
      Rng rng(derive_seed(cfg.seed, 41 + sample, episode_seed));
      Tape<T> t;
      t.set_grad_enabled(false);
      Var h = t.param(*model.params().find("trans.h0"));
      Var c = t.param(*model.params().find("trans.c0"));
      Var z = t.param(*model.params().find("trans.z0"));
      for (int s = 1; s <= ep.T; ++s) {
        Var ctx = model.pooled_rep(t, TgqnModel<T>::step_obs(ep, s - 1, true, false));
        auto tr = model.transition(t, h, c, z, ctx);
        h = tr.h;
        c = tr.c;
        auto dtr = model.draw_prior(t, h, ctx, rng);
        z = dtr.z_full;
        if (std::find(steps.begin(), steps.end(), s) == steps.end()) continue;
        const auto tgts = TgqnModel<T>::step_obs(ep, s - 1, false, true);
        if (tgts.empty()) {
          rows[2 + sample].push_back({});
          continue;
        }
        const auto rt = model.render(t, tgts[0]->view_row, tgts[0]->view_col, z, h);
        rows[2 + sample].push_back(chw_to_patch<T>(t.val(rt.canvas), cfg.image_hw));
      }
    }
  } else {
    GqnModel<T> model(tgqn_config_from<T>(cfg));
    load_checkpoint<T>(checkpoint, cfg.model, model.params());
    for (int sample = 0; sample < 2; ++sample) {
      Rng rng(derive_seed(cfg.seed, 41 + sample, episode_seed));
      Tape<T> t;
      t.set_grad_enabled(false);
      std::vector<std::pair<int, const Obs2D*>> ctx;
      for (int s = 1; s <= ep.T; ++s) {
        for (const Obs2D* o : TgqnModel<T>::step_obs(ep, s - 1, true, false))
          ctx.emplace_back(s - 1, o);
        if (std::find(steps.begin(), steps.end(), s) == steps.end()) continue;
        const auto tgts = TgqnModel<T>::step_obs(ep, s - 1, false, true);
        if (tgts.empty()) {
          rows[2 + sample].push_back({});
          continue;
        }
        Var rep = model.pooled_sum(t, ctx, ep.T);
        auto dtr = model.draw().prior_rollout(t, rep, rng);
        const auto rt = model.render_query(t, *tgts[0], s - 1, ep.T, dtr.z_full);
        rows[2 + sample].push_back(chw_to_patch<T>(t.val(rt.canvas), cfg.image_hw));
      }
    }
  }
  plot_image_grid(rows, cfg.image_hw, out);
  std::cout << "wrote " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sequential neural process models on drifting-GP regression and 2D scenes"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "Generate episode record files");
  std::string gen_task = "b", gen_out = "data";
  int gen_count = 10, gen_T = 0;
  uint64_t gen_seed = 1;
  gen->add_option("--task", gen_task, "a|b|c|prediction|tracking")->required();
  gen->add_option("--count", gen_count, "number of episodes")->required();
  gen->add_option("--seed", gen_seed, "base seed");
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--T", gen_T, "steps per 2D episode (default 20)");

  auto* tr = app.add_subcommand("train", "Train a model from a config file");
  std::string train_config;
  bool resume = false;
  tr->add_option("--config", train_config, "run config path")->required();
  tr->add_flag("--resume", resume, "continue from the latest checkpoint");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string eval_config, eval_ckpt, eval_metric, eval_out;
  int eval_k = 40, eval_s = -1, eval_episodes = 0;
  ev->add_option("--config", eval_config, "run config path")->required();
  ev->add_option("--checkpoint", eval_ckpt, "checkpoint (default: out_dir/latest)");
  ev->add_option("--metric", eval_metric, "nll-is | nll-target | pixel-mse")->required();
  ev->add_option("--k", eval_k, "importance samples for nll-is (default 40)");
  ev->add_option("--s", eval_s, "latent samples for curves (default from config)");
  ev->add_option("--episodes", eval_episodes, "evaluation episodes (default from config)");
  ev->add_option("--out", eval_out, "metrics output (default out_dir/eval_metrics.tsv)");

  auto* pl = app.add_subcommand("plot", "Render plots from metrics or a checkpoint");
  pl->require_subcommand(1);
  auto* plc = pl->add_subcommand("curves", "metric curves from a metrics file");
  std::string pc_metrics, pc_keys, pc_split, pc_out = "curves.bmp";
  plc->add_option("--metrics", pc_metrics, "metrics.tsv path")->required();
  plc->add_option("--keys", pc_keys, "comma-separated metric names")->required();
  plc->add_option("--split", pc_split, "filter split (train/eval)");
  plc->add_option("--out", pc_out, "output image");
  auto* pl1 = pl->add_subcommand("1d", "context/truth/prediction plot for a 1D episode step");
  std::string p1_config, p1_ckpt, p1_out = "plot1d.bmp";
  uint64_t p1_seed = 1;
  int p1_step = 1;
  pl1->add_option("--config", p1_config)->required();
  pl1->add_option("--checkpoint", p1_ckpt);
  pl1->add_option("--episode-seed", p1_seed);
  pl1->add_option("--step", p1_step)->required();
  pl1->add_option("--out", p1_out);
  auto* plg = pl->add_subcommand("grid", "context/truth/sample image grid for a 2D episode");
  std::string pg_config, pg_ckpt, pg_steps = "1,5,10", pg_out = "grid.bmp";
  uint64_t pg_seed = 1;
  plg->add_option("--config", pg_config)->required();
  plg->add_option("--checkpoint", pg_ckpt);
  plg->add_option("--episode-seed", pg_seed);
  plg->add_option("--steps", pg_steps, "comma-separated 1-based steps");
  plg->add_option("--out", pg_out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_name() == "CallForHelp" ? 0 : 2;
  }

  try {
    if (*gen) return cmd_gen_data(gen_task, gen_count, gen_seed, gen_out, gen_T);
    if (*tr) {
      const RunConfig cfg = parse_config_file(train_config);
      const auto out = run_training(cfg, resume);
      std::cout << "trained to iteration " << out.final_iteration << "; metrics at "
                << out.metrics_path << "; checkpoint " << out.checkpoint_path << "\n";
      return 0;
    }
    if (*ev) {
      RunConfig cfg = parse_config_file(eval_config);
      const std::string ckpt = resolve_checkpoint(cfg, eval_ckpt);
      const std::string out_path =
          eval_out.empty() ? (fs::path(cfg.out_dir) / "eval_metrics.tsv").string() : eval_out;
      const int S = eval_s > 0 ? eval_s : cfg.eval_latent_samples;
      if (cfg.precision == "f64")
        return eval_typed<double>(cfg, ckpt, eval_metric, eval_k, S, eval_episodes, out_path);
      return eval_typed<float>(cfg, ckpt, eval_metric, eval_k, S, eval_episodes, out_path);
    }
    if (*plc) return cmd_plot_curves(pc_metrics, pc_keys, pc_split, pc_out);
    if (*pl1) {
      const RunConfig cfg = parse_config_file(p1_config);
      if (cfg.model != "snp") throw std::runtime_error("plot 1d: only snp checkpoints supported");
      const std::string ckpt = resolve_checkpoint(cfg, p1_ckpt);
      if (cfg.precision == "f64") return plot_1d_typed<double>(cfg, ckpt, p1_seed, p1_step, p1_out);
      return plot_1d_typed<float>(cfg, ckpt, p1_seed, p1_step, p1_out);
    }
    if (*plg) {
      const RunConfig cfg = parse_config_file(pg_config);
      if (!cfg.is_scene_model()) throw std::runtime_error("plot grid: needs tgqn or gqn");
      const std::string ckpt = resolve_checkpoint(cfg, pg_ckpt);
      std::vector<int> steps;
      std::istringstream ss(pg_steps);
      std::string tok;
      while (std::getline(ss, tok, ',')) steps.push_back(std::stoi(tok));
      if (cfg.precision == "f64") return plot_grid_typed<double>(cfg, ckpt, pg_seed, steps, pg_out);
      return plot_grid_typed<float>(cfg, ckpt, pg_seed, steps, pg_out);
    }
    std::cerr << "no subcommand\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
