#include "snp/train.hpp"

#include <Eigen/Core>
#include <cinttypes>
#include <cmath>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <thread>

#include "snp/checkpoint.hpp"
#include "snp/episode_io.hpp"
#include "snp/gp_episodes.hpp"
#include "snp/metrics_log.hpp"
#include "snp/optim.hpp"
#include "snp/shapes2d.hpp"

namespace snp {

namespace fs = std::filesystem;

Episode1D train_episode_1d(const RunConfig& cfg, int index) {
  return gp::sample_episode(cfg.task[0], derive_seed(cfg.seed, kStreamTrainData, index));
}

Episode2D train_episode_2d(const RunConfig& cfg, int index) {
  const auto regime = cfg.task == "tracking" ? Regime2D::tracking : Regime2D::prediction;
  return env2d::sample_episode2d(regime, cfg.task_T(),
                                 derive_seed(cfg.seed, kStreamTrainData, index));
}

Episode1D eval_episode_1d(const RunConfig& cfg, int index) {
  return gp::sample_episode(cfg.task[0], derive_seed(cfg.seed, kStreamEvalData, index));
}

Episode2D eval_episode_2d(const RunConfig& cfg, int index) {
  const auto regime = cfg.task == "tracking" ? Regime2D::tracking : Regime2D::prediction;
  return env2d::sample_episode2d(regime, cfg.task_T(),
                                 derive_seed(cfg.seed, kStreamEvalData, index));
}

namespace {

std::vector<std::string> listed_episode_files(const std::string& dir) {
  static std::mutex mu;
  static std::map<std::string, std::vector<std::string>> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(dir);
  if (it != cache.end()) return it->second;
  std::vector<std::string> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".snpe") files.push_back(e.path().string());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error("train: no .snpe episodes in " + dir);
  cache[dir] = files;
  return files;
}

Episode1D load_or_generate_1d(const RunConfig& cfg, int index) {
  if (cfg.data == "generate") return train_episode_1d(cfg, index);
  const auto files = listed_episode_files(cfg.data);
  return load_episode1d(files[index % files.size()]);
}

Episode2D load_or_generate_2d(const RunConfig& cfg, int index) {
  if (cfg.data == "generate") return train_episode_2d(cfg, index);
  const auto files = listed_episode_files(cfg.data);
  return load_episode2d(files[index % files.size()]);
}

struct AlphaSchedule {
  // off | fixed:<iter> | auto (flip when the smoothed reconstruction loss
  // improves by < 1% over a 500-iteration window)
  enum Mode { kOff, kFixed, kAuto } mode = kAuto;
  int64_t fixed_iteration = 0;
  static constexpr int kWindow = 500;
  std::deque<double> recon_loss;
  double prev_window_mean = std::numeric_limits<double>::quiet_NaN();
  bool flipped = false;

  static AlphaSchedule parse(const std::string& s) {
    AlphaSchedule a;
    if (s == "off")
      a.mode = kOff;
    else if (s == "auto")
      a.mode = kAuto;
    else {
      a.mode = kFixed;
      a.fixed_iteration = std::stoll(s.substr(std::string("fixed:").size()));
    }
    return a;
  }

  double alpha(int64_t iteration) const {
    switch (mode) {
      case kOff: return 0.0;
      case kFixed: return iteration >= fixed_iteration ? 1.0 : 0.0;
      case kAuto: return flipped ? 1.0 : 0.0;
    }
    return 0.0;
  }

  void observe_recon(double recon_ll) {
    if (mode != kAuto || flipped) return;
    recon_loss.push_back(-recon_ll);
    if (static_cast<int>(recon_loss.size()) < 2 * kWindow) return;
    while (static_cast<int>(recon_loss.size()) > 2 * kWindow) recon_loss.pop_front();
    double prev = 0, last = 0;
    for (int i = 0; i < kWindow; ++i) {
      prev += recon_loss[i];
      last += recon_loss[i + kWindow];
    }
    prev /= kWindow;
    last /= kWindow;
    const double improvement = (prev - last) / std::max(1e-12, std::fabs(prev));
    if (improvement < 0.01) flipped = true;
    else {
      // Slide by one window so the comparison stays window-vs-window.
      for (int i = 0; i < kWindow; ++i) recon_loss.pop_front();
    }
  }
};

struct BatchStats {
  double l_snp = 0, l_pd = 0, recon = 0, kl = 0;
  void add(const ObjectiveReport& rep, bool pd) {
    if (pd)
      l_pd += rep.l_pd;
    else {
      l_snp += rep.l_snp;
      for (double r : rep.recon) recon += r;
      for (double k : rep.kl) kl += k;
    }
  }
};

template <class T, class Model, class Episode>
struct ItemResult {
  std::vector<std::pair<Param<T>*, Tensor<T>>> grads;
  ObjectiveReport rep_snp, rep_pd;
  bool used_pd = false;
  double loss = 0;
};

/// Loss graph for one episode: -(L_SNP + alpha * L_PD) for temporal models,
/// -ELBO for the baselines.
template <class T, class Model, class Episode>
ItemResult<T, Model, Episode> run_item(const RunConfig& cfg, Model& model, const Episode& ep,
                                       double alpha, uint64_t item_seed) {
  ItemResult<T, Model, Episode> out;
  Tape<T> tape;
  tape.set_external_grads(true);
  Var objective;
  const TargetSampling sub{cfg.target_subsample, derive_seed(item_seed, 7, 0)};
  if constexpr (std::is_same_v<Model, SnpModel<T>>) {
    objective = model.elbo_snp(tape, ep, Rng(derive_seed(item_seed, 1, 0)), &out.rep_snp);
    if (alpha > 0) {
      const auto mask =
          pd_mask(ep.T, derive_seed(item_seed, 2, 0), cfg.pd_prob);
      Var pd = model.elbo_pd(tape, ep, mask, Rng(derive_seed(item_seed, 3, 0)), &out.rep_pd);
      objective = tape.add(objective, tape.scale(pd, static_cast<T>(alpha)));
      out.used_pd = true;
    }
  } else if constexpr (std::is_same_v<Model, NpModel<T>>) {
    objective = model.elbo(tape, ep, Rng(derive_seed(item_seed, 1, 0)), &out.rep_snp);
  } else if constexpr (std::is_same_v<Model, TgqnModel<T>>) {
    objective = model.elbo_snp(tape, ep, Rng(derive_seed(item_seed, 1, 0)), &out.rep_snp, sub);
    if (alpha > 0) {
      const auto mask = pd_mask(ep.T, derive_seed(item_seed, 2, 0), cfg.pd_prob);
      Var pd = model.elbo_pd(tape, ep, mask, Rng(derive_seed(item_seed, 3, 0)), &out.rep_pd, sub);
      objective = tape.add(objective, tape.scale(pd, static_cast<T>(alpha)));
      out.used_pd = true;
    }
  } else {  // GqnModel
    objective = model.elbo(tape, ep, Rng(derive_seed(item_seed, 1, 0)), &out.rep_snp, sub);
  }
  Var loss = tape.neg(objective);
  out.loss = tape.val(loss)[0];
  tape.backward(loss);
  out.grads = std::move(tape.external_grads());
  return out;
}

template <class T, class Model, class EpisodeFn>
TrainOutputs train_loop(const RunConfig& cfg, Model& model, EpisodeFn episode_for, bool resume) {
  fs::create_directories(cfg.out_dir);
  {
    std::ofstream cf(fs::path(cfg.out_dir) / "config.txt");
    cf << config_to_text(cfg);
  }

  Adam<T> opt(model.params(), cfg.lr(), cfg.clip_norm);
  int64_t start_iter = 0;
  const fs::path latest = fs::path(cfg.out_dir) / "latest";
  std::string last_ckpt;
  if (resume && fs::exists(latest)) {
    std::ifstream lf(latest);
    std::getline(lf, last_ckpt);
    start_iter = load_checkpoint<T>(last_ckpt, cfg.model, model.params(), &opt);
  }

  MetricsLog log;
  log.open((fs::path(cfg.out_dir) / "metrics.tsv").string(), resume);

  AlphaSchedule sched = AlphaSchedule::parse(cfg.alpha_schedule);

  Eigen::setNbThreads(cfg.threads > 1 ? 1 : 2);

  // Epoch-shuffled batch order.
  Rng order_rng(derive_seed(cfg.seed, kStreamBatchOrder, 0));
  std::vector<int> perm(cfg.train_episodes);
  for (int i = 0; i < cfg.train_episodes; ++i) perm[i] = i;
  order_rng.shuffle(perm.begin(), perm.end());
  size_t cursor = 0;
  // Fast-forward the data order on resume so runs continue deterministically.
  for (int64_t it = 0; it < start_iter; ++it)
    for (int b = 0; b < cfg.batch(); ++b) {
      if (cursor >= perm.size()) {
        order_rng.shuffle(perm.begin(), perm.end());
        cursor = 0;
      }
      ++cursor;
    }

  auto save = [&](int64_t iteration) {
    char name[64];
    snprintf(name, sizeof(name), "ckpt_%08" PRId64 ".snpc", iteration);
    const std::string path = (fs::path(cfg.out_dir) / name).string();
    save_checkpoint<T>(path, cfg.model, iteration, model.params(), &opt);
    std::ofstream lf(latest, std::ios::trunc);
    lf << path << "\n";
    last_ckpt = path;
  };

  const int batch = cfg.batch();
  for (int64_t iter = start_iter; iter < cfg.iterations; ++iter) {
    std::vector<int> indices(batch);
    for (int b = 0; b < batch; ++b) {
      if (cursor >= perm.size()) {
        order_rng.shuffle(perm.begin(), perm.end());
        cursor = 0;
      }
      indices[b] = perm[cursor++];
    }
    const double alpha = sched.alpha(iter);
    const uint64_t iter_seed = derive_seed(cfg.seed, kStreamIteration, iter);

    using Item = ItemResult<T, Model, decltype(episode_for(0))>;
    std::vector<Item> items(batch);
    auto work = [&](int b) {
      const auto ep = episode_for(indices[b]);
      items[b] = run_item<T>(cfg, model, ep, alpha, derive_seed(iter_seed, 11, b));
    };
    if (cfg.threads > 1) {
      std::vector<std::thread> pool;
      for (int w = 0; w < cfg.threads; ++w)
        pool.emplace_back([&, w]() {
          for (int b = w; b < batch; b += cfg.threads) work(b);
        });
      for (auto& th : pool) th.join();
    } else {
      for (int b = 0; b < batch; ++b) work(b);
    }

    model.params().zero_grads();
    BatchStats stats;
    double loss_sum = 0;
    for (int b = 0; b < batch; ++b) {
      for (auto& [p, g] : items[b].grads)
        for (int i = 0; i < g.numel(); ++i) p->grad[i] += g[i];
      stats.add(items[b].rep_snp, false);
      if (items[b].used_pd) stats.add(items[b].rep_pd, true);
      loss_sum += items[b].loss;
    }
    if (!std::isfinite(loss_sum))
      throw std::runtime_error("train: non-finite loss at iteration " + std::to_string(iter) +
                               (last_ckpt.empty() ? "" : "; last good checkpoint: " + last_ckpt));
    opt.step(1.0 / batch);

    const double mean_recon = stats.recon / batch;
    sched.observe_recon(mean_recon);

    if (cfg.log_every > 0 && (iter % cfg.log_every == 0 || iter + 1 == cfg.iterations)) {
      const double l_snp = stats.l_snp / batch;
      const double l_pd = stats.l_pd / batch;
      log.row(iter, "train", "l_snp", l_snp, cfg.seed);
      log.row(iter, "train", "l_pd", l_pd, cfg.seed);
      log.row(iter, "train", "combined", l_snp + alpha * l_pd, cfg.seed);
      log.row(iter, "train", "recon", mean_recon, cfg.seed);
      log.row(iter, "train", "kl", stats.kl / batch, cfg.seed);
      log.row(iter, "train", "alpha", alpha, cfg.seed);
      log.flush();
    }
    if (cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0) save(iter + 1);
  }
  save(cfg.iterations);
  return {cfg.iterations, log.path(), last_ckpt};
}

template <class T>
TrainOutputs run_training_typed(const RunConfig& cfg, bool resume) {
  if (cfg.model == "snp") {
    SnpModel<T> model(snp_config_from<T>(cfg));
    return train_loop<T>(cfg, model, [&](int i) { return load_or_generate_1d(cfg, i); }, resume);
  }
  if (cfg.model == "np") {
    NpModel<T> model(snp_config_from<T>(cfg));
    return train_loop<T>(cfg, model, [&](int i) { return load_or_generate_1d(cfg, i); }, resume);
  }
  if (cfg.model == "tgqn") {
    TgqnModel<T> model(tgqn_config_from<T>(cfg));
    return train_loop<T>(cfg, model, [&](int i) { return load_or_generate_2d(cfg, i); }, resume);
  }
  GqnModel<T> model(tgqn_config_from<T>(cfg));
  return train_loop<T>(cfg, model, [&](int i) { return load_or_generate_2d(cfg, i); }, resume);
}

}  // namespace

TrainOutputs run_training(const RunConfig& cfg, bool resume) {
  cfg.validate();
  if (cfg.precision == "f64") return run_training_typed<double>(cfg, resume);
  return run_training_typed<float>(cfg, resume);
}

}  // namespace snp
