#include "m3dm/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "m3dm/error.hpp"
#include "m3dm/features.hpp"
#include "m3dm/geometry.hpp"
#include "m3dm/random.hpp"

namespace m3dm::pipeline {

using nlohmann::json;

const char* to_string(Bank bank) noexcept {
  switch (bank) {
    case Bank::Rgb: return "rgb";
    case Bank::Pt: return "pt";
    case Bank::Fs: return "fs";
  }
  return "?";
}

BankSet BankSet::parse(const std::string& text) {
  BankSet set;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(std::remove_if(item.begin(), item.end(), ::isspace), item.end());
    if (item.empty()) continue;
    if (item == "rgb") {
      set.add(Bank::Rgb);
    } else if (item == "pt") {
      set.add(Bank::Pt);
    } else if (item == "fs") {
      set.add(Bank::Fs);
    } else {
      throw Error(ErrorKind::ConfigError, "unknown memory bank '" + item + "'");
    }
  }
  require(!set.empty(), ErrorKind::ConfigError, "bank set must not be empty");
  return set;
}

std::vector<Bank> BankSet::list() const {
  std::vector<Bank> out;
  for (Bank b : kAllBanks) {
    if (has(b)) out.push_back(b);
  }
  return out;
}

std::string BankSet::to_string() const {
  std::string out;
  for (Bank b : list()) {
    if (!out.empty()) out += ",";
    out += pipeline::to_string(b);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Configuration

void PipelineConfig::validate() const {
  auto check = [](bool ok, const std::string& what) {
    if (!ok) throw Error(ErrorKind::ConfigError, what);
  };
  check(dataset_dir != work_dir, "dataset and work directories must differ");
  check(plane_thresh > 0.0 && ransac_iters > 0 && target_size > 0, "invalid preprocessing settings");
  check(grid_h > 0 && grid_w > 0 && target_size % grid_h == 0 && target_size % grid_w == 0,
        "grid must divide the target size");
  check(groups > 0 && group_size > 0, "groups must be positive");
  check(d_rgb > 0 && d_pt > 0 && point_length_unit > 0.0 && interp_neighbors >= 0 && interp_eps > 0.0,
        "invalid feature settings");
  check(hidden_ratio > 0 && embed_dim > 0, "invalid fusion network shape");
  check(coreset_ratio > 0.0 && coreset_ratio <= 1.0, "coreset_ratio must lie in (0, 1]");
  check(phi_b >= 1, "phi_b must be at least 1");
  check(!banks.empty(), "bank set must not be empty");
  check(dlf.nu > 0.0 && dlf.nu <= 1.0 && dlf.lr > 0.0 && dlf.epochs >= 0 && dlf.margin > 0.0,
        "invalid decision head settings");
  check(patch_cap > 0, "patch_cap must be positive");
  check(sigma >= 0.0 && fpr_limit > 0.0 && fpr_limit <= 1.0, "invalid evaluation settings");
  try {
    uff.validate();
    synth.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::ConfigError, e.what());
  }
}

nlohmann::ordered_json PipelineConfig::to_json() const {
  nlohmann::ordered_json j;
  j["dataset"] = dataset_dir.string();
  j["work"] = work_dir.string();
  j["preprocess"] = {{"plane_thresh", plane_thresh}, {"ransac_iters", ransac_iters}, {"target_size", target_size}};
  j["grid"] = {grid_h, grid_w};
  j["groups"] = {groups, group_size};
  j["features"] = {{"d_rgb", d_rgb},
                   {"d_pt", d_pt},
                   {"point_length_unit", point_length_unit},
                   {"interp_neighbors", interp_neighbors},
                   {"interp_eps", interp_eps}};
  j["uff"] = {{"hidden_ratio", hidden_ratio},   {"embed_dim", embed_dim},
              {"lr", uff.lr},                   {"warmup_steps", uff.warmup_steps},
              {"total_steps", uff.total_steps}, {"batch_size", uff.batch_size},
              {"temperature", uff.temperature}, {"weight_decay", uff.weight_decay},
              {"clip_norm", uff.clip_norm}};
  j["memory"] = {{"coreset_ratio", coreset_ratio}, {"phi_b", phi_b}};
  j["banks"] = banks.to_string();
  j["dlf"] = {{"nu", dlf.nu}, {"lr", dlf.lr}, {"epochs", dlf.epochs}, {"margin", dlf.margin},
              {"patch_cap", patch_cap}};
  j["eval"] = {{"sigma", sigma}, {"fpr_limit", fpr_limit}};
  j["seeds"] = {{"ransac", seeds.ransac}, {"fps", seeds.fps}, {"feature", seeds.feature},
                {"uff", seeds.uff},       {"bank", seeds.bank}, {"dlf", seeds.dlf},
                {"synth", seeds.synth}};
  std::vector<std::string> kinds;
  for (auto k : synth.anomaly_kinds) kinds.emplace_back(synthetic::to_string(k));
  j["synth"] = {{"n_train", synth.n_train},
                {"n_test_good", synth.n_test_good},
                {"n_test_anomalous", synth.n_test_anomalous},
                {"image_size", synth.image_size},
                {"anomaly_kinds", kinds}};
  j["threads"] = threads;
  return j;
}

namespace {

class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw Error(ErrorKind::ConfigError, "'" + name_ + "' must be an object");
  }
  template <class T>
  Section& take(const char* key, T& field) {
    seen_.insert(key);
    if (auto it = j_.find(key); it != j_.end()) {
      try {
        field = it->get<T>();
      } catch (const json::exception&) {
        throw Error(ErrorKind::ConfigError, "bad value for '" + name_ + "." + key + "'");
      }
    }
    return *this;
  }
  Section& allow(const char* key) {
    seen_.insert(key);
    return *this;
  }
  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) {
        throw Error(ErrorKind::ConfigError, "unknown config key '" + name_ + "." + item.key() + "'");
      }
    }
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

void take_pair(const json& j, const char* key, int& a, int& b) {
  auto it = j.find(key);
  if (it == j.end()) return;
  if (!it->is_array() || it->size() != 2) {
    throw Error(ErrorKind::ConfigError, std::string("'") + key + "' must be a two-element array");
  }
  try {
    a = (*it)[0].get<int>();
    b = (*it)[1].get<int>();
  } catch (const nlohmann::json::exception&) {
    throw Error(ErrorKind::ConfigError, std::string("bad value for '") + key + "'");
  }
}

}  // namespace

void PipelineConfig::apply_json(const json& j) {
  Section top(j, "config");
  std::string dataset = dataset_dir.string();
  std::string work = work_dir.string();
  std::string bank_text = banks.to_string();
  top.take("dataset", dataset).take("work", work).take("banks", bank_text).take("threads", threads);
  dataset_dir = dataset;
  work_dir = work;
  banks = BankSet::parse(bank_text);

  for (const char* key : {"grid", "groups", "preprocess", "features", "uff", "memory", "dlf", "eval",
                          "seeds", "synth"}) {
    top.allow(key);
  }
  top.finish();

  take_pair(j, "grid", grid_h, grid_w);
  take_pair(j, "groups", groups, group_size);
  if (j.contains("preprocess")) {
    Section s(j["preprocess"], "preprocess");
    s.take("plane_thresh", plane_thresh).take("ransac_iters", ransac_iters).take("target_size", target_size);
    s.finish();
  }
  if (j.contains("features")) {
    Section s(j["features"], "features");
    s.take("d_rgb", d_rgb).take("d_pt", d_pt).take("point_length_unit", point_length_unit);
    s.take("interp_neighbors", interp_neighbors).take("interp_eps", interp_eps);
    s.finish();
  }
  if (j.contains("uff")) {
    Section s(j["uff"], "uff");
    s.take("hidden_ratio", hidden_ratio).take("embed_dim", embed_dim).take("lr", uff.lr);
    s.take("warmup_steps", uff.warmup_steps).take("total_steps", uff.total_steps);
    s.take("batch_size", uff.batch_size).take("temperature", uff.temperature);
    s.take("weight_decay", uff.weight_decay).take("clip_norm", uff.clip_norm);
    s.finish();
  }
  if (j.contains("memory")) {
    Section s(j["memory"], "memory");
    s.take("coreset_ratio", coreset_ratio).take("phi_b", phi_b);
    s.finish();
  }
  if (j.contains("dlf")) {
    Section s(j["dlf"], "dlf");
    s.take("nu", dlf.nu).take("lr", dlf.lr).take("epochs", dlf.epochs).take("margin", dlf.margin);
    s.take("patch_cap", patch_cap);
    s.finish();
  }
  if (j.contains("eval")) {
    Section s(j["eval"], "eval");
    s.take("sigma", sigma).take("fpr_limit", fpr_limit);
    s.finish();
  }
  if (j.contains("seeds")) {
    Section s(j["seeds"], "seeds");
    s.take("ransac", seeds.ransac).take("fps", seeds.fps).take("feature", seeds.feature);
    s.take("uff", seeds.uff).take("bank", seeds.bank).take("dlf", seeds.dlf).take("synth", seeds.synth);
    s.finish();
  }
  if (j.contains("synth")) {
    Section s(j["synth"], "synth");
    std::vector<std::string> kinds;
    for (auto k : synth.anomaly_kinds) kinds.emplace_back(synthetic::to_string(k));
    s.take("n_train", synth.n_train).take("n_test_good", synth.n_test_good);
    s.take("n_test_anomalous", synth.n_test_anomalous).take("image_size", synth.image_size);
    s.take("anomaly_kinds", kinds);
    s.finish();
    synth.anomaly_kinds.clear();
    try {
      for (const auto& k : kinds) synth.anomaly_kinds.push_back(synthetic::anomaly_kind_from_string(k));
    } catch (const Error& e) {
      throw Error(ErrorKind::ConfigError, e.what());
    }
  }
}

fusion::TrainConfig PipelineConfig::uff_config() const {
  fusion::TrainConfig c = uff;
  c.seed = seeds.uff;
  return c;
}

decision::OcsvmConfig PipelineConfig::dlf_config(std::string_view head) const {
  decision::OcsvmConfig c = dlf;
  c.seed = derive_seed(seeds.dlf, head);
  return c;
}

// ---------------------------------------------------------------------------

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  std::size_t workers = threads > 0 ? static_cast<std::size_t>(threads)
                                    : std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < workers; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

ExtractedScene extract_scene(const OrganizedScene& raw, const PipelineConfig& cfg) {
  geometry::PreprocessOptions pre;
  pre.dist_thresh = cfg.plane_thresh;
  pre.iters = cfg.ransac_iters;
  pre.target_size = cfg.target_size;
  pre.seed = cfg.seeds.ransac;
  const OrganizedScene scene = geometry::preprocess_scene(raw, pre);

  ExtractedScene out;
  out.rgb = features::toy_rgb_extractor(scene.rgb, scene.height, scene.width, cfg.grid_h, cfg.grid_w,
                                        cfg.d_rgb, derive_seed(cfg.seeds.feature, "rgb"));

  std::vector<Vec3> points;
  std::vector<std::size_t> pixels;
  scene.valid_points(points, pixels);
  require(!points.empty(), ErrorKind::DataError, "no foreground points left after plane removal");
  const std::size_t m = std::min<std::size_t>(static_cast<std::size_t>(cfg.groups), points.size());
  const std::size_t s = std::min<std::size_t>(static_cast<std::size_t>(cfg.group_size), points.size());
  Rng rng(cfg.seeds.fps);
  const auto centers = geometry::farthest_point_sampling(points, m, rng.uniform_index(points.size()));
  const auto groups = geometry::knn_group(points, centers, s);
  const RowMatrix group_features = features::toy_point_extractor(
      groups, points, cfg.d_pt, derive_seed(cfg.seeds.feature, "pt"), cfg.point_length_unit);
  const RowMatrix point_features = geometry::interpolate_to_points(
      group_features, groups.centers, points, cfg.interp_eps, static_cast<std::size_t>(cfg.interp_neighbors));
  const PatchGrid full = geometry::project_to_plane(point_features, pixels, scene.height, scene.width);
  out.pt = geometry::average_pool(full, cfg.grid_h, cfg.grid_w);
  return out;
}

PatchGrid bank_grid(const Banks& banks, const ExtractedScene& scene, Bank bank) {
  switch (bank) {
    case Bank::Rgb: return scene.rgb;
    case Bank::Pt: return scene.pt;
    case Bank::Fs:
      require(banks.uff.has_value(), ErrorKind::DataError, "fused features need a trained fusion network");
      return fusion::fuse_grid(*banks.uff, scene.rgb, scene.pt);
  }
  return {};
}

fusion::FusionNetwork train_uff(std::span<const ExtractedScene> train, const PipelineConfig& cfg,
                                std::vector<double>* loss_log) {
  std::vector<PatchGrid> rgb, pt;
  for (const auto& s : train) {
    rgb.push_back(s.rgb);
    pt.push_back(s.pt);
  }
  fusion::FusionShape shape;
  shape.d_rgb = cfg.d_rgb;
  shape.d_pt = cfg.d_pt;
  shape.hidden_ratio = cfg.hidden_ratio;
  shape.embed = cfg.embed_dim;
  return fusion::uff_train(rgb, pt, shape, cfg.uff_config(), loss_log);
}

void build_banks(Banks& banks, std::span<const ExtractedScene> train, const PipelineConfig& cfg,
                 BankSet which) {
  require(!train.empty(), ErrorKind::EmptyData, "no training scenes");
  for (Bank b : which.list()) {
    std::vector<PatchGrid> grids;
    grids.reserve(train.size());
    for (const auto& s : train) grids.push_back(bank_grid(banks, s, b));
    const auto feats = memory::collect_features(grids);
    banks.banks[static_cast<int>(b)] =
        memory::coreset_select(feats, cfg.coreset_ratio, derive_seed(cfg.seeds.bank, to_string(b)));
  }
}

BankScores score_scene(const Banks& banks, const ExtractedScene& scene, const PipelineConfig& cfg,
                       BankSet which) {
  BankScores out;
  for (Bank b : which.list()) {
    const auto& bank = banks.banks[static_cast<int>(b)];
    require(bank.has_value(), ErrorKind::DataError, std::string("memory bank '") + to_string(b) + "' not built");
    const PatchGrid grid = bank_grid(banks, scene, b);
    const int i = static_cast<int>(b);
    out.psi[i] = memory::psi_map(*bank, grid);
    const auto b_eff = std::min<std::size_t>(static_cast<std::size_t>(cfg.phi_b), bank->size());
    const auto phi = memory::phi_from_psi(*bank, grid, out.psi[i], b_eff);
    out.phi[i] = phi.score;
    out.s_star[i] = phi.s_star;
    if (out.occupancy.empty()) {
      out.occupancy = grid.occupancy;
    } else {
      for (std::size_t c = 0; c < grid.occupancy.size(); ++c) out.occupancy[c] &= grid.occupancy[c];
    }
  }
  return out;
}

namespace {

std::vector<double> pick(const std::array<double, 3>& v, BankSet set) {
  std::vector<double> out;
  for (Bank b : set.list()) out.push_back(v[static_cast<int>(b)]);
  return out;
}

}  // namespace

Heads train_dlf(std::span<const BankScores> train_scores, const PipelineConfig& cfg, BankSet set) {
  require(!train_scores.empty(), ErrorKind::EmptyData, "no training scores for the decision heads");
  const auto banks = set.list();
  const auto d = static_cast<Eigen::Index>(banks.size());

  RowMatrix scene_samples(static_cast<Eigen::Index>(train_scores.size()), d);
  for (std::size_t i = 0; i < train_scores.size(); ++i) {
    for (Eigen::Index k = 0; k < d; ++k) {
      scene_samples(static_cast<Eigen::Index>(i), k) = train_scores[i].phi[static_cast<int>(banks[k])];
    }
  }

  struct PatchRef {
    std::size_t scene, cell;
  };
  std::vector<PatchRef> refs;
  for (std::size_t i = 0; i < train_scores.size(); ++i) {
    const auto& occ = train_scores[i].occupancy;
    for (std::size_t c = 0; c < occ.size(); ++c) {
      if (occ[c]) refs.push_back({i, c});
    }
  }
  require(!refs.empty(), ErrorKind::EmptyData, "no occupied training patches for the segmentation head");
  if (refs.size() > cfg.patch_cap) {
    Rng rng(derive_seed(cfg.seeds.dlf, "patch_subsample"));
    for (std::size_t i = 0; i < cfg.patch_cap; ++i) {
      std::swap(refs[i], refs[i + rng.uniform_index(refs.size() - i)]);
    }
    refs.resize(cfg.patch_cap);
  }
  RowMatrix patch_samples(static_cast<Eigen::Index>(refs.size()), d);
  for (std::size_t r = 0; r < refs.size(); ++r) {
    for (Eigen::Index k = 0; k < d; ++k) {
      patch_samples(static_cast<Eigen::Index>(r), k) =
          train_scores[refs[r].scene].psi[static_cast<int>(banks[k])].values[refs[r].cell];
    }
  }

  Heads heads;
  heads.set = set;
  heads.a = decision::ocsvm_train(scene_samples, cfg.dlf_config("head_a"));
  heads.s = decision::ocsvm_train(patch_samples, cfg.dlf_config("head_s"));
  return heads;
}

decision::SceneDecision decide(const Heads& heads, const BankScores& scores, int h, int w, double sigma) {
  const auto phi = pick(scores.phi, heads.set);
  std::vector<ScoreMap> psi;
  for (Bank b : heads.set.list()) psi.push_back(scores.psi[static_cast<int>(b)]);
  return decision::dlf_infer_scene(heads.a, heads.s, phi, psi, h, w, sigma);
}

TrainedModel train_pipeline(std::span<const ExtractedScene> train, const PipelineConfig& cfg) {
  cfg.validate();
  require(!train.empty(), ErrorKind::EmptyData, "no training scenes");
  TrainedModel model;
  if (cfg.banks.has(Bank::Fs)) model.banks.uff = train_uff(train, cfg);
  build_banks(model.banks, train, cfg, cfg.banks);
  std::vector<BankScores> scores(train.size());
  parallel_for(train.size(), cfg.threads,
               [&](std::size_t i) { scores[i] = score_scene(model.banks, train[i], cfg, cfg.banks); });
  model.heads = train_dlf(scores, cfg, cfg.banks);
  return model;
}

std::vector<AblationRow> ablate(std::span<const BankScores> train_scores,
                                std::span<const BankScores> test_scores, std::span<const int> labels,
                                std::span<const std::vector<std::uint8_t>> masks, int h, int w,
                                const PipelineConfig& cfg, std::span<const BankSet> subsets) {
  std::vector<AblationRow> rows;
  for (const BankSet& set : subsets) {
    const Heads heads = train_dlf(train_scores, cfg, set);
    std::vector<double> a;
    std::vector<ScoreMap> maps;
    for (const auto& s : test_scores) {
      auto d = decide(heads, s, h, w, cfg.sigma);
      a.push_back(d.anomaly_score);
      maps.push_back(std::move(d.segmentation));
    }
    rows.push_back({set, metrics::evaluate(a, labels, maps, masks, cfg.fpr_limit)});
  }
  return rows;
}

std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  std::string out = "| banks | I-AUROC | AUPRO | P-AUROC |\n|---|---|---|---|\n";
  char line[128];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "| %s | %.3f | %.3f | %.3f |\n", r.set.to_string().c_str(),
                  r.report.i_auroc, r.report.aupro, r.report.p_auroc);
    out += line;
  }
  return out;
}

}  // namespace m3dm::pipeline
