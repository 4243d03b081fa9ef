#pragma once

// End-to-end wiring: scene -> patch features -> fusion -> memory banks ->
// decision heads -> scores. Shared by the CLI and the acceptance suite.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "m3dm/decision.hpp"
#include "m3dm/fusion.hpp"
#include "m3dm/memory.hpp"
#include "m3dm/metrics.hpp"
#include "m3dm/synthetic.hpp"
#include "m3dm/types.hpp"

namespace m3dm::pipeline {

enum class Bank : int { Rgb = 0, Pt = 1, Fs = 2 };
inline constexpr std::array<Bank, 3> kAllBanks = {Bank::Rgb, Bank::Pt, Bank::Fs};
const char* to_string(Bank bank) noexcept;

/// Subset of {rgb, pt, fs}; iteration order is always rgb, pt, fs.
class BankSet {
 public:
  constexpr BankSet() = default;
  static BankSet all() { return parse("rgb,pt,fs"); }
  static BankSet parse(const std::string& text);

  [[nodiscard]] bool has(Bank b) const noexcept { return (bits_ >> static_cast<int>(b)) & 1u; }
  void add(Bank b) noexcept { bits_ |= 1u << static_cast<int>(b); }
  [[nodiscard]] bool empty() const noexcept { return bits_ == 0; }
  [[nodiscard]] std::vector<Bank> list() const;
  [[nodiscard]] std::size_t size() const { return list().size(); }
  [[nodiscard]] std::string to_string() const;

  friend bool operator==(const BankSet&, const BankSet&) = default;

 private:
  unsigned bits_ = 0;
};

struct Seeds {
  std::uint64_t ransac = 1;
  std::uint64_t fps = 2;
  std::uint64_t feature = 3;
  std::uint64_t uff = 4;
  std::uint64_t bank = 5;
  std::uint64_t dlf = 6;
  std::uint64_t synth = 7;
};

struct PipelineConfig {
  std::filesystem::path dataset_dir = "data";
  std::filesystem::path work_dir = "work";

  // preprocessing
  double plane_thresh = 0.005;
  int ransac_iters = 500;
  int target_size = 224;

  // patch features
  int grid_h = 56;
  int grid_w = 56;
  int groups = 1024;
  int group_size = 128;
  int d_rgb = 768;
  int d_pt = 128;
  double point_length_unit = 0.01;
  int interp_neighbors = 3;
  double interp_eps = 1e-8;

  // fusion
  int hidden_ratio = 4;
  int embed_dim = 128;
  fusion::TrainConfig uff;

  // memory banks
  double coreset_ratio = 0.1;
  int phi_b = 3;
  BankSet banks = BankSet::all();

  // decision heads
  decision::OcsvmConfig dlf;
  std::size_t patch_cap = 200000;

  // evaluation
  double sigma = 4.0;
  double fpr_limit = 0.3;

  Seeds seeds;
  synthetic::DatasetSpec synth;
  int threads = 0;  // 0 = hardware concurrency

  void validate() const;
  [[nodiscard]] nlohmann::ordered_json to_json() const;
  /// Overrides the fields present in j; unknown keys raise ConfigError.
  void apply_json(const nlohmann::json& j);
  [[nodiscard]] fusion::TrainConfig uff_config() const;
  [[nodiscard]] decision::OcsvmConfig dlf_config(std::string_view head) const;
};

/// Runs fn(i) for i in [0, n) on a small thread pool; the first exception is
/// rethrown after all workers finish.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

struct ExtractedScene {
  PatchGrid rgb;
  PatchGrid pt;
};

/// Preprocess, toy RGB features, and point feature alignment
/// (FPS -> kNN groups -> point features -> interpolation -> projection -> pooling).
ExtractedScene extract_scene(const OrganizedScene& raw, const PipelineConfig& cfg);

/// Per-bank scores of one scene. Slots of banks that are not in use stay empty.
struct BankScores {
  std::array<double, 3> phi{};
  std::array<double, 3> s_star{};
  std::array<ScoreMap, 3> psi;
  std::vector<std::uint8_t> occupancy;  // AND over the banks in use
};

struct Banks {
  std::optional<fusion::FusionNetwork> uff;
  std::array<std::optional<memory::MemoryBank>, 3> banks;
};

struct Heads {
  decision::DecisionHead a;
  decision::DecisionHead s;
  BankSet set;
};

struct TrainedModel {
  Banks banks;
  Heads heads;
};

/// The grid a bank looks at: rgb, pt, or the fused grid.
PatchGrid bank_grid(const Banks& banks, const ExtractedScene& scene, Bank bank);

fusion::FusionNetwork train_uff(std::span<const ExtractedScene> train, const PipelineConfig& cfg,
                                std::vector<double>* loss_log = nullptr);

/// Builds the banks in `which` (needs banks.uff for fs).
void build_banks(Banks& banks, std::span<const ExtractedScene> train, const PipelineConfig& cfg,
                 BankSet which);

BankScores score_scene(const Banks& banks, const ExtractedScene& scene, const PipelineConfig& cfg,
                       BankSet which);

/// Fits head_a on scene phi vectors and head_s on pooled per-patch psi vectors
/// (patches occupied in every bank of `set`, subsampled to cfg.patch_cap).
Heads train_dlf(std::span<const BankScores> train_scores, const PipelineConfig& cfg, BankSet set);

decision::SceneDecision decide(const Heads& heads, const BankScores& scores, int h, int w,
                               double sigma);

/// Stage 0: UFF (when fs is used); stage 1: banks; stage 2: decision heads.
TrainedModel train_pipeline(std::span<const ExtractedScene> train, const PipelineConfig& cfg);

struct AblationRow {
  BankSet set;
  metrics::EvalReport report;
};

/// Table-4 style comparison: for each subset, fit heads on training scores and
/// evaluate on test scores.
std::vector<AblationRow> ablate(std::span<const BankScores> train_scores,
                                std::span<const BankScores> test_scores, std::span<const int> labels,
                                std::span<const std::vector<std::uint8_t>> masks, int h, int w,
                                const PipelineConfig& cfg, std::span<const BankSet> subsets);

std::string format_ablation_table(const std::vector<AblationRow>& rows);

}  // namespace m3dm::pipeline
