#pragma once

// Unsupervised feature fusion: per-modality MLPs (chi) followed by linear
// projection heads (sigma), trained with a symmetric patch-wise InfoNCE loss.
// The fused patch feature is the concatenation of the two MLP outputs.

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "m3dm/types.hpp"

namespace m3dm::fusion {

struct Linear {
  RowMatrix weight;  // out x in
  Eigen::VectorXd bias;

  [[nodiscard]] int in_dim() const { return static_cast<int>(weight.cols()); }
  [[nodiscard]] int out_dim() const { return static_cast<int>(weight.rows()); }
};

/// in -> hidden (GELU) -> out.
struct Mlp {
  Linear fc1;
  Linear fc2;
};

struct FusionShape {
  int d_rgb = 768;
  int d_pt = 128;
  int hidden_ratio = 4;
  int out_rgb = 0;  // 0 keeps the input width
  int out_pt = 0;
  int embed = 128;
};

struct FusionNetwork {
  Mlp chi_rgb;
  Mlp chi_pt;
  Linear sigma_rgb;
  Linear sigma_pt;

  [[nodiscard]] int d_rgb() const { return chi_rgb.fc1.in_dim(); }
  [[nodiscard]] int d_pt() const { return chi_pt.fc1.in_dim(); }
  [[nodiscard]] int fused_dim() const { return chi_rgb.fc2.out_dim() + chi_pt.fc2.out_dim(); }
  [[nodiscard]] int embed_dim() const { return sigma_rgb.out_dim(); }
  [[nodiscard]] FusionShape shape() const;
  [[nodiscard]] bool all_finite() const;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
FusionNetwork init_fusion_network(const FusionShape& shape, std::uint64_t seed);

/// Network with every parameter set to zero (gradient accumulator).
FusionNetwork zeros_like(const FusionNetwork& net);

/// Calls f on every parameter tensor of each network, in a fixed order.
template <class F, class... Nets>
void for_each_parameter(F&& f, Nets&... nets) {
  f(nets.chi_rgb.fc1.weight...);
  f(nets.chi_rgb.fc1.bias...);
  f(nets.chi_rgb.fc2.weight...);
  f(nets.chi_rgb.fc2.bias...);
  f(nets.chi_pt.fc1.weight...);
  f(nets.chi_pt.fc1.bias...);
  f(nets.chi_pt.fc2.weight...);
  f(nets.chi_pt.fc2.bias...);
  f(nets.sigma_rgb.weight...);
  f(nets.sigma_rgb.bias...);
  f(nets.sigma_pt.weight...);
  f(nets.sigma_pt.bias...);
}

struct UffOutput {
  Eigen::VectorXd h_rgb;  // unit norm
  Eigen::VectorXd h_pt;   // unit norm
  Eigen::VectorXd fused;  // chi_rgb(f_rgb) ++ chi_pt(f_pt)
};

UffOutput uff_forward(const FusionNetwork& net, const Eigen::VectorXd& f_rgb,
                      const Eigen::VectorXd& f_pt);

struct InfoNceResult {
  double loss = 0.0;
  RowMatrix grad_rgb;
  RowMatrix grad_pt;
};

/// Symmetric InfoNCE over S = H_rgb H_pt^T / temperature with positives on the
/// diagonal: the mean of row-wise and column-wise cross-entropies.
InfoNceResult infonce_loss(const RowMatrix& h_rgb, const RowMatrix& h_pt, double temperature);

/// Full forward pass and loss over a batch of paired patch features; when
/// grad is non-null it receives d loss / d parameters.
double uff_batch_loss(const FusionNetwork& net, const RowMatrix& x_rgb, const RowMatrix& x_pt,
                      double temperature, FusionNetwork* grad);

struct TrainConfig {
  double lr = 0.003;
  int warmup_steps = 250;
  int total_steps = 750;
  int batch_size = 256;
  double temperature = 0.07;
  double weight_decay = 1e-2;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Cosine warm-up to lr over warmup_steps, then cosine decay to zero.
double learning_rate_at(const TrainConfig& cfg, int step);

/// AdamW on batches of co-occupied (scene, patch) pairs. Parameters are rounded
/// to float precision on return so a checkpoint round-trip is exact.
FusionNetwork uff_train(std::span<const PatchGrid> rgb, std::span<const PatchGrid> pt,
                        const FusionShape& shape, const TrainConfig& cfg,
                        std::vector<double>* loss_log = nullptr);

/// Per-patch fused features; occupancy is rgb AND pt.
PatchGrid fuse_grid(const FusionNetwork& net, const PatchGrid& rgb, const PatchGrid& pt);

/// Checkpoint: <dir>/manifest.json plus one tensor file per parameter.
void save_fusion(const std::filesystem::path& dir, const FusionNetwork& net, const TrainConfig& cfg);
FusionNetwork load_fusion(const std::filesystem::path& dir);

}  // namespace m3dm::fusion
