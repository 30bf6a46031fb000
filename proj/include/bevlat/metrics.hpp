#pragma once

// Image and distribution metrics: PSNR, SSIM, MVSC-lite and FD-lite.

#include "bevlat/geometry.hpp"
#include "bevlat/scenegen.hpp"

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace bevlat {

using Json = nlohmann::json;

inline constexpr double kPsnrCap = 99.0;

/// 10 log10(1 / MSE) for images in [0,1]; kPsnrCap when MSE < 1e-10.
double psnr(const torch::Tensor& x, const torch::Tensor& x_hat);

/// Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5) and channels.
/// Accepts [H, W, C] or [N, H, W, C].
double ssim(const torch::Tensor& x, const torch::Tensor& x_hat);

/// Pixel correspondences from the half of `src` that borders `dst`, found
/// with ground-truth depth; sky pixels are carried as points at infinity.
struct ViewCorrespondence {
  int src = 0, dst = 0;
  std::vector<int64_t> src_pixels;  ///< flat y * W + x in src
  std::vector<int64_t> dst_pixels;  ///< flat y * W + x in dst
};

struct MvscOptions {
  double depth_tolerance = 0.05;  ///< relative; larger mismatches count as occluded
  int min_pixels = 16;            ///< pairs with fewer correspondences are skipped
};

/// One correspondence set per ring neighbour pair (v, next(v)).
std::vector<ViewCorrespondence> mvsc_correspondences(const torch::Tensor& depths, const CameraRig& rig,
                                                     const MvscOptions& options = {});

/// Normalized cross-correlation of the colors at corresponding pixels, over all channels.
double correspondence_ncc(const torch::Tensor& images, const ViewCorrespondence& corr);

/// Ratio of mean pair NCC of `recon` to that of the ground truth images, over
/// the pairs where the ground truth has non-degenerate contrast; per-pair
/// confidences are floored at 0.
double mvsc_lite(const torch::Tensor& recon, const MultiViewBatch& gt, const MvscOptions& options = {});

/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)), covariances
/// regularized by +1e-6 I. Rows are samples.
double fd_lite(const torch::Tensor& features_a, const torch::Tensor& features_b);

struct MetricReport {
  double psnr = 0, ssim = 0, mvsc_lite = 0, fd_lite = 0;
  double fd_lite_baseline = 0;  ///< self-distance of the real features (split halves)
  int64_t n_scenes = 0;
  int64_t n_generated = 0;
  std::string config_hash;

  Json to_json() const;
};

}  // namespace bevlat
