#pragma once

// Class-wise binary voxelization of oriented boxes, layout edits, and the
// learned embedding that turns an occupancy grid into a condition aligned
// with the BEV latent tokens.

#include "bevlat/geometry.hpp"
#include "bevlat/scenegen.hpp"

#include <torch/torch.h>

#include <vector>

namespace bevlat {

struct OccupancyGrid {
  torch::Tensor grid;  ///< [C, nz, ny, nx] uint8 in {0, 1}
  BevGridConfig bev;
  int class_count = 0;
};

/// Continuous containment in the box frame with half-open extents
/// [-l/2, l/2) x [-w/2, w/2) x [-h/2, h/2). Throws when the quaternion norm
/// deviates from 1 by more than 1e-3.
bool point_in_box(const Eigen::Vector3d& p, const Box3D& box);

/// voxel (c, z, y, x) = 1 iff its cell center lies inside some box of class c.
OccupancyGrid voxelize_boxes(const std::vector<Box3D>& boxes, const BevGridConfig& cfg, int class_count);

struct LayoutEdit {
  enum class Kind { Remove, Rotate, Translate };
  Kind kind = Kind::Remove;
  int index = 0;
  double yaw_degrees = 0.0;
  Eigen::Vector3d delta = Eigen::Vector3d::Zero();

  static LayoutEdit remove(int index) { return {Kind::Remove, index, 0.0, Eigen::Vector3d::Zero()}; }
  static LayoutEdit rotate(int index, double yaw) { return {Kind::Rotate, index, yaw, Eigen::Vector3d::Zero()}; }
  static LayoutEdit translate(int index, const Eigen::Vector3d& d) { return {Kind::Translate, index, 0.0, d}; }
};

/// Applies edits in order. Indices refer to the list as it stands when the edit runs.
std::vector<Box3D> edit_layout(std::vector<Box3D> boxes, const std::vector<LayoutEdit>& edits);

/// Same as edit_layout but keeps per-box colors in sync with removals.
SceneSpec edit_scene(SceneSpec scene, const std::vector<LayoutEdit>& edits);

/// Parses `[{"op":"remove","index":3}, {"op":"rotate","index":1,"yaw_deg":15},
///          {"op":"translate","index":0,"delta":[dx,dy,dz]}]`.
std::vector<LayoutEdit> parse_edits(const Json& j);

struct OccupancyEmbeddingOptions {
  int class_count = 3;
  int nz = 4;
  int patch = 4;             ///< BEV-plane patch edge; nx and ny must be divisible by it
  int channels_per_height = 32;
};

/// Non-overlapping patch partitioning in the BEV plane followed by a learned
/// linear map (shared across heights); heights are concatenated into channels,
/// height-major: channel = iz * channels_per_height + k.
class OccupancyEmbeddingImpl : public torch::nn::Module {
 public:
  explicit OccupancyEmbeddingImpl(OccupancyEmbeddingOptions options);

  /// grid: [B, C, nz, ny, nx] (any numeric dtype) -> tokens [B, S*S, nz * channels_per_height],
  /// token index = sy * S + sx.
  torch::Tensor forward(const torch::Tensor& grid);

  int out_channels() const { return options_.nz * options_.channels_per_height; }
  const OccupancyEmbeddingOptions& options() const { return options_; }
  torch::nn::Linear proj{nullptr};

 private:
  OccupancyEmbeddingOptions options_;
};
TORCH_MODULE(OccupancyEmbedding);

struct ConditionFeature {
  torch::Tensor feature;  ///< [nz * channels_per_height, S, S]
  double scale_used = 1.0;
};

/// Embeds one grid into a feature map spatially aligned with the latent grid.
ConditionFeature embed_occupancy(const OccupancyGrid& grid, OccupancyEmbedding& embedding, double scale = 1.0);

}  // namespace bevlat
