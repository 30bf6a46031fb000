#pragma once

// Camera models, BEV/frustum reference grids and ego <-> image projection.
//
// Conventions (fixed here, used everywhere):
//   ego frame:    right-handed, x forward, y left, z up (meters)
//   camera frame: z forward (optical axis), x right, y down
//   pixels:       continuous coordinates, pixel (i, j) covers [i, i+1) x [j, j+1),
//                 so its center sits at (i + 0.5, j + 0.5)
//   extrinsics:   p_cam = rotation * p_ego + translation
//   intervals:    half-open [low, high) for every containment test

#include <Eigen/Core>
#include <json.hpp>
#include <torch/torch.h>

#include <vector>

namespace bevlat {

using Json = nlohmann::json;

struct CameraIntrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;

  void validate() const;
};

struct CameraExtrinsics {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  void validate() const;
  Eigen::Vector3d to_camera(const Eigen::Vector3d& p_ego) const {
    return rotation * p_ego + translation;
  }
  Eigen::Vector3d to_ego(const Eigen::Vector3d& p_cam) const {
    return rotation.transpose() * (p_cam - translation);
  }
  /// Camera center expressed in the ego frame.
  Eigen::Vector3d center() const { return -rotation.transpose() * translation; }
};

struct CameraView {
  CameraIntrinsics intrinsics;
  CameraExtrinsics extrinsics;
};

struct CameraRig {
  std::vector<CameraView> views;
  /// Ring of view indices; (adjacency[i], adjacency[i+1 mod n]) are neighbours.
  std::vector<int> adjacency;

  int size() const { return static_cast<int>(views.size()); }
  void validate() const;
};

struct Range {
  double low = 0.0;
  double high = 1.0;

  double extent() const { return high - low; }
  bool contains(double v) const { return v >= low && v < high; }
};

struct BevGridConfig {
  int nx = 32;
  int ny = 32;
  int nz = 4;
  Range x{-16.0, 16.0};
  Range y{-16.0, 16.0};
  Range z{-1.0, 3.0};

  double cell_x() const { return x.extent() / nx; }
  double cell_y() const { return y.extent() / ny; }
  double cell_z() const { return z.extent() / nz; }
  int64_t cells() const { return int64_t{nx} * ny * nz; }
  bool contains(const Eigen::Vector3d& p) const {
    return x.contains(p.x()) && y.contains(p.y()) && z.contains(p.z());
  }
  void validate() const;

  static BevGridConfig desk() { return {}; }
  /// 128 x 128 pillars of height 8 around the ego vehicle.
  static BevGridConfig paper() { return {128, 128, 8, {-51.2, 51.2}, {-51.2, 51.2}, {-5.0, 3.0}}; }
};

enum class DepthSpacing { Linear, Disparity };

struct FrustumConfig {
  int nu = 8;
  int nv = 8;
  int nd = 12;
  double depth_min = 0.5;
  double depth_max = 12.5;
  DepthSpacing spacing = DepthSpacing::Linear;

  int rays() const { return nu * nv; }
  double depth_at(int k) const;
  void validate() const;

  static FrustumConfig desk() { return {}; }
  static FrustumConfig paper() { return {32, 32, 60, 1.0, 60.0, DepthSpacing::Linear}; }
};

enum class Frame { Ego, Camera };

/// points: [L, 3] float64.
struct ReferencePoints {
  torch::Tensor points;
  Frame frame = Frame::Ego;

  int64_t size() const { return points.size(0); }
};

/// Pillar-grid cell centers in the ego frame, ordered z-major, then y, then x:
/// index = (iz * ny + iy) * nx + ix.
ReferencePoints make_pillar_grid(const BevGridConfig& cfg);

/// Camera-frame frustum points ordered depth-major, then row, then column:
/// index = (id * nv + iv) * nu + iu. Ray (iu, iv) passes through the pixel
/// location ((iu + 0.5) * width / nu, (iv + 0.5) * height / nv).
ReferencePoints make_frustum_grid(const FrustumConfig& cfg, const CameraIntrinsics& intr);

struct ImageProjection {
  torch::Tensor uv;   ///< [L, 2] float64, pixel / image size, in [0,1) where hit
  torch::Tensor hit;  ///< [L] bool
};

inline constexpr double kMinCameraDepth = 1e-6;

ImageProjection project_ego_to_image(const ReferencePoints& points, const CameraIntrinsics& intr,
                                     const CameraExtrinsics& extr);

struct EgoPoints {
  torch::Tensor points;    ///< [L, 3] float64 ego frame
  torch::Tensor in_range;  ///< [L] bool
};

EgoPoints frustum_to_ego(const ReferencePoints& points, const CameraExtrinsics& extr,
                         const BevGridConfig& bev);

/// Maps ego points to [0,1]^3 coordinates of the BEV volume, ordered (x, y, z).
torch::Tensor normalize_to_bev(const torch::Tensor& ego_points, const BevGridConfig& bev);

/// Rotation about the ego vertical axis; positive yaw turns x toward y (left).
Eigen::Matrix3d yaw_rotation(double yaw_degrees);

/// Turns the whole rig about the ego vertical axis: every camera pose is
/// composed with the yaw, intrinsics are untouched.
CameraRig rotate_rig(const CameraRig& rig, double yaw_degrees);

struct SurroundRigConfig {
  int views = 4;
  int image_size = 64;
  double hfov_degrees = 100.0;
  double mount_height = 1.6;
  double pitch_degrees = 0.0;  ///< positive tilts the optical axis down
};

/// Evenly spaced cameras around the ego origin; view k looks along yaw 360 k / views.
CameraRig make_surround_rig(const SurroundRigConfig& cfg);

Json rig_to_json(const CameraRig& rig);
CameraRig rig_from_json(const Json& j);

}  // namespace bevlat
