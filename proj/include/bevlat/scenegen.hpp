#pragma once

// Procedural multi-camera scenes: oriented boxes on a ground plane, rendered
// with a z-buffered rasterizer, plus the on-disk dataset format.

#include "bevlat/geometry.hpp"

#include <Eigen/Geometry>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace bevlat {

using Rgb = std::array<double, 3>;

struct Box3D {
  Eigen::Quaterniond orientation = Eigen::Quaterniond::Identity();
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  Eigen::Vector3d size = Eigen::Vector3d::Ones();  ///< (l, w, h) along the box x, y, z axes
  int class_id = 0;

  void validate(int class_count) const;
  Eigen::Matrix3d rotation() const { return orientation.toRotationMatrix(); }
  std::array<Eigen::Vector3d, 8> corners() const;
};

struct SceneSpec {
  std::vector<Box3D> boxes;
  std::vector<Rgb> box_colors;
  Rgb ground_color{0.4, 0.4, 0.4};
  uint64_t seed = 0;
};

struct ClassSize {
  Range length, width, height;
};

struct SceneGenConfig {
  int min_boxes = 1;
  int max_boxes = 4;
  int class_count = 3;
  /// Box centers are placed at a horizontal distance in [min_distance, max_distance) from the ego.
  double min_distance = 4.5;
  double max_distance = 11.0;
  BevGridConfig bev;
  /// Size ranges per class; class c uses entry c % size.
  std::vector<ClassSize> class_sizes = {
      {{3.8, 4.8}, {1.7, 2.0}, {1.4, 1.8}},  // car
      {{5.5, 7.5}, {2.2, 2.6}, {2.4, 2.9}},  // truck
      {{0.9, 1.3}, {0.9, 1.3}, {1.6, 2.0}},  // pillar-like obstacle
  };

  void validate() const;
};

/// Deterministic in `seed`; boxes rest on the ground (center z = h / 2) and
/// have yaw-only orientation.
SceneSpec sample_scene(uint64_t seed, const SceneGenConfig& cfg);

struct RenderStyle {
  Rgb sky{0.55, 0.70, 0.90};
  /// Direction toward the light in the ego frame (normalized internally).
  Eigen::Vector3d light{0.4, 0.3, 0.85};
  double ambient = 0.45;
  double near_plane = 1e-3;
};

inline constexpr int kSurfaceSky = -1;
inline constexpr int kSurfaceGround = 0;
/// Surface id of face f (0..5) of box b.
inline constexpr int box_surface_id(int box, int face) { return 1 + box * 6 + face; }

struct RenderedView {
  torch::Tensor image;    ///< [H, W, 3] float32 in [0,1]
  torch::Tensor depth;    ///< [H, W] float64 camera z, +inf for sky
  torch::Tensor surface;  ///< [H, W] int32 surface id (see kSurface*)
};

/// Flat color of box face `face` under `style` (faces: -x, +x, -y, +y, -z, +z in box frame).
Rgb shade_box_face(const SceneSpec& scene, int box, int face, const RenderStyle& style = {});

RenderedView render_view(const SceneSpec& scene, const CameraIntrinsics& intr, const CameraExtrinsics& extr,
                         const RenderStyle& style = {});

struct MultiViewBatch {
  torch::Tensor images;                ///< [V, H, W, 3] float32
  std::optional<torch::Tensor> depths; ///< [V, H, W] float64
  CameraRig rig;
  SceneSpec scene;

  int views() const { return rig.size(); }
};

MultiViewBatch render_batch(const SceneSpec& scene, const CameraRig& rig, const RenderStyle& style = {});

Json scene_to_json(const SceneSpec& scene);
SceneSpec scene_from_json(const Json& j);

// ---------------------------------------------------------------------------
// Dataset layout (byte-exact):
//   <root>/scenes.jsonl                one JSON object per line:
//                                      {"index", "scene", "rig", "has_depth"}
//   <root>/scene_%06d/view_%d.png      8-bit RGB
//   <root>/scene_%06d/depth_%d.png     16-bit gray, millimeters; 0 = no surface,
//                                      65535 = at or beyond 65.535 m
// ---------------------------------------------------------------------------

void write_dataset(const std::filesystem::path& root, const std::vector<MultiViewBatch>& batches,
                   bool with_depth = true);

class Dataset {
 public:
  explicit Dataset(std::filesystem::path root);

  size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::filesystem::path& root() const { return root_; }
  /// Loads scene `i` from disk.
  MultiViewBatch at(size_t i) const;
  const SceneSpec& scene(size_t i) const { return entries_.at(i).scene; }
  const CameraRig& rig(size_t i) const { return entries_.at(i).rig; }

 private:
  struct Entry {
    int index;
    SceneSpec scene;
    CameraRig rig;
    bool has_depth;
  };
  std::filesystem::path root_;
  std::vector<Entry> entries_;
};

Dataset read_dataset(const std::filesystem::path& root);

/// Renders scenes for seeds base_seed, base_seed + 1, ...
std::vector<MultiViewBatch> generate_scenes(int count, uint64_t base_seed, const SceneGenConfig& gen,
                                            const CameraRig& rig, const RenderStyle& style = {});

}  // namespace bevlat
