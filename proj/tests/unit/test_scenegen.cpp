#include "bevlat/error.hpp"
#include "bevlat/scenegen.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace bevlat;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("bevlat_scenegen_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(SceneGen, SampleSceneIsDeterministicAndValid) {
  SceneGenConfig cfg;
  for (uint64_t seed = 0; seed < 20; ++seed) {
    auto a = sample_scene(seed, cfg), b = sample_scene(seed, cfg);
    ASSERT_EQ(a.boxes.size(), b.boxes.size());
    EXPECT_GE(static_cast<int>(a.boxes.size()), cfg.min_boxes);
    EXPECT_LE(static_cast<int>(a.boxes.size()), cfg.max_boxes);
    EXPECT_EQ(a.box_colors.size(), a.boxes.size());
    for (size_t i = 0; i < a.boxes.size(); ++i) {
      const auto& box = a.boxes[i];
      EXPECT_EQ(box.center, b.boxes[i].center);
      EXPECT_NO_THROW(box.validate(cfg.class_count));
      EXPECT_DOUBLE_EQ(box.center.z(), 0.5 * box.size.z());
      const double r = box.center.head<2>().norm();
      EXPECT_GE(r, cfg.min_distance);
      EXPECT_LT(r, cfg.max_distance);
      // Yaw-only orientation keeps the box z axis vertical.
      EXPECT_NEAR((box.rotation() * Eigen::Vector3d::UnitZ() - Eigen::Vector3d::UnitZ()).norm(), 0.0, 1e-12);
    }
  }
}

TEST(SceneGen, ConfigValidation) {
  SceneGenConfig cfg;
  cfg.min_boxes = 5;
  cfg.max_boxes = 2;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = {};
  cfg.max_distance = 100.0;
  EXPECT_THROW(cfg.validate(), Error);
  Box3D box;
  box.class_id = 7;
  EXPECT_THROW(box.validate(3), Error);
}

TEST(SceneGen, RendererMatchesRayCastOracle) {
  SurroundRigConfig rc;
  rc.pitch_degrees = 5.0;
  auto rig = make_surround_rig(rc);
  int64_t total = 0, agree = 0;
  double worst_depth = 0;
  for (uint64_t seed = 0; seed < 6; ++seed) {
    auto scene = sample_scene(seed, {});
    for (const auto& view : rig.views) {
      auto r = render_view(scene, view.intrinsics, view.extrinsics);
      auto o = oracle::raycast(scene, view.intrinsics, view.extrinsics);
      auto same = r.surface == o.surface;
      total += same.numel();
      agree += same.sum().item<int64_t>();
      auto finite = same & torch::isfinite(o.depth);
      if (finite.any().item<bool>()) {
        auto diff = (r.depth.masked_select(finite) - o.depth.masked_select(finite)).abs().max().item<double>();
        worst_depth = std::max(worst_depth, diff);
      }
      EXPECT_TRUE(torch::equal(torch::isinf(r.depth) & same, (o.surface == kSurfaceSky) & same));
    }
  }
  // Only pixels whose centers sit on a silhouette edge may differ.
  EXPECT_GE(static_cast<double>(agree) / total, 0.999);
  EXPECT_LT(worst_depth, 1e-6);
}

TEST(SceneGen, EmptySceneIsGroundAndSky) {
  SceneSpec scene;
  auto rig = make_surround_rig({});
  auto r = render_view(scene, rig.views[0].intrinsics, rig.views[0].extrinsics);
  const int h = r.surface.size(0);
  // Level camera: the horizon splits the image; upper half sky, lower half ground.
  EXPECT_TRUE((r.surface.slice(0, 0, h / 2) == kSurfaceSky).all().item<bool>());
  EXPECT_TRUE((r.surface.slice(0, h / 2, h) == kSurfaceGround).all().item<bool>());
  RenderStyle style;
  EXPECT_FLOAT_EQ(r.image[0][0][0].item<float>(), static_cast<float>(style.sky[0]));
}

TEST(SceneGen, FaceShadingFollowsTheLight) {
  SceneSpec scene;
  scene.boxes.push_back(Box3D{});
  scene.box_colors.push_back({0.5, 0.5, 0.5});
  RenderStyle style;
  // Top face is lit more than the bottom face, which only gets ambient.
  auto top = shade_box_face(scene, 0, 5, style), bottom = shade_box_face(scene, 0, 4, style);
  EXPECT_GT(top[0], bottom[0]);
  EXPECT_NEAR(bottom[0], 0.5 * style.ambient, 1e-12);
}

TEST(SceneGen, SceneJsonRoundTrip) {
  auto s = sample_scene(11, {});
  auto back = scene_from_json(scene_to_json(s));
  ASSERT_EQ(back.boxes.size(), s.boxes.size());
  for (size_t i = 0; i < s.boxes.size(); ++i) {
    EXPECT_EQ(back.boxes[i].center, s.boxes[i].center);
    EXPECT_EQ(back.boxes[i].size, s.boxes[i].size);
    EXPECT_EQ(back.boxes[i].orientation.coeffs(), s.boxes[i].orientation.coeffs());
    EXPECT_EQ(back.boxes[i].class_id, s.boxes[i].class_id);
    EXPECT_EQ(back.box_colors[i], s.box_colors[i]);
  }
  EXPECT_EQ(back.ground_color, s.ground_color);
  EXPECT_EQ(back.seed, s.seed);
}

TEST(SceneGen, DatasetRoundTrip) {
  auto dir = scratch_dir("roundtrip");
  auto rig = make_surround_rig({});
  auto batches = generate_scenes(3, 40, {}, rig);
  write_dataset(dir, batches);
  Dataset data(dir);
  ASSERT_EQ(data.size(), 3u);
  for (size_t i = 0; i < 3; ++i) {
    auto b = data.at(i);
    EXPECT_EQ(b.images.sizes(), batches[i].images.sizes());
    // 8-bit quantization.
    EXPECT_LE((b.images - batches[i].images).abs().max().item<float>(), 0.5f / 255.0f + 1e-6f);
    ASSERT_TRUE(b.depths.has_value());
    auto ref = *batches[i].depths;
    auto finite = torch::isfinite(ref) & (ref < 65.0);
    EXPECT_TRUE(torch::equal(torch::isinf(*b.depths), torch::isinf(ref)));
    EXPECT_LE((b.depths->masked_select(finite) - ref.masked_select(finite)).abs().max().item<double>(), 5e-4 + 1e-9);
    EXPECT_EQ(data.scene(i).boxes.size(), batches[i].scene.boxes.size());
  }
  fs::remove_all(dir);
}

TEST(SceneGen, DatasetWithoutDepth) {
  auto dir = scratch_dir("nodepth");
  auto batches = generate_scenes(1, 5, {}, make_surround_rig({}));
  write_dataset(dir, batches, false);
  EXPECT_FALSE(fs::exists(dir / "scene_000000" / "depth_0.png"));
  EXPECT_FALSE(Dataset(dir).at(0).depths.has_value());
  fs::remove_all(dir);
}

TEST(SceneGen, DatasetErrors) {
  EXPECT_THROW(Dataset("/nonexistent/bevlat"), Error);

  auto dir = scratch_dir("errors");
  EXPECT_TRUE(Dataset(dir).empty());
  std::ofstream(dir / "stray.txt") << "x";
  EXPECT_THROW(Dataset{dir}, Error);
  fs::remove(dir / "stray.txt");

  std::ofstream(dir / "scenes.jsonl") << "{\"index\": 0}\n";
  try {
    Dataset d(dir);
    FAIL() << "malformed record accepted";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("scenes.jsonl:1"), std::string::npos);
  }

  write_dataset(dir, generate_scenes(1, 5, {}, make_surround_rig({})));
  fs::remove(dir / "scene_000000" / "view_2.png");
  Dataset d(dir);
  EXPECT_THROW(d.at(0), Error);
  fs::remove_all(dir);
}
