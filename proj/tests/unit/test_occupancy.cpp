#include "bevlat/error.hpp"
#include "bevlat/occupancy.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace bevlat;

TEST(Occupancy, PointInBoxHalfOpen) {
  Box3D b;
  b.size = {2.0, 4.0, 6.0};
  EXPECT_TRUE(point_in_box({0, 0, 0}, b));
  EXPECT_TRUE(point_in_box({-1.0, -2.0, -3.0}, b));
  EXPECT_FALSE(point_in_box({1.0, 0, 0}, b));
  EXPECT_FALSE(point_in_box({0, 2.0, 0}, b));
  EXPECT_FALSE(point_in_box({0, 0, 3.0}, b));
  EXPECT_TRUE(point_in_box({0.999, 1.999, 2.999}, b));
}

TEST(Occupancy, PointInRotatedBox) {
  Box3D b;
  b.size = {4.0, 1.0, 1.0};
  b.orientation = Eigen::Quaterniond(Eigen::AngleAxisd(M_PI / 2, Eigen::Vector3d::UnitZ()));
  EXPECT_TRUE(point_in_box({0.0, 1.5, 0.0}, b));
  EXPECT_FALSE(point_in_box({1.5, 0.0, 0.0}, b));
}

TEST(Occupancy, NonUnitQuaternionRejected) {
  Box3D b;
  b.orientation = Eigen::Quaterniond(1.01, 0, 0, 0);
  EXPECT_THROW(point_in_box({0, 0, 0}, b), Error);
  b.orientation = Eigen::Quaterniond(1.0005, 0, 0, 0);
  EXPECT_NO_THROW(point_in_box({0, 0, 0}, b));
}

TEST(Occupancy, VoxelizeMatchesContainmentOracle) {
  BevGridConfig g{16, 12, 4, {-8.0, 8.0}, {-6.0, 6.0}, {-1.0, 3.0}};
  std::mt19937_64 rng(2024);
  for (int set = 0; set < 100; ++set) {
    std::vector<Box3D> boxes;
    const int n = 1 + static_cast<int>(rng() % 5);
    for (int i = 0; i < n; ++i) boxes.push_back(oracle::random_box(rng, g, 3));
    auto got = voxelize_boxes(boxes, g, 3);
    auto want = oracle::voxelize(boxes, g, 3);
    ASSERT_TRUE(torch::equal(got.grid, want)) << "box set " << set;
  }
}

TEST(Occupancy, VoxelizeFaceOnCellCenterFollowsHalfOpen) {
  BevGridConfig g{4, 4, 1, {0.0, 4.0}, {0.0, 4.0}, {0.0, 1.0}};
  Box3D b;
  b.center = {1.0, 2.0, 0.5};
  b.size = {1.0, 1.0, 2.0};
  auto occ = voxelize_boxes({b}, g, 1).grid;
  // Lower face at x = 0.5 (a cell center) is inside, upper face at 1.5 is not.
  EXPECT_EQ(occ[0][0][1][0].item<int>(), 1);
  EXPECT_EQ(occ[0][0][1][1].item<int>(), 0);
  EXPECT_EQ(occ.sum().item<int64_t>(), 1);
}

TEST(Occupancy, VoxelizeSeparatesClassesAndRejectsBadIds) {
  BevGridConfig g{8, 8, 2, {-4.0, 4.0}, {-4.0, 4.0}, {0.0, 2.0}};
  Box3D a, b;
  a.center = {-2.0, 0.0, 1.0};
  a.class_id = 0;
  b.center = {2.0, 0.0, 1.0};
  b.class_id = 2;
  auto occ = voxelize_boxes({a, b}, g, 3).grid;
  EXPECT_GT(occ[0].sum().item<int64_t>(), 0);
  EXPECT_EQ(occ[1].sum().item<int64_t>(), 0);
  EXPECT_GT(occ[2].sum().item<int64_t>(), 0);
  b.class_id = 3;
  EXPECT_THROW(voxelize_boxes({b}, g, 3), Error);
}

TEST(Occupancy, BoxOutsideGridLeavesItEmpty) {
  BevGridConfig g{8, 8, 2, {-4.0, 4.0}, {-4.0, 4.0}, {0.0, 2.0}};
  Box3D b;
  b.center = {50.0, 0.0, 1.0};
  EXPECT_EQ(voxelize_boxes({b}, g, 1).grid.sum().item<int64_t>(), 0);
}

TEST(Occupancy, EditsApplyInOrder) {
  std::vector<Box3D> boxes(3);
  for (int i = 0; i < 3; ++i) boxes[i].center = {double(i), 0, 0};
  auto out = edit_layout(boxes, {LayoutEdit::remove(0), LayoutEdit::translate(0, {0, 5, 0})});
  ASSERT_EQ(out.size(), 2u);
  // After removing box 0, index 0 refers to the old box 1.
  EXPECT_EQ(out[0].center, Eigen::Vector3d(1, 5, 0));
  EXPECT_EQ(out[1].center, Eigen::Vector3d(2, 0, 0));
  EXPECT_THROW(edit_layout(boxes, {LayoutEdit::remove(3)}), Error);
  EXPECT_THROW(edit_layout(boxes, {LayoutEdit::remove(-1)}), Error);
}

TEST(Occupancy, RotateEditComposesYaw) {
  std::vector<Box3D> boxes(1);
  boxes[0].orientation = Eigen::Quaterniond(Eigen::AngleAxisd(0.3, Eigen::Vector3d::UnitZ()));
  auto out = edit_layout(boxes, {LayoutEdit::rotate(0, 15.0), LayoutEdit::rotate(0, -15.0)});
  EXPECT_LT(out[0].orientation.angularDistance(boxes[0].orientation), 1e-12);
  out = edit_layout(boxes, {LayoutEdit::rotate(0, 90.0)});
  const Eigen::Vector3d axis = out[0].rotation() * Eigen::Vector3d::UnitX();
  EXPECT_NEAR(std::atan2(axis.y(), axis.x()), 0.3 + M_PI / 2, 1e-12);
  EXPECT_EQ(out[0].center, boxes[0].center);
}

TEST(Occupancy, EditSceneKeepsColorsAligned) {
  SceneSpec s;
  s.boxes.resize(3);
  s.box_colors = {{0.1, 0, 0}, {0.2, 0, 0}, {0.3, 0, 0}};
  auto e = edit_scene(s, {LayoutEdit::remove(1)});
  ASSERT_EQ(e.boxes.size(), 2u);
  EXPECT_EQ(e.box_colors[1][0], 0.3);
}

TEST(Occupancy, ParseEdits) {
  auto j = Json::parse(R"([{"op":"remove","index":3},{"op":"rotate","index":1,"yaw_deg":15},
                           {"op":"translate","index":0,"delta":[1,2,3]}])");
  auto e = parse_edits(j);
  ASSERT_EQ(e.size(), 3u);
  EXPECT_EQ(e[0].kind, LayoutEdit::Kind::Remove);
  EXPECT_EQ(e[0].index, 3);
  EXPECT_EQ(e[1].yaw_degrees, 15.0);
  EXPECT_EQ(e[2].delta, Eigen::Vector3d(1, 2, 3));
  EXPECT_THROW(parse_edits(Json::parse(R"([{"op":"scale","index":0}])")), Error);
  EXPECT_THROW(parse_edits(Json::object()), Error);
}

TEST(Occupancy, EmbeddingLayoutMatchesManualPatching) {
  OccupancyEmbeddingOptions o{2, 3, 2, 5};
  OccupancyEmbedding emb(o);
  torch::NoGradGuard ng;
  emb->proj->bias.normal_();
  auto grid = (torch::rand({2, 2, 3, 4, 6}) > 0.5).to(torch::kUInt8);
  auto tokens = emb->forward(grid);
  ASSERT_EQ(tokens.sizes(), (std::vector<int64_t>{2, 6, 15}));
  const auto w = emb->proj->weight, bias = emb->proj->bias;
  for (int b = 0; b < 2; ++b)
    for (int sy = 0; sy < 2; ++sy)
      for (int sx = 0; sx < 3; ++sx)
        for (int iz = 0; iz < 3; ++iz) {
          // Input order inside a patch: class, then row, then column.
          auto patch = grid[b].select(1, iz).slice(1, sy * 2, sy * 2 + 2).slice(2, sx * 2, sx * 2 + 2);
          auto want = torch::matmul(w, patch.reshape({-1}).to(torch::kFloat32)) + bias;
          auto got = tokens[b][sy * 3 + sx].slice(0, iz * 5, iz * 5 + 5);
          EXPECT_TRUE(torch::allclose(got, want, 1e-5, 1e-6));
        }
}

TEST(Occupancy, EmbedOccupancyIsAlignedWithLatentGrid) {
  BevGridConfig g{8, 8, 2, {-4.0, 4.0}, {-4.0, 4.0}, {0.0, 2.0}};
  Box3D b;
  b.center = {-3.5, 2.5, 0.5};
  b.size = {0.9, 0.9, 0.9};
  auto occ = voxelize_boxes({b}, g, 1);
  OccupancyEmbedding emb(OccupancyEmbeddingOptions{1, 2, 4, 3});
  auto f = embed_occupancy(occ, emb, 2.0);
  ASSERT_EQ(f.feature.sizes(), (std::vector<int64_t>{6, 2, 2}));
  EXPECT_EQ(f.scale_used, 2.0);
  // Zero bias: only the patch holding the box responds. x = -3.5 -> sx = 0; y = 2.5 -> sy = 1.
  auto mag = f.feature.abs().sum(0);
  EXPECT_GT(mag[1][0].item<float>(), 0.0f);
  EXPECT_EQ(mag[0][0].item<float>(), 0.0f);
  EXPECT_EQ(mag[0][1].item<float>(), 0.0f);
  EXPECT_EQ(mag[1][1].item<float>(), 0.0f);
}

TEST(Occupancy, EmbeddingShapeErrors) {
  OccupancyEmbedding emb(OccupancyEmbeddingOptions{3, 4, 4, 8});
  EXPECT_THROW(emb->forward(torch::zeros({1, 2, 4, 8, 8})), Error);
  EXPECT_THROW(emb->forward(torch::zeros({1, 3, 4, 6, 8})), Error);
  EXPECT_THROW(emb->forward(torch::zeros({3, 4, 8, 8})), Error);
}
