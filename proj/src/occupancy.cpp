#include "bevlat/occupancy.hpp"

#include "bevlat/error.hpp"

#include <algorithm>
#include <cmath>

namespace bevlat {

bool point_in_box(const Eigen::Vector3d& p, const Box3D& box) {
  require(std::abs(box.orientation.norm() - 1.0) <= 1e-3, "point_in_box: quaternion is not unit length");
  const Eigen::Vector3d local = box.orientation.conjugate() * (p - box.center);
  const Eigen::Vector3d half = 0.5 * box.size;
  for (int k = 0; k < 3; ++k) {
    if (!(local[k] >= -half[k] && local[k] < half[k])) return false;
  }
  return true;
}

OccupancyGrid voxelize_boxes(const std::vector<Box3D>& boxes, const BevGridConfig& cfg, int class_count) {
  cfg.validate();
  require(class_count >= 1, "voxelize_boxes: class_count must be >= 1");
  auto grid = torch::zeros({class_count, cfg.nz, cfg.ny, cfg.nx}, torch::kUInt8);
  auto acc = grid.accessor<uint8_t, 4>();
  const double cx = cfg.cell_x(), cy = cfg.cell_y(), cz = cfg.cell_z();
  auto cell_lo = [](double v, double low, double cell, int n) {
    return std::clamp(static_cast<int>(std::floor((v - low) / cell - 0.5)), 0, n - 1);
  };
  auto cell_hi = [](double v, double low, double cell, int n) {
    return std::clamp(static_cast<int>(std::ceil((v - low) / cell - 0.5)), 0, n - 1);
  };
  for (const auto& box : boxes) {
    require(box.class_id >= 0 && box.class_id < class_count, "voxelize_boxes: class id out of range");
    // Candidate cells come from the box's axis-aligned bounds; containment decides.
    Eigen::Vector3d lo = Eigen::Vector3d::Constant(1e300), hi = Eigen::Vector3d::Constant(-1e300);
    for (const auto& c : box.corners()) {
      lo = lo.cwiseMin(c);
      hi = hi.cwiseMax(c);
    }
    const int x0 = cell_lo(lo.x(), cfg.x.low, cx, cfg.nx), x1 = cell_hi(hi.x(), cfg.x.low, cx, cfg.nx);
    const int y0 = cell_lo(lo.y(), cfg.y.low, cy, cfg.ny), y1 = cell_hi(hi.y(), cfg.y.low, cy, cfg.ny);
    const int z0 = cell_lo(lo.z(), cfg.z.low, cz, cfg.nz), z1 = cell_hi(hi.z(), cfg.z.low, cz, cfg.nz);
    for (int iz = z0; iz <= z1; ++iz) {
      const double z = cfg.z.low + (iz + 0.5) * cz;
      for (int iy = y0; iy <= y1; ++iy) {
        const double y = cfg.y.low + (iy + 0.5) * cy;
        for (int ix = x0; ix <= x1; ++ix) {
          if (point_in_box({cfg.x.low + (ix + 0.5) * cx, y, z}, box)) acc[box.class_id][iz][iy][ix] = 1;
        }
      }
    }
  }
  return {grid, cfg, class_count};
}

namespace {

void apply_edit(std::vector<Box3D>& boxes, const LayoutEdit& e) {
  require(e.index >= 0 && e.index < static_cast<int>(boxes.size()),
          "edit_layout: box index " + std::to_string(e.index) + " out of range");
  auto& box = boxes[e.index];
  switch (e.kind) {
    case LayoutEdit::Kind::Remove:
      boxes.erase(boxes.begin() + e.index);
      break;
    case LayoutEdit::Kind::Rotate:
      if (e.yaw_degrees != 0.0) {
        box.orientation = Eigen::Quaterniond(yaw_rotation(e.yaw_degrees)) * box.orientation;
        box.orientation.normalize();
      }
      break;
    case LayoutEdit::Kind::Translate:
      box.center += e.delta;
      break;
  }
}

}  // namespace

std::vector<Box3D> edit_layout(std::vector<Box3D> boxes, const std::vector<LayoutEdit>& edits) {
  for (const auto& e : edits) apply_edit(boxes, e);
  return boxes;
}

SceneSpec edit_scene(SceneSpec scene, const std::vector<LayoutEdit>& edits) {
  for (const auto& e : edits) {
    if (e.kind == LayoutEdit::Kind::Remove) {
      require(e.index >= 0 && e.index < static_cast<int>(scene.box_colors.size()),
              "edit_layout: box index " + std::to_string(e.index) + " out of range");
      scene.box_colors.erase(scene.box_colors.begin() + e.index);
    }
    apply_edit(scene.boxes, e);
  }
  return scene;
}

std::vector<LayoutEdit> parse_edits(const Json& j) {
  require(j.is_array(), "edits: expected a JSON array");
  std::vector<LayoutEdit> out;
  for (const auto& item : j) {
    const auto op = item.at("op").get<std::string>();
    const int index = item.at("index").get<int>();
    if (op == "remove") {
      out.push_back(LayoutEdit::remove(index));
    } else if (op == "rotate") {
      out.push_back(LayoutEdit::rotate(index, item.at("yaw_deg").get<double>()));
    } else if (op == "translate") {
      const auto d = item.at("delta").get<std::array<double, 3>>();
      out.push_back(LayoutEdit::translate(index, {d[0], d[1], d[2]}));
    } else {
      throw Error("edits: unknown op '" + op + "'");
    }
  }
  return out;
}

OccupancyEmbeddingImpl::OccupancyEmbeddingImpl(OccupancyEmbeddingOptions options) : options_(options) {
  require(options_.patch >= 1 && options_.class_count >= 1 && options_.nz >= 1 && options_.channels_per_height >= 1,
          "occupancy embedding: invalid options");
  const int in = options_.class_count * options_.patch * options_.patch;
  proj = register_module("proj", torch::nn::Linear(in, options_.channels_per_height));
  torch::NoGradGuard ng;
  proj->bias.zero_();
}

torch::Tensor OccupancyEmbeddingImpl::forward(const torch::Tensor& grid) {
  require(grid.dim() == 5, "occupancy embedding: expected [B, C, nz, ny, nx]");
  const auto b = grid.size(0);
  const auto c = grid.size(1), nz = grid.size(2), ny = grid.size(3), nx = grid.size(4);
  const int p = options_.patch;
  require(c == options_.class_count && nz == options_.nz, "occupancy embedding: class/height count mismatch");
  require(ny % p == 0 && nx % p == 0, "occupancy embedding: BEV size not divisible by patch");
  const auto sy = ny / p, sx = nx / p;
  auto x = grid.to(proj->weight.scalar_type())
               .view({b, c, nz, sy, p, sx, p})
               .permute({0, 3, 5, 2, 1, 4, 6})
               .reshape({b, sy * sx, nz, c * p * p});
  return proj->forward(x).reshape({b, sy * sx, nz * options_.channels_per_height});
}

ConditionFeature embed_occupancy(const OccupancyGrid& grid, OccupancyEmbedding& embedding, double scale) {
  const int p = embedding->options().patch;
  require(grid.bev.nx % p == 0 && grid.bev.ny % p == 0, "embed_occupancy: BEV size not divisible by patch");
  const auto tokens = embedding->forward(grid.grid.unsqueeze(0)).squeeze(0);  // [S*S, Ch]
  const int64_t sy = grid.bev.ny / p, sx = grid.bev.nx / p;
  return {tokens.transpose(0, 1).reshape({tokens.size(1), sy, sx}) * scale, scale};
}

}  // namespace bevlat
