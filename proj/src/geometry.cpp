#include "bevlat/geometry.hpp"

#include "bevlat/error.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace bevlat {

namespace {

torch::TensorOptions f64() { return torch::TensorOptions().dtype(torch::kFloat64); }

}  // namespace

void CameraIntrinsics::validate() const {
  require(fx > 0 && fy > 0, "camera intrinsics: focal lengths must be positive");
  require(width > 0 && height > 0, "camera intrinsics: image size must be positive");
  require(cx >= 0 && cx < width && cy >= 0 && cy < height,
          "camera intrinsics: principal point outside the image");
}

void CameraExtrinsics::validate() const {
  const double ortho = (rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  require(ortho <= 1e-6, "camera extrinsics: rotation is not orthonormal");
  require(std::abs(rotation.determinant() - 1.0) <= 1e-6, "camera extrinsics: rotation determinant != 1");
  require(translation.allFinite(), "camera extrinsics: non-finite translation");
}

void CameraRig::validate() const {
  require(!views.empty(), "camera rig: needs at least one view");
  for (const auto& v : views) {
    v.intrinsics.validate();
    v.extrinsics.validate();
  }
  require(adjacency.size() == views.size(), "camera rig: adjacency must list every view once");
  std::vector<int> sorted = adjacency;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < size(); ++i) {
    require(sorted[i] == i, "camera rig: adjacency is not a permutation of view indices");
  }
}

void BevGridConfig::validate() const {
  require(nx >= 1 && ny >= 1 && nz >= 1, "bev grid: cell counts must be >= 1");
  require(x.extent() > 0 && y.extent() > 0 && z.extent() > 0, "bev grid: ranges must be nonempty");
}

double FrustumConfig::depth_at(int k) const {
  if (nd == 1) return depth_min;
  const double s = static_cast<double>(k) / (nd - 1);
  switch (spacing) {
    case DepthSpacing::Linear:
      return depth_min + s * (depth_max - depth_min);
    case DepthSpacing::Disparity:
      return 1.0 / (1.0 / depth_min + s * (1.0 / depth_max - 1.0 / depth_min));
  }
  return depth_min;
}

void FrustumConfig::validate() const {
  require(nu >= 1 && nv >= 1 && nd >= 1, "frustum: ray grid and depth count must be >= 1");
  require(depth_min > 0, "frustum: depth_min must be positive");
  // A single depth level may sit at one exact distance.
  require(nd == 1 ? depth_min <= depth_max : depth_min < depth_max,
          "frustum: depth_min must be below depth_max");
}

ReferencePoints make_pillar_grid(const BevGridConfig& cfg) {
  cfg.validate();
  auto pts = torch::empty({cfg.cells(), 3}, f64());
  auto acc = pts.accessor<double, 2>();
  int64_t idx = 0;
  for (int iz = 0; iz < cfg.nz; ++iz) {
    const double z = cfg.z.low + (iz + 0.5) * cfg.cell_z();
    for (int iy = 0; iy < cfg.ny; ++iy) {
      const double y = cfg.y.low + (iy + 0.5) * cfg.cell_y();
      for (int ix = 0; ix < cfg.nx; ++ix, ++idx) {
        acc[idx][0] = cfg.x.low + (ix + 0.5) * cfg.cell_x();
        acc[idx][1] = y;
        acc[idx][2] = z;
      }
    }
  }
  return {pts, Frame::Ego};
}

ReferencePoints make_frustum_grid(const FrustumConfig& cfg, const CameraIntrinsics& intr) {
  cfg.validate();
  intr.validate();
  auto pts = torch::empty({int64_t{cfg.nd} * cfg.rays(), 3}, f64());
  auto acc = pts.accessor<double, 2>();
  int64_t idx = 0;
  for (int id = 0; id < cfg.nd; ++id) {
    const double d = cfg.depth_at(id);
    for (int iv = 0; iv < cfg.nv; ++iv) {
      const double v = (iv + 0.5) * intr.height / cfg.nv;
      for (int iu = 0; iu < cfg.nu; ++iu, ++idx) {
        const double u = (iu + 0.5) * intr.width / cfg.nu;
        acc[idx][0] = (u - intr.cx) / intr.fx * d;
        acc[idx][1] = (v - intr.cy) / intr.fy * d;
        acc[idx][2] = d;
      }
    }
  }
  return {pts, Frame::Camera};
}

ImageProjection project_ego_to_image(const ReferencePoints& points, const CameraIntrinsics& intr,
                                     const CameraExtrinsics& extr) {
  require(points.frame == Frame::Ego, "project_ego_to_image: points must be in the ego frame");
  const auto n = points.size();
  const auto src = points.points.to(torch::kFloat64).contiguous();
  auto uv = torch::empty({n, 2}, f64());
  auto hit = torch::empty({n}, torch::TensorOptions().dtype(torch::kBool));
  auto s = src.accessor<double, 2>();
  auto o = uv.accessor<double, 2>();
  auto h = hit.accessor<bool, 1>();
  for (int64_t i = 0; i < n; ++i) {
    const Eigen::Vector3d pc = extr.to_camera({s[i][0], s[i][1], s[i][2]});
    if (pc.z() <= kMinCameraDepth) {
      // Far outside [0,1]^2 so zero-padded samplers read nothing here.
      o[i][0] = -1.0;
      o[i][1] = -1.0;
      h[i] = false;
      continue;
    }
    const double u = intr.fx * pc.x() / pc.z() + intr.cx;
    const double v = intr.fy * pc.y() / pc.z() + intr.cy;
    o[i][0] = u / intr.width;
    o[i][1] = v / intr.height;
    h[i] = u >= 0 && u < intr.width && v >= 0 && v < intr.height;
  }
  return {uv, hit};
}

EgoPoints frustum_to_ego(const ReferencePoints& points, const CameraExtrinsics& extr,
                         const BevGridConfig& bev) {
  require(points.frame == Frame::Camera, "frustum_to_ego: points must be in the camera frame");
  const auto n = points.size();
  const auto src = points.points.to(torch::kFloat64).contiguous();
  auto out = torch::empty({n, 3}, f64());
  auto in_range = torch::empty({n}, torch::TensorOptions().dtype(torch::kBool));
  auto s = src.accessor<double, 2>();
  auto o = out.accessor<double, 2>();
  auto r = in_range.accessor<bool, 1>();
  for (int64_t i = 0; i < n; ++i) {
    const Eigen::Vector3d pe = extr.to_ego({s[i][0], s[i][1], s[i][2]});
    o[i][0] = pe.x();
    o[i][1] = pe.y();
    o[i][2] = pe.z();
    r[i] = bev.contains(pe);
  }
  return {out, in_range};
}

torch::Tensor normalize_to_bev(const torch::Tensor& ego_points, const BevGridConfig& bev) {
  auto lo = torch::tensor({bev.x.low, bev.y.low, bev.z.low}, f64());
  auto ext = torch::tensor({bev.x.extent(), bev.y.extent(), bev.z.extent()}, f64());
  return (ego_points.to(torch::kFloat64) - lo) / ext;
}

Eigen::Matrix3d yaw_rotation(double yaw_degrees) {
  const double a = yaw_degrees * std::numbers::pi / 180.0;
  return Eigen::AngleAxisd(a, Eigen::Vector3d::UnitZ()).toRotationMatrix();
}

CameraRig rotate_rig(const CameraRig& rig, double yaw_degrees) {
  require(std::isfinite(yaw_degrees), "rotate_rig: yaw must be finite");
  if (yaw_degrees == 0.0) return rig;
  const Eigen::Matrix3d yaw = yaw_rotation(yaw_degrees);
  CameraRig out = rig;
  // Pose composition: camera->ego becomes yaw * (camera->ego). The camera
  // center rotates with the rig, which leaves the translation unchanged.
  for (auto& v : out.views) v.extrinsics.rotation = v.extrinsics.rotation * yaw.transpose();
  return out;
}

CameraRig make_surround_rig(const SurroundRigConfig& cfg) {
  require(cfg.views >= 1, "surround rig: needs at least one view");
  require(cfg.hfov_degrees > 0 && cfg.hfov_degrees < 180, "surround rig: hfov must be in (0, 180)");
  CameraRig rig;
  const double half = cfg.hfov_degrees * std::numbers::pi / 360.0;
  const double f = 0.5 * cfg.image_size / std::tan(half);
  const double pitch = cfg.pitch_degrees * std::numbers::pi / 180.0;
  const Eigen::Vector3d mount(0.0, 0.0, cfg.mount_height);
  for (int k = 0; k < cfg.views; ++k) {
    const double yaw = 2.0 * std::numbers::pi * k / cfg.views;
    const Eigen::Vector3d forward(std::cos(pitch) * std::cos(yaw), std::cos(pitch) * std::sin(yaw),
                                  -std::sin(pitch));
    const Eigen::Vector3d right(std::sin(yaw), -std::cos(yaw), 0.0);
    const Eigen::Vector3d down = forward.cross(right);
    CameraView view;
    view.intrinsics = {f, f, 0.5 * cfg.image_size, 0.5 * cfg.image_size, cfg.image_size, cfg.image_size};
    view.extrinsics.rotation.row(0) = right.transpose();
    view.extrinsics.rotation.row(1) = down.transpose();
    view.extrinsics.rotation.row(2) = forward.transpose();
    view.extrinsics.translation = -view.extrinsics.rotation * mount;
    rig.views.push_back(view);
    rig.adjacency.push_back(k);
  }
  return rig;
}

Json rig_to_json(const CameraRig& rig) {
  Json views = Json::array();
  for (const auto& v : rig.views) {
    const auto& in = v.intrinsics;
    const auto& ex = v.extrinsics;
    std::vector<double> rot(9);
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) rot[r * 3 + c] = ex.rotation(r, c);
    views.push_back({{"fx", in.fx},
                     {"fy", in.fy},
                     {"cx", in.cx},
                     {"cy", in.cy},
                     {"width", in.width},
                     {"height", in.height},
                     {"rotation", rot},
                     {"translation", {ex.translation.x(), ex.translation.y(), ex.translation.z()}}});
  }
  return {{"views", views}, {"adjacency", rig.adjacency}};
}

CameraRig rig_from_json(const Json& j) {
  require(j.is_object() && j.contains("views"), "rig json: missing 'views'");
  CameraRig rig;
  for (const auto& v : j.at("views")) {
    CameraView view;
    view.intrinsics = {v.at("fx").get<double>(),  v.at("fy").get<double>(),
                       v.at("cx").get<double>(),  v.at("cy").get<double>(),
                       v.at("width").get<int>(), v.at("height").get<int>()};
    const auto rot = v.at("rotation").get<std::vector<double>>();
    const auto tr = v.at("translation").get<std::vector<double>>();
    require(rot.size() == 9 && tr.size() == 3, "rig json: rotation needs 9 and translation 3 values");
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) view.extrinsics.rotation(r, c) = rot[r * 3 + c];
    view.extrinsics.translation = {tr[0], tr[1], tr[2]};
    rig.views.push_back(view);
  }
  if (j.contains("adjacency")) {
    rig.adjacency = j.at("adjacency").get<std::vector<int>>();
  } else {
    rig.adjacency.resize(rig.views.size());
    std::iota(rig.adjacency.begin(), rig.adjacency.end(), 0);
  }
  rig.validate();
  return rig;
}

}  // namespace bevlat
