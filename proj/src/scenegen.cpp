#include "bevlat/scenegen.hpp"

#include "bevlat/error.hpp"
#include "bevlat/png_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>

namespace bevlat {

namespace fs = std::filesystem;

void Box3D::validate(int class_count) const {
  require(std::abs(orientation.norm() - 1.0) <= 1e-6, "box: quaternion is not unit length");
  require(size.minCoeff() > 0, "box: sizes must be positive");
  require(class_id >= 0 && class_id < class_count, "box: class id out of range");
}

std::array<Eigen::Vector3d, 8> Box3D::corners() const {
  std::array<Eigen::Vector3d, 8> out;
  const Eigen::Matrix3d r = rotation();
  for (int i = 0; i < 8; ++i) {
    const Eigen::Vector3d local((i & 1 ? 0.5 : -0.5) * size.x(), (i & 2 ? 0.5 : -0.5) * size.y(),
                                (i & 4 ? 0.5 : -0.5) * size.z());
    out[i] = r * local + center;
  }
  return out;
}

void SceneGenConfig::validate() const {
  require(min_boxes >= 0 && max_boxes >= 0, "scene gen: box counts must be non-negative");
  require(min_boxes <= max_boxes, "scene gen: min_boxes exceeds max_boxes");
  require(class_count >= 1, "scene gen: class_count must be >= 1");
  require(!class_sizes.empty(), "scene gen: no class size ranges");
  for (const auto& s : class_sizes) {
    require(s.length.low > 0 && s.width.low > 0 && s.height.low > 0, "scene gen: class sizes must be positive");
    require(s.length.extent() >= 0 && s.width.extent() >= 0 && s.height.extent() >= 0,
            "scene gen: inverted class size range");
  }
  require(min_distance >= 0 && min_distance < max_distance, "scene gen: need 0 <= min_distance < max_distance");
  bev.validate();
  const double reach = std::min({-bev.x.low, bev.x.high, -bev.y.low, bev.y.high});
  require(max_distance <= reach, "scene gen: max_distance places boxes outside the BEV range");
}

SceneSpec sample_scene(uint64_t seed, const SceneGenConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  SceneSpec scene;
  scene.seed = seed;
  const int count = std::uniform_int_distribution<int>(cfg.min_boxes, cfg.max_boxes)(rng);
  for (int i = 0; i < count; ++i) {
    Box3D box;
    box.class_id = std::uniform_int_distribution<int>(0, cfg.class_count - 1)(rng);
    const auto& sz = cfg.class_sizes[box.class_id % cfg.class_sizes.size()];
    box.size = {uniform(sz.length.low, sz.length.high), uniform(sz.width.low, sz.width.high),
                uniform(sz.height.low, sz.height.high)};
    const double dist = uniform(cfg.min_distance, cfg.max_distance);
    const double bearing = uniform(-std::numbers::pi, std::numbers::pi);
    box.center = {dist * std::cos(bearing), dist * std::sin(bearing), 0.5 * box.size.z()};
    box.orientation = Eigen::Quaterniond(Eigen::AngleAxisd(uniform(-std::numbers::pi, std::numbers::pi),
                                                           Eigen::Vector3d::UnitZ()));
    scene.boxes.push_back(box);
    scene.box_colors.push_back({uniform(0.05, 0.95), uniform(0.05, 0.95), uniform(0.05, 0.95)});
  }
  const double g = uniform(0.25, 0.5);
  scene.ground_color = {g + uniform(-0.05, 0.05), g + uniform(-0.05, 0.05), g + uniform(-0.05, 0.05)};
  return scene;
}

// --------------------------------------------------------------------------
// Rendering
// --------------------------------------------------------------------------

namespace {

struct Face {
  std::array<Eigen::Vector3d, 4> corners;  // ego frame, in loop order
  Eigen::Vector3d normal;                  // outward, ego frame
};

Face box_face(const Box3D& box, int face) {
  const int axis = face / 2;
  const double sign = face % 2 == 0 ? -1.0 : 1.0;
  const int b = (axis + 1) % 3;
  const int c = (axis + 2) % 3;
  const Eigen::Matrix3d r = box.rotation();
  const Eigen::Vector3d half = 0.5 * box.size;
  constexpr int loop[4][2] = {{-1, -1}, {1, -1}, {1, 1}, {-1, 1}};
  Face f;
  for (int k = 0; k < 4; ++k) {
    Eigen::Vector3d local;
    local[axis] = sign * half[axis];
    local[b] = loop[k][0] * half[b];
    local[c] = loop[k][1] * half[c];
    f.corners[k] = r * local + box.center;
  }
  Eigen::Vector3d n = Eigen::Vector3d::Zero();
  n[axis] = sign;
  f.normal = r * n;
  return f;
}

Rgb scale(const Rgb& c, double s) {
  return {std::clamp(c[0] * s, 0.0, 1.0), std::clamp(c[1] * s, 0.0, 1.0), std::clamp(c[2] * s, 0.0, 1.0)};
}

// Sutherland-Hodgman against the plane z = near (camera frame).
std::vector<Eigen::Vector3d> clip_near(const std::array<Eigen::Vector3d, 4>& poly, double near) {
  std::vector<Eigen::Vector3d> out;
  for (size_t i = 0; i < poly.size(); ++i) {
    const auto& a = poly[i];
    const auto& b = poly[(i + 1) % poly.size()];
    const bool ain = a.z() >= near;
    const bool bin = b.z() >= near;
    if (ain) out.push_back(a);
    if (ain != bin) {
      const double t = (near - a.z()) / (b.z() - a.z());
      out.push_back(a + t * (b - a));
    }
  }
  return out;
}

}  // namespace

Rgb shade_box_face(const SceneSpec& scene, int box, int face, const RenderStyle& style) {
  const Eigen::Vector3d n = box_face(scene.boxes.at(box), face).normal;
  const double lambert = std::max(0.0, n.dot(style.light.normalized()));
  return scale(scene.box_colors.at(box), style.ambient + (1.0 - style.ambient) * lambert);
}

RenderedView render_view(const SceneSpec& scene, const CameraIntrinsics& intr, const CameraExtrinsics& extr,
                         const RenderStyle& style) {
  intr.validate();
  extr.validate();
  const int w = intr.width;
  const int h = intr.height;
  auto image = torch::empty({h, w, 3}, torch::kFloat32);
  auto depth = torch::full({h, w}, std::numeric_limits<double>::infinity(), torch::kFloat64);
  auto surface = torch::full({h, w}, kSurfaceSky, torch::kInt32);
  auto img = image.accessor<float, 3>();
  auto dep = depth.accessor<double, 2>();
  auto srf = surface.accessor<int32_t, 2>();

  auto ray = [&](double px, double py) {
    return Eigen::Vector3d((px - intr.cx) / intr.fx, (py - intr.cy) / intr.fy, 1.0);
  };

  // Ground plane z_ego = 0, written first; boxes are z-tested against it.
  const Eigen::Vector3d ground_n = extr.rotation * Eigen::Vector3d::UnitZ();
  const double ground_d = ground_n.dot(extr.translation);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double denom = ground_n.dot(ray(x + 0.5, y + 0.5));
      const double z = std::abs(denom) > 1e-12 ? ground_d / denom : -1.0;
      if (z > style.near_plane) {
        dep[y][x] = z;
        srf[y][x] = kSurfaceGround;
      }
    }
  }

  for (size_t bi = 0; bi < scene.boxes.size(); ++bi) {
    for (int fi = 0; fi < 6; ++fi) {
      const Face face = box_face(scene.boxes[bi], fi);
      std::array<Eigen::Vector3d, 4> cam;
      for (int k = 0; k < 4; ++k) cam[k] = extr.to_camera(face.corners[k]);
      const Eigen::Vector3d n_cam = extr.rotation * face.normal;
      const double plane_d = n_cam.dot(cam[0]);
      if (plane_d >= 0) continue;  // back-facing (camera on the inner side)
      const auto poly = clip_near(cam, style.near_plane);
      if (poly.size() < 3) continue;
      std::vector<Eigen::Vector2d> pix;
      double xmin = 1e30, xmax = -1e30, ymin = 1e30, ymax = -1e30;
      for (const auto& p : poly) {
        Eigen::Vector2d q(intr.fx * p.x() / p.z() + intr.cx, intr.fy * p.y() / p.z() + intr.cy);
        pix.push_back(q);
        xmin = std::min(xmin, q.x());
        xmax = std::max(xmax, q.x());
        ymin = std::min(ymin, q.y());
        ymax = std::max(ymax, q.y());
      }
      const int x0 = std::max(0, static_cast<int>(std::floor(xmin - 0.5)));
      const int x1 = std::min(w - 1, static_cast<int>(std::ceil(xmax - 0.5)));
      const int y0 = std::max(0, static_cast<int>(std::floor(ymin - 0.5)));
      const int y1 = std::min(h - 1, static_cast<int>(std::ceil(ymax - 0.5)));
      const int sid = box_surface_id(static_cast<int>(bi), fi);
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          const Eigen::Vector2d c(x + 0.5, y + 0.5);
          bool pos = true, neg = true;
          for (size_t k = 0; k < pix.size(); ++k) {
            const Eigen::Vector2d e = pix[(k + 1) % pix.size()] - pix[k];
            const Eigen::Vector2d r = c - pix[k];
            const double cross = e.x() * r.y() - e.y() * r.x();
            pos &= cross >= 0;
            neg &= cross <= 0;
          }
          if (!pos && !neg) continue;
          const double denom = n_cam.dot(ray(c.x(), c.y()));
          if (denom >= 0) continue;
          const double z = plane_d / denom;
          if (z < dep[y][x]) {
            dep[y][x] = z;
            srf[y][x] = sid;
          }
        }
      }
    }
  }

  std::vector<Rgb> face_colors;
  for (size_t bi = 0; bi < scene.boxes.size(); ++bi)
    for (int fi = 0; fi < 6; ++fi) face_colors.push_back(shade_box_face(scene, static_cast<int>(bi), fi, style));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int s = srf[y][x];
      const Rgb& c = s == kSurfaceSky ? style.sky : s == kSurfaceGround ? scene.ground_color : face_colors[s - 1];
      for (int k = 0; k < 3; ++k) img[y][x][k] = static_cast<float>(c[k]);
    }
  }
  return {image, depth, surface};
}

MultiViewBatch render_batch(const SceneSpec& scene, const CameraRig& rig, const RenderStyle& style) {
  rig.validate();
  std::vector<torch::Tensor> images, depths;
  for (const auto& v : rig.views) {
    auto r = render_view(scene, v.intrinsics, v.extrinsics, style);
    images.push_back(r.image);
    depths.push_back(r.depth);
  }
  return {torch::stack(images), torch::stack(depths), rig, scene};
}

std::vector<MultiViewBatch> generate_scenes(int count, uint64_t base_seed, const SceneGenConfig& gen,
                                            const CameraRig& rig, const RenderStyle& style) {
  std::vector<MultiViewBatch> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) out.push_back(render_batch(sample_scene(base_seed + i, gen), rig, style));
  return out;
}

// --------------------------------------------------------------------------
// Serialization
// --------------------------------------------------------------------------

Json scene_to_json(const SceneSpec& scene) {
  Json boxes = Json::array();
  for (size_t i = 0; i < scene.boxes.size(); ++i) {
    const auto& b = scene.boxes[i];
    const auto& q = b.orientation;
    boxes.push_back({{"quaternion", {q.w(), q.x(), q.y(), q.z()}},
                     {"center", {b.center.x(), b.center.y(), b.center.z()}},
                     {"size", {b.size.x(), b.size.y(), b.size.z()}},
                     {"class_id", b.class_id},
                     {"color", scene.box_colors.at(i)}});
  }
  return {{"seed", scene.seed}, {"ground_color", scene.ground_color}, {"boxes", boxes}};
}

SceneSpec scene_from_json(const Json& j) {
  SceneSpec s;
  s.seed = j.at("seed").get<uint64_t>();
  s.ground_color = j.at("ground_color").get<Rgb>();
  for (const auto& jb : j.at("boxes")) {
    const auto q = jb.at("quaternion").get<std::array<double, 4>>();
    const auto c = jb.at("center").get<std::array<double, 3>>();
    const auto z = jb.at("size").get<std::array<double, 3>>();
    Box3D b;
    b.orientation = Eigen::Quaterniond(q[0], q[1], q[2], q[3]);
    b.center = {c[0], c[1], c[2]};
    b.size = {z[0], z[1], z[2]};
    b.class_id = jb.at("class_id").get<int>();
    s.boxes.push_back(b);
    s.box_colors.push_back(jb.at("color").get<Rgb>());
  }
  return s;
}

namespace {

std::string scene_dir_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%06d", index);
  return buf;
}

fs::path view_path(const fs::path& root, int scene, int view, const char* stem) {
  return root / scene_dir_name(scene) / (std::string(stem) + "_" + std::to_string(view) + ".png");
}

uint16_t encode_depth_mm(double d) {
  if (!std::isfinite(d)) return 0;
  const double mm = std::round(d * 1000.0);
  return static_cast<uint16_t>(std::clamp(mm, 1.0, 65535.0));
}

double decode_depth_mm(uint16_t v) {
  return v == 0 ? std::numeric_limits<double>::infinity() : v / 1000.0;
}

}  // namespace

void write_dataset(const fs::path& root, const std::vector<MultiViewBatch>& batches, bool with_depth) {
  fs::create_directories(root);
  std::ofstream index(root / "scenes.jsonl", std::ios::binary | std::ios::trunc);
  require(index.good(), "cannot write " + (root / "scenes.jsonl").string());
  for (size_t i = 0; i < batches.size(); ++i) {
    const auto& b = batches[i];
    const int si = static_cast<int>(i);
    const bool depth = with_depth && b.depths.has_value();
    fs::create_directories(root / scene_dir_name(si));
    const auto imgs = b.images.to(torch::kFloat32).contiguous();
    const int h = static_cast<int>(imgs.size(1));
    const int w = static_cast<int>(imgs.size(2));
    for (int v = 0; v < b.views(); ++v) {
      png::Image8 out{w, h, 3, {}};
      const auto q = (imgs[v].clamp(0, 1) * 255.0).round().to(torch::kUInt8).contiguous();
      out.pixels.assign(q.data_ptr<uint8_t>(), q.data_ptr<uint8_t>() + q.numel());
      png::write_rgb8(view_path(root, si, v, "view"), out);
      if (depth) {
        const auto d = b.depths->select(0, v).to(torch::kFloat64).contiguous();
        png::Image16 dm{w, h, {}};
        dm.pixels.resize(static_cast<size_t>(w) * h);
        const double* src = d.data_ptr<double>();
        for (size_t k = 0; k < dm.pixels.size(); ++k) dm.pixels[k] = encode_depth_mm(src[k]);
        png::write_gray16(view_path(root, si, v, "depth"), dm);
      }
    }
    const Json line = {{"index", si}, {"scene", scene_to_json(b.scene)}, {"rig", rig_to_json(b.rig)}, {"has_depth", depth}};
    index << line.dump() << '\n';
  }
}

Dataset::Dataset(fs::path root) : root_(std::move(root)) {
  require(fs::is_directory(root_), "dataset directory does not exist: " + root_.string());
  const fs::path index = root_ / "scenes.jsonl";
  if (!fs::exists(index)) {
    require(fs::is_empty(root_), "dataset directory has content but no scenes.jsonl: " + root_.string());
    return;
  }
  std::ifstream in(index);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const Json j = Json::parse(line);
      entries_.push_back({j.at("index").get<int>(), scene_from_json(j.at("scene")), rig_from_json(j.at("rig")),
                          j.value("has_depth", false)});
    } catch (const std::exception& e) {
      throw Error(index.string() + ":" + std::to_string(lineno) + ": malformed scene record (" + e.what() + ")");
    }
  }
}

MultiViewBatch Dataset::at(size_t i) const {
  const Entry& e = entries_.at(i);
  std::vector<torch::Tensor> images, depths;
  for (int v = 0; v < e.rig.size(); ++v) {
    const fs::path p = view_path(root_, e.index, v, "view");
    require(fs::exists(p), "dataset: missing image file " + p.string());
    const auto img = png::read_rgb8(p);
    const auto& intr = e.rig.views[v].intrinsics;
    require(img.width == intr.width && img.height == intr.height, "dataset: image size disagrees with rig: " + p.string());
    auto t = torch::from_blob(const_cast<uint8_t*>(img.pixels.data()), {img.height, img.width, 3}, torch::kUInt8)
                 .to(torch::kFloat32) / 255.0f;
    images.push_back(t);
    if (e.has_depth) {
      const fs::path dp = view_path(root_, e.index, v, "depth");
      require(fs::exists(dp), "dataset: missing depth file " + dp.string());
      const auto d = png::read_gray16(dp);
      auto dt = torch::empty({d.height, d.width}, torch::kFloat64);
      double* dst = dt.data_ptr<double>();
      for (size_t k = 0; k < d.pixels.size(); ++k) dst[k] = decode_depth_mm(d.pixels[k]);
      depths.push_back(dt);
    }
  }
  MultiViewBatch b{torch::stack(images), std::nullopt, e.rig, e.scene};
  if (e.has_depth) b.depths = torch::stack(depths);
  return b;
}

Dataset read_dataset(const fs::path& root) { return Dataset(root); }

}  // namespace bevlat
