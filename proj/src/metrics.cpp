#include "bevlat/metrics.hpp"

#include "bevlat/error.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <limits>

namespace bevlat {

namespace F = torch::nn::functional;

double psnr(const torch::Tensor& x, const torch::Tensor& x_hat) {
  require(x.sizes() == x_hat.sizes(), "psnr: shape mismatch");
  const double mse = (x.to(torch::kFloat64) - x_hat.to(torch::kFloat64)).square().mean().item<double>();
  if (mse < 1e-10) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double ssim(const torch::Tensor& x, const torch::Tensor& x_hat) {
  require(x.sizes() == x_hat.sizes(), "ssim: shape mismatch");
  require(x.dim() == 3 || x.dim() == 4, "ssim: expected [H, W, C] or [N, H, W, C]");
  auto to_planes = [](const torch::Tensor& t) {
    auto b = t.dim() == 3 ? t.unsqueeze(0) : t;
    return b.to(torch::kFloat64).permute({0, 3, 1, 2}).reshape({-1, 1, b.size(1), b.size(2)});
  };
  auto a = to_planes(x), b = to_planes(x_hat);
  constexpr int kWin = 11;
  require(a.size(2) >= kWin && a.size(3) >= kWin, "ssim: images smaller than the 11x11 window");
  auto g = torch::arange(kWin, torch::kFloat64) - (kWin - 1) / 2.0;
  g = torch::exp(-g.square() / (2 * 1.5 * 1.5));
  g = g / g.sum();
  auto window = torch::outer(g, g).view({1, 1, kWin, kWin});
  auto filt = [&](const torch::Tensor& t) { return F::conv2d(t, window); };
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  auto mu_a = filt(a), mu_b = filt(b);
  auto var_a = filt(a * a) - mu_a.square();
  auto var_b = filt(b * b) - mu_b.square();
  auto cov = filt(a * b) - mu_a * mu_b;
  auto map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a.square() + mu_b.square() + c1) * (var_a + var_b + c2));
  return map.mean().item<double>();
}

// ---------------------------------------------------------------------------

std::vector<ViewCorrespondence> mvsc_correspondences(const torch::Tensor& depths, const CameraRig& rig,
                                                     const MvscOptions& options) {
  rig.validate();
  const int n = rig.size();
  require(depths.dim() == 3 && depths.size(0) == n, "mvsc: depths must be [V, H, W]");
  require(n >= 2, "mvsc: need at least two views");
  const auto dep = depths.to(torch::kFloat64).contiguous();
  const auto acc = dep.accessor<double, 3>();
  const int64_t h = dep.size(1), w = dep.size(2);

  std::vector<ViewCorrespondence> out;
  for (int k = 0; k < n; ++k) {
    const int a = rig.adjacency[k];
    const int b = rig.adjacency[(k + 1) % n];
    const auto& va = rig.views[a];
    const auto& vb = rig.views[b];
    require(va.intrinsics.width == w && va.intrinsics.height == h && vb.intrinsics.width == w &&
                vb.intrinsics.height == h,
            "mvsc: depth size differs from intrinsics");
    // a-camera coordinates of b's optical axis decide which half borders b.
    const Eigen::Matrix3d a_from_b = va.extrinsics.rotation * vb.extrinsics.rotation.transpose();
    const bool right_half = (a_from_b * Eigen::Vector3d::UnitZ()).x() > 0;
    const Eigen::Matrix3d b_from_a = a_from_b.transpose();

    ViewCorrespondence corr;
    corr.src = a;
    corr.dst = b;
    const int64_t x_begin = right_half ? w / 2 : 0;
    const int64_t x_end = right_half ? w : w / 2;
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t x = x_begin; x < x_end; ++x) {
        const auto& ia = va.intrinsics;
        const Eigen::Vector3d ray((x + 0.5 - ia.cx) / ia.fx, (y + 0.5 - ia.cy) / ia.fy, 1.0);
        const double d = acc[a][y][x];
        const bool sky = !std::isfinite(d);
        Eigen::Vector3d pb;
        if (sky) {
          pb = b_from_a * ray;
        } else {
          pb = vb.extrinsics.to_camera(va.extrinsics.to_ego(ray * d));
        }
        if (pb.z() <= kMinCameraDepth) continue;
        const auto& ib = vb.intrinsics;
        const double u = ib.fx * pb.x() / pb.z() + ib.cx;
        const double v = ib.fy * pb.y() / pb.z() + ib.cy;
        if (!(u >= 0 && u < w && v >= 0 && v < h)) continue;
        const auto xb = static_cast<int64_t>(u), yb = static_cast<int64_t>(v);
        const double db = acc[b][yb][xb];
        if (sky) {
          if (std::isfinite(db)) continue;
        } else if (!std::isfinite(db) || std::abs(db - pb.z()) > options.depth_tolerance * pb.z()) {
          continue;
        }
        corr.src_pixels.push_back(y * w + x);
        corr.dst_pixels.push_back(yb * w + xb);
      }
    }
    out.push_back(std::move(corr));
  }
  return out;
}

double correspondence_ncc(const torch::Tensor& images, const ViewCorrespondence& corr) {
  require(images.dim() == 4, "mvsc: images must be [V, H, W, C]");
  if (corr.src_pixels.empty()) return 0.0;
  const auto c = images.size(3);
  auto flat = images.to(torch::kFloat64).reshape({images.size(0), -1, c});
  auto si = torch::tensor(corr.src_pixels, torch::kInt64);
  auto di = torch::tensor(corr.dst_pixels, torch::kInt64);
  auto p = flat[corr.src].index_select(0, si).flatten();
  auto q = flat[corr.dst].index_select(0, di).flatten();
  p = p - p.mean();
  q = q - q.mean();
  const double denom = std::sqrt(p.square().sum().item<double>() * q.square().sum().item<double>());
  if (denom < 1e-12) return 0.0;
  return (p * q).sum().item<double>() / denom;
}

double mvsc_lite(const torch::Tensor& recon, const MultiViewBatch& gt, const MvscOptions& options) {
  require(gt.depths.has_value(), "mvsc_lite: ground truth carries no depth");
  require(recon.sizes() == gt.images.sizes(), "mvsc_lite: recon and ground truth shapes differ");
  const auto corrs = mvsc_correspondences(*gt.depths, gt.rig, options);
  double sum_recon = 0, sum_gt = 0;
  int used = 0;
  for (const auto& c : corrs) {
    if (static_cast<int>(c.src_pixels.size()) < options.min_pixels) continue;
    const double g = correspondence_ncc(gt.images, c);
    if (g <= 0) continue;
    sum_gt += g;
    sum_recon += std::max(0.0, correspondence_ncc(recon, c));
    ++used;
  }
  require(used > 0, "mvsc_lite: no view pair has enough textured overlap");
  return (sum_recon / used) / (sum_gt / used);
}

// ---------------------------------------------------------------------------

namespace {

Eigen::MatrixXd to_matrix(const torch::Tensor& t) {
  require(t.dim() == 2, "fd_lite: features must be [N, d]");
  auto c = t.to(torch::kFloat64).contiguous();
  require(torch::isfinite(c).all().item<bool>(), "fd_lite: non-finite features");
  Eigen::MatrixXd m(c.size(0), c.size(1));
  const double* p = c.data_ptr<double>();
  for (int64_t i = 0; i < c.size(0); ++i)
    for (int64_t j = 0; j < c.size(1); ++j) m(i, j) = p[i * c.size(1) + j];
  return m;
}

void moments(const Eigen::MatrixXd& x, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
  require(x.rows() >= 2, "fd_lite: need at least two samples");
  mu = x.colwise().mean();
  const Eigen::MatrixXd c = x.rowwise() - mu.transpose();
  cov = c.transpose() * c / static_cast<double>(x.rows() - 1);
  cov += 1e-6 * Eigen::MatrixXd::Identity(x.cols(), x.cols());
}

}  // namespace

double fd_lite(const torch::Tensor& features_a, const torch::Tensor& features_b) {
  const auto a = to_matrix(features_a);
  const auto b = to_matrix(features_b);
  require(a.cols() == b.cols(), "fd_lite: feature dimensions differ");
  Eigen::VectorXd mu_a, mu_b;
  Eigen::MatrixXd cov_a, cov_b;
  moments(a, mu_a, cov_a);
  moments(b, mu_b, cov_b);

  // Tr (A B)^(1/2) = Tr (A^(1/2) B A^(1/2))^(1/2); the inner product is symmetric.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(cov_a);
  const Eigen::VectorXd la = ea.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Eigen::MatrixXd sqrt_a = ea.eigenvectors() * la.asDiagonal() * ea.eigenvectors().transpose();
  Eigen::MatrixXd inner = sqrt_a * cov_b * sqrt_a;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ei(inner, Eigen::EigenvaluesOnly);
  const double tr_sqrt = ei.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

  const double value = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
  return std::max(0.0, value);
}

Json MetricReport::to_json() const {
  return {{"psnr", psnr},
          {"ssim", ssim},
          {"mvsc_lite", mvsc_lite},
          {"fd_lite", fd_lite},
          {"fd_lite_baseline", fd_lite_baseline},
          {"n_scenes", n_scenes},
          {"n_generated", n_generated},
          {"config_hash", config_hash}};
}

}  // namespace bevlat
