#pragma once

// Independent reference implementations used by the unit and acceptance
// tests. Deliberately naive: explicit loops, no shared code paths with the
// library beyond the plain data types.

#include "bevlat/defattn.hpp"
#include "bevlat/geometry.hpp"
#include "bevlat/scenegen.hpp"

#include <torch/torch.h>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <complex>
#include <functional>
#include <limits>
#include <random>
#include <vector>

namespace oracle {

using bevlat::Box3D;

/// Dense deformable attention: loops over every (item, query, head, level,
/// key), evaluates the linear heads by hand, samples with the naive bilinear /
/// trilinear sampler and applies the output map with explicit sums.
inline torch::Tensor deformable_attention(bevlat::DeformableAttention& attn, const torch::Tensor& query_in,
                                          const torch::Tensor& reference, const std::vector<torch::Tensor>& values) {
  torch::NoGradGuard ng;
  const auto& o = attn->options();
  const auto query = (query_in.dim() == 2 ? query_in.unsqueeze(0) : query_in).to(torch::kFloat64);
  const int64_t n = reference.size(0), lq = reference.size(1), c = o.channels, ch = c / o.heads;
  const int dims = o.spatial_dims;
  auto wo = attn->offset_head->weight.to(torch::kFloat64);
  auto bo = attn->offset_head->bias.to(torch::kFloat64);
  auto ww = attn->weight_head->weight.to(torch::kFloat64);
  auto bw = attn->weight_head->bias.to(torch::kFloat64);
  auto wout = attn->output_map->weight.to(torch::kFloat64);
  auto a_wo = wo.accessor<double, 2>();
  auto a_bo = bo.accessor<double, 1>();
  auto a_ww = ww.accessor<double, 2>();
  auto a_bw = bw.accessor<double, 1>();
  auto a_out = wout.accessor<double, 2>();
  auto a_ref = reference.to(torch::kFloat64).contiguous();
  auto r_acc = a_ref.accessor<double, 3>();

  // Channel-last copies of the value maps.
  std::vector<torch::Tensor> maps;
  for (const auto& v : values) {
    auto d = v.to(torch::kFloat64);
    maps.push_back(dims == 2 ? d.permute({0, 2, 3, 1}).contiguous() : d.permute({0, 2, 3, 4, 1}).contiguous());
  }

  auto out = torch::zeros({n, lq, c}, torch::kFloat64);
  auto out_acc = out.accessor<double, 3>();
  const int lk = o.levels * o.points;
  for (int64_t b = 0; b < n; ++b) {
    const auto qb = query.size(0) == 1 ? query[0] : query[b];
    auto q_acc = qb.contiguous();
    auto qa = q_acc.accessor<double, 2>();
    for (int64_t i = 0; i < lq; ++i) {
      std::vector<double> heads(c, 0.0);
      for (int m = 0; m < o.heads; ++m) {
        std::vector<double> logits(lk);
        for (int j = 0; j < lk; ++j) {
          const int row = m * lk + j;
          double s = a_bw[row];
          for (int64_t k = 0; k < c; ++k) s += a_ww[row][k] * qa[i][k];
          logits[j] = s;
        }
        double mx = -std::numeric_limits<double>::infinity();
        for (double v : logits) mx = std::max(mx, v);
        double z = 0;
        for (double& v : logits) z += (v = std::exp(v - mx));
        for (int l = 0; l < o.levels; ++l) {
          const auto& map = maps[l];
          const double size_w = static_cast<double>(dims == 2 ? map.size(2) : map.size(3));
          const double size_h = static_cast<double>(dims == 2 ? map.size(1) : map.size(2));
          const double size_d = dims == 3 ? static_cast<double>(map.size(1)) : 1.0;
          for (int k = 0; k < o.points; ++k) {
            const int base = ((m * o.levels + l) * o.points + k) * dims;
            double off[3] = {0, 0, 0};
            for (int d = 0; d < dims; ++d) {
              double s = a_bo[base + d];
              for (int64_t e = 0; e < c; ++e) s += a_wo[base + d][e] * qa[i][e];
              off[d] = s;
            }
            const double u = r_acc[b][i][0] + off[0] / size_w;
            const double v = r_acc[b][i][1] + off[1] / size_h;
            torch::Tensor sample;
            if (dims == 2) {
              sample = bevlat::bilinear_sample(map[b].slice(2, m * ch, (m + 1) * ch), u, v);
            } else {
              const double w = r_acc[b][i][2] + off[2] / size_d;
              sample = bevlat::trilinear_sample(map[b].slice(3, m * ch, (m + 1) * ch), u, v, w);
            }
            const double a = logits[l * o.points + k] / z;
            auto sa = sample.accessor<double, 1>();
            for (int64_t e = 0; e < ch; ++e) heads[m * ch + e] += a * sa[e];
          }
        }
      }
      for (int64_t r = 0; r < c; ++r) {
        double s = 0;
        for (int64_t k = 0; k < c; ++k) s += a_out[r][k] * heads[k];
        out_acc[b][i][r] = s;
      }
    }
  }
  return out;
}

/// Rotation matrix of a quaternion, written out by hand after normalization.
inline Eigen::Matrix3d quat_matrix(const Eigen::Quaterniond& q_in) {
  const double n = std::sqrt(q_in.w() * q_in.w() + q_in.x() * q_in.x() + q_in.y() * q_in.y() + q_in.z() * q_in.z());
  const double w = q_in.w() / n, x = q_in.x() / n, y = q_in.y() / n, z = q_in.z() / n;
  Eigen::Matrix3d r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
       2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
       2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

/// Occupancy by testing every voxel center against every box.
inline torch::Tensor voxelize(const std::vector<Box3D>& boxes, const bevlat::BevGridConfig& g, int classes) {
  auto grid = torch::zeros({classes, g.nz, g.ny, g.nx}, torch::kUInt8);
  auto acc = grid.accessor<uint8_t, 4>();
  for (int iz = 0; iz < g.nz; ++iz)
    for (int iy = 0; iy < g.ny; ++iy)
      for (int ix = 0; ix < g.nx; ++ix) {
        const Eigen::Vector3d p(g.x.low + (ix + 0.5) * (g.x.high - g.x.low) / g.nx,
                                g.y.low + (iy + 0.5) * (g.y.high - g.y.low) / g.ny,
                                g.z.low + (iz + 0.5) * (g.z.high - g.z.low) / g.nz);
        for (const auto& b : boxes) {
          const Eigen::Vector3d local = quat_matrix(b.orientation).transpose() * (p - b.center);
          bool inside = true;
          for (int k = 0; k < 3; ++k) inside = inside && local[k] >= -0.5 * b.size[k] && local[k] < 0.5 * b.size[k];
          if (inside) acc[b.class_id][iz][iy][ix] = 1;
        }
      }
  return grid;
}

struct RayCast {
  torch::Tensor depth;    ///< [H, W] camera z, +inf where nothing is hit
  torch::Tensor surface;  ///< [H, W] int32, same ids as the renderer
};

/// Per-pixel ray casting: ground plane plus slab tests against every box.
inline RayCast raycast(const bevlat::SceneSpec& scene, const bevlat::CameraIntrinsics& in,
                       const bevlat::CameraExtrinsics& ex, double near_plane = 1e-3) {
  RayCast r{torch::full({in.height, in.width}, std::numeric_limits<double>::infinity(), torch::kFloat64),
            torch::full({in.height, in.width}, bevlat::kSurfaceSky, torch::kInt32)};
  auto dep = r.depth.accessor<double, 2>();
  auto srf = r.surface.accessor<int32_t, 2>();
  const Eigen::Matrix3d rt = ex.rotation.transpose();
  const Eigen::Vector3d origin = -rt * ex.translation;
  for (int y = 0; y < in.height; ++y) {
    for (int x = 0; x < in.width; ++x) {
      // Direction with unit camera z, so the ray parameter equals camera depth.
      const Eigen::Vector3d d = rt * Eigen::Vector3d((x + 0.5 - in.cx) / in.fx, (y + 0.5 - in.cy) / in.fy, 1.0);
      double best = std::numeric_limits<double>::infinity();
      int id = bevlat::kSurfaceSky;
      if (std::abs(d.z()) > 1e-12) {
        const double t = -origin.z() / d.z();
        if (t > near_plane) {
          best = t;
          id = bevlat::kSurfaceGround;
        }
      }
      for (size_t bi = 0; bi < scene.boxes.size(); ++bi) {
        const auto& b = scene.boxes[bi];
        const Eigen::Matrix3d rb = quat_matrix(b.orientation);
        const Eigen::Vector3d o = rb.transpose() * (origin - b.center);
        const Eigen::Vector3d dl = rb.transpose() * d;
        double t_in = -std::numeric_limits<double>::infinity(), t_out = std::numeric_limits<double>::infinity();
        int face = -1;
        bool miss = false;
        for (int k = 0; k < 3; ++k) {
          const double h = 0.5 * b.size[k];
          if (std::abs(dl[k]) < 1e-15) {
            if (o[k] < -h || o[k] > h) miss = true;
            continue;
          }
          double t0 = (-h - o[k]) / dl[k], t1 = (h - o[k]) / dl[k];
          int f0 = 2 * k, f1 = 2 * k + 1;
          if (t0 > t1) {
            std::swap(t0, t1);
            std::swap(f0, f1);
          }
          if (t0 > t_in) {
            t_in = t0;
            face = f0;
          }
          t_out = std::min(t_out, t1);
        }
        if (miss || face < 0 || t_in > t_out || t_in <= near_plane) continue;
        if (t_in < best) {
          best = t_in;
          id = bevlat::box_surface_id(static_cast<int>(bi), face);
        }
      }
      dep[y][x] = best;
      srf[y][x] = id;
    }
  }
  return r;
}

/// Tr sqrt(A B) through the general (non-symmetric) eigen solver.
inline double trace_sqrt_product(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::EigenSolver<Eigen::MatrixXd> es(a * b);
  double tr = 0;
  for (int i = 0; i < es.eigenvalues().size(); ++i) tr += std::sqrt(es.eigenvalues()[i]).real();
  return tr;
}

inline double frechet(const torch::Tensor& fa, const torch::Tensor& fb) {
  auto to_eigen = [](const torch::Tensor& t) {
    auto c = t.to(torch::kFloat64).contiguous();
    Eigen::MatrixXd m(c.size(0), c.size(1));
    for (int64_t i = 0; i < c.size(0); ++i)
      for (int64_t j = 0; j < c.size(1); ++j) m(i, j) = c[i][j].item<double>();
    return m;
  };
  const auto a = to_eigen(fa), b = to_eigen(fb);
  auto stats = [](const Eigen::MatrixXd& x, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
    mu = Eigen::VectorXd::Zero(x.cols());
    for (int i = 0; i < x.rows(); ++i) mu += x.row(i).transpose();
    mu /= static_cast<double>(x.rows());
    cov = Eigen::MatrixXd::Zero(x.cols(), x.cols());
    for (int i = 0; i < x.rows(); ++i) {
      const Eigen::VectorXd d = x.row(i).transpose() - mu;
      cov += d * d.transpose();
    }
    cov /= static_cast<double>(x.rows() - 1);
    cov += 1e-6 * Eigen::MatrixXd::Identity(x.cols(), x.cols());
  };
  Eigen::VectorXd ma, mb;
  Eigen::MatrixXd ca, cb;
  stats(a, ma, ca);
  stats(b, mb, cb);
  return (ma - mb).squaredNorm() + ca.trace() + cb.trace() - 2.0 * trace_sqrt_product(ca, cb);
}

struct GradCheck {
  double max_rel_error = 0;
  double max_abs_grad = 0;
  int checked = 0;
  bool ok = true;
};

/// Central differences (step eps) against autograd for a scalar function of
/// float64 inputs; at most `per_input` randomly chosen coordinates per input.
/// An entry passes when |a - n| <= rtol * max(|a|, |n|) + atol; a check where
/// every sampled analytic entry is zero fails.
inline GradCheck gradcheck(const std::function<torch::Tensor(const std::vector<torch::Tensor>&)>& fn,
                           std::vector<torch::Tensor> inputs, double eps = 1e-4, double rtol = 1e-3,
                           int per_input = 24, uint64_t seed = 7, double atol = 1e-7) {
  for (auto& x : inputs) x = x.detach().to(torch::kFloat64).clone().set_requires_grad(true);
  auto y = fn(inputs);
  auto grads = torch::autograd::grad({y}, inputs, {}, false, false, true);
  std::mt19937_64 rng(seed);
  GradCheck res;
  for (size_t i = 0; i < inputs.size(); ++i) {
    auto flat = inputs[i].detach().view({-1});  // shares storage with the input
    const int64_t n = flat.numel();
    std::vector<int64_t> idx(n);
    for (int64_t k = 0; k < n; ++k) idx[k] = k;
    std::shuffle(idx.begin(), idx.end(), rng);
    if (static_cast<int64_t>(idx.size()) > per_input) idx.resize(per_input);
    auto g = grads[i].defined() ? grads[i].reshape({-1}) : torch::zeros({n}, torch::kFloat64);
    for (int64_t k : idx) {
      const double orig = flat[k].item<double>();
      flat[k] = orig + eps;
      const double up = fn(inputs).item<double>();
      flat[k] = orig - eps;
      const double down = fn(inputs).item<double>();
      flat[k] = orig;
      const double num = (up - down) / (2 * eps);
      const double ana = g[k].item<double>();
      const double err = std::abs(num - ana);
      const double scale = std::max(std::abs(num), std::abs(ana));
      if (err > rtol * scale + atol) res.ok = false;
      res.max_abs_grad = std::max(res.max_abs_grad, std::abs(ana));
      if (scale > 0) res.max_rel_error = std::max(res.max_rel_error, err / (scale + atol));
      ++res.checked;
    }
  }
  // All-zero gradients would pass trivially; treat them as a failed check.
  if (res.max_abs_grad == 0) res.ok = false;
  return res;
}

/// Gradcheck of a module parameter: `param` is overwritten in place for each
/// evaluation of `loss` and restored afterwards.
inline GradCheck param_gradcheck(const std::function<torch::Tensor()>& loss, torch::Tensor param, double eps = 1e-4,
                                 double rtol = 1e-3, int count = 8, uint64_t seed = 7) {
  const auto original = param.detach().clone();
  auto res = gradcheck(
      [&](const std::vector<torch::Tensor>& in) {
        param.detach().copy_(in[0].detach());
        auto y = loss();
        auto g = torch::autograd::grad({y}, {param}, {}, true, false, true)[0];
        if (!g.defined()) g = torch::zeros_like(param);
        // Zero-valued term whose derivative in in[0] is d loss / d param.
        return y.detach() + ((in[0] - in[0].detach()) * g).sum();
      },
      {original}, eps, rtol, count, seed);
  param.detach().copy_(original);
  return res;
}

/// Random unit quaternion and box inside a BEV grid.
inline Box3D random_box(std::mt19937_64& rng, const bevlat::BevGridConfig& g, int classes) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> n(0.0, 1.0);
  Box3D b;
  b.orientation = Eigen::Quaterniond(n(rng), n(rng), n(rng), n(rng)).normalized();
  b.center = {g.x.low + u(rng) * (g.x.high - g.x.low), g.y.low + u(rng) * (g.y.high - g.y.low),
              g.z.low + u(rng) * (g.z.high - g.z.low)};
  b.size = {0.5 + 5.0 * u(rng), 0.5 + 3.0 * u(rng), 0.5 + 3.0 * u(rng)};
  b.class_id = static_cast<int>(u(rng) * classes) % classes;
  return b;
}

}  // namespace oracle
