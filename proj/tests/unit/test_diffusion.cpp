#include "bevlat/diffusion.hpp"
#include "bevlat/encoder.hpp"
#include "bevlat/error.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace bevlat;

namespace {

DenoiserConfig tiny_dit() {
  DenoiserConfig c;
  c.grid = 2;
  c.latent_dim = 2;
  c.width = 8;
  c.depth = 1;
  c.heads = 2;
  c.time_dim = 8;
  c.condition = OccupancyEmbeddingOptions{1, 2, 2, 4};
  return c;
}

void randomize(torch::nn::Module& m, double sd) {
  torch::NoGradGuard ng;
  for (auto& p : m.parameters()) p.normal_(0.0, sd);
}

torch::Tensor random_grids(int64_t b) { return (torch::rand({b, 1, 2, 4, 4}) > 0.5).to(torch::kFloat32); }

}  // namespace

TEST(Diffusion, ScheduleMatchesOracle) {
  for (int T : {1, 10, 100, 1000}) {
    auto s = make_schedule(T);
    ASSERT_EQ(static_cast<int>(s.beta.size()), T);
    const double b0 = 1e-4 * 1000.0 / T, b1 = std::min(0.02 * 1000.0 / T, 0.999);
    double prod = 1.0;
    for (int t = 1; t <= T; ++t) {
      const double beta = T == 1 ? b0 : b0 + (b1 - b0) * (t - 1) / (T - 1);
      prod *= 1.0 - beta;
      EXPECT_NEAR(s.beta[t - 1], beta, 1e-12);
      EXPECT_NEAR(s.alpha[t - 1], 1.0 - beta, 1e-12);
      EXPECT_NEAR(s.alpha_bar_at(t), prod, 1e-12);
      const double prev = t == 1 ? 1.0 : s.alpha_bar_at(t - 1);
      EXPECT_NEAR(s.sigma[t - 1] * s.sigma[t - 1], (1.0 - prev) / (1.0 - prod) * beta, 1e-12);
    }
  }
}

TEST(Diffusion, AlphaBarStrictlyDecreasing) {
  auto s = make_schedule(100);
  EXPECT_EQ(s.alpha_bar_at(0), 1.0);
  for (int t = 1; t <= 100; ++t) EXPECT_LT(s.alpha_bar_at(t), s.alpha_bar_at(t - 1));
  EXPECT_GT(s.alpha_bar_at(100), 0.0);
  EXPECT_THROW(s.alpha_bar_at(101), Error);
  EXPECT_THROW(s.alpha_bar_at(-1), Error);
  EXPECT_THROW(make_schedule(0), Error);
}

TEST(Diffusion, QSampleMoments) {
  auto s = make_schedule(100);
  auto x0 = torch::tensor({1.5, -0.5}, torch::kFloat64).repeat({200000, 1});
  auto gen = make_generator(3);
  for (int t : {1, 30, 70, 100}) {
    auto eps = torch::randn(x0.sizes(), gen, torch::kFloat64);
    auto xt = q_sample(x0, t, eps, s);
    const double ab = s.alpha_bar_at(t);
    auto m = xt.mean(0), v = xt.var(0);
    for (int k = 0; k < 2; ++k) {
      const double want_m = std::sqrt(ab) * x0[0][k].item<double>();
      // Relative 2% on the variance; the mean is compared on the scale of the spread.
      EXPECT_NEAR(m[k].item<double>(), want_m, 0.02 * std::max(std::abs(want_m), std::sqrt(1 - ab)));
      EXPECT_NEAR(v[k].item<double>() / (1 - ab), 1.0, 0.02);
    }
  }
}

TEST(Diffusion, QSamplePerItemSteps) {
  auto s = make_schedule(50);
  auto x0 = torch::randn({3, 2, 2, 4}), eps = torch::randn({3, 2, 2, 4});
  auto t = torch::tensor({1, 25, 50}, torch::kInt64);
  auto batched = q_sample(x0, t, eps, s);
  for (int i = 0; i < 3; ++i)
    EXPECT_TRUE(torch::allclose(batched[i], q_sample(x0[i], t[i].item<int>(), eps[i], s), 1e-6, 1e-7));
  EXPECT_THROW(q_sample(x0, torch::tensor({0, 1, 2}, torch::kInt64), eps, s), Error);
  EXPECT_THROW(q_sample(x0, torch::tensor({1, 2, 51}, torch::kInt64), eps, s), Error);
  EXPECT_THROW(q_sample(x0, 0, eps, s), Error);
}

TEST(Diffusion, CfgIdentities) {
  auto u = torch::randn({2, 3}), c = torch::randn({2, 3});
  EXPECT_TRUE(torch::equal(cfg_eps(u, c, 0.0), u));
  EXPECT_TRUE(torch::equal(cfg_eps(u, c, 1.0), c));
  EXPECT_TRUE(torch::allclose(cfg_eps(u, c, 3.0), 3.0 * c - 2.0 * u, 1e-5, 1e-6));

  torch::manual_seed(8);
  DiT dit(tiny_dit());
  randomize(*dit, 0.2);
  auto x = torch::randn({2, 2, 2, 2});
  auto t = torch::tensor({5, 9}, torch::kInt64);
  auto cond = dit->embed_condition(random_grids(2));
  torch::NoGradGuard ng;
  EXPECT_TRUE(torch::equal(guided_eps(dit, x, t, cond, 0.0), dit->forward(x, t)));
  EXPECT_TRUE(torch::equal(guided_eps(dit, x, t, cond, 1.0), dit->forward(x, t, cond)));
  EXPECT_TRUE(torch::equal(guided_eps(dit, x, t, cond, 2.5), cfg_eps(dit->forward(x, t), dit->forward(x, t, cond), 2.5)));
  EXPECT_TRUE(torch::equal(guided_eps(dit, x, t, {}, 4.0), dit->forward(x, t)));
}

TEST(Diffusion, NullConditionEqualsFullDrop) {
  torch::manual_seed(9);
  DiT dit(tiny_dit());
  randomize(*dit, 0.2);
  torch::NoGradGuard ng;
  auto x = torch::randn({2, 2, 2, 2});
  auto t = torch::tensor({3, 4}, torch::kInt64);
  auto cond = dit->embed_condition(random_grids(2));
  auto dropped = dit->forward(x, t, cond, torch::tensor({true, false}));
  EXPECT_TRUE(torch::equal(dropped[0], dit->forward(x, t)[0]));
  EXPECT_TRUE(torch::equal(dropped[1], dit->forward(x, t, cond)[1]));
}

TEST(Diffusion, DdpmStepFormula) {
  auto s = make_schedule(100);
  auto x = torch::randn({4, 3}, torch::kFloat64), e = torch::randn({4, 3}, torch::kFloat64),
       z = torch::randn({4, 3}, torch::kFloat64);
  for (int t : {2, 50, 100}) {
    const double beta = s.beta[t - 1], alpha = s.alpha[t - 1], ab = s.alpha_bar_at(t), abp = s.alpha_bar_at(t - 1);
    const double sigma = std::sqrt((1 - abp) / (1 - ab) * beta);
    auto want = (x - beta / std::sqrt(1 - ab) * e) / std::sqrt(alpha) + sigma * z;
    EXPECT_LT((ddpm_step(x, t, e, s, z) - want).abs().max().item<double>(), 1e-10);
  }
  auto last = ddpm_step(x, 1, e, s, {});
  auto want = (x - s.beta[0] / std::sqrt(1 - s.alpha_bar_at(1)) * e) / std::sqrt(s.alpha[0]);
  EXPECT_LT((last - want).abs().max().item<double>(), 1e-10);
  EXPECT_THROW(ddpm_step(x, 5, e, s, {}), Error);
}

TEST(Diffusion, DdimRecoversPointMassExactly) {
  // With the exact noise of a single data point x0, every DDIM trajectory lands on x0.
  auto s = make_schedule(100);
  auto x0 = torch::tensor({0.7, -1.3, 2.1}, torch::kFloat64);
  for (int steps : {100, 20, 7}) {
    auto x = torch::randn({3}, make_generator(steps), torch::kFloat64);
    const auto ts = sampling_timesteps(100, steps);
    for (size_t i = 0; i < ts.size(); ++i) {
      const int t = ts[i], tp = i + 1 < ts.size() ? ts[i + 1] : 0;
      const double ab = s.alpha_bar_at(t);
      auto eps = (x - std::sqrt(ab) * x0) / std::sqrt(1 - ab);
      x = ddim_step(x, t, tp, eps, s);
    }
    EXPECT_LT((x - x0).abs().max().item<double>(), 1e-6) << steps;
  }
}

TEST(Diffusion, SamplingTimesteps) {
  auto ts = sampling_timesteps(100, 7);
  ASSERT_EQ(ts.size(), 7u);
  EXPECT_EQ(ts.front(), 100);
  for (size_t i = 1; i < ts.size(); ++i) EXPECT_LT(ts[i], ts[i - 1]);
  EXPECT_GE(ts.back(), 1);
  auto all = sampling_timesteps(10, 10);
  for (int k = 0; k < 10; ++k) EXPECT_EQ(all[k], 10 - k);
  EXPECT_THROW(sampling_timesteps(10, 11), Error);
  EXPECT_THROW(sampling_timesteps(10, 0), Error);
  EXPECT_EQ(parse_sampler("ddpm"), SamplerKind::DDPM);
  EXPECT_EQ(parse_sampler("ddim"), SamplerKind::DDIM);
  EXPECT_THROW(parse_sampler("euler"), Error);
}

TEST(Diffusion, SamplingIsDeterministicAndScaleZeroIgnoresCondition) {
  torch::manual_seed(10);
  DiT dit(tiny_dit());
  randomize(*dit, 0.2);
  auto s = make_schedule(20);
  torch::Tensor c1, c2;
  {
    torch::NoGradGuard ng;
    c1 = dit->embed_condition(random_grids(1));
    c2 = dit->embed_condition(random_grids(1));
  }
  for (auto kind : {SamplerKind::DDIM, SamplerKind::DDPM}) {
    SampleOptions o{2.0, 10, kind, 42, 2};
    auto a = sample(dit, s, c1, o), b = sample(dit, s, c1, o);
    EXPECT_TRUE(torch::equal(a, b));
    EXPECT_FALSE(torch::equal(a, sample(dit, s, c2, o)));
    o.seed = 43;
    EXPECT_FALSE(torch::equal(a, sample(dit, s, c1, o)));
    o = SampleOptions{0.0, 10, kind, 42, 2};
    auto z1 = sample(dit, s, c1, o), z2 = sample(dit, s, c2, o), zn = sample(dit, s, {}, o);
    EXPECT_TRUE(torch::equal(z1, z2));
    EXPECT_TRUE(torch::equal(z1, zn));
  }
}

TEST(Diffusion, SampleDenormalizes) {
  DiT dit(tiny_dit());
  auto s = make_schedule(10);
  LatentStats st{torch::tensor({1.0, -2.0}, torch::kFloat64), torch::tensor({2.0, 0.5}, torch::kFloat64)};
  SampleOptions o{1.0, 0, SamplerKind::DDIM, 5, 1};
  auto raw = sample(dit, s, {}, o), den = sample(dit, s, {}, o, &st);
  EXPECT_TRUE(torch::allclose(den, st.denormalize(raw)));
}

TEST(Diffusion, LatentStatsFloorAndRoundTrip) {
  auto constant = torch::full({4, 2, 2, 3}, 0.25);
  auto st = LatentStats::from_latents(constant);
  EXPECT_TRUE(torch::allclose(st.std, torch::full({3}, LatentStats::kStdFloor, torch::kFloat64)));
  EXPECT_TRUE(torch::allclose(st.mean, torch::full({3}, 0.25, torch::kFloat64)));

  auto z = torch::randn({5, 2, 2, 3}, torch::kFloat64) * 3 + 1;
  auto s2 = LatentStats::from_latents(z);
  auto n = s2.normalize(z);
  EXPECT_LT(n.reshape({-1, 3}).mean(0).abs().max().item<double>(), 1e-12);
  EXPECT_LT((n.reshape({-1, 3}).square().mean(0) - 1).abs().max().item<double>(), 1e-12);
  EXPECT_LT((s2.denormalize(n) - z).abs().max().item<double>(), 1e-12);
  auto back = LatentStats::from_json(s2.to_json());
  EXPECT_TRUE(torch::equal(back.mean, s2.mean));
  EXPECT_TRUE(torch::equal(back.std, s2.std));
  EXPECT_THROW(LatentStats::from_json(Json{{"mean", {0.0}}, {"std", {0.0}}}), Error);
  EXPECT_THROW(LatentStats{}.normalize(z), Error);
}

TEST(Diffusion, StreamingStatsMatchBatch) {
  auto z = torch::randn({37, 4, 4, 5}, torch::kFloat64) * torch::tensor({1.0, 10.0, 0.1, 3.0, 100.0}, torch::kFloat64) + 7;
  LatentStatsAccumulator acc;
  for (int64_t i = 0; i < 37; i += 5) acc.add(z.slice(0, i, std::min<int64_t>(i + 5, 37)));
  EXPECT_EQ(acc.count(), 37 * 16);
  auto a = acc.finalize(), b = LatentStats::from_latents(z);
  EXPECT_LT((a.mean - b.mean).abs().max().item<double>(), 1e-9);
  EXPECT_LT((a.std - b.std).abs().max().item<double>(), 1e-9);
  EXPECT_THROW(LatentStatsAccumulator{}.finalize(), Error);
}

TEST(Diffusion, InitialLossIsAboutOne) {
  // Zero-initialized output: eps_hat = 0 and the loss is E||eps||^2 per element.
  torch::manual_seed(11);
  DiT dit(DenoiserConfig{});
  auto s = make_schedule(100);
  auto gen = make_generator(2);
  auto grids = (torch::rand({16, 3, 4, 32, 32}) > 0.9).to(torch::kFloat32);
  auto loss = train_step_dit(dit, s, torch::randn({16, 8, 8, 8}), grids, 0.1, gen).item<double>();
  EXPECT_GE(loss, 0.5);
  EXPECT_LE(loss, 2.0);
}

TEST(Diffusion, FullDropGivesNoConditionGradient) {
  torch::manual_seed(12);
  DiT dit(tiny_dit());
  randomize(*dit, 0.2);
  auto s = make_schedule(20);
  auto gen = make_generator(4);
  auto loss = train_step_dit(dit, s, torch::randn({3, 2, 2, 2}), random_grids(3), 1.0, gen);
  loss.backward();
  for (auto& p : dit->condition->parameters()) {
    ASSERT_TRUE(!p.grad().defined() || p.grad().abs().max().item<float>() == 0.0f);
  }
  EXPECT_GT(dit->null_embedding.grad().abs().max().item<float>(), 0.0f);

  dit->zero_grad();
  auto gen2 = make_generator(4);
  train_step_dit(dit, s, torch::randn({3, 2, 2, 2}), random_grids(3), 0.0, gen2).backward();
  EXPECT_GT(dit->condition->proj->weight.grad().abs().max().item<float>(), 0.0f);
}

TEST(Diffusion, PerfectDenoiserHasZeroLoss) {
  auto s = make_schedule(100);
  auto x0 = torch::randn({6, 2, 2, 3}, torch::kFloat64);
  auto gen = make_generator(21);
  DenoiseFn perfect = [&](const torch::Tensor& x_t, const torch::Tensor& t, const torch::Tensor&) {
    auto table = torch::tensor(s.alpha_bar, torch::kFloat64);
    auto ab = table.index_select(0, t - 1).view({-1, 1, 1, 1});
    return (x_t - ab.sqrt() * x0) / (1 - ab).sqrt();
  };
  EXPECT_LT(diffusion_loss(perfect, s, x0, 0.1, gen).item<double>(), 1e-20);
  DenoiseFn zero = [](const torch::Tensor& x_t, const torch::Tensor&, const torch::Tensor&) {
    return torch::zeros_like(x_t);
  };
  auto gen2 = make_generator(21);
  EXPECT_GT(diffusion_loss(zero, s, x0, 0.1, gen2).item<double>(), 0.5);
}

TEST(Diffusion, DiffusionLossDrawOrder) {
  // t, then eps, then the drop mask, all from the one generator.
  auto s = make_schedule(30);
  auto x0 = torch::randn({4, 2, 2, 2}, torch::kFloat64);
  torch::Tensor seen_t, seen_drop, seen_x;
  DenoiseFn spy = [&](const torch::Tensor& x_t, const torch::Tensor& t, const torch::Tensor& drop) {
    seen_t = t;
    seen_drop = drop;
    seen_x = x_t;
    return torch::zeros_like(x_t);
  };
  auto gen = make_generator(8);
  diffusion_loss(spy, s, x0, 0.5, gen);
  auto ref = make_generator(8);
  auto t = torch::randint(1, 31, {4}, ref, torch::TensorOptions().dtype(torch::kInt64));
  auto eps = torch::randn(x0.sizes(), ref, x0.options());
  auto drop = torch::rand({4}, ref, torch::TensorOptions().dtype(torch::kFloat64)) < 0.5;
  EXPECT_TRUE(torch::equal(seen_t, t));
  EXPECT_TRUE(torch::equal(seen_drop, drop));
  EXPECT_TRUE(torch::allclose(seen_x, q_sample(x0, t, eps, s), 0, 1e-15));
}

TEST(Diffusion, DenoiserGradientCheck) {
  torch::manual_seed(13);
  DiT dit(tiny_dit());
  dit->to(torch::kFloat64);
  randomize(*dit, 0.3);
  auto t = torch::tensor({4, 17}, torch::kInt64);
  auto proj = torch::randn({2, 2, 2, 2}, torch::kFloat64);
  auto grids = (torch::rand({2, 1, 2, 4, 4}) > 0.5).to(torch::kFloat64);
  auto res = oracle::gradcheck(
      [&](const std::vector<torch::Tensor>& in) { return (dit->forward(in[0], t, in[1]) * proj).sum(); },
      {torch::randn({2, 2, 2, 2}, torch::kFloat64), dit->embed_condition(grids).detach()}, 1e-4, 1e-3, 24);
  EXPECT_TRUE(res.ok) << res.max_rel_error;
  for (auto& p : dit->named_parameters()) {
    const auto& k = p.key();
    if (k.find("modulation.weight") == std::string::npos && k.find("out.weight") == std::string::npos &&
        k.find("proj.weight") == std::string::npos && k.find("t_fc1.weight") == std::string::npos)
      continue;
    auto r = oracle::param_gradcheck(
        [&] { return (dit->forward(torch::ones({2, 2, 2, 2}, torch::kFloat64), t, dit->embed_condition(grids)) * proj).sum(); },
        p.value());
    EXPECT_TRUE(r.ok) << k << " " << r.max_rel_error;
  }
}

TEST(Diffusion, DenoiserShapeErrors) {
  DiT dit(tiny_dit());
  auto t = torch::tensor({1}, torch::kInt64);
  EXPECT_THROW(dit->forward(torch::randn({1, 3, 3, 2}), t), Error);
  EXPECT_THROW(dit->forward(torch::randn({1, 2, 2, 2}), torch::tensor({1, 2}, torch::kInt64)), Error);
  EXPECT_THROW(dit->forward(torch::randn({1, 2, 2, 2}), t, torch::randn({1, 4, 7})), Error);
  EXPECT_THROW(dit->embed_condition(torch::zeros({1, 1, 2, 8, 8})), Error);
  auto bad = tiny_dit();
  bad.width = 12;
  EXPECT_THROW(bad.validate(), Error);
}
