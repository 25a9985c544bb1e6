#include "dcco/stats.hpp"

#include <cmath>

#include "dcco/errors.hpp"

namespace dcco {

namespace {

void require_rank2_pair(const std::vector<Index>& fs, const std::vector<Index>& gs,
                        const char* where) {
  if (fs.size() != 2 || gs.size() != 2)
    throw ShapeMismatch(std::string(where) + ": encodings must be rank 2");
  if (fs != gs)
    throw ShapeMismatch(std::string(where) + ": view shapes differ");
}

// Stable log-sum-exp over each row, returned as an N x 1 node.
Value lse_rows(Value m) {
  Value mx = max_axis(m, 1);
  const auto& s = m.graph->shape(m.id);
  Value shifted = m - broadcast_to(mx, s[0], s[1]);
  return log(sum_axis(exp(shifted), 1)) + mx;
}

}  // namespace

void EncodingStats::validate() const {
  if (count < 1) throw InvalidConfig("stats: count must be >= 1");
  const Index d = mean_f.cols();
  auto check_vec = [&](const Tensor& t, const char* name) {
    if (t.rank() != 2 || t.rows() != 1 || t.cols() != d)
      throw DimensionMismatch(std::string("stats: ") + name + " must be 1 x " +
                              std::to_string(d));
  };
  check_vec(mean_f, "mean_f");
  check_vec(mean_f2, "mean_f2");
  check_vec(mean_g, "mean_g");
  check_vec(mean_g2, "mean_g2");
  if (cross.rank() != 2 || cross.rows() != d || cross.cols() != d)
    throw DimensionMismatch("stats: cross must be " + std::to_string(d) + " x " +
                            std::to_string(d));
}

Index StatsNodes::dim() const { return mean_f.graph->shape(mean_f.id)[1]; }

StatsNodes local_stats(Value f, Value g) {
  Graph& gr = *f.graph;
  const auto& fs = gr.shape(f.id);
  const auto& gs = gr.shape(g.id);
  require_rank2_pair(fs, gs, "local_stats");
  const Index n = fs[0];

  StatsNodes s;
  s.mean_f = mean_axis(f, 0);
  s.mean_f2 = mean_axis(square(f), 0);
  s.mean_g = mean_axis(g, 0);
  s.mean_g2 = mean_axis(square(g), 0);
  s.cross = matmul(transpose(f), g) * (1.0 / static_cast<double>(n));
  s.count = n;
  return s;
}

EncodingStats local_stats_values(const Tensor& f, const Tensor& g) {
  Graph gr;
  StatsNodes s = local_stats(gr.input("f", f), gr.input("g", g));
  EncodingStats out;
  out.mean_f = gr.value(s.mean_f);
  out.mean_f2 = gr.value(s.mean_f2);
  out.mean_g = gr.value(s.mean_g);
  out.mean_g2 = gr.value(s.mean_g2);
  out.cross = gr.value(s.cross);
  out.count = static_cast<std::uint64_t>(s.count);
  return out;
}

EncodingStats aggregate_stats(const std::vector<EncodingStats>& stats) {
  if (stats.empty()) throw EmptyList("aggregate_stats: no client statistics");
  const Index d = stats.front().dim();
  std::uint64_t total = 0;
  for (const EncodingStats& s : stats) {
    s.validate();
    if (s.dim() != d)
      throw DimensionMismatch("aggregate_stats: dimension " + std::to_string(s.dim()) +
                              " vs " + std::to_string(d));
    total += s.count;
  }

  EncodingStats out;
  out.mean_f = Tensor::zeros({1, d});
  out.mean_f2 = Tensor::zeros({1, d});
  out.mean_g = Tensor::zeros({1, d});
  out.mean_g2 = Tensor::zeros({1, d});
  out.cross = Tensor::zeros({d, d});
  out.count = total;
  // Weighted sums in list order; callers present clients in ascending id so
  // the reduction is bitwise reproducible.
  for (const EncodingStats& s : stats) {
    const double w = static_cast<double>(s.count);
    out.mean_f.mat() += w * s.mean_f.mat();
    out.mean_f2.mat() += w * s.mean_f2.mat();
    out.mean_g.mat() += w * s.mean_g.mat();
    out.mean_g2.mat() += w * s.mean_g2.mat();
    out.cross.mat() += w * s.cross.mat();
  }
  const double denom = static_cast<double>(total);
  out.mean_f.mat() /= denom;
  out.mean_f2.mat() /= denom;
  out.mean_g.mat() /= denom;
  out.mean_g2.mat() /= denom;
  out.cross.mat() /= denom;
  return out;
}

StatsNodes combine_with_stop_gradient(const StatsNodes& local, const EncodingStats& aggregated) {
  aggregated.validate();
  if (local.dim() != aggregated.dim())
    throw DimensionMismatch("combine: local d " + std::to_string(local.dim()) +
                            " vs aggregated d " + std::to_string(aggregated.dim()));
  StatsNodes c;
  c.mean_f = inject(local.mean_f, aggregated.mean_f);
  c.mean_f2 = inject(local.mean_f2, aggregated.mean_f2);
  c.mean_g = inject(local.mean_g, aggregated.mean_g);
  c.mean_g2 = inject(local.mean_g2, aggregated.mean_g2);
  c.cross = inject(local.cross, aggregated.cross);
  c.count = static_cast<Index>(aggregated.count);
  return c;
}

Value correlation_matrix(const StatsNodes& stats, double eps) {
  if (eps < 0.0) throw InvalidConfig("correlation_matrix: eps must be >= 0");
  Graph& gr = *stats.mean_f.graph;
  Value var_f = stats.mean_f2 - square(stats.mean_f);
  Value var_g = stats.mean_g2 - square(stats.mean_g);
  if (eps == 0.0) {
    for (double v : gr.value(var_f.id).values())
      if (v <= 0.0) throw DegenerateVariance("correlation_matrix: var_f <= 0 with eps 0");
    for (double v : gr.value(var_g.id).values())
      if (v <= 0.0) throw DegenerateVariance("correlation_matrix: var_g <= 0 with eps 0");
  }
  Value sf = sqrt(var_f + eps);
  Value sg = sqrt(var_g + eps);
  Value cov = stats.cross - matmul(transpose(stats.mean_f), stats.mean_g);
  return cov / matmul(transpose(sf), sg);
}

Tensor correlation_matrix(const EncodingStats& stats, double eps) {
  if (eps < 0.0) throw InvalidConfig("correlation_matrix: eps must be >= 0");
  stats.validate();
  const Matrix& mf = stats.mean_f.mat();
  const Matrix& mg = stats.mean_g.mat();
  Matrix vf = stats.mean_f2.mat() - mf.cwiseProduct(mf);
  Matrix vg = stats.mean_g2.mat() - mg.cwiseProduct(mg);
  if (eps == 0.0) {
    if ((vf.array() <= 0.0).any() || (vg.array() <= 0.0).any())
      throw DegenerateVariance("correlation_matrix: variance <= 0 with eps 0");
  }
  Matrix sf = (vf.array() + eps).sqrt().matrix();
  Matrix sg = (vg.array() + eps).sqrt().matrix();
  Matrix cov = stats.cross.mat() - mf.transpose() * mg;
  return Tensor::from_matrix(cov.cwiseQuotient(sf.transpose() * sg));
}

Value cco_loss(Value corr, double lambda) {
  Graph& gr = *corr.graph;
  const auto& cs = gr.shape(corr.id);
  if (cs.size() != 2 || cs[0] != cs[1]) throw ShapeMismatch("cco_loss: C must be square");
  const Index d = cs[0];
  if (d < 2) throw DimensionTooSmall("cco_loss: d must be >= 2, got " + std::to_string(d));

  Tensor eye = Tensor::zeros({d, d});
  for (Index i = 0; i < d; ++i) eye.mat()(i, i) = 1.0;
  Tensor off = Tensor::ones({d, d});
  for (Index i = 0; i < d; ++i) off.mat()(i, i) = 0.0;
  Value identity = gr.constant(std::move(eye));
  Value off_mask = gr.constant(std::move(off));

  Value diag_term = sum_all(square(identity - corr * identity));
  Value off_term = sum_all(square(corr * off_mask));
  return diag_term + off_term * (lambda / static_cast<double>(d - 1));
}

double cco_loss(const Tensor& corr, double lambda) {
  if (corr.rank() != 2 || corr.rows() != corr.cols())
    throw ShapeMismatch("cco_loss: C must be square");
  const Index d = corr.rows();
  if (d < 2) throw DimensionTooSmall("cco_loss: d must be >= 2, got " + std::to_string(d));
  double diag = 0.0, off = 0.0;
  for (Index i = 0; i < d; ++i) {
    const double di = 1.0 - corr.mat()(i, i);
    diag += di * di;
    for (Index j = 0; j < d; ++j)
      if (j != i) off += corr.mat()(i, j) * corr.mat()(i, j);
  }
  return diag + lambda / static_cast<double>(d - 1) * off;
}

ClientGradients analytic_client_gradient(const Tensor& f, const Tensor& g,
                                         const EncodingStats& local,
                                         const EncodingStats& aggregated, double lambda,
                                         double eps) {
  require_rank2_pair(f.shape(), g.shape(), "analytic_client_gradient");
  local.validate();
  aggregated.validate();
  const Index n = f.rows(), d = f.cols();
  if (local.dim() != d || aggregated.dim() != d)
    throw ShapeMismatch("analytic_client_gradient: statistics dimension mismatch");
  if (static_cast<Index>(local.count) != n)
    throw ShapeMismatch("analytic_client_gradient: local count != batch rows");
  if (d < 2) throw DimensionTooSmall("analytic_client_gradient: d must be >= 2");

  // All statistics are evaluated at the combined (== aggregated) values; the
  // chain rule below only ever differentiates the local batch means.
  const Matrix& mf = aggregated.mean_f.mat();   // 1 x d
  const Matrix& mg = aggregated.mean_g.mat();   // 1 x d
  // var + eps, then its square root, per view
  Matrix s2 = ((aggregated.mean_f2.mat() - mf.cwiseProduct(mf)).array() + eps).matrix();
  Matrix t2 = ((aggregated.mean_g2.mat() - mg.cwiseProduct(mg)).array() + eps).matrix();
  Matrix s = s2.array().sqrt().matrix();
  Matrix t = t2.array().sqrt().matrix();

  Matrix denom = s.transpose() * t;                               // d x d
  Matrix cov = aggregated.cross.mat() - mf.transpose() * mg;      // d x d
  Matrix corr = cov.cwiseQuotient(denom);

  // dL/dC: diagonal from the invariance term, off-diagonal from redundancy.
  Matrix dldc = (2.0 * lambda / static_cast<double>(d - 1)) * corr;
  for (Index i = 0; i < d; ++i) dldc(i, i) = -2.0 * (1.0 - corr(i, i));

  Matrix w = dldc.cwiseQuotient(denom);                           // dL/dcov
  Matrix dc = dldc.cwiseProduct(corr);
  Matrix row_dc = dc.rowwise().sum().transpose();                 // 1 x d
  Matrix col_dc = dc.colwise().sum();                             // 1 x d

  // Gradients w.r.t. the five combined statistics.
  Matrix dmf = -(w * mg.transpose()).transpose() + mf.cwiseProduct(row_dc).cwiseQuotient(s2);
  Matrix dmf2 = -0.5 * row_dc.cwiseQuotient(s2);
  Matrix dmg = -(w.transpose() * mf.transpose()).transpose() +
               mg.cwiseProduct(col_dc).cwiseQuotient(t2);
  Matrix dmg2 = -0.5 * col_dc.cwiseQuotient(t2);

  // Chain through the local batch means: each sample contributes 1/N to the
  // first moments, 2 F/N to the second, and its partner's row to the cross.
  const double inv_n = 1.0 / static_cast<double>(n);
  Matrix grad_f = inv_n * (dmf.replicate(n, 1) +
                           2.0 * f.mat().cwiseProduct(dmf2.replicate(n, 1)) +
                           g.mat() * w.transpose());
  Matrix grad_g = inv_n * (dmg.replicate(n, 1) +
                           2.0 * g.mat().cwiseProduct(dmg2.replicate(n, 1)) +
                           f.mat() * w);
  return ClientGradients{Tensor::from_matrix(std::move(grad_f)),
                         Tensor::from_matrix(std::move(grad_g))};
}

Value ntxent_loss(Value f, Value g, double temperature) {
  Graph& gr = *f.graph;
  const auto& fs = gr.shape(f.id);
  const auto& gs = gr.shape(g.id);
  require_rank2_pair(fs, gs, "ntxent_loss");
  if (temperature <= 0.0) throw InvalidConfig("ntxent_loss: temperature must be positive");
  const Index n = fs[0], d = fs[1];
  if (n < 2) throw BatchTooSmall("ntxent_loss: need at least 2 samples, got " +
                                 std::to_string(n));

  auto normalize = [&](Value x) {
    Value norms = sqrt(sum_axis(square(x), 1) + 1e-12);
    return x / broadcast_to(norms, n, d);
  };
  Value sim = matmul(normalize(f), transpose(normalize(g))) * (1.0 / temperature);

  Tensor eye = Tensor::zeros({n, n});
  for (Index i = 0; i < n; ++i) eye.mat()(i, i) = 1.0;
  Value identity = gr.constant(std::move(eye));
  Value positives = sum_axis(sim * identity, 1);  // N x 1 diagonal

  Value loss_f = sum_all(lse_rows(sim) - positives) * (1.0 / static_cast<double>(n));
  Value loss_g =
      sum_all(lse_rows(transpose(sim)) - positives) * (1.0 / static_cast<double>(n));
  return (loss_f + loss_g) * 0.5;
}

}  // namespace dcco
