#pragma once

#include <cstdint>
#include <vector>

#include "dcco/graph.hpp"
#include "dcco/tensor.hpp"

namespace dcco {

// The five encoding statistics of one client batch, as plain values. This is
// what travels over the wire: first moments, second moments, and the cross
// moment matrix, all batch means, plus the contributing sample count.
struct EncodingStats {
  Tensor mean_f;   // 1 x d
  Tensor mean_f2;  // 1 x d
  Tensor mean_g;   // 1 x d
  Tensor mean_g2;  // 1 x d
  Tensor cross;    // d x d, cross(i,j) = <F_i G_j>
  std::uint64_t count = 0;

  Index dim() const { return mean_f.cols(); }
  void validate() const;  // shape consistency and count >= 1
};

// The same statistics as differentiable graph nodes.
struct StatsNodes {
  Value mean_f;
  Value mean_f2;
  Value mean_g;
  Value mean_g2;
  Value cross;
  Index count = 0;

  Index dim() const;
};

// Batch-mean statistics of two encoded views, differentiable w.r.t. both.
StatsNodes local_stats(Value f, Value g);

// Evaluates local_stats through a scratch graph, so the plain values are
// bitwise the ones a client's forward pass would upload.
EncodingStats local_stats_values(const Tensor& f, const Tensor& g);

// Count-weighted average of client statistics, in list order (callers pass
// ascending client id for reproducibility). Pure value computation.
EncodingStats aggregate_stats(const std::vector<EncodingStats>& stats);

// The stop-gradient combination rule: each combined statistic's forward value
// is exactly the aggregated one, while gradients flow only through the local
// statistics. Forward-exactness is achieved by injecting the aggregated
// tensor rather than materializing local + sg(aggregated - local), which
// would pick up one rounding step.
StatsNodes combine_with_stop_gradient(const StatsNodes& local, const EncodingStats& aggregated);

// Correlation coefficients C(i,j) between F_i and G_j from moment statistics:
// (cross - mean_f^T mean_g) / sqrt(var_f + eps) sqrt(var_g + eps).
Value correlation_matrix(const StatsNodes& stats, double eps);
Tensor correlation_matrix(const EncodingStats& stats, double eps);

// Cross-correlation loss: sum_i (1 - C_ii)^2 + lambda/(d-1) sum_{i != j} C_ij^2.
Value cco_loss(Value corr, double lambda);
double cco_loss(const Tensor& corr, double lambda);

// Per-sample encoding gradients of the combined-statistics loss, evaluated in
// closed form without the autodiff graph.
struct ClientGradients {
  Tensor df;  // N x d
  Tensor dg;  // N x d
};
ClientGradients analytic_client_gradient(const Tensor& f, const Tensor& g,
                                         const EncodingStats& local,
                                         const EncodingStats& aggregated, double lambda,
                                         double eps);

// Symmetric normalized-temperature cross-entropy over cosine similarities of
// paired views; the contrastive baseline.
Value ntxent_loss(Value f, Value g, double temperature);

}  // namespace dcco
