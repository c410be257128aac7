// SPDX-License-Identifier: Apache-2.0
#ifndef FEDRAND_ADAMW_HPP
#define FEDRAND_ADAMW_HPP

#include <cmath>
#include <cstdint>
#include <vector>

#include "fedrand/errors.hpp"
#include "fedrand/matrix.hpp"

namespace fedrand {

struct AdamWConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-6;
};

// Decoupled-weight-decay Adam over a fixed set of matrices. Moment slots are
// lazily shaped on the first step; one step() call advances the shared step
// counter once for all registered parameters.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  std::int64_t step_count() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

  void step(const std::vector<Matrix*>& params, const std::vector<const Matrix*>& grads) {
    if (params.size() != grads.size()) {
      throw Error("AdamW: parameter/gradient count mismatch");
    }
    if (m_.empty()) {
      m_.reserve(params.size());
      v_.reserve(params.size());
      for (const Matrix* p : params) {
        m_.push_back(Matrix::zeros(p->rows(), p->cols()));
        v_.push_back(Matrix::zeros(p->rows(), p->cols()));
      }
    }
    if (params.size() != m_.size()) {
      throw Error("AdamW: parameter set changed between steps");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Matrix& p = *params[i];
      const Matrix& g = *grads[i];
      if (!p.same_shape(g) || !p.same_shape(m_[i])) {
        throw Error("AdamW: shape mismatch between parameter " + p.shape() + " and gradient " +
                    g.shape());
      }
      auto& pd = p.data();
      const auto& gd = g.data();
      auto& md = m_[i].data();
      auto& vd = v_[i].data();
      for (std::size_t j = 0; j < pd.size(); ++j) {
        md[j] = cfg_.beta1 * md[j] + (1.0 - cfg_.beta1) * gd[j];
        vd[j] = cfg_.beta2 * vd[j] + (1.0 - cfg_.beta2) * gd[j] * gd[j];
        const double m_hat = md[j] / bc1;
        const double v_hat = vd[j] / bc2;
        pd[j] -= cfg_.lr * (m_hat / (std::sqrt(v_hat) + cfg_.eps) + cfg_.weight_decay * pd[j]);
      }
    }
  }

 private:
  AdamWConfig cfg_;
  std::int64_t t_ = 0;
  std::vector<Matrix> m_, v_;
};

}  // namespace fedrand

#endif  // FEDRAND_ADAMW_HPP
