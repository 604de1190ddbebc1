#include "gradreg/optimizer.hpp"

#include <cmath>

namespace gradreg {

template <typename S>
void Adam<S>::ensure_state(const Parameters<S>& params) {
  if (!m_.empty()) {
    if (static_cast<int>(m_.size()) != params.count())
      throw std::invalid_argument("adam: parameter count changed mid-run");
    return;
  }
  for (int i = 0; i < params.count(); ++i) {
    m_.push_back(ArrayX<S>::Zero(params.tensor(i).size()));
    v_.push_back(ArrayX<S>::Zero(params.tensor(i).size()));
  }
}

template <typename S>
void Adam<S>::step(Parameters<S>& params, Tape<S>& tape) {
  ensure_state(params);
  // validate first so a bad gradient leaves every parameter untouched
  std::vector<ArrayX<S>> grads(params.count());
  for (int i = 0; i < params.count(); ++i) {
    grads[i] = tape.grad(params.tensor(i));
    if (!grads[i].isFinite().all())
      throw std::runtime_error("adam: non-finite gradient for parameter " + params.name(i));
  }
  ++step_;
  S bc1 = S(1) - std::pow(cfg_.beta1, static_cast<S>(step_));
  S bc2 = S(1) - std::pow(cfg_.beta2, static_cast<S>(step_));
  for (int i = 0; i < params.count(); ++i) {
    ArrayX<S>& m = m_[i];
    ArrayX<S>& v = v_[i];
    m = cfg_.beta1 * m + (S(1) - cfg_.beta1) * grads[i];
    v = cfg_.beta2 * v + (S(1) - cfg_.beta2) * grads[i].square();
    params.tensor(i).array() -= cfg_.lr * (m / bc1) / ((v / bc2).sqrt() + cfg_.eps);
  }
}

template class Adam<float>;
template class Adam<double>;

}  // namespace gradreg
