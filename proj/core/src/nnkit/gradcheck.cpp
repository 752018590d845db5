#include "hemorl/nnkit/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace hemorl::nn {

namespace {

Tensor random_like(const Tensor& t, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  Tensor out(t.shape(), 0.0);
  for (double& v : out.values()) v = dist(rng);
  return out;
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * bv[i];
  return s;
}

Parameter input_param(const Tensor& x, std::string name) {
  Parameter p;
  p.name = std::move(name);
  p.value = x;
  p.grad = Tensor(x.shape(), 0.0);
  return p;
}

}  // namespace

GradCheckReport grad_check(const std::vector<Parameter*>& params, const std::function<double()>& loss,
                           const std::function<void()>& backprop, double tol, double h) {
  GradCheckReport report;
  for (const auto* p : params) {
    if (!p->value.all_finite()) {
      report.failure = "non-finite value in parameter '" + p->name + "'";
      return report;
    }
  }
  backprop();
  for (const auto* p : params) {
    if (p->trainable && !p->grad.all_finite()) {
      report.failure = "non-finite analytic gradient in parameter '" + p->name + "'";
      report.worst_param = p->name;
      return report;
    }
  }
  // Snapshot analytic gradients: loss() may re-run forward passes.
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (const auto* p : params) analytic.push_back(p->grad);

  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    if (!p.trainable) continue;
    auto w = p.value.values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double orig = w[i];
      w[i] = orig + h;
      const double up = loss();
      w[i] = orig - h;
      const double down = loss();
      w[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[k][i];
      if (!std::isfinite(numeric)) {
        report.failure = "non-finite numeric gradient in parameter '" + p.name + "'";
        report.worst_param = p.name;
        report.worst_index = i;
        return report;
      }
      const double rel = std::fabs(a - numeric) / std::max(1.0, std::fabs(numeric));
      ++report.checked;
      if (report.checked == 1 || rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = p.name;
        report.worst_index = i;
      }
    }
  }
  report.pass = report.max_rel_error < tol;
  return report;
}

GradCheckReport grad_check(Sequential& net, const Tensor& x, double tol, Mode mode, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Parameter input = input_param(x, net.name() + ".input");
  const Tensor probe_out = net.infer(x);
  const Tensor c = random_like(probe_out, rng);

  std::vector<Parameter*> params = net.parameters();
  params.push_back(&input);
  auto loss = [&] { return dot(c, net.forward(input.value, mode)); };
  auto backprop = [&] {
    net.zero_grad();
    net.forward(input.value, mode);
    input.grad = net.backward(c);
  };
  return grad_check(params, loss, backprop, tol);
}

GradCheckReport grad_check(RecurrentLayer& cell, const std::vector<Tensor>& xs, double tol,
                           const std::vector<std::size_t>& lengths, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Parameter> inputs;
  inputs.reserve(xs.size());
  for (std::size_t t = 0; t < xs.size(); ++t) inputs.push_back(input_param(xs[t], "input[" + std::to_string(t) + "]"));
  std::vector<Tensor> cs;
  for (const auto& x : xs) cs.push_back(random_like(Tensor::matrix(x.rows(), cell.hidden()), rng));

  auto current_inputs = [&] {
    std::vector<Tensor> v;
    v.reserve(inputs.size());
    for (const auto& p : inputs) v.push_back(p.value);
    return v;
  };
  std::vector<Parameter*> params = cell.parameters();
  for (auto& p : inputs) params.push_back(&p);
  auto loss = [&] {
    const auto hs = cell.forward_sequence(current_inputs(), lengths);
    double s = 0.0;
    for (std::size_t t = 0; t < hs.size(); ++t) s += dot(cs[t], hs[t]);
    return s;
  };
  auto backprop = [&] {
    for (auto* p : cell.parameters()) p->grad.fill(0.0);
    cell.forward_sequence(current_inputs(), lengths);
    const auto dxs = cell.backward_sequence(cs);
    for (std::size_t t = 0; t < inputs.size(); ++t) inputs[t].grad = dxs[t];
  };
  return grad_check(params, loss, backprop, tol);
}

}  // namespace hemorl::nn
