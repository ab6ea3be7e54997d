#include "bitfold/graph.hpp"

#include <random>
#include <sstream>

namespace bitfold {

const char* error_code_name(ErrorCode code) {
  switch (code) {
  case ErrorCode::ShapeMismatch: return "ShapeMismatch";
  case ErrorCode::NonFiniteValue: return "NonFiniteValue";
  case ErrorCode::NotScalar: return "NotScalar";
  case ErrorCode::DetachedLoss: return "DetachedLoss";
  case ErrorCode::LengthMismatch: return "LengthMismatch";
  case ErrorCode::DegenerateInput: return "DegenerateInput";
  case ErrorCode::ParseError: return "ParseError";
  case ErrorCode::MissingAtom: return "MissingAtom";
  case ErrorCode::SpecInvalid: return "SpecInvalid";
  case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
  case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
  case ErrorCode::BadT: return "BadT";
  case ErrorCode::HeadMismatch: return "HeadMismatch";
  case ErrorCode::ModeInputMissing: return "ModeInputMissing";
  case ErrorCode::TimeOrder: return "TimeOrder";
  case ErrorCode::LayoutMismatch: return "LayoutMismatch";
  case ErrorCode::InvalidConfig: return "InvalidConfig";
  case ErrorCode::CacheMiss: return "CacheMiss";
  case ErrorCode::Io: return "Io";
  }
  return "Error";
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    fail(ErrorCode::ShapeMismatch, shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// ---------------------------------------------------------------- parameters

Tensor& ParameterSet::add(const std::string& name, Tensor value) {
  auto [it, inserted] = values_.emplace(name, std::move(value));
  if (!inserted) fail(ErrorCode::InvalidConfig, "duplicate parameter " + name);
  return it->second;
}

const Tensor& ParameterSet::get(const std::string& name) const {
  auto it = values_.find(name);
  if (it == values_.end()) fail(ErrorCode::InvalidConfig, "unknown parameter " + name);
  return it->second;
}

Tensor& ParameterSet::get(const std::string& name) {
  auto it = values_.find(name);
  if (it == values_.end()) fail(ErrorCode::InvalidConfig, "unknown parameter " + name);
  return it->second;
}

std::vector<std::string> ParameterSet::names() const {
  std::vector<std::string> out;
  out.reserve(values_.size());
  for (const auto& [name, _] : values_) out.push_back(name);
  return out;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : values_) n += t.size();
  return n;
}

void ParameterSet::assign_from(const ParameterSet& other) {
  for (auto& [name, t] : values_) {
    auto it = other.values_.find(name);
    if (it == other.values_.end()) continue;
    if (it->second.shape() != t.shape())
      fail(ErrorCode::ShapeMismatch, "parameter " + name + " " + shape_string(t.shape()) + " vs " +
                                         shape_string(it->second.shape()));
    t = it->second;
  }
}

void ParameterSet::merge(const ParameterSet& other) {
  for (const auto& [name, t] : other.values_) add(name, t);
}

ParameterSet ParameterSet::subset(const std::string& prefix) const {
  ParameterSet out;
  for (const auto& [name, t] : values_)
    if (name.compare(0, prefix.size(), prefix) == 0) out.add(name, t);
  return out;
}

std::uint64_t name_seed(std::uint64_t seed, const std::string& name) {
  // FNV-1a over the name, mixed with the seed through splitmix64.
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::uint64_t z = h ^ (seed + 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Tensor init_normal(const Shape& shape, double stddev, std::uint64_t seed, const std::string& name) {
  std::mt19937_64 gen(name_seed(seed, name));
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t(shape);
  for (double& v : t.values()) v = dist(gen);
  return t;
}

Tensor init_uniform(const Shape& shape, double bound, std::uint64_t seed, const std::string& name) {
  std::mt19937_64 gen(name_seed(seed, name));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(shape);
  for (double& v : t.values()) v = dist(gen);
  return t;
}

// --------------------------------------------------------------------- graph

Var Graph::constant(Tensor value) {
  if (!value.all_finite()) fail(ErrorCode::NonFiniteValue, "constant " + shape_string(value.shape()));
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Graph::param(const ParameterSet& params, const std::string& name) {
  if (auto it = param_nodes_.find(name); it != param_nodes_.end()) return Var(this, it->second);
  Node n;
  n.value = params.get(name);
  n.requires_grad = grad_enabled_;
  n.param_name = name;
  nodes_.push_back(std::move(n));
  const int id = static_cast<int>(nodes_.size()) - 1;
  param_nodes_.emplace(name, id);
  return Var(this, id);
}

Var Graph::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  return record(std::move(value), std::vector<Var>(inputs), std::move(backward));
}

Var Graph::record(Tensor value, const std::vector<Var>& inputs, BackwardFn backward) {
  if (!value.all_finite())
    fail(ErrorCode::NonFiniteValue, "op output " + shape_string(value.shape()) + " is not finite");
  Node n;
  n.value = std::move(value);
  if (grad_enabled_) {
    for (const Var& in : inputs)
      if (in.requires_grad()) n.requires_grad = true;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor& Graph::grad_buffer(int id) {
  Node& n = nodes_[id];
  if (n.grad.shape() != n.value.shape()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Graph::accumulate(int id, const Tensor& g) {
  if (!nodes_[id].requires_grad) return;
  Tensor& buf = grad_buffer(id);
  if (buf.size() != g.size())
    fail(ErrorCode::ShapeMismatch, "gradient " + shape_string(g.shape()) + " for node " +
                                       shape_string(buf.shape()));
  double* d = buf.data();
  const double* s = g.data();
  for (std::size_t i = 0; i < buf.size(); ++i) d[i] += s[i];
}

Gradients Graph::backward(Var loss, const ParameterSet& params) {
  if (loss.value().size() != 1) fail(ErrorCode::NotScalar, "loss shape " + shape_string(loss.shape()));
  if (!loss.requires_grad()) fail(ErrorCode::DetachedLoss, "loss does not depend on any parameter");
  grad_buffer(loss.id()).fill(1.0);
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
    Tensor g = std::move(n.grad);
    n.backward(*this, g);
  }
  Gradients out;
  for (const auto& [name, t] : params) {
    auto it = param_nodes_.find(name);
    if (it != param_nodes_.end() && !nodes_[it->second].grad.empty())
      out.emplace(name, std::move(nodes_[it->second].grad));
    else
      out.emplace(name, Tensor(t.shape()));
  }
  nodes_.clear();
  param_nodes_.clear();
  return out;
}

} // namespace bitfold
