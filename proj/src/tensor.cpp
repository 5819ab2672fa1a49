#include "hvgg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace hvgg {

std::string shape_to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace {

void validate_shape(const Shape& shape) {
  if (shape.empty()) throw std::invalid_argument("tensor shape must have rank >= 1");
  for (auto extent : shape) {
    if (extent == 0) {
      throw std::invalid_argument("tensor shape " + shape_to_string(shape) +
                                  " has a zero extent");
    }
  }
}

}  // namespace

Tensor::Tensor(Shape shape, Real fill, bool requires_grad) {
  validate_shape(shape);
  storage_ = std::make_shared<Storage>();
  storage_->data.assign(shape_numel(shape), fill);
  storage_->shape = std::move(shape);
  storage_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<Real> values, bool requires_grad) {
  validate_shape(shape);
  if (values.size() != shape_numel(shape)) {
    throw std::invalid_argument("tensor shape " + shape_to_string(shape) + " needs " +
                                std::to_string(shape_numel(shape)) + " values, got " +
                                std::to_string(values.size()));
  }
  storage_ = std::make_shared<Storage>();
  storage_->shape = std::move(shape);
  storage_->data = std::move(values);
  storage_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(Real value, bool requires_grad) {
  return Tensor(Shape{1}, std::vector<Real>{value}, requires_grad);
}

Tensor Tensor::zeros_like(const Tensor& other) { return Tensor(other.shape()); }

const Shape& Tensor::shape() const {
  if (!storage_) throw std::logic_error("access to an undefined tensor");
  return storage_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw std::out_of_range("axis " + std::to_string(axis) + " out of range for shape " +
                            shape_to_string(s));
  }
  return s[axis];
}

std::size_t Tensor::size() const { return shape_numel(shape()); }

std::span<Real> Tensor::data() {
  shape();
  return storage_->data;
}

std::span<const Real> Tensor::data() const {
  shape();
  return storage_->data;
}

Real Tensor::item() const {
  if (size() != 1) {
    throw std::invalid_argument("item() on non-scalar tensor of shape " +
                                shape_to_string(shape()));
  }
  return storage_->data[0];
}

bool Tensor::requires_grad() const { return storage_ && storage_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  shape();
  storage_->requires_grad = flag;
}

bool Tensor::has_grad() const { return storage_ && !storage_->grad.empty(); }

std::span<Real> Tensor::grad() {
  shape();
  if (storage_->grad.empty()) storage_->grad.assign(storage_->data.size(), Real(0));
  return storage_->grad;
}

std::span<const Real> Tensor::grad() const {
  shape();
  if (storage_->grad.empty()) storage_->grad.assign(storage_->data.size(), Real(0));
  return storage_->grad;
}

void Tensor::zero_grad() {
  if (storage_ && !storage_->grad.empty()) {
    std::fill(storage_->grad.begin(), storage_->grad.end(), Real(0));
  }
}

void Tensor::drop_grad() {
  if (storage_) {
    storage_->grad.clear();
    storage_->grad.shrink_to_fit();
  }
}

void Tensor::dump(std::ostream& os) const {
  const auto& s = shape();
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? " " : "") << s[i];
  os << '\n';
  std::ostringstream line;
  line.precision(std::is_same_v<Real, double> ? 17 : 9);
  const auto values = data();
  for (std::size_t i = 0; i < values.size(); ++i) line << (i ? " " : "") << values[i];
  os << line.str() << '\n';
}

Tensor Tensor::load_dump(std::istream& is) {
  std::string header;
  if (!std::getline(is, header)) throw std::runtime_error("tensor dump: missing shape line");
  std::istringstream hs(header);
  Shape shape;
  std::size_t extent = 0;
  while (hs >> extent) shape.push_back(extent);
  std::vector<Real> values(shape_numel(shape));
  for (auto& v : values) {
    if (!(is >> v)) throw std::runtime_error("tensor dump: truncated values");
  }
  return Tensor(std::move(shape), std::move(values));
}

bool Tape::record(std::vector<Tensor> inputs, Tensor& output, BackwardFn backward) {
  if (!recording_) return false;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.requires_grad(); });
  if (!any) return false;
  output.set_requires_grad(true);
  nodes_.push_back(Node{std::move(inputs), output, std::move(backward)});
  return true;
}

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw std::invalid_argument("backward needs a scalar loss, got shape " +
                                shape_to_string(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  for (auto& node : nodes_) node.output.drop_grad();
  Tensor seed = loss;
  seed.grad()[0] = Real(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    it->backward(it->output);
  }
}

BatchNormState BatchNormState::create(std::size_t channels) {
  BatchNormState s;
  s.gamma = Tensor(Shape{channels}, Real(1), true);
  s.beta = Tensor(Shape{channels}, Real(0), true);
  s.running_mean.assign(channels, Real(0));
  s.running_var.assign(channels, Real(1));
  return s;
}

double finite_diff_check(const std::function<Tensor(Tape&)>& f, Tensor& x,
                         const GradCheckOptions& options) {
  x.zero_grad();
  {
    Tape tape;
    Tensor loss = f(tape);
    tape.backward(loss);
  }
  const std::vector<Real> analytic(x.grad().begin(), x.grad().end());

  std::vector<std::size_t> coords(x.size());
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  if (options.samples != 0 && options.samples < coords.size()) {
    Rng rng(options.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(options.samples);
  }

  auto evaluate = [&] {
    Tape tape(false);
    return static_cast<double>(f(tape).item());
  };

  double worst = 0.0;
  auto values = x.data();
  for (auto i : coords) {
    const Real original = values[i];
    const double h =
        options.step * (options.relative_step ? std::max(1.0, std::abs(double(original))) : 1.0);
    const Real plus = static_cast<Real>(original + h);
    const Real minus = static_cast<Real>(original - h);
    values[i] = plus;
    const double f_plus = evaluate();
    values[i] = minus;
    const double f_minus = evaluate();
    values[i] = original;
    const double numeric = (f_plus - f_minus) / (double(plus) - double(minus));
    const double a = analytic[i];
    const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace hvgg
