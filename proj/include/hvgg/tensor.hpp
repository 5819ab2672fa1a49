#pragma once

// Dense tensors and a reverse-mode tape covering the operation set used by the
// VGG-style networks and the convolutional auto-encoder.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

namespace hvgg {

#ifdef HVGG_REAL_DOUBLE
using Real = double;
#else
using Real = float;
#endif

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

enum class Mode { train, infer };

/// Handle to shared n-dimensional storage. Copies alias the same buffer, the
/// way parameters are shared between a network, its optimizer and the tape.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = Real(0), bool requires_grad = false);
  Tensor(Shape shape, std::vector<Real> values, bool requires_grad = false);

  static Tensor scalar(Real value, bool requires_grad = false);
  static Tensor zeros_like(const Tensor& other);

  bool defined() const { return storage_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;

  std::span<Real> data();
  std::span<const Real> data() const;
  Real item() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);

  bool has_grad() const;
  // Allocates a zero buffer on first access.
  std::span<Real> grad();
  std::span<const Real> grad() const;
  void zero_grad();
  void drop_grad();

  bool same_storage(const Tensor& other) const { return storage_ == other.storage_; }

  // Text dump: first line is the shape, then row-major values.
  void dump(std::ostream& os) const;
  static Tensor load_dump(std::istream& is);

 private:
  struct Storage {
    Shape shape;
    std::vector<Real> data;
    std::vector<Real> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> storage_;
};

/// Records operations in execution order, which is a valid topological order
/// of the graph by construction.
class Tape {
 public:
  using BackwardFn = std::function<void(const Tensor& output)>;

  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }

  // Returns true when the node was recorded; the output then requires grad.
  bool record(std::vector<Tensor> inputs, Tensor& output, BackwardFn backward);

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded backward rule in
  /// reverse order. Leaf gradients accumulate; call zero_grad between steps.
  void backward(const Tensor& loss);

  void clear() { nodes_.clear(); }

 private:
  struct Node {
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  bool recording_;
};

struct BatchNormState {
  Tensor gamma;
  Tensor beta;
  std::vector<Real> running_mean;
  std::vector<Real> running_var;
  Real momentum = Real(0.9);
  Real eps = Real(1e-5);

  static BatchNormState create(std::size_t channels);
};

namespace ops {

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, Real factor);
Tensor sum(Tape& tape, const Tensor& a);
// sum_k weights[k] * terms[k] over scalar terms, accumulated in double and
// rounded once.
Tensor weighted_sum(Tape& tape, std::span<const Tensor> terms, std::span<const double> weights);
Tensor mean(Tape& tape, const Tensor& a);

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
// Adds bias[j] along the last axis of a rank-2 input or along the channel
// axis of a rank-4 input.
Tensor add_bias(Tape& tape, const Tensor& x, const Tensor& bias);
Tensor reshape(Tape& tape, const Tensor& x, Shape shape);
Tensor flatten(Tape& tape, const Tensor& x);

// 3x3 cross-correlation with padding 1.
Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, std::size_t stride = 1);
Tensor maxpool2d(Tape& tape, const Tensor& input);
Tensor upsample2x(Tape& tape, const Tensor& input);

Tensor relu(Tape& tape, const Tensor& x);
Tensor batch_norm(Tape& tape, const Tensor& x, BatchNormState& state, Mode mode);
Tensor dropout(Tape& tape, const Tensor& x, Real p, Mode mode, Rng& rng);

Tensor softmax(Tape& tape, const Tensor& logits);
// Mean over the batch of -log softmax(logits)[target].
Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const std::size_t> targets);

}  // namespace ops

struct GradCheckOptions {
  // 32-bit rounding noise swamps central differences below ~1e-2.
  double step = std::is_same_v<Real, double> ? 1e-4 : 1e-2;
  // Step is scaled by max(1, |theta|) when set.
  bool relative_step = true;
  // 0 checks every coordinate.
  std::size_t samples = 20;
  std::uint64_t seed = 0;
};

/// Compares the tape gradient of the scalar `f` with respect to `x` against
/// central differences. Returns the max over checked coordinates of
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
double finite_diff_check(const std::function<Tensor(Tape&)>& f, Tensor& x,
                         const GradCheckOptions& options = {});

}  // namespace hvgg
