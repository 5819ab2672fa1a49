#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "gemm.hpp"
#include "hvgg/error.hpp"
#include "hvgg/tensor.hpp"

namespace hvgg::ops {

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
  }
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) +
                                ", got shape " + shape_to_string(t.shape()));
  }
}

void require_finite(const char* op, std::span<const Real> values) {
  for (auto v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

// Index into [N,C,H,W].
inline std::size_t at4(std::size_t n, std::size_t c, std::size_t y, std::size_t x, std::size_t C,
                       std::size_t H, std::size_t W) {
  return ((n * C + c) * H + y) * W + x;
}

}  // namespace

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  Tensor out(a.shape());
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  tape.record({a, b}, out, [a = Tensor(a), b = Tensor(b)](const Tensor& out) mutable {
    auto g = out.grad();
    if (a.requires_grad()) {
      auto ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
  return out;
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  Tensor out(a.shape());
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
  tape.record({a, b}, out, [a = Tensor(a), b = Tensor(b)](const Tensor& out) mutable {
    auto g = out.grad();
    if (a.requires_grad()) {
      auto ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
  return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  Tensor out(a.shape());
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  tape.record({a, b}, out, [a = Tensor(a), b = Tensor(b)](const Tensor& out) mutable {
    auto g = out.grad();
    if (a.requires_grad()) {
      auto ga = a.grad();
      auto y = b.data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad();
      auto x = a.data();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
    }
  });
  return out;
}

Tensor scale(Tape& tape, const Tensor& a, Real factor) {
  Tensor out(a.shape());
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * factor;
  tape.record({a}, out, [a = Tensor(a), factor](const Tensor& out) mutable {
    auto g = out.grad();
    auto ga = a.grad();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
  return out;
}

Tensor sum(Tape& tape, const Tensor& a) {
  double total = 0.0;
  for (auto v : a.data()) total += v;
  Tensor out = Tensor::scalar(static_cast<Real>(total));
  tape.record({a}, out, [a = Tensor(a)](const Tensor& out) mutable {
    const Real g = out.grad()[0];
    for (auto& v : a.grad()) v += g;
  });
  return out;
}

Tensor weighted_sum(Tape& tape, std::span<const Tensor> terms, std::span<const double> weights) {
  if (terms.size() != weights.size() || terms.empty()) {
    throw std::invalid_argument("weighted_sum: " + std::to_string(terms.size()) + " terms for " +
                                std::to_string(weights.size()) + " weights");
  }
  double total = 0.0;
  for (std::size_t k = 0; k < terms.size(); ++k) {
    if (terms[k].size() != 1) throw std::invalid_argument("weighted_sum: terms must be scalars");
    total += weights[k] * double(terms[k].data()[0]);
  }
  Tensor out = Tensor::scalar(static_cast<Real>(total));
  std::vector<Tensor> inputs(terms.begin(), terms.end());
  std::vector<double> w(weights.begin(), weights.end());
  tape.record(inputs, out, [inputs, w = std::move(w)](const Tensor& out) mutable {
    const double g = out.grad()[0];
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      if (inputs[k].requires_grad()) inputs[k].grad()[0] += static_cast<Real>(w[k] * g);
    }
  });
  return out;
}

Tensor mean(Tape& tape, const Tensor& a) {
  double total = 0.0;
  for (auto v : a.data()) total += v;
  const double n = static_cast<double>(a.size());
  Tensor out = Tensor::scalar(static_cast<Real>(total / n));
  tape.record({a}, out, [a = Tensor(a), n](const Tensor& out) mutable {
    const Real g = static_cast<Real>(out.grad()[0] / n);
    for (auto& v : a.grad()) v += g;
  });
  return out;
}

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw std::invalid_argument("matmul: inner extents differ, " + shape_to_string(a.shape()) +
                                " x " + shape_to_string(b.shape()));
  }
  Tensor out(Shape{m, n});
  detail::gemm(false, false, m, n, k, a.data().data(), b.data().data(), out.data().data(), false);
  tape.record({a, b}, out, [a = Tensor(a), b = Tensor(b), m, n, k](const Tensor& out) mutable {
    const Real* g = out.grad().data();
    if (a.requires_grad()) {
      detail::gemm(false, true, m, k, n, g, b.data().data(), a.grad().data(), true);
    }
    if (b.requires_grad()) {
      detail::gemm(true, false, k, n, m, a.data().data(), g, b.grad().data(), true);
    }
  });
  return out;
}

Tensor add_bias(Tape& tape, const Tensor& x, const Tensor& bias) {
  require_rank("add_bias", bias, 1);
  std::size_t outer = 0, channels = 0, inner = 0;
  if (x.rank() == 2) {
    outer = x.dim(0);
    channels = x.dim(1);
    inner = 1;
  } else if (x.rank() == 4) {
    outer = x.dim(0);
    channels = x.dim(1);
    inner = x.dim(2) * x.dim(3);
  } else {
    throw std::invalid_argument("add_bias: input must be rank 2 or 4, got " +
                                shape_to_string(x.shape()));
  }
  if (bias.dim(0) != channels) {
    throw std::invalid_argument("add_bias: bias " + shape_to_string(bias.shape()) +
                                " does not match input " + shape_to_string(x.shape()));
  }
  Tensor out(x.shape());
  auto o = out.data();
  auto in = x.data();
  auto b = bias.data();
  for (std::size_t n = 0; n < outer; ++n)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t idx = (n * channels + c) * inner + i;
        o[idx] = in[idx] + b[c];
      }
  tape.record({x, bias}, out, [x = Tensor(x), bias = Tensor(bias), outer, channels, inner](const Tensor& out) mutable {
    auto g = out.grad();
    if (x.requires_grad()) {
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (bias.requires_grad()) {
      auto gb = bias.grad();
      for (std::size_t n = 0; n < outer; ++n)
        for (std::size_t c = 0; c < channels; ++c) {
          double acc = 0.0;
          for (std::size_t i = 0; i < inner; ++i) acc += g[(n * channels + c) * inner + i];
          gb[c] += static_cast<Real>(acc);
        }
    }
  });
  return out;
}

Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.size()) {
    throw std::invalid_argument("reshape: cannot view " + shape_to_string(x.shape()) + " as " +
                                shape_to_string(shape));
  }
  auto values = x.data();
  Tensor out(std::move(shape), std::vector<Real>(values.begin(), values.end()));
  tape.record({x}, out, [x = Tensor(x)](const Tensor& out) mutable {
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
  return out;
}

Tensor flatten(Tape& tape, const Tensor& x) {
  const std::size_t n = x.dim(0);
  return reshape(tape, x, Shape{n, x.size() / n});
}

namespace {

// col[(c*9 + ky*3 + kx), oy*wo + ox] for one sample.
void im2col(const Real* in, std::size_t C, std::size_t H, std::size_t W, std::size_t stride,
            std::size_t ho, std::size_t wo, Real* col) {
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < 3; ++ky)
      for (std::size_t kx = 0; kx < 3; ++kx) {
        Real* row = col + ((c * 3 + ky) * 3 + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - 1;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - 1;
            row[oy * wo + ox] = (iy < 0 || ix < 0 || iy >= long(H) || ix >= long(W))
                                    ? Real(0)
                                    : in[(c * H + std::size_t(iy)) * W + std::size_t(ix)];
          }
        }
      }
}

void col2im(const Real* col, std::size_t C, std::size_t H, std::size_t W, std::size_t stride,
            std::size_t ho, std::size_t wo, Real* in) {
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < 3; ++ky)
      for (std::size_t kx = 0; kx < 3; ++kx) {
        const Real* row = col + ((c * 3 + ky) * 3 + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - 1;
          if (iy < 0 || iy >= long(H)) continue;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - 1;
            if (ix < 0 || ix >= long(W)) continue;
            in[(c * H + std::size_t(iy)) * W + std::size_t(ix)] += row[oy * wo + ox];
          }
        }
      }
}

}  // namespace

Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, std::size_t stride) {
  require_rank("conv2d", input, 4);
  require_rank("conv2d", kernel, 4);
  if (kernel.dim(2) != 3 || kernel.dim(3) != 3) {
    throw std::invalid_argument("conv2d: kernel must be 3x3, got " +
                                shape_to_string(kernel.shape()));
  }
  if (kernel.dim(1) != input.dim(1)) {
    throw std::invalid_argument("conv2d: channel mismatch, input " +
                                shape_to_string(input.shape()) + " kernel " +
                                shape_to_string(kernel.shape()));
  }
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t F = kernel.dim(0);
  const std::size_t ho = (H - 1) / stride + 1, wo = (W - 1) / stride + 1;
  const std::size_t ck = C * 9, plane = ho * wo;

  Tensor out(Shape{N, F, ho, wo});
  std::vector<Real> col(ck * plane);
  for (std::size_t n = 0; n < N; ++n) {
    im2col(input.data().data() + n * C * H * W, C, H, W, stride, ho, wo, col.data());
    detail::gemm(false, false, F, plane, ck, kernel.data().data(), col.data(),
                 out.data().data() + n * F * plane, false);
  }

  tape.record({input, kernel}, out,
              [input = Tensor(input), kernel = Tensor(kernel), N, C, H, W, F, ho, wo, ck, plane, stride](const Tensor& out) mutable {
                const Real* g = out.grad().data();
                std::vector<Real> col(ck * plane);
                const bool need_k = kernel.requires_grad();
                const bool need_x = input.requires_grad();
                for (std::size_t n = 0; n < N; ++n) {
                  const Real* gn = g + n * F * plane;
                  if (need_k) {
                    im2col(input.data().data() + n * C * H * W, C, H, W, stride, ho, wo,
                           col.data());
                    detail::gemm(false, true, F, ck, plane, gn, col.data(),
                                 kernel.grad().data(), true);
                  }
                  if (need_x) {
                    detail::gemm(true, false, ck, plane, F, kernel.data().data(), gn, col.data(),
                                 false);
                    col2im(col.data(), C, H, W, stride, ho, wo,
                           input.grad().data() + n * C * H * W);
                  }
                }
              });
  return out;
}

Tensor maxpool2d(Tape& tape, const Tensor& input) {
  require_rank("maxpool2d", input, 4);
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (H % 2 != 0 || W % 2 != 0) {
    throw std::invalid_argument("maxpool2d: spatial extent must be even, got " +
                                shape_to_string(input.shape()));
  }
  const std::size_t ho = H / 2, wo = W / 2;
  Tensor out(Shape{N, C, ho, wo});
  std::vector<std::size_t> argmax(out.size());
  auto in = input.data();
  auto o = out.data();
  std::size_t k = 0;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < ho; ++y)
        for (std::size_t x = 0; x < wo; ++x, ++k) {
          std::size_t best = at4(n, c, 2 * y, 2 * x, C, H, W);
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t idx = at4(n, c, 2 * y + dy, 2 * x + dx, C, H, W);
              if (in[idx] > in[best]) best = idx;
            }
          argmax[k] = best;
          o[k] = in[best];
        }
  tape.record({input}, out, [input = Tensor(input), argmax = std::move(argmax)](const Tensor& out) mutable {
    auto g = out.grad();
    auto gx = input.grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[argmax[i]] += g[i];
  });
  return out;
}

Tensor upsample2x(Tape& tape, const Tensor& input) {
  require_rank("upsample2x", input, 4);
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  Tensor out(Shape{N, C, 2 * H, 2 * W});
  auto in = input.data();
  auto o = out.data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < 2 * H; ++y)
        for (std::size_t x = 0; x < 2 * W; ++x)
          o[at4(n, c, y, x, C, 2 * H, 2 * W)] = in[at4(n, c, y / 2, x / 2, C, H, W)];
  tape.record({input}, out, [input = Tensor(input), N, C, H, W](const Tensor& out) mutable {
    auto g = out.grad();
    auto gx = input.grad();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < 2 * H; ++y)
          for (std::size_t x = 0; x < 2 * W; ++x)
            gx[at4(n, c, y / 2, x / 2, C, H, W)] += g[at4(n, c, y, x, C, 2 * H, 2 * W)];
  });
  return out;
}

Tensor relu(Tape& tape, const Tensor& x) {
  Tensor out(x.shape());
  auto in = x.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = in[i] > Real(0) ? in[i] : Real(0);
  tape.record({x}, out, [x = Tensor(x)](const Tensor& out) mutable {
    auto g = out.grad();
    auto gx = x.grad();
    auto in = x.data();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (in[i] > Real(0)) gx[i] += g[i];
  });
  return out;
}

Tensor batch_norm(Tape& tape, const Tensor& x, BatchNormState& state, Mode mode) {
  std::size_t N = 0, C = 0, inner = 0;
  if (x.rank() == 2) {
    N = x.dim(0);
    C = x.dim(1);
    inner = 1;
  } else if (x.rank() == 4) {
    N = x.dim(0);
    C = x.dim(1);
    inner = x.dim(2) * x.dim(3);
  } else {
    throw std::invalid_argument("batch_norm: input must be rank 2 or 4, got " +
                                shape_to_string(x.shape()));
  }
  if (state.gamma.size() != C) {
    throw std::invalid_argument("batch_norm: state has " + std::to_string(state.gamma.size()) +
                                " channels, input " + shape_to_string(x.shape()));
  }
  if (mode == Mode::train && N < 2) {
    throw std::invalid_argument("batch_norm: train mode needs a batch of at least 2, got " +
                                std::to_string(N));
  }

  const std::size_t count = N * inner;
  auto in = x.data();
  std::vector<Real> mean_c(C), invstd(C);
  for (std::size_t c = 0; c < C; ++c) {
    if (mode == Mode::train) {
      double s = 0.0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < inner; ++i) s += in[(n * C + c) * inner + i];
      const double mu = s / double(count);
      double ss = 0.0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < inner; ++i) {
          const double d = in[(n * C + c) * inner + i] - mu;
          ss += d * d;
        }
      const double var = ss / double(count);
      mean_c[c] = static_cast<Real>(mu);
      invstd[c] = static_cast<Real>(1.0 / std::sqrt(var + double(state.eps)));
      const double unbiased = ss / double(count - 1);
      state.running_mean[c] =
          static_cast<Real>(state.momentum * state.running_mean[c] + (1.0 - state.momentum) * mu);
      state.running_var[c] = static_cast<Real>(state.momentum * state.running_var[c] +
                                               (1.0 - state.momentum) * unbiased);
    } else {
      mean_c[c] = state.running_mean[c];
      invstd[c] =
          static_cast<Real>(1.0 / std::sqrt(double(state.running_var[c]) + double(state.eps)));
    }
  }

  Tensor out(x.shape());
  std::vector<Real> xhat(x.size());
  auto o = out.data();
  auto gamma = state.gamma.data();
  auto beta = state.beta.data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t idx = (n * C + c) * inner + i;
        xhat[idx] = (in[idx] - mean_c[c]) * invstd[c];
        o[idx] = gamma[c] * xhat[idx] + beta[c];
      }

  Tensor g_t = state.gamma;
  Tensor b_t = state.beta;
  tape.record({x, g_t, b_t}, out,
              [x = Tensor(x), g_t, b_t, xhat = std::move(xhat), invstd = std::move(invstd), N, C, inner, count, mode](const Tensor& out) mutable {
                auto g = out.grad();
                auto gamma = g_t.data();
                std::vector<double> sum_g(C, 0.0), sum_gx(C, 0.0);
                for (std::size_t n = 0; n < N; ++n)
                  for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t i = 0; i < inner; ++i) {
                      const std::size_t idx = (n * C + c) * inner + i;
                      sum_g[c] += g[idx];
                      sum_gx[c] += double(g[idx]) * xhat[idx];
                    }
                if (g_t.requires_grad()) {
                  auto gg = g_t.grad();
                  for (std::size_t c = 0; c < C; ++c) gg[c] += static_cast<Real>(sum_gx[c]);
                }
                if (b_t.requires_grad()) {
                  auto gb = b_t.grad();
                  for (std::size_t c = 0; c < C; ++c) gb[c] += static_cast<Real>(sum_g[c]);
                }
                if (!x.requires_grad()) return;
                auto gx = x.grad();
                const double m = double(count);
                for (std::size_t n = 0; n < N; ++n)
                  for (std::size_t c = 0; c < C; ++c) {
                    const double scale = double(gamma[c]) * invstd[c];
                    for (std::size_t i = 0; i < inner; ++i) {
                      const std::size_t idx = (n * C + c) * inner + i;
                      if (mode == Mode::train) {
                        gx[idx] += static_cast<Real>(
                            scale * (double(g[idx]) - sum_g[c] / m - xhat[idx] * sum_gx[c] / m));
                      } else {
                        gx[idx] += static_cast<Real>(scale * g[idx]);
                      }
                    }
                  }
              });
  return out;
}

Tensor dropout(Tape& tape, const Tensor& x, Real p, Mode mode, Rng& rng) {
  if (!(p >= Real(0) && p < Real(1))) {
    throw std::invalid_argument("dropout: p must lie in [0,1), got " + std::to_string(p));
  }
  if (mode == Mode::infer || p == Real(0)) return x;
  const Real keep_scale = Real(1) / (Real(1) - p);
  std::bernoulli_distribution keep(1.0 - double(p));
  std::vector<Real> mask(x.size());
  for (auto& m : mask) m = keep(rng) ? keep_scale : Real(0);
  Tensor out(x.shape());
  auto in = x.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = in[i] * mask[i];
  tape.record({x}, out, [x = Tensor(x), mask = std::move(mask)](const Tensor& out) mutable {
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
  });
  return out;
}

Tensor softmax(Tape& tape, const Tensor& logits) {
  require_rank("softmax", logits, 2);
  const std::size_t N = logits.dim(0), C = logits.dim(1);
  if (C < 2) throw std::invalid_argument("softmax: needs at least 2 classes");
  require_finite("softmax", logits.data());
  Tensor out(logits.shape());
  auto z = logits.data();
  auto o = out.data();
  for (std::size_t n = 0; n < N; ++n) {
    const Real* row = z.data() + n * C;
    const double mx = *std::max_element(row, row + C);
    double total = 0.0;
    for (std::size_t c = 0; c < C; ++c) total += std::exp(double(row[c]) - mx);
    for (std::size_t c = 0; c < C; ++c)
      o[n * C + c] = static_cast<Real>(std::exp(double(row[c]) - mx) / total);
  }
  tape.record({logits}, out, [logits = Tensor(logits), N, C](const Tensor& out) mutable {
    auto g = out.grad();
    auto y = out.data();
    auto gx = logits.grad();
    for (std::size_t n = 0; n < N; ++n) {
      double dot = 0.0;
      for (std::size_t c = 0; c < C; ++c) dot += double(g[n * C + c]) * y[n * C + c];
      for (std::size_t c = 0; c < C; ++c)
        gx[n * C + c] += static_cast<Real>(y[n * C + c] * (g[n * C + c] - dot));
    }
  });
  return out;
}

Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const std::size_t> targets) {
  require_rank("cross_entropy", logits, 2);
  const std::size_t N = logits.dim(0), C = logits.dim(1);
  if (targets.size() != N) {
    throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) +
                                " targets for " + std::to_string(N) + " rows");
  }
  for (auto t : targets) {
    if (t >= C) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(t) + " out of range for " +
                              std::to_string(C) + " classes");
    }
  }
  require_finite("cross_entropy", logits.data());
  auto z = logits.data();
  std::vector<Real> probs(N * C);
  double total = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    const Real* row = z.data() + n * C;
    const double mx = *std::max_element(row, row + C);
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += std::exp(double(row[c]) - mx);
    const double lse = mx + std::log(s);
    total += lse - double(row[targets[n]]);
    for (std::size_t c = 0; c < C; ++c)
      probs[n * C + c] = static_cast<Real>(std::exp(double(row[c]) - lse));
  }
  Tensor out = Tensor::scalar(static_cast<Real>(total / double(N)));
  std::vector<std::size_t> t(targets.begin(), targets.end());
  tape.record({logits}, out,
              [logits = Tensor(logits), probs = std::move(probs), t = std::move(t), N, C](const Tensor& out) mutable {
                const double g = double(out.grad()[0]) / double(N);
                auto gx = logits.grad();
                for (std::size_t n = 0; n < N; ++n)
                  for (std::size_t c = 0; c < C; ++c) {
                    const double indicator = (c == t[n]) ? 1.0 : 0.0;
                    gx[n * C + c] += static_cast<Real>(g * (probs[n * C + c] - indicator));
                  }
              });
  return out;
}

}  // namespace hvgg::ops
