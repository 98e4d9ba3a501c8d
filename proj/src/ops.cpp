#include "latent_depth/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "latent_depth/parallel.hpp"

namespace latent_depth {

namespace {

using detail::Node;
using BackwardFn = std::function<void(Node&)>;

// Wraps freshly computed values into a tensor, recording the backward closure
// only when at least one input takes part in differentiation.
Tensor make_result(Shape shape, std::vector<Real> values, std::string_view op,
                   std::initializer_list<const Tensor*> inputs, BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->op = op;
  bool needs_grad = false;
  if (grad_recording_enabled()) {
    for (const Tensor* t : inputs) needs_grad = needs_grad || t->requires_grad();
  }
  if (needs_grad) {
    node->requires_grad = true;
    for (const Tensor* t : inputs) node->inputs.push_back(t->node());
    node->backward_fn = std::move(fn);
  }
  return Tensor::from_node(std::move(node));
}

void require_defined(const Tensor& t, std::string_view op, std::string_view name) {
  if (!t.defined()) {
    throw ArgumentError(std::string(op) + ": " + std::string(name) + " is undefined");
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, std::string_view op) {
  require_defined(a, op, "lhs");
  require_defined(b, op, "rhs");
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

// N x C x H x W view of a rank-3 or rank-4 image tensor.
struct ImageDims {
  std::size_t n, c, h, w;
};

ImageDims image_dims(const Tensor& t, std::string_view op) {
  const Shape& s = t.shape();
  if (s.size() == 3) return {1, s[0], s[1], s[2]};
  if (s.size() == 4) return {s[0], s[1], s[2], s[3]};
  throw ShapeError(std::string(op) + ": expected C x H x W or N x C x H x W input, got " +
                   shape_string(s));
}

Shape image_shape(std::size_t rank, const ImageDims& d) {
  if (rank == 3) return {d.c, d.h, d.w};
  return {d.n, d.c, d.h, d.w};
}

// Range of output columns whose source column ox * stride + k - pad is inside [0, width).
std::pair<std::ptrdiff_t, std::ptrdiff_t> valid_range(std::ptrdiff_t out_size, std::ptrdiff_t width,
                                                      std::ptrdiff_t stride, std::ptrdiff_t k,
                                                      std::ptrdiff_t pad) {
  const std::ptrdiff_t shift = k - pad;
  std::ptrdiff_t lo = 0;
  if (shift < 0) lo = (-shift + stride - 1) / stride;
  std::ptrdiff_t hi = out_size;
  const std::ptrdiff_t last = width - 1 - shift;  // largest ox * stride allowed
  if (last < 0) {
    hi = 0;
  } else {
    hi = std::min(hi, last / stride + 1);
  }
  return {lo, std::max(lo, hi)};
}

struct ConvGeometry {
  std::ptrdiff_t n, cin, h, w, cout, kh, kw, stride, ph, pw, ho, wo;

  std::ptrdiff_t plane() const { return ho * wo; }
  std::ptrdiff_t taps() const { return cin * kh * kw; }
};

// Samples are processed in groups whose column matrices hold about this many
// columns, so small late layers still get long inner loops.
constexpr std::ptrdiff_t kGroupColumns = 1024;
constexpr std::ptrdiff_t kRowBlock = 4;

std::ptrdiff_t group_size(const ConvGeometry& g) {
  return std::clamp<std::ptrdiff_t>(kGroupColumns / g.plane(), 1, g.n);
}

// Column matrix of samples [n0, n0 + count): row r = (c * kh + ky) * kw + kx,
// column q = (n - n0) * plane + oy * wo + ox. Taps outside the image read 0.
void im2col(const ConvGeometry& g, const Real* in, std::ptrdiff_t n0, std::ptrdiff_t count,
            Real* col) {
  const std::ptrdiff_t cols = count * g.plane();
  std::fill(col, col + g.taps() * cols, 0.0);
  for (std::ptrdiff_t c = 0; c < g.cin; ++c) {
    for (std::ptrdiff_t ky = 0; ky < g.kh; ++ky) {
      for (std::ptrdiff_t kx = 0; kx < g.kw; ++kx) {
        Real* row = col + ((c * g.kh + ky) * g.kw + kx) * cols;
        const auto [lo, hi] = valid_range(g.wo, g.w, g.stride, kx, g.pw);
        for (std::ptrdiff_t s = 0; s < count; ++s) {
          const Real* in_c = in + ((n0 + s) * g.cin + c) * g.h * g.w;
          for (std::ptrdiff_t oy = 0; oy < g.ho; ++oy) {
            const std::ptrdiff_t iy = oy * g.stride + ky - g.ph;
            if (iy < 0 || iy >= g.h) continue;
            const Real* irow = in_c + iy * g.w + (kx - g.pw);
            Real* out = row + s * g.plane() + oy * g.wo;
            for (std::ptrdiff_t ox = lo; ox < hi; ++ox) out[ox] = irow[ox * g.stride];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters column gradients back into the input gradient.
void col2im(const ConvGeometry& g, const Real* col, std::ptrdiff_t n0, std::ptrdiff_t count,
            Real* gin) {
  const std::ptrdiff_t cols = count * g.plane();
  for (std::ptrdiff_t s = 0; s < count; ++s) {
    for (std::ptrdiff_t c = 0; c < g.cin; ++c) {
      Real* gin_c = gin + ((n0 + s) * g.cin + c) * g.h * g.w;
      for (std::ptrdiff_t ky = 0; ky < g.kh; ++ky) {
        for (std::ptrdiff_t kx = 0; kx < g.kw; ++kx) {
          const Real* row = col + ((c * g.kh + ky) * g.kw + kx) * cols + s * g.plane();
          const auto [lo, hi] = valid_range(g.wo, g.w, g.stride, kx, g.pw);
          for (std::ptrdiff_t oy = 0; oy < g.ho; ++oy) {
            const std::ptrdiff_t iy = oy * g.stride + ky - g.ph;
            if (iy < 0 || iy >= g.h) continue;
            Real* irow = gin_c + iy * g.w + (kx - g.pw);
            const Real* src = row + oy * g.wo;
            for (std::ptrdiff_t ox = lo; ox < hi; ++ox) irow[ox * g.stride] += src[ox];
          }
        }
      }
    }
  }
}

// c[i, :] += sum over k (ascending) of a[i, k] * b[k, :] for rows i in [i0, i1);
// a is rows x depth, b is depth x cols, both row-major.
void gemm_rows(std::ptrdiff_t i0, std::ptrdiff_t i1, std::ptrdiff_t depth, std::ptrdiff_t cols,
               const Real* a, const Real* b, Real* c) {
  constexpr std::ptrdiff_t kColBlock = 256;
  for (std::ptrdiff_t q0 = 0; q0 < cols; q0 += kColBlock) {
    const std::ptrdiff_t qn = std::min(kColBlock, cols - q0);
    std::ptrdiff_t i = i0;
    for (; i + 4 <= i1; i += 4) {
      Real* c0 = c + i * cols + q0;
      Real* c1 = c0 + cols;
      Real* c2 = c1 + cols;
      Real* c3 = c2 + cols;
      for (std::ptrdiff_t k = 0; k < depth; ++k) {
        const Real a0 = a[i * depth + k], a1 = a[(i + 1) * depth + k];
        const Real a2 = a[(i + 2) * depth + k], a3 = a[(i + 3) * depth + k];
        const Real* bk = b + k * cols + q0;
        for (std::ptrdiff_t q = 0; q < qn; ++q) {
          const Real v = bk[q];
          c0[q] += a0 * v;
          c1[q] += a1 * v;
          c2[q] += a2 * v;
          c3[q] += a3 * v;
        }
      }
    }
    for (; i < i1; ++i) {
      Real* ci = c + i * cols + q0;
      for (std::ptrdiff_t k = 0; k < depth; ++k) {
        const Real ak = a[i * depth + k];
        const Real* bk = b + k * cols + q0;
        for (std::ptrdiff_t q = 0; q < qn; ++q) ci[q] += ak * bk[q];
      }
    }
  }
}

// Dot product with a fixed eight-lane summation order.
Real dot(const Real* x, const Real* y, std::ptrdiff_t n) {
  Real s[8] = {};
  std::ptrdiff_t q = 0;
  for (; q + 8 <= n; q += 8) {
    for (int k = 0; k < 8; ++k) s[k] += x[q + k] * y[q + k];
  }
  Real tail = 0.0;
  for (; q < n; ++q) tail += x[q] * y[q];
  return ((s[0] + s[1]) + (s[2] + s[3])) + ((s[4] + s[5]) + (s[6] + s[7])) + tail;
}

// Runs body(i0, i1) over blocks of kRowBlock rows of [0, rows).
void for_row_blocks(std::ptrdiff_t rows,
                    const std::function<void(std::ptrdiff_t, std::ptrdiff_t)>& body) {
  const std::ptrdiff_t blocks = (rows + kRowBlock - 1) / kRowBlock;
  parallel_for(static_cast<std::size_t>(blocks), [&](std::size_t job) {
    const auto i0 = static_cast<std::ptrdiff_t>(job) * kRowBlock;
    body(i0, std::min(rows, i0 + kRowBlock));
  });
}

// Copies between N x C x plane storage and the C x (count * plane) group layout.
void gather_group(const ConvGeometry& g, std::ptrdiff_t channels, const Real* nchw,
                  std::ptrdiff_t n0, std::ptrdiff_t count, Real* grouped) {
  const std::ptrdiff_t p = g.plane(), cols = count * p;
  for (std::ptrdiff_t s = 0; s < count; ++s) {
    for (std::ptrdiff_t c = 0; c < channels; ++c) {
      const Real* src = nchw + ((n0 + s) * channels + c) * p;
      std::copy(src, src + p, grouped + c * cols + s * p);
    }
  }
}

void scatter_group(const ConvGeometry& g, std::ptrdiff_t channels, const Real* grouped,
                   std::ptrdiff_t n0, std::ptrdiff_t count, Real* nchw) {
  const std::ptrdiff_t p = g.plane(), cols = count * p;
  for (std::ptrdiff_t s = 0; s < count; ++s) {
    for (std::ptrdiff_t c = 0; c < channels; ++c) {
      const Real* src = grouped + c * cols + s * p;
      std::copy(src, src + p, nchw + ((n0 + s) * channels + c) * p);
    }
  }
}

void conv_forward(const ConvGeometry& g, const Real* in, const Real* weights, const Real* bias,
                  Real* out) {
  const std::ptrdiff_t group = group_size(g);
  std::vector<Real> col, acc;
  for (std::ptrdiff_t n0 = 0; n0 < g.n; n0 += group) {
    const std::ptrdiff_t count = std::min(group, g.n - n0);
    const std::ptrdiff_t cols = count * g.plane();
    col.resize(static_cast<std::size_t>(g.taps() * cols));
    acc.resize(static_cast<std::size_t>(g.cout * cols));
    im2col(g, in, n0, count, col.data());
    for (std::ptrdiff_t o = 0; o < g.cout; ++o) {
      std::fill(acc.begin() + o * cols, acc.begin() + (o + 1) * cols, bias[o]);
    }
    for_row_blocks(g.cout, [&](std::ptrdiff_t i0, std::ptrdiff_t i1) {
      gemm_rows(i0, i1, g.taps(), cols, weights, col.data(), acc.data());
    });
    scatter_group(g, g.cout, acc.data(), n0, count, out);
  }
}

// Accumulates input, weight and bias gradients; null targets are skipped.
void conv_backward(const ConvGeometry& g, const Real* gout, const Real* in, const Real* weights,
                   Real* gin, Real* gw, Real* gb) {
  const std::ptrdiff_t group = group_size(g);
  const std::ptrdiff_t taps = g.taps();
  std::vector<Real> weights_t;
  if (gin != nullptr) {
    weights_t.resize(static_cast<std::size_t>(taps * g.cout));
    for (std::ptrdiff_t o = 0; o < g.cout; ++o) {
      for (std::ptrdiff_t r = 0; r < taps; ++r) weights_t[r * g.cout + o] = weights[o * taps + r];
    }
  }
  std::vector<Real> grouped, col;
  for (std::ptrdiff_t n0 = 0; n0 < g.n; n0 += group) {
    const std::ptrdiff_t count = std::min(group, g.n - n0);
    const std::ptrdiff_t cols = count * g.plane();
    grouped.resize(static_cast<std::size_t>(g.cout * cols));
    col.resize(static_cast<std::size_t>(taps * cols));
    gather_group(g, g.cout, gout, n0, count, grouped.data());
    if (gw != nullptr) {
      im2col(g, in, n0, count, col.data());
      for_row_blocks(g.cout, [&](std::ptrdiff_t i0, std::ptrdiff_t i1) {
        for (std::ptrdiff_t o = i0; o < i1; ++o) {
          const Real* go = grouped.data() + o * cols;
          for (std::ptrdiff_t r = 0; r < taps; ++r) {
            gw[o * taps + r] += dot(go, col.data() + r * cols, cols);
          }
          Real bsum = 0.0;
          for (std::ptrdiff_t q = 0; q < cols; ++q) bsum += go[q];
          gb[o] += bsum;
        }
      });
    }
    if (gin != nullptr) {
      std::fill(col.begin(), col.end(), 0.0);
      for_row_blocks(taps, [&](std::ptrdiff_t i0, std::ptrdiff_t i1) {
        gemm_rows(i0, i1, g.cout, cols, weights_t.data(), grouped.data(), col.data());
      });
      col2im(g, col.data(), n0, count, gin);
    }
  }
}

void accumulate(Node& target, const std::vector<Real>& delta) {
  std::vector<Real>& g = target.ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

}  // namespace

void ConvSpec::validate() const {
  if (out_channels == 0 || in_channels == 0 || kernel_h == 0 || kernel_w == 0) {
    throw ArgumentError("ConvSpec: channel counts and kernel dims must be positive");
  }
  if (kernel_h % 2 == 0 || kernel_w % 2 == 0) {
    throw ArgumentError("ConvSpec: kernel dims must be odd, got " + std::to_string(kernel_h) +
                        "x" + std::to_string(kernel_w));
  }
  if (stride != 1 && stride != 2) {
    throw ArgumentError("ConvSpec: stride must be 1 or 2, got " + std::to_string(stride));
  }
}

Tensor conv2d(const Tensor& input, const ConvSpec& spec, const Tensor& weights,
              const Tensor& bias) {
  spec.validate();
  require_defined(input, "conv2d", "input");
  require_defined(weights, "conv2d", "weights");
  require_defined(bias, "conv2d", "bias");
  const ImageDims d = image_dims(input, "conv2d");
  if (d.c != spec.in_channels) {
    throw ShapeError("conv2d: input channel dimension is " + std::to_string(d.c) + ", spec expects " +
                     std::to_string(spec.in_channels));
  }
  if (weights.shape() != spec.weight_shape()) {
    throw ShapeError("conv2d: weight shape " + shape_string(weights.shape()) + " does not match " +
                     shape_string(spec.weight_shape()));
  }
  if (bias.shape() != Shape{spec.out_channels}) {
    throw ShapeError("conv2d: bias shape " + shape_string(bias.shape()) + " does not match " +
                     std::to_string(spec.out_channels));
  }

  ConvGeometry g{};
  g.n = static_cast<std::ptrdiff_t>(d.n);
  g.cin = static_cast<std::ptrdiff_t>(d.c);
  g.h = static_cast<std::ptrdiff_t>(d.h);
  g.w = static_cast<std::ptrdiff_t>(d.w);
  g.cout = static_cast<std::ptrdiff_t>(spec.out_channels);
  g.kh = static_cast<std::ptrdiff_t>(spec.kernel_h);
  g.kw = static_cast<std::ptrdiff_t>(spec.kernel_w);
  g.stride = static_cast<std::ptrdiff_t>(spec.stride);
  g.ph = static_cast<std::ptrdiff_t>(spec.pad_h());
  g.pw = static_cast<std::ptrdiff_t>(spec.pad_w());
  g.ho = static_cast<std::ptrdiff_t>(spec.output_size(d.h));
  g.wo = static_cast<std::ptrdiff_t>(spec.output_size(d.w));

  ImageDims od{d.n, spec.out_channels, static_cast<std::size_t>(g.ho),
               static_cast<std::size_t>(g.wo)};
  std::vector<Real> out(d.n * od.c * od.h * od.w);
  conv_forward(g, input.data().data(), weights.data().data(), bias.data().data(), out.data());

  return make_result(
      image_shape(input.rank(), od), std::move(out), "conv2d", {&input, &weights, &bias},
      [g](Node& self) {
        Node& in_node = *self.inputs[0];
        Node& w_node = *self.inputs[1];
        Node& b_node = *self.inputs[2];
        std::vector<Real> gin, gw, gb;
        if (in_node.requires_grad) gin.assign(in_node.data.size(), 0.0);
        const bool filter = w_node.requires_grad || b_node.requires_grad;
        if (filter) {
          gw.assign(w_node.data.size(), 0.0);
          gb.assign(b_node.data.size(), 0.0);
        }
        conv_backward(g, self.grad.data(), in_node.data.data(), w_node.data.data(),
                      gin.empty() ? nullptr : gin.data(), filter ? gw.data() : nullptr,
                      filter ? gb.data() : nullptr);
        if (in_node.requires_grad) accumulate(in_node, gin);
        if (w_node.requires_grad) accumulate(w_node, gw);
        if (b_node.requires_grad) accumulate(b_node, gb);
      });
}

Tensor batch_norm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var, const BatchNormOptions& options) {
  require_defined(input, "batch_norm2d", "input");
  if (!(options.eps > 0.0)) throw ArgumentError("batch_norm2d: eps must be positive");
  const ImageDims d = image_dims(input, "batch_norm2d");
  const Shape channel_shape{d.c};
  for (const Tensor* t : {&gamma, &beta, static_cast<const Tensor*>(&running_mean),
                          static_cast<const Tensor*>(&running_var)}) {
    require_defined(*t, "batch_norm2d", "parameter");
    if (t->shape() != channel_shape) {
      throw ShapeError("batch_norm2d: per-channel parameter has shape " + shape_string(t->shape()) +
                       ", expected " + std::to_string(d.c));
    }
  }
  const std::size_t plane = d.h * d.w;
  const std::size_t count = d.n * plane;
  const bool train = options.mode == NormMode::kTrain;
  if (train && count < 2) {
    throw ArgumentError("batch_norm2d: train mode needs N*H*W >= 2 values per channel, got " +
                        std::to_string(count));
  }

  const auto x = input.data();
  const auto gm = gamma.data();
  const auto bt = beta.data();
  std::vector<Real> xhat(x.size());
  std::vector<Real> inv_std(d.c);
  std::vector<Real> out(x.size());
  for (std::size_t c = 0; c < d.c; ++c) {
    Real mean = 0.0;
    Real var = 0.0;
    if (train) {
      for (std::size_t n = 0; n < d.n; ++n) {
        const Real* p = x.data() + (n * d.c + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) mean += p[i];
      }
      mean /= static_cast<Real>(count);
      for (std::size_t n = 0; n < d.n; ++n) {
        const Real* p = x.data() + (n * d.c + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) var += (p[i] - mean) * (p[i] - mean);
      }
      var /= static_cast<Real>(count);
      if (options.update_running_stats) {
        const Real m = options.momentum;
        Real& rm = running_mean.mutable_data()[c];
        Real& rv = running_var.mutable_data()[c];
        rm = (1.0 - m) * rm + m * mean;
        rv = (1.0 - m) * rv +
             m * var * static_cast<Real>(count) / static_cast<Real>(count - 1);
      }
    } else {
      mean = running_mean.data()[c];
      var = running_var.data()[c];
    }
    inv_std[c] = 1.0 / std::sqrt(var + options.eps);
    for (std::size_t n = 0; n < d.n; ++n) {
      const std::size_t base = (n * d.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const Real xh = (x[base + i] - mean) * inv_std[c];
        xhat[base + i] = xh;
        out[base + i] = gm[c] * xh + bt[c];
      }
    }
  }

  std::vector<Real> gamma_copy(gm.begin(), gm.end());
  return make_result(
      input.shape(), std::move(out), "batch_norm2d", {&input, &gamma, &beta},
      [d, train, xhat = std::move(xhat), inv_std = std::move(inv_std),
       gamma_copy = std::move(gamma_copy)](Node& self) {
        Node& in_node = *self.inputs[0];
        Node& g_node = *self.inputs[1];
        Node& b_node = *self.inputs[2];
        const std::size_t plane = d.h * d.w;
        const auto m = static_cast<Real>(d.n * plane);
        const std::vector<Real>& dy = self.grad;
        std::vector<Real> dgamma(d.c, 0.0);
        std::vector<Real> dbeta(d.c, 0.0);
        std::vector<Real> dx(in_node.requires_grad ? dy.size() : 0);
        for (std::size_t c = 0; c < d.c; ++c) {
          Real sum_dy = 0.0;
          Real sum_dy_xhat = 0.0;
          for (std::size_t n = 0; n < d.n; ++n) {
            const std::size_t base = (n * d.c + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              sum_dy += dy[base + i];
              sum_dy_xhat += dy[base + i] * xhat[base + i];
            }
          }
          dgamma[c] = sum_dy_xhat;
          dbeta[c] = sum_dy;
          if (!in_node.requires_grad) continue;
          const Real k = gamma_copy[c] * inv_std[c];
          for (std::size_t n = 0; n < d.n; ++n) {
            const std::size_t base = (n * d.c + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              const std::size_t j = base + i;
              if (train) {
                dx[j] = k / m * (m * dy[j] - sum_dy - xhat[j] * sum_dy_xhat);
              } else {
                dx[j] = k * dy[j];
              }
            }
          }
        }
        if (in_node.requires_grad) accumulate(in_node, dx);
        if (g_node.requires_grad) accumulate(g_node, dgamma);
        if (b_node.requires_grad) accumulate(b_node, dbeta);
      });
}

Tensor relu(const Tensor& input) {
  require_defined(input, "relu", "input");
  const auto x = input.data();
  std::vector<Real> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  return make_result(input.shape(), std::move(out), "relu", {&input}, [](Node& self) {
    Node& in = *self.inputs[0];
    std::vector<Real>& g = in.ensure_grad();
    // Subgradient at exactly zero is zero.
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (in.data[i] > 0.0) g[i] += self.grad[i];
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto x = a.data();
  const auto y = b.data();
  std::vector<Real> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  return make_result(a.shape(), std::move(out), "add", {&a, &b}, [](Node& self) {
    for (int k = 0; k < 2; ++k) {
      Node& in = *self.inputs[k];
      if (in.requires_grad) accumulate(in, self.grad);
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const auto x = a.data();
  const auto y = b.data();
  std::vector<Real> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  return make_result(a.shape(), std::move(out), "sub", {&a, &b}, [](Node& self) {
    Node& lhs = *self.inputs[0];
    Node& rhs = *self.inputs[1];
    if (lhs.requires_grad) accumulate(lhs, self.grad);
    if (rhs.requires_grad) {
      std::vector<Real>& g = rhs.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto x = a.data();
  const auto y = b.data();
  std::vector<Real> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  return make_result(a.shape(), std::move(out), "mul", {&a, &b}, [](Node& self) {
    Node& lhs = *self.inputs[0];
    Node& rhs = *self.inputs[1];
    if (lhs.requires_grad) {
      std::vector<Real>& g = lhs.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * rhs.data[i];
    }
    if (rhs.requires_grad) {
      std::vector<Real>& g = rhs.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * lhs.data[i];
    }
  });
}

Tensor scale(const Tensor& a, Real factor) {
  require_defined(a, "scale", "input");
  const auto x = a.data();
  std::vector<Real> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * factor;
  return make_result(a.shape(), std::move(out), "scale", {&a}, [factor](Node& self) {
    std::vector<Real>& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

Tensor reshape(const Tensor& input, Shape shape) {
  require_defined(input, "reshape", "input");
  if (shape_numel(shape) != input.numel()) {
    throw ShapeError("reshape: cannot view " + shape_string(input.shape()) + " as " +
                     shape_string(shape));
  }
  auto values = std::vector<Real>(input.data().begin(), input.data().end());
  return make_result(std::move(shape), std::move(values), "reshape", {&input},
                     [](Node& self) { accumulate(*self.inputs[0], self.grad); });
}

namespace {

// Half-pixel source taps for factor-2 upsampling along one axis.
struct Tap {
  std::size_t i0, i1;
  Real t;  // weight of i1; i0 gets 1 - t
};

std::vector<Tap> upsample_taps(std::size_t in_size) {
  std::vector<Tap> taps(2 * in_size);
  for (std::size_t o = 0; o < taps.size(); ++o) {
    Real src = (static_cast<Real>(o) + 0.5) / 2.0 - 0.5;
    if (src < 0.0) src = 0.0;
    const auto i0 = static_cast<std::size_t>(src);
    const std::size_t i1 = std::min(i0 + 1, in_size - 1);
    taps[o] = {i0, i1, src - static_cast<Real>(i0)};
  }
  return taps;
}

}  // namespace

Tensor bilinear_upsample_x2(const Tensor& input) {
  require_defined(input, "bilinear_upsample_x2", "input");
  const Shape& s = input.shape();
  if (s.size() < 2) {
    throw ShapeError("bilinear_upsample_x2: need rank >= 2, got " + shape_string(s));
  }
  const std::size_t h = s[s.size() - 2];
  const std::size_t w = s[s.size() - 1];
  const std::size_t planes = input.numel() / (h * w);
  const std::size_t ho = 2 * h;
  const std::size_t wo = 2 * w;
  const auto ty = upsample_taps(h);
  const auto tx = upsample_taps(w);

  const auto x = input.data();
  std::vector<Real> out(planes * ho * wo);
  for (std::size_t p = 0; p < planes; ++p) {
    const Real* in = x.data() + p * h * w;
    Real* o = out.data() + p * ho * wo;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      const Real* r0 = in + ty[oy].i0 * w;
      const Real* r1 = in + ty[oy].i1 * w;
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const Tap& c = tx[ox];
        // Lerp form keeps constant inputs exact.
        const Real top = r0[c.i0] + c.t * (r0[c.i1] - r0[c.i0]);
        const Real bot = r1[c.i0] + c.t * (r1[c.i1] - r1[c.i0]);
        o[oy * wo + ox] = top + ty[oy].t * (bot - top);
      }
    }
  }
  Shape out_shape = s;
  out_shape[s.size() - 2] = ho;
  out_shape[s.size() - 1] = wo;
  return make_result(std::move(out_shape), std::move(out), "bilinear_upsample_x2", {&input},
                     [planes, h, w, ty, tx](Node& self) {
                       std::vector<Real>& g = self.inputs[0]->ensure_grad();
                       const std::size_t ho = 2 * h;
                       const std::size_t wo = 2 * w;
                       for (std::size_t p = 0; p < planes; ++p) {
                         Real* gi = g.data() + p * h * w;
                         const Real* go = self.grad.data() + p * ho * wo;
                         for (std::size_t oy = 0; oy < ho; ++oy) {
                           const Real wy1 = ty[oy].t;
                           const Real wy0 = 1.0 - wy1;
                           Real* r0 = gi + ty[oy].i0 * w;
                           Real* r1 = gi + ty[oy].i1 * w;
                           for (std::size_t ox = 0; ox < wo; ++ox) {
                             const Tap& c = tx[ox];
                             const Real v = go[oy * wo + ox];
                             const Real wx1 = c.t;
                             const Real wx0 = 1.0 - wx1;
                             r0[c.i0] += wy0 * wx0 * v;
                             r0[c.i1] += wy0 * wx1 * v;
                             r1[c.i0] += wy1 * wx0 * v;
                             r1[c.i1] += wy1 * wx1 * v;
                           }
                         }
                       }
                     });
}

Tensor reduce(const Tensor& input, Reduction kind) {
  require_defined(input, "reduce", "input");
  if (input.numel() == 0) throw ArgumentError("reduce: empty tensor");
  const auto x = input.data();
  Real acc = 0.0;
  switch (kind) {
    case Reduction::kSum:
    case Reduction::kMean:
      for (Real v : x) acc += v;
      if (kind == Reduction::kMean) acc /= static_cast<Real>(x.size());
      break;
    case Reduction::kL1:
      for (Real v : x) acc += std::abs(v);
      break;
    case Reduction::kL2Squared:
      for (Real v : x) acc += v * v;
      break;
  }
  return make_result(Shape{1}, std::vector<Real>{acc}, "reduce", {&input}, [kind](Node& self) {
    Node& in = *self.inputs[0];
    std::vector<Real>& g = in.ensure_grad();
    const Real up = self.grad[0];
    const auto n = static_cast<Real>(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      const Real v = in.data[i];
      switch (kind) {
        case Reduction::kSum:
          g[i] += up;
          break;
        case Reduction::kMean:
          g[i] += up / n;
          break;
        case Reduction::kL1:
          g[i] += v > 0.0 ? up : (v < 0.0 ? -up : 0.0);
          break;
        case Reduction::kL2Squared:
          g[i] += 2.0 * v * up;
          break;
      }
    }
  });
}

std::pair<Tensor, Tensor> spatial_gradients(const Tensor& input, bool allow_single) {
  require_defined(input, "spatial_gradients", "input");
  const Shape& s = input.shape();
  if (s.size() < 2) throw ShapeError("spatial_gradients: need rank >= 2, got " + shape_string(s));
  const std::size_t h = s[s.size() - 2];
  const std::size_t w = s[s.size() - 1];
  if (!allow_single && (h < 2 || w < 2)) {
    throw ShapeError("spatial_gradients: H and W must be >= 2, got " + shape_string(s));
  }
  const std::size_t planes = input.numel() / (h * w);
  const auto x = input.data();
  std::vector<Real> dh(x.size(), 0.0);
  std::vector<Real> dv(x.size(), 0.0);
  for (std::size_t p = 0; p < planes; ++p) {
    const Real* m = x.data() + p * h * w;
    Real* oh = dh.data() + p * h * w;
    Real* ov = dv.data() + p * h * w;
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j + 1 < w; ++j) oh[i * w + j] = m[i * w + j + 1] - m[i * w + j];
    }
    for (std::size_t i = 0; i + 1 < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) ov[i * w + j] = m[(i + 1) * w + j] - m[i * w + j];
    }
  }
  Tensor horizontal = make_result(s, std::move(dh), "spatial_gradients", {&input},
                                  [planes, h, w](Node& self) {
                                    std::vector<Real>& g = self.inputs[0]->ensure_grad();
                                    for (std::size_t p = 0; p < planes; ++p) {
                                      Real* gi = g.data() + p * h * w;
                                      const Real* go = self.grad.data() + p * h * w;
                                      for (std::size_t i = 0; i < h; ++i) {
                                        for (std::size_t j = 0; j + 1 < w; ++j) {
                                          gi[i * w + j + 1] += go[i * w + j];
                                          gi[i * w + j] -= go[i * w + j];
                                        }
                                      }
                                    }
                                  });
  Tensor vertical = make_result(s, std::move(dv), "spatial_gradients", {&input},
                                [planes, h, w](Node& self) {
                                  std::vector<Real>& g = self.inputs[0]->ensure_grad();
                                  for (std::size_t p = 0; p < planes; ++p) {
                                    Real* gi = g.data() + p * h * w;
                                    const Real* go = self.grad.data() + p * h * w;
                                    for (std::size_t i = 0; i + 1 < h; ++i) {
                                      for (std::size_t j = 0; j < w; ++j) {
                                        gi[(i + 1) * w + j] += go[i * w + j];
                                        gi[i * w + j] -= go[i * w + j];
                                      }
                                    }
                                  }
                                });
  return {std::move(horizontal), std::move(vertical)};
}

Tensor stack(std::span<const Tensor> items) {
  if (items.empty()) throw ArgumentError("stack: no tensors");
  const Shape& item_shape = items.front().shape();
  Shape out_shape{items.size()};
  out_shape.insert(out_shape.end(), item_shape.begin(), item_shape.end());
  std::vector<Real> out;
  out.reserve(shape_numel(out_shape));
  for (const Tensor& t : items) {
    if (t.shape() != item_shape) {
      throw ShapeError("stack: shape mismatch " + shape_string(t.shape()) + " vs " +
                       shape_string(item_shape));
    }
    out.insert(out.end(), t.data().begin(), t.data().end());
  }
  return Tensor(std::move(out_shape), std::move(out));
}

Tensor batch_item(const Tensor& batch, std::size_t index) {
  require_defined(batch, "batch_item", "batch");
  if (batch.rank() < 2) throw ShapeError("batch_item: need a batched tensor");
  if (index >= batch.dim(0)) {
    throw ArgumentError("batch_item: index " + std::to_string(index) + " out of range");
  }
  Shape item_shape(batch.shape().begin() + 1, batch.shape().end());
  const std::size_t n = shape_numel(item_shape);
  const auto src = batch.data().subspan(index * n, n);
  return Tensor(std::move(item_shape), std::vector<Real>(src.begin(), src.end()));
}

}  // namespace latent_depth
