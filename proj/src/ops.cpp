#include "effnet/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

#include "effnet/errors.hpp"

namespace effnet {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;

// Gradient destination of input i, or an empty span when that input does not
// take gradients.
std::span<double> input_grad(detail::Node& node, std::size_t i) {
  auto& in = node.inputs[i];
  if (!in->requires_grad) return {};
  return in->grad_buffer();
}

// Same, for a backward pass that writes every element: a freshly allocated
// buffer is returned uninitialized with `fresh` set, saving the zero fill.
std::span<double> input_grad_for_write(detail::Node& node, std::size_t i, bool& fresh) {
  auto& in = node.inputs[i];
  fresh = false;
  if (!in->requires_grad) return {};
  return in->grad_buffer_for_write(fresh);
}

// Fixed-order blocked reductions: eight interleaved partial sums combined
// pairwise, so results are independent of pointer alignment.
double dot(const double* a, const double* b, std::size_t n) {
  double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t k = 0; k < 8; ++k) acc[k] += a[i + k] * b[i + k];
  }
  for (std::size_t k = 0; i < n; ++i, ++k) acc[k] += a[i] * b[i];
  return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
}

double total(const double* a, std::size_t n) {
  double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t k = 0; k < 8; ++k) acc[k] += a[i + k];
  }
  for (std::size_t k = 0; i < n; ++i, ++k) acc[k] += a[i];
  return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
}

const double* input_data(detail::Node& node, std::size_t i) {
  return node.inputs[i]->data.data();
}

void require_rank(const Tensor& t, std::size_t rank, const char* op,
                  const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " +
                     std::to_string(rank) + ", got " + shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " differ");
  }
}

struct ConvGeometry {
  std::size_t n, cin, h, w, cout, kh, kw, ho, wo;
  int stride, pad, groups;
  std::size_t cin_g() const { return cin / groups; }
  std::size_t cout_g() const { return cout / groups; }
  std::size_t plane_in() const { return h * w; }
  std::size_t plane_out() const { return ho * wo; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
  bool depthwise() const {
    return groups > 1 && static_cast<std::size_t>(groups) == cin && cout == cin;
  }
};

// Valid output-column range [lo, hi) for kernel tap kx.
inline void tap_range(std::size_t out_len, std::size_t in_len, int stride, int pad,
                      std::size_t k, std::size_t& lo, std::size_t& hi) {
  // ix = ox*stride - pad + k must lie in [0, in_len).
  long off = static_cast<long>(k) - pad;
  long l = off >= 0 ? 0 : (-off + stride - 1) / stride;
  long last = static_cast<long>(in_len) - 1 - off;
  long h = last < 0 ? 0 : last / stride + 1;
  h = std::min<long>(h, static_cast<long>(out_len));
  lo = static_cast<std::size_t>(std::max<long>(l, 0));
  hi = static_cast<std::size_t>(std::max<long>(h, static_cast<long>(lo)));
}

// col[(ci*kh + ky)*kw + kx][oy*wo + ox] = in[ci][iy][ix] (zero outside).
void im2col(const double* in, const ConvGeometry& g, std::size_t channels,
            double* col) {
  const std::size_t p = g.plane_out();
  for (std::size_t ci = 0; ci < channels; ++ci) {
    const double* plane = in + ci * g.plane_in();
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* row = col + ((ci * g.kh + ky) * g.kw + kx) * p;
        std::size_t lo, hi;
        tap_range(g.wo, g.w, g.stride, g.pad, kx, lo, hi);
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          double* dst = row + oy * g.wo;
          long iy = static_cast<long>(oy) * g.stride - g.pad + static_cast<long>(ky);
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.wo, 0.0);
            continue;
          }
          const double* src = plane + iy * g.w;
          std::fill(dst, dst + lo, 0.0);
          const long shift = static_cast<long>(kx) - g.pad;
          for (std::size_t ox = lo; ox < hi; ++ox) {
            dst[ox] = src[static_cast<long>(ox) * g.stride + shift];
          }
          std::fill(dst + hi, dst + g.wo, 0.0);
        }
      }
    }
  }
}

void col2im_add(const double* col, const ConvGeometry& g, std::size_t channels,
                double* grad_in) {
  const std::size_t p = g.plane_out();
  for (std::size_t ci = 0; ci < channels; ++ci) {
    double* plane = grad_in + ci * g.plane_in();
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = col + ((ci * g.kh + ky) * g.kw + kx) * p;
        std::size_t lo, hi;
        tap_range(g.wo, g.w, g.stride, g.pad, kx, lo, hi);
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          long iy = static_cast<long>(oy) * g.stride - g.pad + static_cast<long>(ky);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          double* dst = plane + iy * g.w;
          const double* src = row + oy * g.wo;
          const long shift = static_cast<long>(kx) - g.pad;
          for (std::size_t ox = lo; ox < hi; ++ox) {
            dst[static_cast<long>(ox) * g.stride + shift] += src[ox];
          }
        }
      }
    }
  }
}

// Depthwise convolution works on one zero-padded channel plane at a time,
// split into stride x stride phase planes: padded (y, x) lives in phase
// (y % s, x % s) at (y / s, x / s). Output rows are computed "wide", i.e.
// `cols` entries per row instead of wo, so that each kernel tap is a single
// contiguous axpy over ho * cols values; the extra columns are discarded.
struct PhasePlanes {
  std::size_t s, rows, cols, stride_plane;
  std::vector<double> buf;

  explicit PhasePlanes(const ConvGeometry& g)
      : s(static_cast<std::size_t>(g.stride)),
        rows((g.h + 2 * g.pad + s - 1) / s),
        cols((g.w + 2 * g.pad + s - 1) / s),
        // one slack row: wide reads run past the last row by < cols values
        stride_plane((rows + 1) * cols),
        buf(s * s * stride_plane, 0.0) {}

  double* phase(std::size_t a, std::size_t b) { return buf.data() + (a * s + b) * stride_plane; }

  double* tap(std::size_t ky, std::size_t kx) {
    return phase(ky % s, kx % s) + (ky / s) * cols + kx / s;
  }

  void load(const double* plane, const ConvGeometry& g) {
    const std::size_t p = static_cast<std::size_t>(g.pad);
    for (std::size_t y = 0; y < g.h; ++y) {
      const std::size_t py = y + p;
      const double* src = plane + y * g.w;
      for (std::size_t b = 0; b < s; ++b) {
        double* dst = phase(py % s, b) + (py / s) * cols;
        // padded columns x + p with (x + p) % s == b
        std::size_t x = (b + s - p % s) % s;
        for (std::size_t q = (x + p) / s; x < g.w; x += s, ++q) dst[q] = src[x];
      }
    }
  }

  void store_add(double* plane, const ConvGeometry& g) {
    const std::size_t p = static_cast<std::size_t>(g.pad);
    for (std::size_t y = 0; y < g.h; ++y) {
      const std::size_t py = y + p;
      double* dst = plane + y * g.w;
      for (std::size_t b = 0; b < s; ++b) {
        const double* src = phase(py % s, b) + (py / s) * cols;
        std::size_t x = (b + s - p % s) % s;
        for (std::size_t q = (x + p) / s; x < g.w; x += s, ++q) dst[x] += src[q];
      }
    }
  }
};

void depthwise_forward(const double* in, const double* k, const ConvGeometry& g,
                       double* out) {
  PhasePlanes pp(g);
  const std::size_t len = g.ho * pp.cols;
  std::vector<double> wide(len);
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t c = 0; c < g.cin; ++c) {
      pp.load(in + (n * g.cin + c) * g.plane_in(), g);
      const double* kern = k + c * g.kh * g.kw;
      std::fill(wide.begin(), wide.end(), 0.0);
      double* acc = wide.data();
      for (std::size_t ky = 0; ky < g.kh; ++ky) {
        for (std::size_t kx = 0; kx < g.kw; ++kx) {
          const double wv = kern[ky * g.kw + kx];
          const double* src = pp.tap(ky, kx);
          for (std::size_t j = 0; j < len; ++j) acc[j] += wv * src[j];
        }
      }
      double* dst = out + (n * g.cout + c) * g.plane_out();
      for (std::size_t oy = 0; oy < g.ho; ++oy) {
        std::copy_n(acc + oy * pp.cols, g.wo, dst + oy * g.wo);
      }
    }
  }
}

void depthwise_backward(const double* in, const double* k, const double* gout,
                        const ConvGeometry& g, std::span<double> gin,
                        std::span<double> gk) {
  PhasePlanes pp(g);
  PhasePlanes gp(g);
  const std::size_t len = g.ho * pp.cols;
  std::vector<double> gwide(len, 0.0);  // columns >= wo stay zero
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t c = 0; c < g.cin; ++c) {
      const std::size_t in_off = (n * g.cin + c) * g.plane_in();
      const double* kern = k + c * g.kh * g.kw;
      const double* gplane = gout + (n * g.cout + c) * g.plane_out();
      for (std::size_t oy = 0; oy < g.ho; ++oy) {
        std::copy_n(gplane + oy * g.wo, g.wo, gwide.data() + oy * pp.cols);
      }
      if (!gk.empty()) {
        pp.load(in + in_off, g);
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
          for (std::size_t kx = 0; kx < g.kw; ++kx) {
            gk[c * g.kh * g.kw + ky * g.kw + kx] += dot(gwide.data(), pp.tap(ky, kx), len);
          }
        }
      }
      if (!gin.empty()) {
        std::fill(gp.buf.begin(), gp.buf.end(), 0.0);
        const double* gw = gwide.data();
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
          for (std::size_t kx = 0; kx < g.kw; ++kx) {
            const double wv = kern[ky * g.kw + kx];
            double* dst = gp.tap(ky, kx);
            for (std::size_t j = 0; j < len; ++j) dst[j] += wv * gw[j];
          }
        }
        gp.store_add(gin.data() + in_off, g);
      }
    }
  }
}

}  // namespace

std::size_t conv_output_size(std::size_t in, std::size_t kernel, int stride,
                             int padding) {
  const long span = static_cast<long>(in) + 2L * padding - static_cast<long>(kernel);
  if (span < 0) return 0;
  return static_cast<std::size_t>(span / stride) + 1;
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, Conv2dParams params) {
  if (params.stride <= 0) throw ConfigError("conv2d: stride must be positive");
  if (params.groups <= 0) throw ConfigError("conv2d: groups must be positive");
  if (params.padding < 0) throw ConfigError("conv2d: padding must be non-negative");
  require_rank(input, 4, "conv2d", "input");
  require_rank(kernel, 4, "conv2d", "kernel");
  ConvGeometry g{};
  g.n = input.dim(0);
  g.cin = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.cout = kernel.dim(0);
  g.kh = kernel.dim(2);
  g.kw = kernel.dim(3);
  g.stride = params.stride;
  g.pad = params.padding;
  g.groups = params.groups;
  const auto groups = static_cast<std::size_t>(params.groups);
  if (g.cin % groups != 0) {
    throw ShapeError("conv2d: input channels (dim 1) = " + std::to_string(g.cin) +
                     " not divisible by groups = " + std::to_string(groups));
  }
  if (g.cout % groups != 0) {
    throw ShapeError("conv2d: kernel output channels (dim 0) = " +
                     std::to_string(g.cout) + " not divisible by groups = " +
                     std::to_string(groups));
  }
  if (kernel.dim(1) != g.cin / groups) {
    throw ShapeError("conv2d: kernel dim 1 = " + std::to_string(kernel.dim(1)) +
                     ", expected input channels / groups = " +
                     std::to_string(g.cin / groups));
  }
  g.ho = conv_output_size(g.h, g.kh, g.stride, g.pad);
  g.wo = conv_output_size(g.w, g.kw, g.stride, g.pad);
  if (g.ho == 0) {
    throw ShapeError("conv2d: kernel height (dim 2) = " + std::to_string(g.kh) +
                     " exceeds padded input height " + std::to_string(g.h + 2 * g.pad));
  }
  if (g.wo == 0) {
    throw ShapeError("conv2d: kernel width (dim 3) = " + std::to_string(g.kw) +
                     " exceeds padded input width " + std::to_string(g.w + 2 * g.pad));
  }

  std::vector<double> out(g.n * g.cout * g.plane_out(), 0.0);
  const double* in = input.data().data();
  const double* k = kernel.data().data();

  if (g.depthwise()) {
    depthwise_forward(in, k, g, out.data());
    return detail::make_result(
        "conv2d.depthwise", {g.n, g.cout, g.ho, g.wo}, std::move(out),
        {input, kernel},
        [g](const detail::TensorImpl&, std::span<const double> gout,
            detail::Node& self) {
          auto gin = input_grad(self, 0);
          auto gk = input_grad(self, 1);
          depthwise_backward(input_data(self, 0), input_data(self, 1), gout.data(), g,
                             gin, gk);
        });
  }

  const std::size_t kdim = g.cin_g() * g.kh * g.kw;
  const std::size_t p = g.plane_out();
  std::vector<double> col(g.pointwise() ? 0 : kdim * p);
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const double* src = in + (n * g.cin + gi * g.cin_g()) * g.plane_in();
      const double* colp = src;
      if (!g.pointwise()) {
        im2col(src, g, g.cin_g(), col.data());
        colp = col.data();
      }
      MapConstMat wmat(k + gi * g.cout_g() * kdim, g.cout_g(), kdim);
      MapConstMat cmat(colp, kdim, p);
      MapMat omat(out.data() + (n * g.cout + gi * g.cout_g()) * p, g.cout_g(), p);
      omat.noalias() = wmat * cmat;
    }
  }

  return detail::make_result(
      "conv2d", {g.n, g.cout, g.ho, g.wo}, std::move(out), {input, kernel},
      [g](const detail::TensorImpl&, std::span<const double> gout, detail::Node& self) {
        auto gin = input_grad(self, 0);
        auto gk = input_grad(self, 1);
        const double* in = input_data(self, 0);
        const double* k = input_data(self, 1);
        const std::size_t groups = static_cast<std::size_t>(g.groups);
        const std::size_t kdim = g.cin_g() * g.kh * g.kw;
        const std::size_t p = g.plane_out();
        std::vector<double> col(g.pointwise() ? 0 : kdim * p);
        std::vector<double> dcol(g.pointwise() || gin.empty() ? 0 : kdim * p);
        for (std::size_t n = 0; n < g.n; ++n) {
          for (std::size_t gi = 0; gi < groups; ++gi) {
            const std::size_t in_off = (n * g.cin + gi * g.cin_g()) * g.plane_in();
            MapConstMat gmat(gout.data() + (n * g.cout + gi * g.cout_g()) * p,
                             g.cout_g(), p);
            MapConstMat wmat(k + gi * g.cout_g() * kdim, g.cout_g(), kdim);
            if (!gk.empty()) {
              const double* colp = in + in_off;
              if (!g.pointwise()) {
                im2col(in + in_off, g, g.cin_g(), col.data());
                colp = col.data();
              }
              MapConstMat cmat(colp, kdim, p);
              MapMat gkmat(gk.data() + gi * g.cout_g() * kdim, g.cout_g(), kdim);
              gkmat.noalias() += gmat * cmat.transpose();
            }
            if (!gin.empty()) {
              if (g.pointwise()) {
                MapMat gimat(gin.data() + in_off, kdim, p);
                gimat.noalias() += wmat.transpose() * gmat;
              } else {
                MapMat dmat(dcol.data(), kdim, p);
                dmat.noalias() = wmat.transpose() * gmat;
                col2im_add(dcol.data(), g, g.cin_g(), gin.data() + in_off);
              }
            }
          }
        }
      });
}

double sigmoid_scalar(double x) {
  if (x >= 0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

namespace {

using AlignedArrayMap = Eigen::Map<Eigen::ArrayXd, Eigen::Aligned64>;

// Vectorized logistic; exp(-x) saturates to +inf for very negative x, which
// yields an exact 0 rather than NaN. Work goes through an aligned scratch
// block: on an arbitrary pointer Eigen peels a scalar head whose length
// depends on the address, and scalar and packet exp differ in the last ulp.
void sigmoid_block(const double* x, double* out, std::size_t n) {
  constexpr std::size_t kChunk = 512;
  alignas(64) double buf[kChunk];
  for (std::size_t i = 0; i < n; i += kChunk) {
    const std::size_t m = std::min(kChunk, n - i);
    std::copy_n(x + i, m, buf);
    AlignedArrayMap a(buf, static_cast<Eigen::Index>(m));
    a = 1.0 / (1.0 + (-a).exp());
    std::copy_n(buf, m, out + i);
  }
}

constexpr std::size_t kBlock = 4096;

}  // namespace

Tensor relu(const Tensor& x) {
  auto src = x.data();
  std::vector<double> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = src[i] > 0.0 ? src[i] : 0.0;
  return detail::make_result(
      "relu", x.shape(), std::move(out), {x},
      [](const detail::TensorImpl&, std::span<const double> g, detail::Node& self) {
        auto dst = input_grad(self, 0);
        const double* in = input_data(self, 0);
        for (std::size_t i = 0; i < g.size(); ++i) {
          dst[i] += in[i] > 0.0 ? g[i] : 0.0;
        }
      });
}

Tensor sigmoid(const Tensor& x) {
  auto src = x.data();
  std::vector<double> out(src.size());
  sigmoid_block(src.data(), out.data(), src.size());
  return detail::make_result(
      "sigmoid", x.shape(), std::move(out), {x},
      [](const detail::TensorImpl& y, std::span<const double> g, detail::Node& self) {
        auto dst = input_grad(self, 0);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double s = y.data[i];
          dst[i] += g[i] * s * (1.0 - s);
        }
      });
}

Tensor silu(const Tensor& x) {
  auto src = x.data();
  std::vector<double> out(src.size());
  sigmoid_block(src.data(), out.data(), src.size());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] *= src[i];
  return detail::make_result(
      "silu", x.shape(), std::move(out), {x},
      [](const detail::TensorImpl&, std::span<const double> g, detail::Node& self) {
        auto dst = input_grad(self, 0);
        const double* in = input_data(self, 0);
        double s[kBlock];
        for (std::size_t base = 0; base < g.size(); base += kBlock) {
          const std::size_t len = std::min(kBlock, g.size() - base);
          sigmoid_block(in + base, s, len);
          for (std::size_t j = 0; j < len; ++j) {
            const std::size_t i = base + j;
            dst[i] += g[i] * s[j] * (1.0 + in[i] * (1.0 - s[j]));
          }
        }
      });
}

Tensor activation(const Tensor& x, Activation kind) {
  switch (kind) {
    case Activation::relu:
      return relu(x);
    case Activation::sigmoid:
      return sigmoid(x);
    case Activation::silu:
      return silu(x);
  }
  throw ConfigError("activation: unknown kind");
}

Tensor reduce_mean_spatial(const Tensor& x) {
  require_rank(x, 4, "reduce_mean_spatial", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (plane == 0) throw ShapeError("reduce_mean_spatial: empty spatial plane");
  auto src = x.data();
  std::vector<double> out(n * c);
  for (std::size_t i = 0; i < n * c; ++i) {
    out[i] = total(src.data() + i * plane, plane) / static_cast<double>(plane);
  }
  return detail::make_result(
      "reduce_mean_spatial", {n, c, 1, 1}, std::move(out), {x},
      [plane](const detail::TensorImpl&, std::span<const double> g,
              detail::Node& self) {
        auto dst = input_grad(self, 0);
        const double inv = 1.0 / static_cast<double>(plane);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double v = g[i] * inv;
          double* p = dst.data() + i * plane;
          for (std::size_t j = 0; j < plane; ++j) p[j] += v;
        }
      });
}

Tensor dense(const Tensor& x, const Tensor& weights, const Tensor& bias) {
  require_rank(x, 2, "dense", "input");
  require_rank(weights, 2, "dense", "weights");
  const std::size_t n = x.dim(0), din = x.dim(1), dout = weights.dim(0);
  if (weights.dim(1) != din) {
    throw ShapeError("dense: input width " + std::to_string(din) +
                     " does not match weights dim 1 = " +
                     std::to_string(weights.dim(1)));
  }
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != dout)) {
    throw ShapeError("dense: bias shape " + shape_str(bias.shape()) + ", expected [" +
                     std::to_string(dout) + "]");
  }
  // Plain loops rather than Eigen: these products are small, and Eigen's
  // coefficient-based path sums in an address-dependent order.
  std::vector<double> out(n * dout, 0.0);
  const double* xp = x.data().data();
  const double* wp = weights.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < dout; ++j) {
      out[i * dout + j] = dot(xp + i * din, wp + j * din, din);
    }
  }
  if (has_bias) {
    auto b = bias.data();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < dout; ++j) out[i * dout + j] += b[j];
    }
  }
  std::vector<Tensor> inputs{x, weights};
  if (has_bias) inputs.push_back(bias);
  return detail::make_result(
      "dense", {n, dout}, std::move(out), std::move(inputs),
      [n, din, dout, has_bias](const detail::TensorImpl&, std::span<const double> g,
                               detail::Node& self) {
        const double* xp = input_data(self, 0);
        const double* wp = input_data(self, 1);
        auto gx = input_grad(self, 0);
        auto gw = input_grad(self, 1);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < dout; ++j) {
            const double gij = g[i * dout + j];
            if (!gx.empty()) {
              double* dst = gx.data() + i * din;
              const double* w = wp + j * din;
              for (std::size_t k = 0; k < din; ++k) dst[k] += gij * w[k];
            }
            if (!gw.empty()) {
              double* dst = gw.data() + j * din;
              const double* xr = xp + i * din;
              for (std::size_t k = 0; k < din; ++k) dst[k] += gij * xr[k];
            }
          }
        }
        if (has_bias) {
          if (auto gb = input_grad(self, 2); !gb.empty()) {
            for (std::size_t i = 0; i < n; ++i) {
              for (std::size_t j = 0; j < dout; ++j) gb[j] += g[i * dout + j];
            }
          }
        }
      });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  return detail::make_result(
      "add", a.shape(), std::move(out), {a, b},
      [](const detail::TensorImpl&, std::span<const double> g, detail::Node& self) {
        for (std::size_t k = 0; k < 2; ++k) {
          bool fresh = false;
          auto dst = input_grad_for_write(self, k, fresh);
          if (fresh) {
            std::copy(g.begin(), g.end(), dst.begin());
          } else {
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
          }
        }
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  return detail::make_result(
      "mul", a.shape(), std::move(out), {a, b},
      [](const detail::TensorImpl&, std::span<const double> g, detail::Node& self) {
        const double* x = input_data(self, 0);
        const double* y = input_data(self, 1);
        if (auto da = input_grad(self, 0); !da.empty()) {
          for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i] * y[i];
        }
        if (auto db = input_grad(self, 1); !db.empty()) {
          for (std::size_t i = 0; i < db.size(); ++i) db[i] += g[i] * x[i];
        }
      });
}

Tensor scale(const Tensor& a, double factor) {
  auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * factor;
  return detail::make_result(
      "scale", a.shape(), std::move(out), {a},
      [factor](const detail::TensorImpl&, std::span<const double> g,
               detail::Node& self) {
        bool fresh = false;
        auto dst = input_grad_for_write(self, 0, fresh);
        if (fresh) {
          for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = g[i] * factor;
        } else {
          for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i] * factor;
        }
      });
}

Tensor sum(const Tensor& x) {
  const double acc = total(x.data().data(), x.numel());
  return detail::make_result(
      "sum", {1}, {acc}, {x},
      [](const detail::TensorImpl&, std::span<const double> g, detail::Node& self) {
        auto dst = input_grad(self, 0);
        for (double& d : dst) d += g[0];
      });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw UsageError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor channel_affine(const Tensor& x, const Tensor& scale_t, const Tensor& shift_t) {
  require_rank(x, 4, "channel_affine", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (scale_t.numel() != c || shift_t.numel() != c) {
    throw ShapeError("channel_affine: scale/shift must have " + std::to_string(c) +
                     " elements (input dim 1)");
  }
  auto src = x.data();
  auto a = scale_t.data(), b = shift_t.data();
  std::vector<double> out(src.size());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (i * c + ch) * plane;
      const double av = a[ch], bv = b[ch];
      for (std::size_t j = 0; j < plane; ++j) out[off + j] = src[off + j] * av + bv;
    }
  }
  return detail::make_result(
      "channel_affine", x.shape(), std::move(out), {x, scale_t, shift_t},
      [n, c, plane](const detail::TensorImpl&, std::span<const double> g,
                    detail::Node& self) {
        const double* in = input_data(self, 0);
        const double* a = input_data(self, 1);
        bool fresh = false;
        auto gx = input_grad_for_write(self, 0, fresh);
        auto ga = input_grad(self, 1);
        auto gb = input_grad(self, 2);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t off = (i * c + ch) * plane;
            const double av = a[ch];
            if (fresh) {
              for (std::size_t j = 0; j < plane; ++j) gx[off + j] = g[off + j] * av;
            } else if (!gx.empty()) {
              for (std::size_t j = 0; j < plane; ++j) gx[off + j] += g[off + j] * av;
            }
            if (!ga.empty()) ga[ch] += dot(g.data() + off, in + off, plane);
            if (!gb.empty()) gb[ch] += total(g.data() + off, plane);
          }
        }
      });
}

Tensor channel_affine_silu(const Tensor& x, const Tensor& scale_t, const Tensor& shift_t) {
  require_rank(x, 4, "channel_affine_silu", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (scale_t.numel() != c || shift_t.numel() != c) {
    throw ShapeError("channel_affine_silu: scale/shift must have " + std::to_string(c) +
                     " elements (input dim 1)");
  }
  auto src = x.data();
  auto a = scale_t.data(), b = shift_t.data();
  std::vector<double> out(src.size());
  // The logistic of the pre-activation is kept for the backward pass.
  auto sig = std::make_shared<std::vector<double>>(src.size());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (i * c + ch) * plane;
      const double av = a[ch], bv = b[ch];
      double* z = out.data() + off;
      for (std::size_t j = 0; j < plane; ++j) z[j] = src[off + j] * av + bv;
    }
  }
  sigmoid_block(out.data(), sig->data(), out.size());
  const double* s = sig->data();
  for (std::size_t j = 0; j < out.size(); ++j) out[j] *= s[j];
  return detail::make_result(
      "channel_affine_silu", x.shape(), std::move(out), {x, scale_t, shift_t},
      [n, c, plane, sig](const detail::TensorImpl&, std::span<const double> g,
                         detail::Node& self) {
        const double* in = input_data(self, 0);
        const double* a = input_data(self, 1);
        const double* b = input_data(self, 2);
        bool fresh = false;
        auto gx = input_grad_for_write(self, 0, fresh);
        auto ga = input_grad(self, 1);
        auto gb = input_grad(self, 2);
        std::vector<double> dz(plane);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t off = (i * c + ch) * plane;
            const double av = a[ch], bv = b[ch];
            const double* s = sig->data() + off;
            for (std::size_t j = 0; j < plane; ++j) {
              const double z = in[off + j] * av + bv;
              dz[j] = g[off + j] * s[j] * (1.0 + z * (1.0 - s[j]));
            }
            if (fresh) {
              for (std::size_t j = 0; j < plane; ++j) gx[off + j] = dz[j] * av;
            } else if (!gx.empty()) {
              for (std::size_t j = 0; j < plane; ++j) gx[off + j] += dz[j] * av;
            }
            if (!ga.empty()) ga[ch] += dot(dz.data(), in + off, plane);
            if (!gb.empty()) gb[ch] += total(dz.data(), plane);
          }
        }
      });
}

Tensor channel_scale(const Tensor& x, const Tensor& s) {
  require_rank(x, 4, "channel_scale", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (s.numel() != n * c || s.dim(0) != n) {
    throw ShapeError("channel_scale: weights shape " + shape_str(s.shape()) +
                     " does not match [N,C] = [" + std::to_string(n) + "," +
                     std::to_string(c) + "]");
  }
  auto src = x.data();
  auto w = s.data();
  std::vector<double> out(src.size());
  for (std::size_t i = 0; i < n * c; ++i) {
    const double wv = w[i];
    for (std::size_t j = 0; j < plane; ++j) out[i * plane + j] = src[i * plane + j] * wv;
  }
  return detail::make_result(
      "channel_scale", x.shape(), std::move(out), {x, s},
      [n, c, plane](const detail::TensorImpl&, std::span<const double> g,
                    detail::Node& self) {
        const double* in = input_data(self, 0);
        const double* w = input_data(self, 1);
        bool fresh = false;
        auto gx = input_grad_for_write(self, 0, fresh);
        auto gs = input_grad(self, 1);
        for (std::size_t i = 0; i < n * c; ++i) {
          const std::size_t off = i * plane;
          if (fresh) {
            for (std::size_t j = 0; j < plane; ++j) gx[off + j] = g[off + j] * w[i];
          } else if (!gx.empty()) {
            for (std::size_t j = 0; j < plane; ++j) gx[off + j] += g[off + j] * w[i];
          }
          if (!gs.empty()) gs[i] += dot(g.data() + off, in + off, plane);
        }
      });
}

Tensor concat_features(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw UsageError("concat_features: no inputs");
  const std::size_t n = parts.front().dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_features", "part");
    if (p.dim(0) != n) {
      throw ShapeError("concat_features: batch size (dim 0) mismatch, " +
                       std::to_string(p.dim(0)) + " vs " + std::to_string(n));
    }
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  std::vector<double> out(n * total);
  std::size_t col = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto src = parts[k].data();
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(src.data() + i * widths[k], widths[k], out.data() + i * total + col);
    }
    col += widths[k];
  }
  return detail::make_result(
      "concat_features", {n, total}, std::move(out), parts,
      [n, total, widths](const detail::TensorImpl&, std::span<const double> g,
                         detail::Node& self) {
        std::size_t col = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
          if (auto dst = input_grad(self, k); !dst.empty()) {
            for (std::size_t i = 0; i < n; ++i) {
              for (std::size_t j = 0; j < widths[k]; ++j) {
                dst[i * widths[k] + j] += g[i * total + col + j];
              }
            }
          }
          col += widths[k];
        }
      });
}

Tensor bce_with_logits(const Tensor& logits, std::span<const double> targets) {
  const std::size_t n = logits.numel();
  if (n == 0) throw UsageError("bce_with_logits: empty batch");
  if (targets.size() != n) {
    throw ShapeError("bce_with_logits: " + std::to_string(n) + " logits but " +
                     std::to_string(targets.size()) + " targets");
  }
  auto z = logits.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    acc += std::max(z[i], 0.0) - z[i] * targets[i] + std::log1p(std::exp(-std::abs(z[i])));
  }
  std::vector<double> t(targets.begin(), targets.end());
  return detail::make_result(
      "bce_with_logits", {1}, {acc / static_cast<double>(n)}, {logits},
      [t = std::move(t)](const detail::TensorImpl&, std::span<const double> g,
                         detail::Node& self) {
        auto dst = input_grad(self, 0);
        const double* z = input_data(self, 0);
        const double inv = g[0] / static_cast<double>(t.size());
        for (std::size_t i = 0; i < t.size(); ++i) {
          dst[i] += (sigmoid_scalar(z[i]) - t[i]) * inv;
        }
      });
}

}  // namespace effnet
