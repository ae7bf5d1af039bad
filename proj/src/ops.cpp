// Copyright 2026 The usdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "usdiff/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "blas.hpp"

namespace usdiff {

namespace {

template <typename T>
using NodeT = detail::Node<T>;

void require(bool ok, const std::string& what)
{
    if (!ok) {
        throw ContractError(what);
    }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op)
{
    require(a.defined() && b.defined(), std::string(op) + ": undefined operand");
    require(a.shape() == b.shape(),
            std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

template <typename T>
void require_nchw(const Tensor<T>& x, const char* op)
{
    require(x.defined() && x.rank() == 4, std::string(op) + ": expected [N,C,H,W], got " +
                                              (x.defined() ? to_string(x.shape()) : std::string("undefined")));
}

// Parent i of a node, or nullptr when it does not take gradient.
template <typename T>
NodeT<T>* grad_parent(NodeT<T>& self, size_t i)
{
    NodeT<T>* p = self.parents[i].get();
    return p->requires_grad ? p : nullptr;
}

// Elementwise unary op with derivative computed from (input, output).
template <typename T, typename F, typename D>
Tensor<T> unary(const Tensor<T>& a, const char* name, F f, D dfdx)
{
    require(a.defined(), std::string(name) + ": undefined operand");
    const auto& x = a.values();
    std::vector<T> out(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        out[i] = f(x[i]);
    }
    return Tensor<T>::make_result(a.shape(), std::move(out), name, {a}, [dfdx](NodeT<T>& self) {
        NodeT<T>* p = grad_parent(self, 0);
        if (!p) {
            return;
        }
        auto& g = p->grad_buffer();
        for (size_t i = 0; i < g.size(); ++i) {
            g[i] += self.grad[i] * dfdx(p->value[i], self.value[i]);
        }
    });
}

// exp(-x) may overflow to inf for very negative x, which still yields 0.
template <typename T>
T sigmoid_scalar(T x)
{
    return T(1) / (T(1) + std::exp(-x));
}

} // namespace

// ---------------------------------------------------------------------------
// Elementwise binary

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b)
{
    require_same_shape(a, b, "add");
    std::vector<T> out(a.values());
    const auto& bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) {
        out[i] += bv[i];
    }
    return Tensor<T>::make_result(a.shape(), std::move(out), "add", {a, b}, [](NodeT<T>& self) {
        for (size_t k = 0; k < 2; ++k) {
            if (NodeT<T>* p = grad_parent(self, k)) {
                auto& g = p->grad_buffer();
                for (size_t i = 0; i < g.size(); ++i) {
                    g[i] += self.grad[i];
                }
            }
        }
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b)
{
    require_same_shape(a, b, "sub");
    std::vector<T> out(a.values());
    const auto& bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) {
        out[i] -= bv[i];
    }
    return Tensor<T>::make_result(a.shape(), std::move(out), "sub", {a, b}, [](NodeT<T>& self) {
        if (NodeT<T>* p = grad_parent(self, 0)) {
            auto& g = p->grad_buffer();
            for (size_t i = 0; i < g.size(); ++i) {
                g[i] += self.grad[i];
            }
        }
        if (NodeT<T>* p = grad_parent(self, 1)) {
            auto& g = p->grad_buffer();
            for (size_t i = 0; i < g.size(); ++i) {
                g[i] -= self.grad[i];
            }
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b)
{
    require_same_shape(a, b, "mul");
    std::vector<T> out(a.values());
    const auto& bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) {
        out[i] *= bv[i];
    }
    return Tensor<T>::make_result(a.shape(), std::move(out), "mul", {a, b}, [](NodeT<T>& self) {
        NodeT<T>* pa = self.parents[0].get();
        NodeT<T>* pb = self.parents[1].get();
        if (pa->requires_grad) {
            auto& g = pa->grad_buffer();
            for (size_t i = 0; i < g.size(); ++i) {
                g[i] += self.grad[i] * pb->value[i];
            }
        }
        if (pb->requires_grad) {
            auto& g = pb->grad_buffer();
            for (size_t i = 0; i < g.size(); ++i) {
                g[i] += self.grad[i] * pa->value[i];
            }
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s)
{
    return affine(a, s, T(0));
}

template <typename T>
Tensor<T> affine(const Tensor<T>& a, T s, T c)
{
    return unary(
        a, "affine", [s, c](T x) { return s * x + c; }, [s](T, T) { return s; });
}

// ---------------------------------------------------------------------------
// Elementwise unary

template <typename T>
Tensor<T> silu(const Tensor<T>& a)
{
    return unary(
        a, "silu", [](T x) { return x * sigmoid_scalar(x); },
        [](T x, T) {
            const T s = sigmoid_scalar(x);
            return s * (T(1) + x * (T(1) - s));
        });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a)
{
    return unary(
        a, "sigmoid", [](T x) { return sigmoid_scalar(x); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a)
{
    return unary(
        a, "tanh", [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a)
{
    return unary(
        a, "square", [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Tensor<T> sqrt_eps(const Tensor<T>& a, T eps)
{
    require(eps > T(0), "sqrt_eps: eps must be positive");
    for (T v : a.values()) {
        require(v + eps > T(0), "sqrt_eps: argument below -eps");
    }
    return unary(
        a, "sqrt_eps", [eps](T x) { return std::sqrt(x + eps); }, [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi)
{
    require(lo <= hi, "clamp: lo > hi");
    return unary(
        a, "clamp", [lo, hi](T x) { return std::clamp(x, lo, hi); },
        [lo, hi](T x, T) { return (x > lo && x < hi) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Normalization

template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, int groups, T eps)
{
    require_nchw(x, "group_norm");
    const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    require(groups >= 1 && c % groups == 0,
            "group_norm: group count " + std::to_string(groups) + " does not divide " + std::to_string(c));
    require(gamma.defined() && beta.defined() && gamma.shape() == Shape{c} && beta.shape() == Shape{c},
            "group_norm: affine parameters must have shape [C]");
    const int64_t cpg = c / groups;
    const int64_t group_size = cpg * hw;

    const auto& xv = x.values();
    const auto& gv = gamma.values();
    const auto& bv = beta.values();
    std::vector<T> xhat(xv.size());
    std::vector<T> inv_std(static_cast<size_t>(n * groups));
    std::vector<T> out(xv.size());
    for (int64_t s = 0; s < n; ++s) {
        for (int64_t g = 0; g < groups; ++g) {
            const int64_t base = (s * c + g * cpg) * hw;
            T mu = 0;
            for (int64_t i = 0; i < group_size; ++i) {
                mu += xv[base + i];
            }
            mu /= static_cast<T>(group_size);
            T var = 0;
            for (int64_t i = 0; i < group_size; ++i) {
                const T d = xv[base + i] - mu;
                var += d * d;
            }
            var /= static_cast<T>(group_size);
            const T istd = T(1) / std::sqrt(var + eps);
            inv_std[s * groups + g] = istd;
            for (int64_t cc = 0; cc < cpg; ++cc) {
                const int64_t ch = g * cpg + cc;
                for (int64_t i = 0; i < hw; ++i) {
                    const int64_t idx = base + cc * hw + i;
                    xhat[idx] = (xv[idx] - mu) * istd;
                    out[idx] = xhat[idx] * gv[ch] + bv[ch];
                }
            }
        }
    }
    return Tensor<T>::make_result(
        x.shape(), std::move(out), "group_norm", {x, gamma, beta},
        [xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, hw, groups, cpg, group_size](NodeT<T>& self) {
            const auto& dy = self.grad;
            NodeT<T>* px = grad_parent(self, 0);
            NodeT<T>* pg = grad_parent(self, 1);
            NodeT<T>* pb = grad_parent(self, 2);
            const auto& gv = self.parents[1]->value;
            if (pg || pb) {
                auto* dg = pg ? &pg->grad_buffer() : nullptr;
                auto* db = pb ? &pb->grad_buffer() : nullptr;
                for (int64_t s = 0; s < n; ++s) {
                    for (int64_t ch = 0; ch < c; ++ch) {
                        T sg = 0, sb = 0;
                        const int64_t base = (s * c + ch) * hw;
                        for (int64_t i = 0; i < hw; ++i) {
                            sg += dy[base + i] * xhat[base + i];
                            sb += dy[base + i];
                        }
                        if (dg) {
                            (*dg)[ch] += sg;
                        }
                        if (db) {
                            (*db)[ch] += sb;
                        }
                    }
                }
            }
            if (!px) {
                return;
            }
            auto& dx = px->grad_buffer();
            for (int64_t s = 0; s < n; ++s) {
                for (int64_t g = 0; g < groups; ++g) {
                    const int64_t base = (s * c + g * cpg) * hw;
                    T mean_d = 0, mean_dx = 0;
                    for (int64_t cc = 0; cc < cpg; ++cc) {
                        const T gamma_c = gv[g * cpg + cc];
                        for (int64_t i = 0; i < hw; ++i) {
                            const int64_t idx = base + cc * hw + i;
                            const T d = dy[idx] * gamma_c;
                            mean_d += d;
                            mean_dx += d * xhat[idx];
                        }
                    }
                    mean_d /= static_cast<T>(group_size);
                    mean_dx /= static_cast<T>(group_size);
                    const T istd = inv_std[s * groups + g];
                    for (int64_t cc = 0; cc < cpg; ++cc) {
                        const T gamma_c = gv[g * cpg + cc];
                        for (int64_t i = 0; i < hw; ++i) {
                            const int64_t idx = base + cc * hw + i;
                            dx[idx] += istd * (dy[idx] * gamma_c - mean_d - xhat[idx] * mean_dx);
                        }
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Layout

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> parts)
{
    require(!parts.empty(), "concat_channels: no inputs");
    require_nchw(parts[0], "concat_channels");
    const int64_t n = parts[0].dim(0), h = parts[0].dim(2), w = parts[0].dim(3);
    int64_t c_total = 0;
    for (const auto& p : parts) {
        require_nchw(p, "concat_channels");
        require(p.dim(0) == n && p.dim(2) == h && p.dim(3) == w,
                "concat_channels: incompatible shapes " + to_string(parts[0].shape()) + " and " + to_string(p.shape()));
        c_total += p.dim(1);
    }
    const int64_t hw = h * w;
    std::vector<T> out(static_cast<size_t>(n * c_total * hw));
    std::vector<int64_t> offsets;
    int64_t off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        const int64_t c = p.dim(1);
        const auto& v = p.values();
        for (int64_t s = 0; s < n; ++s) {
            std::copy_n(v.begin() + s * c * hw, c * hw, out.begin() + (s * c_total + off) * hw);
        }
        off += c;
    }
    std::vector<Tensor<T>> parents(parts.begin(), parts.end());
    return Tensor<T>::make_result({n, c_total, h, w}, std::move(out), "concat_channels", std::move(parents),
                                  [offsets, n, c_total, hw](NodeT<T>& self) {
                                      for (size_t k = 0; k < self.parents.size(); ++k) {
                                          NodeT<T>* p = grad_parent(self, k);
                                          if (!p) {
                                              continue;
                                          }
                                          const int64_t c = p->shape[1];
                                          auto& g = p->grad_buffer();
                                          for (int64_t s = 0; s < n; ++s) {
                                              for (int64_t i = 0; i < c * hw; ++i) {
                                                  g[s * c * hw + i] += self.grad[(s * c_total + offsets[k]) * hw + i];
                                              }
                                          }
                                      }
                                  });
}

template <typename T>
Tensor<T> concat_batch(std::span<const Tensor<T>> parts)
{
    require(!parts.empty(), "concat_batch: no inputs");
    Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
    int64_t rows = 0;
    std::vector<T> out;
    std::vector<int64_t> offsets;
    for (const auto& p : parts) {
        require(p.defined() && p.rank() >= 1, "concat_batch: operands need a leading dimension");
        require(Shape(p.shape().begin() + 1, p.shape().end()) == tail,
                "concat_batch: incompatible shapes " + to_string(parts[0].shape()) + " and " + to_string(p.shape()));
        offsets.push_back(static_cast<int64_t>(out.size()));
        out.insert(out.end(), p.values().begin(), p.values().end());
        rows += p.dim(0);
    }
    Shape shape{rows};
    shape.insert(shape.end(), tail.begin(), tail.end());
    std::vector<Tensor<T>> parents(parts.begin(), parts.end());
    return Tensor<T>::make_result(std::move(shape), std::move(out), "concat_batch", std::move(parents),
                                  [offsets](NodeT<T>& self) {
                                      for (size_t k = 0; k < self.parents.size(); ++k) {
                                          if (NodeT<T>* p = grad_parent(self, k)) {
                                              auto& g = p->grad_buffer();
                                              for (size_t i = 0; i < g.size(); ++i) {
                                                  g[i] += self.grad[offsets[k] + i];
                                              }
                                          }
                                      }
                                  });
}

template <typename T>
Tensor<T> slice_batch(const Tensor<T>& x, int64_t begin, int64_t count)
{
    require(x.defined() && x.rank() >= 1, "slice_batch: operand needs a leading dimension");
    require(begin >= 0 && count >= 1 && begin + count <= x.dim(0), "slice_batch: range out of bounds");
    const int64_t row = x.numel() / x.dim(0);
    Shape shape = x.shape();
    shape[0] = count;
    std::vector<T> out(x.values().begin() + begin * row, x.values().begin() + (begin + count) * row);
    return Tensor<T>::make_result(std::move(shape), std::move(out), "slice_batch", {x},
                                  [off = begin * row](NodeT<T>& self) {
                                      if (NodeT<T>* p = grad_parent(self, 0)) {
                                          auto& g = p->grad_buffer();
                                          for (size_t i = 0; i < self.grad.size(); ++i) {
                                              g[off + i] += self.grad[i];
                                          }
                                      }
                                  });
}

template <typename T>
Tensor<T> upsample2x(const Tensor<T>& x)
{
    require_nchw(x, "upsample2x");
    const int64_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    const auto& v = x.values();
    std::vector<T> out(static_cast<size_t>(nc * 4 * h * w));
    for (int64_t p = 0; p < nc; ++p) {
        for (int64_t i = 0; i < 2 * h; ++i) {
            for (int64_t j = 0; j < 2 * w; ++j) {
                out[(p * 2 * h + i) * 2 * w + j] = v[(p * h + i / 2) * w + j / 2];
            }
        }
    }
    return Tensor<T>::make_result({x.dim(0), x.dim(1), 2 * h, 2 * w}, std::move(out), "upsample2x", {x},
                                  [nc, h, w](NodeT<T>& self) {
                                      NodeT<T>* px = grad_parent(self, 0);
                                      if (!px) {
                                          return;
                                      }
                                      auto& g = px->grad_buffer();
                                      for (int64_t p = 0; p < nc; ++p) {
                                          for (int64_t i = 0; i < 2 * h; ++i) {
                                              for (int64_t j = 0; j < 2 * w; ++j) {
                                                  g[(p * h + i / 2) * w + j / 2] += self.grad[(p * 2 * h + i) * 2 * w + j];
                                              }
                                          }
                                      }
                                  });
}

template <typename T>
Tensor<T> avgpool2x(const Tensor<T>& x)
{
    require_nchw(x, "avgpool2x");
    const int64_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    require(h % 2 == 0 && w % 2 == 0, "avgpool2x: spatial extents must be even, got " + to_string(x.shape()));
    const int64_t ho = h / 2, wo = w / 2;
    const auto& v = x.values();
    std::vector<T> out(static_cast<size_t>(nc * ho * wo));
    for (int64_t p = 0; p < nc; ++p) {
        for (int64_t i = 0; i < ho; ++i) {
            for (int64_t j = 0; j < wo; ++j) {
                const int64_t b = (p * h + 2 * i) * w + 2 * j;
                out[(p * ho + i) * wo + j] = T(0.25) * (v[b] + v[b + 1] + v[b + w] + v[b + w + 1]);
            }
        }
    }
    return Tensor<T>::make_result({x.dim(0), x.dim(1), ho, wo}, std::move(out), "avgpool2x", {x},
                                  [nc, h, w, ho, wo](NodeT<T>& self) {
                                      NodeT<T>* px = grad_parent(self, 0);
                                      if (!px) {
                                          return;
                                      }
                                      auto& g = px->grad_buffer();
                                      for (int64_t p = 0; p < nc; ++p) {
                                          for (int64_t i = 0; i < ho; ++i) {
                                              for (int64_t j = 0; j < wo; ++j) {
                                                  const T d = T(0.25) * self.grad[(p * ho + i) * wo + j];
                                                  const int64_t b = (p * h + 2 * i) * w + 2 * j;
                                                  g[b] += d;
                                                  g[b + 1] += d;
                                                  g[b + w] += d;
                                                  g[b + w + 1] += d;
                                              }
                                          }
                                      }
                                  });
}

template <typename T>
Tensor<T> pad_replicate(const Tensor<T>& x, int pad)
{
    require_nchw(x, "pad_replicate");
    require(pad >= 0, "pad_replicate: negative padding");
    const int64_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    const int64_t ho = h + 2 * pad, wo = w + 2 * pad;
    const auto& v = x.values();
    std::vector<T> out(static_cast<size_t>(nc * ho * wo));
    auto src = [=](int64_t i, int64_t lim) { return std::clamp<int64_t>(i - pad, 0, lim - 1); };
    for (int64_t p = 0; p < nc; ++p) {
        for (int64_t i = 0; i < ho; ++i) {
            for (int64_t j = 0; j < wo; ++j) {
                out[(p * ho + i) * wo + j] = v[(p * h + src(i, h)) * w + src(j, w)];
            }
        }
    }
    return Tensor<T>::make_result({x.dim(0), x.dim(1), ho, wo}, std::move(out), "pad_replicate", {x},
                                  [nc, h, w, ho, wo, src](NodeT<T>& self) {
                                      NodeT<T>* px = grad_parent(self, 0);
                                      if (!px) {
                                          return;
                                      }
                                      auto& g = px->grad_buffer();
                                      for (int64_t p = 0; p < nc; ++p) {
                                          for (int64_t i = 0; i < ho; ++i) {
                                              for (int64_t j = 0; j < wo; ++j) {
                                                  g[(p * h + src(i, h)) * w + src(j, w)] += self.grad[(p * ho + i) * wo + j];
                                              }
                                          }
                                      }
                                  });
}

// ---------------------------------------------------------------------------
// Dense layers

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias)
{
    require(x.defined() && x.rank() == 2, "linear: input must be [N,in]");
    require(weight.defined() && weight.rank() == 2 && weight.dim(1) == x.dim(1),
            "linear: weight " + (weight.defined() ? to_string(weight.shape()) : std::string("undefined")) +
                " incompatible with input " + to_string(x.shape()));
    const int n = static_cast<int>(x.dim(0));
    const int in = static_cast<int>(x.dim(1));
    const int out_f = static_cast<int>(weight.dim(0));
    const bool has_bias = bias.defined();
    require(!has_bias || bias.shape() == Shape{out_f}, "linear: bias must be [out]");

    std::vector<T> out(static_cast<size_t>(n) * out_f, T(0));
    if (has_bias) {
        for (int s = 0; s < n; ++s) {
            std::copy(bias.values().begin(), bias.values().end(), out.begin() + s * out_f);
        }
    }
    detail::gemm(false, true, n, out_f, in, T(1), x.values().data(), in, weight.values().data(), in, T(1), out.data(),
                 out_f);
    std::vector<Tensor<T>> parents{x, weight};
    if (has_bias) {
        parents.push_back(bias);
    }
    return Tensor<T>::make_result({n, out_f}, std::move(out), "linear", std::move(parents),
                                  [n, in, out_f, has_bias](NodeT<T>& self) {
                                      const T* dy = self.grad.data();
                                      if (NodeT<T>* px = grad_parent(self, 0)) {
                                          detail::gemm(false, false, n, in, out_f, T(1), dy, out_f,
                                                       self.parents[1]->value.data(), in, T(1),
                                                       px->grad_buffer().data(), in);
                                      }
                                      if (NodeT<T>* pw = grad_parent(self, 1)) {
                                          detail::gemm(true, false, out_f, in, n, T(1), dy, out_f,
                                                       self.parents[0]->value.data(), in, T(1),
                                                       pw->grad_buffer().data(), in);
                                      }
                                      if (has_bias) {
                                          if (NodeT<T>* pb = grad_parent(self, 2)) {
                                              auto& g = pb->grad_buffer();
                                              for (int s = 0; s < n; ++s) {
                                                  for (int o = 0; o < out_f; ++o) {
                                                      g[o] += dy[s * out_f + o];
                                                  }
                                              }
                                          }
                                      }
                                  });
}

template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias)
{
    require_nchw(x, "add_channel_bias");
    const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    require(bias.defined() && bias.shape() == Shape{n, c},
            "add_channel_bias: bias must be [N,C] = " + to_string({n, c}));
    std::vector<T> out(x.values());
    const auto& bv = bias.values();
    for (int64_t p = 0; p < n * c; ++p) {
        for (int64_t i = 0; i < hw; ++i) {
            out[p * hw + i] += bv[p];
        }
    }
    return Tensor<T>::make_result(x.shape(), std::move(out), "add_channel_bias", {x, bias},
                                  [n, c, hw](NodeT<T>& self) {
                                      if (NodeT<T>* px = grad_parent(self, 0)) {
                                          auto& g = px->grad_buffer();
                                          for (size_t i = 0; i < g.size(); ++i) {
                                              g[i] += self.grad[i];
                                          }
                                      }
                                      if (NodeT<T>* pb = grad_parent(self, 1)) {
                                          auto& g = pb->grad_buffer();
                                          for (int64_t p = 0; p < n * c; ++p) {
                                              T acc = 0;
                                              for (int64_t i = 0; i < hw; ++i) {
                                                  acc += self.grad[p * hw + i];
                                              }
                                              g[p] += acc;
                                          }
                                      }
                                  });
}

template <typename T>
Tensor<T> mul_per_sample(const Tensor<T>& x, std::span<const T> coeffs)
{
    require(x.defined() && x.rank() >= 1 && static_cast<int64_t>(coeffs.size()) == x.dim(0),
            "mul_per_sample: need one coefficient per sample");
    const int64_t row = x.numel() / x.dim(0);
    std::vector<T> k(coeffs.begin(), coeffs.end());
    std::vector<T> out(x.values());
    for (size_t i = 0; i < out.size(); ++i) {
        out[i] *= k[i / row];
    }
    return Tensor<T>::make_result(x.shape(), std::move(out), "mul_per_sample", {x},
                                  [k = std::move(k), row](NodeT<T>& self) {
                                      if (NodeT<T>* px = grad_parent(self, 0)) {
                                          auto& g = px->grad_buffer();
                                          for (size_t i = 0; i < g.size(); ++i) {
                                              g[i] += self.grad[i] * k[i / row];
                                          }
                                      }
                                  });
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids)
{
    require(table.defined() && table.rank() == 2, "embedding: table must be [K,D]");
    require(!ids.empty(), "embedding: no ids");
    const int64_t k = table.dim(0), d = table.dim(1);
    std::vector<int> rows(ids.begin(), ids.end());
    std::vector<T> out;
    out.reserve(rows.size() * d);
    for (int id : rows) {
        require(id >= 0 && id < k, "embedding: id " + std::to_string(id) + " out of range");
        out.insert(out.end(), table.values().begin() + id * d, table.values().begin() + (id + 1) * d);
    }
    const auto n = static_cast<int64_t>(rows.size());
    return Tensor<T>::make_result({n, d}, std::move(out), "embedding", {table},
                                  [rows = std::move(rows), d](NodeT<T>& self) {
                                      if (NodeT<T>* p = grad_parent(self, 0)) {
                                          auto& g = p->grad_buffer();
                                          for (size_t r = 0; r < rows.size(); ++r) {
                                              for (int64_t j = 0; j < d; ++j) {
                                                  g[rows[r] * d + j] += self.grad[r * d + j];
                                              }
                                          }
                                      }
                                  });
}

// ---------------------------------------------------------------------------
// Convolution (im2col + GEMM)

namespace {

struct ConvGeom {
    int64_t c_in, h, w, kh, kw, stride, pad, h_out, w_out;
    int64_t cols() const { return h_out * w_out; }
    int64_t rows() const { return c_in * kh * kw; }
    // Output columns [lo, hi) whose input column oj * stride - pad + kj is in range.
    std::pair<int64_t, int64_t> valid_cols(int64_t kj) const
    {
        const int64_t off = kj - pad;
        const int64_t lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
        const int64_t hi = std::min(w_out, (w - 1 - off) / stride + 1);
        return {lo, std::max(lo, hi)};
    }
};

// Patch rows for one image: output pixel p gets its receptive field in
// (kh, kw, c) order. `hwc` is scratch for the channel-last copy of the image.
template <typename T>
void im2row(const T* img, const ConvGeom& g, T* col, std::vector<T>& hwc)
{
    const int64_t hw = g.h * g.w;
    hwc.resize(static_cast<size_t>(hw * g.c_in));
    for (int64_t c = 0; c < g.c_in; ++c) {
        for (int64_t i = 0; i < hw; ++i) {
            hwc[i * g.c_in + c] = img[c * hw + i];
        }
    }
    T* dst = col;
    for (int64_t oi = 0; oi < g.h_out; ++oi) {
        for (int64_t oj = 0; oj < g.w_out; ++oj) {
            for (int64_t ki = 0; ki < g.kh; ++ki) {
                const int64_t ii = oi * g.stride - g.pad + ki;
                for (int64_t kj = 0; kj < g.kw; ++kj, dst += g.c_in) {
                    const int64_t jj = oj * g.stride - g.pad + kj;
                    if (ii < 0 || ii >= g.h || jj < 0 || jj >= g.w) {
                        std::fill_n(dst, g.c_in, T(0));
                    } else {
                        std::copy_n(hwc.data() + (ii * g.w + jj) * g.c_in, g.c_in, dst);
                    }
                }
            }
        }
    }
}

// Adjoint of im2row: accumulates patch rows into a [C,H,W] gradient.
template <typename T>
void row2im_add(const T* col, const ConvGeom& g, T* img, std::vector<T>& hwc)
{
    const int64_t hw = g.h * g.w;
    hwc.assign(static_cast<size_t>(hw * g.c_in), T(0));
    const T* src = col;
    for (int64_t oi = 0; oi < g.h_out; ++oi) {
        for (int64_t oj = 0; oj < g.w_out; ++oj) {
            for (int64_t ki = 0; ki < g.kh; ++ki) {
                const int64_t ii = oi * g.stride - g.pad + ki;
                for (int64_t kj = 0; kj < g.kw; ++kj, src += g.c_in) {
                    const int64_t jj = oj * g.stride - g.pad + kj;
                    if (ii < 0 || ii >= g.h || jj < 0 || jj >= g.w) {
                        continue;
                    }
                    T* d = hwc.data() + (ii * g.w + jj) * g.c_in;
                    for (int64_t c = 0; c < g.c_in; ++c) {
                        d[c] += src[c];
                    }
                }
            }
        }
    }
    for (int64_t c = 0; c < g.c_in; ++c) {
        for (int64_t i = 0; i < hw; ++i) {
            img[c * hw + i] += hwc[i * g.c_in + c];
        }
    }
}

// [C_out, C_in, kH, kW] <-> [C_out, kH, kW, C_in]
template <typename T>
std::vector<T> weight_to_rows(const T* w, const ConvGeom& g, int64_t c_out)
{
    std::vector<T> out(static_cast<size_t>(c_out * g.rows()));
    for (int64_t o = 0; o < c_out; ++o) {
        for (int64_t c = 0; c < g.c_in; ++c) {
            for (int64_t k = 0; k < g.kh * g.kw; ++k) {
                out[(o * g.kh * g.kw + k) * g.c_in + c] = w[(o * g.c_in + c) * g.kh * g.kw + k];
            }
        }
    }
    return out;
}

} // namespace

// The whole batch shares one patch matrix so each direction is a single
// GEMM with the pixel count as the long dimension.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, int stride, int pad)
{
    require_nchw(input, "conv2d");
    require(weight.defined() && weight.rank() == 4, "conv2d: weight must be [C_out,C_in,kH,kW]");
    require(stride >= 1, "conv2d: stride must be >= 1");
    require(pad >= 0, "conv2d: pad must be >= 0");
    const int64_t n = input.dim(0);
    ConvGeom g{input.dim(1), input.dim(2), input.dim(3), weight.dim(2), weight.dim(3), stride, pad, 0, 0};
    const int64_t c_out = weight.dim(0);
    require(weight.dim(1) == g.c_in, "conv2d: weight " + to_string(weight.shape()) + " incompatible with input " +
                                         to_string(input.shape()));
    require(g.kh % 2 == 1 && g.kw % 2 == 1, "conv2d: kernel extents must be odd");
    require(g.h + 2 * pad >= g.kh && g.w + 2 * pad >= g.kw, "conv2d: kernel larger than padded input");
    const bool has_bias = bias.defined();
    require(!has_bias || bias.shape() == Shape{c_out}, "conv2d: bias must be [C_out]");
    g.h_out = (g.h + 2 * pad - g.kh) / stride + 1;
    g.w_out = (g.w + 2 * pad - g.kw) / stride + 1;

    const int64_t in_size = g.c_in * g.h * g.w;
    const int64_t cols = g.cols();
    const int64_t rows = g.rows();
    const int64_t ld = n * cols;
    // [N*H'*W', C_in*kH*kW]
    std::vector<T> patches(static_cast<size_t>(ld * rows));
    std::vector<T> scratch;
    const T* x = input.values().data();
    for (int64_t s = 0; s < n; ++s) {
        im2row(x + s * in_size, g, patches.data() + s * cols * rows, scratch);
    }
    const std::vector<T> w_rows = weight_to_rows(weight.values().data(), g, c_out);
    // [N*H'*W', C_out]
    std::vector<T> y(static_cast<size_t>(ld * c_out));
    detail::gemm(false, true, static_cast<int>(ld), static_cast<int>(c_out), static_cast<int>(rows), T(1),
                 patches.data(), static_cast<int>(rows), w_rows.data(), static_cast<int>(rows), T(0), y.data(),
                 static_cast<int>(c_out));
    std::vector<T> out(static_cast<size_t>(n * c_out * cols));
    for (int64_t s = 0; s < n; ++s) {
        for (int64_t o = 0; o < c_out; ++o) {
            const T b = has_bias ? bias.values()[o] : T(0);
            const T* src = y.data() + s * cols * c_out + o;
            T* dst = out.data() + (s * c_out + o) * cols;
            for (int64_t i = 0; i < cols; ++i) {
                dst[i] = src[i * c_out] + b;
            }
        }
    }

    std::vector<Tensor<T>> parents{input, weight};
    if (has_bias) {
        parents.push_back(bias);
    }
    return Tensor<T>::make_result(
        {n, c_out, g.h_out, g.w_out}, std::move(out), "conv2d", std::move(parents),
        [g, n, c_out, in_size, has_bias](NodeT<T>& self) {
            NodeT<T>* px = grad_parent(self, 0);
            NodeT<T>* pw = grad_parent(self, 1);
            NodeT<T>* pb = has_bias ? grad_parent(self, 2) : nullptr;
            const int64_t cols = g.cols();
            const int64_t rows = g.rows();
            const int64_t ld = n * cols;
            // dY as [N*H'*W', C_out].
            std::vector<T> dy(static_cast<size_t>(ld * c_out));
            for (int64_t s = 0; s < n; ++s) {
                for (int64_t o = 0; o < c_out; ++o) {
                    const T* src = self.grad.data() + (s * c_out + o) * cols;
                    T* dst = dy.data() + s * cols * c_out + o;
                    for (int64_t i = 0; i < cols; ++i) {
                        dst[i * c_out] = src[i];
                    }
                }
            }
            if (pb) {
                auto& gb = pb->grad_buffer();
                for (int64_t o = 0; o < c_out; ++o) {
                    T acc = 0;
                    for (int64_t s = 0; s < n; ++s) {
                        const T* src = self.grad.data() + (s * c_out + o) * cols;
                        for (int64_t i = 0; i < cols; ++i) {
                            acc += src[i];
                        }
                    }
                    gb[o] += acc;
                }
            }
            std::vector<T> patches;
            std::vector<T> scratch;
            if (pw) {
                // dW^T [rows, C_out] = patches^T * dY
                patches.resize(static_cast<size_t>(ld * rows));
                const T* x = self.parents[0]->value.data();
                for (int64_t s = 0; s < n; ++s) {
                    im2row(x + s * in_size, g, patches.data() + s * cols * rows, scratch);
                }
                std::vector<T> dwt(static_cast<size_t>(rows * c_out));
                detail::gemm(true, false, static_cast<int>(rows), static_cast<int>(c_out), static_cast<int>(ld), T(1),
                             patches.data(), static_cast<int>(rows), dy.data(), static_cast<int>(c_out), T(0),
                             dwt.data(), static_cast<int>(c_out));
                auto& gw = pw->grad_buffer();
                const int64_t kk = g.kh * g.kw;
                for (int64_t o = 0; o < c_out; ++o) {
                    for (int64_t c = 0; c < g.c_in; ++c) {
                        for (int64_t k = 0; k < kk; ++k) {
                            gw[(o * g.c_in + c) * kk + k] += dwt[(k * g.c_in + c) * c_out + o];
                        }
                    }
                }
            }
            if (px) {
                // dPatches [N*H'*W', rows] = dY * W_rows
                const std::vector<T> w_rows = weight_to_rows(self.parents[1]->value.data(), g, c_out);
                patches.resize(static_cast<size_t>(ld * rows));
                detail::gemm(false, false, static_cast<int>(ld), static_cast<int>(rows), static_cast<int>(c_out), T(1),
                             dy.data(), static_cast<int>(c_out), w_rows.data(), static_cast<int>(rows), T(0),
                             patches.data(), static_cast<int>(rows));
                auto& gx = px->grad_buffer();
                for (int64_t s = 0; s < n; ++s) {
                    row2im_add(patches.data() + s * cols * rows, g, gx.data() + s * in_size, scratch);
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a)
{
    require(a.defined(), "sum: undefined operand");
    T acc = 0;
    for (T v : a.values()) {
        acc += v;
    }
    return Tensor<T>::make_result({}, {acc}, "sum", {a}, [](NodeT<T>& self) {
        if (NodeT<T>* p = grad_parent(self, 0)) {
            for (auto& g : p->grad_buffer()) {
                g += self.grad[0];
            }
        }
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a)
{
    require(a.defined(), "mean: undefined operand");
    return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b)
{
    require_same_shape(a, b, "mse");
    const auto& av = a.values();
    const auto& bv = b.values();
    const T inv_n = T(1) / static_cast<T>(av.size());
    T acc = 0;
    for (size_t i = 0; i < av.size(); ++i) {
        const T d = av[i] - bv[i];
        acc += d * d;
    }
    return Tensor<T>::make_result({}, {acc * inv_n}, "mse", {a, b}, [inv_n](NodeT<T>& self) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        const T k = T(2) * inv_n * self.grad[0];
        if (NodeT<T>* p = grad_parent(self, 0)) {
            auto& g = p->grad_buffer();
            for (size_t i = 0; i < g.size(); ++i) {
                g[i] += k * (av[i] - bv[i]);
            }
        }
        if (NodeT<T>* p = grad_parent(self, 1)) {
            auto& g = p->grad_buffer();
            for (size_t i = 0; i < g.size(); ++i) {
                g[i] -= k * (av[i] - bv[i]);
            }
        }
    });
}

#define USDIFF_INSTANTIATE_OPS(T)                                                                                     \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                       \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                                       \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                       \
    template Tensor<T> scale(const Tensor<T>&, T);                                                                    \
    template Tensor<T> affine(const Tensor<T>&, T, T);                                                                \
    template Tensor<T> silu(const Tensor<T>&);                                                                        \
    template Tensor<T> sigmoid(const Tensor<T>&);                                                                     \
    template Tensor<T> tanh(const Tensor<T>&);                                                                        \
    template Tensor<T> square(const Tensor<T>&);                                                                      \
    template Tensor<T> sqrt_eps(const Tensor<T>&, T);                                                                 \
    template Tensor<T> clamp(const Tensor<T>&, T, T);                                                                 \
    template Tensor<T> group_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, T);                      \
    template Tensor<T> concat_channels(std::span<const Tensor<T>>);                                                   \
    template Tensor<T> concat_batch(std::span<const Tensor<T>>);                                                      \
    template Tensor<T> slice_batch(const Tensor<T>&, int64_t, int64_t);                                               \
    template Tensor<T> upsample2x(const Tensor<T>&);                                                                  \
    template Tensor<T> avgpool2x(const Tensor<T>&);                                                                   \
    template Tensor<T> pad_replicate(const Tensor<T>&, int);                                                          \
    template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                                  \
    template Tensor<T> add_channel_bias(const Tensor<T>&, const Tensor<T>&);                                          \
    template Tensor<T> mul_per_sample(const Tensor<T>&, std::span<const T>);                                          \
    template Tensor<T> embedding(const Tensor<T>&, std::span<const int>);                                             \
    template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);                        \
    template Tensor<T> sum(const Tensor<T>&);                                                                         \
    template Tensor<T> mean(const Tensor<T>&);                                                                        \
    template Tensor<T> mse(const Tensor<T>&, const Tensor<T>&);

USDIFF_INSTANTIATE_OPS(float)
USDIFF_INSTANTIATE_OPS(double)

} // namespace usdiff
