#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "sslseg/bbox.hpp"
#include "sslseg/tensor.hpp"

namespace sslseg {

/// Define-by-run reverse-mode tape over Tensor<T>.
///
/// Ops append nodes; backward() walks the nodes in reverse creation order
/// (a valid topological order by construction) and accumulates gradients.
/// With grad disabled (inference, value-only evaluation) no closures or
/// caches are created, so the same ops serve both paths.
template <typename T>
class Tape {
 public:
  using Id = int;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  struct Node {
    Tensor<T> val;
    Tensor<T> grad;  // allocated when needs_grad
    std::function<void()> back;
    bool needs_grad = false;
  };

  Id leaf(Tensor<T> value, bool needs_grad) {
    Node n;
    n.val = std::move(value);
    n.needs_grad = needs_grad && grad_enabled_;
    if (n.needs_grad) n.grad = Tensor<T>::zeros(n.val.shape);
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size()) - 1;
  }

  const Tensor<T>& val(Id id) const { return nodes_.at(id).val; }
  const Tensor<T>& grad(Id id) const { return nodes_.at(id).grad; }
  bool needs_grad(Id id) const { return nodes_.at(id).needs_grad; }
  T scalar_value(Id id) const {
    if (nodes_.at(id).val.size() != 1)
      throw std::logic_error("scalar_value: node is not a scalar");
    return nodes_.at(id).val.v[0];
  }

  void backward(Id root) {
    Node& r = nodes_.at(root);
    if (r.val.size() != 1)
      throw std::logic_error("backward: root must be a scalar");
    if (!r.needs_grad) return;
    r.grad.v[0] = T(1);
    for (Id i = root; i >= 0; --i)
      if (nodes_[i].back) nodes_[i].back();
  }

  // ---- elementwise -------------------------------------------------------

  Id relu(Id x) {
    Tensor<T> out = val(x);
    out.v = out.v.max(T(0));
    return unary(x, std::move(out), [this](Id x, Id o) {
      nodes_[x].grad.v += (nodes_[o].val.v > T(0))
                              .select(nodes_[o].grad.v,
                                      Eigen::Array<T, Eigen::Dynamic, 1>::Zero(
                                          nodes_[o].grad.v.size()));
    });
  }

  Id sigmoid(Id x) {
    Tensor<T> out = val(x);
    out.v = T(1) / (T(1) + (-out.v).exp());
    return unary(x, std::move(out), [this](Id x, Id o) {
      const auto& s = nodes_[o].val.v;
      nodes_[x].grad.v += nodes_[o].grad.v * s * (T(1) - s);
    });
  }

  Id add(Id a, Id b) {
    if (!val(a).same_shape(val(b)))
      throw std::invalid_argument("add: shape mismatch " + val(a).shape_str() +
                                  " vs " + val(b).shape_str());
    Tensor<T> out = val(a);
    out.v += val(b).v;
    const Id o = emit(std::move(out), {a, b});
    attach(o, [this, a, b, o] {
      if (nodes_[a].needs_grad) nodes_[a].grad.v += nodes_[o].grad.v;
      if (nodes_[b].needs_grad) nodes_[b].grad.v += nodes_[o].grad.v;
    });
    return o;
  }

  Id add_scalars(const std::vector<Id>& ids) {
    if (ids.empty()) return leaf(Tensor<T>::scalar(T(0)), false);
    Id acc = ids[0];
    for (std::size_t i = 1; i < ids.size(); ++i) acc = add(acc, ids[i]);
    return acc;
  }

  /// Picks elements by flat index into a fresh tensor of out_shape;
  /// backward scatter-adds. Used to pull sampled anchors/RoIs out of
  /// dense conv outputs.
  Id gather(Id x, std::vector<std::int64_t> indices,
            std::vector<int> out_shape) {
    const auto& xt = val(x);
    if (Tensor<T>::numel(out_shape) !=
        static_cast<std::int64_t>(indices.size()))
      throw std::invalid_argument("gather: index count vs out_shape mismatch");
    for (const auto i : indices)
      if (i < 0 || i >= xt.size())
        throw std::invalid_argument("gather: index out of range");
    Tensor<T> out;
    out.shape = std::move(out_shape);
    out.v.resize(static_cast<Eigen::Index>(indices.size()));
    for (std::size_t k = 0; k < indices.size(); ++k)
      out.v[static_cast<Eigen::Index>(k)] = xt.v[indices[k]];
    const Id o = emit(std::move(out), {x});
    attach(o, [this, x, o, indices = std::move(indices)] {
      if (!nodes_[x].needs_grad) return;
      auto& xg = nodes_[x].grad;
      const auto& og = nodes_[o].grad;
      for (std::size_t k = 0; k < indices.size(); ++k)
        xg.v[indices[k]] += og.v[static_cast<Eigen::Index>(k)];
    });
    return o;
  }

  /// Copy with a new shape (same element count).
  Id reshape(Id x, std::vector<int> shape) {
    if (Tensor<T>::numel(shape) != val(x).size())
      throw std::invalid_argument("reshape: element count mismatch");
    Tensor<T> out;
    out.shape = std::move(shape);
    out.v = val(x).v;
    const Id o = emit(std::move(out), {x});
    attach(o, [this, x, o] {
      if (nodes_[x].needs_grad) nodes_[x].grad.v += nodes_[o].grad.v;
    });
    return o;
  }

  // ---- dense -------------------------------------------------------------

  /// x {N,F} times w {F,O} plus b {O}.
  Id linear(Id x, Id w, Id b) {
    const auto& xt = val(x);
    const auto& wt = val(w);
    const auto& bt = val(b);
    if (xt.rank() != 2 || wt.rank() != 2 || xt.shape[1] != wt.shape[0] ||
        bt.size() != wt.shape[1])
      throw std::invalid_argument("linear: shape mismatch " + xt.shape_str() +
                                  " x " + wt.shape_str());
    const int n = xt.shape[0], f = xt.shape[1], o_dim = wt.shape[1];
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const Mat> xm(xt.v.data(), n, f);
    Eigen::Map<const Mat> wm(wt.v.data(), f, o_dim);
    Tensor<T> out({n, o_dim});
    Eigen::Map<Mat> om(out.v.data(), n, o_dim);
    om.noalias() = xm * wm;
    om.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(
        bt.v.data(), o_dim);
    const Id oid = emit(std::move(out), {x, w, b});
    attach(oid, [this, x, w, b, oid, n, f, o_dim] {
      Eigen::Map<const Mat> g(nodes_[oid].grad.v.data(), n, o_dim);
      Eigen::Map<const Mat> xm(nodes_[x].val.v.data(), n, f);
      Eigen::Map<const Mat> wm(nodes_[w].val.v.data(), f, o_dim);
      if (nodes_[x].needs_grad) {
        Eigen::Map<Mat> gx(nodes_[x].grad.v.data(), n, f);
        gx.noalias() += g * wm.transpose();
      }
      if (nodes_[w].needs_grad) {
        Eigen::Map<Mat> gw(nodes_[w].grad.v.data(), f, o_dim);
        gw.noalias() += xm.transpose() * g;
      }
      if (nodes_[b].needs_grad)
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(
            nodes_[b].grad.v.data(), o_dim) += g.colwise().sum();
    });
    return oid;
  }

  // ---- conv / pooling ----------------------------------------------------

  /// x {N,Cin,H,W}, w {Cout,Cin,kh,kw}, b {Cout}; zero padding.
  Id conv2d(Id x, Id w, Id b, int stride, int pad) {
    const auto& xt = val(x);
    const auto& wt = val(w);
    if (xt.rank() != 4 || wt.rank() != 4 || xt.shape[1] != wt.shape[1])
      throw std::invalid_argument("conv2d: shape mismatch " + xt.shape_str() +
                                  " w " + wt.shape_str());
    const int n = xt.shape[0], cin = xt.shape[1], h = xt.shape[2],
              w_in = xt.shape[3];
    const int cout = wt.shape[0], kh = wt.shape[2], kw = wt.shape[3];
    if (val(b).size() != cout)
      throw std::invalid_argument("conv2d: bias size mismatch");
    const int ho = (h + 2 * pad - kh) / stride + 1;
    const int wo = (w_in + 2 * pad - kw) / stride + 1;
    if (ho <= 0 || wo <= 0)
      throw std::invalid_argument("conv2d: empty output");

    const std::int64_t k_dim = static_cast<std::int64_t>(cin) * kh * kw;
    const std::int64_t m_dim = static_cast<std::int64_t>(n) * ho * wo;
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;  // col-major
    using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Mat col(k_dim, m_dim);
    const T* xv = xt.v.data();
    std::int64_t m = 0;
    for (int ni = 0; ni < n; ++ni)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox, ++m) {
          T* dst = col.data() + m * k_dim;
          std::int64_t k = 0;
          for (int ci = 0; ci < cin; ++ci) {
            const T* plane =
                xv + (static_cast<std::int64_t>(ni) * cin + ci) * h * w_in;
            for (int ky = 0; ky < kh; ++ky) {
              const int iy = oy * stride - pad + ky;
              for (int kx = 0; kx < kw; ++kx, ++k) {
                const int ix = ox * stride - pad + kx;
                dst[k] = (iy >= 0 && iy < h && ix >= 0 && ix < w_in)
                             ? plane[static_cast<std::int64_t>(iy) * w_in + ix]
                             : T(0);
              }
            }
          }
        }

    Eigen::Map<const MatR> wm(wt.v.data(), cout, k_dim);
    Mat out_mat = wm * col;  // cout x M
    Tensor<T> out({n, cout, ho, wo});
    const T* bv = val(b).v.data();
    m = 0;
    for (int ni = 0; ni < n; ++ni)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox, ++m)
          for (int co = 0; co < cout; ++co)
            out.v[out.idx4(ni, co, oy, ox)] = out_mat(co, m) + bv[co];

    const Id oid = emit(std::move(out), {x, w, b});
    if (!nodes_[oid].needs_grad) return oid;

    attach(oid, [this, x, w, b, oid, col = std::move(col), n, cin, h, w_in,
                 cout, kh, kw, ho, wo, stride, pad, k_dim, m_dim] {
      const auto& gt = nodes_[oid].grad;
      Mat g(cout, m_dim);
      std::int64_t m = 0;
      for (int ni = 0; ni < n; ++ni)
        for (int oy = 0; oy < ho; ++oy)
          for (int ox = 0; ox < wo; ++ox, ++m)
            for (int co = 0; co < cout; ++co)
              g(co, m) = gt.v[gt.idx4(ni, co, oy, ox)];

      if (nodes_[w].needs_grad) {
        Eigen::Map<MatR> gw(nodes_[w].grad.v.data(), cout, k_dim);
        gw.noalias() += g * col.transpose();
      }
      if (nodes_[b].needs_grad) {
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> gb(
            nodes_[b].grad.v.data(), cout);
        gb.noalias() += g.rowwise().sum();
      }
      if (nodes_[x].needs_grad) {
        Eigen::Map<const MatR> wm(nodes_[w].val.v.data(), cout, k_dim);
        Mat dcol = wm.transpose() * g;  // K x M
        T* gx = nodes_[x].grad.v.data();
        std::int64_t mm = 0;
        for (int ni = 0; ni < n; ++ni)
          for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox, ++mm) {
              const T* src = dcol.data() + mm * k_dim;
              std::int64_t k = 0;
              for (int ci = 0; ci < cin; ++ci) {
                T* plane =
                    gx + (static_cast<std::int64_t>(ni) * cin + ci) * h * w_in;
                for (int ky = 0; ky < kh; ++ky) {
                  const int iy = oy * stride - pad + ky;
                  for (int kx = 0; kx < kw; ++kx, ++k) {
                    const int ix = ox * stride - pad + kx;
                    if (iy >= 0 && iy < h && ix >= 0 && ix < w_in)
                      plane[static_cast<std::int64_t>(iy) * w_in + ix] += src[k];
                  }
                }
              }
            }
      }
    });
    return oid;
  }

  Id avgpool2(Id x) {
    const auto& xt = val(x);
    if (xt.rank() != 4 || xt.shape[2] % 2 || xt.shape[3] % 2)
      throw std::invalid_argument("avgpool2: needs even NCHW dims, got " +
                                  xt.shape_str());
    const int n = xt.shape[0], c = xt.shape[1], h = xt.shape[2] / 2,
              w = xt.shape[3] / 2;
    Tensor<T> out({n, c, h, w});
    for (int ni = 0; ni < n; ++ni)
      for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < h; ++y)
          for (int xo = 0; xo < w; ++xo)
            out.v[out.idx4(ni, ci, y, xo)] =
                (xt.v[xt.idx4(ni, ci, 2 * y, 2 * xo)] +
                 xt.v[xt.idx4(ni, ci, 2 * y, 2 * xo + 1)] +
                 xt.v[xt.idx4(ni, ci, 2 * y + 1, 2 * xo)] +
                 xt.v[xt.idx4(ni, ci, 2 * y + 1, 2 * xo + 1)]) /
                T(4);
    return unary(x, std::move(out), [this](Id x, Id o) {
      auto& xg = nodes_[x].grad;
      const auto& og = nodes_[o].grad;
      const int n = og.shape[0], c = og.shape[1], h = og.shape[2],
                w = og.shape[3];
      for (int ni = 0; ni < n; ++ni)
        for (int ci = 0; ci < c; ++ci)
          for (int y = 0; y < h; ++y)
            for (int xo = 0; xo < w; ++xo) {
              const T g = og.v[og.idx4(ni, ci, y, xo)] / T(4);
              xg.v[xg.idx4(ni, ci, 2 * y, 2 * xo)] += g;
              xg.v[xg.idx4(ni, ci, 2 * y, 2 * xo + 1)] += g;
              xg.v[xg.idx4(ni, ci, 2 * y + 1, 2 * xo)] += g;
              xg.v[xg.idx4(ni, ci, 2 * y + 1, 2 * xo + 1)] += g;
            }
    });
  }

  Id upsample2_nearest(Id x) {
    const auto& xt = val(x);
    if (xt.rank() != 4)
      throw std::invalid_argument("upsample2: needs NCHW");
    const int n = xt.shape[0], c = xt.shape[1], h = xt.shape[2],
              w = xt.shape[3];
    Tensor<T> out({n, c, 2 * h, 2 * w});
    for (int ni = 0; ni < n; ++ni)
      for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < 2 * h; ++y)
          for (int xo = 0; xo < 2 * w; ++xo)
            out.v[out.idx4(ni, ci, y, xo)] =
                xt.v[xt.idx4(ni, ci, y / 2, xo / 2)];
    return unary(x, std::move(out), [this](Id x, Id o) {
      auto& xg = nodes_[x].grad;
      const auto& og = nodes_[o].grad;
      const int n = og.shape[0], c = og.shape[1], h = og.shape[2],
                w = og.shape[3];
      for (int ni = 0; ni < n; ++ni)
        for (int ci = 0; ci < c; ++ci)
          for (int y = 0; y < h; ++y)
            for (int xo = 0; xo < w; ++xo)
              xg.v[xg.idx4(ni, ci, y / 2, xo / 2)] +=
                  og.v[og.idx4(ni, ci, y, xo)];
    });
  }

  Id concat_channels(Id a, Id b) {
    const auto& at = val(a);
    const auto& bt = val(b);
    if (at.rank() != 4 || bt.rank() != 4 || at.shape[0] != bt.shape[0] ||
        at.shape[2] != bt.shape[2] || at.shape[3] != bt.shape[3])
      throw std::invalid_argument("concat_channels: shape mismatch");
    const int n = at.shape[0], ca = at.shape[1], cb = bt.shape[1],
              h = at.shape[2], w = at.shape[3];
    Tensor<T> out({n, ca + cb, h, w});
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    for (int ni = 0; ni < n; ++ni) {
      std::copy_n(at.v.data() + static_cast<std::int64_t>(ni) * ca * plane,
                  ca * plane,
                  out.v.data() + out.idx4(ni, 0, 0, 0));
      std::copy_n(bt.v.data() + static_cast<std::int64_t>(ni) * cb * plane,
                  cb * plane,
                  out.v.data() + out.idx4(ni, ca, 0, 0));
    }
    const Id o = emit(std::move(out), {a, b});
    attach(o, [this, a, b, o, n, ca, cb, plane] {
      const auto& og = nodes_[o].grad;
      for (int ni = 0; ni < n; ++ni) {
        if (nodes_[a].needs_grad)
          Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>(
              nodes_[a].grad.v.data() + static_cast<std::int64_t>(ni) * ca * plane,
              ca * plane) +=
              Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(
                  og.v.data() + og.idx4(ni, 0, 0, 0), ca * plane);
        if (nodes_[b].needs_grad)
          Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>(
              nodes_[b].grad.v.data() + static_cast<std::int64_t>(ni) * cb * plane,
              cb * plane) +=
              Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(
                  og.v.data() + og.idx4(ni, ca, 0, 0), cb * plane);
      }
    });
    return o;
  }

  // ---- RoI sampling ------------------------------------------------------

  struct Roi {
    int batch_index = 0;
    BBox box;  // image coordinates
  };

  /// Bilinear box pooling to g x g, corner-aligned inside the feature-space
  /// box so a cell-aligned box equals crop + corner-aligned resize.
  /// Differentiable w.r.t. features; boxes are constants.
  Id roi_align(Id feat, const std::vector<Roi>& rois, int g, double stride) {
    const auto& ft = val(feat);
    if (ft.rank() != 4) throw std::invalid_argument("roi_align: needs NCHW");
    if (g < 2) throw std::invalid_argument("roi_align: output size < 2");
    const int n = ft.shape[0], c = ft.shape[1], hf = ft.shape[2],
              wf = ft.shape[3];
    for (const auto& r : rois) {
      if (r.batch_index < 0 || r.batch_index >= n)
        throw std::invalid_argument("roi_align: batch index out of range");
      if (!(r.box.width() > 0.0) || !(r.box.height() > 0.0))
        throw std::invalid_argument("roi_align: degenerate box " + r.box.str());
    }
    const int rcount = static_cast<int>(rois.size());
    if (rcount == 0) throw std::invalid_argument("roi_align: no rois");

    Tensor<T> out({rcount, c, g, g});
    const auto sample_coords = [&](const BBox& box, int i, int j, double& fy,
                                   double& fx) {
      const double fy0 = box.y0 / stride, fx0 = box.x0 / stride;
      const double fh = box.height() / stride, fw = box.width() / stride;
      fy = std::clamp(fy0 + (fh - 1.0) * i / (g - 1.0), 0.0, hf - 1.0);
      fx = std::clamp(fx0 + (fw - 1.0) * j / (g - 1.0), 0.0, wf - 1.0);
    };

    for (int r = 0; r < rcount; ++r) {
      const int ni = rois[r].batch_index;
      for (int i = 0; i < g; ++i)
        for (int j = 0; j < g; ++j) {
          double fy, fx;
          sample_coords(rois[r].box, i, j, fy, fx);
          const int y0 = static_cast<int>(std::floor(fy));
          const int x0 = static_cast<int>(std::floor(fx));
          const int y1 = std::min(y0 + 1, hf - 1);
          const int x1 = std::min(x0 + 1, wf - 1);
          const T wy = static_cast<T>(fy - y0), wx = static_cast<T>(fx - x0);
          for (int ci = 0; ci < c; ++ci) {
            const T v00 = ft.v[ft.idx4(ni, ci, y0, x0)];
            const T v01 = ft.v[ft.idx4(ni, ci, y0, x1)];
            const T v10 = ft.v[ft.idx4(ni, ci, y1, x0)];
            const T v11 = ft.v[ft.idx4(ni, ci, y1, x1)];
            const T top = v00 + wx * (v01 - v00);
            const T bot = v10 + wx * (v11 - v10);
            out.v[out.idx4(r, ci, i, j)] = top + wy * (bot - top);
          }
        }
    }

    const Id o = emit(std::move(out), {feat});
    attach(o, [this, feat, o, rois, g, stride, hf, wf, c] {
      if (!nodes_[feat].needs_grad) return;
      auto& fg = nodes_[feat].grad;
      const auto& og = nodes_[o].grad;
      for (int r = 0; r < static_cast<int>(rois.size()); ++r) {
        const int ni = rois[r].batch_index;
        const BBox& box = rois[r].box;
        const double fy0 = box.y0 / stride, fx0 = box.x0 / stride;
        const double fh = box.height() / stride, fw = box.width() / stride;
        for (int i = 0; i < g; ++i)
          for (int j = 0; j < g; ++j) {
            const double fy =
                std::clamp(fy0 + (fh - 1.0) * i / (g - 1.0), 0.0, hf - 1.0);
            const double fx =
                std::clamp(fx0 + (fw - 1.0) * j / (g - 1.0), 0.0, wf - 1.0);
            const int y0 = static_cast<int>(std::floor(fy));
            const int x0 = static_cast<int>(std::floor(fx));
            const int y1 = std::min(y0 + 1, hf - 1);
            const int x1 = std::min(x0 + 1, wf - 1);
            const T wy = static_cast<T>(fy - y0), wx = static_cast<T>(fx - x0);
            for (int ci = 0; ci < c; ++ci) {
              const T g_out = og.v[og.idx4(r, ci, i, j)];
              fg.v[fg.idx4(ni, ci, y0, x0)] += g_out * (T(1) - wy) * (T(1) - wx);
              fg.v[fg.idx4(ni, ci, y0, x1)] += g_out * (T(1) - wy) * wx;
              fg.v[fg.idx4(ni, ci, y1, x0)] += g_out * wy * (T(1) - wx);
              fg.v[fg.idx4(ni, ci, y1, x1)] += g_out * wy * wx;
            }
          }
      }
    });
    return o;
  }

  // ---- losses (scalar outputs) -------------------------------------------

  /// Mean cross-entropy of logits {N,C} against integer class targets.
  Id softmax_cross_entropy(Id logits, std::vector<int> targets) {
    const auto& lt = val(logits);
    if (lt.rank() != 2 ||
        lt.shape[0] != static_cast<int>(targets.size()))
      throw std::invalid_argument("softmax_ce: bad shapes");
    const int n = lt.shape[0], c = lt.shape[1];
    for (const int t : targets)
      if (t < 0 || t >= c)
        throw std::invalid_argument("softmax_ce: target index out of range");

    Tensor<T> probs({n, c});
    T loss = T(0);
    for (int i = 0; i < n; ++i) {
      const T* row = lt.v.data() + static_cast<std::int64_t>(i) * c;
      T mx = row[0];
      for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
      T sum = T(0);
      for (int j = 0; j < c; ++j) {
        const T e = std::exp(row[j] - mx);
        probs.v[static_cast<std::int64_t>(i) * c + j] = e;
        sum += e;
      }
      for (int j = 0; j < c; ++j)
        probs.v[static_cast<std::int64_t>(i) * c + j] /= sum;
      loss -= std::log(
          std::max(probs.v[static_cast<std::int64_t>(i) * c + targets[i]],
                   std::numeric_limits<T>::min()));
    }
    loss /= static_cast<T>(n);

    const Id o = emit(Tensor<T>::scalar(loss), {logits});
    attach(o, [this, logits, o, probs = std::move(probs),
               targets = std::move(targets), n, c] {
      if (!nodes_[logits].needs_grad) return;
      const T g = nodes_[o].grad.v[0] / static_cast<T>(n);
      auto& lg = nodes_[logits].grad;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j)
          lg.v[static_cast<std::int64_t>(i) * c + j] +=
              g * (probs.v[static_cast<std::int64_t>(i) * c + j] -
                   (j == targets[i] ? T(1) : T(0)));
    });
    return o;
  }

  /// Mean binary cross-entropy of probabilities against 0/1 targets,
  /// probabilities clamped at 1e-7 from both ends.
  Id bce(Id probs, Tensor<T> targets) {
    const auto& pt = val(probs);
    if (!pt.same_shape(targets))
      throw std::invalid_argument("bce: shape mismatch");
    for (std::int64_t i = 0; i < targets.size(); ++i)
      if (targets.v[i] != T(0) && targets.v[i] != T(1))
        throw std::invalid_argument("bce: non-binary target");
    const T eps = static_cast<T>(1e-7);
    const std::int64_t m = pt.size();
    T loss = T(0);
    for (std::int64_t i = 0; i < m; ++i) {
      const T p = std::clamp(pt.v[i], eps, T(1) - eps);
      loss -= targets.v[i] * std::log(p) + (T(1) - targets.v[i]) * std::log(T(1) - p);
    }
    loss /= static_cast<T>(m);
    const Id o = emit(Tensor<T>::scalar(loss), {probs});
    attach(o, [this, probs, o, targets = std::move(targets), m, eps] {
      if (!nodes_[probs].needs_grad) return;
      const T g = nodes_[o].grad.v[0] / static_cast<T>(m);
      auto& pg = nodes_[probs].grad;
      const auto& pv = nodes_[probs].val.v;
      for (std::int64_t i = 0; i < m; ++i) {
        const T p = std::clamp(pv[i], eps, T(1) - eps);
        if (pv[i] < eps || pv[i] > T(1) - eps) continue;  // clamped: flat
        pg.v[i] += g * (p - targets.v[i]) / (p * (T(1) - p));
      }
    });
    return o;
  }

  /// Smooth-L1 against constant targets {N,4}: per-box coordinate sum,
  /// averaged over boxes.
  Id smooth_l1(Id pred, Tensor<T> targets) {
    const auto& pt = val(pred);
    if (!pt.same_shape(targets) || pt.rank() != 2)
      throw std::invalid_argument("smooth_l1: shape mismatch");
    const int n = pt.shape[0];
    const std::int64_t m = pt.size();
    T loss = T(0);
    for (std::int64_t i = 0; i < m; ++i) {
      const T d = pt.v[i] - targets.v[i];
      const T a = std::abs(d);
      loss += a < T(1) ? T(0.5) * d * d : a - T(0.5);
    }
    loss /= static_cast<T>(n);
    const Id o = emit(Tensor<T>::scalar(loss), {pred});
    attach(o, [this, pred, o, targets = std::move(targets), n, m] {
      if (!nodes_[pred].needs_grad) return;
      const T g = nodes_[o].grad.v[0] / static_cast<T>(n);
      auto& pg = nodes_[pred].grad;
      const auto& pv = nodes_[pred].val.v;
      for (std::int64_t i = 0; i < m; ++i) {
        const T d = pv[i] - targets.v[i];
        pg.v[i] += g * (std::abs(d) < T(1) ? d : (d > T(0) ? T(1) : T(-1)));
      }
    });
    return o;
  }

  /// Pretext patch loss: global RMSE + global MAE + per-patch cosine loss
  /// averaged over the batch. pred/targets are {N, P} with P flattened
  /// patch pixels. RMSE uses subgradient 0 at pred == target.
  Id restored_loss(Id pred, Tensor<T> targets) {
    const auto& pt = val(pred);
    if (!pt.same_shape(targets) || pt.rank() != 2)
      throw std::invalid_argument("restored_loss: shape mismatch " +
                                  pt.shape_str());
    const int n = pt.shape[0], p = pt.shape[1];
    const std::int64_t m = pt.size();
    const T eps = static_cast<T>(1e-8);

    T sq = T(0), abs_sum = T(0);
    for (std::int64_t i = 0; i < m; ++i) {
      const T d = pt.v[i] - targets.v[i];
      sq += d * d;
      abs_sum += std::abs(d);
    }
    const T rmse = std::sqrt(sq / static_cast<T>(m));
    const T mae = abs_sum / static_cast<T>(m);

    std::vector<T> norm_p(n), norm_t(n), dots(n), cosines(n);
    T cs_loss = T(0);
    for (int i = 0; i < n; ++i) {
      const T* pr = pt.v.data() + static_cast<std::int64_t>(i) * p;
      const T* tr = targets.v.data() + static_cast<std::int64_t>(i) * p;
      T dot = T(0), np = T(0), nt = T(0);
      bool identical = true;
      for (int j = 0; j < p; ++j) {
        dot += pr[j] * tr[j];
        np += pr[j] * pr[j];
        nt += tr[j] * tr[j];
        identical = identical && pr[j] == tr[j];
      }
      norm_p[i] = std::sqrt(np);
      norm_t[i] = std::sqrt(nt);
      dots[i] = dot;
      // exact-equality rows score an exact cosine of 1; otherwise clamp so
      // rounding can never push the loss negative. Cosine is stationary at
      // parallel vectors, so |c| == 1 rows get zero gradient.
      cosines[i] =
          identical && np > T(0)
              ? T(1)
              : std::clamp(dot / (std::max(norm_p[i], eps) *
                                  std::max(norm_t[i], eps)),
                           T(-1), T(1));
      cs_loss += T(1) - cosines[i];
    }
    cs_loss /= static_cast<T>(n);

    const Id o = emit(Tensor<T>::scalar(rmse + mae + cs_loss), {pred});
    attach(o, [this, pred, o, targets = std::move(targets),
               norm_p = std::move(norm_p), norm_t = std::move(norm_t),
               dots = std::move(dots), cosines = std::move(cosines), rmse, n,
               p, m, eps] {
      if (!nodes_[pred].needs_grad) return;
      const T g = nodes_[o].grad.v[0];
      auto& pg = nodes_[pred].grad;
      const auto& pv = nodes_[pred].val.v;
      const T rmse_scale =
          rmse > static_cast<T>(1e-12) ? g / (rmse * static_cast<T>(m)) : T(0);
      for (std::int64_t i = 0; i < m; ++i) {
        const T d = pv[i] - targets.v[i];
        pg.v[i] += rmse_scale * d;
        if (d != T(0)) pg.v[i] += g * (d > T(0) ? T(1) : T(-1)) / static_cast<T>(m);
      }
      for (int i = 0; i < n; ++i) {
        if (std::abs(cosines[i]) >= T(1)) continue;  // clamped: stationary
        const T* pr = pv.data() + static_cast<std::int64_t>(i) * p;
        const T* tr = targets.v.data() + static_cast<std::int64_t>(i) * p;
        T* gr = pg.v.data() + static_cast<std::int64_t>(i) * p;
        const T denp = std::max(norm_p[i], eps);
        const T dent = std::max(norm_t[i], eps);
        const T scale = g / static_cast<T>(n);
        if (norm_p[i] > eps) {
          const T c = dots[i] / (denp * dent);
          for (int j = 0; j < p; ++j)
            gr[j] -= scale * (tr[j] / (denp * dent) - c * pr[j] / (denp * denp));
        } else {
          for (int j = 0; j < p; ++j) gr[j] -= scale * tr[j] / (denp * dent);
        }
      }
    });
    return o;
  }

  Id scale(Id x, T factor) {
    Tensor<T> out = val(x);
    out.v *= factor;
    return unary(x, std::move(out), [this, factor](Id x, Id o) {
      nodes_[x].grad.v += factor * nodes_[o].grad.v;
    });
  }

  std::size_t node_count() const { return nodes_.size(); }
  bool grad_enabled() const { return grad_enabled_; }

 private:
  Id emit(Tensor<T> value, std::initializer_list<Id> parents) {
    Node node;
    node.val = std::move(value);
    node.needs_grad = false;
    if (grad_enabled_)
      for (const Id p : parents)
        if (nodes_.at(p).needs_grad) node.needs_grad = true;
    if (node.needs_grad) node.grad = Tensor<T>::zeros(node.val.shape);
    nodes_.push_back(std::move(node));
    return static_cast<Id>(nodes_.size()) - 1;
  }

  void attach(Id id, std::function<void()> back) {
    if (nodes_.at(id).needs_grad) nodes_.at(id).back = std::move(back);
  }

  template <class Fn>
  Id unary(Id x, Tensor<T> out, Fn&& back_fn) {
    const Id o = emit(std::move(out), {x});
    attach(o, [this, x, o, fn = std::forward<Fn>(back_fn)] {
      if (nodes_[x].needs_grad) fn(x, o);
    });
    return o;
  }

  bool grad_enabled_;
  std::vector<Node> nodes_;
};

}  // namespace sslseg
