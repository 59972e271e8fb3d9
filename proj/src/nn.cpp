#include "mergedet/nn.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>

#include "mergedet/common.hpp"

namespace mergedet::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConst = Eigen::Map<const RowMat>;

size_t assign_offsets(std::vector<LayerDef>& layers, size_t off) {
    for (auto& l : layers) {
        switch (l.op) {
            case Op::Conv:
                l.w_off = off;
                off += static_cast<size_t>(l.out_c) * l.in_c * l.k * l.k;
                l.b_off = off;
                off += static_cast<size_t>(l.out_c);
                break;
            case Op::Dense:
                l.w_off = off;
                off += static_cast<size_t>(l.out_n) * l.in_n;
                l.b_off = off;
                off += static_cast<size_t>(l.out_n);
                break;
            case Op::Residual:
                off = assign_offsets(l.inner, off);
                break;
            default:
                break;
        }
    }
    return off;
}

void init_layer_params(const std::vector<LayerDef>& layers, std::vector<double>& p, Rng& rng) {
    for (const auto& l : layers) {
        switch (l.op) {
            case Op::Conv: {
                const size_t nw = static_cast<size_t>(l.out_c) * l.in_c * l.k * l.k;
                const double std = std::sqrt(2.0 / (static_cast<double>(l.in_c) * l.k * l.k));
                for (size_t i = 0; i < nw; ++i) p[l.w_off + i] = std * rng.normal();
                for (int i = 0; i < l.out_c; ++i) p[l.b_off + i] = 0.0;
                break;
            }
            case Op::Dense: {
                const size_t nw = static_cast<size_t>(l.out_n) * l.in_n;
                const double std = std::sqrt(2.0 / static_cast<double>(l.in_n));
                for (size_t i = 0; i < nw; ++i) p[l.w_off + i] = std * rng.normal();
                for (int i = 0; i < l.out_n; ++i) p[l.b_off + i] = 0.0;
                break;
            }
            case Op::Residual:
                init_layer_params(l.inner, p, rng);
                break;
            default:
                break;
        }
    }
}

void im2col(const Tensor& in, int k, int pad, std::vector<double>& cols) {
    const int oh = in.h + 2 * pad - k + 1;
    const int ow = in.w + 2 * pad - k + 1;
    const int rows = in.c * k * k;
    cols.assign(static_cast<size_t>(rows) * oh * ow, 0.0);
    for (int ic = 0; ic < in.c; ++ic) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const int row = (ic * k + ky) * k + kx;
                double* dst = cols.data() + static_cast<size_t>(row) * oh * ow;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy - pad + ky;
                    if (iy < 0 || iy >= in.h) continue;
                    const double* src = &in.v[(static_cast<size_t>(ic) * in.h + iy) * in.w];
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox - pad + kx;
                        if (ix < 0 || ix >= in.w) continue;
                        dst[static_cast<size_t>(oy) * ow + ox] = src[ix];
                    }
                }
            }
        }
    }
}

void col2im(const std::vector<double>& cols, int c, int h, int w, int k, int pad, Tensor& gin) {
    const int oh = h + 2 * pad - k + 1;
    const int ow = w + 2 * pad - k + 1;
    for (int ic = 0; ic < c; ++ic) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const int row = (ic * k + ky) * k + kx;
                const double* src = cols.data() + static_cast<size_t>(row) * oh * ow;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    double* dst = &gin.v[(static_cast<size_t>(ic) * h + iy) * w];
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox - pad + kx;
                        if (ix < 0 || ix >= w) continue;
                        dst[ix] += src[static_cast<size_t>(oy) * ow + ox];
                    }
                }
            }
        }
    }
}

Tensor forward_layers(const std::vector<LayerDef>& layers, std::span<const double> params,
                      const Tensor& x, std::vector<LayerState>* states);
Tensor backward_layers(const std::vector<LayerDef>& layers, std::span<const double> params,
                       std::vector<LayerState>& states, const Tensor& gout,
                       std::span<double> grads);

Tensor forward_one(const LayerDef& l, std::span<const double> params, const Tensor& x,
                   LayerState* st) {
    switch (l.op) {
        case Op::Conv: {
            check(x.c == l.in_c, "conv: channel mismatch");
            const int oh = x.h + 2 * l.pad - l.k + 1;
            const int ow = x.w + 2 * l.pad - l.k + 1;
            check(oh > 0 && ow > 0, "conv: input too small");
            std::vector<double> local_cols;
            std::vector<double>& cols = st ? st->cols : local_cols;
            im2col(x, l.k, l.pad, cols);
            const int rows = l.in_c * l.k * l.k;
            Tensor out(l.out_c, oh, ow);
            MapConst W(params.data() + l.w_off, l.out_c, rows);
            MapConst C(cols.data(), rows, static_cast<Eigen::Index>(oh) * ow);
            MapMat O(out.v.data(), l.out_c, static_cast<Eigen::Index>(oh) * ow);
            O.noalias() = W * C;
            for (int oc = 0; oc < l.out_c; ++oc) {
                O.row(oc).array() += params[l.b_off + oc];
            }
            return out;
        }
        case Op::ReLU: {
            Tensor out = x;
            for (auto& v : out.v) v = v > 0.0 ? v : 0.0;
            return out;
        }
        case Op::MaxPool2: {
            check(x.h % 2 == 0 && x.w % 2 == 0, "maxpool2: odd input size");
            Tensor out(x.c, x.h / 2, x.w / 2);
            if (st) st->argmax.assign(out.size(), 0);
            size_t o = 0;
            for (int ch = 0; ch < x.c; ++ch) {
                for (int y = 0; y < out.h; ++y) {
                    for (int xx = 0; xx < out.w; ++xx, ++o) {
                        double best = -1e300;
                        int best_idx = 0;
                        for (int dy = 0; dy < 2; ++dy) {
                            for (int dx = 0; dx < 2; ++dx) {
                                const int iy = 2 * y + dy;
                                const int ix = 2 * xx + dx;
                                const int idx = (ch * x.h + iy) * x.w + ix;
                                if (x.v[static_cast<size_t>(idx)] > best) {
                                    best = x.v[static_cast<size_t>(idx)];
                                    best_idx = idx;
                                }
                            }
                        }
                        out.v[o] = best;
                        if (st) st->argmax[o] = best_idx;
                    }
                }
            }
            return out;
        }
        case Op::Spp: {
            std::vector<int> argmax;
            std::vector<double> pooled = spp_forward(x, l.levels, st ? &argmax : nullptr);
            if (st) st->argmax = std::move(argmax);
            Tensor out(static_cast<int>(pooled.size()), 1, 1);
            out.v = std::move(pooled);
            return out;
        }
        case Op::Dense: {
            check(static_cast<int>(x.size()) == l.in_n, "dense: input size mismatch");
            Tensor out(l.out_n, 1, 1);
            MapConst W(params.data() + l.w_off, l.out_n, l.in_n);
            Eigen::Map<const Eigen::VectorXd> xin(x.v.data(), l.in_n);
            Eigen::Map<Eigen::VectorXd> y(out.v.data(), l.out_n);
            y.noalias() = W * xin;
            for (int i = 0; i < l.out_n; ++i) y[i] += params[l.b_off + i];
            return out;
        }
        case Op::Residual: {
            Tensor branch = forward_layers(l.inner, params, x, st ? &st->inner : nullptr);
            check(branch.same_shape(x), "residual: branch changed shape");
            Tensor out = x;
            for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += branch.v[i];
            return out;
        }
    }
    throw std::runtime_error("forward_one: bad op");
}

Tensor backward_one(const LayerDef& l, std::span<const double> params, LayerState& st,
                    const Tensor& gout, std::span<double> grads) {
    const Tensor& x = st.in;
    switch (l.op) {
        case Op::Conv: {
            const int oh = gout.h;
            const int ow = gout.w;
            const int rows = l.in_c * l.k * l.k;
            MapConst G(gout.v.data(), l.out_c, static_cast<Eigen::Index>(oh) * ow);
            MapConst C(st.cols.data(), rows, static_cast<Eigen::Index>(oh) * ow);
            MapMat dW(grads.data() + l.w_off, l.out_c, rows);
            dW.noalias() += G * C.transpose();
            for (int oc = 0; oc < l.out_c; ++oc) {
                grads[l.b_off + oc] += G.row(oc).sum();
            }
            std::vector<double> dcols(static_cast<size_t>(rows) * oh * ow);
            MapMat DC(dcols.data(), rows, static_cast<Eigen::Index>(oh) * ow);
            MapConst W(params.data() + l.w_off, l.out_c, rows);
            DC.noalias() = W.transpose() * G;
            Tensor gin(x.c, x.h, x.w);
            col2im(dcols, x.c, x.h, x.w, l.k, l.pad, gin);
            return gin;
        }
        case Op::ReLU: {
            Tensor gin = gout;
            for (size_t i = 0; i < gin.v.size(); ++i) {
                if (x.v[i] <= 0.0) gin.v[i] = 0.0;
            }
            return gin;
        }
        case Op::MaxPool2: {
            Tensor gin(x.c, x.h, x.w);
            for (size_t o = 0; o < gout.v.size(); ++o) {
                gin.v[static_cast<size_t>(st.argmax[o])] += gout.v[o];
            }
            return gin;
        }
        case Op::Spp: {
            Tensor gin(x.c, x.h, x.w);
            for (size_t o = 0; o < gout.v.size(); ++o) {
                gin.v[static_cast<size_t>(st.argmax[o])] += gout.v[o];
            }
            return gin;
        }
        case Op::Dense: {
            MapMat dW(grads.data() + l.w_off, l.out_n, l.in_n);
            Eigen::Map<const Eigen::VectorXd> g(gout.v.data(), l.out_n);
            Eigen::Map<const Eigen::VectorXd> xin(x.v.data(), l.in_n);
            dW.noalias() += g * xin.transpose();
            for (int i = 0; i < l.out_n; ++i) grads[l.b_off + i] += gout.v[static_cast<size_t>(i)];
            Tensor gin(x.c, x.h, x.w);
            MapConst W(params.data() + l.w_off, l.out_n, l.in_n);
            Eigen::Map<Eigen::VectorXd> gi(gin.v.data(), l.in_n);
            gi.noalias() = W.transpose() * g;
            return gin;
        }
        case Op::Residual: {
            Tensor gbranch = backward_layers(l.inner, params, st.inner, gout, grads);
            Tensor gin = gout;
            for (size_t i = 0; i < gin.v.size(); ++i) gin.v[i] += gbranch.v[i];
            return gin;
        }
    }
    throw std::runtime_error("backward_one: bad op");
}

Tensor forward_layers(const std::vector<LayerDef>& layers, std::span<const double> params,
                      const Tensor& x, std::vector<LayerState>* states) {
    Tensor cur = x;
    if (states) states->resize(layers.size());
    for (size_t i = 0; i < layers.size(); ++i) {
        LayerState* st = states ? &(*states)[i] : nullptr;
        if (st) st->in = cur;
        cur = forward_one(layers[i], params, cur, st);
    }
    return cur;
}

Tensor backward_layers(const std::vector<LayerDef>& layers, std::span<const double> params,
                       std::vector<LayerState>& states, const Tensor& gout,
                       std::span<double> grads) {
    Tensor g = gout;
    for (size_t i = layers.size(); i-- > 0;) {
        g = backward_one(layers[i], params, states[i], g, grads);
    }
    return g;
}

}  // namespace

NetSpec& NetSpec::conv(int in_c, int out_c, int k, int pad) {
    LayerDef l;
    l.op = Op::Conv;
    l.in_c = in_c;
    l.out_c = out_c;
    l.k = k;
    l.pad = pad;
    layers.push_back(std::move(l));
    return *this;
}

NetSpec& NetSpec::relu() {
    layers.push_back(LayerDef{});
    return *this;
}

NetSpec& NetSpec::maxpool2() {
    LayerDef l;
    l.op = Op::MaxPool2;
    layers.push_back(std::move(l));
    return *this;
}

NetSpec& NetSpec::spp(std::vector<int> levels) {
    LayerDef l;
    l.op = Op::Spp;
    l.levels = std::move(levels);
    layers.push_back(std::move(l));
    return *this;
}

NetSpec& NetSpec::dense(int in_n, int out_n) {
    LayerDef l;
    l.op = Op::Dense;
    l.in_n = in_n;
    l.out_n = out_n;
    layers.push_back(std::move(l));
    return *this;
}

NetSpec& NetSpec::residual(NetSpec branch) {
    LayerDef l;
    l.op = Op::Residual;
    l.inner = std::move(branch.layers);
    layers.push_back(std::move(l));
    return *this;
}

void NetSpec::finalize() { n_params = assign_offsets(layers, 0); }

std::vector<double> NetSpec::init_params(Rng& rng) const {
    std::vector<double> p(n_params, 0.0);
    init_layer_params(layers, p, rng);
    return p;
}

Tensor net_forward(const NetSpec& spec, std::span<const double> params, const Tensor& x,
                   Workspace* ws) {
    return forward_layers(spec.layers, params, x, ws ? &ws->states : nullptr);
}

Tensor net_backward(const NetSpec& spec, std::span<const double> params, Workspace& ws,
                    const Tensor& gout, std::span<double> grads) {
    check(grads.size() == spec.n_params, "net_backward: grad buffer size mismatch");
    return backward_layers(spec.layers, params, ws.states, gout, grads);
}

std::vector<double> spp_forward(const Tensor& in, const std::vector<int>& levels,
                                std::vector<int>* argmax) {
    check_arg(!levels.empty(), "spp: empty level list");
    int max_level = 0;
    for (int l : levels) {
        check_arg(l >= 1, "spp: level must be >= 1");
        max_level = std::max(max_level, l);
    }
    check_arg(in.h >= max_level && in.w >= max_level, "spp: input smaller than max level");

    size_t total = 0;
    for (int l : levels) total += static_cast<size_t>(l) * l;
    std::vector<double> out(total * static_cast<size_t>(in.c));
    if (argmax) argmax->assign(out.size(), 0);

    size_t o = 0;
    for (int level : levels) {
        for (int r = 0; r < level; ++r) {
            const int y0 = r * in.h / level;
            const int y1 = (r + 1) * in.h / level;
            for (int cbin = 0; cbin < level; ++cbin) {
                const int x0 = cbin * in.w / level;
                const int x1 = (cbin + 1) * in.w / level;
                for (int ch = 0; ch < in.c; ++ch, ++o) {
                    double best = -1e300;
                    int best_idx = 0;
                    for (int y = y0; y < y1; ++y) {
                        for (int x = x0; x < x1; ++x) {
                            const int idx = (ch * in.h + y) * in.w + x;
                            if (in.v[static_cast<size_t>(idx)] > best) {
                                best = in.v[static_cast<size_t>(idx)];
                                best_idx = idx;
                            }
                        }
                    }
                    out[o] = best;
                    if (argmax) (*argmax)[o] = best_idx;
                }
            }
        }
    }
    return out;
}

void SgdMomentum::step(std::span<double> params, std::span<const double> grads) {
    if (velocity.size() != params.size()) velocity.assign(params.size(), 0.0);
    for (size_t i = 0; i < params.size(); ++i) {
        velocity[i] = momentum * velocity[i] + grads[i];
        params[i] -= lr * velocity[i];
    }
}

Tensor image_to_tensor(const ImageBuffer& img) {
    Tensor t(3, img.height, img.width);
    const size_t plane = static_cast<size_t>(img.height) * img.width;
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            const uint8_t* p = img.at(x, y);
            const size_t o = static_cast<size_t>(y) * img.width + x;
            t.v[o] = p[0] / 255.0;
            t.v[plane + o] = p[1] / 255.0;
            t.v[2 * plane + o] = p[2] / 255.0;
        }
    }
    return t;
}

}  // namespace mergedet::nn
