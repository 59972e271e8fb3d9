#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mergedet/image.hpp"
#include "mergedet/rng.hpp"

namespace mergedet::nn {

// Dense CHW tensor of doubles. Doubles throughout: the gradient checks and
// the encode/decode tolerances leave no room for float32.
struct Tensor {
    int c = 0, h = 0, w = 0;
    std::vector<double> v;

    Tensor() = default;
    Tensor(int c_, int h_, int w_) : c(c_), h(h_), w(w_), v(static_cast<size_t>(c_) * h_ * w_) {}

    double& at(int ch, int y, int x) {
        return v[(static_cast<size_t>(ch) * h + y) * w + x];
    }
    double at(int ch, int y, int x) const {
        return v[(static_cast<size_t>(ch) * h + y) * w + x];
    }
    size_t size() const { return v.size(); }
    bool same_shape(const Tensor& o) const { return c == o.c && h == o.h && w == o.w; }
};

enum class Op { Conv, ReLU, MaxPool2, Spp, Dense, Residual };

struct NetSpec;

struct LayerDef {
    Op op = Op::ReLU;
    // conv
    int in_c = 0, out_c = 0, k = 0, pad = 0;
    // dense
    int in_n = 0, out_n = 0;
    // spp
    std::vector<int> levels;
    // residual branch (y = x + branch(x))
    std::vector<LayerDef> inner;
    size_t w_off = 0, b_off = 0;
};

struct NetSpec {
    std::vector<LayerDef> layers;
    size_t n_params = 0;

    NetSpec& conv(int in_c, int out_c, int k, int pad);
    NetSpec& relu();
    NetSpec& maxpool2();
    NetSpec& spp(std::vector<int> levels);
    NetSpec& dense(int in_n, int out_n);
    NetSpec& residual(NetSpec branch);

    void finalize();  // assigns parameter offsets; call once after building
    std::vector<double> init_params(Rng& rng) const;
};

struct LayerState {
    Tensor in;
    std::vector<double> cols;  // conv column cache
    std::vector<int> argmax;   // pool / spp routing
    std::vector<LayerState> inner;
};

struct Workspace {
    std::vector<LayerState> states;
};

// Forward pass; ws may be null for inference. With a workspace the call
// caches what the matching backward needs.
Tensor net_forward(const NetSpec& spec, std::span<const double> params, const Tensor& x,
                   Workspace* ws);

// Backward pass for the workspace's cached activations. Adds parameter
// gradients into `grads` (same length as params) and returns d(loss)/d(input).
Tensor net_backward(const NetSpec& spec, std::span<const double> params, Workspace& ws,
                    const Tensor& gout, std::span<double> grads);

// Max pooling over an L x L grid of near-equal bins per level, concatenated
// in (level, row, col, channel) order. Output length c * sum(level^2),
// independent of the input's spatial size. Requires h, w >= max level.
std::vector<double> spp_forward(const Tensor& in, const std::vector<int>& levels,
                                std::vector<int>* argmax = nullptr);

struct SgdMomentum {
    double lr = 0.01;
    double momentum = 0.9;
    std::vector<double> velocity;

    void step(std::span<double> params, std::span<const double> grads);
};

// u8 RGB -> planar [0,1] tensor.
Tensor image_to_tensor(const ImageBuffer& img);

}  // namespace mergedet::nn
