#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "oft/rng.hpp"

namespace oft::nn {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

enum class Act { identity, relu, tanh, sigmoid };

Mat activate(Act act, const Mat& z);
// Elementwise derivative expressed through the activation output.
Mat activate_grad(Act act, const Mat& y);

struct DenseLayer {
    Mat w;  // out x in
    Vec b;  // out
    Act act = Act::identity;
};

struct Mlp {
    std::vector<DenseLayer> layers;
    int in_dim() const { return layers.empty() ? 0 : static_cast<int>(layers.front().w.cols()); }
    int out_dim() const { return layers.empty() ? 0 : static_cast<int>(layers.back().w.rows()); }
};

Mlp make_mlp(const std::vector<int>& dims, Act hidden, Act head);

struct MlpCache {
    Mat input;
    std::vector<Mat> pre;  // pre-activations per layer
    std::vector<Mat> out;  // post-activations per layer
};

// Columns are batch samples.
Mat mlp_forward(const Mlp& net, const Mat& x, MlpCache* cache = nullptr);

struct MlpGrads {
    std::vector<Mat> dw;
    std::vector<Vec> db;
};
MlpGrads zero_grads(const Mlp& net);

// Accumulates parameter gradients and returns dL/dx.
Mat mlp_backward(const Mlp& net, const MlpCache& cache, const Mat& dy, MlpGrads& grads);

struct GruCell {
    Mat wz, uz;
    Vec bz;
    Mat wr, ur;
    Vec br;
    Mat wn, un;
    Vec bn;
    int in_dim() const { return static_cast<int>(wz.cols()); }
    int hidden_dim() const { return static_cast<int>(wz.rows()); }
};

GruCell make_gru(int in_dim, int hidden_dim);

struct GruCache {
    Mat x, h_prev, z, r, n, h_next;
};

// z = sigm(Wz x + Uz h + bz); r = sigm(Wr x + Ur h + br);
// n = tanh(Wn x + Un (r.h) + bn); h' = (1-z).n + z.h
Mat gru_step(const GruCell& cell, const Mat& x, const Mat& h, GruCache* cache = nullptr);

struct GruGrads {
    Mat dwz, duz, dwr, dur, dwn, dun;
    Vec dbz, dbr, dbn;
};
GruGrads zero_grads(const GruCell& cell);

struct GruStepBack {
    Mat dx;
    Mat dh;
};
GruStepBack gru_backward_step(const GruCell& cell, const GruCache& cache, const Mat& dh_next,
                              GruGrads& grads);

// Backpropagation through time over a window of consecutive caches.
// output_grads[t] is dL/dh'_t from the per-step heads. Returns dL/dh at the
// window start; parameter gradients accumulate into `grads`.
Mat gru_backward(const GruCell& cell, const std::vector<GruCache>& caches,
                 const std::vector<Mat>& output_grads, GruGrads& grads);

// Flat view over a parameter (or gradient) tensor.
struct ParamRef {
    std::string name;
    double* data;
    std::int64_t size;
    int fan_in;
};

std::vector<ParamRef> param_refs(Mlp& net, const std::string& prefix);
std::vector<ParamRef> param_refs(GruCell& cell, const std::string& prefix);
std::vector<ParamRef> grad_refs(const Mlp& net, MlpGrads& grads, const std::string& prefix);
std::vector<ParamRef> grad_refs(const GruCell& cell, GruGrads& grads, const std::string& prefix);
std::int64_t total_size(const std::vector<ParamRef>& refs);

// Uniform U[-1/sqrt(fan_in), 1/sqrt(fan_in)] per tensor, in listed order.
void init_params(const std::vector<ParamRef>& refs, Rng& rng);

struct AdamState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t step = 0;
    Vec m, v;
};
AdamState make_adam(std::int64_t n_params, double lr);

void adam_step(AdamState& state, const std::vector<ParamRef>& params,
               const std::vector<ParamRef>& grads);

// target <- (1 - tau) * target + tau * source, elementwise.
void soft_update(const std::vector<ParamRef>& target, const std::vector<ParamRef>& source,
                 double tau);

void copy_params(const std::vector<ParamRef>& dst, const std::vector<ParamRef>& src);

double grad_norm(const std::vector<ParamRef>& grads);

}  // namespace oft::nn
