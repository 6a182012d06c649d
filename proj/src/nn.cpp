#include "oft/nn.hpp"

#include <cmath>

#include "oft/errors.hpp"

namespace oft::nn {

Mat activate(Act act, const Mat& z) {
    switch (act) {
        case Act::identity: return z;
        case Act::relu: return z.cwiseMax(0.0);
        case Act::tanh: return z.array().tanh().matrix();
        case Act::sigmoid: return (1.0 / (1.0 + (-z.array()).exp())).matrix();
    }
    return z;
}

Mat activate_grad(Act act, const Mat& y) {
    switch (act) {
        case Act::identity: return Mat::Ones(y.rows(), y.cols());
        case Act::relu: return (y.array() > 0.0).cast<double>().matrix();
        case Act::tanh: return (1.0 - y.array().square()).matrix();
        case Act::sigmoid: return (y.array() * (1.0 - y.array())).matrix();
    }
    return Mat::Ones(y.rows(), y.cols());
}

Mlp make_mlp(const std::vector<int>& dims, Act hidden, Act head) {
    if (dims.size() < 2) throw ContractError("make_mlp: need at least input and output dims");
    Mlp net;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        DenseLayer layer;
        layer.w = Mat::Zero(dims[l + 1], dims[l]);
        layer.b = Vec::Zero(dims[l + 1]);
        layer.act = (l + 2 == dims.size()) ? head : hidden;
        net.layers.push_back(std::move(layer));
    }
    return net;
}

Mat mlp_forward(const Mlp& net, const Mat& x, MlpCache* cache) {
    if (x.rows() != net.in_dim()) throw ContractError("mlp_forward: input dimension mismatch");
    if (cache) {
        cache->input = x;
        cache->pre.clear();
        cache->out.clear();
    }
    Mat cur = x;
    for (const DenseLayer& layer : net.layers) {
        Mat pre = (layer.w * cur).colwise() + layer.b;
        Mat out = activate(layer.act, pre);
        if (cache) {
            cache->pre.push_back(pre);
            cache->out.push_back(out);
        }
        cur = std::move(out);
    }
    return cur;
}

MlpGrads zero_grads(const Mlp& net) {
    MlpGrads g;
    for (const DenseLayer& layer : net.layers) {
        g.dw.push_back(Mat::Zero(layer.w.rows(), layer.w.cols()));
        g.db.push_back(Vec::Zero(layer.b.size()));
    }
    return g;
}

Mat mlp_backward(const Mlp& net, const MlpCache& cache, const Mat& dy, MlpGrads& grads) {
    Mat delta = dy;
    for (int l = static_cast<int>(net.layers.size()) - 1; l >= 0; --l) {
        const DenseLayer& layer = net.layers[static_cast<std::size_t>(l)];
        const Mat& out = cache.out[static_cast<std::size_t>(l)];
        const Mat dpre = delta.cwiseProduct(activate_grad(layer.act, out));
        const Mat& below = l == 0 ? cache.input : cache.out[static_cast<std::size_t>(l - 1)];
        grads.dw[static_cast<std::size_t>(l)].noalias() += dpre * below.transpose();
        grads.db[static_cast<std::size_t>(l)] += dpre.rowwise().sum();
        delta = layer.w.transpose() * dpre;
    }
    return delta;
}

GruCell make_gru(int in_dim, int hidden_dim) {
    GruCell c;
    c.wz = Mat::Zero(hidden_dim, in_dim);
    c.uz = Mat::Zero(hidden_dim, hidden_dim);
    c.bz = Vec::Zero(hidden_dim);
    c.wr = Mat::Zero(hidden_dim, in_dim);
    c.ur = Mat::Zero(hidden_dim, hidden_dim);
    c.br = Vec::Zero(hidden_dim);
    c.wn = Mat::Zero(hidden_dim, in_dim);
    c.un = Mat::Zero(hidden_dim, hidden_dim);
    c.bn = Vec::Zero(hidden_dim);
    return c;
}

Mat gru_step(const GruCell& cell, const Mat& x, const Mat& h, GruCache* cache) {
    if (x.rows() != cell.in_dim() || h.rows() != cell.hidden_dim() || x.cols() != h.cols())
        throw ContractError("gru_step: shape mismatch");
    const Mat z = activate(Act::sigmoid, ((cell.wz * x + cell.uz * h).colwise() + cell.bz));
    const Mat r = activate(Act::sigmoid, ((cell.wr * x + cell.ur * h).colwise() + cell.br));
    const Mat rh = r.cwiseProduct(h);
    const Mat n = activate(Act::tanh, ((cell.wn * x + cell.un * rh).colwise() + cell.bn));
    Mat h_next = (1.0 - z.array()).matrix().cwiseProduct(n) + z.cwiseProduct(h);
    if (cache) {
        cache->x = x;
        cache->h_prev = h;
        cache->z = z;
        cache->r = r;
        cache->n = n;
        cache->h_next = h_next;
    }
    return h_next;
}

GruGrads zero_grads(const GruCell& cell) {
    GruGrads g;
    const auto H = cell.hidden_dim();
    const auto I = cell.in_dim();
    g.dwz = Mat::Zero(H, I);
    g.duz = Mat::Zero(H, H);
    g.dbz = Vec::Zero(H);
    g.dwr = Mat::Zero(H, I);
    g.dur = Mat::Zero(H, H);
    g.dbr = Vec::Zero(H);
    g.dwn = Mat::Zero(H, I);
    g.dun = Mat::Zero(H, H);
    g.dbn = Vec::Zero(H);
    return g;
}

GruStepBack gru_backward_step(const GruCell& cell, const GruCache& cache, const Mat& dh_next,
                              GruGrads& grads) {
    const Mat& z = cache.z;
    const Mat& r = cache.r;
    const Mat& n = cache.n;
    const Mat& h = cache.h_prev;
    const Mat& x = cache.x;

    // h' = (1-z).n + z.h
    const Mat dz = dh_next.cwiseProduct(h - n);
    const Mat dn = dh_next.cwiseProduct((1.0 - z.array()).matrix());

    const Mat dpre_n = dn.cwiseProduct(activate_grad(Act::tanh, n));
    const Mat drh = cell.un.transpose() * dpre_n;
    const Mat dr = drh.cwiseProduct(h);
    const Mat dpre_r = dr.cwiseProduct(activate_grad(Act::sigmoid, r));
    const Mat dpre_z = dz.cwiseProduct(activate_grad(Act::sigmoid, z));

    const Mat rh = r.cwiseProduct(h);
    grads.dwn.noalias() += dpre_n * x.transpose();
    grads.dun.noalias() += dpre_n * rh.transpose();
    grads.dbn += dpre_n.rowwise().sum();
    grads.dwr.noalias() += dpre_r * x.transpose();
    grads.dur.noalias() += dpre_r * h.transpose();
    grads.dbr += dpre_r.rowwise().sum();
    grads.dwz.noalias() += dpre_z * x.transpose();
    grads.duz.noalias() += dpre_z * h.transpose();
    grads.dbz += dpre_z.rowwise().sum();

    GruStepBack back;
    back.dx = cell.wz.transpose() * dpre_z + cell.wr.transpose() * dpre_r +
              cell.wn.transpose() * dpre_n;
    back.dh = dh_next.cwiseProduct(z) + cell.uz.transpose() * dpre_z +
              cell.ur.transpose() * dpre_r + drh.cwiseProduct(r);
    return back;
}

Mat gru_backward(const GruCell& cell, const std::vector<GruCache>& caches,
                 const std::vector<Mat>& output_grads, GruGrads& grads) {
    if (caches.empty() || caches.size() != output_grads.size())
        throw ContractError("gru_backward: cache/grad window mismatch");
    Mat dh = Mat::Zero(caches.back().h_next.rows(), caches.back().h_next.cols());
    for (int t = static_cast<int>(caches.size()) - 1; t >= 0; --t) {
        const Mat dh_next = dh + output_grads[static_cast<std::size_t>(t)];
        dh = gru_backward_step(cell, caches[static_cast<std::size_t>(t)], dh_next, grads).dh;
    }
    return dh;
}

namespace {

ParamRef ref(const std::string& name, Mat& m, int fan_in) {
    return {name, m.data(), m.size(), fan_in};
}
ParamRef ref(const std::string& name, Vec& v, int fan_in) {
    return {name, v.data(), v.size(), fan_in};
}

}  // namespace

std::vector<ParamRef> param_refs(Mlp& net, const std::string& prefix) {
    std::vector<ParamRef> refs;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        DenseLayer& layer = net.layers[l];
        const int fan_in = static_cast<int>(layer.w.cols());
        const std::string base = prefix + "/l" + std::to_string(l);
        refs.push_back(ref(base + "/w", layer.w, fan_in));
        refs.push_back(ref(base + "/b", layer.b, fan_in));
    }
    return refs;
}

std::vector<ParamRef> param_refs(GruCell& cell, const std::string& prefix) {
    const int I = cell.in_dim();
    const int H = cell.hidden_dim();
    return {
        ref(prefix + "/wz", cell.wz, I), ref(prefix + "/uz", cell.uz, H),
        ref(prefix + "/bz", cell.bz, H), ref(prefix + "/wr", cell.wr, I),
        ref(prefix + "/ur", cell.ur, H), ref(prefix + "/br", cell.br, H),
        ref(prefix + "/wn", cell.wn, I), ref(prefix + "/un", cell.un, H),
        ref(prefix + "/bn", cell.bn, H),
    };
}

std::vector<ParamRef> grad_refs(const Mlp& net, MlpGrads& grads, const std::string& prefix) {
    std::vector<ParamRef> refs;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        const int fan_in = static_cast<int>(net.layers[l].w.cols());
        const std::string base = prefix + "/l" + std::to_string(l);
        refs.push_back(ref(base + "/w", grads.dw[l], fan_in));
        refs.push_back(ref(base + "/b", grads.db[l], fan_in));
    }
    return refs;
}

std::vector<ParamRef> grad_refs(const GruCell& cell, GruGrads& grads, const std::string& prefix) {
    const int I = cell.in_dim();
    const int H = cell.hidden_dim();
    return {
        ref(prefix + "/wz", grads.dwz, I), ref(prefix + "/uz", grads.duz, H),
        ref(prefix + "/bz", grads.dbz, H), ref(prefix + "/wr", grads.dwr, I),
        ref(prefix + "/ur", grads.dur, H), ref(prefix + "/br", grads.dbr, H),
        ref(prefix + "/wn", grads.dwn, I), ref(prefix + "/un", grads.dun, H),
        ref(prefix + "/bn", grads.dbn, H),
    };
}

std::int64_t total_size(const std::vector<ParamRef>& refs) {
    std::int64_t n = 0;
    for (const ParamRef& r : refs) n += r.size;
    return n;
}

void init_params(const std::vector<ParamRef>& refs, Rng& rng) {
    for (const ParamRef& r : refs) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(std::max(1, r.fan_in)));
        for (std::int64_t k = 0; k < r.size; ++k) r.data[k] = rng.uniform(-bound, bound);
    }
}

AdamState make_adam(std::int64_t n_params, double lr) {
    AdamState s;
    s.lr = lr;
    s.m = Vec::Zero(n_params);
    s.v = Vec::Zero(n_params);
    return s;
}

void adam_step(AdamState& state, const std::vector<ParamRef>& params,
               const std::vector<ParamRef>& grads) {
    if (params.size() != grads.size()) throw ContractError("adam_step: ref count mismatch");
    if (total_size(params) != state.m.size()) throw ContractError("adam_step: state size mismatch");
    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    std::int64_t at = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].size != grads[i].size) throw ContractError("adam_step: shape mismatch");
        for (std::int64_t k = 0; k < params[i].size; ++k, ++at) {
            const double g = grads[i].data[k];
            state.m[at] = state.beta1 * state.m[at] + (1.0 - state.beta1) * g;
            state.v[at] = state.beta2 * state.v[at] + (1.0 - state.beta2) * g * g;
            const double mhat = state.m[at] / bc1;
            const double vhat = state.v[at] / bc2;
            params[i].data[k] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

void soft_update(const std::vector<ParamRef>& target, const std::vector<ParamRef>& source,
                 double tau) {
    if (target.size() != source.size()) throw ContractError("soft_update: ref count mismatch");
    for (std::size_t i = 0; i < target.size(); ++i) {
        if (target[i].size != source[i].size) throw ContractError("soft_update: shape mismatch");
        for (std::int64_t k = 0; k < target[i].size; ++k)
            target[i].data[k] = (1.0 - tau) * target[i].data[k] + tau * source[i].data[k];
    }
}

void copy_params(const std::vector<ParamRef>& dst, const std::vector<ParamRef>& src) {
    soft_update(dst, src, 1.0);
}

double grad_norm(const std::vector<ParamRef>& grads) {
    double sq = 0.0;
    for (const ParamRef& r : grads)
        for (std::int64_t k = 0; k < r.size; ++k) sq += r.data[k] * r.data[k];
    return std::sqrt(sq);
}

}  // namespace oft::nn
