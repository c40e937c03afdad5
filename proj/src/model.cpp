#include "dpdcan/model.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>

#include "dpdcan/errors.hpp"
#include "dpdcan/mathfn.hpp"
#include "dpdcan/rng.hpp"

namespace dpdcan::model {

namespace {

constexpr double kMeanClampLo = 1e-5;
constexpr double kMeanClampHi = 1e6;
constexpr double kDispClampLo = 1e-4;
constexpr double kDispClampHi = 1e4;

std::size_t affine_size(const Affine& a) {
    return a.weight.data.size() + a.bias.size();
}

void affine_forward(const Affine& a, const double* x, double* y) {
    const std::size_t out = a.weight.rows, in = a.weight.cols;
    for (std::size_t i = 0; i < out; ++i)
        y[i] = a.bias[i] + dot(a.weight.row(i), x, in);
}

// Accumulates dW and db at gw/gb; writes the input adjoint into dx when
// requested.
void affine_backward(const Affine& a, const double* x, const double* dy,
                     double* gw, double* gb, double* dx) {
    const std::size_t out = a.weight.rows, in = a.weight.cols;
    if (dx) std::fill(dx, dx + in, 0.0);
    for (std::size_t i = 0; i < out; ++i) {
        const double g = dy[i];
        gb[i] += g;
        if (g == 0.0) continue;
        double* gwrow = gw + i * in;
        for (std::size_t j = 0; j < in; ++j) gwrow[j] += g * x[j];
        if (dx) {
            const double* wrow = a.weight.row(i);
            for (std::size_t j = 0; j < in; ++j) dx[j] += g * wrow[j];
        }
    }
}

// Flat offsets of each tensor inside the [protected | exposed] layout.
struct Layout {
    std::vector<std::size_t> enc;  // offset of encoder[l].weight (bias follows)
    std::vector<std::size_t> dec;
    std::size_t head_mean = 0, head_disp = 0, head_drop = 0, centers = 0;
    std::size_t protected_size = 0, exposed_size = 0;

    static Layout of(const ModelParams& p) {
        Layout ly;
        std::size_t off = 0;
        for (const auto& a : p.encoder) {
            ly.enc.push_back(off);
            off += affine_size(a);
        }
        ly.protected_size = off;
        off = 0;
        for (const auto& a : p.decoder) {
            ly.dec.push_back(off);
            off += affine_size(a);
        }
        ly.head_mean = off;
        off += affine_size(p.head_mean);
        ly.head_disp = off;
        off += affine_size(p.head_dispersion);
        ly.head_drop = off;
        off += affine_size(p.head_dropout);
        ly.centers = off;
        off += p.cluster_centers.data.size();
        ly.exposed_size = off;
        return ly;
    }
};

struct EncCache {
    const double* input = nullptr;
    std::vector<Vec> pre;  // per layer pre-activation
    std::vector<Vec> act;  // post-activation; last layer is linear
};

void encode_one(const ModelParams& p, const double* x, EncCache& c) {
    const std::size_t layers = p.encoder.size();
    c.input = x;
    c.pre.resize(layers);
    c.act.resize(layers);
    const double* cur = x;
    for (std::size_t l = 0; l < layers; ++l) {
        const auto& a = p.encoder[l];
        c.pre[l].resize(a.weight.rows);
        affine_forward(a, cur, c.pre[l].data());
        c.act[l] = c.pre[l];
        if (l + 1 < layers)
            for (auto& v : c.act[l]) v = v > 0.0 ? v : 0.0;
        cur = c.act[l].data();
    }
}

// Chains dz (adjoint of the latent output) down to the input, accumulating
// parameter gradients into the protected buffer.
void encoder_backward(const ModelParams& p, const Layout& ly, const EncCache& c,
                      Vec dz, double* gprot) {
    for (std::size_t l = p.encoder.size(); l-- > 0;) {
        if (l + 1 < p.encoder.size())
            for (std::size_t i = 0; i < dz.size(); ++i)
                if (c.pre[l][i] <= 0.0) dz[i] = 0.0;
        const auto& a = p.encoder[l];
        const double* input = l == 0 ? c.input : c.act[l - 1].data();
        double* gw = gprot + ly.enc[l];
        double* gb = gw + a.weight.data.size();
        Vec dx(l == 0 ? 0 : a.weight.cols);
        affine_backward(a, input, dz.data(), gw, gb, l == 0 ? nullptr : dx.data());
        dz = std::move(dx);
    }
}

struct DecCache {
    const double* z = nullptr;
    double sf = 1.0;
    std::vector<Vec> pre, act;  // trunk, all ReLU
    Vec am, ad, ap;             // head pre-activations
    Vec mu, theta, pi;          // mapped ZINB parameters
};

void decode_one(const ModelParams& p, const double* z, double sf, DecCache& c) {
    const std::size_t layers = p.decoder.size();
    c.z = z;
    c.sf = sf;
    c.pre.resize(layers);
    c.act.resize(layers);
    const double* cur = z;
    for (std::size_t l = 0; l < layers; ++l) {
        const auto& a = p.decoder[l];
        c.pre[l].resize(a.weight.rows);
        affine_forward(a, cur, c.pre[l].data());
        c.act[l] = c.pre[l];
        for (auto& v : c.act[l]) v = v > 0.0 ? v : 0.0;
        cur = c.act[l].data();
    }
    const std::size_t d = p.head_mean.weight.rows;
    c.am.resize(d);
    c.ad.resize(d);
    c.ap.resize(d);
    affine_forward(p.head_mean, cur, c.am.data());
    affine_forward(p.head_dispersion, cur, c.ad.data());
    affine_forward(p.head_dropout, cur, c.ap.data());
    c.mu.resize(d);
    c.theta.resize(d);
    c.pi.resize(d);
    for (std::size_t j = 0; j < d; ++j) {
        c.mu[j] = sf * std::clamp(std::exp(c.am[j]), kMeanClampLo, kMeanClampHi);
        c.theta[j] = std::clamp(softplus(c.ad[j]), kDispClampLo, kDispClampHi);
        c.pi[j] = sigmoid(c.ap[j]);
    }
}

// Consumes the ZINB adjoints (dmu/dtheta/dpi), accumulates head and trunk
// gradients into gexp, and returns the latent adjoint.
Vec decode_backward(const ModelParams& p, const Layout& ly, const DecCache& c,
                    const Vec& dmu, const Vec& dtheta, const Vec& dpi,
                    double* gexp) {
    const std::size_t d = c.mu.size();
    Vec dam(d), dad(d), dap(d);
    for (std::size_t j = 0; j < d; ++j) {
        double e = std::exp(c.am[j]);
        dam[j] = (e > kMeanClampLo && e < kMeanClampHi) ? dmu[j] * c.sf * e : 0.0;
        double sp = softplus(c.ad[j]);
        dad[j] = (sp > kDispClampLo && sp < kDispClampHi)
                     ? dtheta[j] * sigmoid(c.ad[j])
                     : 0.0;
        dap[j] = dpi[j] * c.pi[j] * (1.0 - c.pi[j]);
    }

    const double* trunk_out = c.act.back().data();
    const std::size_t hidden = p.head_mean.weight.cols;
    Vec dt(hidden, 0.0), scratch(hidden);
    auto head_back = [&](const Affine& head, std::size_t off, const Vec& dy) {
        affine_backward(head, trunk_out, dy.data(), gexp + off,
                        gexp + off + head.weight.data.size(), scratch.data());
        for (std::size_t j = 0; j < hidden; ++j) dt[j] += scratch[j];
    };
    head_back(p.head_mean, ly.head_mean, dam);
    head_back(p.head_dispersion, ly.head_disp, dad);
    head_back(p.head_dropout, ly.head_drop, dap);

    Vec dy = std::move(dt);
    for (std::size_t l = p.decoder.size(); l-- > 0;) {
        for (std::size_t i = 0; i < dy.size(); ++i)
            if (c.pre[l][i] <= 0.0) dy[i] = 0.0;
        const auto& a = p.decoder[l];
        const double* input = l == 0 ? c.z : c.act[l - 1].data();
        double* gw = gexp + ly.dec[l];
        double* gb = gw + a.weight.data.size();
        Vec dx(a.weight.cols);
        affine_backward(a, input, dy.data(), gw, gb, dx.data());
        dy = std::move(dx);
    }
    return dy;
}

void validate_bindings(const ModelParams& p, const LossBindings& b) {
    if (!b.features || !b.raw_counts || !b.size_factors)
        throw std::invalid_argument(
            "loss bindings: features/raw_counts/size_factors required");
    if (b.features->cols != p.dims.input_dim)
        throw std::invalid_argument(
            "loss bindings: feature width does not match model input");
    if (b.mode == LossMode::instance && b.weights.rho < 1.0 &&
        (!b.aug1 || !b.aug2))
        throw std::invalid_argument(
            "loss bindings: instance mode requires augmented views");
    if (b.mode == LossMode::cluster && !b.target_p)
        throw std::invalid_argument(
            "loss bindings: cluster mode requires a target distribution");
}

// Shared per-step term: the cluster-cluster loss depends only on the
// centers, so every sample sees the same value and gradient.
struct CenterTerm {
    double value = 0.0;
    Matrix grad;  // beta3-scaled
};

CenterTerm center_term(const ModelParams& p, const LossBindings& b) {
    CenterTerm t;
    if (b.mode != LossMode::cluster || b.weights.beta3 == 0.0) return t;
    t.value = losses::cluster_loss(p.cluster_centers, t.grad);
    for (auto& v : t.grad.data) v *= b.weights.beta3;
    return t;
}

double sample_grad_impl(const ModelParams& p, const Layout& ly,
                        const LossBindings& b, std::size_t idx,
                        std::size_t lot_pos, const CenterTerm& cc, double* gprot,
                        double* gexp);

// Full per-sample loss + gradient. gprot/gexp must be zeroed by the caller.
// Loss-domain violations (degenerate embeddings, out-of-range ZINB inputs)
// surface as divergence tagged with the sample index.
double sample_grad(const ModelParams& p, const Layout& ly, const LossBindings& b,
                   std::size_t idx, std::size_t lot_pos, const CenterTerm& cc,
                   double* gprot, double* gexp) {
    try {
        return sample_grad_impl(p, ly, b, idx, lot_pos, cc, gprot, gexp);
    } catch (const std::domain_error& e) {
        throw DivergenceError("sample " + std::to_string(idx) + ": " + e.what());
    }
}

double sample_grad_impl(const ModelParams& p, const Layout& ly,
                        const LossBindings& b, std::size_t idx,
                        std::size_t lot_pos, const CenterTerm& cc, double* gprot,
                        double* gexp) {
    const std::size_t d = p.dims.input_dim;
    const double zinb_w =
        b.mode == LossMode::instance ? b.weights.rho : b.weights.beta1;

    EncCache e0;
    encode_one(p, b.features->row(idx), e0);
    const Vec& z = e0.act.back();

    double loss = 0.0;
    Vec dz(z.size(), 0.0);
    if (zinb_w != 0.0) {
        DecCache dc;
        decode_one(p, z.data(), (*b.size_factors)[idx], dc);
        Vec dmu(d), dth(d), dpi_(d);
        double zinb = 0.0;
        const double scale = zinb_w / static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
            losses::ZinbGrad g;
            zinb += losses::zinb_nll((*b.raw_counts)(idx, j), dc.mu[j], dc.theta[j],
                                     dc.pi[j], g);
            dmu[j] = g.d_mean * scale;
            dth[j] = g.d_dispersion * scale;
            dpi_[j] = g.d_dropout * scale;
        }
        zinb /= static_cast<double>(d);
        loss += zinb_w * zinb;
        dz = decode_backward(p, ly, dc, dmu, dth, dpi_, gexp);
    }

    if (b.mode == LossMode::instance) {
        encoder_backward(p, ly, e0, std::move(dz), gprot);
        const double w = 1.0 - b.weights.rho;
        if (w != 0.0) {
            EncCache e1, e2;
            encode_one(p, b.aug1->row(lot_pos), e1);
            encode_one(p, b.aug2->row(lot_pos), e2);
            Vec g1, g2;
            double inst = losses::instance_loss(e1.act.back(), e2.act.back(), g1, g2);
            double gw = b.stop_gradient ? 0.5 * w : w;
            for (auto& v : g1) v *= gw;
            for (auto& v : g2) v *= gw;
            encoder_backward(p, ly, e1, std::move(g1), gprot);
            encoder_backward(p, ly, e2, std::move(g2), gprot);
            loss += w * inst;
        }
    } else {
        Vec dz_kl;
        Matrix gc(p.cluster_centers.rows, p.cluster_centers.cols);
        double kl = losses::kl_cluster_grad(z.data(), p.cluster_centers,
                                            b.target_p->row(idx), b.weights.beta2,
                                            dz_kl, gc);
        for (std::size_t k = 0; k < dz.size(); ++k)
            dz[k] += b.weights.beta2 * dz_kl[k];
        encoder_backward(p, ly, e0, std::move(dz), gprot);
        double* gcent = gexp + ly.centers;
        for (std::size_t k = 0; k < gc.data.size(); ++k) gcent[k] += gc.data[k];
        loss += b.weights.beta2 * kl;
        if (b.weights.beta3 != 0.0) {
            loss += b.weights.beta3 * cc.value;
            for (std::size_t k = 0; k < cc.grad.data.size(); ++k)
                gcent[k] += cc.grad.data[k];
        }
    }

    if (!std::isfinite(loss))
        throw DivergenceError("non-finite loss at sample " + std::to_string(idx));
    return loss;
}

void parallel_for_impl(std::size_t count, unsigned threads,
                       const std::function<void(std::size_t)>& fn) {
    if (threads <= 1 || count <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    const unsigned workers = std::min<unsigned>(threads, static_cast<unsigned>(count));
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mu;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (unsigned w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (;;) {
                std::size_t i = next.fetch_add(1);
                if (i >= count) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mu);
                    if (!error) error = std::current_exception();
                    return;
                }
            }
        });
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace

std::size_t ModelParams::protected_size() const {
    std::size_t n = 0;
    for (const auto& a : encoder) n += affine_size(a);
    return n;
}

std::size_t ModelParams::exposed_size() const {
    std::size_t n = 0;
    for (const auto& a : decoder) n += affine_size(a);
    n += affine_size(head_mean) + affine_size(head_dispersion) +
         affine_size(head_dropout);
    n += cluster_centers.data.size();
    return n;
}

Vec ModelParams::to_flat() const {
    Vec flat;
    flat.reserve(total_size());
    auto push = [&flat](const Affine& a) {
        flat.insert(flat.end(), a.weight.data.begin(), a.weight.data.end());
        flat.insert(flat.end(), a.bias.begin(), a.bias.end());
    };
    for (const auto& a : encoder) push(a);
    for (const auto& a : decoder) push(a);
    push(head_mean);
    push(head_dispersion);
    push(head_dropout);
    flat.insert(flat.end(), cluster_centers.data.begin(), cluster_centers.data.end());
    return flat;
}

void ModelParams::from_flat(const Vec& flat) {
    if (flat.size() != total_size())
        throw std::invalid_argument("flat parameter vector has wrong length");
    std::size_t off = 0;
    auto pull = [&](Affine& a) {
        std::copy_n(flat.begin() + off, a.weight.data.size(), a.weight.data.begin());
        off += a.weight.data.size();
        std::copy_n(flat.begin() + off, a.bias.size(), a.bias.begin());
        off += a.bias.size();
    };
    for (auto& a : encoder) pull(a);
    for (auto& a : decoder) pull(a);
    pull(head_mean);
    pull(head_dispersion);
    pull(head_dropout);
    std::copy_n(flat.begin() + off, cluster_centers.data.size(),
                cluster_centers.data.begin());
}

ModelParams init_params(const ModelDims& dims, std::uint64_t seed) {
    if (dims.input_dim < 1) throw std::invalid_argument("input_dim must be >= 1");
    if (dims.latent_dim < 1) throw std::invalid_argument("latent_dim must be >= 1");
    if (dims.n_clusters < 1) throw std::invalid_argument("n_clusters must be >= 1");

    RngStream rng(seed, /*salt=*/0x696e6974);
    ModelParams p;
    p.dims = dims;

    auto make = [&rng](std::size_t out, std::size_t in) {
        Affine a;
        a.weight = Matrix(out, in);
        a.bias.assign(out, 0.0);
        double bound = 1.0 / std::sqrt(static_cast<double>(in));
        for (auto& w : a.weight.data) w = rng.uniform(-bound, bound);
        return a;
    };

    std::vector<std::size_t> widths;
    widths.push_back(dims.input_dim);
    for (auto h : dims.encoder_hidden) widths.push_back(h);
    widths.push_back(dims.latent_dim);
    for (std::size_t l = 0; l + 1 < widths.size(); ++l)
        p.encoder.push_back(make(widths[l + 1], widths[l]));
    for (std::size_t l = widths.size() - 1; l >= 2; --l)
        p.decoder.push_back(make(widths[l - 1], widths[l]));
    p.head_mean = make(dims.input_dim, widths[1]);
    p.head_dispersion = make(dims.input_dim, widths[1]);
    p.head_dropout = make(dims.input_dim, widths[1]);
    p.cluster_centers = Matrix(dims.n_clusters, dims.latent_dim);
    return p;
}

Matrix encode(const ModelParams& params, const Matrix& x) {
    if (x.cols != params.dims.input_dim && x.rows > 0)
        throw std::invalid_argument("encode: input has " + std::to_string(x.cols) +
                                    " columns, expected " +
                                    std::to_string(params.dims.input_dim));
    Matrix z(x.rows, params.dims.latent_dim);
    EncCache cache;
    for (std::size_t i = 0; i < x.rows; ++i) {
        encode_one(params, x.row(i), cache);
        std::copy(cache.act.back().begin(), cache.act.back().end(), z.row(i));
    }
    return z;
}

DecodedOutputs decode(const ModelParams& params, const Matrix& z,
                      const Vec& size_factors) {
    if (z.cols != params.dims.latent_dim && z.rows > 0)
        throw std::invalid_argument("decode: latent width mismatch");
    if (size_factors.size() != z.rows)
        throw std::invalid_argument("decode: size factor count mismatch");
    for (double s : size_factors)
        if (!(s > 0.0))
            throw std::domain_error("decode: size factors must be positive");

    const std::size_t d = params.dims.input_dim;
    DecodedOutputs out{Matrix(z.rows, d), Matrix(z.rows, d), Matrix(z.rows, d)};
    DecCache cache;
    for (std::size_t i = 0; i < z.rows; ++i) {
        decode_one(params, z.row(i), size_factors[i], cache);
        std::copy(cache.mu.begin(), cache.mu.end(), out.mean.row(i));
        std::copy(cache.theta.begin(), cache.theta.end(), out.dispersion.row(i));
        std::copy(cache.pi.begin(), cache.pi.end(), out.dropout.row(i));
    }
    return out;
}

double per_sample_loss(const ModelParams& params, const LossBindings& bindings,
                       std::size_t sample_index, std::size_t lot_position) {
    validate_bindings(params, bindings);
    Layout ly = Layout::of(params);
    CenterTerm cc = center_term(params, bindings);
    Vec gprot(ly.protected_size, 0.0), gexp(ly.exposed_size, 0.0);
    return sample_grad(params, ly, bindings, sample_index, lot_position, cc,
                       gprot.data(), gexp.data());
}

void per_sample_gradients(const ModelParams& params, const LossBindings& bindings,
                          const std::vector<std::size_t>& batch, GradBatch& out) {
    validate_bindings(params, bindings);
    const Layout ly = Layout::of(params);
    const CenterTerm cc = center_term(params, bindings);

    // Reuse the buffers across steps; fresh pages every step cost more than
    // the gradients themselves. Rows are zeroed by the worker that fills
    // them.
    if (out.protected_parts.rows != batch.size() ||
        out.protected_parts.cols != ly.protected_size)
        out.protected_parts = Matrix(batch.size(), ly.protected_size);
    if (out.exposed_parts.rows != batch.size() ||
        out.exposed_parts.cols != ly.exposed_size)
        out.exposed_parts = Matrix(batch.size(), ly.exposed_size);
    out.loss.assign(batch.size(), 0.0);

    parallel_for_impl(batch.size(), thread_cap(), [&](std::size_t i) {
        double* prot = out.protected_parts.row(i);
        double* exp_row = out.exposed_parts.row(i);
        std::fill(prot, prot + ly.protected_size, 0.0);
        std::fill(exp_row, exp_row + ly.exposed_size, 0.0);
        out.loss[i] = sample_grad(params, ly, bindings, batch[i], i, cc, prot,
                                  exp_row);
    });
}

std::vector<PerSampleGradient> per_sample_gradients(
    const ModelParams& params, const LossBindings& bindings,
    const std::vector<std::size_t>& batch) {
    GradBatch gb;
    per_sample_gradients(params, bindings, batch, gb);
    std::vector<PerSampleGradient> list(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        list[i].sample_index = batch[i];
        list[i].protected_part.assign(
            gb.protected_parts.row(i),
            gb.protected_parts.row(i) + gb.protected_parts.cols);
        list[i].exposed_part.assign(gb.exposed_parts.row(i),
                                    gb.exposed_parts.row(i) + gb.exposed_parts.cols);
    }
    return list;
}

OptimizerState OptimizerState::sgd(double lr) {
    OptimizerState s;
    s.kind = Kind::sgd;
    s.learning_rate = lr;
    return s;
}

OptimizerState OptimizerState::adam(double lr) {
    OptimizerState s;
    s.kind = Kind::adam;
    s.learning_rate = lr;
    return s;
}

OptimizerState OptimizerState::adadelta(double lr) {
    OptimizerState s;
    s.kind = Kind::adadelta;
    s.learning_rate = lr;
    return s;
}

void optimizer_step(OptimizerState& state, ModelParams& params, const Vec& update) {
    const std::size_t n = params.total_size();
    if (update.size() != n)
        throw std::invalid_argument("optimizer update length " +
                                    std::to_string(update.size()) +
                                    " != " + std::to_string(n));
    Vec flat = params.to_flat();
    state.step += 1;
    const double lr = state.learning_rate;

    switch (state.kind) {
        case OptimizerState::Kind::sgd:
            for (std::size_t i = 0; i < n; ++i) flat[i] -= lr * update[i];
            break;
        case OptimizerState::Kind::adam: {
            constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
            if (state.m.size() != n) state.m.assign(n, 0.0);
            if (state.v.size() != n) state.v.assign(n, 0.0);
            const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
            const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
            for (std::size_t i = 0; i < n; ++i) {
                state.m[i] = b1 * state.m[i] + (1.0 - b1) * update[i];
                state.v[i] = b2 * state.v[i] + (1.0 - b2) * update[i] * update[i];
                flat[i] -= lr * (state.m[i] / bc1) / (std::sqrt(state.v[i] / bc2) + eps);
            }
            break;
        }
        case OptimizerState::Kind::adadelta: {
            constexpr double rho = 0.95, eps = 1e-6;
            if (state.m.size() != n) state.m.assign(n, 0.0);
            if (state.v.size() != n) state.v.assign(n, 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                state.m[i] = rho * state.m[i] + (1.0 - rho) * update[i] * update[i];
                double dx =
                    -std::sqrt((state.v[i] + eps) / (state.m[i] + eps)) * update[i];
                state.v[i] = rho * state.v[i] + (1.0 - rho) * dx * dx;
                flat[i] += lr * dx;
            }
            break;
        }
    }
    params.from_flat(flat);
}

std::vector<std::pair<std::size_t, std::size_t>> protected_layer_ranges(
    const ModelParams& params) {
    std::vector<std::pair<std::size_t, std::size_t>> ranges;
    std::size_t off = 0;
    for (const auto& a : params.encoder) {
        ranges.emplace_back(off, off + affine_size(a));
        off += affine_size(a);
    }
    return ranges;
}

void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn) {
    parallel_for_impl(count, thread_cap(), fn);
}

unsigned thread_cap() {
    static const unsigned cap = [] {
        if (const char* env = std::getenv("DPDCAN_THREADS")) {
            long v = std::atol(env);
            if (v >= 1) return static_cast<unsigned>(v);
        }
        unsigned hw = std::thread::hardware_concurrency();
        return hw > 0 ? hw : 1u;
    }();
    return cap;
}

}  // namespace dpdcan::model
