#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <iostream>
#include <limits>
#include <string>
#include <unordered_set>
#include <vector>

#include "underspec/adam.hpp"
#include "underspec/errors.hpp"
#include "underspec/io.hpp"
#include "underspec/mlp.hpp"
#include "underspec/rng.hpp"
#include "underspec/tensor.hpp"

namespace underspec {

namespace detail {

// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns eigenvalues
// in descending order with matching eigenvectors as rows of `vectors`.
// Plenty for the sizes here (d <= a few hundred).
inline void jacobi_eigh(const Tensor& sym, Vec& values, Tensor& vectors) {
    const std::size_t n = sym.rows();
    Tensor a = sym;
    vectors = Tensor({n, n});
    for (std::size_t i = 0; i < n; ++i) vectors.at(i, i) = 1.0;

    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a.at(p, q) * a.at(p, q);
        if (off < 1e-24) break;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a.at(p, q);
                if (std::abs(apq) < 1e-300) continue;
                const double app = a.at(p, p), aqq = a.at(q, q);
                const double tau = (aqq - app) / (2.0 * apq);
                const double t = (tau >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a.at(k, p), akq = a.at(k, q);
                    a.at(k, p) = c * akp - s * akq;
                    a.at(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a.at(p, k), aqk = a.at(q, k);
                    a.at(p, k) = c * apk - s * aqk;
                    a.at(q, k) = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vpk = vectors.at(p, k), vqk = vectors.at(q, k);
                    vectors.at(p, k) = c * vpk - s * vqk;
                    vectors.at(q, k) = s * vpk + c * vqk;
                }
            }
        }
    }

    values.resize(n);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) {
        values[i] = a.at(i, i);
        order[i] = i;
    }
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t i, std::size_t j) { return values[i] > values[j]; });
    Vec sorted_vals(n);
    Tensor sorted_vecs({n, n});
    for (std::size_t r = 0; r < n; ++r) {
        sorted_vals[r] = values[order[r]];
        for (std::size_t k = 0; k < n; ++k) sorted_vecs.at(r, k) = vectors.at(order[r], k);
    }
    values = std::move(sorted_vals);
    vectors = std::move(sorted_vecs);
}

} // namespace detail

// ---------------------------------------------------------------------------
// PCA manifold model
// ---------------------------------------------------------------------------

struct PcaModel {
    Vec mean;              // d_in
    Tensor components;     // n_comp x d_in, orthonormal rows
    Vec explained_variance;  // ratios, one per component

    std::size_t d_in() const { return mean.size(); }
    std::size_t n_components() const { return components.rows(); }
};

// Top right-singular vectors of the centered pool, via the covariance
// eigenproblem. Sign convention: first nonzero entry of each component is
// positive, so refits are identical.
inline PcaModel fit_pca(const Tensor& pool, std::size_t n_comp) {
    const std::size_t n = pool.rows(), d = pool.cols();
    if (n_comp < 1 || n_comp > d) fail(ErrorKind::InvalidConfig, "n_comp must be in [1, d_in]");
    if (n < n_comp) fail(ErrorKind::InvalidConfig, "need at least n_comp pool rows");

    PcaModel model;
    model.mean.assign(d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = pool.row(i);
        for (std::size_t j = 0; j < d; ++j) model.mean[j] += row[j];
    }
    for (double& v : model.mean) v /= static_cast<double>(n);

    Tensor cov({d, d});
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = pool.row(i);
        for (std::size_t a = 0; a < d; ++a) {
            const double xa = row[a] - model.mean[a];
            double* crow = cov.row(a);
            for (std::size_t b = a; b < d; ++b) crow[b] += xa * (row[b] - model.mean[b]);
        }
    }
    const double denom = n > 1 ? static_cast<double>(n - 1) : 1.0;
    for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = a; b < d; ++b) {
            cov.at(a, b) /= denom;
            cov.at(b, a) = cov.at(a, b);
        }

    Vec eigvals;
    Tensor eigvecs;
    detail::jacobi_eigh(cov, eigvals, eigvecs);

    double total = 0.0;
    for (double v : eigvals) total += std::max(v, 0.0);
    const double rank_tol = std::max(1e-12, 1e-10 * std::max(eigvals.empty() ? 0.0 : eigvals[0], 0.0));
    std::size_t rank = 0;
    while (rank < d && eigvals[rank] > rank_tol) ++rank;
    if (n_comp > rank) {
        fail(ErrorKind::Degenerate, "requested " + std::to_string(n_comp) +
                                        " components but pool rank is " + std::to_string(rank));
    }

    model.components = Tensor({n_comp, d});
    model.explained_variance.resize(n_comp);
    for (std::size_t r = 0; r < n_comp; ++r) {
        double sign = 1.0;
        for (std::size_t k = 0; k < d; ++k) {
            if (eigvecs.at(r, k) != 0.0) {
                sign = eigvecs.at(r, k) > 0.0 ? 1.0 : -1.0;
                break;
            }
        }
        for (std::size_t k = 0; k < d; ++k) model.components.at(r, k) = sign * eigvecs.at(r, k);
        model.explained_variance[r] = total > 0.0 ? std::max(eigvals[r], 0.0) / total : 0.0;
    }
    return model;
}

// v_proj = C^T (C v). Independent of the base point for a linear manifold.
inline Vec pca_project_vector(const PcaModel& model, const Vec& v) {
    if (v.size() != model.d_in()) {
        fail(ErrorKind::ShapeMismatch, "vector length does not match PCA d_in");
    }
    const std::size_t m = model.n_components(), d = model.d_in();
    Vec coeffs(m);
    for (std::size_t r = 0; r < m; ++r) coeffs[r] = dot(model.components.row(r), v.data(), d);
    Vec out(d, 0.0);
    for (std::size_t r = 0; r < m; ++r) {
        const double* row = model.components.row(r);
        const double c = coeffs[r];
        for (std::size_t k = 0; k < d; ++k) out[k] += c * row[k];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Auto-encoder manifold model
// ---------------------------------------------------------------------------

// Encoder outputs d_latent values (2*d_latent when variational: mean then
// log-variance). Decoder maps d_latent back to d_in through a sigmoid so
// reconstructions live in [0,1]. Projection always uses the encoder mean.
struct AeModel {
    MlpSpec enc_spec;
    MlpParams enc;
    MlpSpec dec_spec;
    MlpParams dec;
    std::size_t d_latent = 0;
    bool variational = false;
    double kl_weight = 0.01;

    std::size_t d_in() const { return enc_spec.d_in(); }

    void validate() const {
        enc_spec.validate();
        dec_spec.validate();
        enc.check_matches(enc_spec);
        dec.check_matches(dec_spec);
        const std::size_t want = variational ? 2 * d_latent : d_latent;
        if (enc_spec.d_out() != want) {
            fail(ErrorKind::ShapeMismatch, "encoder output width does not match d_latent");
        }
        if (dec_spec.d_in() != d_latent || dec_spec.d_out() != enc_spec.d_in()) {
            fail(ErrorKind::ShapeMismatch, "decoder widths do not match encoder");
        }
        if (!dec_spec.sigmoid_output) {
            fail(ErrorKind::InvalidConfig, "decoder must use a sigmoid output");
        }
    }
};

// Builds an untrained model skeleton with the given hidden widths.
inline AeModel make_ae_skeleton(std::size_t d_in, std::size_t d_latent,
                                const std::vector<std::size_t>& hidden, bool variational,
                                double kl_weight, std::uint64_t seed) {
    AeModel m;
    m.d_latent = d_latent;
    m.variational = variational;
    m.kl_weight = kl_weight;
    m.enc_spec.layer_widths.push_back(d_in);
    for (std::size_t h : hidden) m.enc_spec.layer_widths.push_back(h);
    m.enc_spec.layer_widths.push_back(variational ? 2 * d_latent : d_latent);
    m.dec_spec.layer_widths.push_back(d_latent);
    for (auto it = hidden.rbegin(); it != hidden.rend(); ++it) {
        m.dec_spec.layer_widths.push_back(*it);
    }
    m.dec_spec.layer_widths.push_back(d_in);
    m.dec_spec.sigmoid_output = true;
    m.enc = init_params(m.enc_spec, derive_seed(seed, "ae-enc"));
    m.dec = init_params(m.dec_spec, derive_seed(seed, "ae-dec"));
    return m;
}

// Encoder mean for x (drops the log-variance half when variational).
inline Vec ae_encode_mean(const AeModel& model, const Vec& x, ForwardTrace* trace = nullptr) {
    ForwardTrace local;
    ForwardTrace& tr = trace ? *trace : local;
    mlp_forward_into(model.enc_spec, model.enc, x, tr);
    return Vec(tr.post.back().begin(), tr.post.back().begin() + model.d_latent);
}

// proj(x) = decoder(encoder-mean(x)). Deterministic even for variational models.
inline Vec ae_project_point(const AeModel& model, const Vec& x) {
    if (x.size() != model.d_in()) fail(ErrorKind::ShapeMismatch, "point length != d_in");
    Vec z = ae_encode_mean(model, x);
    ForwardTrace dec_trace;
    mlp_forward_into(model.dec_spec, model.dec, z, dec_trace);
    return dec_trace.post.back();
}

namespace detail {

// Pushes v through the Jacobian of one MLP at the traced point: biases are
// dropped at linear layers and activation gates are frozen by the x-path.
inline Vec mlp_push_vector(const MlpSpec& spec, const MlpParams& params, const ForwardTrace& trace,
                           Vec v) {
    const std::size_t L = spec.n_layers();
    Vec next;
    for (std::size_t l = 0; l < L; ++l) {
        const Tensor& W = params.weights[l];
        const std::size_t out = W.rows(), in = W.cols();
        next.assign(out, 0.0);
        for (std::size_t i = 0; i < out; ++i) next[i] = dot(W.row(i), v.data(), in);
        if (l + 1 < L) {
            for (std::size_t i = 0; i < out; ++i) {
                next[i] *= leaky_gate(trace.pre[l][i], spec.leaky_slope);
            }
        } else if (spec.sigmoid_output) {
            for (std::size_t i = 0; i < out; ++i) {
                const double s = trace.post[l][i];
                next[i] *= s * (1.0 - s);
            }
        }
        v.swap(next);
    }
    return v;
}

} // namespace detail

// v_hat = J(x) v where J is the Jacobian of ae_project_point at x.
inline Vec ae_project_vector(const AeModel& model, const Vec& x, const Vec& v) {
    if (x.size() != model.d_in() || v.size() != model.d_in()) {
        fail(ErrorKind::ShapeMismatch, "ae_project_vector expects d_in-length x and v");
    }
    ForwardTrace enc_trace;
    Vec z = ae_encode_mean(model, x, &enc_trace);
    ForwardTrace dec_trace;
    mlp_forward_into(model.dec_spec, model.dec, z, dec_trace);

    Vec vz = detail::mlp_push_vector(model.enc_spec, model.enc, enc_trace, v);
    vz.resize(model.d_latent);  // mean head only
    return detail::mlp_push_vector(model.dec_spec, model.dec, dec_trace, vz);
}

// ---------------------------------------------------------------------------
// Tagged manifold model + projection dispatch
// ---------------------------------------------------------------------------

enum class ManifoldKind : std::uint8_t { Pca = 0, Ae = 1 };

struct ManifoldModel {
    ManifoldKind kind = ManifoldKind::Pca;
    PcaModel pca;
    AeModel ae;
    std::size_t d_manifold = 0;

    static ManifoldModel from_pca(PcaModel m) {
        ManifoldModel mm;
        mm.kind = ManifoldKind::Pca;
        mm.d_manifold = m.n_components();
        mm.pca = std::move(m);
        return mm;
    }

    static ManifoldModel from_ae(AeModel m) {
        ManifoldModel mm;
        mm.kind = ManifoldKind::Ae;
        mm.d_manifold = m.d_latent;
        mm.ae = std::move(m);
        return mm;
    }

    std::size_t d_in() const {
        return kind == ManifoldKind::Pca ? pca.d_in() : ae.d_in();
    }

    Vec project_vector(const Vec& x, const Vec& v) const {
        return kind == ManifoldKind::Pca ? pca_project_vector(pca, v)
                                         : ae_project_vector(ae, x, v);
    }
};

// ---------------------------------------------------------------------------
// Intrinsic dimensionality (k-NN maximum likelihood)
// ---------------------------------------------------------------------------

// Levina-Bickel per-anchor estimate with harmonic aggregation:
//   inv_i = (1/(k-1)) sum_{j<k} ln(T_k / T_j),   dim = n / sum_i inv_i.
// Exact duplicate rows are dropped first (they produce zero distances).
inline double estimate_intrinsic_dim(const Tensor& pool, std::size_t k) {
    const std::size_t d = pool.cols();
    if (k < 2) fail(ErrorKind::InvalidConfig, "need k >= 2 neighbors");

    std::vector<std::size_t> keep;
    {
        std::unordered_set<std::string> seen;
        for (std::size_t i = 0; i < pool.rows(); ++i) {
            std::string key(reinterpret_cast<const char*>(pool.row(i)), d * sizeof(double));
            if (seen.insert(std::move(key)).second) keep.push_back(i);
        }
        if (keep.size() < pool.rows()) {
            std::cerr << "estimate_intrinsic_dim: dropped " << (pool.rows() - keep.size())
                      << " duplicate points\n";
        }
    }
    const std::size_t n = keep.size();
    if (n < 2) fail(ErrorKind::Degenerate, "pool collapses to fewer than two distinct points");
    if (n <= k) fail(ErrorKind::InvalidConfig, "need more distinct points than neighbors");

    double inv_sum = 0.0;
    Vec dists(n);
    for (std::size_t ai = 0; ai < n; ++ai) {
        const double* a = pool.row(keep[ai]);
        for (std::size_t bi = 0; bi < n; ++bi) {
            const double* b = pool.row(keep[bi]);
            double s = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double diff = a[j] - b[j];
                s += diff * diff;
            }
            dists[bi] = s;
        }
        dists[ai] = std::numeric_limits<double>::infinity();  // exclude self
        Vec nearest(dists);
        std::nth_element(nearest.begin(), nearest.begin() + static_cast<std::ptrdiff_t>(k - 1),
                         nearest.end());
        nearest.resize(k);
        std::sort(nearest.begin(), nearest.end());
        const double log_tk = 0.5 * std::log(nearest[k - 1]);
        double acc = 0.0;
        for (std::size_t j = 0; j + 1 < k; ++j) acc += log_tk - 0.5 * std::log(nearest[j]);
        inv_sum += acc / static_cast<double>(k - 1);
    }
    if (inv_sum <= 0.0) fail(ErrorKind::Degenerate, "degenerate neighbor distances");
    return static_cast<double>(n) / inv_sum;
}

// ---------------------------------------------------------------------------
// Auto-encoder training
// ---------------------------------------------------------------------------

struct AeTrainConfig {
    double lr = 0.001;
    std::size_t batch_size = 256;
    std::size_t n_epochs = 100;
};

struct AeTrainLog {
    Vec recon_per_epoch;
    Vec kl_per_epoch;
};

// Adam on reconstruction MSE (mean over coordinates) plus kl_weight-scaled KL
// for variational models. Sampling uses the reparameterization trick during
// training only.
inline AeModel train_autoencoder(const Tensor& pool, AeModel model, const AeTrainConfig& cfg,
                                 std::uint64_t seed, AeTrainLog* log = nullptr) {
    model.validate();
    const std::size_t n = pool.rows(), d = pool.cols();
    if (n == 0) fail(ErrorKind::InvalidConfig, "empty pool");
    if (d != model.d_in()) fail(ErrorKind::ShapeMismatch, "pool width != model d_in");

    AdamState enc_opt = AdamState::init(model.enc_spec, cfg.lr);
    AdamState dec_opt = AdamState::init(model.dec_spec, cfg.lr);
    Rng order_rng(derive_seed(seed, "ae-order"));
    Rng noise_rng(derive_seed(seed, "ae-noise"));

    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;

    const std::size_t bs = std::min(cfg.batch_size, n);
    MlpParams enc_g = MlpParams::zeros(model.enc_spec);
    MlpParams dec_g = MlpParams::zeros(model.dec_spec);
    ForwardTrace enc_tr, dec_tr;
    Vec x(d), eps(model.d_latent), z(model.d_latent);

    for (std::size_t epoch = 0; epoch < cfg.n_epochs; ++epoch) {
        order_rng.shuffle(perm);
        double recon_sum = 0.0, kl_sum = 0.0;
        std::size_t count = 0;
        for (std::size_t start = 0; start + bs <= n; start += bs) {
            enc_g = MlpParams::zeros(model.enc_spec);
            dec_g = MlpParams::zeros(model.dec_spec);
            for (std::size_t bi = 0; bi < bs; ++bi) {
                const double* row = pool.row(perm[start + bi]);
                x.assign(row, row + d);
                mlp_forward_into(model.enc_spec, model.enc, x, enc_tr);
                const Vec& enc_out = enc_tr.post.back();

                double kl = 0.0;
                if (model.variational) {
                    for (std::size_t j = 0; j < model.d_latent; ++j) {
                        eps[j] = noise_rng.normal();
                        const double mu = enc_out[j];
                        const double lv = enc_out[model.d_latent + j];
                        z[j] = mu + std::exp(0.5 * lv) * eps[j];
                        kl += 0.5 * (mu * mu + std::exp(lv) - 1.0 - lv);
                    }
                } else {
                    z.assign(enc_out.begin(), enc_out.begin() + model.d_latent);
                }

                mlp_forward_into(model.dec_spec, model.dec, z, dec_tr);
                const Vec& xhat = dec_tr.post.back();

                Vec dxhat(d);
                double recon = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double e = xhat[j] - x[j];
                    recon += e * e;
                    dxhat[j] = 2.0 * e / static_cast<double>(d);
                }
                recon /= static_cast<double>(d);
                recon_sum += recon;
                kl_sum += kl;
                ++count;

                Vec dz;
                mlp_backward(model.dec_spec, model.dec, dec_tr, dxhat, &dec_g, &dz);

                Vec denc(enc_out.size(), 0.0);
                const double kw = model.kl_weight / static_cast<double>(d);
                for (std::size_t j = 0; j < model.d_latent; ++j) {
                    denc[j] = dz[j];
                    if (model.variational) {
                        const double mu = enc_out[j];
                        const double lv = enc_out[model.d_latent + j];
                        denc[j] += kw * mu;
                        denc[model.d_latent + j] =
                            dz[j] * eps[j] * 0.5 * std::exp(0.5 * lv) + kw * 0.5 * (std::exp(lv) - 1.0);
                    }
                }
                mlp_backward(model.enc_spec, model.enc, enc_tr, denc, &enc_g, nullptr);
            }
            const double scale = 1.0 / static_cast<double>(bs);
            enc_g.scale(scale);
            dec_g.scale(scale);
            adam_step(enc_opt, model.enc, enc_g);
            adam_step(dec_opt, model.dec, dec_g);
        }
        if (count > 0 && log) {
            log->recon_per_epoch.push_back(recon_sum / static_cast<double>(count));
            log->kl_per_epoch.push_back(kl_sum / static_cast<double>(count));
        }
        if (count > 0 && (!std::isfinite(recon_sum) || !std::isfinite(kl_sum))) {
            fail(ErrorKind::NonFinite, "auto-encoder training diverged");
        }
    }
    return model;
}

// ---------------------------------------------------------------------------
// Manifold file format: magic "UDM1"
// ---------------------------------------------------------------------------

namespace detail {

inline void write_mlp(std::ofstream& f, const MlpSpec& spec, const MlpParams& params) {
    io::write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(spec.layer_widths.size()));
    for (std::size_t w : spec.layer_widths) io::write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(w));
    io::write_pod<double>(f, spec.leaky_slope);
    io::write_pod<std::uint8_t>(f, spec.sigmoid_output ? 1 : 0);
    for (std::size_t l = 0; l < params.weights.size(); ++l) {
        io::write_array(f, params.weights[l].data.data(), params.weights[l].data.size());
        io::write_array(f, params.biases[l].data(), params.biases[l].size());
    }
}

inline void read_mlp(std::ifstream& f, MlpSpec& spec, MlpParams& params, const std::string& path) {
    const auto n_widths = io::read_pod<std::uint32_t>(f, path + " widths");
    if (n_widths < 2 || n_widths > 64) fail(ErrorKind::DimensionMismatch, "bad layer count in " + path);
    spec.layer_widths.clear();
    for (std::uint32_t i = 0; i < n_widths; ++i) {
        spec.layer_widths.push_back(io::read_pod<std::uint32_t>(f, path + " width"));
    }
    spec.leaky_slope = io::read_pod<double>(f, path + " slope");
    spec.sigmoid_output = io::read_pod<std::uint8_t>(f, path + " output flag") != 0;
    spec.validate();
    params = MlpParams::zeros(spec);
    for (std::size_t l = 0; l < params.weights.size(); ++l) {
        io::read_array(f, params.weights[l].data.data(), params.weights[l].data.size(), path);
        io::read_array(f, params.biases[l].data(), params.biases[l].size(), path);
    }
}

} // namespace detail

inline void save_manifold(const ManifoldModel& model, const std::string& path) {
    auto f = io::open_out(path);
    io::write_magic(f, "UDM1");
    io::write_pod<std::uint8_t>(f, static_cast<std::uint8_t>(model.kind));
    if (model.kind == ManifoldKind::Pca) {
        io::write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(model.pca.d_in()));
        io::write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(model.pca.n_components()));
        io::write_array(f, model.pca.mean.data(), model.pca.mean.size());
        io::write_array(f, model.pca.components.data.data(), model.pca.components.data.size());
        io::write_array(f, model.pca.explained_variance.data(), model.pca.explained_variance.size());
    } else {
        io::write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(model.ae.d_latent));
        io::write_pod<std::uint8_t>(f, model.ae.variational ? 1 : 0);
        io::write_pod<double>(f, model.ae.kl_weight);
        detail::write_mlp(f, model.ae.enc_spec, model.ae.enc);
        detail::write_mlp(f, model.ae.dec_spec, model.ae.dec);
    }
    if (!f) fail(ErrorKind::FileError, "write failed: " + path);
}

inline ManifoldModel load_manifold(const std::string& path) {
    auto f = io::open_in(path);
    io::expect_magic(f, "UDM1", path);
    const auto kind = io::read_pod<std::uint8_t>(f, "manifold kind");
    if (kind == 0) {
        const auto d = io::read_pod<std::uint32_t>(f, "pca d_in");
        const auto m = io::read_pod<std::uint32_t>(f, "pca n_comp");
        if (m > d) fail(ErrorKind::DimensionMismatch, "PCA n_comp > d_in in " + path);
        PcaModel pca;
        pca.mean.resize(d);
        io::read_array(f, pca.mean.data(), d, path);
        pca.components = Tensor({m, d});
        io::read_array(f, pca.components.data.data(), pca.components.data.size(), path);
        pca.explained_variance.resize(m);
        io::read_array(f, pca.explained_variance.data(), m, path);
        return ManifoldModel::from_pca(std::move(pca));
    }
    if (kind == 1) {
        AeModel ae;
        ae.d_latent = io::read_pod<std::uint32_t>(f, "ae d_latent");
        ae.variational = io::read_pod<std::uint8_t>(f, "ae variational") != 0;
        ae.kl_weight = io::read_pod<double>(f, "ae kl weight");
        detail::read_mlp(f, ae.enc_spec, ae.enc, path);
        detail::read_mlp(f, ae.dec_spec, ae.dec, path);
        ae.validate();
        return ManifoldModel::from_ae(std::move(ae));
    }
    fail(ErrorKind::DimensionMismatch, "unknown manifold kind in " + path);
}

} // namespace underspec
