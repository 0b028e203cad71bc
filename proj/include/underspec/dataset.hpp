#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "underspec/errors.hpp"
#include "underspec/io.hpp"
#include "underspec/rng.hpp"
#include "underspec/tensor.hpp"

namespace underspec {

struct Batch {
    Tensor inputs;                 // n x d_in
    std::vector<std::uint8_t> labels;  // length n, values in {0,1}

    std::size_t size() const { return inputs.rows(); }
    std::size_t d_in() const { return inputs.cols(); }

    void validate() const {
        if (inputs.rows() != labels.size()) {
            fail(ErrorKind::ShapeMismatch, "batch has " + std::to_string(inputs.rows()) +
                                               " rows but " + std::to_string(labels.size()) +
                                               " labels");
        }
        for (auto y : labels) {
            if (y > 1) fail(ErrorKind::InvalidConfig, "labels must be 0 or 1");
        }
    }
};

struct MaskableDataset {
    Tensor inputs;
    std::vector<std::uint8_t> labels;
    std::vector<std::uint8_t> masks;  // n x d_in bits as bytes; empty = unmasked

    bool has_masks() const { return !masks.empty(); }
};

// Configuration of the procedural tile generator. Tile t of an instance is
//   0.5*ones + s*(gamma_t/2)*u_t + V_t z + noise,  clamped to [0,1],
// with s the tile's class bit, u_t a fixed unit template interior to the tile
// and V_t an orthonormal nuisance basis (scaled 0.05) orthogonal to u_t.
// Difficulty decreases with t via the margin/noise ratio.
struct GenConfig {
    std::size_t n_tiles = 4;
    std::size_t tile_side = 8;  // k; d_in = n_tiles * k^2
    Vec margins = {0.6, 0.10, 0.07, 0.05};   // gamma_t
    Vec noise = {0.0045, 0.0026, 0.0022, 0.0019};  // sigma_t
    std::vector<std::size_t> nuisance_rank = {2, 2, 2, 2};  // r_t
    std::size_t n_train = 8192;
    std::size_t n_val = 2048;
    std::size_t n_pool = 5000;
    std::size_t n_test = 2048;  // per tile
    std::uint64_t seed = 1;

    std::size_t d_in() const { return n_tiles * tile_side * tile_side; }

    std::size_t true_intrinsic_dim() const {
        std::size_t d = 0;
        for (std::size_t r : nuisance_rank) d += r + 1;
        return d;
    }

    void validate() const {
        if (n_tiles == 0) fail(ErrorKind::InvalidConfig, "n_tiles must be positive");
        if (tile_side < 2) fail(ErrorKind::InvalidConfig, "tile_side must be at least 2");
        if (margins.size() != n_tiles) fail(ErrorKind::InvalidConfig, "margins must list one value per tile");
        if (noise.size() != n_tiles) fail(ErrorKind::InvalidConfig, "noise must list one value per tile");
        if (nuisance_rank.size() != n_tiles) {
            fail(ErrorKind::InvalidConfig, "nuisance_rank must list one value per tile");
        }
        for (double g : margins) {
            if (!(g > 0.0)) fail(ErrorKind::InvalidConfig, "margins must be positive");
        }
        for (double s : noise) {
            if (!(s >= 0.0)) fail(ErrorKind::InvalidConfig, "noise must be nonnegative");
        }
        for (std::size_t r : nuisance_rank) {
            if (r + 1 > tile_side * tile_side) {
                fail(ErrorKind::InvalidConfig, "nuisance_rank too large for tile size");
            }
        }
    }
};

struct DatasetBundle {
    Batch train;
    Batch val_id;
    Tensor ood_pool;               // unlabeled, tiles decorrelated
    std::vector<Batch> test_sets;  // one per tile; only tile t informative in set t
    GenConfig meta;
};

namespace detail {

// Orthonormal per-tile structure: the unit class template u_t plus r_t
// nuisance directions, mutually orthogonal (Gram-Schmidt over seeded
// Gaussian draws).
struct TileBasis {
    Vec u;             // tile_dim
    std::vector<Vec> nuisance;
};

inline TileBasis make_tile_basis(std::size_t tile_dim, std::size_t rank, Rng& rng) {
    TileBasis basis;
    std::vector<Vec> dirs;
    for (std::size_t r = 0; r < rank + 1; ++r) {
        Vec v(tile_dim);
        for (;;) {
            for (double& x : v) x = rng.normal();
            for (const Vec& prev : dirs) axpy(-dot(prev, v), prev, v);
            const double norm = std::sqrt(squared_norm(v));
            if (norm > 1e-6) {
                for (double& x : v) x /= norm;
                break;
            }
        }
        dirs.push_back(std::move(v));
    }
    basis.u = dirs[0];
    basis.nuisance.assign(dirs.begin() + 1, dirs.end());
    return basis;
}

} // namespace detail

// Deterministic procedural generator for the four-tile dataset family.
// Train/val: every tile's class bit equals the label. Test set t: only tile t
// keeps the label's bit, the others flip coins. Pool: all bits uniform.
inline DatasetBundle gen_collages(const GenConfig& cfg) {
    cfg.validate();
    const std::size_t tile_dim = cfg.tile_side * cfg.tile_side;
    const std::size_t d = cfg.d_in();

    Rng basis_rng(derive_seed(cfg.seed, "tile-basis"));
    std::vector<detail::TileBasis> bases;
    for (std::size_t t = 0; t < cfg.n_tiles; ++t) {
        bases.push_back(detail::make_tile_basis(tile_dim, cfg.nuisance_rank[t], basis_rng));
    }

    const double nuisance_scale = 0.05;

    // Fills one instance given per-tile class bits s[t] in {-1,+1}.
    auto fill_row = [&](double* row, const std::vector<int>& s, Rng& rng) {
        for (std::size_t t = 0; t < cfg.n_tiles; ++t) {
            double* tile = row + t * tile_dim;
            const detail::TileBasis& basis = bases[t];
            const double amp = static_cast<double>(s[t]) * cfg.margins[t] * 0.5;
            for (std::size_t j = 0; j < tile_dim; ++j) tile[j] = 0.5 + amp * basis.u[j];
            for (const Vec& dir : basis.nuisance) {
                const double z = nuisance_scale * rng.normal();
                for (std::size_t j = 0; j < tile_dim; ++j) tile[j] += z * dir[j];
            }
            if (cfg.noise[t] > 0.0) {
                for (std::size_t j = 0; j < tile_dim; ++j) tile[j] += cfg.noise[t] * rng.normal();
            }
            for (std::size_t j = 0; j < tile_dim; ++j) tile[j] = std::clamp(tile[j], 0.0, 1.0);
        }
    };

    auto gen_labeled = [&](std::size_t n, const char* stream, int informative_tile) {
        // informative_tile < 0: all tiles carry the label (train/val).
        Batch b;
        b.inputs = Tensor({n, d});
        b.labels.resize(n);
        Rng rng(derive_seed(cfg.seed, stream));
        std::vector<int> s(cfg.n_tiles);
        for (std::size_t i = 0; i < n; ++i) {
            const int y = rng.bernoulli(0.5) ? 1 : 0;
            b.labels[i] = static_cast<std::uint8_t>(y);
            for (std::size_t t = 0; t < cfg.n_tiles; ++t) {
                if (informative_tile < 0 || t == static_cast<std::size_t>(informative_tile)) {
                    s[t] = 2 * y - 1;
                } else {
                    s[t] = rng.bernoulli(0.5) ? 1 : -1;
                }
            }
            fill_row(b.inputs.row(i), s, rng);
        }
        return b;
    };

    DatasetBundle bundle;
    bundle.meta = cfg;
    bundle.train = gen_labeled(cfg.n_train, "train", -1);
    bundle.val_id = gen_labeled(cfg.n_val, "val", -1);
    for (std::size_t t = 0; t < cfg.n_tiles; ++t) {
        bundle.test_sets.push_back(
            gen_labeled(cfg.n_test, ("test-" + std::to_string(t)).c_str(), static_cast<int>(t)));
    }

    bundle.ood_pool = Tensor({cfg.n_pool, d});
    {
        Rng rng(derive_seed(cfg.seed, "pool"));
        std::vector<int> s(cfg.n_tiles);
        for (std::size_t i = 0; i < cfg.n_pool; ++i) {
            for (std::size_t t = 0; t < cfg.n_tiles; ++t) s[t] = rng.bernoulli(0.5) ? 1 : -1;
            fill_row(bundle.ood_pool.row(i), s, rng);
        }
    }
    return bundle;
}

// ---------------------------------------------------------------------------
// Dataset files: magic "UDS1", f32 payload (documented narrowing), u8 labels.
// ---------------------------------------------------------------------------

inline void save_batch(const Tensor& inputs, const std::vector<std::uint8_t>* labels,
                       const std::string& path) {
    if (labels && labels->size() != inputs.rows()) {
        fail(ErrorKind::ShapeMismatch, "label count does not match rows");
    }
    auto f = io::open_out(path);
    io::write_magic(f, "UDS1");
    io::write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(inputs.rows()));
    io::write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(inputs.cols()));
    io::write_pod<std::uint8_t>(f, labels ? 1 : 0);
    std::vector<float> narrow(inputs.data.size());
    for (std::size_t i = 0; i < narrow.size(); ++i) narrow[i] = static_cast<float>(inputs.data[i]);
    io::write_array(f, narrow.data(), narrow.size());
    if (labels) io::write_array(f, labels->data(), labels->size());
    if (!f) fail(ErrorKind::FileError, "write failed: " + path);
}

inline void save_batch(const Batch& b, const std::string& path) {
    save_batch(b.inputs, &b.labels, path);
}

struct LoadedDataset {
    Tensor inputs;
    std::vector<std::uint8_t> labels;  // empty when the file is unlabeled
    bool has_labels = false;

    Batch as_batch() const {
        if (!has_labels) fail(ErrorKind::InvalidConfig, "dataset file has no labels");
        return Batch{inputs, labels};
    }
};

inline LoadedDataset load_dataset(const std::string& path) {
    auto f = io::open_in(path);
    io::expect_magic(f, "UDS1", path);
    const auto n_rows = io::read_pod<std::uint32_t>(f, "n_rows");
    const auto n_cols = io::read_pod<std::uint32_t>(f, "n_cols");
    const auto has_labels = io::read_pod<std::uint8_t>(f, "has_labels");
    if (has_labels > 1) fail(ErrorKind::DimensionMismatch, "bad has_labels flag in " + path);
    LoadedDataset out;
    out.has_labels = has_labels == 1;
    out.inputs = Tensor({n_rows, n_cols});
    std::vector<float> narrow(static_cast<std::size_t>(n_rows) * n_cols);
    io::read_array(f, narrow.data(), narrow.size(), path + " payload");
    for (std::size_t i = 0; i < narrow.size(); ++i) out.inputs.data[i] = narrow[i];
    if (out.has_labels) {
        out.labels.resize(n_rows);
        io::read_array(f, out.labels.data(), n_rows, path + " labels");
        for (auto y : out.labels) {
            if (y > 1) fail(ErrorKind::DimensionMismatch, "label out of range in " + path);
        }
    }
    return out;
}

// CSV: header row x0,...,x{d-1}[,y]; label column named "y".
inline void save_csv(const Tensor& inputs, const std::vector<std::uint8_t>* labels,
                     const std::string& path) {
    auto f = io::open_out(path);
    const std::size_t d = inputs.cols();
    for (std::size_t j = 0; j < d; ++j) f << (j ? "," : "") << "x" << j;
    if (labels) f << ",y";
    f << "\n";
    f.precision(17);
    for (std::size_t i = 0; i < inputs.rows(); ++i) {
        const double* row = inputs.row(i);
        for (std::size_t j = 0; j < d; ++j) f << (j ? "," : "") << row[j];
        if (labels) f << "," << static_cast<int>((*labels)[i]);
        f << "\n";
    }
    if (!f) fail(ErrorKind::FileError, "write failed: " + path);
}

inline LoadedDataset load_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) fail(ErrorKind::FileError, "cannot open for reading: " + path);
    std::string line;
    if (!std::getline(f, line)) fail(ErrorKind::TruncatedFile, "empty CSV: " + path);

    std::vector<std::string> header;
    {
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) header.push_back(cell);
    }
    bool has_labels = !header.empty() && header.back() == "y";
    const std::size_t d = header.size() - (has_labels ? 1 : 0);
    if (d == 0) fail(ErrorKind::DimensionMismatch, "CSV has no feature columns: " + path);

    std::vector<double> values;
    std::vector<std::uint8_t> labels;
    std::size_t n = 0;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::size_t col = 0;
        while (std::getline(ss, cell, ',')) {
            if (col < d) {
                values.push_back(std::stod(cell));
            } else if (has_labels && col == d) {
                const int y = std::stoi(cell);
                if (y < 0 || y > 1) fail(ErrorKind::DimensionMismatch, "CSV label out of range");
                labels.push_back(static_cast<std::uint8_t>(y));
            }
            ++col;
        }
        if (col != header.size()) {
            fail(ErrorKind::DimensionMismatch, "CSV row " + std::to_string(n) + " has " +
                                                   std::to_string(col) + " cells, expected " +
                                                   std::to_string(header.size()));
        }
        ++n;
    }
    LoadedDataset out;
    out.inputs = Tensor({n, d}, std::move(values));
    out.labels = std::move(labels);
    out.has_labels = has_labels;
    return out;
}

} // namespace underspec
