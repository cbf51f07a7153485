#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "shiftlab/env.hpp"
#include "shiftlab/linalg.hpp"
#include "shiftlab/rng.hpp"

namespace shiftlab {

// Stack of the last k observations; early steps repeat the first frame.
struct ObsWindow {
    std::vector<Observation> frames;
};

inline ObsWindow make_window(std::span<const Observation> history, std::size_t t, int k) {
    if (history.empty()) throw std::invalid_argument("make_window: empty history");
    if (t >= history.size()) throw std::invalid_argument("make_window: t beyond history");
    ObsWindow w;
    w.frames.reserve(static_cast<std::size_t>(k));
    for (int i = k - 1; i >= 0; --i) {
        std::size_t idx = (t >= static_cast<std::size_t>(i)) ? t - static_cast<std::size_t>(i) : 0;
        w.frames.push_back(history[idx]);
    }
    return w;
}

struct RawFeature {
    Vec values;
};

// Frozen nonlinear featurizer: tanh(M * flatten(window) + c). M and c are
// generated once from a published seed and shipped as a versioned asset;
// they never change after that.
struct Featurizer {
    Matrix m;  // feature_dim x (window * obs_dim)
    Vec c;
    int window = 3;
    int obs_dim = 32;

    int feature_dim() const { return static_cast<int>(m.rows); }
    int input_dim() const { return window * obs_dim; }

    static Featurizer generate(int obs_dim, int window, int feature_dim, std::uint64_t seed) {
        Featurizer f;
        f.window = window;
        f.obs_dim = obs_dim;
        std::size_t in = static_cast<std::size_t>(window * obs_dim);
        f.m = Matrix(static_cast<std::size_t>(feature_dim), in);
        f.c.resize(static_cast<std::size_t>(feature_dim));
        RngStream rng = RngStream::derive(seed, "featurizer");
        double scale = 1.5 / std::sqrt(static_cast<double>(in));
        for (double& w : f.m.data) w = rng.normal(0.0, scale);
        for (double& ci : f.c) ci = rng.normal(0.0, 0.1);
        return f;
    }

    RawFeature featurize(const ObsWindow& w) const {
        if (static_cast<int>(w.frames.size()) != window)
            throw std::invalid_argument("featurize: window must hold exactly " + std::to_string(window) + " frames");
        Vec flat;
        flat.reserve(static_cast<std::size_t>(input_dim()));
        for (const Observation& o : w.frames) {
            if (static_cast<int>(o.values.size()) != obs_dim)
                throw std::invalid_argument("featurize: observation length mismatch");
            flat.insert(flat.end(), o.values.begin(), o.values.end());
        }
        RawFeature out;
        out.values = matvec(m, flat);
        for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = std::tanh(out.values[i] + c[i]);
        return out;
    }
};

struct Embedding {
    Vec values;
};

struct PcaModel {
    Vec mean;           // feature_dim
    Matrix components;  // d x feature_dim, orthonormal rows
    Vec eigenvalues;    // d, non-increasing
    int d = 0;

    void validate(double tol = 1e-8) const {
        if (components.rows != static_cast<std::size_t>(d) || components.cols != mean.size())
            throw std::runtime_error("PcaModel: shape mismatch");
        for (std::size_t i = 0; i < components.rows; ++i) {
            for (std::size_t j = i; j < components.rows; ++j) {
                double g = 0.0;
                for (std::size_t k = 0; k < components.cols; ++k) g += components(i, k) * components(j, k);
                double want = (i == j) ? 1.0 : 0.0;
                if (std::fabs(g - want) > tol) throw std::runtime_error("PcaModel: components not orthonormal");
            }
        }
        for (std::size_t i = 0; i + 1 < eigenvalues.size(); ++i)
            if (eigenvalues[i] + tol < eigenvalues[i + 1]) throw std::runtime_error("PcaModel: eigenvalues not sorted");
        for (double v : eigenvalues)
            if (v < -tol) throw std::runtime_error("PcaModel: negative eigenvalue");
    }
};

// PCA of the feature rows: top-d eigenvectors of the sample covariance
// (n-1 denominator). Sign convention: the largest-magnitude entry of each
// component is positive, which keeps serialized models stable.
inline PcaModel fit_pca(const Matrix& features, int d) {
    if (d < 1) throw std::invalid_argument("fit_pca: d must be >= 1");
    if (features.rows <= static_cast<std::size_t>(d))
        throw std::invalid_argument("fit_pca: need more samples than components (n > d)");
    if (static_cast<std::size_t>(d) > features.cols)
        throw std::invalid_argument("fit_pca: d exceeds feature dimension");
    for (double v : features.data)
        if (!std::isfinite(v)) throw std::invalid_argument("fit_pca: non-finite input");

    PcaModel model;
    model.d = d;
    model.mean = column_means(features);
    Matrix cov = sample_covariance(features, model.mean);
    EigenDecomposition eig = jacobi_eigen_symmetric(cov);

    model.components = Matrix(static_cast<std::size_t>(d), features.cols);
    model.eigenvalues.resize(static_cast<std::size_t>(d));
    for (int i = 0; i < d; ++i) {
        model.eigenvalues[static_cast<std::size_t>(i)] = std::max(0.0, eig.values[static_cast<std::size_t>(i)]);
        std::size_t argmax = 0;
        for (std::size_t k = 1; k < features.cols; ++k)
            if (std::fabs(eig.vectors(static_cast<std::size_t>(i), k)) >
                std::fabs(eig.vectors(static_cast<std::size_t>(i), argmax)))
                argmax = k;
        double sign = eig.vectors(static_cast<std::size_t>(i), argmax) < 0.0 ? -1.0 : 1.0;
        for (std::size_t k = 0; k < features.cols; ++k)
            model.components(static_cast<std::size_t>(i), k) = sign * eig.vectors(static_cast<std::size_t>(i), k);
    }
    return model;
}

inline Embedding embed(const PcaModel& pca, const RawFeature& raw) {
    if (raw.values.size() != pca.mean.size()) throw std::invalid_argument("embed: dimension mismatch");
    Vec centered(raw.values.size());
    for (std::size_t i = 0; i < centered.size(); ++i) centered[i] = raw.values[i] - pca.mean[i];
    return Embedding{matvec(pca.components, centered)};
}

struct ScatterPoint {
    double x = 0.0;
    double y = 0.0;
    std::string label;
};

// First two embedding coordinates, tagged with their labels; input order is
// preserved one-to-one.
inline std::vector<ScatterPoint> project2d(std::span<const Embedding> embeddings,
                                           std::span<const std::string> labels) {
    if (embeddings.size() != labels.size()) throw std::invalid_argument("project2d: label count mismatch");
    std::vector<ScatterPoint> pts;
    pts.reserve(embeddings.size());
    for (std::size_t i = 0; i < embeddings.size(); ++i) {
        if (embeddings[i].values.size() < 2) throw std::invalid_argument("project2d: need d >= 2");
        pts.push_back(ScatterPoint{embeddings[i].values[0], embeddings[i].values[1], labels[i]});
    }
    return pts;
}

}  // namespace shiftlab
