#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "critstate/rng.hpp"

namespace critstate {

/// Fixed piecewise-linear ("hat") basis over an evenly spaced action grid:
/// row i holds the interpolation weights of action i on `knots` evenly spaced
/// knot actions. Q over the full grid is then linear between knot values.
inline Eigen::MatrixXd hat_basis(std::size_t n_actions, std::size_t knots) {
    if (knots < 2 || n_actions < 2) throw std::invalid_argument("hat_basis: need at least two knots and actions");
    Eigen::MatrixXd b = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n_actions), static_cast<Eigen::Index>(knots));
    for (std::size_t i = 0; i < n_actions; ++i) {
        const double pos = static_cast<double>(i) * static_cast<double>(knots - 1) / static_cast<double>(n_actions - 1);
        const auto lo = std::min(static_cast<std::size_t>(pos), knots - 2);
        const double t = pos - static_cast<double>(lo);
        b(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(lo)) = 1.0 - t;
        b(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(lo + 1)) = t;
    }
    return b;
}

/// Feed-forward Q-function: tanh hidden layers, identity output, one output
/// per discrete action. Batched inputs are column-major (one sample per column).
///
/// With `basis_knots` > 0 the last trainable layer produces Q at that many knot
/// actions and a fixed hat basis expands them to the full action grid; the
/// logical output width is still the action count.
class QNetwork {
public:
    struct Gradient {
        std::vector<Eigen::MatrixXd> weights;
        std::vector<Eigen::VectorXd> biases;
    };

    QNetwork() = default;

    /// Uniform(+-1/sqrt(fan_in)) initialization for weights and biases.
    QNetwork(std::vector<std::size_t> layer_sizes, std::uint64_t seed, std::size_t basis_knots = 0)
        : sizes_(std::move(layer_sizes)), knots_(basis_knots) {
        allocate();
        Rng rng(seed);
        for (std::size_t l = 0; l < weights_.size(); ++l) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(sizes_[l]));
            for (Eigen::Index r = 0; r < weights_[l].rows(); ++r)
                for (Eigen::Index c = 0; c < weights_[l].cols(); ++c) weights_[l](r, c) = rng.uniform(-bound, bound);
            for (Eigen::Index r = 0; r < biases_[l].size(); ++r) biases_[l](r) = rng.uniform(-bound, bound);
        }
    }

    static QNetwork zeros(std::vector<std::size_t> layer_sizes, std::size_t basis_knots = 0) {
        QNetwork net;
        net.sizes_ = std::move(layer_sizes);
        net.knots_ = basis_knots;
        net.allocate();
        return net;
    }

    const std::vector<std::size_t>& layer_sizes() const noexcept { return sizes_; }
    std::size_t input_dim() const { return sizes_.front(); }
    std::size_t output_dim() const { return sizes_.back(); }
    std::size_t num_layers() const { return weights_.size(); }
    std::size_t basis_knots() const noexcept { return knots_; }
    /// Width of the last hidden layer, or the input width without hidden layers.
    std::size_t feature_dim() const { return sizes_[sizes_.size() - 2]; }

    const std::vector<Eigen::MatrixXd>& weights() const noexcept { return weights_; }
    const std::vector<Eigen::VectorXd>& biases() const noexcept { return biases_; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (std::size_t l = 0; l < weights_.size(); ++l) n += weights_[l].size() + biases_[l].size();
        return n;
    }

    /// Parameters in layer order; each layer's weights row-major, then biases.
    std::vector<double> flat_parameters() const {
        std::vector<double> out;
        out.reserve(parameter_count());
        for (std::size_t l = 0; l < weights_.size(); ++l) {
            for (Eigen::Index r = 0; r < weights_[l].rows(); ++r)
                for (Eigen::Index c = 0; c < weights_[l].cols(); ++c) out.push_back(weights_[l](r, c));
            for (Eigen::Index r = 0; r < biases_[l].size(); ++r) out.push_back(biases_[l](r));
        }
        return out;
    }

    void set_flat_parameters(std::span<const double> p) {
        if (p.size() != parameter_count()) throw std::invalid_argument("QNetwork: parameter count mismatch");
        std::size_t k = 0;
        for (std::size_t l = 0; l < weights_.size(); ++l) {
            for (Eigen::Index r = 0; r < weights_[l].rows(); ++r)
                for (Eigen::Index c = 0; c < weights_[l].cols(); ++c) weights_[l](r, c) = p[k++];
            for (Eigen::Index r = 0; r < biases_[l].size(); ++r) biases_[l](r) = p[k++];
        }
    }

    bool finite() const {
        for (std::size_t l = 0; l < weights_.size(); ++l)
            if (!weights_[l].allFinite() || !biases_[l].allFinite()) return false;
        return true;
    }

    Eigen::MatrixXd forward(const Eigen::MatrixXd& x) const { return run(x, nullptr); }

    std::vector<double> q_values(std::span<const double> obs) const {
        const Eigen::VectorXd q = forward(column(obs));
        return {q.data(), q.data() + q.size()};
    }

    std::vector<double> features(std::span<const double> obs) const {
        Eigen::MatrixXd h = column(obs);
        for (std::size_t l = 0; l + 1 < weights_.size(); ++l)
            h = ((weights_[l] * h).colwise() + biases_[l]).array().tanh().matrix();
        return {h.data(), h.data() + h.size()};
    }

    /// L = 1/(2B) sum_i (Q(x_i)[a_i] - y_i)^2 and, if `grad` is given, its
    /// gradient with respect to every parameter.
    double td_loss(const Eigen::MatrixXd& x, std::span<const std::size_t> actions, const Eigen::VectorXd& targets,
                   Gradient* grad = nullptr) const {
        const auto batch = x.cols();
        if (static_cast<std::size_t>(batch) != actions.size() || targets.size() != batch)
            throw std::invalid_argument("QNetwork::td_loss: batch size mismatch");
        std::vector<Eigen::MatrixXd> acts;
        const Eigen::MatrixXd q = run(x, &acts);
        Eigen::MatrixXd delta = Eigen::MatrixXd::Zero(q.rows(), batch);
        double loss = 0.0;
        for (Eigen::Index i = 0; i < batch; ++i) {
            const auto a = static_cast<Eigen::Index>(actions[static_cast<std::size_t>(i)]);
            if (a >= q.rows()) throw std::out_of_range("QNetwork::td_loss: action out of range");
            const double err = q(a, i) - targets(i);
            loss += err * err;
            delta(a, i) = err / static_cast<double>(batch);
        }
        loss /= 2.0 * static_cast<double>(batch);
        if (grad) {
            if (knots_ > 0) delta = basis_.transpose() * delta;
            grad->weights.resize(weights_.size());
            grad->biases.resize(weights_.size());
            for (std::size_t l = weights_.size(); l-- > 0;) {
                grad->weights[l] = delta * acts[l].transpose();
                grad->biases[l] = delta.rowwise().sum();
                if (l > 0)
                    delta = ((weights_[l].transpose() * delta).array() * (1.0 - acts[l].array().square())).matrix();
            }
        }
        return loss;
    }

    void apply_gradient(const Gradient& g, double learning_rate) {
        for (std::size_t l = 0; l < weights_.size(); ++l) {
            weights_[l] -= learning_rate * g.weights[l];
            biases_[l] -= learning_rate * g.biases[l];
        }
    }

    std::vector<Eigen::MatrixXd>& mutable_weights() noexcept { return weights_; }
    std::vector<Eigen::VectorXd>& mutable_biases() noexcept { return biases_; }

    bool operator==(const QNetwork& o) const {
        if (sizes_ != o.sizes_ || knots_ != o.knots_) return false;
        for (std::size_t l = 0; l < weights_.size(); ++l)
            if (weights_[l] != o.weights_[l] || biases_[l] != o.biases_[l]) return false;
        return true;
    }

private:
    void allocate() {
        if (sizes_.size() < 2) throw std::invalid_argument("QNetwork: need at least input and output layers");
        for (std::size_t s : sizes_)
            if (s == 0) throw std::invalid_argument("QNetwork: zero-width layer");
        weights_.clear();
        biases_.clear();
        for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
            const bool last = l + 2 == sizes_.size();
            const std::size_t rows = last && knots_ > 0 ? knots_ : sizes_[l + 1];
            weights_.push_back(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(sizes_[l])));
            biases_.push_back(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(rows)));
        }
        if (knots_ > 0) basis_ = hat_basis(sizes_.back(), knots_);
    }

    Eigen::MatrixXd column(std::span<const double> obs) const {
        if (obs.size() != input_dim()) throw std::invalid_argument("QNetwork: observation size mismatch");
        return Eigen::Map<const Eigen::VectorXd>(obs.data(), static_cast<Eigen::Index>(obs.size()));
    }

    // acts[l] holds the input to layer l (acts[0] = x).
    Eigen::MatrixXd run(const Eigen::MatrixXd& x, std::vector<Eigen::MatrixXd>* acts) const {
        if (static_cast<std::size_t>(x.rows()) != input_dim()) throw std::invalid_argument("QNetwork: input size mismatch");
        Eigen::MatrixXd h = x;
        for (std::size_t l = 0; l < weights_.size(); ++l) {
            if (acts) acts->push_back(h);
            Eigen::MatrixXd z = (weights_[l] * h).colwise() + biases_[l];
            h = l + 1 < weights_.size() ? Eigen::MatrixXd(z.array().tanh().matrix()) : z;
        }
        if (knots_ > 0) return basis_ * h;
        return h;
    }

    std::vector<std::size_t> sizes_;
    std::size_t knots_ = 0;
    Eigen::MatrixXd basis_;
    std::vector<Eigen::MatrixXd> weights_;
    std::vector<Eigen::VectorXd> biases_;
};

}  // namespace critstate
