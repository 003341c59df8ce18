#include "clipcap/params.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace clipcap {

ParamStore::ParamStore(const ParamStore& other) {
    for (const auto& [name, var] : other.params_) params_.emplace(name, ag::parameter(var.value()));
}

ParamStore& ParamStore::operator=(const ParamStore& other) {
    if (this != &other) {
        ParamStore copy(other);
        params_ = std::move(copy.params_);
    }
    return *this;
}

ag::Var& ParamStore::add(const std::string& name, ag::Matrix value) {
    auto [it, inserted] = params_.insert_or_assign(name, ag::parameter(std::move(value)));
    return it->second;
}

const ag::Var& ParamStore::at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
}

ag::Var& ParamStore::at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
}

std::vector<std::string> ParamStore::names_with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& [name, var] : params_) {
        if (name.compare(0, prefix.size(), prefix) == 0) out.push_back(name);
    }
    return out;
}

std::size_t ParamStore::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, var] : params_) n += static_cast<std::size_t>(var.value().size());
    return n;
}

void ParamStore::zero_grad() {
    for (auto& [name, var] : params_) var.zero_grad();
}

bool ParamStore::all_finite() const {
    for (const auto& [name, var] : params_) {
        if (!var.value().allFinite()) return false;
    }
    return true;
}

bool ParamStore::equals(const ParamStore& other) const {
    if (params_.size() != other.params_.size()) return false;
    auto it = other.params_.begin();
    for (const auto& [name, var] : params_) {
        if (name != it->first) return false;
        const auto& a = var.value();
        const auto& b = it->second.value();
        if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
        // Bitwise comparison: -0.0 vs 0.0 or NaN payloads count as changes.
        if (std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) != 0) return false;
        ++it;
    }
    return true;
}

ag::Matrix random_matrix(Rng& rng, ag::Index rows, ag::Index cols, double stddev) {
    ag::Matrix m(rows, cols);
    for (ag::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(0.0, stddev);
    return m;
}

Optimizer::Optimizer(OptimizerConfig config, std::vector<std::string> names)
    : config_(config), names_(std::move(names)) {}

void Optimizer::step(ParamStore& store) {
    double scale = 1.0;
    if (config_.clip_norm > 0.0) {
        double sq = 0.0;
        for (const auto& name : names_) {
            const auto& g = store.at(name).grad();
            if (g.size() != 0) sq += g.squaredNorm();
        }
        const double norm = std::sqrt(sq);
        if (norm > config_.clip_norm) scale = config_.clip_norm / norm;
    }
    ++t_;
    for (const auto& name : names_) {
        ag::Var& p = store.at(name);
        if (p.grad().size() == 0) continue;
        const ag::Matrix g = p.grad() * scale;
        if (config_.kind == OptimizerConfig::Kind::sgd) {
            p.mutable_value() -= config_.lr * g;
            continue;
        }
        auto& m = m_[name];
        auto& v = v_[name];
        if (m.size() == 0) {
            m = ag::Matrix::Zero(g.rows(), g.cols());
            v = ag::Matrix::Zero(g.rows(), g.cols());
        }
        m = config_.beta1 * m + (1.0 - config_.beta1) * g;
        v = config_.beta2 * v + (1.0 - config_.beta2) * g.cwiseProduct(g);
        const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
        p.mutable_value().array() -=
            config_.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + config_.eps);
    }
}

}  // namespace clipcap
