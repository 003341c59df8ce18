#pragma once

#include "clipcap/autograd.hpp"
#include "clipcap/rng.hpp"

#include <functional>
#include <map>
#include <string>
#include <vector>

namespace clipcap {

// Named collection of trainable leaves. Copies are deep: a copied store owns
// fresh parameter nodes with the same values and no gradients.
class ParamStore {
public:
    ParamStore() = default;
    ParamStore(const ParamStore& other);
    ParamStore& operator=(const ParamStore& other);
    ParamStore(ParamStore&&) noexcept = default;
    ParamStore& operator=(ParamStore&&) noexcept = default;

    ag::Var& add(const std::string& name, ag::Matrix value);
    const ag::Var& at(const std::string& name) const;
    ag::Var& at(const std::string& name);
    bool contains(const std::string& name) const { return params_.count(name) != 0; }

    const std::map<std::string, ag::Var>& entries() const noexcept { return params_; }
    std::vector<std::string> names_with_prefix(const std::string& prefix) const;

    std::size_t parameter_count() const;
    void zero_grad();
    bool all_finite() const;

    // Bitwise equality of every value; names must match too.
    bool equals(const ParamStore& other) const;

private:
    std::map<std::string, ag::Var> params_;
};

// Gaussian init scaled by std.
ag::Matrix random_matrix(Rng& rng, ag::Index rows, ag::Index cols, double stddev);

struct OptimizerConfig {
    enum class Kind { sgd, adam };
    Kind kind = Kind::adam;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 0.0;  // global gradient-norm clip; 0 disables
};

// Updates a fixed subset of a ParamStore. Parameters outside the subset are
// never written.
class Optimizer {
public:
    Optimizer(OptimizerConfig config, std::vector<std::string> names);

    void step(ParamStore& store);
    const std::vector<std::string>& names() const noexcept { return names_; }

private:
    OptimizerConfig config_;
    std::vector<std::string> names_;
    std::map<std::string, ag::Matrix> m_;
    std::map<std::string, ag::Matrix> v_;
    long long t_ = 0;
};

}  // namespace clipcap
