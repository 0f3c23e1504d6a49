#pragma once

#include "mpsynth/graph.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace mpsynth {

struct GradReport {
    std::string op;
    double max_rel_error = 0;
    bool pass = false;
    std::size_t probe_count = 0;
    std::size_t discarded = 0; ///< probes whose +-eps evaluations changed a branch decision
};

struct GradCheckOptions {
    double eps = 1e-3;
    double tol = 1e-4;
    /// Accepted probes wanted; 0 probes every coordinate.
    std::size_t probes = 0;
    std::uint64_t seed = 1;
    /// Multiplies analytic gradients; anything but 1 is an injected fault.
    double fault_scale = 1.0;
};

/// A scalar function of named leaf tensors and parameters, evaluated in 64 bits.
struct GradProblem {
    std::string name;
    std::vector<BasicTensor<double>> inputs; ///< probed leaves
    ParamStore<double> params;               ///< probed parameters
    std::function<Var<double>(Graph<double>&, const std::vector<Var<double>>&)> loss;
    /// Overrides the caller's eps when positive.
    double eps = 0;
    /// Overrides the caller's probe count when positive.
    std::size_t probes = 0;
};

/// relative error = |a - n| / max(|a|, |n|, 1e-8); central differences.
GradReport grad_check(const GradProblem& problem, const GradCheckOptions& options);

enum class GradScope { op, block, full };

GradScope parse_grad_scope(const std::string& text);

/// Every differentiable primitive, the conv-pool-sigmoid chain and every loss.
std::vector<GradProblem> op_problems(std::uint64_t seed);
/// MAPS, attention, MPFA, reconstructor and discriminator blocks.
std::vector<GradProblem> block_problems(std::uint64_t seed);
/// mean(y_hat) of the full generator on three 1x1x16x16 inputs, probing weights.
GradProblem full_problem(std::uint64_t seed);

std::vector<GradReport> run_gradcheck(GradScope scope, const GradCheckOptions& options);

} // namespace mpsynth
