#pragma once

// Finite-difference suite over the full model at small dimensions.

#include <cstdint>
#include <string>
#include <vector>

#include "signthought/config.hpp"
#include "signthought/data.hpp"
#include "signthought/grad_check.hpp"
#include "signthought/model.hpp"

namespace signthought {

struct TinyProblem {
  RunConfig cfg;
  SignThoughtModel model;
  Batch batch;
};

// Random clips (second sample padded) and random targets; B = 2.
TinyProblem make_tiny_problem(const RunConfig& cfg, std::uint64_t seed, std::size_t steps = 10,
                              std::size_t target_len = 5);

const std::vector<std::string>& grad_check_modules();  // encoder, segmentation, thinking, decoder, objectives

// Scalar objective exercising one module, and the parameter prefix it probes.
// "objectives" is L_total over every parameter.
struct ModuleObjective {
  Objective f;
  std::string prefix;
};
ModuleObjective module_objective(const std::string& module, const TinyProblem& problem);

}  // namespace signthought
