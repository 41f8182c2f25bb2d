#pragma once

#include <stdexcept>
#include <string>

namespace gridflow {

// Base for all gridflow failures. CLI maps any of these to a nonzero exit.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Bad configuration: unknown keys, out-of-range values, dimension mismatches.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error("config: " + what) {}
};

// Caller handed in something structurally invalid (unlabeled layout position,
// non-finite latent, unknown category, ...).
class InputError : public Error {
public:
    explicit InputError(const std::string& what) : Error("input: " + what) {}
};

// A constraint set with no satisfying scene. Never silently relaxed.
class UnsatisfiableError : public Error {
public:
    explicit UnsatisfiableError(const std::string& what)
        : Error("unsatisfiable: " + what) {}
};

// A directive referenced a nonexistent target or edits collided.
class DirectiveError : public Error {
public:
    explicit DirectiveError(const std::string& what) : Error("directive: " + what) {}
};

// Euler integration produced a non-finite latent. Carries the step index.
class SamplerDivergence : public Error {
public:
    SamplerDivergence(int step, const std::string& what)
        : Error("sampler diverged at step " + std::to_string(step) + ": " + what),
          step_(step) {}
    int step() const { return step_; }

private:
    int step_;
};

// Pipeline-stage failure, tagged with the role that raised it.
class PipelineError : public Error {
public:
    PipelineError(const std::string& role, const std::string& what)
        : Error("pipeline[" + role + "]: " + what), role_(role) {}
    const std::string& role() const { return role_; }

private:
    std::string role_;
};

class IoError : public Error {
public:
    explicit IoError(const std::string& what) : Error("io: " + what) {}
};

}  // namespace gridflow
