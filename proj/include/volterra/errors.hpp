#pragma once

#include <stdexcept>
#include <string>

namespace volterra {

/// A factorization or inversion failed (matrix singular or indefinite after jitter).
class ConditioningError : public std::runtime_error {
public:
    explicit ConditioningError(const std::string& what) : std::runtime_error(what) {}
};

/// The gradient solver produced a non-finite cost.
class DivergenceError : public std::runtime_error {
public:
    explicit DivergenceError(const std::string& what) : std::runtime_error(what) {}
};

/// Every start of a hyperparameter search failed.
class TuningError : public std::runtime_error {
public:
    explicit TuningError(const std::string& what) : std::runtime_error(what) {}
};

/// Input has no variation, so a normalized statistic is undefined.
class DegenerateInputError : public std::invalid_argument {
public:
    explicit DegenerateInputError(const std::string& what) : std::invalid_argument(what) {}
};

/// Requested working set exceeds the configured memory limit.
class MemoryLimitError : public std::runtime_error {
public:
    explicit MemoryLimitError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace volterra
