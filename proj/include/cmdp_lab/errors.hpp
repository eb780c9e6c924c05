#pragma once

#include <stdexcept>
#include <string>

namespace cmdp {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// cmdp_core
class RowNotStochastic : public Error { public: using Error::Error; };
class RewardOutOfRange : public Error { public: using Error::Error; };
class LayerViolation : public Error { public: using Error::Error; };
class LengthMismatch : public Error { public: using Error::Error; };
class UnknownContext : public Error { public: using Error::Error; };

// planner
class UnknownState : public Error { public: using Error::Error; };

// erm_oracle and the budget calculators
class EmptyDataset : public Error { public: using Error::Error; };
class InvalidParameter : public Error { public: using Error::Error; };

// learners
class InconsistentCounters : public Error { public: using Error::Error; };

/// An EXPLORE phase missed a sample quota. `where` names the offending
/// (h,s,a) or layer; `collected`/`required` carry the shortfall.
class ExplorationFailed : public Error {
public:
    ExplorationFailed(std::string where, std::size_t collected, std::size_t required)
        : Error("exploration failed at " + where + ": collected " + std::to_string(collected) +
                " of " + std::to_string(required) + " samples"),
          where_(std::move(where)), collected_(collected), required_(required) {}

    const std::string& where() const { return where_; }
    std::size_t collected() const { return collected_; }
    std::size_t required() const { return required_; }

private:
    std::string where_;
    std::size_t collected_;
    std::size_t required_;
};

// env_suite
class InfeasibleSpec : public Error { public: using Error::Error; };

// verify_oracles
class TooLarge : public Error { public: using Error::Error; };
class InfiniteContextSpace : public Error { public: using Error::Error; };

// harness_cli
class ConfigError : public Error { public: using Error::Error; };

inline std::string where_hsa(std::size_t h, std::size_t s, std::size_t a) {
    return "(h=" + std::to_string(h) + ",s=" + std::to_string(s) + ",a=" + std::to_string(a) + ")";
}

}  // namespace cmdp
