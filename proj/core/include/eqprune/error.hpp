#pragma once

#include <stdexcept>
#include <string>

namespace eqprune {

/// Broad failure classes; each maps onto a distinct CLI exit code.
enum class ErrorCategory { config, data, numeric, validation };

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

#define EQPRUNE_DEFINE_ERROR(Name, Category)                        \
  class Name : public Error {                                       \
   public:                                                          \
    explicit Name(const std::string& what)                          \
        : Error(ErrorCategory::Category, #Name ": " + what) {}      \
  }

// Shape and state misuse of numeric operations.
EQPRUNE_DEFINE_ERROR(DimensionError, numeric);
EQPRUNE_DEFINE_ERROR(GeometryError, numeric);
EQPRUNE_DEFINE_ERROR(StateError, numeric);
EQPRUNE_DEFINE_ERROR(IndexError, numeric);
EQPRUNE_DEFINE_ERROR(ParameterError, numeric);
EQPRUNE_DEFINE_ERROR(KindError, numeric);
EQPRUNE_DEFINE_ERROR(DegeneratePruningError, numeric);
EQPRUNE_DEFINE_ERROR(GraphConsistencyError, numeric);

// Configuration.
EQPRUNE_DEFINE_ERROR(ConfigError, config);

// Input files and datasets.
EQPRUNE_DEFINE_ERROR(DataError, data);
EQPRUNE_DEFINE_ERROR(FormatError, data);
EQPRUNE_DEFINE_ERROR(LengthError, data);
EQPRUNE_DEFINE_ERROR(CorruptionError, data);
EQPRUNE_DEFINE_ERROR(VersionError, data);

// Post-hoc checks (equivariance, accuracy gates).
EQPRUNE_DEFINE_ERROR(ValidationError, validation);

#undef EQPRUNE_DEFINE_ERROR

}  // namespace eqprune
