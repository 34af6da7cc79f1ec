// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace evigrid {

// Every failure raised by the library derives from Error. The CLI maps the
// category to an exit code (see ExitCode in pipeline.hpp).
class Error : public std::runtime_error {
public:
    enum class Category { Config, Data, Numeric, Acceptance };

    Error(Category category, std::string kind, const std::string& what)
        : std::runtime_error(kind + ": " + what), category_(category), kind_(std::move(kind)) {}

    virtual ~Error() = default;

    Category category() const noexcept { return category_; }
    const std::string& kind() const noexcept { return kind_; }
    // Message without the "<kind>: " prefix.
    std::string message() const { return std::string(what()).substr(kind_.size() + 2); }

    // Throws an error of the same concrete type with `context: ` prepended.
    [[noreturn]] virtual void rethrow_with_context(const std::string& context) const {
        throw Error(category_, kind_, context + ": " + message());
    }

private:
    Category category_;
    std::string kind_;
};

#define EVIGRID_DEFINE_ERROR(Name, Cat)                                              \
    class Name : public Error {                                                      \
    public:                                                                          \
        explicit Name(const std::string& what) : Error(Category::Cat, #Name, what) {} \
        [[noreturn]] void rethrow_with_context(const std::string& context) const override { \
            throw Name(context + ": " + message());                                   \
        }                                                                            \
    }

// domain
EVIGRID_DEFINE_ERROR(SchemaError, Data);
EVIGRID_DEFINE_ERROR(InvariantError, Data);
EVIGRID_DEFINE_ERROR(IoError, Data);
// autograd
EVIGRID_DEFINE_ERROR(ShapeError, Numeric);
EVIGRID_DEFINE_ERROR(NonFiniteError, Numeric);
EVIGRID_DEFINE_ERROR(NotScalarError, Numeric);
// grounding / losses / fpo
EVIGRID_DEFINE_ERROR(IntervalOutOfRange, Data);
EVIGRID_DEFINE_ERROR(EmptySalientError, Data);
EVIGRID_DEFINE_ERROR(EmptyMaskError, Data);
EVIGRID_DEFINE_ERROR(ArityMismatch, Data);
// model
EVIGRID_DEFINE_ERROR(LengthExceeded, Data);
EVIGRID_DEFINE_ERROR(ConfigError, Config);
// synth
EVIGRID_DEFINE_ERROR(InfeasibleFactor, Data);
EVIGRID_DEFINE_ERROR(InfeasiblePerturbation, Data);
EVIGRID_DEFINE_ERROR(DistorterError, Data);
// eval
EVIGRID_DEFINE_ERROR(MissingPrediction, Data);
// pipeline gates
EVIGRID_DEFINE_ERROR(AcceptanceFailure, Acceptance);

#undef EVIGRID_DEFINE_ERROR

}  // namespace evigrid
