#pragma once

#include <stdexcept>
#include <string>

namespace marl {

/// Base of every error raised by the library. `code()` is a stable
/// machine-readable tag used by the CLI error JSON.
class Error : public std::runtime_error {
public:
    Error(std::string code, const std::string& what) : std::runtime_error(what), code_(std::move(code)) {}
    const std::string& code() const noexcept { return code_; }

private:
    std::string code_;
};

#define MARL_DEFINE_ERROR(Name, tag)                                                  \
    class Name : public Error {                                                      \
    public:                                                                          \
        explicit Name(const std::string& what) : Error(tag, what) {}                 \
    };

MARL_DEFINE_ERROR(IoError, "io_error")
MARL_DEFINE_ERROR(DimensionError, "dimension_error")
MARL_DEFINE_ERROR(StateError, "state_error")
MARL_DEFINE_ERROR(TrainingDiverged, "training_diverged")
MARL_DEFINE_ERROR(ConfigError, "configuration_error")
MARL_DEFINE_ERROR(ParameterError, "parameter_error")
MARL_DEFINE_ERROR(LabelError, "label_error")
MARL_DEFINE_ERROR(InvalidBounds, "invalid_bounds")
MARL_DEFINE_ERROR(OutOfCanvas, "out_of_canvas")
MARL_DEFINE_ERROR(InvalidRecord, "invalid_record")
MARL_DEFINE_ERROR(InputError, "input_error")
MARL_DEFINE_ERROR(ProviderError, "provider_error")
MARL_DEFINE_ERROR(MetricUndefined, "metric_undefined")
MARL_DEFINE_ERROR(DegenerateBuilding, "degenerate_building")
MARL_DEFINE_ERROR(StageDependencyError, "stage_dependency_error")

#undef MARL_DEFINE_ERROR

} // namespace marl
