#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace piilab {

// Error taxonomy. Every category carries a human-readable message naming the
// offending quantity (shapes, ids, stages) so failures are actionable.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& m) : std::runtime_error("shape error: " + m) {}
};
struct ParamError : std::runtime_error {
    explicit ParamError(const std::string& m) : std::runtime_error("parameter error: " + m) {}
};
struct StateError : std::runtime_error {
    explicit StateError(const std::string& m) : std::runtime_error("state error: " + m) {}
};
struct DataError : std::runtime_error {
    explicit DataError(const std::string& m) : std::runtime_error("data error: " + m) {}
};
struct InputError : std::runtime_error {
    explicit InputError(const std::string& m) : std::runtime_error("input error: " + m) {}
};
struct CapacityError : std::runtime_error {
    explicit CapacityError(const std::string& m) : std::runtime_error("capacity error: " + m) {}
};
struct ConsistencyError : std::runtime_error {
    explicit ConsistencyError(const std::string& m) : std::runtime_error("consistency error: " + m) {}
};
struct TrainingError : std::runtime_error {
    explicit TrainingError(const std::string& m) : std::runtime_error("training error: " + m) {}
};
struct LookupError : std::runtime_error {
    explicit LookupError(const std::string& m) : std::runtime_error("lookup error: " + m) {}
};
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& m) : std::runtime_error("configuration error: " + m) {}
};
struct StalenessError : std::runtime_error {
    explicit StalenessError(const std::string& m) : std::runtime_error("staleness error: " + m) {}
};
struct IoError : std::runtime_error {
    explicit IoError(const std::string& m) : std::runtime_error("io error: " + m) {}
};

}  // namespace piilab
