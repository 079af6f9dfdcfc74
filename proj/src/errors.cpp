#include "candle/errors.hpp"

namespace candle {

ValidationError::ValidationError(std::string field, const std::string& what)
    : Error("validation error [" + field + "]: " + what), field_(std::move(field)) {}

FormatError::FormatError(std::size_t offset, const std::string& what)
    : Error("format error at byte " + std::to_string(offset) + ": " + what), offset_(offset) {}

DegenerateError::DegenerateError(std::size_t row, const std::string& what)
    : Error("degenerate vector at row " + std::to_string(row) + ": " + what), row_(row) {}

CoverageError::CoverageError(int class_id, const std::string& what)
    : Error("coverage error for class " + std::to_string(class_id) + ": " + what),
      class_id_(class_id) {}

}  // namespace candle
