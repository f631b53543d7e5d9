#pragma once

#include <stdexcept>
#include <string>

namespace teata {

// Error categories map onto CLI exit codes (see tools/teata.cpp).
enum class ErrorCategory { Config, Data, Runtime };

class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what, ErrorCategory category)
      : std::runtime_error(kind + ": " + what), kind_(std::move(kind)), message_(what), category_(category) {}

  const std::string& kind() const noexcept { return kind_; }
  /// The text without the kind prefix.
  const std::string& message() const noexcept { return message_; }
  ErrorCategory category() const noexcept { return category_; }

 private:
  std::string kind_;
  std::string message_;
  ErrorCategory category_;
};

#define TEATA_DEFINE_ERROR(Name, Category)                                       \
  class Name : public Error {                                                   \
   public:                                                                      \
    explicit Name(const std::string& what) : Error(#Name, what, Category) {}    \
  };

TEATA_DEFINE_ERROR(ConfigError, ErrorCategory::Config)

TEATA_DEFINE_ERROR(MissingFile, ErrorCategory::Data)
TEATA_DEFINE_ERROR(SchemaError, ErrorCategory::Data)
TEATA_DEFINE_ERROR(ProtocolError, ErrorCategory::Data)
TEATA_DEFINE_ERROR(IOError, ErrorCategory::Data)
TEATA_DEFINE_ERROR(VersionMismatch, ErrorCategory::Data)
TEATA_DEFINE_ERROR(IntegrityError, ErrorCategory::Data)
TEATA_DEFINE_ERROR(MissingReports, ErrorCategory::Data)
TEATA_DEFINE_ERROR(DataLeakError, ErrorCategory::Data)

TEATA_DEFINE_ERROR(InvalidArgument, ErrorCategory::Runtime)
TEATA_DEFINE_ERROR(ShapeError, ErrorCategory::Runtime)
TEATA_DEFINE_ERROR(NonFiniteError, ErrorCategory::Runtime)
TEATA_DEFINE_ERROR(LabelOutOfRange, ErrorCategory::Runtime)
TEATA_DEFINE_ERROR(DegenerateBatch, ErrorCategory::Runtime)
TEATA_DEFINE_ERROR(AlreadyInitialized, ErrorCategory::Runtime)
TEATA_DEFINE_ERROR(KeyError, ErrorCategory::Runtime)
TEATA_DEFINE_ERROR(MissingSource, ErrorCategory::Runtime)
TEATA_DEFINE_ERROR(EmptyIdentity, ErrorCategory::Runtime)
TEATA_DEFINE_ERROR(InvalidEpoch, ErrorCategory::Runtime)
TEATA_DEFINE_ERROR(EmptyGallery, ErrorCategory::Runtime)

#undef TEATA_DEFINE_ERROR

}  // namespace teata
