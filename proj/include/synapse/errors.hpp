#pragma once

#include <stdexcept>
#include <string>

namespace synapse {

/// Base of every error raised by the library. The CLI maps all of these to exit status 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define SYNAPSE_DEFINE_ERROR(Name)      \
  class Name : public Error {           \
   public:                              \
    using Error::Error;                 \
  }

SYNAPSE_DEFINE_ERROR(ShapeError);
SYNAPSE_DEFINE_ERROR(IndexError);
SYNAPSE_DEFINE_ERROR(InputError);
SYNAPSE_DEFINE_ERROR(ContractError);
SYNAPSE_DEFINE_ERROR(SpecError);
SYNAPSE_DEFINE_ERROR(ConfigError);
SYNAPSE_DEFINE_ERROR(FormatError);
SYNAPSE_DEFINE_ERROR(StalenessError);
SYNAPSE_DEFINE_ERROR(RestoreError);
SYNAPSE_DEFINE_ERROR(IntegrityError);
SYNAPSE_DEFINE_ERROR(NumericalError);
SYNAPSE_DEFINE_ERROR(UndefinedDeltaError);

#undef SYNAPSE_DEFINE_ERROR

/// Raised when the training loss becomes non-finite.
class TrainingError : public Error {
 public:
  TrainingError(int epoch, const std::string& what)
      : Error("epoch " + std::to_string(epoch) + ": " + what), epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

}  // namespace synapse
