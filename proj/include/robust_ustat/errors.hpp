#pragma once

#include <stdexcept>
#include <string>

namespace robust_ustat {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define ROBUST_USTAT_DEFINE_ERROR(Name)      \
  class Name : public Error {                \
   public:                                   \
    using Error::Error;                      \
  };

ROBUST_USTAT_DEFINE_ERROR(InvalidMatrix)
ROBUST_USTAT_DEFINE_ERROR(SpectralDomainError)
ROBUST_USTAT_DEFINE_ERROR(DimError)
ROBUST_USTAT_DEFINE_ERROR(EffectiveRankUndefined)
ROBUST_USTAT_DEFINE_ERROR(ArityError)
ROBUST_USTAT_DEFINE_ERROR(PermutationError)
ROBUST_USTAT_DEFINE_ERROR(ParamError)
ROBUST_USTAT_DEFINE_ERROR(AdmissibleSetEmpty)
ROBUST_USTAT_DEFINE_ERROR(InsufficientData)
ROBUST_USTAT_DEFINE_ERROR(ModelError)
ROBUST_USTAT_DEFINE_ERROR(ConfigError)
ROBUST_USTAT_DEFINE_ERROR(DataError)

#undef ROBUST_USTAT_DEFINE_ERROR

}  // namespace robust_ustat
