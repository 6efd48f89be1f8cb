#pragma once

#include <stdexcept>
#include <string>

namespace qm {

// Error taxonomy. The CLI maps these onto exit codes, so throw the most
// specific type that applies.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

struct NumericError : Error {
  using Error::Error;
};

}  // namespace qm

#define QM_CHECK(cond, msg)                \
  do {                                     \
    if (!(cond)) throw ::qm::Error(msg);   \
  } while (0)

#define QM_CHECK_SHAPE(cond, msg)               \
  do {                                          \
    if (!(cond)) throw ::qm::ShapeError(msg);   \
  } while (0)

#define QM_CHECK_CONFIG(cond, msg)              \
  do {                                          \
    if (!(cond)) throw ::qm::ConfigError(msg);  \
  } while (0)

#define QM_CHECK_IO(cond, msg)               \
  do {                                       \
    if (!(cond)) throw ::qm::IoError(msg);   \
  } while (0)
