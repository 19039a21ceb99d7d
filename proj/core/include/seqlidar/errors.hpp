// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace seqlidar {

// Every error raised by the library derives from Error so callers can catch
// one type; the subclasses name the broken contract.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class RangeError : public Error { using Error::Error; };
class ContractError : public Error { using Error::Error; };
class EvaluationError : public Error { using Error::Error; };
class ValidationError : public Error { using Error::Error; };
class GenerationError : public Error { using Error::Error; };
class VocabularyError : public Error { using Error::Error; };
class OrderingError : public Error { using Error::Error; };
class EstimatorError : public Error { using Error::Error; };
class IngestionError : public Error { using Error::Error; };
class IoError : public Error { using Error::Error; };
class EditError : public Error { using Error::Error; };
class TrainingError : public Error { using Error::Error; };

class SamplerDivergence : public Error {
 public:
  SamplerDivergence(int step, const std::string& what)
      : Error("sampler diverged at step " + std::to_string(step) + ": " + what), step_(step) {}
  int step() const noexcept { return step_; }

 private:
  int step_;
};

}  // namespace seqlidar
