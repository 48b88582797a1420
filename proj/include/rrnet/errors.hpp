#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace rrnet {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not conform for an operator.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Ground truth that cannot be written into target maps.
class TargetEncodingError : public Error {
 public:
  using Error::Error;
};

/// Scene sampling gave up after its rejection budget.
class GenerationError : public Error {
 public:
  GenerationError(std::size_t scene, const std::string& what)
      : Error("scene " + std::to_string(scene) + ": " + what), scene_(scene) {}
  std::size_t scene() const { return scene_; }

 private:
  std::size_t scene_;
};

/// Malformed dataset/detections line.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class FormatVersionError : public Error {
 public:
  using Error::Error;
};

/// backward() called twice on one recorded forward pass.
class TapeConsumedError : public Error {
 public:
  using Error::Error;
};

/// Optimizer asked to update a parameter that has no gradient.
class UpdateError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class EvaluationError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss during training.
class DivergenceError : public Error {
 public:
  DivergenceError(std::size_t step, const std::string& component)
      : Error("loss diverged at step " + std::to_string(step) + " in " + component),
        step_(step),
        component_(component) {}
  std::size_t step() const { return step_; }
  const std::string& component() const { return component_; }

 private:
  std::size_t step_;
  std::string component_;
};

}  // namespace rrnet
