#pragma once

#include <stdexcept>
#include <string>

namespace nseg {

enum class Errc {
  parse,
  validation,
  shape,
  variant_mismatch,
  weights_not_found,
  weights_shape_mismatch,
  file_not_found,
  bad_mask_values,
  too_few_slides,
  empty_split,
  empty_input,
  diverged,
  config_mismatch,
  range,
  io,
};

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
  Errc code() const { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& msg) { throw Error(code, msg); }

inline void check(bool cond, Errc code, const std::string& msg) {
  if (!cond) fail(code, msg);
}

}  // namespace nseg
