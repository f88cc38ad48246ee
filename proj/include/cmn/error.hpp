#pragma once

#include <stdexcept>

namespace cmn {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace cmn
