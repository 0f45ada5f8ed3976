#pragma once

#include <gtest/gtest.h>

#include "support.hpp"

namespace dhan::test {

using ScalarTypes = ::testing::Types<float, double>;

template <class Dst, class Src>
void copy_values(ParamList<Dst> dst, const ParamList<Src>& src) {
  ASSERT_NO_THROW(copy_param_values(dst, src));
}

}  // namespace dhan::test
