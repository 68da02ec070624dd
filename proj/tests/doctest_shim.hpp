#pragma once

// libtorch's logging fallback claims the glog macro names. Drop the ones
// doctest wants so the assertion macros below belong to the test framework.
// Include this after every header that pulls in torch.
#undef CHECK
#undef CHECK_EQ
#undef CHECK_NE
#undef CHECK_LE
#undef CHECK_LT
#undef CHECK_GE
#undef CHECK_GT

#include <doctest.h>
