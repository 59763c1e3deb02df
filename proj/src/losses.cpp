#include "miniclip/losses.hpp"

// Loss math is header-only (templated over the scalar type); this unit just
// anchors the translation unit for the library target.
