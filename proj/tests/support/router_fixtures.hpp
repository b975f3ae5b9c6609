#pragma once

#include <vector>

#include "mos/router.hpp"

namespace mos::testing {

// Router whose projection is the identity on R^dim, so theme space equals
// input space and codebook rows can be placed by hand.
inline ThemeRouter identity_router(const std::vector<Vector>& rows, std::size_t k, double decay = 0.5) {
  ThemeRouter r;
  const std::size_t dim = rows.front().size();
  r.projection.layers.push_back({Matrix::identity(dim), Vector(dim, 0.0), Activation::kIdentity});
  r.codebook.rows = Matrix::from_rows(rows);
  r.codebook.decay = decay;
  r.codebook.usage.assign(rows.size(), 0);
  r.k = k;
  return r;
}

}  // namespace mos::testing
