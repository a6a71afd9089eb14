#pragma once

#include <cstdint>
#include <functional>

namespace evax {

// Process-wide worker count for data decoding and per-sample work. Results
// never depend on it: work items are independent and reduced in index order.
void set_num_threads(int n);
int num_threads();

void parallel_for(std::int64_t n, const std::function<void(std::int64_t)> &fn);

}  // namespace evax
