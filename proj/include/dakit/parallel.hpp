#pragma once

#include <cstddef>
#include <functional>

namespace dakit {

// Process-wide worker count used by ensemble loops. Results never depend on
// it: every task writes its own slot and draws from its own pre-split stream.
void set_thread_count(int n);
int thread_count();

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace dakit
