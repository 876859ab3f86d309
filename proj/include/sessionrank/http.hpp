// cpp-httplib pulls in <resolv.h>, whose `_res` macro breaks Eigen headers
// included after it. Include Eigen first.

#pragma once

#include <Eigen/Dense>

#include <httplib.h>
