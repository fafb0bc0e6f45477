#pragma once

#include "errors.hpp"
#include "tolerances.hpp"
#include "linalg.hpp"
#include "system.hpp"
#include "expr.hpp"
#include "audit.hpp"
#include "finder.hpp"
#include "transport.hpp"
#include "monodromy.hpp"
#include "io.hpp"
