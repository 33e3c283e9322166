#ifndef MOELORA_MOELORA_HPP
#define MOELORA_MOELORA_HPP

#include "moelora/bench.hpp"
#include "moelora/config.hpp"
#include "moelora/csv.hpp"
#include "moelora/grad.hpp"
#include "moelora/layer.hpp"
#include "moelora/matrix.hpp"
#include "moelora/optimizer.hpp"
#include "moelora/precondition.hpp"
#include "moelora/rng.hpp"
#include "moelora/verify.hpp"

#endif // MOELORA_MOELORA_HPP
