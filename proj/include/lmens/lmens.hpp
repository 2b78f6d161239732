#pragma once

#include "lmens/analysis.hpp"
#include "lmens/corpus.hpp"
#include "lmens/error.hpp"
#include "lmens/evaluator.hpp"
#include "lmens/mixer.hpp"
#include "lmens/ngram.hpp"
#include "lmens/probstream.hpp"
