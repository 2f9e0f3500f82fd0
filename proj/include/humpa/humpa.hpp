#pragma once

#include "humpa/classifier.hpp"
#include "humpa/corpus.hpp"
#include "humpa/decoding.hpp"
#include "humpa/detectors.hpp"
#include "humpa/dpo.hpp"
#include "humpa/enumerable_policy.hpp"
#include "humpa/language_model.hpp"
#include "humpa/loglinear_model.hpp"
#include "humpa/metrics.hpp"
#include "humpa/ngram_model.hpp"
#include "humpa/oracle.hpp"
#include "humpa/parallel.hpp"
#include "humpa/pipeline.hpp"
#include "humpa/preference.hpp"
#include "humpa/rng.hpp"
#include "humpa/scoring.hpp"
#include "humpa/serialization.hpp"
#include "humpa/synthetic.hpp"
#include "humpa/types.hpp"
#include "humpa/vocabulary.hpp"
