#pragma once

// Umbrella header.
#include "circuit_align/error.hpp"
#include "circuit_align/rng.hpp"
#include "circuit_align/tensor_math.hpp"
#include "circuit_align/digest.hpp"
#include "circuit_align/safetensors.hpp"
#include "circuit_align/tokenizer.hpp"
#include "circuit_align/hooks.hpp"
#include "circuit_align/model.hpp"
#include "circuit_align/forward.hpp"
#include "circuit_align/task_data.hpp"
#include "circuit_align/intervention.hpp"
#include "circuit_align/circuit_discovery.hpp"
#include "circuit_align/alignment.hpp"
#include "circuit_align/component_analysis.hpp"
#include "circuit_align/toy_models.hpp"
#include "circuit_align/report.hpp"
#include "circuit_align/means_cache.hpp"
#include "circuit_align/reference.hpp"
