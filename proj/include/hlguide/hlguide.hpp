#pragma once

#include "hlguide/annotation.hpp"
#include "hlguide/errors.hpp"
#include "hlguide/evaluation.hpp"
#include "hlguide/guidance.hpp"
#include "hlguide/http_api.hpp"
#include "hlguide/llm_client.hpp"
#include "hlguide/micro_transformer.hpp"
#include "hlguide/model.hpp"
#include "hlguide/models.hpp"
#include "hlguide/one_layer_toy.hpp"
#include "hlguide/pipeline.hpp"
#include "hlguide/retrieval.hpp"
#include "hlguide/rng.hpp"
#include "hlguide/scenarios.hpp"
#include "hlguide/sequence.hpp"
#include "hlguide/service.hpp"
#include "hlguide/table_model.hpp"
#include "hlguide/text.hpp"
#include "hlguide/tokenizer.hpp"
#include "hlguide/uncertainty.hpp"
#include "hlguide/vocabulary.hpp"
#include "hlguide/weights_io.hpp"
