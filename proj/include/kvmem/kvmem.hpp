#pragma once

#include "kvmem/autograd.hpp"
#include "kvmem/checkpoint.hpp"
#include "kvmem/config.hpp"
#include "kvmem/corpus.hpp"
#include "kvmem/editor.hpp"
#include "kvmem/error.hpp"
#include "kvmem/evalbench.hpp"
#include "kvmem/gradcheck.hpp"
#include "kvmem/hash.hpp"
#include "kvmem/lora.hpp"
#include "kvmem/model.hpp"
#include "kvmem/optim.hpp"
#include "kvmem/pipeline.hpp"
#include "kvmem/tensor.hpp"
#include "kvmem/trainer.hpp"
