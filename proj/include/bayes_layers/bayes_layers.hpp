#pragma once

#include "bayes_layers/checkpoint.hpp"
#include "bayes_layers/data.hpp"
#include "bayes_layers/dense.hpp"
#include "bayes_layers/distributions.hpp"
#include "bayes_layers/elbo.hpp"
#include "bayes_layers/gp.hpp"
#include "bayes_layers/layer.hpp"
#include "bayes_layers/lstm.hpp"
#include "bayes_layers/models.hpp"
#include "bayes_layers/optim.hpp"
#include "bayes_layers/output_layers.hpp"
#include "bayes_layers/reversible.hpp"
#include "bayes_layers/tensor.hpp"
