#include "fedidx/optim.hpp"

namespace fedidx {

SgdState make_sgd(double learning_rate, double momentum, double weight_decay) {
  if (!(learning_rate >= 0.0)) throw ConfigError("learning rate must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be >= 0");
  SgdState s;
  s.learning_rate = learning_rate;
  s.momentum = momentum;
  s.weight_decay = weight_decay;
  return s;
}

}  // namespace fedidx
