#pragma once

#include <span>

#include "fedidx/matrix.hpp"

namespace fedidx {

// a.b / (|a| |b|). Zero-norm input is a DomainError: a zero embedding means
// something upstream went wrong.
double cosine_sim(std::span<const double> a, std::span<const double> b);

// Max-subtracted softmax.
Vector softmax(std::span<const double> v);

// KL(softmax(p_logits) || softmax(q_logits)).
double kl_from_logits(std::span<const double> p_logits, std::span<const double> q_logits);

Vector normalized(std::span<const double> v);

}  // namespace fedidx
