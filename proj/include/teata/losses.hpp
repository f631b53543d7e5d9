#pragma once

// Training objectives with closed-form gradients.
//
// Each loss returns its scalar value together with the gradient of that value
// with respect to every differentiable input, so callers can splice it into
// the autograd graph (see ag::precomputed) or check it numerically.

#include "teata/tensor.hpp"

#include <span>
#include <vector>

namespace teata {

struct LossWeights {
  double lambda1 = 1.0;   // projection loss against the frozen text table
  double lambda2 = 0.25;  // identity losses (projected + pre-projection)
  double lambda3 = 1.0;   // triplet losses (projected + pre-projection)
  double epsilon = 0.1;   // label smoothing
  double triplet_margin = 0.3;
  double logit_scale = 1.0;  // multiplies the cosine logits of the identity and projection losses

  void validate() const;
};

/// Label-smoothed target distribution: 1 - eps + eps/N at `target`, eps/N elsewhere.
std::vector<double> smoothed_targets(int num_classes, double epsilon, int target);

struct ContrastiveTerm {
  double value = 0.0;
  Matrix grad_image;  // d value / d image_feats (unnormalized input)
  Matrix grad_text;   // d value / d text_table (unnormalized input)
  double grad_temperature = 0.0;
};

struct ContrastiveLoss {
  ContrastiveTerm i2t;
  ContrastiveTerm t2i;
};

/// Image-to-text and text-to-image cross-entropy over cosine similarities
/// divided by `temperature`. t2i averages log-probabilities over every batch
/// image of an identity and then averages over identities present.
ContrastiveLoss contrastive_i2t_t2i(const Matrix& image_feats, const Matrix& text_table, std::span<const int> labels,
                                    double temperature);

struct ClassifierLoss {
  double value = 0.0;
  Matrix grad_features;
  Matrix grad_classifier;
};

/// Label-smoothed cross-entropy of normalized features against classifier rows,
/// logits multiplied by `scale`. Classifier rows are used as given.
ClassifierLoss id_loss(const Matrix& features, const Matrix& classifier, std::span<const int> labels, double epsilon,
                       double scale = 1.0);

struct FeatureLoss {
  double value = 0.0;
  Matrix grad_features;
};

/// id_loss against a frozen text table; no gradient reaches the table.
FeatureLoss proj_loss(const Matrix& features, const Matrix& text_table_frozen, std::span<const int> labels,
                      double epsilon, double scale = 1.0);

/// Batch-hard triplet loss on Euclidean distances between unnormalized rows:
/// mean over anchors of max(0, hardest positive - hardest negative + margin).
FeatureLoss triplet_loss(const Matrix& features, std::span<const int> labels, double margin);

struct Stage2Components {
  double proj = 0.0;
  double id = 0.0;
  double id_pre = 0.0;
  double tri = 0.0;
  double tri_pre = 0.0;
};

/// lambda1 * proj + lambda2 * (id_pre + id) + lambda3 * (tri_pre + tri)
double stage2_total(const Stage2Components& losses, const LossWeights& weights);

}  // namespace teata
