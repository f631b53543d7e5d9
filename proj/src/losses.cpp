#include "teata/losses.hpp"

#include "teata/errors.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

namespace teata {

namespace {

constexpr double kNormFloor = 1e-12;

struct Normalized {
  Matrix unit;
  Vector norms;
};

Normalized normalize(const Matrix& m) {
  Normalized n{Matrix(m.rows(), m.cols()), Vector(m.rows())};
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    n.norms(r) = std::max(m.row(r).norm(), kNormFloor);
    n.unit.row(r) = m.row(r) / n.norms(r);
  }
  return n;
}

// Pulls a gradient w.r.t. unit rows back through the row normalization.
Matrix normalize_backward(const Normalized& n, const Matrix& grad_unit) {
  Matrix g(grad_unit.rows(), grad_unit.cols());
  for (Eigen::Index r = 0; r < g.rows(); ++r) {
    const double dot = n.unit.row(r).dot(grad_unit.row(r));
    g.row(r) = (grad_unit.row(r) - n.unit.row(r) * dot) / n.norms(r);
  }
  return g;
}

void check_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) throw NonFiniteError(std::string(what) + " contains non-finite values");
}

void check_labels(std::span<const int> labels, Eigen::Index rows, Eigen::Index num_classes, const char* op) {
  if (static_cast<Eigen::Index>(labels.size()) != rows)
    throw ShapeError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for " + std::to_string(rows) +
                     " rows");
  for (int y : labels)
    if (y < 0 || y >= num_classes)
      throw LabelOutOfRange(std::string(op) + ": label " + std::to_string(y) + " outside [0," +
                            std::to_string(num_classes) + ")");
}

// Row-wise softmax of z, numerically stabilized.
Matrix softmax_rows(const Matrix& z, Vector* logsumexp = nullptr) {
  Matrix p(z.rows(), z.cols());
  if (logsumexp) logsumexp->resize(z.rows());
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const double mx = z.row(r).maxCoeff();
    p.row(r) = (z.row(r).array() - mx).exp();
    const double s = p.row(r).sum();
    p.row(r) /= s;
    if (logsumexp) (*logsumexp)(r) = mx + std::log(s);
  }
  return p;
}

}  // namespace

void LossWeights::validate() const {
  if (!(epsilon >= 0.0 && epsilon < 1.0)) throw InvalidArgument("epsilon must lie in [0,1)");
  if (!(logit_scale > 0.0 && std::isfinite(logit_scale))) throw InvalidArgument("logit_scale must be positive");
  for (double w : {lambda1, lambda2, lambda3, triplet_margin})
    if (!std::isfinite(w) || w < 0.0) throw InvalidArgument("loss weights and margin must be finite and non-negative");
}

std::vector<double> smoothed_targets(int num_classes, double epsilon, int target) {
  if (num_classes <= 0) throw InvalidArgument("smoothed_targets: num_classes must be positive");
  if (target < 0 || target >= num_classes) throw LabelOutOfRange("smoothed_targets: target out of range");
  std::vector<double> q(static_cast<std::size_t>(num_classes), epsilon / num_classes);
  q[static_cast<std::size_t>(target)] = 1.0 - epsilon + epsilon / num_classes;
  return q;
}

ContrastiveLoss contrastive_i2t_t2i(const Matrix& image_feats, const Matrix& text_table, std::span<const int> labels,
                                    double temperature) {
  const Eigen::Index b = image_feats.rows(), n = text_table.rows();
  if (b < 2) throw ShapeError("contrastive: need at least 2 images");
  if (image_feats.cols() != text_table.cols()) throw ShapeError("contrastive: feature width mismatch");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw NonFiniteError("contrastive: bad temperature");
  check_finite(image_feats, "image features");
  check_finite(text_table, "text table");
  check_labels(labels, b, n, "contrastive");

  const auto img = normalize(image_feats);
  const auto txt = normalize(text_table);
  const Matrix sim = img.unit * txt.unit.transpose();  // B x N
  const Matrix z = sim / temperature;

  ContrastiveLoss out;

  // image -> text: each image classifies over all text rows.
  {
    Vector lse;
    Matrix p = softmax_rows(z, &lse);
    double loss = 0.0;
    Matrix dz = p;
    for (Eigen::Index i = 0; i < b; ++i) {
      const int y = labels[static_cast<std::size_t>(i)];
      loss += lse(i) - z(i, y);
      dz(i, y) -= 1.0;
    }
    dz /= static_cast<double>(b);
    out.i2t.value = loss / static_cast<double>(b);
    const Matrix dsim = dz / temperature;
    out.i2t.grad_image = normalize_backward(img, dsim * txt.unit);
    out.i2t.grad_text = normalize_backward(txt, dsim.transpose() * img.unit);
    out.i2t.grad_temperature = -(dz.array() * sim.array()).sum() / (temperature * temperature);
  }

  // text -> image: each identity present classifies over batch images,
  // averaging the log-probability across its positives.
  {
    std::map<int, std::vector<Eigen::Index>> positives;
    for (Eigen::Index i = 0; i < b; ++i) positives[labels[static_cast<std::size_t>(i)]].push_back(i);
    const double c = static_cast<double>(positives.size());
    Matrix dz = Matrix::Zero(b, n);
    double loss = 0.0;
    for (const auto& [cls, idx] : positives) {
      const Vector col = z.col(cls);
      const double mx = col.maxCoeff();
      Vector e = (col.array() - mx).exp();
      const double s = e.sum();
      const double lse = mx + std::log(s);
      e /= s;
      double mean_pos = 0.0;
      for (auto i : idx) mean_pos += col(i);
      mean_pos /= static_cast<double>(idx.size());
      loss += lse - mean_pos;
      dz.col(cls) += e / c;
      for (auto i : idx) dz(i, cls) -= 1.0 / (static_cast<double>(idx.size()) * c);
    }
    out.t2i.value = loss / c;
    const Matrix dsim = dz / temperature;
    out.t2i.grad_image = normalize_backward(img, dsim * txt.unit);
    out.t2i.grad_text = normalize_backward(txt, dsim.transpose() * img.unit);
    out.t2i.grad_temperature = -(dz.array() * sim.array()).sum() / (temperature * temperature);
  }
  return out;
}

ClassifierLoss id_loss(const Matrix& features, const Matrix& classifier, std::span<const int> labels, double epsilon,
                       double scale) {
  const Eigen::Index b = features.rows(), n = classifier.rows();
  if (b == 0) throw ShapeError("id_loss: empty batch");
  if (features.cols() != classifier.cols())
    throw ShapeError("id_loss: feature width " + std::to_string(features.cols()) + " vs classifier width " +
                     std::to_string(classifier.cols()));
  if (!(epsilon >= 0.0 && epsilon < 1.0)) throw InvalidArgument("id_loss: epsilon must lie in [0,1)");
  if (!(scale > 0.0 && std::isfinite(scale))) throw InvalidArgument("id_loss: scale must be positive");
  check_finite(features, "features");
  check_finite(classifier, "classifier");
  check_labels(labels, b, n, "id_loss");

  const auto f = normalize(features);
  const Matrix z = scale * (f.unit * classifier.transpose());
  Vector lse;
  Matrix dz = softmax_rows(z, &lse);
  double loss = 0.0;
  const double off = epsilon / static_cast<double>(n);
  for (Eigen::Index i = 0; i < b; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    // sum_j q_j (lse - z_j) with sum_j q_j = 1
    loss += lse(i) - (off * z.row(i).sum() + (1.0 - epsilon) * z(i, y));
    dz.row(i).array() -= off;
    dz(i, y) -= 1.0 - epsilon;
  }
  dz *= scale / static_cast<double>(b);
  ClassifierLoss out;
  out.value = loss / static_cast<double>(b);
  out.grad_features = normalize_backward(f, dz * classifier);
  out.grad_classifier = dz.transpose() * f.unit;
  return out;
}

FeatureLoss proj_loss(const Matrix& features, const Matrix& text_table_frozen, std::span<const int> labels,
                      double epsilon, double scale) {
  auto r = id_loss(features, text_table_frozen, labels, epsilon, scale);
  return {r.value, std::move(r.grad_features)};
}

FeatureLoss triplet_loss(const Matrix& features, std::span<const int> labels, double margin) {
  const Eigen::Index b = features.rows();
  if (static_cast<Eigen::Index>(labels.size()) != b) throw ShapeError("triplet_loss: label count mismatch");
  check_finite(features, "features");
  bool has_negative = false;
  for (Eigen::Index i = 1; i < b && !has_negative; ++i) has_negative = labels[static_cast<std::size_t>(i)] != labels[0];
  if (!has_negative) throw DegenerateBatch("triplet_loss: batch holds a single identity");

  // Squared distances via explicit differences keeps exact zeros for identical rows.
  Matrix dist(b, b);
  for (Eigen::Index i = 0; i < b; ++i)
    for (Eigen::Index j = 0; j < b; ++j) dist(i, j) = (features.row(i) - features.row(j)).norm();

  FeatureLoss out{0.0, Matrix::Zero(b, features.cols())};
  auto pull = [&](Eigen::Index i, Eigen::Index j, double sign) {
    if (dist(i, j) <= 0.0) return;  // subgradient 0 at coincident points
    const RowVector u = (features.row(i) - features.row(j)) / dist(i, j);
    out.grad_features.row(i) += sign * u;
    out.grad_features.row(j) -= sign * u;
  };
  for (Eigen::Index i = 0; i < b; ++i) {
    const int yi = labels[static_cast<std::size_t>(i)];
    Eigen::Index hp = -1, hn = -1;
    for (Eigen::Index j = 0; j < b; ++j) {
      if (j == i) continue;
      if (labels[static_cast<std::size_t>(j)] == yi) {
        if (hp < 0 || dist(i, j) > dist(i, hp)) hp = j;
      } else if (hn < 0 || dist(i, j) < dist(i, hn)) {
        hn = j;
      }
    }
    const double dp = hp >= 0 ? dist(i, hp) : 0.0;
    const double v = dp - dist(i, hn) + margin;
    if (v > 0.0) {
      out.value += v;
      if (hp >= 0) pull(i, hp, 1.0);
      pull(i, hn, -1.0);
    }
  }
  out.value /= static_cast<double>(b);
  out.grad_features /= static_cast<double>(b);
  return out;
}

double stage2_total(const Stage2Components& l, const LossWeights& w) {
  return w.lambda1 * l.proj + w.lambda2 * (l.id_pre + l.id) + w.lambda3 * (l.tri_pre + l.tri);
}

}  // namespace teata
