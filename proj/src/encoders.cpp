#include "teata/encoders.hpp"

#include "teata/errors.hpp"

#include <string>

namespace teata {

namespace {
// CLIP input normalization.
constexpr double kPixelMean[3] = {0.48145466, 0.4578275, 0.40821073};
constexpr double kPixelStd[3] = {0.26862954, 0.26130258, 0.27577711};
}  // namespace

void ImageEncoderConfig::validate() const {
  if (image_height <= 0 || image_width <= 0 || patch_size <= 0 || image_height % patch_size != 0 ||
      image_width % patch_size != 0)
    throw InvalidArgument("image size must be a positive multiple of patch_size");
  if (width <= 0 || layers < 0 || heads <= 0 || width % heads != 0 || mlp_ratio <= 0 || embed_dim <= 0)
    throw InvalidArgument("invalid image encoder dimensions");
}

void TextEncoderConfig::validate() const {
  if (token_dim <= 0 || layers < 0 || heads <= 0 || token_dim % heads != 0 || mlp_ratio <= 0 || embed_dim <= 0)
    throw InvalidArgument("invalid text encoder dimensions");
  if (prompt_pairs <= 0) throw InvalidArgument("prompt_pairs must be positive");
}

ImageEncoder::ImageEncoder(const ImageEncoderConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(derive_seed(seed, {0x1a}));
  const Eigen::Index patch_dim = static_cast<Eigen::Index>(config_.patch_size) * config_.patch_size * 3;
  patch_embed_ = nn::Linear::create(params_, "image_encoder.patch_embed", patch_dim, config_.width, false, rng);
  class_token_ = params_.add("image_encoder.class_token", truncated_normal(1, config_.width, nn::kInitStd, rng));
  positions_ = params_.add("image_encoder.positions",
                           truncated_normal(config_.num_patches() + 1, config_.width, nn::kInitStd, rng));
  ln_pre_ = nn::LayerNorm::create(params_, "image_encoder.ln_pre", config_.width);
  for (int l = 0; l < config_.layers; ++l)
    blocks_.push_back(nn::TransformerBlock::create(params_, "image_encoder.block" + std::to_string(l), config_.width,
                                                   config_.heads, config_.mlp_ratio, rng));
  ln_post_ = nn::LayerNorm::create(params_, "image_encoder.ln_post", config_.width);
  projection_ =
      params_.add("image_encoder.projection", truncated_normal(config_.width, config_.embed_dim, nn::kInitStd, rng));
}

Matrix ImageEncoder::patchify(const ImageBatch& batch) const {
  const int p = config_.patch_size;
  const int gh = config_.image_height / p, gw = config_.image_width / p;
  const Eigen::Index np = static_cast<Eigen::Index>(gh) * gw;
  const Eigen::Index pd = static_cast<Eigen::Index>(p) * p * 3;
  Matrix out(batch.count() * np, pd);
  for (Eigen::Index b = 0; b < batch.count(); ++b) {
    const double* img = batch.pixels.row(b).data();
    for (int py = 0; py < gh; ++py) {
      for (int px = 0; px < gw; ++px) {
        double* dst = out.row(b * np + py * gw + px).data();
        for (int y = 0; y < p; ++y) {
          const double* src = img + ((static_cast<Eigen::Index>(py) * p + y) * config_.image_width + px * p) * 3;
          for (int k = 0; k < p * 3; ++k) dst[y * p * 3 + k] = (src[k] - kPixelMean[k % 3]) / kPixelStd[k % 3];
        }
      }
    }
  }
  return out;
}

ImageEncoder::Output ImageEncoder::forward(const ImageBatch& batch) const {
  if (batch.count() <= 0) throw ShapeError("encode_images: empty batch");
  if (batch.height != config_.image_height || batch.width != config_.image_width ||
      batch.pixels.cols() != batch.height * batch.width * 3)
    throw ShapeError("encode_images: expected images of " + std::to_string(config_.image_height) + "x" +
                     std::to_string(config_.image_width) + "x3, got " + std::to_string(batch.height) + "x" +
                     std::to_string(batch.width) + " with " + std::to_string(batch.pixels.cols()) + " values");
  const Eigen::Index b = batch.count();
  const Eigen::Index seq = config_.num_patches() + 1;

  ag::Var patches(patchify(batch), false);
  ag::Var x = ag::prepend_class_token(patch_embed_(patches), class_token_, positions_, b);
  x = ln_pre_(x);
  for (const auto& block : blocks_) x = block(x, b, seq, false);

  std::vector<Eigen::Index> cls_rows(static_cast<std::size_t>(b));
  for (Eigen::Index i = 0; i < b; ++i) cls_rows[static_cast<std::size_t>(i)] = i * seq;
  ag::Var pre = ln_post_(ag::gather_rows(x, std::move(cls_rows)));
  ag::Var feat = ag::matmul(pre, projection_);
  return {pre, feat};
}

EncodedImages encode_images(const ImageEncoder& encoder, const ImageBatch& batch) {
  ag::NoGradGuard guard;
  auto out = encoder.forward(batch);
  return {out.pre_features.value(), out.features.value()};
}

EncodedImages encode_images_chunked(const ImageEncoder& encoder, const ImageBatch& batch, Eigen::Index chunk) {
  if (batch.count() <= 0) throw ShapeError("encode_images: empty batch");
  const auto& cfg = encoder.config();
  EncodedImages result{Matrix(batch.count(), cfg.width), Matrix(batch.count(), cfg.embed_dim)};
  for (Eigen::Index start = 0; start < batch.count(); start += chunk) {
    const Eigen::Index n = std::min(chunk, batch.count() - start);
    ImageBatch part{batch.height, batch.width, batch.pixels.middleRows(start, n)};
    auto enc = encode_images(encoder, part);
    result.pre_features.middleRows(start, n) = enc.pre_features;
    result.features.middleRows(start, n) = enc.features;
  }
  return result;
}

std::vector<int> prompt_template(int pairs) {
  using T = TemplateToken;
  auto id = [](T t) { return static_cast<int>(t); };
  std::vector<int> ids{id(T::Start), id(T::A), id(T::Photo), id(T::Of), id(T::A)};
  ids.insert(ids.end(), static_cast<std::size_t>(2 * pairs), kSlotToken);
  ids.insert(ids.end(), {id(T::Person), id(T::Period), id(T::End)});
  return ids;
}

TextEncoder::TextEncoder(const TextEncoderConfig& config, std::uint64_t seed)
    : config_(config), template_(prompt_template(config.prompt_pairs)) {
  config_.validate();
  Rng rng(derive_seed(seed, {0x7e}));
  const Eigen::Index len = sequence_length();
  token_table_ =
      params_.add("text_encoder.token_table", truncated_normal(kVocabularySize, config_.token_dim, nn::kInitStd, rng));
  positions_ = params_.add("text_encoder.positions", truncated_normal(len, config_.token_dim, nn::kInitStd, rng));
  for (int l = 0; l < config_.layers; ++l)
    blocks_.push_back(nn::TransformerBlock::create(params_, "text_encoder.block" + std::to_string(l),
                                                   config_.token_dim, config_.heads, config_.mlp_ratio, rng));
  ln_final_ = nn::LayerNorm::create(params_, "text_encoder.ln_final", config_.token_dim);
  projection_ = params_.add("text_encoder.projection",
                            truncated_normal(config_.token_dim, config_.embed_dim, nn::kInitStd, rng));
}

ag::Var TextEncoder::encode(const ag::Var& slots, Eigen::Index num_seq) const {
  if (num_seq <= 0) throw ShapeError("text encoder: no sequences");
  if (slots.cols() != config_.token_dim)
    throw ShapeError("text encoder: slot width " + std::to_string(slots.cols()) + ", expected " +
                     std::to_string(config_.token_dim));
  const Eigen::Index len = sequence_length();
  ag::Var x = ag::embed_template(token_table_, slots, positions_, template_, num_seq);
  for (const auto& block : blocks_) x = block(x, num_seq, len, true);
  std::vector<Eigen::Index> end_rows(static_cast<std::size_t>(num_seq));
  for (Eigen::Index n = 0; n < num_seq; ++n) end_rows[static_cast<std::size_t>(n)] = n * len + len - 1;
  return ag::matmul(ln_final_(ag::gather_rows(x, std::move(end_rows))), projection_);
}

RowVector encode_prompt(const TextEncoder& encoder, const PromptSequence& sequence) {
  const auto expected = prompt_template(encoder.config().prompt_pairs);
  if (sequence.token_ids != expected)
    throw ShapeError("encode_prompt: sequence length " + std::to_string(sequence.length()) + " does not match the " +
                     std::to_string(expected.size()) + "-token template");
  ag::NoGradGuard guard;
  ag::Var out = encoder.encode(ag::Var(sequence.slots, false), 1);
  return out.value().row(0);
}

}  // namespace teata
