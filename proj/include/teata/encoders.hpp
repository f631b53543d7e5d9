#pragma once

// Tiny CLIP-style dual encoder.
//
// The image side is a patch-embedding transformer whose class token, after a
// final layer norm, is the pre-projection feature; a bias-free linear map
// takes it to the shared embedding width. The text side embeds a fixed
// template plus externally supplied slot vectors, runs causal transformer
// blocks and reads the end token.

#include "teata/nn.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace teata {

struct ImageEncoderConfig {
  int image_height = 64;
  int image_width = 32;
  int patch_size = 4;
  int width = 48;  // transformer width == pre-projection feature width
  int layers = 2;
  int heads = 4;
  int mlp_ratio = 4;
  int embed_dim = 32;

  int num_patches() const { return (image_height / patch_size) * (image_width / patch_size); }
  void validate() const;
};

struct TextEncoderConfig {
  int token_dim = 32;
  int layers = 2;
  int heads = 4;
  int mlp_ratio = 4;
  int embed_dim = 32;
  int prompt_pairs = 16;  // M

  void validate() const;
};

/// A batch of RGB images, one image per row in HWC order with values in [0,1].
struct ImageBatch {
  Eigen::Index height = 0;
  Eigen::Index width = 0;
  Matrix pixels;  // count x (height*width*3)

  Eigen::Index count() const { return pixels.rows(); }
};

class ImageEncoder {
 public:
  ImageEncoder(const ImageEncoderConfig& config, std::uint64_t seed);

  struct Output {
    ag::Var pre_features;  // B x width
    ag::Var features;      // B x embed_dim
  };

  /// Differentiable forward. Records a graph unless a NoGradGuard is active.
  Output forward(const ImageBatch& batch) const;

  const ImageEncoderConfig& config() const { return config_; }
  nn::ParameterSet& parameters() { return params_; }
  const nn::ParameterSet& parameters() const { return params_; }
  const ag::Var& projection() const { return projection_; }

  void freeze() { params_.set_trainable(false); }
  void unfreeze() { params_.set_trainable(true); }
  bool frozen() const { return !params_.trainable(); }

 private:
  Matrix patchify(const ImageBatch& batch) const;

  ImageEncoderConfig config_;
  nn::ParameterSet params_;
  nn::Linear patch_embed_;
  ag::Var class_token_;
  ag::Var positions_;
  nn::LayerNorm ln_pre_;
  std::vector<nn::TransformerBlock> blocks_;
  nn::LayerNorm ln_post_;
  ag::Var projection_;
};

struct EncodedImages {
  Matrix pre_features;
  Matrix features;
};

/// Eval-mode encoding with no graph. Unnormalized outputs.
EncodedImages encode_images(const ImageEncoder& encoder, const ImageBatch& batch);

/// Same as above, processing `chunk` images per forward pass.
EncodedImages encode_images_chunked(const ImageEncoder& encoder, const ImageBatch& batch, Eigen::Index chunk = 64);

/// Fixed template vocabulary.
enum class TemplateToken : int { Start = 0, End, A, Photo, Of, Person, Period };
inline constexpr int kVocabularySize = 7;
inline constexpr int kSlotToken = -1;

/// Token ids of "[start] a photo of a (X1 Y1 ... XM YM) person . [end]";
/// kSlotToken marks the 2M learnable slot positions.
std::vector<int> prompt_template(int pairs);

struct PromptSequence {
  std::vector<int> token_ids;  // template with kSlotToken at slot positions
  Matrix slots;                // (number of slot positions) x token_dim, in order

  std::size_t length() const { return token_ids.size(); }
};

class TextEncoder {
 public:
  TextEncoder(const TextEncoderConfig& config, std::uint64_t seed);

  /// slots: (num_seq * 2M) x token_dim, sequence-major. Returns num_seq x embed_dim.
  ag::Var encode(const ag::Var& slots, Eigen::Index num_seq) const;

  const TextEncoderConfig& config() const { return config_; }
  Eigen::Index sequence_length() const { return static_cast<Eigen::Index>(template_.size()); }
  nn::ParameterSet& parameters() { return params_; }
  const nn::ParameterSet& parameters() const { return params_; }

  void freeze() { params_.set_trainable(false); }
  void unfreeze() { params_.set_trainable(true); }
  bool frozen() const { return !params_.trainable(); }

 private:
  TextEncoderConfig config_;
  std::vector<int> template_;
  nn::ParameterSet params_;
  ag::Var token_table_;
  ag::Var positions_;
  std::vector<nn::TransformerBlock> blocks_;
  nn::LayerNorm ln_final_;
  ag::Var projection_;
};

/// Text embedding for a single assembled prompt (row vector of width embed_dim).
RowVector encode_prompt(const TextEncoder& encoder, const PromptSequence& sequence);

}  // namespace teata
