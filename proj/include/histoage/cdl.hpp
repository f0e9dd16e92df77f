// Copyright 2026 The HistoAge Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "histoage/augment.hpp"
#include "histoage/autodiff.hpp"
#include "histoage/optim.hpp"
#include "histoage/tiler.hpp"

namespace histoage {

/// VGG-style encoder: three conv blocks (3x3, same padding, ReLU) with a 2x2
/// max pool between blocks, global average pooling, then two ReLU fully
/// connected layers to `embed_dim`.
struct EncoderConfig {
  std::array<int, 3> widths{64, 128, 256};
  std::array<int, 3> depths{2, 2, 3};
  int kernel = 3;
  int input_side = kNetworkInputSide;
  int embed_dim = 512;

  void validate() const;
};

/// fc(D -> H), batch norm, ReLU, fc(H -> D). hidden == 0 means D / 4.
struct PredictorConfig {
  int hidden = 0;
};

/// Default embedding width per tiling scale: 512 for S1, 128 for S2.
int default_embed_dim(ScaleTag scale);

template <typename T>
class CdlNetwork {
 public:
  CdlNetwork(EncoderConfig encoder, PredictorConfig predictor, std::uint64_t init_seed);

  const EncoderConfig& encoder_config() const { return encoder_; }
  int hidden_width() const { return hidden_; }
  int embed_dim() const { return encoder_.embed_dim; }
  void set_bn_momentum(double m) { bn_momentum_ = m; }

  ad::ParameterStore<T>& store() { return store_; }
  const ad::ParameterStore<T>& store() const { return store_; }

  /// image [3, S, S] -> [D].
  ad::Var<T> encode(ad::Tape<T>& tape, ad::Var<T> image) const;
  /// z [N, D] -> [N, D]. Train mode updates the batch-norm running statistics.
  ad::Var<T> predict(ad::Tape<T>& tape, ad::Var<T> z, ad::BatchNormMode mode);

  /// Same architecture and values in another precision.
  template <typename U>
  CdlNetwork<U> cast() const;

 private:
  template <typename U>
  friend class CdlNetwork;
  CdlNetwork() = default;

  EncoderConfig encoder_;
  int hidden_ = 0;
  double bn_momentum_ = 0.1;
  ad::ParameterStore<T> store_;
};

/// -(p . z) / (|p| |z|). Throws NumericError on a zero-norm vector.
double cosine_loss(std::span<const double> p, std::span<const double> z);

/// Mean over rows of the negative cosine similarity between p and z [N, D].
/// The caller decides whether z carries a stop-gradient.
template <typename T>
ad::Var<T> negative_cosine(ad::Var<T> p, ad::Var<T> z);

/// HWC float image -> [3, H, W] tensor.
template <typename T>
BasicTensor<T> image_tensor(const ImageF& image);

template <typename T>
struct LossAndGradients {
  double loss = 0;
  ad::Gradients<T> grads;          // one per parameter of the network store
  std::vector<std::vector<T>> z2;  // encoder outputs of the v2 branch, row per pair
};

/// Loss = mean_i negcos(predict(encode(v1_i)), stopgrad(encode(v2_i))).
///
/// Evaluated data-parallel: each v1 encoder pass has its own tape, the
/// predictor runs batched on one tape (batch norm couples the rows), then
/// each encoder tape receives its row of the predictor's input gradient.
/// Per-pair gradients are summed in index order, so the result does not
/// depend on the number of workers. Train-mode batch norm statistics are
/// updated as a side effect.
template <typename T>
LossAndGradients<T> cdl_loss_and_gradients(CdlNetwork<T>& net, std::span<const ViewPair> batch,
                                           bool recompute_activations = false);

/// Reference evaluation on a single tape with both branches recorded and an
/// explicit stop_gradient on the v2 output. Used to cross-check the
/// data-parallel path.
template <typename T>
LossAndGradients<T> cdl_loss_single_tape(CdlNetwork<T>& net, std::span<const ViewPair> batch);

/// One optimizer step; returns the batch loss. Non-finite loss throws
/// NumericError before any parameter changes.
double cdl_step(CdlNetwork<float>& net, ad::Sgd<float>& optimizer, std::span<const ViewPair> batch,
                double lr, ad::StepContext ctx, std::vector<std::vector<float>>* z2_out = nullptr,
                bool recompute_activations = false);

struct CdlTrainConfig {
  EncoderConfig encoder;
  PredictorConfig predictor;
  ScaleTag scale = ScaleTag::kS1;
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  ad::SgdConfig sgd{};
  double bn_momentum = 0.1;
  AugmentPolicy augment{};
  std::uint64_t seed = 0;
  std::size_t collapse_patience = 5;
  bool recompute_activations = false;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double learning_rate = 0;
  double loss = 0;           // mean batch loss; NaN if the epoch aborted
  double embedding_std = 0;  // mean per-dimension std of l2-normalised z
  bool aborted = false;
};

struct CdlTrainResult {
  CdlNetwork<float> network;
  std::vector<EpochRecord> epochs;
  std::vector<std::string> warnings;
  bool collapse_detected = false;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains on stored 256x256 patches (8-bit). Deterministic in the config.
CdlTrainResult train_cdl(std::span<const Image8> patches, const CdlTrainConfig& config,
                         const EpochCallback& on_epoch = {});

/// Collapse threshold on the mean per-dimension std: 0.01 / sqrt(D).
double collapse_threshold(int embed_dim);

/// Mean over dimensions of the std (population) of l2-normalised rows.
double normalized_embedding_std(const std::vector<std::vector<float>>& rows);

struct CdlCheckpoint {
  CdlNetwork<float> network;
  ScaleTag scale = ScaleTag::kS1;
};

void save_checkpoint(const std::filesystem::path& path, const CdlNetwork<float>& net, ScaleTag scale);
CdlCheckpoint load_checkpoint(const std::filesystem::path& path);

/// Predictor output on the un-augmented center 224 crop, batch norm in eval
/// mode; one row per patch in input order. Throws ContractError when the
/// patches' scale differs from the checkpoint's.
std::vector<std::vector<float>> extract_features(const CdlCheckpoint& checkpoint,
                                                 std::span<const Image8> patches, ScaleTag scale);
std::vector<std::vector<float>> extract_features(CdlNetwork<float>& net, std::span<const Image8> patches);

}  // namespace histoage
