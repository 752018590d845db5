#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hemorl/discretize/discretize.hpp"
#include "hemorl/nnkit/layers.hpp"
#include "hemorl/nnkit/recurrent.hpp"

namespace hemorl::embed {

enum class Arch { lstm, gru };

std::string_view to_string(Arch arch) noexcept;
Arch arch_from_string(std::string_view s);

struct EmbedConfig {
  Arch arch = Arch::lstm;
  std::size_t hidden = 32;
  std::size_t batch_size = 128;
  std::size_t max_epochs = 200;
  std::size_t patience = 10;  // epochs without validation improvement
  double lr = 1e-3;
  std::uint64_t seed = 0;
  bool teacher_forcing = true;  // the decoder always sees x_{t-1}; recorded for provenance

  void validate() const;
};

/// Two-layer recurrent encoder and a mirrored two-layer decoder with a dense
/// read-out. The decoder input at step t is [context, x_{t-1}] (x_{-1} = 0),
/// where context is the encoder's top hidden state at the last bin.
class EmbedModel {
 public:
  EmbedModel(Arch arch, std::vector<std::string> features, std::size_t hidden, std::uint64_t seed,
             std::string prep_hash);
  EmbedModel(const EmbedModel& other);
  EmbedModel& operator=(const EmbedModel& other);
  EmbedModel(EmbedModel&&) noexcept = default;
  EmbedModel& operator=(EmbedModel&&) noexcept = default;

  Arch arch() const noexcept { return arch_; }
  std::size_t hidden() const noexcept { return hidden_; }
  std::size_t feature_dim() const noexcept { return features_.size(); }
  const std::vector<std::string>& features() const noexcept { return features_; }
  const std::string& prep_hash() const noexcept { return prep_hash_; }
  std::uint64_t seed() const noexcept { return seed_; }

  /// Top-layer encoder hidden state after each bin: T x hidden.
  nn::Tensor embed_sequence(const std::vector<std::vector<double>>& features) const;
  /// S_t for bins 0..t of `episode`.
  std::vector<double> embed_history(const discretize::Episode& episode, std::size_t t) const;
  /// Teacher-forced reconstruction: T x feature_dim.
  nn::Tensor reconstruct(const std::vector<std::vector<double>>& features) const;
  /// Mean squared reconstruction error over every (bin, feature) of `episodes`.
  double reconstruction_mse(const std::vector<const discretize::Episode*>& episodes) const;

  /// Zeroes the gradients, runs forward/backward on a padded batch and
  /// returns its masked MSE.
  double loss_and_grad(const std::vector<const discretize::Episode*>& batch);

  std::vector<nn::Parameter*> parameters();
  std::vector<const nn::Parameter*> parameters() const;

  void save(const std::filesystem::path& path) const;
  /// Rejects a checkpoint whose preprocessing hash differs from `expected_prep_hash`.
  static EmbedModel load(const std::filesystem::path& path, const std::string& expected_prep_hash);

 private:
  friend class EmbedSession;
  Arch arch_;
  std::vector<std::string> features_;
  std::size_t hidden_;
  std::uint64_t seed_;
  std::string prep_hash_;
  std::unique_ptr<nn::RecurrentLayer> enc0_, enc1_, dec0_, dec1_;
  nn::Sequential out_;
};

/// Step-by-step encoder for online use; yields the same states as
/// embed_sequence().
class EmbedSession {
 public:
  explicit EmbedSession(const EmbedModel& model);
  std::vector<double> step(std::span<const double> features);
  std::size_t steps() const noexcept { return steps_; }

 private:
  const EmbedModel* model_;
  nn::RecurrentState s0_, s1_;
  std::size_t steps_ = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 0 = before training
  double train_mse = 0.0;
  double val_mse = 0.0;
};

struct TrainResult {
  EmbedModel model;
  std::vector<EpochRecord> curve;
  std::size_t best_epoch = 0;
  bool early_stopped = false;
};

/// Adam on masked reconstruction MSE. Keeps the weights of the epoch with
/// the lowest validation MSE (training MSE if `val` is empty). A non-finite
/// loss aborts with the epoch and batch.
TrainResult train_autoencoder(const std::vector<const discretize::Episode*>& train,
                              const std::vector<const discretize::Episode*>& val, const EmbedConfig& config,
                              const std::vector<std::string>& features, const std::string& prep_hash);

/// Embeddings for many episodes (one T x hidden tensor each).
std::vector<nn::Tensor> embed_all(const EmbedModel& model, const std::vector<const discretize::Episode*>& episodes,
                                  std::size_t threads = 0);

}  // namespace hemorl::embed
