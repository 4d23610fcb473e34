#pragma once

// Adam, the learning-rate schedule and the training loops.

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cpf/checkpoint.hpp"
#include "cpf/model.hpp"

namespace cpf {

struct TrainConfig {
  std::string mode = "single";
  std::size_t batch_size = 100;        // points (single) or clouds (full) per step
  std::size_t points_per_cloud = 128;  // full mode: points sampled from each cloud
  std::size_t iterations = 5000;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double lr_decay = 0.25;
  std::size_t lr_decay_period = 5000;  // epochs (full mode)
  double clip_norm = 10.0;             // 0 disables clipping
  std::uint64_t seed = 0;
  std::size_t log_every = 100;
  std::size_t checkpoint_every = 0;
  std::filesystem::path checkpoint;
  std::filesystem::path loss_csv;

  void validate() const;
};

class Adam {
 public:
  Adam() = default;
  Adam(const ParamList& params, double beta1, double beta2, double eps);

  // One bias-corrected update from the parameters' accumulated gradients,
  // after optional global-norm clipping. Returns the pre-clip gradient norm.
  double step(double lr, double clip_norm);
  std::size_t steps() const { return step_; }
  // Moments as named buffers ("adam.m.<name>", "adam.v.<name>", "adam.step").
  void collect(ParamList& out) const;
  void restore(const Checkpoint& ckpt);

 private:
  ParamList params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  std::size_t step_ = 0;
};

// lr0 * decay^floor(epoch / period) in full mode, lr0 in single-cloud mode.
double lr_at(std::size_t epoch, const TrainConfig& config);

struct LossRecord {
  std::size_t iteration = 0;
  double loss = 0.0;  // per point
  double lr = 0.0;
};

struct TrainResult {
  std::vector<LossRecord> trace;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

using TrainCallback = std::function<void(const LossRecord&)>;

TrainResult train_single(SingleCloudModel& model, const PointCloud& cloud, const TrainConfig& config,
                         const TrainCallback& callback = {});
TrainResult train_full(FullModel& model, const std::vector<PointCloud>& clouds, const TrainConfig& config,
                       const TrainCallback& callback = {});

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRecord>& trace);

void save_model(const std::filesystem::path& path, const ModelConfig& config, const ParamList& params,
                const Adam* adam = nullptr);

struct LoadedModel {
  ModelConfig config;
  std::unique_ptr<SingleCloudModel> single;
  std::unique_ptr<FullModel> full;
};
LoadedModel load_model(const std::filesystem::path& path);

}  // namespace cpf
