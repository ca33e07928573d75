#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "gdoc/checkpoint.hpp"
#include "gdoc/datagen.hpp"
#include "gdoc/model.hpp"
#include "gdoc/objectives.hpp"
#include "gdoc/queue.hpp"
#include "gdoc/run_config.hpp"

namespace gdoc {

enum class EmbeddingSource { Projection, Fused };

EmbeddingSource source_from_string(const std::string& s);

struct TrainConfig {
    Setting setting = Setting::S2;
    int batch_size = 16;
    int total_steps = 2000;
    double warmup_fraction = 0.1;
    double peak_lr = 2e-3;
    double final_lr = 2e-4;
    double weight_decay = 0.01;
    double temperature = 0.3;
    int queue_capacity = 512;
    int k_mine = 5;
    double lambda_entropy = 2.0;
    int entropy_sign = 1;
    int stage2_start_step = 1000;
    uint64_t seed = 1;
    bool deterministic = true;
    double grad_clip = 5.0;
    int checkpoint_interval = 1000;
    bool nn_in_denominator = false;
    L2uTargets l2u_targets = L2uTargets::Hard;
    bool freeze_backbones_stage2 = true;
    EmbeddingSource l2m_source = EmbeddingSource::Projection;
    EmbeddingSource l2u_source = EmbeddingSource::Fused;
    EmbeddingSource l2r_source = EmbeddingSource::Fused;
    int neighbor_refresh_interval = 0;  // 0 = mine once

    static TrainConfig from(const RunConfig& rc);
    void validate() const;
};

// Linear warmup to the peak, then linear decay to the final rate.
// lr_at(0) = peak / warmup_steps (the first update already moves).
double lr_at(int step, const TrainConfig& cfg);

// Decoupled-weight-decay adaptive optimizer over a parameter store.
class AdamW {
  public:
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void init(const Params<float>& params);

    // Applies one update. Returns false and leaves everything untouched when
    // any gradient is non-finite; after three consecutive aborted steps the
    // run halts with a NumericError.
    bool step(Params<float>& params, double lr, double weight_decay, double grad_clip);

    int64_t t() const { return t_; }
    int consecutive_failures() const { return consecutive_nonfinite_; }

    void save(CheckpointFile& file) const;
    void load(const CheckpointFile& file, const Params<float>& params);

  private:
    int64_t t_ = 0;
    int consecutive_nonfinite_ = 0;
    std::vector<std::vector<float>> m_, v_;
    std::vector<std::string> names_;
};

struct StepMetrics {
    int step = 0;
    double loss_total = 0, l2m_inter = 0, l2m_intra = 0, l2u = 0, l2r_v = 0, l2r_t = 0, lr = 0;
};

std::string format_metrics(const StepMetrics& m);

struct TrainResult {
    std::string checkpoint_path;
    std::string metrics_path;
    std::vector<StepMetrics> history;
};

class Trainer {
  public:
    Trainer(const RunConfig& rc, const std::string& corpus_dir, const std::string& out_dir);

    // Restores weights, moments, queues and counters; training continues at
    // the recorded step.
    void resume_from(const std::string& checkpoint_path);

    TrainResult run();

    Model<float>& model() { return *model_; }
    const TrainConfig& config() const { return cfg_; }
    const SupportQueue<float>& queue_vision() const { return *queue_v_; }
    const SupportQueue<float>& queue_language() const { return *queue_t_; }

  private:
    RunConfig run_cfg_;
    TrainConfig cfg_;
    std::string out_dir_;
    std::vector<DocumentPair> docs_;
    std::unique_ptr<Model<float>> model_;
    std::unique_ptr<SupportQueue<float>> queue_v_;
    std::unique_ptr<SupportQueue<float>> queue_t_;
    AdamW opt_;
    int start_step_ = 0;
    bool neighbors_mined_ = false;
    std::vector<std::vector<int>> neighbors_v_, neighbors_t_;
    std::vector<std::string> pending_log_;

    std::vector<int> epoch_permutation(int epoch) const;
    std::vector<int> batch_indices(int step) const;
    void mine_neighbors(int step);
    StepMetrics train_step(int step);
    void write_checkpoint_file(const std::string& path, int next_step) const;
    void log(const std::string& line);
};

}  // namespace gdoc
