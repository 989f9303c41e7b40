#pragma once

#include "capsgan/data_io.hpp"
#include "capsgan/networks.hpp"

namespace capsgan {

enum class GLossVariant { non_saturating, minimax };
enum class DigitcapsSource { real_images, generated_images };

struct GanBatchLosses {
    float d_loss = 0.0f;
    float g_loss = 0.0f;
    float d_real_mean = 0.0f;  // mean D(x)
    float d_fake_mean = 0.0f;  // mean D(G(z))
};

// -mean log D(x) - mean log(1 - D(G(z))), log arguments clamped at 1e-7
Tensor d_loss(const Tensor& scores_real, const Tensor& scores_fake);
// non_saturating: -mean log D(G(z));  minimax: mean log(1 - D(G(z)))
Tensor g_loss(const Tensor& scores_fake, GLossVariant variant);

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
    float lr = 2e-4f;
    float beta1 = 0.5f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
};

struct AdamState {
    AdamConfig cfg;
    int64_t t = 0;
    std::vector<std::vector<float>> m, v;

    void init(const NamedTensors& params);
};

// Bias-corrected Adam update over params in list order. A parameter whose
// grad buffer was never populated is treated as zero-gradient. Throws
// NumericalError on a non-finite gradient.
void adam_step(NamedTensors& params, AdamState& state);

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainConfig {
    Arch arch = Arch::dcgan;
    int64_t epochs = 1;
    int64_t batch_size = 64;
    uint64_t seed = 42;
    float lr = 2e-4f;
    int routing_iters = 3;
    GLossVariant g_variant = GLossVariant::non_saturating;
    std::string out_dir;  // empty: train in memory, write nothing
    int64_t log_interval = 1;
    int64_t checkpoint_interval = 0;  // 0: only the final checkpoint
    int64_t sample_interval = 0;      // 0: only the final grid
    // Experimental switch reproducing the generated-image capsule feed;
    // the default trains from real-image capsules only.
    bool digitcaps_from_generated = false;
};

struct TrainSummary {
    int64_t steps = 0;
    GanBatchLosses last;
    std::string final_checkpoint;
    std::string metrics_csv;
};

class Trainer {
public:
    explicit Trainer(const TrainConfig& cfg);

    // One adversarial step: discriminator update on real + fresh fake scores,
    // then a generator update on fresh latents. capsgan2 draws its capsule
    // feed from this same real batch.
    GanBatchLosses train_step(const Tensor& real_batch);

    TrainSummary train(const Dataset& dataset);

    GanModel& model() { return model_; }
    const TrainConfig& config() const { return cfg_; }
    int64_t step() const { return step_; }
    DigitcapsSource last_feed_source() const { return last_feed_source_; }
    AdamState& opt_d() { return opt_d_; }
    AdamState& opt_g() { return opt_g_; }

    Checkpoint to_checkpoint() const;

private:
    GanBatchLosses run_step(const Tensor& real_batch);
    Tensor sample_latent(int64_t n);
    Tensor capsule_feed(const Tensor& real_batch, const Tensor& fake_batch);

    TrainConfig cfg_;
    GanModel model_;
    AdamState opt_d_, opt_g_;
    Rng rng_;
    int64_t step_ = 0;
    DigitcapsSource last_feed_source_ = DigitcapsSource::real_images;
};

// Checkpoint glue shared by the trainer, the CLI and the scorer.
Checkpoint model_to_checkpoint(GanModel& model, const AdamState* opt_d, const AdamState* opt_g,
                               uint64_t seed, uint64_t step);
GanModel model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace capsgan
