#pragma once

#include <iosfwd>

#include "capsgan/training.hpp"

namespace capsgan {

// ---------------------------------------------------------------------------
// Score: exp of the expected KL divergence between per-image class posteriors
// and the split's marginal class distribution, reported per split.
// ---------------------------------------------------------------------------

struct ScoreReport {
    std::vector<double> split_scores;
    double mean = 0.0;
    double stddev = 0.0;
    int64_t n = 0;
    int64_t classes = 0;
    int splits = 1;
};

// probs [N,K]: rows must be distributions (sum 1 within 1e-5, entries >= 0).
// Splits are contiguous row ranges; 0*log 0 contributes nothing.
ScoreReport inception_score(const Tensor& probs, int splits);

// `split,score` rows followed by `mean,...` and `std,...` trailer lines
void write_score_csv(const ScoreReport& report, std::ostream& os);

// ---------------------------------------------------------------------------
// Surrogate scoring classifier: a small conv net trained on the target
// dataset, standing in for a large pretrained model at desk scale.
// ---------------------------------------------------------------------------

struct SurrogateScorerConfig {
    int64_t conv1_filters = 16;
    int64_t conv2_filters = 32;
    int64_t hidden = 128;
    int64_t classes = 10;
};

class SurrogateScorer {
public:
    SurrogateScorerConfig cfg;
    Conv2dLayer c1, c2;
    DenseLayer fc1, fc2;

    SurrogateScorer(const SurrogateScorerConfig& cfg, Rng& rng);
    Tensor logits(const Tensor& images) const;         // [N,classes]
    Tensor probabilities(const Tensor& images) const;  // softmax rows
    void collect(NamedTensors& params);
};

struct ScorerTrainConfig {
    int64_t epochs = 4;
    int64_t batch_size = 64;
    float lr = 1e-3f;
    uint64_t seed = 42;
    float accuracy_floor = 0.97f;
    int64_t holdout = 0;  // 0: one tenth of the dataset
};

struct ScorerTrainResult {
    SurrogateScorer scorer;
    float accuracy;  // held-out accuracy
};

// Trains on the labeled dataset minus a held-out tail and evaluates on the
// tail. Throws TrainingFloorError when the floor is not reached.
ScorerTrainResult train_surrogate_scorer(const Dataset& dataset, const ScorerTrainConfig& cfg);

Checkpoint scorer_to_checkpoint(SurrogateScorer& scorer, uint64_t seed);
SurrogateScorer scorer_from_checkpoint(const Checkpoint& ckpt);

// Classifier posteriors for a stack of images, evaluated without a graph.
Tensor scorer_probabilities_batched(const SurrogateScorer& scorer, const Tensor& images);

// Generates n images from the model and scores them. capsgan2 requires a
// reference dataset supplying real-image capsule vectors.
ScoreReport score_samples(GanModel& model, const SurrogateScorer& scorer, int64_t n, int splits,
                          uint64_t seed, const Dataset* capsule_source);

}  // namespace capsgan
