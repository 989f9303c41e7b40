#include "capsgan/metrics.hpp"

#include <cmath>
#include <ostream>

namespace capsgan {

ScoreReport inception_score(const Tensor& probs, int splits) {
    if (probs.rank() != 2) throw ShapeError("inception_score: expects probs [N,K]");
    int64_t n = probs.dim(0), k = probs.dim(1);
    if (splits < 1) throw UsageError("inception_score: splits must be >= 1");
    if (n < splits) throw UsageError("inception_score: need at least one row per split");
    for (int64_t r = 0; r < n; ++r) {
        const float* row = probs.data().data() + r * k;
        double s = 0.0;
        for (int64_t c = 0; c < k; ++c) {
            if (row[c] < 0.0f)
                throw DataFormatError(DataFormatError::Kind::bad_values,
                                      "negative probability in row " + std::to_string(r));
            s += row[c];
        }
        if (std::abs(s - 1.0) > 1e-5)
            throw DataFormatError(DataFormatError::Kind::bad_values,
                                  "row " + std::to_string(r) + " sums to " + std::to_string(s));
    }

    ScoreReport report;
    report.n = n;
    report.classes = k;
    report.splits = splits;
    std::vector<double> marginal(static_cast<size_t>(k));
    for (int s = 0; s < splits; ++s) {
        int64_t lo = n * s / splits, hi = n * (s + 1) / splits;
        int64_t rows = hi - lo;
        std::fill(marginal.begin(), marginal.end(), 0.0);
        for (int64_t r = lo; r < hi; ++r) {
            const float* row = probs.data().data() + r * k;
            for (int64_t c = 0; c < k; ++c) marginal[static_cast<size_t>(c)] += row[c];
        }
        for (auto& v : marginal) v /= static_cast<double>(rows);
        double kl_sum = 0.0;
        for (int64_t r = lo; r < hi; ++r) {
            const float* row = probs.data().data() + r * k;
            double kl = 0.0;
            for (int64_t c = 0; c < k; ++c) {
                double p = row[c];
                if (p > 0.0) kl += p * std::log(p / marginal[static_cast<size_t>(c)]);
            }
            kl_sum += kl;
        }
        report.split_scores.push_back(std::exp(kl_sum / static_cast<double>(rows)));
    }
    double m = 0.0;
    for (double s : report.split_scores) m += s;
    m /= static_cast<double>(splits);
    double var = 0.0;
    for (double s : report.split_scores) var += (s - m) * (s - m);
    report.mean = m;
    report.stddev = std::sqrt(var / static_cast<double>(splits));
    return report;
}

void write_score_csv(const ScoreReport& report, std::ostream& os) {
    os << "split,score\n";
    for (size_t i = 0; i < report.split_scores.size(); ++i)
        os << i << "," << report.split_scores[i] << "\n";
    os << "mean," << report.mean << "\n";
    os << "std," << report.stddev << "\n";
}

// ---------------------------------------------------------------------------
// Surrogate scorer
// ---------------------------------------------------------------------------

SurrogateScorer::SurrogateScorer(const SurrogateScorerConfig& c, Rng& rng) : cfg(c) {
    c1 = Conv2dLayer(1, cfg.conv1_filters, 5, 2, 2, true, rng,
                     std::sqrt(2.0f / 25.0f));
    c2 = Conv2dLayer(cfg.conv1_filters, cfg.conv2_filters, 5, 2, 2, true, rng,
                     std::sqrt(2.0f / (25.0f * static_cast<float>(cfg.conv1_filters))));
    int64_t flat = cfg.conv2_filters * 7 * 7;
    fc1 = DenseLayer(flat, cfg.hidden, rng, std::sqrt(2.0f / static_cast<float>(flat)));
    fc2 = DenseLayer(cfg.hidden, cfg.classes, rng,
                     std::sqrt(2.0f / static_cast<float>(cfg.hidden)));
}

Tensor SurrogateScorer::logits(const Tensor& images) const {
    if (images.rank() != 4 || images.dim(1) != 1 || images.dim(2) != 28 || images.dim(3) != 28)
        throw ShapeError("scorer expects images [N,1,28,28], got " + shape_str(images.shape()));
    Tensor h = relu(c1.forward(images));  // 14x14
    h = relu(c2.forward(h));              // 7x7
    Tensor flat = reshape(h, {h.dim(0), h.numel() / h.dim(0)});
    return fc2.forward(relu(fc1.forward(flat)));
}

Tensor SurrogateScorer::probabilities(const Tensor& images) const {
    return softmax_lastdim(logits(images));
}

void SurrogateScorer::collect(NamedTensors& params) {
    c1.collect("scorer.c1", params);
    c2.collect("scorer.c2", params);
    fc1.collect("scorer.fc1", params);
    fc2.collect("scorer.fc2", params);
}

ScorerTrainResult train_surrogate_scorer(const Dataset& dataset, const ScorerTrainConfig& cfg) {
    if (!dataset.has_labels()) throw UsageError("scorer training requires labels");
    int64_t n = dataset.count();
    int64_t holdout = cfg.holdout > 0 ? cfg.holdout : std::max<int64_t>(1, n / 10);
    if (holdout >= n) throw UsageError("scorer training: holdout leaves no training data");
    int64_t train_n = n - holdout;

    Rng rng(mix_seed(cfg.seed, 0x73636F72));
    SurrogateScorer scorer(SurrogateScorerConfig{}, rng);
    NamedTensors params;
    scorer.collect(params);
    AdamState opt;
    opt.cfg.lr = cfg.lr;
    opt.cfg.beta1 = 0.9f;
    opt.init(params);

    // additive pixel-noise augmentation keeps the classifier's confidence
    // tied to class evidence rather than pixel-exact stroke placement
    Rng aug_rng(mix_seed(cfg.seed, 0x617567));
    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto batches = make_batches(train_n, cfg.batch_size, cfg.seed, epoch);
        for (const auto& idx : batches) {
            Tensor images = gather_images(dataset, idx);
            int64_t px = images.numel() / images.dim(0);
            for (int64_t i = 0; i < images.dim(0); ++i) {
                float amp = aug_rng.uniform(0.0f, 0.3f);
                float* dst = images.data().data() + i * px;
                for (int64_t p = 0; p < px; ++p)
                    dst[p] = std::clamp(dst[p] + aug_rng.uniform(-amp, amp), -1.0f, 1.0f);
            }
            std::vector<int> labels = gather_labels(dataset, idx);
            for (auto& [name, p] : params) {
                (void)name;
                p.zero_grad();
            }
            Tensor loss = softmax_cross_entropy(scorer.logits(images), labels);
            loss.backward();
            adam_step(params, opt);
        }
    }

    // held-out accuracy
    int64_t correct = 0;
    {
        NoGradGuard ng;
        const int64_t chunk = 256;
        for (int64_t lo = train_n; lo < n; lo += chunk) {
            int64_t hi = std::min(n, lo + chunk);
            std::vector<int64_t> idx;
            for (int64_t i = lo; i < hi; ++i) idx.push_back(i);
            Tensor logits = scorer.logits(gather_images(dataset, idx));
            for (int64_t r = 0; r < hi - lo; ++r) {
                const float* row = logits.data().data() + r * scorer.cfg.classes;
                int64_t best = 0;
                for (int64_t c = 1; c < scorer.cfg.classes; ++c)
                    if (row[c] > row[best]) best = c;
                if (best == dataset.labels[static_cast<size_t>(lo + r)]) ++correct;
            }
        }
    }
    float accuracy = static_cast<float>(correct) / static_cast<float>(holdout);
    if (accuracy < cfg.accuracy_floor)
        throw TrainingFloorError(accuracy, "scorer accuracy " + std::to_string(accuracy) +
                                               " below floor " +
                                               std::to_string(cfg.accuracy_floor));
    return {std::move(scorer), accuracy};
}

Checkpoint scorer_to_checkpoint(SurrogateScorer& scorer, uint64_t seed) {
    Checkpoint ckpt;
    ckpt.arch = "scorer";
    scorer.collect(ckpt.tensors);
    ckpt.counters.emplace_back("conv1_filters", static_cast<uint64_t>(scorer.cfg.conv1_filters));
    ckpt.counters.emplace_back("conv2_filters", static_cast<uint64_t>(scorer.cfg.conv2_filters));
    ckpt.counters.emplace_back("hidden", static_cast<uint64_t>(scorer.cfg.hidden));
    ckpt.counters.emplace_back("classes", static_cast<uint64_t>(scorer.cfg.classes));
    ckpt.counters.emplace_back("rng.seed", seed);
    ckpt.counters.emplace_back("rng.step", 0);
    return ckpt;
}

SurrogateScorer scorer_from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.arch != "scorer")
        throw CheckpointError(CheckpointError::Kind::bad_layout,
                              "expected a scorer checkpoint, found '" + ckpt.arch + "'");
    SurrogateScorerConfig cfg;
    cfg.conv1_filters = static_cast<int64_t>(ckpt.counter("conv1_filters"));
    cfg.conv2_filters = static_cast<int64_t>(ckpt.counter("conv2_filters"));
    cfg.hidden = static_cast<int64_t>(ckpt.counter("hidden"));
    cfg.classes = static_cast<int64_t>(ckpt.counter("classes"));
    Rng rng(0);
    SurrogateScorer scorer(cfg, rng);
    NamedTensors params;
    scorer.collect(params);
    if (params.size() != ckpt.tensors.size())
        throw CheckpointError(CheckpointError::Kind::bad_layout,
                              "scorer checkpoint tensor count mismatch");
    for (auto& [name, dst] : params) {
        bool found = false;
        for (const auto& [ck_name, src] : ckpt.tensors) {
            if (ck_name != name) continue;
            if (src.shape() != dst.shape())
                throw CheckpointError(CheckpointError::Kind::size_mismatch,
                                      "scorer tensor " + name + " shape mismatch");
            dst.data() = src.data();
            found = true;
            break;
        }
        if (!found)
            throw CheckpointError(CheckpointError::Kind::bad_layout,
                                  "scorer checkpoint missing tensor " + name);
    }
    return scorer;
}

Tensor scorer_probabilities_batched(const SurrogateScorer& scorer, const Tensor& images) {
    NoGradGuard ng;
    int64_t n = images.dim(0), k = scorer.cfg.classes;
    int64_t px = images.numel() / n;
    std::vector<float> probs(static_cast<size_t>(n * k));
    const int64_t chunk = 256;
    for (int64_t lo = 0; lo < n; lo += chunk) {
        int64_t hi = std::min(n, lo + chunk);
        std::vector<float> part(static_cast<size_t>((hi - lo) * px));
        std::copy(images.data().begin() + lo * px, images.data().begin() + hi * px, part.begin());
        Tensor batch = Tensor::from_data({hi - lo, 1, images.dim(2), images.dim(3)},
                                         std::move(part));
        Tensor p = scorer.probabilities(batch);
        std::copy(p.data().begin(), p.data().end(), probs.begin() + lo * k);
    }
    return Tensor::from_data({n, k}, std::move(probs));
}

ScoreReport score_samples(GanModel& model, const SurrogateScorer& scorer, int64_t n, int splits,
                          uint64_t seed, const Dataset* capsule_source) {
    if (n < 1) throw UsageError("score_samples: n must be >= 1");
    if (model.generator_needs_digitcaps() && !capsule_source)
        throw UsageError("capsgan2 scoring requires a reference dataset for the capsule feed");
    NoGradGuard ng;
    Rng rng(mix_seed(seed, 0x7363726E));
    int64_t k = scorer.cfg.classes;
    std::vector<float> probs(static_cast<size_t>(n * k));
    const int64_t chunk = 100;
    for (int64_t lo = 0; lo < n; lo += chunk) {
        int64_t count = std::min(chunk, n - lo);
        Tensor z = Tensor::randn({count, model.latent_dim()}, rng, 1.0f);
        Tensor feed;
        if (model.generator_needs_digitcaps()) {
            std::vector<int64_t> idx(static_cast<size_t>(count));
            for (auto& i : idx) i = rng.uniform_int(capsule_source->count());
            Tensor ref = gather_images(*capsule_source, idx);
            DiscriminatorOutput out = model.discriminate(ref, false, nullptr);
            feed = mask_by_norm(out.digitcaps).detach();
        }
        Tensor images = model.generate(z, feed, false);
        Tensor p = scorer.probabilities(images);
        std::copy(p.data().begin(), p.data().end(), probs.begin() + lo * k);
    }
    return inception_score(Tensor::from_data({n, k}, std::move(probs)), splits);
}

}  // namespace capsgan
