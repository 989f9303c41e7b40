#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "capsgan/datagen.hpp"
#include "capsgan/metrics.hpp"
#include "capsgan/training.hpp"

namespace {

using namespace capsgan;

// exit codes: 0 ok, 2 argument error, 3 data-format error, 4 checkpoint
// error, 5 numerical failure, 6 scorer accuracy floor unmet

struct TrainArgs {
    std::string arch, data, labels, out_dir, g_loss = "non_saturating";
    int64_t epochs = 1, batch = 64;
    uint64_t seed = 42;
    double lr = 2e-4;
    int routing_iters = 3;
    int64_t latent = 0;  // 0: architecture default
    int64_t log_interval = 1, ckpt_interval = 0, sample_interval = 0;
    bool digitcaps_from_generated = false;
};

struct GenerateArgs {
    std::string ckpt, out, data, grid = "8x8";
    int64_t n = 64;
    uint64_t seed = 42;
};

struct ScoreArgs {
    std::string ckpt, images, scorer, data;
    int64_t n = 1000;
    int splits = 10;
    uint64_t seed = 42;
};

struct TrainScorerArgs {
    std::string data, labels, out;
    uint64_t seed = 42;
    int64_t epochs = 4, batch = 64, holdout = 0;
    double lr = 1e-3, floor = 0.97;
};

int64_t expected_latent(Arch arch) { return arch == Arch::capsgan3 ? 128 : 100; }

int run_train(const TrainArgs& a) {
    TrainConfig cfg;
    cfg.arch = arch_from_name(a.arch);
    if (a.latent != 0 && a.latent != expected_latent(cfg.arch))
        throw UsageError("--latent " + std::to_string(a.latent) + " invalid: " + a.arch +
                         " uses a fixed latent length of " +
                         std::to_string(expected_latent(cfg.arch)));
    if (a.epochs < 1 || a.batch < 1) throw UsageError("--epochs and --batch must be positive");
    if (a.lr <= 0.0) throw UsageError("--lr must be positive");
    if (a.routing_iters < 1) throw UsageError("--routing-iters must be >= 1");
    if (a.log_interval < 1) throw UsageError("--log-interval must be positive");
    if (a.ckpt_interval < 0 || a.sample_interval < 0)
        throw UsageError("intervals must be >= 0 (0 disables periodic output)");
    cfg.epochs = a.epochs;
    cfg.batch_size = a.batch;
    cfg.seed = a.seed;
    cfg.lr = static_cast<float>(a.lr);
    cfg.routing_iters = a.routing_iters;
    cfg.out_dir = a.out_dir;
    cfg.log_interval = a.log_interval;
    cfg.checkpoint_interval = a.ckpt_interval;
    cfg.sample_interval = a.sample_interval;
    cfg.digitcaps_from_generated = a.digitcaps_from_generated;
    if (a.g_loss == "non_saturating")
        cfg.g_variant = GLossVariant::non_saturating;
    else if (a.g_loss == "minimax")
        cfg.g_variant = GLossVariant::minimax;
    else
        throw UsageError("--g-loss must be non_saturating or minimax");

    std::printf(
        "config arch=%s data=%s labels=%s epochs=%lld batch=%lld seed=%llu lr=%g "
        "routing-iters=%d g-loss=%s latent=%lld out=%s log-interval=%lld ckpt-interval=%lld "
        "sample-interval=%lld digitcaps-from-generated=%d\n",
        a.arch.c_str(), a.data.c_str(), a.labels.empty() ? "-" : a.labels.c_str(),
        static_cast<long long>(cfg.epochs), static_cast<long long>(cfg.batch_size),
        static_cast<unsigned long long>(cfg.seed), cfg.lr, cfg.routing_iters, a.g_loss.c_str(),
        static_cast<long long>(expected_latent(cfg.arch)), cfg.out_dir.c_str(),
        static_cast<long long>(cfg.log_interval), static_cast<long long>(cfg.checkpoint_interval),
        static_cast<long long>(cfg.sample_interval), cfg.digitcaps_from_generated ? 1 : 0);
    std::fflush(stdout);

    Dataset ds = load_idx(a.data, a.labels);
    Trainer trainer(cfg);
    TrainSummary summary = trainer.train(ds);
    std::printf("trained %lld steps; final d_loss=%.5f g_loss=%.5f; checkpoint %s\n",
                static_cast<long long>(summary.steps), static_cast<double>(summary.last.d_loss),
                static_cast<double>(summary.last.g_loss), summary.final_checkpoint.c_str());
    return 0;
}

int run_generate(const GenerateArgs& a) {
    int rows = 0, cols = 0;
    if (std::sscanf(a.grid.c_str(), "%dx%d", &rows, &cols) != 2 || rows < 1 || cols < 1)
        throw UsageError("--grid must look like 8x8");
    if (a.n < 1 || a.n > static_cast<int64_t>(rows) * cols)
        throw UsageError("--n must fit the grid");
    GanModel model = model_from_checkpoint(load_checkpoint(a.ckpt));
    Dataset ref;
    if (model.generator_needs_digitcaps()) {
        if (a.data.empty())
            throw UsageError(
                "capsgan2 requires --data: its generator is fed masked DigitCaps vectors "
                "computed from real images");
        ref = load_idx(a.data);
    }
    NoGradGuard ng;
    Rng rng(mix_seed(a.seed, 0x67656E));
    Tensor z = Tensor::randn({a.n, model.latent_dim()}, rng, 1.0f);
    Tensor feed;
    if (model.generator_needs_digitcaps()) {
        std::vector<int64_t> idx(static_cast<size_t>(a.n));
        for (auto& i : idx) i = rng.uniform_int(ref.count());
        DiscriminatorOutput out = model.discriminate(gather_images(ref, idx), false, nullptr);
        feed = mask_by_norm(out.digitcaps).detach();
    }
    Tensor samples = model.generate(z, feed, false);
    write_image_grid(samples, rows, cols, a.out);
    std::printf("wrote %lld samples to %s\n", static_cast<long long>(a.n), a.out.c_str());
    return 0;
}

int run_score(const ScoreArgs& a) {
    if (a.scorer.empty()) throw UsageError("--scorer is required");
    if (a.ckpt.empty() == a.images.empty())
        throw UsageError("pass exactly one of --ckpt (score a generator) or --images");
    SurrogateScorer scorer = scorer_from_checkpoint(load_checkpoint(a.scorer));
    ScoreReport report;
    if (!a.images.empty()) {
        Dataset ds = load_idx(a.images);
        Tensor probs = scorer_probabilities_batched(scorer, ds.images);
        report = inception_score(probs, a.splits);
    } else {
        GanModel model = model_from_checkpoint(load_checkpoint(a.ckpt));
        Dataset ref;
        const Dataset* ref_ptr = nullptr;
        if (model.generator_needs_digitcaps()) {
            if (a.data.empty())
                throw UsageError(
                    "capsgan2 requires --data: scoring generates images from masked DigitCaps "
                    "vectors of real images");
            ref = load_idx(a.data);
            ref_ptr = &ref;
        }
        report = score_samples(model, scorer, a.n, a.splits, a.seed, ref_ptr);
    }
    write_score_csv(report, std::cout);
    return 0;
}

int run_train_scorer(const TrainScorerArgs& a) {
    Dataset ds = load_idx(a.data, a.labels);
    ScorerTrainConfig cfg;
    cfg.epochs = a.epochs;
    cfg.batch_size = a.batch;
    cfg.lr = static_cast<float>(a.lr);
    cfg.seed = a.seed;
    cfg.accuracy_floor = static_cast<float>(a.floor);
    cfg.holdout = a.holdout;
    ScorerTrainResult result = train_surrogate_scorer(ds, cfg);
    save_checkpoint(scorer_to_checkpoint(result.scorer, a.seed), a.out);
    std::printf("held-out accuracy %.4f (floor %.4f); scorer saved to %s\n",
                static_cast<double>(result.accuracy), a.floor, a.out.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"capsule-routing GAN toolkit: train, sample and score 28x28 generators"};
    app.require_subcommand(1);

    TrainArgs train_args;
    auto* train = app.add_subcommand("train", "train a GAN on an IDX dataset");
    train->add_option("--arch", train_args.arch, "architecture: dcgan|capsgan1|capsgan2|capsgan3")
        ->required();
    train->add_option("--data", train_args.data, "IDX image file")->required();
    train->add_option("--labels", train_args.labels, "IDX label file (optional)");
    train->add_option("--epochs", train_args.epochs, "training epochs")->required();
    train->add_option("--batch", train_args.batch, "batch size")->capture_default_str();
    train->add_option("--seed", train_args.seed, "rng seed")->capture_default_str();
    train->add_option("--lr", train_args.lr, "Adam learning rate")->capture_default_str();
    train->add_option("--out", train_args.out_dir, "output directory")->required();
    train->add_option("--routing-iters", train_args.routing_iters, "dynamic routing iterations")
        ->capture_default_str();
    train->add_option("--g-loss", train_args.g_loss, "generator loss: non_saturating|minimax")
        ->capture_default_str();
    train->add_option("--latent", train_args.latent,
                      "latent length; must match the architecture (100, or 128 for capsgan3)")
        ->capture_default_str();
    train->add_option("--log-interval", train_args.log_interval, "steps between metric rows")
        ->capture_default_str();
    train->add_option("--ckpt-interval", train_args.ckpt_interval,
                      "steps between checkpoints (0: final only)")
        ->capture_default_str();
    train->add_option("--sample-interval", train_args.sample_interval,
                      "steps between sample grids (0: final only)")
        ->capture_default_str();
    train->add_flag("--digitcaps-from-generated", train_args.digitcaps_from_generated,
                    "experimental: feed the generator DigitCaps of generated images");

    GenerateArgs gen_args;
    auto* gen = app.add_subcommand("generate", "sample a grid of images from a checkpoint");
    gen->add_option("--ckpt", gen_args.ckpt, "model checkpoint")->required();
    gen->add_option("--n", gen_args.n, "sample count")->capture_default_str();
    gen->add_option("--grid", gen_args.grid, "grid layout RxC")->capture_default_str();
    gen->add_option("--out", gen_args.out, "output PGM path")->required();
    gen->add_option("--seed", gen_args.seed, "rng seed")->capture_default_str();
    gen->add_option("--data", gen_args.data, "IDX images for the capsgan2 DigitCaps feed");

    ScoreArgs score_args;
    auto* score = app.add_subcommand("score", "report scores for a generator or a dataset");
    score->add_option("--ckpt", score_args.ckpt, "generator checkpoint");
    score->add_option("--images", score_args.images, "score an IDX dataset directly");
    score->add_option("--scorer", score_args.scorer, "scorer checkpoint")->required();
    score->add_option("--n", score_args.n, "generated sample count")->capture_default_str();
    score->add_option("--splits", score_args.splits, "score splits")->capture_default_str();
    score->add_option("--seed", score_args.seed, "rng seed")->capture_default_str();
    score->add_option("--data", score_args.data, "IDX images for the capsgan2 DigitCaps feed");

    TrainScorerArgs ts_args;
    auto* ts = app.add_subcommand("train-scorer", "train the surrogate scoring classifier");
    ts->add_option("--data", ts_args.data, "IDX image file")->required();
    ts->add_option("--labels", ts_args.labels, "IDX label file")->required();
    ts->add_option("--out", ts_args.out, "output checkpoint path")->required();
    ts->add_option("--seed", ts_args.seed, "rng seed")->capture_default_str();
    ts->add_option("--epochs", ts_args.epochs, "training epochs")->capture_default_str();
    ts->add_option("--batch", ts_args.batch, "batch size")->capture_default_str();
    ts->add_option("--lr", ts_args.lr, "Adam learning rate")->capture_default_str();
    ts->add_option("--floor", ts_args.floor, "required held-out accuracy")->capture_default_str();
    ts->add_option("--holdout", ts_args.holdout, "held-out image count (0: one tenth)")
        ->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (app.got_subcommand(train)) return run_train(train_args);
        if (app.got_subcommand(gen)) return run_generate(gen_args);
        if (app.got_subcommand(score)) return run_score(score_args);
        if (app.got_subcommand(ts)) return run_train_scorer(ts_args);
    } catch (const UsageError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const ShapeError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const DataFormatError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const CheckpointError& e) {
        std::fprintf(stderr, "checkpoint error: %s\n", e.what());
        return 4;
    } catch (const NumericalError& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return 5;
    } catch (const TrainingFloorError& e) {
        std::fprintf(stderr, "scorer floor unmet: %s\n", e.what());
        return 6;
    }
    return 2;
}
