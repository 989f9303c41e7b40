#include "capsgan/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace capsgan {

Tensor d_loss(const Tensor& scores_real, const Tensor& scores_fake) {
    Tensor real_term = mean(log_clamped(scores_real));
    Tensor fake_term = mean(log_clamped(one_minus(scores_fake)));
    return neg(add(real_term, fake_term));
}

Tensor g_loss(const Tensor& scores_fake, GLossVariant variant) {
    if (variant == GLossVariant::non_saturating) return neg(mean(log_clamped(scores_fake)));
    return mean(log_clamped(one_minus(scores_fake)));
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

void AdamState::init(const NamedTensors& params) {
    t = 0;
    m.clear();
    v.clear();
    for (const auto& [name, p] : params) {
        (void)name;
        m.emplace_back(p.data().size(), 0.0f);
        v.emplace_back(p.data().size(), 0.0f);
    }
}

void adam_step(NamedTensors& params, AdamState& state) {
    if (state.m.size() != params.size())
        throw UsageError("adam_step: state not initialized for this parameter list");
    state.t += 1;
    double bc1 = 1.0 - std::pow(static_cast<double>(state.cfg.beta1), static_cast<double>(state.t));
    double bc2 = 1.0 - std::pow(static_cast<double>(state.cfg.beta2), static_cast<double>(state.t));
    float b1 = state.cfg.beta1, b2 = state.cfg.beta2;
    float inv_bc1 = static_cast<float>(1.0 / bc1), inv_bc2 = static_cast<float>(1.0 / bc2);
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = params[pi].second;
        auto& m = state.m[pi];
        auto& v = state.v[pi];
        auto& data = p.data();
        const bool has_grad = p.has_grad();
        for (size_t i = 0; i < data.size(); ++i) {
            float g = has_grad ? p.grad()[i] : 0.0f;
            if (!std::isfinite(g))
                throw NumericalError("adam_step: non-finite gradient in " + params[pi].first);
            m[i] = b1 * m[i] + (1.0f - b1) * g;
            v[i] = b2 * v[i] + (1.0f - b2) * g * g;
            float mhat = m[i] * inv_bc1;
            float vhat = v[i] * inv_bc2;
            data[i] -= state.cfg.lr * mhat / (std::sqrt(vhat) + state.cfg.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

namespace {

void zero_all(NamedTensors& params) {
    for (auto& [name, p] : params) {
        (void)name;
        p.zero_grad();
    }
}

}  // namespace

Trainer::Trainer(const TrainConfig& cfg)
    : cfg_(cfg),
      model_(GanModel::build(cfg.arch, cfg.routing_iters, cfg.seed)),
      rng_(mix_seed(cfg.seed, 0x747261696E)) {
    AdamConfig ac;
    ac.lr = cfg.lr;
    opt_d_.cfg = ac;
    opt_g_.cfg = ac;
    auto dp = model_.d_params();
    auto gp = model_.g_params();
    opt_d_.init(dp);
    opt_g_.init(gp);
}

Tensor Trainer::sample_latent(int64_t n) {
    return Tensor::randn({n, model_.latent_dim()}, rng_, 1.0f);
}

// Masked class-capsule vectors feeding the capsgan2 generator, detached so
// no gradient reaches the discriminator through them.
Tensor Trainer::capsule_feed(const Tensor& real_batch, const Tensor& fake_batch) {
    NoGradGuard ng;
    const Tensor& source =
        cfg_.digitcaps_from_generated && fake_batch.defined() ? fake_batch : real_batch;
    last_feed_source_ = (cfg_.digitcaps_from_generated && fake_batch.defined())
                            ? DigitcapsSource::generated_images
                            : DigitcapsSource::real_images;
    DiscriminatorOutput out = model_.discriminate(source, false, nullptr);
    return mask_by_norm(out.digitcaps).detach();
}

GanBatchLosses Trainer::train_step(const Tensor& real_batch) {
    try {
        return run_step(real_batch);
    } catch (const NumericalError& e) {
        throw NumericalError(std::string(e.what()) + " (aborting at step " +
                             std::to_string(step_ + 1) + ")");
    }
}

GanBatchLosses Trainer::run_step(const Tensor& real_batch) {
    int64_t n = real_batch.dim(0);
    GanBatchLosses losses;

    // discriminator step: generator frozen (fakes built without a graph)
    Tensor fake_images;
    {
        auto dp = model_.d_params();
        zero_all(dp);
        Tensor z = sample_latent(n);
        DiscriminatorOutput real_out = model_.discriminate(real_batch, true, &rng_);
        {
            NoGradGuard ng;
            Tensor feed;
            if (model_.generator_needs_digitcaps()) {
                feed = mask_by_norm(real_out.digitcaps).detach();
                last_feed_source_ = DigitcapsSource::real_images;
            }
            fake_images = model_.generate(z, feed, true);
        }
        DiscriminatorOutput fake_out = model_.discriminate(fake_images, true, &rng_);
        Tensor loss = d_loss(real_out.score, fake_out.score);
        loss.backward();
        adam_step(dp, opt_d_);
        losses.d_loss = loss.item();
        losses.d_real_mean = mean(real_out.score).item();
        losses.d_fake_mean = mean(fake_out.score).item();
    }

    // generator step: discriminator frozen
    {
        model_.set_d_requires_grad(false);
        auto gp = model_.g_params();
        zero_all(gp);
        Tensor z = sample_latent(n);
        Tensor feed;
        if (model_.generator_needs_digitcaps()) feed = capsule_feed(real_batch, fake_images);
        Tensor fakes = model_.generate(z, feed, true);
        DiscriminatorOutput out = model_.discriminate(fakes, true, &rng_);
        Tensor loss = g_loss(out.score, cfg_.g_variant);
        loss.backward();
        adam_step(gp, opt_g_);
        model_.set_d_requires_grad(true);
        losses.g_loss = loss.item();
    }

    step_ += 1;
    if (!std::isfinite(losses.d_loss) || !std::isfinite(losses.g_loss))
        throw NumericalError("non-finite loss at step " + std::to_string(step_));
    return losses;
}

Checkpoint Trainer::to_checkpoint() const {
    return model_to_checkpoint(const_cast<GanModel&>(model_), &opt_d_, &opt_g_, cfg_.seed,
                               static_cast<uint64_t>(step_));
}

TrainSummary Trainer::train(const Dataset& dataset) {
    namespace fs = std::filesystem;
    if (dataset.count() < 1) throw UsageError("train: dataset is empty");
    const bool writing = !cfg_.out_dir.empty();
    std::ofstream metrics;
    TrainSummary summary;
    if (writing) {
        fs::create_directories(cfg_.out_dir);
        summary.metrics_csv = (fs::path(cfg_.out_dir) / "metrics.csv").string();
        metrics.open(summary.metrics_csv);
        if (!metrics)
            throw DataFormatError(DataFormatError::Kind::io,
                                  "cannot write " + summary.metrics_csv);
        metrics << "step,epoch,d_loss,g_loss,d_real_mean,d_fake_mean,time_ms\n";
    }

    // fixed latents (and capsule-feed images, when used) for progress grids
    Rng grid_rng(mix_seed(cfg_.seed, 0x67726964));
    const int64_t grid_n = 64;
    Tensor grid_z = Tensor::randn({grid_n, model_.latent_dim()}, grid_rng, 1.0f);
    std::vector<int64_t> grid_idx(static_cast<size_t>(grid_n));
    for (int64_t i = 0; i < grid_n; ++i) grid_idx[static_cast<size_t>(i)] = i % dataset.count();
    Tensor grid_images = gather_images(dataset, grid_idx);

    auto emit_grid = [&](const std::string& name) {
        if (!writing) return;
        NoGradGuard ng;
        Tensor feed;
        if (model_.generator_needs_digitcaps()) {
            DiscriminatorOutput out = model_.discriminate(grid_images, false, nullptr);
            feed = mask_by_norm(out.digitcaps).detach();
        }
        Tensor samples = model_.generate(grid_z, feed, false);
        write_image_grid(samples, 8, 8, (fs::path(cfg_.out_dir) / name).string());
    };
    auto save_ckpt = [&](const std::string& name) {
        if (!writing) return std::string();
        std::string path = (fs::path(cfg_.out_dir) / name).string();
        save_checkpoint(to_checkpoint(), path);
        return path;
    };

    for (int64_t epoch = 0; epoch < cfg_.epochs; ++epoch) {
        auto batches = make_batches(dataset.count(), cfg_.batch_size, cfg_.seed, epoch);
        for (const auto& batch_idx : batches) {
            Tensor batch = gather_images(dataset, batch_idx);
            auto t0 = std::chrono::steady_clock::now();
            GanBatchLosses losses = train_step(batch);
            auto t1 = std::chrono::steady_clock::now();
            auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(t1 - t0).count();
            summary.last = losses;
            summary.steps = step_;
            if (writing && cfg_.log_interval > 0 && step_ % cfg_.log_interval == 0) {
                char row[256];
                std::snprintf(row, sizeof(row), "%lld,%lld,%.7g,%.7g,%.7g,%.7g,%lld\n",
                              static_cast<long long>(step_), static_cast<long long>(epoch),
                              static_cast<double>(losses.d_loss),
                              static_cast<double>(losses.g_loss),
                              static_cast<double>(losses.d_real_mean),
                              static_cast<double>(losses.d_fake_mean),
                              static_cast<long long>(ms));
                metrics << row;
                metrics.flush();
            }
            if (writing && cfg_.sample_interval > 0 && step_ % cfg_.sample_interval == 0)
                emit_grid("samples-" + std::to_string(step_) + ".pgm");
            if (writing && cfg_.checkpoint_interval > 0 && step_ % cfg_.checkpoint_interval == 0)
                save_ckpt("ckpt-" + std::to_string(step_));
        }
    }
    emit_grid("samples-final.pgm");
    summary.final_checkpoint = save_ckpt("ckpt-final");
    return summary;
}

// ---------------------------------------------------------------------------
// Checkpoint glue
// ---------------------------------------------------------------------------

namespace {

void append_opt_tensors(const std::string& prefix, const NamedTensors& params,
                        const AdamState& opt, NamedTensors& out) {
    for (size_t i = 0; i < params.size(); ++i) {
        const Shape& shape = params[i].second.shape();
        out.emplace_back("adam." + prefix + ".m." + params[i].first,
                         Tensor::from_data(shape, opt.m[i]));
        out.emplace_back("adam." + prefix + ".v." + params[i].first,
                         Tensor::from_data(shape, opt.v[i]));
    }
}

}  // namespace

Checkpoint model_to_checkpoint(GanModel& model, const AdamState* opt_d, const AdamState* opt_g,
                               uint64_t seed, uint64_t step) {
    Checkpoint ckpt;
    ckpt.arch = arch_name(model.arch);
    auto dp = model.d_params();
    auto gp = model.g_params();
    auto bufs = model.buffers();
    for (auto& kv : dp) ckpt.tensors.push_back(kv);
    for (auto& kv : gp) ckpt.tensors.push_back(kv);
    for (auto& kv : bufs) ckpt.tensors.push_back(kv);
    if (opt_d) append_opt_tensors("d", dp, *opt_d, ckpt.opt_tensors);
    if (opt_g) append_opt_tensors("g", gp, *opt_g, ckpt.opt_tensors);
    ckpt.counters.emplace_back("adam.d.t", opt_d ? static_cast<uint64_t>(opt_d->t) : 0);
    ckpt.counters.emplace_back("adam.g.t", opt_g ? static_cast<uint64_t>(opt_g->t) : 0);
    ckpt.counters.emplace_back("routing_iters", static_cast<uint64_t>(model.routing_iters));
    ckpt.counters.emplace_back("rng.seed", seed);
    ckpt.counters.emplace_back("rng.step", step);
    return ckpt;
}

GanModel model_from_checkpoint(const Checkpoint& ckpt) {
    Arch arch;
    try {
        arch = arch_from_name(ckpt.arch);
    } catch (const UsageError&) {
        throw CheckpointError(CheckpointError::Kind::bad_layout,
                              "checkpoint holds unknown architecture '" + ckpt.arch + "'");
    }
    int routing_iters = static_cast<int>(ckpt.counter("routing_iters"));
    GanModel model = GanModel::build(arch, routing_iters, ckpt.counter("rng.seed"));

    NamedTensors expected;
    for (auto& kv : model.d_params()) expected.push_back(kv);
    for (auto& kv : model.g_params()) expected.push_back(kv);
    for (auto& kv : model.buffers()) expected.push_back(kv);
    if (expected.size() != ckpt.tensors.size())
        throw CheckpointError(CheckpointError::Kind::bad_layout,
                              "checkpoint tensor count " + std::to_string(ckpt.tensors.size()) +
                                  " != model tensor count " + std::to_string(expected.size()));
    for (auto& [name, dst] : expected) {
        bool found = false;
        for (const auto& [ck_name, src] : ckpt.tensors) {
            if (ck_name != name) continue;
            if (src.shape() != dst.shape())
                throw CheckpointError(CheckpointError::Kind::size_mismatch,
                                      "checkpoint tensor " + name + " has shape " +
                                          shape_str(src.shape()) + ", expected " +
                                          shape_str(dst.shape()));
            dst.data() = src.data();
            found = true;
            break;
        }
        if (!found)
            throw CheckpointError(CheckpointError::Kind::bad_layout,
                                  "checkpoint missing tensor " + name);
    }
    return model;
}

}  // namespace capsgan
