#pragma once

#include <memory>
#include <string>

#include "capsgan/capsule.hpp"
#include "capsgan/ops.hpp"

namespace capsgan {

// Layer output shapes per batch element, recorded by forward passes on
// request for conformance checks.
using ShapeTrace = std::vector<std::pair<std::string, Shape>>;

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

struct Conv2dLayer {
    Tensor w, b;
    int stride = 1, pad = 0;
    bool has_bias = true;

    Conv2dLayer() = default;
    Conv2dLayer(int64_t in_ch, int64_t out_ch, int64_t kernel, int stride, int pad, bool bias,
                Rng& rng, float init_std = 0.02f);
    Tensor forward(const Tensor& x) const;
    void collect(const std::string& prefix, NamedTensors& params);
};

struct ConvTranspose2dLayer {
    Tensor w, b;  // w [in_ch, out_ch, k, k]
    int stride = 1, pad = 0;
    bool has_bias = true;

    ConvTranspose2dLayer() = default;
    ConvTranspose2dLayer(int64_t in_ch, int64_t out_ch, int64_t kernel, int stride, int pad,
                         bool bias, Rng& rng, float init_std = 0.02f);
    Tensor forward(const Tensor& x) const;
    void collect(const std::string& prefix, NamedTensors& params);
};

struct DenseLayer {
    Tensor w, b;

    DenseLayer() = default;
    DenseLayer(int64_t in, int64_t out, Rng& rng, float init_std = 0.02f);
    Tensor forward(const Tensor& x) const;
    void collect(const std::string& prefix, NamedTensors& params);
};

struct BatchNormLayer {
    Tensor gamma, beta;              // trainable
    Tensor running_mean, running_var;  // buffers, updated by train-mode forwards
    float eps = 1e-5f, momentum = 0.9f;

    BatchNormLayer() = default;
    explicit BatchNormLayer(int64_t channels);
    Tensor forward(const Tensor& x, bool train);
    void collect(const std::string& prefix, NamedTensors& params, NamedTensors& buffers);
};

// ---------------------------------------------------------------------------
// Architectures. All builders target 28x28 single-channel images; widths are
// configurable so tests can run reduced instances.
// ---------------------------------------------------------------------------

struct DiscriminatorOutput {
    Tensor score;      // [B,1] in (0,1)
    Tensor digitcaps;  // [B,J,D]; undefined for the plain conv discriminator
    bool has_digitcaps() const { return digitcaps.defined(); }
};

struct CapsDiscriminatorConfig {
    int64_t image_channels = 1;
    int64_t conv1_filters = 256;
    int conv1_kernel = 9, conv1_stride = 1, conv1_pad = 0;
    int64_t primary_filters = 256;
    int primary_kernel = 9, primary_stride = 2, primary_pad = 0;
    int64_t capsule_dim = 8;
    int64_t class_caps = 10;
    int64_t class_dim = 16;
};

class CapsDiscriminator {
public:
    CapsDiscriminatorConfig cfg;
    Conv2dLayer conv1, primary_conv;
    Tensor routing_w;  // [primary_count, class_caps, capsule_dim, class_dim]
    DenseLayer head;
    int64_t primary_count = 0;

    CapsDiscriminator(const CapsDiscriminatorConfig& cfg, Rng& rng);
    DiscriminatorOutput forward(const Tensor& image, int routing_iters,
                                ShapeTrace* trace = nullptr) const;
    void collect(const std::string& prefix, NamedTensors& params, NamedTensors& buffers);
};

struct DcganDiscriminatorConfig {
    int64_t image_channels = 1;
    int64_t base_filters = 32;  // blocks use base, 2x, 4x, 8x
    float dropout_rate = 0.3f;
};

class DcganDiscriminator {
public:
    DcganDiscriminatorConfig cfg;
    Conv2dLayer conv1, conv2, conv3, conv4;
    BatchNormLayer bn2, bn3, bn4;
    DenseLayer head;

    DcganDiscriminator(const DcganDiscriminatorConfig& cfg, Rng& rng);
    // rng drives dropout and is only consumed in train mode
    DiscriminatorOutput forward(const Tensor& image, bool train, Rng* rng,
                                ShapeTrace* trace = nullptr);
    void collect(const std::string& prefix, NamedTensors& params, NamedTensors& buffers);
};

struct DcganGeneratorConfig {
    int64_t latent_dim = 100;
    int64_t base_channels = 128;  // dense -> base*7*7; deconvs base->base->base/2; conv -> 1
};

class DcganGenerator {
public:
    DcganGeneratorConfig cfg;
    DenseLayer fc;
    ConvTranspose2dLayer up1, up2;
    BatchNormLayer bn1, bn2;
    Conv2dLayer to_image;

    DcganGenerator() = default;
    DcganGenerator(const DcganGeneratorConfig& cfg, Rng& rng);
    Tensor forward(const Tensor& z, bool train, ShapeTrace* trace = nullptr);
    void collect(const std::string& prefix, NamedTensors& params, NamedTensors& buffers);
};

// Generator fed by a masked class-capsule vector: the capsule vector and the
// latent sample are combined by outer product, batch-normed, collapsed back
// to a latent-length vector by a learned per-capsule weight, then passed
// through the standard deconvolution tail.
struct Caps2GeneratorConfig {
    int64_t latent_dim = 100;
    int64_t caps_dim = 16;  // length of the masked capsule vector
    int64_t base_channels = 128;
};

class Caps2Generator {
public:
    Caps2GeneratorConfig cfg;
    BatchNormLayer bn_mix;  // over the caps_dim axis of [B, caps_dim, latent]
    Tensor mix_weight;      // [caps_dim]
    BatchNormLayer bn_vec;  // over the latent axis of [B, latent]
    DcganGenerator tail;

    Caps2Generator(const Caps2GeneratorConfig& cfg, Rng& rng);
    Tensor forward(const Tensor& caps_vec, const Tensor& z, bool train,
                   ShapeTrace* trace = nullptr);
    void collect(const std::string& prefix, NamedTensors& params, NamedTensors& buffers);
};

// Generator running capsule routing in the generative direction: the latent
// vector is read as in_caps capsules, expanded by routing to enough capsules
// to fill a [C,6,6] feature map, then upsampled by deconvolutions.
struct Caps3GeneratorConfig {
    int64_t in_caps = 16, in_dim = 8;  // latent length = in_caps * in_dim
    int64_t gen_caps_dim = 8;
    int64_t feature_channels = 256;  // divisible by 4; out_caps = C*36/gen_caps_dim
    int64_t latent_dim() const { return in_caps * in_dim; }
};

class Caps3Generator {
public:
    Caps3GeneratorConfig cfg;
    Tensor routing_w;  // [in_caps, out_caps, in_dim, gen_caps_dim]
    ConvTranspose2dLayer up1, up2, up3, up4;
    BatchNormLayer bn1, bn2, bn3;
    int64_t out_caps = 0;

    Caps3Generator(const Caps3GeneratorConfig& cfg, Rng& rng);
    Tensor forward(const Tensor& z, int routing_iters, bool train, ShapeTrace* trace = nullptr);
    void collect(const std::string& prefix, NamedTensors& params, NamedTensors& buffers);
};

// ---------------------------------------------------------------------------
// Model container
// ---------------------------------------------------------------------------

enum class Arch { dcgan, capsgan1, capsgan2, capsgan3 };

std::string arch_name(Arch arch);
Arch arch_from_name(const std::string& name);  // throws UsageError

struct GanModel {
    Arch arch = Arch::dcgan;
    int routing_iters = 3;
    std::unique_ptr<CapsDiscriminator> caps_d;
    std::unique_ptr<DcganDiscriminator> conv_d;
    std::unique_ptr<DcganGenerator> gen_dcgan;
    std::unique_ptr<Caps2Generator> gen_caps2;
    std::unique_ptr<Caps3Generator> gen_caps3;

    // Paper-width 28x28 build; other image sizes are not parameterized.
    static GanModel build(Arch arch, int routing_iters, uint64_t seed);

    int64_t latent_dim() const;
    bool generator_needs_digitcaps() const { return arch == Arch::capsgan2; }

    DiscriminatorOutput discriminate(const Tensor& images, bool train, Rng* rng,
                                     ShapeTrace* trace = nullptr);
    // caps_vec must be defined iff the architecture is capsgan2
    Tensor generate(const Tensor& z, const Tensor& caps_vec, bool train,
                    ShapeTrace* trace = nullptr);

    NamedTensors d_params();
    NamedTensors g_params();
    NamedTensors buffers();
    void set_d_requires_grad(bool v);
};

}  // namespace capsgan
