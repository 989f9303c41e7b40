#include "capsgan/networks.hpp"

namespace capsgan {

namespace {

int64_t conv_out(int64_t in, int kernel, int stride, int pad) {
    return (in + 2 * pad - kernel) / stride + 1;
}

void trace_shape(ShapeTrace* trace, const std::string& label, const Tensor& t) {
    if (!trace) return;
    // per-element shape: drop the batch axis
    Shape s(t.shape().begin() + 1, t.shape().end());
    trace->emplace_back(label, std::move(s));
}

}  // namespace

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

Conv2dLayer::Conv2dLayer(int64_t in_ch, int64_t out_ch, int64_t kernel, int stride_, int pad_,
                         bool bias, Rng& rng, float init_std)
    : stride(stride_), pad(pad_), has_bias(bias) {
    w = Tensor::randn({out_ch, in_ch, kernel, kernel}, rng, init_std, true);
    if (has_bias) b = Tensor::zeros({out_ch}, true);
}

Tensor Conv2dLayer::forward(const Tensor& x) const {
    Tensor y = conv2d(x, w, stride, pad);
    return has_bias ? bias_channel(y, b) : y;
}

void Conv2dLayer::collect(const std::string& prefix, NamedTensors& params) {
    params.emplace_back(prefix + ".w", w);
    if (has_bias) params.emplace_back(prefix + ".b", b);
}

ConvTranspose2dLayer::ConvTranspose2dLayer(int64_t in_ch, int64_t out_ch, int64_t kernel,
                                           int stride_, int pad_, bool bias, Rng& rng,
                                           float init_std)
    : stride(stride_), pad(pad_), has_bias(bias) {
    w = Tensor::randn({in_ch, out_ch, kernel, kernel}, rng, init_std, true);
    if (has_bias) b = Tensor::zeros({out_ch}, true);
}

Tensor ConvTranspose2dLayer::forward(const Tensor& x) const {
    Tensor y = conv_transpose2d(x, w, stride, pad);
    return has_bias ? bias_channel(y, b) : y;
}

void ConvTranspose2dLayer::collect(const std::string& prefix, NamedTensors& params) {
    params.emplace_back(prefix + ".w", w);
    if (has_bias) params.emplace_back(prefix + ".b", b);
}

DenseLayer::DenseLayer(int64_t in, int64_t out, Rng& rng, float init_std) {
    w = Tensor::randn({in, out}, rng, init_std, true);
    b = Tensor::zeros({out}, true);
}

Tensor DenseLayer::forward(const Tensor& x) const { return dense(x, w, b); }

void DenseLayer::collect(const std::string& prefix, NamedTensors& params) {
    params.emplace_back(prefix + ".w", w);
    params.emplace_back(prefix + ".b", b);
}

BatchNormLayer::BatchNormLayer(int64_t channels) {
    gamma = Tensor::full({channels}, 1.0f, true);
    beta = Tensor::zeros({channels}, true);
    running_mean = Tensor::zeros({channels});
    running_var = Tensor::full({channels}, 1.0f);
}

Tensor BatchNormLayer::forward(const Tensor& x, bool train) {
    return batch_norm(x, gamma, beta, running_mean, running_var, eps, momentum, train);
}

void BatchNormLayer::collect(const std::string& prefix, NamedTensors& params,
                             NamedTensors& buffers) {
    params.emplace_back(prefix + ".gamma", gamma);
    params.emplace_back(prefix + ".beta", beta);
    buffers.emplace_back(prefix + ".running_mean", running_mean);
    buffers.emplace_back(prefix + ".running_var", running_var);
}

// ---------------------------------------------------------------------------
// Capsule discriminator
// ---------------------------------------------------------------------------

CapsDiscriminator::CapsDiscriminator(const CapsDiscriminatorConfig& c, Rng& rng) : cfg(c) {
    if (cfg.primary_filters % cfg.capsule_dim != 0)
        throw ShapeError("caps discriminator: primary filters not divisible by capsule dim");
    conv1 = Conv2dLayer(cfg.image_channels, cfg.conv1_filters, cfg.conv1_kernel, cfg.conv1_stride,
                        cfg.conv1_pad, true, rng);
    primary_conv = Conv2dLayer(cfg.conv1_filters, cfg.primary_filters, cfg.primary_kernel,
                               cfg.primary_stride, cfg.primary_pad, true, rng);
    int64_t h1 = conv_out(28, cfg.conv1_kernel, cfg.conv1_stride, cfg.conv1_pad);
    int64_t h2 = conv_out(h1, cfg.primary_kernel, cfg.primary_stride, cfg.primary_pad);
    primary_count = (cfg.primary_filters / cfg.capsule_dim) * h2 * h2;
    // wider than the conv init: the coupling coefficients average ~1/class_caps
    // of ~1k predictions, so small weights leave the class capsules (and the
    // score head behind them) with no usable scale for many steps
    routing_w = Tensor::randn({primary_count, cfg.class_caps, cfg.capsule_dim, cfg.class_dim}, rng,
                              0.15f, true);
    head = DenseLayer(cfg.class_dim, 1, rng, 0.3f);
}

DiscriminatorOutput CapsDiscriminator::forward(const Tensor& image, int routing_iters,
                                               ShapeTrace* trace) const {
    Tensor h = leaky_relu(conv1.forward(image));
    trace_shape(trace, "conv_leaky", h);
    Tensor feat = primary_conv.forward(h);
    trace_shape(trace, "primary_squash", feat);
    Tensor primary = primary_caps(feat, cfg.capsule_dim);
    Tensor v = routed_capsules(primary, routing_w, routing_iters);
    trace_shape(trace, "digitcaps", v);
    Tensor m = mask_by_norm(v);
    trace_shape(trace, "mask", m);
    Tensor score = sigmoid(head.forward(m));
    trace_shape(trace, "dense", score);
    return {score, v};
}

void CapsDiscriminator::collect(const std::string& prefix, NamedTensors& params, NamedTensors&) {
    conv1.collect(prefix + ".conv1", params);
    primary_conv.collect(prefix + ".primary", params);
    params.emplace_back(prefix + ".caps.w", routing_w);
    head.collect(prefix + ".head", params);
}

// ---------------------------------------------------------------------------
// DCGAN discriminator
// ---------------------------------------------------------------------------

DcganDiscriminator::DcganDiscriminator(const DcganDiscriminatorConfig& c, Rng& rng) : cfg(c) {
    int64_t f1 = cfg.base_filters, f2 = 2 * f1, f3 = 4 * f1, f4 = 8 * f1;
    conv1 = Conv2dLayer(cfg.image_channels, f1, 4, 2, 1, true, rng);   // 28 -> 14
    conv2 = Conv2dLayer(f1, f2, 4, 2, 2, false, rng);                  // 14 -> 8
    conv3 = Conv2dLayer(f2, f3, 4, 2, 1, false, rng);                  // 8 -> 4
    conv4 = Conv2dLayer(f3, f4, 3, 1, 1, false, rng);                  // 4 -> 4
    bn2 = BatchNormLayer(f2);
    bn3 = BatchNormLayer(f3);
    bn4 = BatchNormLayer(f4);
    head = DenseLayer(f4 * 4 * 4, 1, rng);
}

DiscriminatorOutput DcganDiscriminator::forward(const Tensor& image, bool train, Rng* rng,
                                                ShapeTrace* trace) {
    if (train && !rng) throw UsageError("dcgan discriminator: train mode requires an rng");
    Rng dummy(0);
    Rng& r = rng ? *rng : dummy;

    Tensor h = leaky_relu(conv1.forward(image));
    trace_shape(trace, "conv_leaky", h);
    h = dropout(h, cfg.dropout_rate, r, train);
    trace_shape(trace, "dropout", h);
    h = leaky_relu(bn2.forward(conv2.forward(h), train));
    trace_shape(trace, "conv_bn_leaky", h);
    h = dropout(h, cfg.dropout_rate, r, train);
    trace_shape(trace, "dropout", h);
    h = leaky_relu(bn3.forward(conv3.forward(h), train));
    trace_shape(trace, "conv_bn_leaky", h);
    h = dropout(h, cfg.dropout_rate, r, train);
    trace_shape(trace, "dropout", h);
    h = leaky_relu(bn4.forward(conv4.forward(h), train));
    trace_shape(trace, "conv_bn_leaky", h);
    h = dropout(h, cfg.dropout_rate, r, train);
    trace_shape(trace, "dropout", h);
    Tensor flat = reshape(h, {h.dim(0), h.numel() / h.dim(0)});
    Tensor score = sigmoid(head.forward(flat));
    trace_shape(trace, "dense", score);
    return {score, Tensor()};
}

void DcganDiscriminator::collect(const std::string& prefix, NamedTensors& params,
                                 NamedTensors& buffers) {
    conv1.collect(prefix + ".conv1", params);
    conv2.collect(prefix + ".conv2", params);
    conv3.collect(prefix + ".conv3", params);
    conv4.collect(prefix + ".conv4", params);
    bn2.collect(prefix + ".bn2", params, buffers);
    bn3.collect(prefix + ".bn3", params, buffers);
    bn4.collect(prefix + ".bn4", params, buffers);
    head.collect(prefix + ".head", params);
}

// ---------------------------------------------------------------------------
// DCGAN generator
// ---------------------------------------------------------------------------

DcganGenerator::DcganGenerator(const DcganGeneratorConfig& c, Rng& rng) : cfg(c) {
    if (cfg.base_channels % 2 != 0)
        throw ShapeError("dcgan generator: base channel count must be even");
    int64_t cb = cfg.base_channels;
    fc = DenseLayer(cfg.latent_dim, cb * 7 * 7, rng);
    up1 = ConvTranspose2dLayer(cb, cb, 4, 2, 1, false, rng);      // 7 -> 14
    up2 = ConvTranspose2dLayer(cb, cb / 2, 4, 2, 1, false, rng);  // 14 -> 28
    bn1 = BatchNormLayer(cb);
    bn2 = BatchNormLayer(cb / 2);
    to_image = Conv2dLayer(cb / 2, 1, 3, 1, 1, true, rng);
}

Tensor DcganGenerator::forward(const Tensor& z, bool train, ShapeTrace* trace) {
    if (z.rank() != 2 || z.dim(1) != cfg.latent_dim)
        throw ShapeError("dcgan generator: expected latent [N," + std::to_string(cfg.latent_dim) +
                         "], got " + shape_str(z.shape()));
    Tensor h = fc.forward(z);
    trace_shape(trace, "dense", h);
    h = reshape(h, {z.dim(0), cfg.base_channels, 7, 7});
    trace_shape(trace, "reshape", h);
    h = relu(bn1.forward(up1.forward(h), train));
    trace_shape(trace, "deconv_bn_relu", h);
    h = relu(bn2.forward(up2.forward(h), train));
    trace_shape(trace, "deconv_bn_relu", h);
    Tensor img = tanh_act(to_image.forward(h));
    trace_shape(trace, "conv_tanh", img);
    return img;
}

void DcganGenerator::collect(const std::string& prefix, NamedTensors& params,
                             NamedTensors& buffers) {
    fc.collect(prefix + ".fc", params);
    up1.collect(prefix + ".up1", params);
    up2.collect(prefix + ".up2", params);
    bn1.collect(prefix + ".bn1", params, buffers);
    bn2.collect(prefix + ".bn2", params, buffers);
    to_image.collect(prefix + ".to_image", params);
}

// ---------------------------------------------------------------------------
// Capsule-fed generator (outer-product mixer + deconvolution tail)
// ---------------------------------------------------------------------------

Caps2Generator::Caps2Generator(const Caps2GeneratorConfig& c, Rng& rng) : cfg(c) {
    bn_mix = BatchNormLayer(cfg.caps_dim);
    mix_weight = Tensor::randn({cfg.caps_dim}, rng, 0.02f, true);
    bn_vec = BatchNormLayer(cfg.latent_dim);
    DcganGeneratorConfig tail_cfg;
    tail_cfg.latent_dim = cfg.latent_dim;
    tail_cfg.base_channels = cfg.base_channels;
    tail = DcganGenerator(tail_cfg, rng);
}

Tensor Caps2Generator::forward(const Tensor& caps_vec, const Tensor& z, bool train,
                               ShapeTrace* trace) {
    if (caps_vec.rank() != 2 || caps_vec.dim(1) != cfg.caps_dim)
        throw ShapeError("caps2 generator: capsule vector must be [N," +
                         std::to_string(cfg.caps_dim) + "], got " + shape_str(caps_vec.shape()));
    if (z.rank() != 2 || z.dim(1) != cfg.latent_dim)
        throw ShapeError("caps2 generator: expected latent [N," + std::to_string(cfg.latent_dim) +
                         "], got " + shape_str(z.shape()));
    Tensor mixed = leaky_relu(bn_mix.forward(outer_product(caps_vec, z), train));
    trace_shape(trace, "multiply_bn_leaky", mixed);
    Tensor vec = leaky_relu(bn_vec.forward(contract_axis1(mixed, mix_weight), train));
    trace_shape(trace, "weight_bn_leaky", vec);
    return tail.forward(vec, train, trace);
}

void Caps2Generator::collect(const std::string& prefix, NamedTensors& params,
                             NamedTensors& buffers) {
    bn_mix.collect(prefix + ".bn_mix", params, buffers);
    params.emplace_back(prefix + ".mix.w", mix_weight);
    bn_vec.collect(prefix + ".bn_vec", params, buffers);
    tail.collect(prefix + ".tail", params, buffers);
}

// ---------------------------------------------------------------------------
// Reverse-routing generator
// ---------------------------------------------------------------------------

Caps3Generator::Caps3Generator(const Caps3GeneratorConfig& c, Rng& rng) : cfg(c) {
    if (cfg.feature_channels % 4 != 0)
        throw ShapeError("caps3 generator: feature channels must be divisible by 4");
    if ((cfg.feature_channels * 36) % cfg.gen_caps_dim != 0)
        throw ShapeError("caps3 generator: feature map not divisible into capsules");
    out_caps = cfg.feature_channels * 36 / cfg.gen_caps_dim;
    routing_w =
        Tensor::randn({cfg.in_caps, out_caps, cfg.in_dim, cfg.gen_caps_dim}, rng, 0.02f, true);
    int64_t fc_ = cfg.feature_channels;
    up1 = ConvTranspose2dLayer(fc_, fc_, 6, 2, 0, false, rng);       // 6 -> 16
    up2 = ConvTranspose2dLayer(fc_, fc_ / 2, 5, 1, 0, false, rng);   // 16 -> 20
    up3 = ConvTranspose2dLayer(fc_ / 2, fc_ / 4, 5, 1, 0, false, rng);  // 20 -> 24
    up4 = ConvTranspose2dLayer(fc_ / 4, 1, 5, 1, 0, true, rng);      // 24 -> 28
    bn1 = BatchNormLayer(fc_);
    bn2 = BatchNormLayer(fc_ / 2);
    bn3 = BatchNormLayer(fc_ / 4);
}

Tensor Caps3Generator::forward(const Tensor& z, int routing_iters, bool train,
                               ShapeTrace* trace) {
    if (z.rank() != 2 || z.dim(1) != cfg.latent_dim())
        throw ShapeError("caps3 generator: expected latent [N," +
                         std::to_string(cfg.latent_dim()) + "], got " + shape_str(z.shape()));
    Tensor caps = reshape(z, {z.dim(0), cfg.in_caps, cfg.in_dim});
    trace_shape(trace, "reshape_caps", caps);
    Tensor v = routed_capsules(caps, routing_w, routing_iters);
    trace_shape(trace, "digitcaps", v);
    Tensor feat = capsules_to_features(v, cfg.feature_channels, 6, 6);
    trace_shape(trace, "reshape", feat);
    Tensor h = relu(bn1.forward(up1.forward(feat), train));
    trace_shape(trace, "deconv_bn_relu", h);
    h = relu(bn2.forward(up2.forward(h), train));
    trace_shape(trace, "deconv_bn_relu", h);
    h = relu(bn3.forward(up3.forward(h), train));
    trace_shape(trace, "deconv_bn_relu", h);
    Tensor img = tanh_act(up4.forward(h));
    trace_shape(trace, "deconv_tanh", img);
    return img;
}

void Caps3Generator::collect(const std::string& prefix, NamedTensors& params,
                             NamedTensors& buffers) {
    params.emplace_back(prefix + ".caps.w", routing_w);
    up1.collect(prefix + ".up1", params);
    up2.collect(prefix + ".up2", params);
    up3.collect(prefix + ".up3", params);
    up4.collect(prefix + ".up4", params);
    bn1.collect(prefix + ".bn1", params, buffers);
    bn2.collect(prefix + ".bn2", params, buffers);
    bn3.collect(prefix + ".bn3", params, buffers);
}

// ---------------------------------------------------------------------------
// Model container
// ---------------------------------------------------------------------------

std::string arch_name(Arch arch) {
    switch (arch) {
        case Arch::dcgan: return "dcgan";
        case Arch::capsgan1: return "capsgan1";
        case Arch::capsgan2: return "capsgan2";
        case Arch::capsgan3: return "capsgan3";
    }
    return "dcgan";
}

Arch arch_from_name(const std::string& name) {
    if (name == "dcgan") return Arch::dcgan;
    if (name == "capsgan1") return Arch::capsgan1;
    if (name == "capsgan2") return Arch::capsgan2;
    if (name == "capsgan3") return Arch::capsgan3;
    throw UsageError("unknown architecture '" + name +
                     "' (expected dcgan|capsgan1|capsgan2|capsgan3)");
}

GanModel GanModel::build(Arch arch, int routing_iters, uint64_t seed) {
    if (routing_iters < 1) throw UsageError("routing iterations must be >= 1");
    GanModel m;
    m.arch = arch;
    m.routing_iters = routing_iters;
    Rng rng(mix_seed(seed, 0x6D6F64656C));
    switch (arch) {
        case Arch::dcgan:
            m.conv_d = std::make_unique<DcganDiscriminator>(DcganDiscriminatorConfig{}, rng);
            m.gen_dcgan = std::make_unique<DcganGenerator>(DcganGeneratorConfig{}, rng);
            break;
        case Arch::capsgan1:
            m.caps_d = std::make_unique<CapsDiscriminator>(CapsDiscriminatorConfig{}, rng);
            m.gen_dcgan = std::make_unique<DcganGenerator>(DcganGeneratorConfig{}, rng);
            break;
        case Arch::capsgan2:
            m.caps_d = std::make_unique<CapsDiscriminator>(CapsDiscriminatorConfig{}, rng);
            m.gen_caps2 = std::make_unique<Caps2Generator>(Caps2GeneratorConfig{}, rng);
            break;
        case Arch::capsgan3:
            m.caps_d = std::make_unique<CapsDiscriminator>(CapsDiscriminatorConfig{}, rng);
            m.gen_caps3 = std::make_unique<Caps3Generator>(Caps3GeneratorConfig{}, rng);
            break;
    }
    return m;
}

int64_t GanModel::latent_dim() const {
    switch (arch) {
        case Arch::dcgan:
        case Arch::capsgan1: return gen_dcgan->cfg.latent_dim;
        case Arch::capsgan2: return gen_caps2->cfg.latent_dim;
        case Arch::capsgan3: return gen_caps3->cfg.latent_dim();
    }
    return 0;
}

DiscriminatorOutput GanModel::discriminate(const Tensor& images, bool train, Rng* rng,
                                           ShapeTrace* trace) {
    if (images.rank() != 4 || images.dim(1) != 1 || images.dim(2) != 28 || images.dim(3) != 28)
        throw ShapeError("discriminator expects images [N,1,28,28], got " +
                         shape_str(images.shape()));
    if (caps_d) return caps_d->forward(images, routing_iters, trace);
    return conv_d->forward(images, train, rng, trace);
}

Tensor GanModel::generate(const Tensor& z, const Tensor& caps_vec, bool train,
                          ShapeTrace* trace) {
    if (generator_needs_digitcaps() && !caps_vec.defined())
        throw UsageError("capsgan2 generation requires a masked capsule vector from real images");
    switch (arch) {
        case Arch::dcgan:
        case Arch::capsgan1: return gen_dcgan->forward(z, train, trace);
        case Arch::capsgan2: return gen_caps2->forward(caps_vec, z, train, trace);
        case Arch::capsgan3: return gen_caps3->forward(z, routing_iters, train, trace);
    }
    throw UsageError("unreachable");
}

NamedTensors GanModel::d_params() {
    NamedTensors p, b;
    if (caps_d) caps_d->collect("d", p, b);
    if (conv_d) conv_d->collect("d", p, b);
    return p;
}

NamedTensors GanModel::g_params() {
    NamedTensors p, b;
    if (gen_dcgan) gen_dcgan->collect("g", p, b);
    if (gen_caps2) gen_caps2->collect("g", p, b);
    if (gen_caps3) gen_caps3->collect("g", p, b);
    return p;
}

NamedTensors GanModel::buffers() {
    NamedTensors p, b;
    if (caps_d) caps_d->collect("d", p, b);
    if (conv_d) conv_d->collect("d", p, b);
    p.clear();
    if (gen_dcgan) gen_dcgan->collect("g", p, b);
    if (gen_caps2) gen_caps2->collect("g", p, b);
    if (gen_caps3) gen_caps3->collect("g", p, b);
    return b;
}

void GanModel::set_d_requires_grad(bool v) {
    for (auto& [name, t] : d_params()) {
        (void)name;
        t.set_requires_grad(v);
    }
}

}  // namespace capsgan
