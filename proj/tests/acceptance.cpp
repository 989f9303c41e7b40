// Acceptance suite: runs every release criterion end to end and prints one
// PASS/FAIL line per criterion. Binding criteria drive the exit code; the
// exploratory comparison is reported only.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "capsgan/datagen.hpp"
#include "capsgan/metrics.hpp"
#include "capsgan/training.hpp"
#include "helpers.hpp"
#include "tiny_nets.hpp"

using namespace capsgan;
using namespace testutil;
namespace fs = std::filesystem;

namespace {

struct Criterion {
    std::string name;
    bool pass;
    bool binding;
    std::string detail;
};
std::vector<Criterion> g_results;

void report(const std::string& name, bool pass, const std::string& detail, bool binding = true) {
    g_results.push_back({name, pass, binding, detail});
    std::printf("%s  %s: %s\n", pass ? "PASS" : (binding ? "FAIL" : "INFO"), name.c_str(),
                detail.c_str());
    std::fflush(stdout);
}

struct Check {
    bool ok = true;
    std::string first_failure;
    void expect(bool cond, const std::string& what) {
        if (!cond && ok) {
            ok = false;
            first_failure = what;
        }
    }
};

fs::path art_dir() {
    static fs::path p = [] {
        fs::path d = fs::temp_directory_path() / "capsgan_acceptance";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return p;
}

Dataset subset(const Dataset& ds, int64_t n) {
    std::vector<int64_t> idx(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    Dataset out;
    out.images = gather_images(ds, idx);
    if (ds.has_labels()) out.labels = gather_labels(ds, idx);
    return out;
}

std::vector<uint8_t> slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string slurp_text(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string strip_last_column(const std::string& csv) {
    std::stringstream in(csv), out;
    std::string line;
    while (std::getline(in, line)) {
        auto pos = line.rfind(',');
        out << (pos == std::string::npos ? line : line.substr(0, pos)) << "\n";
    }
    return out.str();
}

double elapsed_s(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// mirrors the library's squash arithmetic for bit-exact oracles
void squash_ref(const float* s, int64_t d, float* out) {
    double q = 0.0;
    for (int64_t i = 0; i < d; ++i) q += static_cast<double>(s[i]) * s[i];
    double rt = std::sqrt(q);
    float f = static_cast<float>(q / ((1.0 + q) * (rt + 1e-8)));
    for (int64_t i = 0; i < d; ++i) out[i] = f * s[i];
}

// ---------------------------------------------------------------------------
// criterion 1: finite-difference gradient suite
// ---------------------------------------------------------------------------

void criterion_gradients() {
    auto t0 = std::chrono::steady_clock::now();
    Check c;
    Rng rng(100);

    auto op_ok = [&](const char* what, double err, double tol = 1e-3) {
        c.expect(err < tol, std::string(what) + " rel err " + std::to_string(err));
    };

    {  // matmul
        Tensor a = randu({4, 3}, rng, -1, 1, true), b = randu({3, 5}, rng, -1, 1, true);
        Tensor r = randu({4, 5}, rng);
        op_ok("matmul", gradcheck({a, b}, [&]() { return sum(mul(matmul(a, b), r)); }));
    }
    {  // dense
        Tensor x = randu({3, 4}, rng, -1, 1, true), w = randu({4, 2}, rng, -1, 1, true);
        Tensor b = randu({2}, rng, -1, 1, true), r = randu({3, 2}, rng);
        op_ok("dense", gradcheck({x, w, b}, [&]() { return sum(mul(dense(x, w, b), r)); }));
    }
    {  // conv2d
        Tensor x = randu({2, 2, 6, 6}, rng, -1, 1, true), k = randu({3, 2, 3, 3}, rng, -1, 1, true);
        Tensor r = randu({2, 3, 3, 3}, rng);
        op_ok("conv2d", gradcheck({x, k}, [&]() { return sum(mul(conv2d(x, k, 2, 1), r)); }));
    }
    {  // conv_transpose2d
        Tensor x = randu({2, 3, 4, 4}, rng, -1, 1, true);
        Tensor k = randu({3, 2, 4, 4}, rng, -0.5f, 0.5f, true);
        Tensor r = randu({2, 2, 8, 8}, rng);
        op_ok("conv_transpose2d",
              gradcheck({x, k}, [&]() { return sum(mul(conv_transpose2d(x, k, 2, 1), r)); }));
    }
    {  // batch_norm (train and eval)
        Tensor x = randu({4, 3, 2, 2}, rng, -1, 1, true);
        Tensor gm = randu({3}, rng, 0.5f, 1.5f, true), bt = randu({3}, rng, -0.5f, 0.5f, true);
        Tensor rm = Tensor::zeros({3}), rv = Tensor::full({3}, 1.0f);
        Tensor r = randu({4, 3, 2, 2}, rng);
        op_ok("batch_norm(train)", gradcheck({x, gm, bt}, [&]() {
                  return sum(mul(batch_norm(x, gm, bt, rm, rv, 1e-5f, 0.9f, true), r));
              }));
        op_ok("batch_norm(eval)", gradcheck({x, gm, bt}, [&]() {
                  return sum(mul(batch_norm(x, gm, bt, rm, rv, 1e-5f, 0.9f, false), r));
              }));
    }
    for (auto kind : {Activation::relu, Activation::leaky_relu, Activation::tanh,
                      Activation::sigmoid}) {  // activations
        Tensor x = randu({5, 5}, rng, -1, 1, true);
        for (auto& v : x.data())
            if (std::abs(v) < 0.02f) v = 0.05f;
        Tensor r = randu({5, 5}, rng);
        op_ok("activation", gradcheck({x}, [&]() { return sum(mul(activate(x, kind, 0.2f), r)); }));
    }
    {  // dropout under a frozen mask
        Tensor x = randu({6, 6}, rng, 0.5f, 1.0f, true), r = randu({6, 6}, rng);
        op_ok("dropout", gradcheck({x}, [&]() {
                  Rng mask_rng(77);
                  return sum(mul(dropout(x, 0.4f, mask_rng, true), r));
              }));
    }
    {  // softmax + cross entropy
        Tensor x = randu({4, 5}, rng, -2, 2, true), r = randu({4, 5}, rng);
        op_ok("softmax", gradcheck({x}, [&]() { return sum(mul(softmax_lastdim(x), r)); }));
        Tensor logits = randu({6, 4}, rng, -2, 2, true);
        std::vector<int> labels = {0, 3, 1, 2, 2, 0};
        op_ok("cross_entropy", gradcheck({logits}, [&]() {
                  return softmax_cross_entropy(logits, labels);
              }));
    }
    {  // capsule ops
        Tensor s = randu({3, 5}, rng, -1, 1, true), r = randu({3, 5}, rng);
        op_ok("squash", gradcheck({s}, [&]() { return sum(mul(squash(s), r)); }));
        Tensor u = randu({2, 3, 4}, rng, -1, 1, true), w = randu({3, 2, 4, 5}, rng, -1, 1, true);
        Tensor rr = randu({2, 3, 2, 5}, rng);
        op_ok("caps_predict",
              gradcheck({u, w}, [&]() { return sum(mul(caps_predict(u, w), rr)); }));
        Tensor cc = randu({2, 4, 3}, rng, 0.1f, 0.9f, true);
        Tensor uh = randu({2, 4, 3, 5}, rng, -1, 1, true);
        Tensor rs = randu({2, 3, 5}, rng);
        op_ok("route_weighted_sum",
              gradcheck({cc, uh}, [&]() { return sum(mul(route_weighted_sum(cc, uh), rs)); }));
        Tensor vv = randu({2, 3, 5}, rng, -1, 1, true);
        Tensor ra = randu({2, 4, 3}, rng);
        op_ok("route_agreement",
              gradcheck({uh, vv}, [&]() { return sum(mul(route_agreement(uh, vv), ra)); }));
        Tensor vm = randu({2, 3, 4}, rng, -1, 1, true);
        for (int64_t b = 0; b < 2; ++b)
            for (int64_t d = 0; d < 4; ++d) vm.data()[(b * 3 + 0) * 4 + d] *= 3.0f;
        Tensor rm2 = randu({2, 4}, rng);
        op_ok("mask_by_norm",
              gradcheck({vm}, [&]() { return sum(mul(mask_by_norm(vm), rm2)); }));
    }
    {  // mixer ops
        Tensor a = randu({3, 4}, rng, -1, 1, true), b = randu({3, 5}, rng, -1, 1, true);
        Tensor r = randu({3, 4, 5}, rng);
        op_ok("outer_product",
              gradcheck({a, b}, [&]() { return sum(mul(outer_product(a, b), r)); }));
        Tensor x = randu({2, 4, 3}, rng, -1, 1, true), w = randu({4}, rng, -1, 1, true);
        Tensor rc = randu({2, 3}, rng);
        op_ok("contract_axis1",
              gradcheck({x, w}, [&]() { return sum(mul(contract_axis1(x, w), rc)); }));
        Tensor p = randu({8}, rng, 0.1f, 0.9f, true);
        op_ok("log_clamped", gradcheck({p}, [&]() { return sum(log_clamped(p)); }));
        Tensor bx = randu({2, 3, 4, 4}, rng, -1, 1, true), bb = randu({3}, rng, -1, 1, true);
        Tensor br = randu({2, 3, 4, 4}, rng);
        op_ok("bias_channel",
              gradcheck({bx, bb}, [&]() { return sum(mul(bias_channel(bx, bb), br)); }));
    }
    {  // adversarial losses as functions of mid-range scores
        Tensor sr = randu({6, 1}, rng, 0.15f, 0.85f, true);
        Tensor sf = randu({6, 1}, rng, 0.15f, 0.85f, true);
        op_ok("d_loss", gradcheck({sr, sf}, [&]() { return d_loss(sr, sf); }));
        op_ok("g_loss(non_saturating)", gradcheck({sf}, [&]() {
                  return g_loss(sf, GLossVariant::non_saturating);
              }));
        op_ok("g_loss(minimax)",
              gradcheck({sf}, [&]() { return g_loss(sf, GLossVariant::minimax); }));
    }
    {  // unrolled routing against the capsule-weight path (composite, fp32)
        Tensor u = randu({2, 8, 4}, rng, -1, 1, true), w = randu({8, 3, 4, 6}, rng, -0.5f, 0.5f, true);
        double err = gradcheck({w, u}, [&]() {
            Tensor v = routed_capsules(u, w, 3);
            return sum(mul(v, v));
        }, 1e-3f, 16);
        op_ok("routed_capsules (composite)", err, 1e-2);
    }

    // End-to-end, every architecture at reduced width (8 primary capsules,
    // 3 class capsules in the capsule discriminator). Parameters are moved
    // to a generic point first; the probe is a smooth random projection of
    // the real scores, the adversarial scores and the generated images, so
    // it reaches every layer of both players. The score-to-loss tail is
    // covered by the op-level checks above.
    Rng data_rng(7);
    Tensor img = randu({2, 1, 28, 28}, data_rng, -1, 1);
    for (Arch arch : {Arch::dcgan, Arch::capsgan1, Arch::capsgan2, Arch::capsgan3}) {
        Rng net_rng(200 + static_cast<uint64_t>(arch));
        GanModel m;
        m.arch = arch;
        m.routing_iters = 3;
        if (arch == Arch::dcgan)
            m.conv_d = std::make_unique<DcganDiscriminator>(tiny_conv_d(), net_rng);
        else
            m.caps_d = std::make_unique<CapsDiscriminator>(tiny_caps_d(), net_rng);
        if (arch == Arch::dcgan || arch == Arch::capsgan1)
            m.gen_dcgan = std::make_unique<DcganGenerator>(tiny_dcgan_g(), net_rng);
        else if (arch == Arch::capsgan2)
            m.gen_caps2 = std::make_unique<Caps2Generator>(tiny_caps2_g(), net_rng);
        else
            m.gen_caps3 = std::make_unique<Caps3Generator>(tiny_caps3_g(), net_rng);

        Rng jit(777);
        jitter_params(m.d_params(), jit, 2.5f, 0.05f);
        jitter_params(m.g_params(), jit, 2.5f, 0.05f);

        Rng fix_rng(55);
        Tensor z = Tensor::randn({2, m.latent_dim()}, fix_rng, 1.0f);
        Tensor feed;
        if (arch == Arch::capsgan2) feed = randu({2, 4}, fix_rng, -0.5f, 0.5f);
        Tensor r1 = randu({2, 1}, fix_rng), r2 = randu({2, 1}, fix_rng);
        Tensor r3 = randu({2, 1, 28, 28}, fix_rng, -0.05f, 0.05f);

        NamedTensors dp = m.d_params(), gp = m.g_params();
        std::vector<Tensor> d_tensors, g_tensors;
        for (auto& [n, p] : dp) {
            (void)n;
            d_tensors.push_back(p);
        }
        for (auto& [n, p] : gp) {
            (void)n;
            g_tensors.push_back(p);
        }
        auto f = [&]() {
            Rng fwd_rng(91);
            Tensor fakes = m.generate(z, feed, true);
            DiscriminatorOutput ro = m.discriminate(img, true, &fwd_rng);
            DiscriminatorOutput fo = m.discriminate(fakes, true, &fwd_rng);
            Tensor scores = add(mean(mul(ro.score, r1)), mean(mul(fo.score, r2)));
            return add(scores, mean(mul(fakes, r3)));
        };
        c.expect(max_abs_grad(d_tensors, f) > 1e-4,
                 arch_name(arch) + " discriminator check is vacuous");
        c.expect(max_abs_grad(g_tensors, f) > 1e-4,
                 arch_name(arch) + " generator check is vacuous");
        op_ok((arch_name(arch) + " end-to-end (d params)").c_str(),
              gradcheck(d_tensors, f, 1e-3f, 5, 301), 1e-2);
        op_ok((arch_name(arch) + " end-to-end (g params)").c_str(),
              gradcheck(g_tensors, f, 1e-3f, 5, 302), 1e-2);
    }

    double secs = elapsed_s(t0);
    c.expect(secs < 300.0, "runtime " + std::to_string(secs) + "s exceeds 5 min");
    report("criterion-1 gradient-suite", c.ok,
           c.ok ? "all ops < 1e-3, composites and architectures < 1e-2, " +
                      std::to_string(secs) + "s"
                : c.first_failure);
}

// ---------------------------------------------------------------------------
// criterion 2: routing suite
// ---------------------------------------------------------------------------

void criterion_routing() {
    Check c;
    Rng rng(300);
    {  // coefficient normalization at every iteration
        int64_t B = 2, I = 16, J = 5, D = 4;
        Tensor u_hat = randu({B, I, J, D}, rng);
        Tensor b = Tensor::zeros({B, I, J});
        for (int iter = 0; iter < 3; ++iter) {
            Tensor cc = routing_softmax(b);
            for (int64_t r = 0; r < B * I; ++r) {
                double s = 0.0;
                bool nonneg = true;
                for (int64_t j = 0; j < J; ++j) {
                    float v = cc.data()[r * J + j];
                    nonneg = nonneg && v >= 0.0f;
                    s += v;
                }
                c.expect(nonneg && std::abs(s - 1.0) <= 1e-6,
                         "coefficient row off by " + std::to_string(std::abs(s - 1.0)));
            }
            Tensor v = squash(route_weighted_sum(cc, u_hat));
            b = add(b, route_agreement(u_hat, v));
        }
    }
    {  // squash bounds and direction
        for (int trial = 0; trial < 200; ++trial) {
            Tensor s = randu({1, 6}, rng, -4, 4);
            Tensor v = squash(s);
            double ns = 0, nv = 0, dot = 0;
            for (int i = 0; i < 6; ++i) {
                ns += static_cast<double>(s.data()[i]) * s.data()[i];
                nv += static_cast<double>(v.data()[i]) * v.data()[i];
                dot += static_cast<double>(s.data()[i]) * v.data()[i];
            }
            ns = std::sqrt(ns);
            nv = std::sqrt(nv);
            c.expect(nv < 1.0, "squash norm " + std::to_string(nv));
            if (ns > 1e-6)
                c.expect(dot / (ns * nv) > 1.0 - 1e-5,
                         "direction cosine " + std::to_string(dot / (ns * nv)));
        }
    }
    {  // iteration-1 closed form, bit exact
        int64_t B = 2, I = 6, J = 5, D = 4;
        Tensor u_hat = randu({B, I, J, D}, rng);
        Tensor v = dynamic_routing(u_hat, 1);
        float cu = 1.0f / static_cast<float>(J);
        for (int64_t b = 0; b < B; ++b)
            for (int64_t j = 0; j < J; ++j) {
                float s[8] = {0};
                for (int64_t i = 0; i < I; ++i)
                    for (int64_t d = 0; d < D; ++d)
                        s[d] += cu * u_hat.data()[((b * I + i) * J + j) * D + d];
                float expect[8];
                squash_ref(s, D, expect);
                for (int64_t d = 0; d < D; ++d)
                    c.expect(v.data()[(b * J + j) * D + d] == expect[d],
                             "iteration-1 mix differs at bit level");
            }
    }
    {  // agreement concentration (scripted oracle of the update equations)
        int64_t I = 8, J = 2, D = 4;
        std::vector<float> uh(static_cast<size_t>(I * J * D));
        float unit[4] = {0.5f, 0.5f, 0.5f, 0.5f};
        for (int64_t i = 0; i < I; ++i)
            for (int64_t d = 0; d < D; ++d) {
                uh[static_cast<size_t>((i * J) * D + d)] = unit[d];
                uh[static_cast<size_t>((i * J + 1) * D + d)] = rng.uniform(-0.6f, 0.6f);
            }
        Tensor u_hat = Tensor::from_data({1, I, J, D}, std::move(uh));
        std::vector<double> b_log(static_cast<size_t>(I * J), 0.0), cc(static_cast<size_t>(I * J));
        std::vector<double> v(static_cast<size_t>(J * D));
        for (int iter = 0; iter < 3; ++iter) {
            for (int64_t i = 0; i < I; ++i) {
                double e0 = std::exp(b_log[static_cast<size_t>(i * J)]);
                double e1 = std::exp(b_log[static_cast<size_t>(i * J + 1)]);
                cc[static_cast<size_t>(i * J)] = e0 / (e0 + e1);
                cc[static_cast<size_t>(i * J + 1)] = e1 / (e0 + e1);
            }
            for (int64_t j = 0; j < J; ++j) {
                double s[4] = {0, 0, 0, 0};
                for (int64_t i = 0; i < I; ++i)
                    for (int64_t d = 0; d < D; ++d)
                        s[d] += cc[static_cast<size_t>(i * J + j)] * u_hat.data()[(i * J + j) * D + d];
                double q = s[0] * s[0] + s[1] * s[1] + s[2] * s[2] + s[3] * s[3];
                double f = q / ((1.0 + q) * (std::sqrt(q) + 1e-8));
                for (int64_t d = 0; d < D; ++d) v[static_cast<size_t>(j * D + d)] = f * s[d];
            }
            if (iter < 2)
                for (int64_t i = 0; i < I; ++i)
                    for (int64_t j = 0; j < J; ++j) {
                        double dot = 0.0;
                        for (int64_t d = 0; d < D; ++d)
                            dot += u_hat.data()[(i * J + j) * D + d] * v[static_cast<size_t>(j * D + d)];
                        b_log[static_cast<size_t>(i * J + j)] += dot;
                    }
        }
        for (int64_t i = 0; i < I; ++i)
            c.expect(cc[static_cast<size_t>(i * J)] > cc[static_cast<size_t>(i * J + 1)],
                     "coefficients did not concentrate on the agreeing capsule");
        Tensor vt = dynamic_routing(u_hat, 3);
        for (int64_t j = 0; j < J; ++j)
            for (int64_t d = 0; d < D; ++d)
                c.expect(std::abs(vt.data()[j * D + d] - v[static_cast<size_t>(j * D + d)]) < 1e-5,
                         "library routing diverged from the scripted iteration");
    }
    report("criterion-2 routing-suite", c.ok,
           c.ok ? "normalization, squash bounds, closed form, concentration" : c.first_failure);
}

// ---------------------------------------------------------------------------
// criterion 3: per-layer shape conformance
// ---------------------------------------------------------------------------

void criterion_shapes() {
    Check c;
    auto expect_trace = [&](const char* what, const ShapeTrace& have,
                            const std::vector<std::pair<std::string, Shape>>& want) {
        if (have.size() != want.size()) {
            c.expect(false, std::string(what) + ": trace length differs");
            return;
        }
        for (size_t i = 0; i < want.size(); ++i)
            c.expect(have[i].first == want[i].first && have[i].second == want[i].second,
                     std::string(what) + ": row " + std::to_string(i) + " is " +
                         have[i].first + shape_str(have[i].second));
    };

    Rng rng(400);
    Tensor img = randu({1, 1, 28, 28}, rng);

    std::vector<std::pair<std::string, Shape>> caps_d_rows = {
        {"conv_leaky", {256, 20, 20}}, {"primary_squash", {256, 6, 6}},
        {"digitcaps", {10, 16}},       {"mask", {16}},
        {"dense", {1}},
    };
    std::vector<std::pair<std::string, Shape>> conv_d_rows = {
        {"conv_leaky", {32, 14, 14}}, {"dropout", {32, 14, 14}},
        {"conv_bn_leaky", {64, 8, 8}}, {"dropout", {64, 8, 8}},
        {"conv_bn_leaky", {128, 4, 4}}, {"dropout", {128, 4, 4}},
        {"conv_bn_leaky", {256, 4, 4}}, {"dropout", {256, 4, 4}},
        {"dense", {1}},
    };
    std::vector<std::pair<std::string, Shape>> dcgan_g_rows = {
        {"dense", {6272}},
        {"reshape", {128, 7, 7}},
        {"deconv_bn_relu", {128, 14, 14}},
        {"deconv_bn_relu", {64, 28, 28}},
        {"conv_tanh", {1, 28, 28}},
    };
    std::vector<std::pair<std::string, Shape>> caps2_g_rows = {
        {"multiply_bn_leaky", {16, 100}},
        {"weight_bn_leaky", {100}},
        {"dense", {6272}},
        {"reshape", {128, 7, 7}},
        {"deconv_bn_relu", {128, 14, 14}},
        {"deconv_bn_relu", {64, 28, 28}},
        {"conv_tanh", {1, 28, 28}},
    };
    std::vector<std::pair<std::string, Shape>> caps3_g_rows = {
        {"reshape_caps", {16, 8}},
        {"digitcaps", {1152, 8}},
        {"reshape", {256, 6, 6}},
        {"deconv_bn_relu", {256, 16, 16}},
        {"deconv_bn_relu", {128, 20, 20}},
        {"deconv_bn_relu", {64, 24, 24}},
        {"deconv_tanh", {1, 28, 28}},
    };

    {
        GanModel m = GanModel::build(Arch::dcgan, 3, 41);
        ShapeTrace td, tg;
        m.discriminate(img, false, nullptr, &td);
        m.generate(Tensor::zeros({1, 100}), Tensor(), false, &tg);
        expect_trace("dcgan D", td, conv_d_rows);
        expect_trace("dcgan G", tg, dcgan_g_rows);
    }
    {
        GanModel m = GanModel::build(Arch::capsgan1, 3, 42);
        ShapeTrace td, tg;
        m.discriminate(img, false, nullptr, &td);
        m.generate(Tensor::zeros({1, 100}), Tensor(), false, &tg);
        expect_trace("capsgan1 D", td, caps_d_rows);
        expect_trace("capsgan1 G", tg, dcgan_g_rows);
    }
    {
        GanModel m = GanModel::build(Arch::capsgan2, 3, 43);
        ShapeTrace td, tg;
        m.discriminate(img, false, nullptr, &td);
        m.generate(Tensor::zeros({1, 100}), Tensor::full({1, 16}, 0.1f), false, &tg);
        expect_trace("capsgan2 D", td, caps_d_rows);
        expect_trace("capsgan2 G", tg, caps2_g_rows);
    }
    {
        GanModel m = GanModel::build(Arch::capsgan3, 3, 44);
        ShapeTrace td, tg;
        m.discriminate(img, false, nullptr, &td);
        m.generate(Tensor::zeros({1, 128}), Tensor(), false, &tg);
        expect_trace("capsgan3 D", td, caps_d_rows);
        expect_trace("capsgan3 G", tg, caps3_g_rows);
    }
    report("criterion-3 shape-conformance", c.ok,
           c.ok ? "all layer chains match for the four architectures" : c.first_failure);
}

// ---------------------------------------------------------------------------
// criterion 4: determinism of training runs
// ---------------------------------------------------------------------------

void criterion_determinism(const Dataset& train_ds) {
    Check c;
    Dataset small = subset(train_ds, 160);
    TrainConfig cfg;
    cfg.arch = Arch::capsgan2;
    cfg.batch_size = 16;
    cfg.epochs = 1;  // 10 steps
    cfg.seed = 4242;

    cfg.out_dir = (art_dir() / "det_a").string();
    Trainer(cfg).train(small);
    fs::path dir_a = cfg.out_dir;
    cfg.out_dir = (art_dir() / "det_b").string();
    Trainer(cfg).train(small);
    fs::path dir_b = cfg.out_dir;

    c.expect(slurp(dir_a / "ckpt-final") == slurp(dir_b / "ckpt-final"),
             "final checkpoints differ");
    c.expect(strip_last_column(slurp_text(dir_a / "metrics.csv")) ==
                 strip_last_column(slurp_text(dir_b / "metrics.csv")),
             "metrics logs differ");
    report("criterion-4 determinism", c.ok,
           c.ok ? "10-step capsgan2 runs byte-identical (time_ms column excluded: wall-clock)"
                : c.first_failure);
}

// ---------------------------------------------------------------------------
// criterion 5: desk-scale learning signal
// ---------------------------------------------------------------------------

struct DeskScaleResult {
    bool scorer_ok = false;
    SurrogateScorer* scorer = nullptr;
};

void criterion_desk_scale(const Dataset& train_ds, SurrogateScorer& scorer) {
    Check c;
    Dataset gan_subset = subset(train_ds, 2000);

    TrainConfig cfg;
    cfg.arch = Arch::capsgan2;
    cfg.epochs = 3;
    cfg.batch_size = 64;
    cfg.seed = 515;
    cfg.out_dir = (art_dir() / "desk_capsgan2").string();
    cfg.sample_interval = 31;

    auto t0 = std::chrono::steady_clock::now();
    Trainer trainer(cfg);
    TrainSummary summary = trainer.train(gan_subset);
    double train_secs = elapsed_s(t0);
    c.expect(train_secs <= 1800.0,
             "training took " + std::to_string(train_secs) + "s (> 30 min)");
    c.expect(summary.steps == 93, "expected 93 steps, ran " + std::to_string(summary.steps));

    // generated-sample score vs uniform-noise score, same scorer
    ScoreReport gen_report =
        score_samples(trainer.model(), scorer, 1000, 10, 616, &gan_subset);
    Rng noise_rng(717);
    Tensor noise = randu({1000, 1, 28, 28}, noise_rng, -1.0f, 1.0f);
    ScoreReport noise_report = inception_score(scorer_probabilities_batched(scorer, noise), 10);
    c.expect(gen_report.mean >= 1.5 * noise_report.mean,
             "generated score " + std::to_string(gen_report.mean) + " < 1.5 x noise score " +
                 std::to_string(noise_report.mean));

    // global intensity statistics track the data
    double data_mean = 0.0;
    for (float v : gan_subset.images.data()) data_mean += v;
    data_mean /= static_cast<double>(gan_subset.images.numel());
    double gen_mean = 0.0;
    int64_t gen_count = 0;
    {
        NoGradGuard ng;
        Rng rng(818);
        for (int chunk = 0; chunk < 10; ++chunk) {
            Tensor z = Tensor::randn({100, trainer.model().latent_dim()}, rng, 1.0f);
            std::vector<int64_t> idx(100);
            for (auto& i : idx) i = rng.uniform_int(gan_subset.count());
            DiscriminatorOutput out =
                trainer.model().discriminate(gather_images(gan_subset, idx), false, nullptr);
            Tensor feed = mask_by_norm(out.digitcaps).detach();
            Tensor imgs = trainer.model().generate(z, feed, false);
            for (float v : imgs.data()) gen_mean += v;
            gen_count += imgs.numel();
        }
    }
    gen_mean /= static_cast<double>(gen_count);
    c.expect(std::abs(gen_mean - data_mean) <= 0.15,
             "generated mean " + std::to_string(gen_mean) + " vs data mean " +
                 std::to_string(data_mean));

    char detail[256];
    std::snprintf(detail, sizeof(detail),
                  "%.0fs train, score %.3f vs noise %.3f, mean %.3f vs data %.3f",
                  train_secs, gen_report.mean, noise_report.mean, gen_mean, data_mean);
    report("criterion-5 desk-scale-learning", c.ok, c.ok ? detail : c.first_failure);
}

// ---------------------------------------------------------------------------
// criterion 6: capsule feed policy
// ---------------------------------------------------------------------------

void criterion_feed_policy(const Dataset& train_ds) {
    Check c;
    c.expect(!TrainConfig{}.digitcaps_from_generated,
             "generated-image feed must be off by default");
    Dataset small = subset(train_ds, 24);
    TrainConfig cfg;
    cfg.arch = Arch::capsgan2;
    cfg.batch_size = 8;
    cfg.seed = 33;
    Trainer tr(cfg);
    auto batches = make_batches(small.count(), cfg.batch_size, cfg.seed, 0);
    for (auto& idx : batches) {
        tr.train_step(gather_images(small, idx));
        c.expect(tr.last_feed_source() == DigitcapsSource::real_images,
                 "default run fed generated-image capsules");
    }
    cfg.digitcaps_from_generated = true;  // the explicit experimental switch
    Trainer tr2(cfg);
    tr2.train_step(gather_images(small, batches[0]));
    c.expect(tr2.last_feed_source() == DigitcapsSource::generated_images,
             "experimental flag did not switch the feed source");
    report("criterion-6 capsule-feed-policy", c.ok,
           c.ok ? "real-image feed on every default step; generated feed only via the flag"
                : c.first_failure);
}

// ---------------------------------------------------------------------------
// criterion 7: score analytics
// ---------------------------------------------------------------------------

void criterion_score_analytics() {
    Check c;
    {
        Tensor probs = Tensor::full({40, 10}, 0.1f);
        ScoreReport r = inception_score(probs, 4);
        c.expect(std::abs(r.mean - 1.0) <= 1e-6, "uniform rows scored " + std::to_string(r.mean));
    }
    {
        std::vector<float> v(static_cast<size_t>(100 * 10), 0.0f);
        for (int64_t r = 0; r < 100; ++r) v[static_cast<size_t>(r * 10 + (r % 10))] = 1.0f;
        ScoreReport r = inception_score(Tensor::from_data({100, 10}, std::move(v)), 1);
        c.expect(std::abs(r.mean - 10.0) <= 1e-6,
                 "balanced one-hot rows scored " + std::to_string(r.mean));
    }
    {
        Tensor probs = Tensor::from_data({2, 2}, {0.9f, 0.1f, 0.1f, 0.9f});
        ScoreReport r = inception_score(probs, 1);
        double p00 = probs.data()[0], p01 = probs.data()[1];
        double p10 = probs.data()[2], p11 = probs.data()[3];
        double m0 = (p00 + p10) / 2.0, m1 = (p01 + p11) / 2.0;
        double want = std::exp((p00 * std::log(p00 / m0) + p01 * std::log(p01 / m1) +
                                p10 * std::log(p10 / m0) + p11 * std::log(p11 / m1)) /
                               2.0);
        c.expect(std::abs(r.mean - want) <= 1e-6, "two-row case scored " + std::to_string(r.mean));
    }
    {
        Rng rng(500);
        for (int trial = 0; trial < 20; ++trial) {
            int64_t n = 30, k = 10;
            std::vector<float> v(static_cast<size_t>(n * k));
            for (int64_t r = 0; r < n; ++r) {
                float s = 0.0f;
                for (int64_t col = 0; col < k; ++col) {
                    float x = rng.uniform(0.01f, 1.0f);
                    v[static_cast<size_t>(r * k + col)] = x;
                    s += x;
                }
                for (int64_t col = 0; col < k; ++col) v[static_cast<size_t>(r * k + col)] /= s;
            }
            ScoreReport r = inception_score(Tensor::from_data({n, k}, std::move(v)), 3);
            c.expect(r.mean >= 1.0 - 1e-6 && r.mean <= 10.0 + 1e-6,
                     "score " + std::to_string(r.mean) + " escaped [1, K]");
        }
    }
    report("criterion-7 score-analytics", c.ok,
           c.ok ? "uniform=1, balanced one-hot=K, derived case, bounds" : c.first_failure);
}

// ---------------------------------------------------------------------------
// criterion 8 (reported, non-binding): cross-architecture comparison
// ---------------------------------------------------------------------------

void criterion_exploratory(const Dataset& train_ds, SurrogateScorer& scorer) {
    Dataset ds = subset(train_ds, 600);
    std::ostringstream table;
    table << "desk-scale scores (600 images, 1 epoch, batch 50, shared seed/scorer): ";
    for (Arch arch : {Arch::dcgan, Arch::capsgan1, Arch::capsgan2, Arch::capsgan3}) {
        TrainConfig cfg;
        cfg.arch = arch;
        cfg.epochs = 1;
        cfg.batch_size = 50;
        cfg.seed = 2026;
        Trainer tr(cfg);
        tr.train(ds);
        ScoreReport r = score_samples(tr.model(), scorer, 500, 5, 909,
                                      arch == Arch::capsgan2 ? &ds : nullptr);
        table << arch_name(arch) << "=" << std::fixed << std::setprecision(3) << r.mean << " ";
    }
    table << "| full-scale expectation: dcgan <= capsgan1 <= capsgan2 <= capsgan3";
    report("criterion-8 exploratory-comparison", true, table.str(), false);
}

// ---------------------------------------------------------------------------
// criterion 9: file formats
// ---------------------------------------------------------------------------

void criterion_io() {
    Check c;
    fs::path dir = art_dir() / "io";
    fs::create_directories(dir);

    {  // full-size IDX header parse plus an independent byte-level probe
        DigitsDataset big = generate_digits(60000, 0x31337);
        write_digits_idx(big, (dir / "big").string());
        Dataset ds = load_idx((dir / "big-images.idx").string(), (dir / "big-labels.idx").string());
        c.expect(ds.count() == 60000, "expected 60000 images");
        c.expect(ds.images.shape() == Shape{60000, 1, 28, 28}, "bad image tensor shape");

        std::ifstream raw(dir / "big-images.idx", std::ios::binary);
        raw.seekg(16);
        char first_pixel = 0;
        raw.read(&first_pixel, 1);
        c.expect(ds.images.data()[0] == normalize_pixel(static_cast<uint8_t>(first_pixel)),
                 "first pixel does not match the raw byte");
        std::ifstream lraw(dir / "big-labels.idx", std::ios::binary);
        lraw.seekg(8);
        char first_label = 0;
        lraw.read(&first_label, 1);
        c.expect(ds.labels[0] == first_label, "first label does not match the raw byte");
    }
    {  // five malformed classes, each with its own kind
        std::vector<uint8_t> px(2 * 28 * 28, 9);
        write_idx_images((dir / "ok.idx").string(), px, 2);
        write_idx_labels((dir / "ok-labels.idx").string(), {1, 2});
        auto expect_kind = [&](DataFormatError::Kind want, const std::string& what,
                               auto&& thunk) {
            try {
                thunk();
                c.expect(false, what + ": no error raised");
            } catch (const DataFormatError& e) {
                c.expect(e.kind == want, what + ": wrong error kind");
            }
        };
        auto bytes = slurp(dir / "ok.idx");
        bytes[3] = 0x55;
        std::ofstream(dir / "m1.idx", std::ios::binary)
            .write(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        expect_kind(DataFormatError::Kind::bad_magic, "bad image magic",
                    [&] { load_idx((dir / "m1.idx").string()); });

        auto lbytes = slurp(dir / "ok-labels.idx");
        lbytes[3] = 0x55;
        std::ofstream(dir / "m2.idx", std::ios::binary)
            .write(reinterpret_cast<char*>(lbytes.data()),
                   static_cast<std::streamsize>(lbytes.size()));
        expect_kind(DataFormatError::Kind::bad_magic, "bad label magic",
                    [&] { load_idx((dir / "ok.idx").string(), (dir / "m2.idx").string()); });

        auto tbytes = slurp(dir / "ok.idx");
        tbytes.resize(tbytes.size() - 50);
        std::ofstream(dir / "m3.idx", std::ios::binary)
            .write(reinterpret_cast<char*>(tbytes.data()),
                   static_cast<std::streamsize>(tbytes.size()));
        expect_kind(DataFormatError::Kind::truncated, "truncated payload",
                    [&] { load_idx((dir / "m3.idx").string()); });

        std::vector<uint8_t> odd(2 * 27 * 27, 1);
        write_idx_images((dir / "m4.idx").string(), odd, 2, 27, 27);
        expect_kind(DataFormatError::Kind::bad_dims, "wrong dimensions",
                    [&] { load_idx((dir / "m4.idx").string()); });

        write_idx_labels((dir / "m5.idx").string(), {1, 2, 3});
        expect_kind(DataFormatError::Kind::count_mismatch, "count mismatch",
                    [&] { load_idx((dir / "ok.idx").string(), (dir / "m5.idx").string()); });
    }
    {  // checkpoint round trip through a trained model
        fs::path src = art_dir() / "det_a" / "ckpt-final";
        if (fs::exists(src)) {
            Checkpoint ckpt = load_checkpoint(src.string());
            fs::path dst = dir / "resaved.ckpt";
            save_checkpoint(ckpt, dst.string());
            c.expect(slurp(src) == slurp(dst), "checkpoint re-save changed bytes");
        } else {
            c.expect(false, "determinism run checkpoint missing");
        }
    }
    {  // PGM grids re-parse losslessly
        Rng rng(600);
        Tensor samples = randu({64, 1, 28, 28}, rng, -1, 1);
        fs::path p = dir / "grid.pgm";
        write_image_grid(samples, 8, 8, p.string());
        PgmImage img = read_pgm(p.string());
        c.expect(img.width == 238 && img.height == 238, "grid geometry off");
        bool exact = true;
        for (int64_t i = 0; i < 64 && exact; ++i) {
            int64_t gy = i / 8, gx = i % 8;
            for (int64_t y = 0; y < 28 && exact; ++y)
                for (int64_t x = 0; x < 28; ++x) {
                    uint8_t want = denormalize_pixel(samples.data()[(i * 28 + y) * 28 + x]);
                    if (img.pixels[static_cast<size_t>((gy * 30 + y) * 238 + gx * 30 + x)] !=
                        want) {
                        exact = false;
                        break;
                    }
                }
        }
        c.expect(exact, "grid tiles did not re-parse exactly");
    }
    report("criterion-9 file-formats", c.ok,
           c.ok ? "IDX 60000x28x28 + five rejection classes, checkpoint bytes, PGM tiles"
                : c.first_failure);
}

}  // namespace

int main() {
    auto t_suite = std::chrono::steady_clock::now();
    std::printf("acceptance suite starting\n");

    Dataset train_ds = digits_to_dataset(generate_digits(8000, 0xD16175));

    criterion_gradients();
    criterion_routing();
    criterion_shapes();
    criterion_determinism(train_ds);

    // the surrogate scorer backs criteria 5 and 8; its accuracy floor is
    // asserted as part of criterion 5
    std::unique_ptr<ScorerTrainResult> scorer;
    try {
        ScorerTrainConfig scfg;
        scfg.epochs = 4;
        scfg.seed = 99;
        scfg.accuracy_floor = 0.97f;
        scorer = std::make_unique<ScorerTrainResult>(train_surrogate_scorer(train_ds, scfg));
        std::printf("      surrogate scorer held-out accuracy %.4f (floor 0.97)\n",
                    static_cast<double>(scorer->accuracy));
    } catch (const TrainingFloorError& e) {
        report("criterion-5 desk-scale-learning", false,
               std::string("surrogate scorer floor unmet: ") + e.what());
    }

    if (scorer) {
        criterion_desk_scale(train_ds, scorer->scorer);
    }
    criterion_feed_policy(train_ds);
    criterion_score_analytics();
    if (scorer) {
        criterion_exploratory(train_ds, scorer->scorer);
    } else {
        report("criterion-8 exploratory-comparison", true, "skipped: no scorer", false);
    }
    criterion_io();

    int failures = 0;
    for (const auto& r : g_results)
        if (r.binding && !r.pass) ++failures;
    std::printf("acceptance suite finished in %.0fs: %d binding failure(s)\n",
                elapsed_s(t_suite), failures);
    return failures == 0 ? 0 : 1;
}
