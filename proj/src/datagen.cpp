#include "capsgan/datagen.hpp"

#include <algorithm>
#include <cmath>

#include "capsgan/data_io.hpp"

namespace capsgan {

namespace {

struct Pt {
    float x, y;
};
using Stroke = std::vector<Pt>;

Stroke line(float x0, float y0, float x1, float y1) { return {{x0, y0}, {x1, y1}}; }

Stroke arc(float cx, float cy, float rx, float ry, float a0, float a1, int n = 20) {
    Stroke s;
    s.reserve(static_cast<size_t>(n) + 1);
    for (int i = 0; i <= n; ++i) {
        float t = a0 + (a1 - a0) * static_cast<float>(i) / static_cast<float>(n);
        s.push_back({cx + rx * std::cos(t), cy + ry * std::sin(t)});
    }
    return s;
}

Stroke bezier(Pt p0, Pt c, Pt p1, int n = 16) {
    Stroke s;
    s.reserve(static_cast<size_t>(n) + 1);
    for (int i = 0; i <= n; ++i) {
        float t = static_cast<float>(i) / static_cast<float>(n);
        float u = 1.0f - t;
        s.push_back({u * u * p0.x + 2 * u * t * c.x + t * t * p1.x,
                     u * u * p0.y + 2 * u * t * c.y + t * t * p1.y});
    }
    return s;
}

constexpr float kPi = 3.14159265358979f;

// Skeletons on the unit square, y pointing down.
std::vector<Stroke> digit_skeleton(int digit) {
    switch (digit) {
        case 0:
            return {arc(0.50f, 0.50f, 0.22f, 0.30f, 0.0f, 2.0f * kPi, 28)};
        case 1:
            return {line(0.50f, 0.18f, 0.50f, 0.82f), line(0.38f, 0.30f, 0.50f, 0.18f)};
        case 2:
            return {arc(0.50f, 0.34f, 0.20f, 0.17f, 0.92f * kPi, 2.05f * kPi, 18),
                    line(0.69f, 0.40f, 0.29f, 0.82f), line(0.29f, 0.82f, 0.73f, 0.82f)};
        case 3:
            return {arc(0.48f, 0.33f, 0.17f, 0.16f, -0.75f * kPi, 0.5f * kPi, 18),
                    arc(0.48f, 0.66f, 0.20f, 0.18f, -0.5f * kPi, 0.8f * kPi, 18)};
        case 4:
            return {line(0.58f, 0.15f, 0.24f, 0.60f), line(0.24f, 0.60f, 0.80f, 0.60f),
                    line(0.58f, 0.15f, 0.58f, 0.85f)};
        case 5:
            return {line(0.70f, 0.16f, 0.31f, 0.16f), line(0.31f, 0.16f, 0.29f, 0.46f),
                    arc(0.46f, 0.63f, 0.21f, 0.20f, -0.55f * kPi, 0.78f * kPi, 20)};
        case 6:
            return {bezier({0.64f, 0.14f}, {0.38f, 0.22f}, {0.32f, 0.52f}),
                    arc(0.49f, 0.63f, 0.19f, 0.20f, 0.0f, 2.0f * kPi, 24)};
        case 7:
            return {line(0.23f, 0.17f, 0.76f, 0.17f), line(0.76f, 0.17f, 0.40f, 0.85f)};
        case 8:
            return {arc(0.50f, 0.32f, 0.16f, 0.15f, 0.0f, 2.0f * kPi, 22),
                    arc(0.50f, 0.66f, 0.20f, 0.19f, 0.0f, 2.0f * kPi, 24)};
        case 9:
            return {arc(0.51f, 0.34f, 0.17f, 0.16f, 0.0f, 2.0f * kPi, 22),
                    bezier({0.68f, 0.36f}, {0.66f, 0.64f}, {0.52f, 0.84f})};
        default:
            throw UsageError("digit class must be 0..9");
    }
}

float dist_to_segment(float px, float py, Pt a, Pt b) {
    float vx = b.x - a.x, vy = b.y - a.y;
    float wx = px - a.x, wy = py - a.y;
    float vv = vx * vx + vy * vy;
    float t = vv > 0.0f ? std::clamp((wx * vx + wy * vy) / vv, 0.0f, 1.0f) : 0.0f;
    float dx = wx - t * vx, dy = wy - t * vy;
    return std::sqrt(dx * dx + dy * dy);
}

}  // namespace

void render_digit(int digit, Rng& rng, uint8_t* out) {
    auto strokes = digit_skeleton(digit);

    // per-sample pose: scale, rotation, shear, translation; per-point jitter
    float sx = rng.uniform(0.82f, 1.05f), sy = rng.uniform(0.82f, 1.05f);
    float rot = rng.uniform(-0.18f, 0.18f);
    float shear = rng.uniform(-0.14f, 0.14f);
    float tx = rng.uniform(-1.6f, 1.6f), ty = rng.uniform(-1.6f, 1.6f);
    float width = rng.uniform(1.7f, 2.6f);
    float peak = rng.uniform(0.88f, 1.0f);
    float cr = std::cos(rot), sr = std::sin(rot);

    for (auto& stroke : strokes)
        for (auto& p : stroke) {
            float jx = rng.uniform(-0.025f, 0.025f), jy = rng.uniform(-0.025f, 0.025f);
            float ux = (p.x - 0.5f + jx) * 28.0f * sx;
            float uy = (p.y - 0.5f + jy) * 28.0f * sy;
            float rx = cr * ux - sr * uy + shear * uy;
            float ry = sr * ux + cr * uy;
            p = {rx + 14.0f + tx, ry + 14.0f + ty};
        }

    float acc[28 * 28] = {0.0f};
    const float aa = 0.8f;
    for (const auto& stroke : strokes) {
        for (size_t i = 0; i + 1 < stroke.size(); ++i) {
            Pt a = stroke[i], b = stroke[i + 1];
            int x0 = std::max(0, static_cast<int>(std::floor(std::min(a.x, b.x) - width - aa)));
            int x1 = std::min(27, static_cast<int>(std::ceil(std::max(a.x, b.x) + width + aa)));
            int y0 = std::max(0, static_cast<int>(std::floor(std::min(a.y, b.y) - width - aa)));
            int y1 = std::min(27, static_cast<int>(std::ceil(std::max(a.y, b.y) + width + aa)));
            for (int y = y0; y <= y1; ++y)
                for (int x = x0; x <= x1; ++x) {
                    float d = dist_to_segment(static_cast<float>(x) + 0.5f,
                                              static_cast<float>(y) + 0.5f, a, b);
                    float cov = std::clamp((width + aa - d) / (2.0f * aa), 0.0f, 1.0f);
                    float& cell = acc[y * 28 + x];
                    cell = std::max(cell, cov);
                }
        }
    }
    for (int i = 0; i < 28 * 28; ++i)
        out[i] = static_cast<uint8_t>(std::clamp(acc[i] * peak * 255.0f, 0.0f, 255.0f));
}

DigitsDataset generate_digits(int64_t count, uint64_t seed) {
    if (count < 1) throw UsageError("generate_digits: count must be >= 1");
    DigitsDataset ds;
    ds.count = count;
    ds.pixels.resize(static_cast<size_t>(count) * 28 * 28);
    ds.labels.resize(static_cast<size_t>(count));
    Rng rng(mix_seed(seed, 0x64696769));
    for (int64_t i = 0; i < count; ++i) {
        int digit = static_cast<int>(rng.uniform_int(10));
        ds.labels[static_cast<size_t>(i)] = static_cast<uint8_t>(digit);
        render_digit(digit, rng, ds.pixels.data() + i * 28 * 28);
    }
    return ds;
}

void write_digits_idx(const DigitsDataset& ds, const std::string& prefix) {
    write_idx_images(prefix + "-images.idx", ds.pixels, ds.count);
    write_idx_labels(prefix + "-labels.idx", ds.labels);
}

Dataset digits_to_dataset(const DigitsDataset& ds) {
    Dataset out;
    std::vector<float> values(ds.pixels.size());
    for (size_t i = 0; i < values.size(); ++i) values[i] = normalize_pixel(ds.pixels[i]);
    out.images = Tensor::from_data({ds.count, 1, 28, 28}, std::move(values));
    out.labels.assign(ds.labels.begin(), ds.labels.end());
    return out;
}

}  // namespace capsgan
