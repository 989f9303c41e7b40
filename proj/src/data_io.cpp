#include "capsgan/data_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

static_assert(std::endian::native == std::endian::little,
              "checkpoint and grid writers assume a little-endian host");

namespace capsgan {

namespace {

constexpr uint32_t kIdxImagesMagic = 0x00000803;
constexpr uint32_t kIdxLabelsMagic = 0x00000801;
constexpr char kCkptMagic[8] = {'C', 'G', 'A', 'N', 'C', 'K', 'P', 'T'};

uint32_t read_be_u32(const uint8_t* p) {
    return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
           (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

void write_be_u32(std::ostream& os, uint32_t v) {
    uint8_t b[4] = {static_cast<uint8_t>(v >> 24), static_cast<uint8_t>(v >> 16),
                    static_cast<uint8_t>(v >> 8), static_cast<uint8_t>(v)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::vector<uint8_t> read_file(const std::string& path, DataFormatError::Kind kind) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataFormatError(kind, "cannot open file: " + path);
    in.seekg(0, std::ios::end);
    auto size = in.tellg();
    in.seekg(0, std::ios::beg);
    std::vector<uint8_t> buf(static_cast<size_t>(size));
    if (size > 0) in.read(reinterpret_cast<char*>(buf.data()), size);
    if (!in) throw DataFormatError(kind, "cannot read file: " + path);
    return buf;
}

}  // namespace

float normalize_pixel(uint8_t p) { return static_cast<float>(p) / 127.5f - 1.0f; }

uint8_t denormalize_pixel(float x) {
    float v = std::round((x + 1.0f) * 127.5f);
    return static_cast<uint8_t>(std::clamp(v, 0.0f, 255.0f));
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    std::vector<uint8_t> buf = read_file(images_path, DataFormatError::Kind::io);
    if (buf.size() < 16)
        throw DataFormatError(DataFormatError::Kind::truncated,
                              "image file shorter than its header: " + images_path);
    if (read_be_u32(buf.data()) != kIdxImagesMagic)
        throw DataFormatError(DataFormatError::Kind::bad_magic,
                              "bad image magic in " + images_path);
    int64_t n = read_be_u32(buf.data() + 4);
    int64_t rows = read_be_u32(buf.data() + 8);
    int64_t cols = read_be_u32(buf.data() + 12);
    if (rows != 28 || cols != 28)
        throw DataFormatError(DataFormatError::Kind::bad_dims,
                              "expected 28x28 images, got " + std::to_string(rows) + "x" +
                                  std::to_string(cols));
    if (n < 1) throw DataFormatError(DataFormatError::Kind::bad_dims, "empty image file");
    int64_t expected = 16 + n * rows * cols;
    if (static_cast<int64_t>(buf.size()) < expected)
        throw DataFormatError(DataFormatError::Kind::truncated,
                              "image payload truncated: have " + std::to_string(buf.size()) +
                                  " bytes, need " + std::to_string(expected));

    std::vector<float> values(static_cast<size_t>(n * rows * cols));
    for (size_t i = 0; i < values.size(); ++i) values[i] = normalize_pixel(buf[16 + i]);
    Dataset ds;
    ds.images = Tensor::from_data({n, 1, rows, cols}, std::move(values));

    if (!labels_path.empty()) {
        std::vector<uint8_t> lbuf = read_file(labels_path, DataFormatError::Kind::io);
        if (lbuf.size() < 8)
            throw DataFormatError(DataFormatError::Kind::truncated,
                                  "label file shorter than its header: " + labels_path);
        if (read_be_u32(lbuf.data()) != kIdxLabelsMagic)
            throw DataFormatError(DataFormatError::Kind::bad_magic,
                                  "bad label magic in " + labels_path);
        int64_t ln = read_be_u32(lbuf.data() + 4);
        if (ln != n)
            throw DataFormatError(DataFormatError::Kind::count_mismatch,
                                  "label count " + std::to_string(ln) + " != image count " +
                                      std::to_string(n));
        if (static_cast<int64_t>(lbuf.size()) < 8 + ln)
            throw DataFormatError(DataFormatError::Kind::truncated, "label payload truncated");
        ds.labels.resize(static_cast<size_t>(ln));
        for (int64_t i = 0; i < ln; ++i) {
            uint8_t v = lbuf[static_cast<size_t>(8 + i)];
            if (v > 9)
                throw DataFormatError(DataFormatError::Kind::bad_values,
                                      "label value " + std::to_string(v) + " outside 0..9");
            ds.labels[static_cast<size_t>(i)] = v;
        }
    }
    return ds;
}

void write_idx_images(const std::string& path, const std::vector<uint8_t>& pixels, int64_t count,
                      int64_t rows, int64_t cols) {
    if (static_cast<int64_t>(pixels.size()) != count * rows * cols)
        throw UsageError("write_idx_images: pixel buffer does not match count*rows*cols");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataFormatError(DataFormatError::Kind::io, "cannot write " + path);
    write_be_u32(out, kIdxImagesMagic);
    write_be_u32(out, static_cast<uint32_t>(count));
    write_be_u32(out, static_cast<uint32_t>(rows));
    write_be_u32(out, static_cast<uint32_t>(cols));
    out.write(reinterpret_cast<const char*>(pixels.data()),
              static_cast<std::streamsize>(pixels.size()));
    if (!out) throw DataFormatError(DataFormatError::Kind::io, "write failed: " + path);
}

void write_idx_labels(const std::string& path, const std::vector<uint8_t>& labels) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataFormatError(DataFormatError::Kind::io, "cannot write " + path);
    write_be_u32(out, kIdxLabelsMagic);
    write_be_u32(out, static_cast<uint32_t>(labels.size()));
    out.write(reinterpret_cast<const char*>(labels.data()),
              static_cast<std::streamsize>(labels.size()));
    if (!out) throw DataFormatError(DataFormatError::Kind::io, "write failed: " + path);
}

std::vector<std::vector<int64_t>> make_batches(int64_t count, int64_t batch_size, uint64_t seed,
                                               int64_t epoch) {
    if (batch_size < 1) throw UsageError("make_batches: batch size must be >= 1");
    std::vector<int64_t> order(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) order[static_cast<size_t>(i)] = i;
    Rng rng(mix_seed(seed, 0xB17C4E5 + static_cast<uint64_t>(epoch)));
    for (int64_t i = count - 1; i > 0; --i) {
        int64_t j = rng.uniform_int(i + 1);
        std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }
    std::vector<std::vector<int64_t>> batches;
    for (int64_t start = 0; start + batch_size <= count; start += batch_size)
        batches.emplace_back(order.begin() + start, order.begin() + start + batch_size);
    return batches;
}

Tensor gather_images(const Dataset& ds, const std::vector<int64_t>& indices) {
    int64_t n = static_cast<int64_t>(indices.size());
    int64_t px = ds.images.numel() / ds.images.dim(0);
    std::vector<float> out(static_cast<size_t>(n * px));
    for (int64_t i = 0; i < n; ++i)
        std::memcpy(out.data() + i * px, ds.images.data().data() + indices[static_cast<size_t>(i)] * px,
                    static_cast<size_t>(px) * sizeof(float));
    return Tensor::from_data({n, 1, ds.images.dim(2), ds.images.dim(3)}, std::move(out));
}

std::vector<int> gather_labels(const Dataset& ds, const std::vector<int64_t>& indices) {
    std::vector<int> out(indices.size());
    for (size_t i = 0; i < indices.size(); ++i)
        out[i] = ds.labels[static_cast<size_t>(indices[i])];
    return out;
}

// ---------------------------------------------------------------------------
// PGM grids
// ---------------------------------------------------------------------------

void write_image_grid(const Tensor& samples, int rows, int cols, const std::string& path) {
    if (samples.rank() != 4 || samples.dim(1) != 1)
        throw UsageError("write_image_grid: expects samples [n,1,h,w]");
    int64_t n = samples.dim(0), th = samples.dim(2), tw = samples.dim(3);
    if (n > static_cast<int64_t>(rows) * cols)
        throw UsageError("write_image_grid: grid too small for sample count");
    const int64_t sep = 2;
    int64_t width = cols * tw + (cols - 1) * sep;
    int64_t height = rows * th + (rows - 1) * sep;
    std::vector<uint8_t> canvas(static_cast<size_t>(width * height), 0);
    for (int64_t i = 0; i < n; ++i) {
        int64_t gy = i / cols, gx = i % cols;
        int64_t oy = gy * (th + sep), ox = gx * (tw + sep);
        const float* src = samples.data().data() + i * th * tw;
        for (int64_t y = 0; y < th; ++y)
            for (int64_t x = 0; x < tw; ++x)
                canvas[static_cast<size_t>((oy + y) * width + ox + x)] =
                    denormalize_pixel(src[y * tw + x]);
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataFormatError(DataFormatError::Kind::io, "cannot write " + path);
    out << "P5\n" << width << " " << height << "\n255\n";
    out.write(reinterpret_cast<const char*>(canvas.data()),
              static_cast<std::streamsize>(canvas.size()));
    if (!out) throw DataFormatError(DataFormatError::Kind::io, "write failed: " + path);
}

PgmImage read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataFormatError(DataFormatError::Kind::io, "cannot open " + path);
    std::string magic;
    in >> magic;
    if (magic != "P5")
        throw DataFormatError(DataFormatError::Kind::bad_magic, "not a binary PGM: " + path);
    int64_t w = 0, h = 0, maxval = 0;
    in >> w >> h >> maxval;
    if (!in || w < 1 || h < 1 || maxval != 255)
        throw DataFormatError(DataFormatError::Kind::bad_dims, "unsupported PGM header");
    in.get();  // single whitespace after maxval
    PgmImage img;
    img.width = w;
    img.height = h;
    img.pixels.resize(static_cast<size_t>(w * h));
    in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(w * h));
    if (!in) throw DataFormatError(DataFormatError::Kind::truncated, "PGM payload truncated");
    return img;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

void put_u32(std::string& out, uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::string& out, uint64_t v) { out.append(reinterpret_cast<const char*>(&v), 8); }

void put_string(std::string& out, const std::string& s) {
    put_u32(out, static_cast<uint32_t>(s.size()));
    out.append(s);
}

void append_tensor_section(std::string& out, const NamedTensors& section) {
    put_u32(out, static_cast<uint32_t>(section.size()));
    for (const auto& [name, t] : section) {
        put_string(out, name);
        put_u32(out, static_cast<uint32_t>(t.shape().size()));
        for (int64_t d : t.shape()) put_u64(out, static_cast<uint64_t>(d));
    }
    for (const auto& [name, t] : section) {
        (void)name;
        out.append(reinterpret_cast<const char*>(t.data().data()),
                   t.data().size() * sizeof(float));
    }
}

struct Reader {
    const uint8_t* p;
    size_t left;
    void need(size_t n) {
        if (left < n)
            throw CheckpointError(CheckpointError::Kind::size_mismatch,
                                  "checkpoint ends early");
    }
    uint32_t u32() {
        need(4);
        uint32_t v;
        std::memcpy(&v, p, 4);
        p += 4;
        left -= 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v;
        std::memcpy(&v, p, 8);
        p += 8;
        left -= 8;
        return v;
    }
    std::string str() {
        uint32_t n = u32();
        need(n);
        std::string s(reinterpret_cast<const char*>(p), n);
        p += n;
        left -= n;
        return s;
    }
};

NamedTensors read_tensor_section(Reader& r) {
    uint32_t count = r.u32();
    std::vector<std::pair<std::string, Shape>> manifest;
    manifest.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        std::string name = r.str();
        uint32_t rank = r.u32();
        if (rank > 8)
            throw CheckpointError(CheckpointError::Kind::bad_layout,
                                  "implausible tensor rank in checkpoint");
        Shape shape(rank);
        for (uint32_t d = 0; d < rank; ++d) shape[d] = static_cast<int64_t>(r.u64());
        manifest.emplace_back(std::move(name), std::move(shape));
    }
    NamedTensors out;
    out.reserve(count);
    for (auto& [name, shape] : manifest) {
        int64_t n = shape_numel(shape);
        if (n < 1 || n > (1ll << 32))
            throw CheckpointError(CheckpointError::Kind::bad_layout,
                                  "implausible tensor size in checkpoint");
        r.need(static_cast<size_t>(n) * sizeof(float));
        std::vector<float> values(static_cast<size_t>(n));
        std::memcpy(values.data(), r.p, values.size() * sizeof(float));
        r.p += values.size() * sizeof(float);
        r.left -= values.size() * sizeof(float);
        out.emplace_back(std::move(name), Tensor::from_data(std::move(shape), std::move(values)));
    }
    return out;
}

}  // namespace

uint64_t Checkpoint::counter(const std::string& name) const {
    for (const auto& [k, v] : counters)
        if (k == name) return v;
    throw CheckpointError(CheckpointError::Kind::bad_layout, "checkpoint counter missing: " + name);
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    for (size_t i = 0; i < ckpt.tensors.size(); ++i)
        for (size_t j = i + 1; j < ckpt.tensors.size(); ++j)
            if (ckpt.tensors[i].first == ckpt.tensors[j].first)
                throw CheckpointError(CheckpointError::Kind::bad_layout,
                                      "duplicate tensor name: " + ckpt.tensors[i].first);
    std::string out;
    out.append(kCkptMagic, sizeof(kCkptMagic));
    put_u32(out, ckpt.version);
    put_string(out, ckpt.arch);
    append_tensor_section(out, ckpt.tensors);
    append_tensor_section(out, ckpt.opt_tensors);
    put_u32(out, static_cast<uint32_t>(ckpt.counters.size()));
    for (const auto& [name, value] : ckpt.counters) {
        put_string(out, name);
        put_u64(out, value);
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw CheckpointError(CheckpointError::Kind::io, "cannot write " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw CheckpointError(CheckpointError::Kind::io, "write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError(CheckpointError::Kind::io, "cannot open " + path);
    std::vector<uint8_t> buf((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
    if (buf.size() < sizeof(kCkptMagic) + 4 ||
        std::memcmp(buf.data(), kCkptMagic, sizeof(kCkptMagic)) != 0)
        throw CheckpointError(CheckpointError::Kind::bad_magic, "bad checkpoint magic: " + path);
    Reader r{buf.data() + sizeof(kCkptMagic), buf.size() - sizeof(kCkptMagic)};
    Checkpoint ckpt;
    ckpt.version = r.u32();
    if (ckpt.version != 1)
        throw CheckpointError(CheckpointError::Kind::bad_version,
                              "unsupported checkpoint version " + std::to_string(ckpt.version));
    ckpt.arch = r.str();
    ckpt.tensors = read_tensor_section(r);
    ckpt.opt_tensors = read_tensor_section(r);
    uint32_t nc = r.u32();
    for (uint32_t i = 0; i < nc; ++i) {
        std::string name = r.str();
        uint64_t value = r.u64();
        ckpt.counters.emplace_back(std::move(name), value);
    }
    if (r.left != 0)
        throw CheckpointError(CheckpointError::Kind::size_mismatch,
                              "checkpoint has trailing bytes");
    return ckpt;
}

}  // namespace capsgan
