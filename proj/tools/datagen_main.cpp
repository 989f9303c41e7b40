#include <CLI11.hpp>
#include <cstdio>

#include "capsgan/datagen.hpp"

// Renders a deterministic labeled digit dataset as an IDX image/label pair.
int main(int argc, char** argv) {
    CLI::App app{"render a synthetic 28x28 handwritten-digit dataset (IDX pair)"};
    std::string prefix = "digits";
    int64_t count = 10000;
    uint64_t seed = 42;
    app.add_option("--out-prefix", prefix, "output prefix (<prefix>-images.idx, <prefix>-labels.idx)")
        ->capture_default_str();
    app.add_option("--count", count, "image count")->capture_default_str();
    app.add_option("--seed", seed, "rng seed")->capture_default_str();
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }
    try {
        capsgan::DigitsDataset ds = capsgan::generate_digits(count, seed);
        capsgan::write_digits_idx(ds, prefix);
        std::printf("wrote %lld images to %s-images.idx / %s-labels.idx\n",
                    static_cast<long long>(count), prefix.c_str(), prefix.c_str());
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
