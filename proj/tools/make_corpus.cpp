#include <phds/synth.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <string>

// Writes the deterministic training corpus. Usage:
//   make_corpus <path> [bytes] [seed]
int main(int argc, char** argv) {
    if (argc < 2) {
        std::fprintf(stderr, "usage: %s <path> [bytes] [seed]\n", argv[0]);
        return 2;
    }
    const size_t bytes = argc > 2 ? std::strtoull(argv[2], nullptr, 10) : (1u << 20);
    const uint64_t seed = argc > 3 ? std::strtoull(argv[3], nullptr, 10) : 0x5eed;
    const std::string text = phds::synth_corpus_text(bytes, seed);
    std::ofstream out(argv[1], std::ios::binary | std::ios::trunc);
    if (!out) {
        std::fprintf(stderr, "cannot open %s\n", argv[1]);
        return 1;
    }
    out.write(text.data(), std::streamsize(text.size()));
    std::printf("wrote %zu bytes to %s\n", text.size(), argv[1]);
    return 0;
}
