#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "raremem/rng.hpp"

namespace raremem {

// Base-4 random-function task: sequences of A/B filler with one embedded
// 7-digit base-4 number n; the output copies the filler and replaces the
// digit block with f(n) for a fixed random f over S = {2, ..., 16000}.

inline constexpr int kSymbolMin = 2;
inline constexpr int kSymbolMax = 16000;
inline constexpr int kDigitCount = 7;

// Token ids: A, B, then digits 0..3.
inline constexpr uint8_t kTokenA = 0;
inline constexpr uint8_t kTokenB = 1;
inline constexpr int kVocabSize = 6;

inline uint8_t digit_token(int digit) { return static_cast<uint8_t>(2 + digit); }
inline bool is_digit_token(uint8_t tok) { return tok >= 2; }
inline int token_digit(uint8_t tok) { return tok - 2; }

char token_char(uint8_t tok);
uint8_t char_token(char c);

struct SyntheticTaskSpec {
    uint64_t seed = 0;
    int max_len = 40;
    int digit_count = kDigitCount;
    int64_t train_count = 40000;
    int64_t test_count = 10000;
    std::vector<uint32_t> f;  // size kSymbolMax + 1; entries 0 and 1 unused

    uint32_t apply(uint32_t n) const { return f[n]; }
};

// Samples f once from the task seed; f is fixed for every split thereafter.
SyntheticTaskSpec make_task_spec(uint64_t seed, int max_len = 40,
                                 int64_t train_count = 40000, int64_t test_count = 10000);

struct SyntheticExample {
    std::vector<uint8_t> input;
    std::vector<uint8_t> output;
    uint32_t number = 0;
    int block_start = 0;
};

// Zero-padded big-endian base-4 digits, e.g. 1982 -> 0132332.
std::array<int, kDigitCount> encode_base4(uint32_t n, int width = kDigitCount);
uint32_t decode_base4(const int* digits, int width = kDigitCount);

// Deterministic pseudorandom corpus: per example, length uniform in
// [digit_count, max_len], block position uniform, filler i.i.d. A/B, number
// uniform over S. Each example draws from its own substream, so generation
// order does not matter.
std::vector<SyntheticExample> generate(const SyntheticTaskSpec& spec, int64_t count,
                                       uint64_t split_seed);

// Same pipeline with the hidden numbers imposed (used for context/eval pairs
// that share numbers but not surroundings).
std::vector<SyntheticExample> generate_with_numbers(const SyntheticTaskSpec& spec,
                                                    const std::vector<uint32_t>& numbers,
                                                    uint64_t split_seed);

// Line-oriented corpus files: header "#seed=<u64> split=<name>", then one
// example per line as "input_tokens<TAB>output_tokens", tokens space-separated.
void write_corpus(const std::string& path, const std::vector<SyntheticExample>& examples,
                  uint64_t seed, const std::string& split_name);
std::vector<SyntheticExample> read_corpus(const std::string& path);

// Nearest neighbor by token Hamming distance (length mismatches count as
// mismatches, ties go to the earliest training example). Returns the fraction
// of test outputs reproduced exactly.
double hamming_baseline(const std::vector<SyntheticExample>& train,
                        const std::vector<SyntheticExample>& test);

// Single-query form of the baseline, exposed for direct simulation in tests.
std::vector<uint8_t> hamming_predict(const std::vector<SyntheticExample>& train,
                                     const std::vector<uint8_t>& input);

}  // namespace raremem
