#include "raremem/synthetic.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace raremem {

char token_char(uint8_t tok) {
    switch (tok) {
        case kTokenA: return 'A';
        case kTokenB: return 'B';
        default:
            if (tok >= 2 && tok <= 5) return static_cast<char>('0' + (tok - 2));
            throw std::invalid_argument("token_char: bad token id");
    }
}

uint8_t char_token(char c) {
    switch (c) {
        case 'A': return kTokenA;
        case 'B': return kTokenB;
        default:
            if (c >= '0' && c <= '3') return static_cast<uint8_t>(2 + (c - '0'));
            throw std::invalid_argument(std::string("char_token: bad token '") + c + "'");
    }
}

SyntheticTaskSpec make_task_spec(uint64_t seed, int max_len, int64_t train_count,
                                 int64_t test_count) {
    if (max_len < kDigitCount)
        throw std::invalid_argument("make_task_spec: max_len must be >= 7");
    SyntheticTaskSpec spec;
    spec.seed = seed;
    spec.max_len = max_len;
    spec.train_count = train_count;
    spec.test_count = test_count;
    spec.f.assign(kSymbolMax + 1, 0);
    Rng rng(derive_seed(seed, 0x66 /* 'f' */));
    for (int s = kSymbolMin; s <= kSymbolMax; ++s)
        spec.f[s] = static_cast<uint32_t>(rng.uniform_int(kSymbolMin, kSymbolMax));
    return spec;
}

std::array<int, kDigitCount> encode_base4(uint32_t n, int width) {
    if (width != kDigitCount) throw std::invalid_argument("encode_base4: width must be 7");
    if (n >= (1u << (2 * kDigitCount)))  // 4^7
        throw std::out_of_range("encode_base4: n out of range");
    std::array<int, kDigitCount> digits{};
    for (int i = kDigitCount - 1; i >= 0; --i) {
        digits[i] = static_cast<int>(n & 3u);
        n >>= 2;
    }
    return digits;
}

uint32_t decode_base4(const int* digits, int width) {
    uint32_t n = 0;
    for (int i = 0; i < width; ++i) {
        if (digits[i] < 0 || digits[i] > 3)
            throw std::invalid_argument("decode_base4: digit out of range");
        n = (n << 2) | static_cast<uint32_t>(digits[i]);
    }
    return n;
}

namespace {

SyntheticExample make_example(const SyntheticTaskSpec& spec, Rng& rng, int64_t forced_number) {
    SyntheticExample ex;
    const int len = static_cast<int>(rng.uniform_int(spec.digit_count, spec.max_len));
    ex.block_start = static_cast<int>(rng.uniform_int(0, len - spec.digit_count));
    ex.number = forced_number >= 0
                    ? static_cast<uint32_t>(forced_number)
                    : static_cast<uint32_t>(rng.uniform_int(kSymbolMin, kSymbolMax));

    ex.input.resize(len);
    ex.output.resize(len);
    for (int i = 0; i < len; ++i) {
        const uint8_t filler = rng.uniform_below(2) == 0 ? kTokenA : kTokenB;
        ex.input[i] = filler;
        ex.output[i] = filler;
    }
    const auto in_digits = encode_base4(ex.number);
    const auto out_digits = encode_base4(spec.apply(ex.number));
    for (int i = 0; i < spec.digit_count; ++i) {
        ex.input[ex.block_start + i] = digit_token(in_digits[i]);
        ex.output[ex.block_start + i] = digit_token(out_digits[i]);
    }
    return ex;
}

}  // namespace

std::vector<SyntheticExample> generate(const SyntheticTaskSpec& spec, int64_t count,
                                       uint64_t split_seed) {
    if (count < 1) throw std::invalid_argument("generate: count must be >= 1");
    std::vector<SyntheticExample> out;
    out.reserve(count);
    const uint64_t base = derive_seed(spec.seed, split_seed);
    for (int64_t i = 0; i < count; ++i) {
        Rng rng(derive_seed(base, static_cast<uint64_t>(i)));
        out.push_back(make_example(spec, rng, -1));
    }
    return out;
}

std::vector<SyntheticExample> generate_with_numbers(const SyntheticTaskSpec& spec,
                                                    const std::vector<uint32_t>& numbers,
                                                    uint64_t split_seed) {
    std::vector<SyntheticExample> out;
    out.reserve(numbers.size());
    const uint64_t base = derive_seed(spec.seed, split_seed);
    for (size_t i = 0; i < numbers.size(); ++i) {
        Rng rng(derive_seed(base, static_cast<uint64_t>(i)));
        out.push_back(make_example(spec, rng, numbers[i]));
    }
    return out;
}

void write_corpus(const std::string& path, const std::vector<SyntheticExample>& examples,
                  uint64_t seed, const std::string& split_name) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_corpus: cannot open " + path);
    out << "#seed=" << seed << " split=" << split_name << "\n";
    for (const SyntheticExample& ex : examples) {
        for (size_t i = 0; i < ex.input.size(); ++i) {
            if (i) out << ' ';
            out << token_char(ex.input[i]);
        }
        out << '\t';
        for (size_t i = 0; i < ex.output.size(); ++i) {
            if (i) out << ' ';
            out << token_char(ex.output[i]);
        }
        out << '\n';
    }
    if (!out) throw std::runtime_error("write_corpus: write failed for " + path);
}

namespace {

std::vector<uint8_t> parse_tokens(const std::string& text) {
    std::vector<uint8_t> tokens;
    for (char c : text) {
        if (c == ' ') continue;
        tokens.push_back(char_token(c));
    }
    return tokens;
}

}  // namespace

std::vector<SyntheticExample> read_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("read_corpus: cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line.rfind("#seed=", 0) != 0)
        throw std::runtime_error("read_corpus: missing header in " + path);

    std::vector<SyntheticExample> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const size_t tab = line.find('\t');
        if (tab == std::string::npos)
            throw std::runtime_error("read_corpus: malformed line in " + path);
        SyntheticExample ex;
        ex.input = parse_tokens(line.substr(0, tab));
        ex.output = parse_tokens(line.substr(tab + 1));
        if (ex.input.size() != ex.output.size())
            throw std::runtime_error("read_corpus: length mismatch in " + path);

        // Recover the hidden number and block position from the tokens.
        int start = -1;
        for (size_t i = 0; i < ex.input.size(); ++i) {
            if (is_digit_token(ex.input[i])) {
                start = static_cast<int>(i);
                break;
            }
        }
        if (start < 0 || start + kDigitCount > static_cast<int>(ex.input.size()))
            throw std::runtime_error("read_corpus: no digit block in " + path);
        ex.block_start = start;
        std::array<int, kDigitCount> digits{};
        for (int i = 0; i < kDigitCount; ++i) digits[i] = token_digit(ex.input[start + i]);
        ex.number = decode_base4(digits.data());
        out.push_back(std::move(ex));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Hamming baseline
// ---------------------------------------------------------------------------

namespace {

// Sequences padded with a sentinel to a fixed width: positions beyond both
// lengths compare equal, positions beyond one length mismatch, so a plain
// bytewise mismatch count reproduces the distance rule.
constexpr uint8_t kPadSentinel = 0xFF;

std::vector<uint8_t> pad_tokens(const std::vector<uint8_t>& tokens, int width) {
    std::vector<uint8_t> out(width, kPadSentinel);
    std::copy(tokens.begin(), tokens.end(), out.begin());
    return out;
}

int mismatch_count(const uint8_t* a, const uint8_t* b, int width) {
    int count = 0;
    for (int i = 0; i < width; ++i) count += a[i] != b[i];
    return count;
}

int64_t nearest_train_index(const std::vector<std::vector<uint8_t>>& padded_train,
                            const std::vector<uint8_t>& padded_query, int width) {
    int64_t best = -1;
    int best_dist = width + 1;
    for (size_t t = 0; t < padded_train.size(); ++t) {
        const int dist = mismatch_count(padded_train[t].data(), padded_query.data(), width);
        if (dist < best_dist) {
            best_dist = dist;
            best = static_cast<int64_t>(t);
        }
    }
    return best;
}

std::vector<uint8_t> transplant(const std::vector<uint8_t>& retrieved_output,
                                size_t target_len) {
    std::vector<uint8_t> out(target_len, kTokenA);
    const size_t n = std::min(target_len, retrieved_output.size());
    std::copy(retrieved_output.begin(), retrieved_output.begin() + n, out.begin());
    return out;
}

}  // namespace

std::vector<uint8_t> hamming_predict(const std::vector<SyntheticExample>& train,
                                     const std::vector<uint8_t>& input) {
    if (train.empty()) throw std::invalid_argument("hamming_predict: empty training set");
    int width = static_cast<int>(input.size());
    for (const SyntheticExample& ex : train)
        width = std::max(width, static_cast<int>(ex.input.size()));

    std::vector<std::vector<uint8_t>> padded_train;
    padded_train.reserve(train.size());
    for (const SyntheticExample& ex : train) padded_train.push_back(pad_tokens(ex.input, width));

    const int64_t best = nearest_train_index(padded_train, pad_tokens(input, width), width);
    return transplant(train[best].output, input.size());
}

double hamming_baseline(const std::vector<SyntheticExample>& train,
                        const std::vector<SyntheticExample>& test) {
    if (train.empty()) throw std::invalid_argument("hamming_baseline: empty training set");
    if (test.empty()) return 0.0;

    int width = 0;
    for (const SyntheticExample& ex : train)
        width = std::max(width, static_cast<int>(ex.input.size()));
    for (const SyntheticExample& ex : test)
        width = std::max(width, static_cast<int>(ex.input.size()));

    std::vector<std::vector<uint8_t>> padded_train;
    padded_train.reserve(train.size());
    for (const SyntheticExample& ex : train) padded_train.push_back(pad_tokens(ex.input, width));

    int64_t correct = 0;
    for (const SyntheticExample& ex : test) {
        const std::vector<uint8_t> padded_query = pad_tokens(ex.input, width);
        const int64_t best = nearest_train_index(padded_train, padded_query, width);
        const std::vector<uint8_t> predicted =
            transplant(train[best].output, ex.output.size());
        correct += predicted == ex.output;
    }
    return static_cast<double>(correct) / static_cast<double>(test.size());
}

}  // namespace raremem
