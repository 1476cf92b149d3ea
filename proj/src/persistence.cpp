#include "raremem/persistence.hpp"

#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>

namespace raremem {

namespace {

constexpr char kMagic[4] = {'L', 'T', 'R', 'M'};

void write_bytes(std::ostream& out, const void* data, size_t n) {
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

void read_bytes(std::istream& in, void* data, size_t n, const char* what) {
    in.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(in.gcount()) != n)
        throw LoadError(LoadErrorCode::Truncated,
                        std::string("snapshot truncated while reading ") + what);
}

void write_u16(std::ostream& out, uint16_t v) {
    const uint8_t b[2] = {static_cast<uint8_t>(v), static_cast<uint8_t>(v >> 8)};
    write_bytes(out, b, 2);
}

void write_u32(std::ostream& out, uint32_t v) {
    uint8_t b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<uint8_t>(v >> (8 * i));
    write_bytes(out, b, 4);
}

void write_u64(std::ostream& out, uint64_t v) {
    uint8_t b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<uint8_t>(v >> (8 * i));
    write_bytes(out, b, 8);
}

void write_f32(std::ostream& out, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    write_u32(out, bits);
}

void write_f64(std::ostream& out, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    write_u64(out, bits);
}

uint16_t read_u16(std::istream& in, const char* what) {
    uint8_t b[2];
    read_bytes(in, b, 2, what);
    return static_cast<uint16_t>(b[0] | (uint16_t{b[1]} << 8));
}

uint32_t read_u32(std::istream& in, const char* what) {
    uint8_t b[4];
    read_bytes(in, b, 4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t{b[i]} << (8 * i);
    return v;
}

uint64_t read_u64(std::istream& in, const char* what) {
    uint8_t b[8];
    read_bytes(in, b, 8, what);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t{b[i]} << (8 * i);
    return v;
}

float read_f32(std::istream& in, const char* what) {
    const uint32_t bits = read_u32(in, what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

double read_f64(std::istream& in, const char* what) {
    const uint64_t bits = read_u64(in, what);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

void write_header(std::ostream& out, PayloadKind kind) {
    write_bytes(out, kMagic, 4);
    write_u16(out, kSnapshotVersion);
    const uint8_t k = static_cast<uint8_t>(kind);
    write_bytes(out, &k, 1);
}

PayloadKind read_header(std::istream& in, PayloadKind expected) {
    char magic[4];
    read_bytes(in, magic, 4, "magic");
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw LoadError(LoadErrorCode::BadMagic, "snapshot magic mismatch");
    const uint16_t version = read_u16(in, "version");
    if (version != kSnapshotVersion)
        throw LoadError(LoadErrorCode::BadVersion,
                        "unsupported snapshot version " + std::to_string(version));
    uint8_t kind = 0;
    read_bytes(in, &kind, 1, "payload kind");
    if (kind < 1 || kind > 4)
        throw LoadError(LoadErrorCode::BadKind,
                        "unknown payload kind " + std::to_string(kind));
    if (static_cast<PayloadKind>(kind) != expected)
        throw LoadError(LoadErrorCode::BadKind, "unexpected payload kind");
    return static_cast<PayloadKind>(kind);
}

void write_matrix_f32(std::ostream& out, const RowMatrixD& m) {
    for (int64_t i = 0; i < m.rows(); ++i)
        for (int64_t j = 0; j < m.cols(); ++j)
            write_f32(out, static_cast<float>(m(i, j)));
}

void read_matrix_f32(std::istream& in, RowMatrixD& m, const char* what) {
    for (int64_t i = 0; i < m.rows(); ++i)
        for (int64_t j = 0; j < m.cols(); ++j)
            m(i, j) = static_cast<double>(read_f32(in, what));
}

void write_matrix_f64(std::ostream& out, const RowMatrixD& m) {
    for (int64_t i = 0; i < m.rows(); ++i)
        for (int64_t j = 0; j < m.cols(); ++j) write_f64(out, m(i, j));
}

void read_matrix_f64(std::istream& in, RowMatrixD& m, const char* what) {
    for (int64_t i = 0; i < m.rows(); ++i)
        for (int64_t j = 0; j < m.cols(); ++j) m(i, j) = read_f64(in, what);
}

void write_vec_f64(std::ostream& out, const VecD& v) {
    for (int64_t i = 0; i < v.size(); ++i) write_f64(out, v[i]);
}

void read_vec_f64(std::istream& in, VecD& v, const char* what) {
    for (int64_t i = 0; i < v.size(); ++i) v[i] = read_f64(in, what);
}

void write_rng(std::ostream& out, const Rng& rng) {
    for (uint64_t word : rng.state()) write_u64(out, word);
}

Rng read_rng(std::istream& in) {
    std::array<uint64_t, 4> state;
    for (uint64_t& word : state) word = read_u64(in, "rng state");
    Rng rng;
    rng.set_state(state);
    return rng;
}

}  // namespace

// ---------------------------------------------------------------------------
// Memory
// ---------------------------------------------------------------------------

void save_memory(std::ostream& out, const MemoryStore& store) {
    write_header(out, PayloadKind::Memory);
    write_u32(out, static_cast<uint32_t>(store.config.memory_size));
    write_u32(out, static_cast<uint32_t>(store.config.key_size));
    write_u32(out, static_cast<uint32_t>(store.config.k));
    write_u32(out, static_cast<uint32_t>(store.config.effective_jitter()));
    write_u64(out, store.config.seed);

    write_f64(out, store.config.alpha);
    write_f64(out, store.config.t);
    write_matrix_f32(out, store.keys);
    for (uint32_t v : store.values) write_u32(out, v);
    for (int64_t i = 0; i < store.size(); ++i) {
        const uint64_t age = store.age(i);
        if (age > std::numeric_limits<uint32_t>::max())
            throw std::overflow_error("save_memory: age exceeds u32 range");
        write_u32(out, static_cast<uint32_t>(age));
    }
    write_u64(out, store.tick);
    write_rng(out, store.rng);
}

MemoryStore load_memory(std::istream& in) {
    read_header(in, PayloadKind::Memory);
    MemoryStore store;
    store.config.memory_size = read_u32(in, "memory_size");
    store.config.key_size = static_cast<int>(read_u32(in, "key_size"));
    store.config.k = read_u32(in, "k");
    store.config.jitter_bound = read_u32(in, "jitter_bound");
    store.config.seed = read_u64(in, "seed");
    store.config.alpha = read_f64(in, "alpha");
    store.config.t = read_f64(in, "t");
    try {
        store.config.validate();
    } catch (const std::invalid_argument& err) {
        throw LoadError(LoadErrorCode::BadPayload,
                        std::string("invalid memory config: ") + err.what());
    }

    const int64_t n = store.config.memory_size;
    const int d = store.config.key_size;
    store.keys.resize(n, d);
    read_matrix_f32(in, store.keys, "keys");
    for (int64_t i = 0; i < n; ++i) {
        const double norm = store.keys.row(i).norm();
        if (std::abs(norm - 1.0) > 1e-5)
            throw LoadError(LoadErrorCode::BadPayload, "memory key row is not unit norm");
    }

    store.values.resize(n);
    for (int64_t i = 0; i < n; ++i) store.values[i] = read_u32(in, "values");

    std::vector<uint32_t> ages(n);
    for (int64_t i = 0; i < n; ++i) ages[i] = read_u32(in, "ages");
    store.tick = read_u64(in, "tick");
    store.last_touch.resize(n);
    for (int64_t i = 0; i < n; ++i) {
        if (ages[i] > store.tick)
            throw LoadError(LoadErrorCode::BadPayload, "memory age exceeds update count");
        store.last_touch[i] = store.tick - ages[i];
    }
    store.rng = read_rng(in);
    store.rebuild_value_counts();
    store.rebuild_lru();
    return store;
}

// ---------------------------------------------------------------------------
// LSH
// ---------------------------------------------------------------------------

void save_lsh(std::ostream& out, const LshIndex& index) {
    write_header(out, PayloadKind::Lsh);
    const LshParams& params = index.params();
    write_u32(out, static_cast<uint32_t>(params.bits));
    write_u32(out, static_cast<uint32_t>(params.tables));
    write_u32(out, static_cast<uint32_t>(index.key_size()));
    write_u32(out, static_cast<uint32_t>(index.slots()));
    write_u64(out, params.seed);

    for (int t = 0; t < params.tables; ++t) write_matrix_f32(out, index.hash_vectors(t));
    for (int t = 0; t < params.tables; ++t)
        for (int64_t i = 0; i < index.slots(); ++i)
            write_u64(out, index.slot_signature(t, i));
}

LshIndex load_lsh(std::istream& in) {
    read_header(in, PayloadKind::Lsh);
    LshParams params;
    params.bits = static_cast<int>(read_u32(in, "bits"));
    params.tables = static_cast<int>(read_u32(in, "tables"));
    const int key_size = static_cast<int>(read_u32(in, "key_size"));
    const int64_t slots = read_u32(in, "memory_size");
    params.seed = read_u64(in, "seed");
    if (params.bits < 0 || params.bits > 63 || params.tables < 1 || key_size < 1)
        throw LoadError(LoadErrorCode::BadPayload, "invalid lsh dimensions");

    std::vector<RowMatrixD> hash_vectors(params.tables);
    for (int t = 0; t < params.tables; ++t) {
        hash_vectors[t].resize(params.bits, key_size);
        read_matrix_f32(in, hash_vectors[t], "hash vectors");
    }
    std::vector<std::vector<uint64_t>> sigs(params.tables, std::vector<uint64_t>(slots));
    for (int t = 0; t < params.tables; ++t)
        for (int64_t i = 0; i < slots; ++i) sigs[t][i] = read_u64(in, "signatures");

    LshIndex index;
    index.restore(params, std::move(hash_vectors), std::move(sigs), key_size);
    return index;
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

void save_encoder(std::ostream& out, const EncoderSnapshot& snapshot) {
    write_header(out, PayloadKind::Encoder);
    const EncoderDims& dims = snapshot.params.dims;
    write_u32(out, static_cast<uint32_t>(dims.embed_dim));
    write_u32(out, static_cast<uint32_t>(dims.hidden));
    write_u32(out, static_cast<uint32_t>(dims.window));
    write_u32(out, static_cast<uint32_t>(dims.pos_feats));
    write_u32(out, static_cast<uint32_t>(dims.key_size));
    write_u32(out, static_cast<uint32_t>(snapshot.params.embed.rows()));
    write_u64(out, 0);  // reserved seed field

    write_f64(out, snapshot.adam_config.learning_rate);
    write_f64(out, snapshot.adam_config.beta1);
    write_f64(out, snapshot.adam_config.beta2);
    write_f64(out, snapshot.adam_config.eps);
    write_u64(out, static_cast<uint64_t>(snapshot.step));

    auto write_params = [&out](const EncoderParams& p) {
        write_matrix_f64(out, p.embed);
        write_matrix_f64(out, p.w1);
        write_vec_f64(out, p.b1);
        write_matrix_f64(out, p.w2);
        write_vec_f64(out, p.b2);
    };
    write_params(snapshot.params);
    write_params(snapshot.adam.m);
    write_params(snapshot.adam.v);
    write_u64(out, static_cast<uint64_t>(snapshot.adam.step));
}

EncoderSnapshot load_encoder(std::istream& in) {
    read_header(in, PayloadKind::Encoder);
    EncoderDims dims;
    dims.embed_dim = static_cast<int>(read_u32(in, "embed_dim"));
    dims.hidden = static_cast<int>(read_u32(in, "hidden"));
    dims.window = static_cast<int>(read_u32(in, "window"));
    dims.pos_feats = static_cast<int>(read_u32(in, "pos_feats"));
    dims.key_size = static_cast<int>(read_u32(in, "key_size"));
    const int vocab = static_cast<int>(read_u32(in, "vocab"));
    read_u64(in, "seed");
    if (dims.embed_dim < 1 || dims.hidden < 1 || dims.window < 1 || dims.pos_feats < 0 ||
        dims.key_size < 1 || vocab < 1)
        throw LoadError(LoadErrorCode::BadPayload, "invalid encoder dimensions");

    EncoderSnapshot snapshot;
    snapshot.adam_config.learning_rate = read_f64(in, "lr");
    snapshot.adam_config.beta1 = read_f64(in, "beta1");
    snapshot.adam_config.beta2 = read_f64(in, "beta2");
    snapshot.adam_config.eps = read_f64(in, "eps");
    snapshot.step = static_cast<int64_t>(read_u64(in, "step"));

    auto read_params = [&](EncoderParams& p) {
        p.dims = dims;
        p.embed.resize(vocab, dims.embed_dim);
        read_matrix_f64(in, p.embed, "embed");
        p.w1.resize(dims.hidden, dims.input_dim());
        read_matrix_f64(in, p.w1, "w1");
        p.b1.resize(dims.hidden);
        read_vec_f64(in, p.b1, "b1");
        p.w2.resize(dims.key_size, dims.hidden);
        read_matrix_f64(in, p.w2, "w2");
        p.b2.resize(dims.key_size);
        read_vec_f64(in, p.b2, "b2");
    };
    read_params(snapshot.params);
    read_params(snapshot.adam.m);
    read_params(snapshot.adam.v);
    snapshot.adam.step = static_cast<int64_t>(read_u64(in, "adam step"));
    return snapshot;
}

// ---------------------------------------------------------------------------
// Task spec
// ---------------------------------------------------------------------------

void save_taskspec(std::ostream& out, const SyntheticTaskSpec& spec) {
    write_header(out, PayloadKind::TaskSpec);
    write_u32(out, static_cast<uint32_t>(spec.max_len));
    write_u32(out, static_cast<uint32_t>(spec.digit_count));
    write_u32(out, static_cast<uint32_t>(spec.train_count));
    write_u32(out, static_cast<uint32_t>(spec.test_count));
    write_u64(out, spec.seed);
    for (uint32_t v : spec.f) write_u32(out, v);
}

SyntheticTaskSpec load_taskspec(std::istream& in) {
    read_header(in, PayloadKind::TaskSpec);
    SyntheticTaskSpec spec;
    spec.max_len = static_cast<int>(read_u32(in, "max_len"));
    spec.digit_count = static_cast<int>(read_u32(in, "digit_count"));
    spec.train_count = read_u32(in, "train_count");
    spec.test_count = read_u32(in, "test_count");
    spec.seed = read_u64(in, "seed");
    if (spec.max_len < spec.digit_count || spec.digit_count != kDigitCount)
        throw LoadError(LoadErrorCode::BadPayload, "invalid task spec dimensions");
    spec.f.resize(kSymbolMax + 1);
    for (uint32_t& v : spec.f) v = read_u32(in, "f table");
    for (int s = kSymbolMin; s <= kSymbolMax; ++s)
        if (spec.f[s] < kSymbolMin || spec.f[s] > kSymbolMax)
            throw LoadError(LoadErrorCode::BadPayload, "f table entry out of range");
    return spec;
}

PayloadKind peek_kind(std::istream& in) {
    const auto pos = in.tellg();
    char magic[4];
    read_bytes(in, magic, 4, "magic");
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw LoadError(LoadErrorCode::BadMagic, "snapshot magic mismatch");
    read_u16(in, "version");
    uint8_t kind = 0;
    read_bytes(in, &kind, 1, "payload kind");
    in.seekg(pos);
    if (kind < 1 || kind > 4)
        throw LoadError(LoadErrorCode::BadKind, "unknown payload kind");
    return static_cast<PayloadKind>(kind);
}

// ---------------------------------------------------------------------------
// File helpers
// ---------------------------------------------------------------------------

namespace {

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    return out;
}

std::ifstream open_in(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open for reading: " + path);
    return in;
}

}  // namespace

void save_checkpoint_file(const std::string& path, const EncoderSnapshot& encoder,
                          const MemoryStore& store) {
    auto out = open_out(path);
    save_encoder(out, encoder);
    save_memory(out, store);
    if (!out) throw std::runtime_error("write failed: " + path);
}

Checkpoint load_checkpoint_file(const std::string& path) {
    auto in = open_in(path);
    Checkpoint ckpt;
    ckpt.encoder = load_encoder(in);
    ckpt.store = load_memory(in);
    return ckpt;
}

void save_taskspec_file(const std::string& path, const SyntheticTaskSpec& spec) {
    auto out = open_out(path);
    save_taskspec(out, spec);
    if (!out) throw std::runtime_error("write failed: " + path);
}

SyntheticTaskSpec load_taskspec_file(const std::string& path) {
    auto in = open_in(path);
    return load_taskspec(in);
}

void save_memory_file(const std::string& path, const MemoryStore& store) {
    auto out = open_out(path);
    save_memory(out, store);
    if (!out) throw std::runtime_error("write failed: " + path);
}

MemoryStore load_memory_file(const std::string& path) {
    auto in = open_in(path);
    return load_memory(in);
}

}  // namespace raremem
