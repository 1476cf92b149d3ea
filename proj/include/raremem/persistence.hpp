#pragma once

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>

#include "raremem/memory.hpp"
#include "raremem/nn_search.hpp"
#include "raremem/optimizer.hpp"
#include "raremem/synthetic.hpp"

namespace raremem {

// Binary snapshot format (.ltrm): a fixed header
//   magic "LTRM" | version u16 | payload_kind u8 | kind-specific u32 dims | seed u64
// followed by a kind-specific payload. All integers little-endian; memory
// keys are 32-bit floats row-major (lossless, since stored key coefficients
// are float-exact by construction). Round-trips are bitwise.

inline constexpr uint16_t kSnapshotVersion = 1;

enum class PayloadKind : uint8_t { Memory = 1, Lsh = 2, Encoder = 3, TaskSpec = 4 };

enum class LoadErrorCode { BadMagic, BadVersion, BadKind, Truncated, BadPayload };

class LoadError : public std::runtime_error {
public:
    LoadError(LoadErrorCode code, const std::string& what)
        : std::runtime_error(what), code_(code) {}
    LoadErrorCode code() const { return code_; }

private:
    LoadErrorCode code_;
};

void save_memory(std::ostream& out, const MemoryStore& store);
MemoryStore load_memory(std::istream& in);

void save_lsh(std::ostream& out, const LshIndex& index);
LshIndex load_lsh(std::istream& in);

// Encoder snapshots carry the optimizer moments and the step counter so
// training can resume exactly.
struct EncoderSnapshot {
    EncoderParams params;
    AdamState adam;
    AdamConfig adam_config;
    int64_t step = 0;
};

void save_encoder(std::ostream& out, const EncoderSnapshot& snapshot);
EncoderSnapshot load_encoder(std::istream& in);

void save_taskspec(std::ostream& out, const SyntheticTaskSpec& spec);
SyntheticTaskSpec load_taskspec(std::istream& in);

// Reads the header of the next entity without consuming it.
PayloadKind peek_kind(std::istream& in);

// Checkpoint file: an encoder snapshot followed by a memory snapshot.
struct Checkpoint {
    EncoderSnapshot encoder;
    MemoryStore store;
};

void save_checkpoint_file(const std::string& path, const EncoderSnapshot& encoder,
                          const MemoryStore& store);
Checkpoint load_checkpoint_file(const std::string& path);

void save_taskspec_file(const std::string& path, const SyntheticTaskSpec& spec);
SyntheticTaskSpec load_taskspec_file(const std::string& path);

void save_memory_file(const std::string& path, const MemoryStore& store);
MemoryStore load_memory_file(const std::string& path);

}  // namespace raremem
