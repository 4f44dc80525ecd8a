#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace vplan {

inline constexpr std::string_view kToolVersion = "vplan 0.3.0";

// Failure categories map one-to-one onto CLI exit codes.
enum class ErrorKind : std::uint8_t { usage = 1, data = 2, numeric = 3 };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

struct UsageError : Error {
    explicit UsageError(const std::string& what) : Error(ErrorKind::usage, what) {}
};
struct DataError : Error {
    explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};
struct NumericError : Error {
    explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

std::string_view error_kind_name(ErrorKind kind);

using Rng = std::mt19937_64;

// Independent deterministic substream for (seed, stream tag, index).
Rng substream(std::uint64_t seed, std::uint64_t tag, std::uint64_t index = 0);

// Stream tags keep substreams of different consumers apart.
namespace stream {
inline constexpr std::uint64_t world = 0x57'4f'52'4c'44;
inline constexpr std::uint64_t episode = 0x45'50'49'53;
inline constexpr std::uint64_t test_episode = 0x54'45'53'54;
inline constexpr std::uint64_t mixture = 0x4d'49'58;
inline constexpr std::uint64_t init = 0x49'4e'49'54;
inline constexpr std::uint64_t heads = 0x48'45'41'44;
inline constexpr std::uint64_t shuffle = 0x53'48'55'46;
inline constexpr std::uint64_t dropout = 0x44'52'4f'50;
inline constexpr std::uint64_t sampling = 0x53'41'4d'50;
inline constexpr std::uint64_t align = 0x41'4c'49'47;
}  // namespace stream

// Hex SHA-256 of a byte string / file contents.
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::string& path);

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view contents);

}  // namespace vplan
