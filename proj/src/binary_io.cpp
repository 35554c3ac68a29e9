#include "nflr/binary_io.hpp"

#include <openssl/evp.h>

#include <fstream>
#include <iterator>
#include <mutex>

#include "nflr/error.hpp"

namespace nflr {

std::vector<std::uint8_t> encode_f32(std::span<const double> values) {
    std::vector<std::uint8_t> out(values.size() * 4);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const float f = static_cast<float>(values[i]);
        std::memcpy(out.data() + 4 * i, &f, 4);
    }
    return out;
}

std::vector<std::uint8_t> encode_f64(std::span<const double> values) {
    std::vector<std::uint8_t> out(values.size() * 8);
    std::memcpy(out.data(), values.data(), out.size());
    return out;
}

std::vector<double> decode_f32(std::span<const std::uint8_t> bytes) {
    if (bytes.size() % 4 != 0) throw Error(ErrorKind::integrity, "float32 array length is not a multiple of 4");
    std::vector<double> out(bytes.size() / 4);
    for (std::size_t i = 0; i < out.size(); ++i) {
        float f;
        std::memcpy(&f, bytes.data() + 4 * i, 4);
        out[i] = f;
    }
    return out;
}

std::vector<double> decode_f64(std::span<const std::uint8_t> bytes) {
    if (bytes.size() % 8 != 0) throw Error(ErrorKind::integrity, "float64 array length is not a multiple of 8");
    std::vector<double> out(bytes.size() / 8);
    std::memcpy(out.data(), bytes.data(), bytes.size());
    return out;
}

namespace {
std::mutex audit_mutex;
std::vector<std::filesystem::path>* audit_log = nullptr;
}  // namespace

void set_read_audit(std::vector<std::filesystem::path>* log) {
    std::lock_guard lock(audit_mutex);
    audit_log = log;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    {
        std::lock_guard lock(audit_mutex);
        if (audit_log) audit_log->push_back(path);
    }
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::io, "cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw Error(ErrorKind::io, "read failed for " + path.string());
    return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::io, "cannot create " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorKind::io, "write failed for " + path.string());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string read_text(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    return std::string(bytes.begin(), bytes.end());
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
        throw Error(ErrorKind::integrity, "SHA-256 computation failed");
    }
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

}  // namespace nflr
