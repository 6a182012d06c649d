#include "oft/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "oft/errors.hpp"

namespace oft {

namespace {

constexpr char kMagic[8] = {'O', 'F', 'T', 'L', 'A', 'B', 'C', 'K'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

template <typename T>
void put(std::ostream& os, T value) {
    os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
    T value{};
    is.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!is) throw RuntimeFailure("checkpoint: truncated file");
    return value;
}

void put_name(std::ostream& os, const std::string& name) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
}

std::string get_name(std::istream& is) {
    const auto len = get<std::uint32_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    if (!is) throw RuntimeFailure("checkpoint: truncated name");
    return name;
}

}  // namespace

const std::string& Checkpoint::string_at(const std::string& name) const {
    const auto it = strings.find(name);
    if (it == strings.end()) throw RuntimeFailure("checkpoint: missing string '" + name + "'");
    return it->second;
}

const std::vector<double>& Checkpoint::array_at(const std::string& name) const {
    const auto it = arrays.find(name);
    if (it == arrays.end()) throw RuntimeFailure("checkpoint: missing array '" + name + "'");
    return it->second;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw RuntimeFailure("checkpoint: cannot open '" + path + "' for writing");
    os.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(os, Checkpoint::kVersion);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.strings.size()));
    for (const auto& [name, value] : ckpt.strings) {
        put_name(os, name);
        put<std::uint64_t>(os, value.size());
        os.write(value.data(), static_cast<std::streamsize>(value.size()));
    }
    put<std::uint64_t>(os, ckpt.arrays.size());
    for (const auto& [name, value] : ckpt.arrays) {
        put_name(os, name);
        put<std::uint64_t>(os, value.size());
        os.write(reinterpret_cast<const char*>(value.data()),
                 static_cast<std::streamsize>(value.size() * sizeof(double)));
    }
    if (!os) throw RuntimeFailure("checkpoint: write to '" + path + "' failed");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw RuntimeFailure("checkpoint: cannot open '" + path + "'");
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw RuntimeFailure("checkpoint: bad magic in '" + path + "'");
    const auto version = get<std::uint32_t>(is);
    if (version != Checkpoint::kVersion)
        throw RuntimeFailure("checkpoint: unsupported version " + std::to_string(version));

    Checkpoint ckpt;
    const auto n_strings = get<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < n_strings; ++i) {
        std::string name = get_name(is);
        const auto len = get<std::uint64_t>(is);
        std::string value(len, '\0');
        is.read(value.data(), static_cast<std::streamsize>(len));
        if (!is) throw RuntimeFailure("checkpoint: truncated string payload");
        ckpt.strings.emplace(std::move(name), std::move(value));
    }
    const auto n_arrays = get<std::uint64_t>(is);
    for (std::uint64_t i = 0; i < n_arrays; ++i) {
        std::string name = get_name(is);
        const auto count = get<std::uint64_t>(is);
        std::vector<double> value(count);
        is.read(reinterpret_cast<char*>(value.data()),
                static_cast<std::streamsize>(count * sizeof(double)));
        if (!is) throw RuntimeFailure("checkpoint: truncated array payload");
        ckpt.arrays.emplace(std::move(name), std::move(value));
    }
    return ckpt;
}

}  // namespace oft
