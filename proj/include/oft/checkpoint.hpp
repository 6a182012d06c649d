#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace oft {

// Self-describing checkpoint container:
//   magic "OFTLABCK" | u32 version | u32 string count
//   per string: u32 name length, name, u64 byte length, bytes
//   u64 array count
//   per array: u32 name length, name, u64 element count, little-endian f64s
// Entries are written in sorted name order, so save(load(file)) is
// byte-identical.
struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;

    std::map<std::string, std::string> strings;
    std::map<std::string, std::vector<double>> arrays;

    const std::string& string_at(const std::string& name) const;
    const std::vector<double>& array_at(const std::string& name) const;
    bool has_array(const std::string& name) const { return arrays.count(name) > 0; }
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace oft
