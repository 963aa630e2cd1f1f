#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "vqla/dataio.hpp"
#include "vqla/image.hpp"

namespace vqla::corruptions {

enum class Category { kNoise, kBlur, kOcclusion, kDigital };
const char* category_name(Category c);

struct KindInfo {
  std::string name;
  Category category;
};

// The 19 kinds in reporting order.
const std::vector<KindInfo>& registry();
std::vector<std::string> all_kinds();
bool is_kind(const std::string& name);
Category category_of(const std::string& kind);

inline constexpr int kMaxSeverity = 5;

struct CorruptionSpec {
  std::string kind;
  int severity = 1;  // 1..5; 0 is the identity
  std::uint64_t seed = 0;
};

// 64-bit FNV-1a.
std::uint64_t fnv1a(const std::string& s);

// Output is clipped to [0, 1]. Stochastic kinds draw from a generator seeded
// by (spec.seed, frame_id); the severity does not enter the seed, so one
// realization is scaled across severities.
Image corrupt(const Image& image, const CorruptionSpec& spec, const std::string& frame_id = "");

// Parses "all" or a comma list of kind names.
std::vector<std::string> parse_kinds(const std::string& s);
// Parses "1..5", "3" or "1,2,5".
std::vector<int> parse_severities(const std::string& s);

struct CorruptReport {
  int written = 0;
  std::vector<std::string> failures;  // one message per failed file
  std::filesystem::path manifest;     // combined manifest with corruption columns
};

// Writes out_dir/<kind>/<severity>/<frame_id><ext> for every unique frame,
// a manifest.txt per (kind, severity) directory and out_dir/manifest.txt
// listing every corrupted record. I/O failures are collected, not thrown.
CorruptReport corrupt_dataset(const dataio::DatasetManifest& manifest, const std::vector<std::string>& kinds,
                              const std::vector<int>& severities, std::uint64_t seed,
                              const std::filesystem::path& out_dir,
                              const std::map<std::string, Image>* cache = nullptr);

}  // namespace vqla::corruptions
