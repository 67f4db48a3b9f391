#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <utility>
#include <vector>

namespace crane {

// One calibration record. set_tag is 'R' (reasoning), 'A' (agent/tool) or
// 'F' (format trace). Token positions are 0-based everywhere.
struct CalibrationExample {
    std::vector<int> tokens;
    std::vector<uint8_t> mask;
    char set_tag = 'R';
};

// JSONL, one {"tokens":[...], "mask":[...], "set":"R"|"A"|"F"} per line.
std::vector<CalibrationExample> load_calibration(const std::filesystem::path& path);
void save_calibration(const std::vector<CalibrationExample>& examples,
                      const std::filesystem::path& path);

std::vector<CalibrationExample> filter_set(const std::vector<CalibrationExample>& examples,
                                           char set_tag);
std::map<char, int> tag_counts(const std::vector<CalibrationExample>& examples);

// (example_index, token_position) pairs, sorted. Indices refer to the list
// passed to format_support (normally the F-tagged sublist).
struct FormatSupport {
    std::vector<std::pair<int, int>> positions;
};

struct Neighborhood {
    std::vector<std::pair<int, int>> positions;
    int radius = 0;
};

FormatSupport format_support(const std::vector<CalibrationExample>& f_examples);

// Union of clipped windows [s-radius, s+radius] around each support position,
// deduplicated and sorted. lengths[i] is example i's token count.
Neighborhood expand_neighborhood(const FormatSupport& support, int radius,
                                 const std::vector<size_t>& lengths);

}  // namespace crane
