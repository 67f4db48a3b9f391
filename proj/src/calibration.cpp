#include "crane/calibration.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "json.hpp"

#include "crane/errors.hpp"

namespace crane {

using nlohmann::json;

std::vector<CalibrationExample> load_calibration(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open calibration file " + path.string());

    std::vector<CalibrationExample> out;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const std::string where = path.filename().string() + ":" + std::to_string(line_no);

        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::exception& e) {
            throw ValidationError(where + ": bad JSON: " + e.what());
        }
        if (!rec.contains("tokens") || !rec.contains("mask") || !rec.contains("set"))
            throw ValidationError(where + ": record needs tokens, mask and set");

        CalibrationExample ex;
        const std::string tag = rec.at("set").get<std::string>();
        if (tag != "R" && tag != "A" && tag != "F")
            throw ValidationError(where + ": set must be R, A or F");
        ex.set_tag = tag[0];

        for (const auto& t : rec.at("tokens")) {
            if (!t.is_number_integer() || t.get<long long>() < 0)
                throw ValidationError(where + ": tokens must be non-negative integers");
            ex.tokens.push_back(t.get<int>());
        }
        for (const auto& m : rec.at("mask")) {
            if (!m.is_number_integer() || (m.get<int>() != 0 && m.get<int>() != 1))
                throw ValidationError(where + ": mask values must be 0 or 1");
            ex.mask.push_back(static_cast<uint8_t>(m.get<int>()));
        }
        if (ex.tokens.size() != ex.mask.size())
            throw ValidationError(where + ": mask length " + std::to_string(ex.mask.size()) +
                                  " != token length " + std::to_string(ex.tokens.size()));
        if (ex.tokens.empty()) throw ValidationError(where + ": empty token list");
        if (ex.set_tag != 'F' &&
            std::find(ex.mask.begin(), ex.mask.end(), uint8_t{1}) == ex.mask.end())
            throw ValidationError(where + ": " + tag + " example needs at least one masked-in position");
        out.push_back(std::move(ex));
    }
    if (out.empty()) throw ValidationError(path.string() + ": no calibration records");
    return out;
}

void save_calibration(const std::vector<CalibrationExample>& examples,
                      const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot create " + path.string());
    for (const auto& ex : examples) {
        json rec;
        rec["tokens"] = ex.tokens;
        json mask = json::array();
        for (uint8_t m : ex.mask) mask.push_back(static_cast<int>(m));
        rec["mask"] = mask;
        rec["set"] = std::string(1, ex.set_tag);
        out << rec.dump() << "\n";
    }
    if (!out) throw IoError("short write on " + path.string());
}

std::vector<CalibrationExample> filter_set(const std::vector<CalibrationExample>& examples,
                                           char set_tag) {
    std::vector<CalibrationExample> out;
    for (const auto& ex : examples)
        if (ex.set_tag == set_tag) out.push_back(ex);
    return out;
}

std::map<char, int> tag_counts(const std::vector<CalibrationExample>& examples) {
    std::map<char, int> counts{{'R', 0}, {'A', 0}, {'F', 0}};
    for (const auto& ex : examples) ++counts[ex.set_tag];
    return counts;
}

FormatSupport format_support(const std::vector<CalibrationExample>& f_examples) {
    FormatSupport support;
    for (size_t i = 0; i < f_examples.size(); ++i)
        for (size_t s = 0; s < f_examples[i].mask.size(); ++s)
            if (f_examples[i].mask[s]) support.positions.emplace_back(static_cast<int>(i),
                                                                      static_cast<int>(s));
    return support;  // construction order is already sorted
}

Neighborhood expand_neighborhood(const FormatSupport& support, int radius,
                                 const std::vector<size_t>& lengths) {
    if (radius < 0) throw ValidationError("neighborhood radius must be >= 0");
    std::set<std::pair<int, int>> positions;
    for (const auto& [i, s] : support.positions) {
        if (i < 0 || static_cast<size_t>(i) >= lengths.size())
            throw ValidationError("support example index out of range");
        const int len = static_cast<int>(lengths[static_cast<size_t>(i)]);
        const int lo = std::max(0, s - radius);
        const int hi = std::min(len - 1, s + radius);
        for (int p = lo; p <= hi; ++p) positions.emplace(i, p);
    }
    Neighborhood n;
    n.radius = radius;
    n.positions.assign(positions.begin(), positions.end());
    return n;
}

}  // namespace crane
