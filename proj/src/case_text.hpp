#pragma once

// Internal helper: tokenizer for the structured text documents used by the
// network case and scenario files (top-level key = value pairs, [section]
// scalars, and whitespace-separated table rows; '#' starts a comment).

#include "dersec/common.hpp"

#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace dersec::detail {

struct CaseDocument {
    std::map<std::string, std::string> scalars;
    std::map<std::string, std::vector<std::vector<std::string>>> tables;
    std::map<std::string, std::map<std::string, std::string>> section_scalars;

    bool has_scalar(const std::string& key) const { return scalars.count(key) > 0; }

    std::string scalar_or(const std::string& key, const std::string& fallback) const {
        const auto it = scalars.find(key);
        return it == scalars.end() ? fallback : it->second;
    }

    std::string section_or(const std::string& section, const std::string& key,
                           const std::string& fallback) const {
        const auto sit = section_scalars.find(section);
        if (sit == section_scalars.end())
            return fallback;
        const auto it = sit->second.find(key);
        return it == sit->second.end() ? fallback : it->second;
    }
};

inline std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos)
        return "";
    const auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
}

inline double parse_number(const std::string& token, const std::string& what) {
    std::size_t pos = 0;
    double value = 0.0;
    try {
        value = std::stod(token, &pos);
    } catch (const std::exception&) {
        throw ParseError("bad number for " + what + ": '" + token + "'");
    }
    if (pos != token.size())
        throw ParseError("trailing junk in " + what + ": '" + token + "'");
    return value;
}

inline int parse_int(const std::string& token, const std::string& what) {
    const double v = parse_number(token, what);
    const int i = static_cast<int>(std::lround(v));
    if (std::abs(v - i) > 1e-12)
        throw ParseError("expected integer for " + what + ": '" + token + "'");
    return i;
}

inline CaseDocument tokenize_case(const std::string& text) {
    CaseDocument doc;
    std::istringstream in(text);
    std::string line;
    std::string section;
    while (std::getline(in, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos)
            line = line.substr(0, hash);
        line = trim(line);
        if (line.empty())
            continue;
        if (line.front() == '[' && line.back() == ']') {
            section = trim(line.substr(1, line.size() - 2));
            doc.tables[section];
            continue;
        }
        const auto eq = line.find('=');
        if (eq != std::string::npos) {
            const std::string key = trim(line.substr(0, eq));
            const std::string value = trim(line.substr(eq + 1));
            if (section.empty())
                doc.scalars[key] = value;
            else
                doc.section_scalars[section][key] = value;
            continue;
        }
        if (section.empty())
            throw ParseError("stray table row outside a section: '" + line + "'");
        std::vector<std::string> cells;
        std::istringstream row(line);
        std::string cell;
        while (row >> cell)
            cells.push_back(cell);
        doc.tables[section].push_back(std::move(cells));
    }
    return doc;
}

} // namespace dersec::detail
