// SPDX-License-Identifier: Apache-2.0
//
// Versioned prompt templates and lookup tables shipped under assets/.
#pragma once

#include <cstdlib>
#include <map>
#include <mutex>
#include <set>
#include <string>

#include "monolex/actstore.hpp"
#include "monolex/error.hpp"

#ifndef MONOLEX_ASSET_DIR
#define MONOLEX_ASSET_DIR "assets"
#endif

namespace monolex {

/// $MONOLEX_ASSETS if set, else the directory baked in at build time.
inline fs::path asset_dir() {
    if (const char* env = std::getenv("MONOLEX_ASSETS"); env && *env) return env;
    return MONOLEX_ASSET_DIR;
}

inline std::string read_asset(const std::string& relative) {
    const fs::path p = asset_dir() / relative;
    if (!fs::exists(p)) throw IoError("missing asset " + p.string() + " (set MONOLEX_ASSETS to the assets directory)");
    return detail::read_file(p);
}

/// Cached prompt template assets/prompts/<name>.txt.
inline const std::string& prompt_template(const std::string& name) {
    static std::mutex mu;
    static std::map<std::string, std::string> cache;
    std::lock_guard lock(mu);
    auto it = cache.find(name);
    if (it == cache.end()) it = cache.emplace(name, read_asset("prompts/" + name + ".txt")).first;
    return it->second;
}

/// Replaces each {{key}}. Unknown placeholders and unused values are errors.
inline std::string render(const std::string& tmpl, const std::map<std::string, std::string>& values) {
    std::string out;
    std::set<std::string> used;
    std::size_t at = 0;
    while (true) {
        const auto open = tmpl.find("{{", at);
        if (open == std::string::npos) break;
        const auto close = tmpl.find("}}", open + 2);
        if (close == std::string::npos) throw ValidationError("template: unterminated placeholder");
        const std::string key = tmpl.substr(open + 2, close - open - 2);
        auto v = values.find(key);
        if (v == values.end()) throw ValidationError("template: no value for {{" + key + "}}");
        out.append(tmpl, at, open - at);
        out += v->second;
        used.insert(key);
        at = close + 2;
    }
    out.append(tmpl, at);
    for (const auto& [k, _] : values)
        if (!used.count(k)) throw ValidationError("template: value \"" + k + "\" has no placeholder");
    while (!out.empty() && (out.back() == '\n' || out.back() == ' ')) out.pop_back();
    return out;
}

inline std::string render_prompt(const std::string& name, const std::map<std::string, std::string>& values) {
    return render(prompt_template(name), values);
}

// ---------------------------------------------------------------------------
// Small text helpers shared by the reply parsers
// ---------------------------------------------------------------------------

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::string first_line(const std::string& s) {
    std::size_t at = 0;
    while (at < s.size()) {
        auto nl = s.find('\n', at);
        if (nl == std::string::npos) nl = s.size();
        std::string line = trim(s.substr(at, nl - at));
        if (!line.empty()) return line;
        at = nl + 1;
    }
    return {};
}

} // namespace monolex
