// Copyright 2026 The usdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "usdiff/kv.hpp"

#include <charconv>
#include <cmath>
#include <sstream>

namespace usdiff {

namespace {

std::string_view trim(std::string_view s)
{
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, const char* type)
{
    throw ConfigError("invalid " + std::string(type) + " for key '" + std::string(key) + "': '" + std::string(value) +
                      "'");
}

} // namespace

KeyValues parse_kv(std::string_view text)
{
    KeyValues kv;
    int line_no = 0;
    while (!text.empty()) {
        const auto nl = text.find('\n');
        std::string_view line = text.substr(0, nl);
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) {
            line = line.substr(0, hash);
        }
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw ConfigError("line " + std::to_string(line_no) + ": expected key=value");
        }
        const std::string key(trim(line.substr(0, eq)));
        if (key.empty()) {
            throw ConfigError("line " + std::to_string(line_no) + ": empty key");
        }
        if (!kv.emplace(key, std::string(trim(line.substr(eq + 1)))).second) {
            throw ConfigError("line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
        }
    }
    return kv;
}

std::string format_kv(const KeyValues& kv)
{
    std::string out;
    for (const auto& [k, v] : kv) {
        out += k;
        out += '=';
        out += v;
        out += '\n';
    }
    return out;
}

std::vector<std::string> split_list(std::string_view value)
{
    std::vector<std::string> items;
    if (trim(value).empty()) {
        return items;
    }
    while (true) {
        const auto comma = value.find(',');
        items.emplace_back(trim(value.substr(0, comma)));
        if (comma == std::string_view::npos) {
            break;
        }
        value = value.substr(comma + 1);
    }
    return items;
}

std::string join_list(const std::vector<std::string>& items)
{
    std::string out;
    for (size_t i = 0; i < items.size(); ++i) {
        out += (i ? "," : "") + items[i];
    }
    return out;
}

std::string format_double(double v)
{
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

double parse_double(std::string_view key, std::string_view value)
{
    value = trim(value);
    double v = 0.0;
    const auto res = std::from_chars(value.data(), value.data() + value.size(), v);
    if (res.ec != std::errc{} || res.ptr != value.data() + value.size() || !std::isfinite(v)) {
        bad_value(key, value, "number");
    }
    return v;
}

int64_t parse_int(std::string_view key, std::string_view value)
{
    value = trim(value);
    int64_t v = 0;
    const auto res = std::from_chars(value.data(), value.data() + value.size(), v);
    if (res.ec != std::errc{} || res.ptr != value.data() + value.size()) {
        bad_value(key, value, "integer");
    }
    return v;
}

uint64_t parse_u64(std::string_view key, std::string_view value)
{
    value = trim(value);
    uint64_t v = 0;
    const auto res = std::from_chars(value.data(), value.data() + value.size(), v);
    if (res.ec != std::errc{} || res.ptr != value.data() + value.size()) {
        bad_value(key, value, "unsigned integer");
    }
    return v;
}

bool parse_bool(std::string_view key, std::string_view value)
{
    value = trim(value);
    if (value == "true" || value == "1" || value == "on") {
        return true;
    }
    if (value == "false" || value == "0" || value == "off") {
        return false;
    }
    bad_value(key, value, "boolean");
}

} // namespace usdiff
