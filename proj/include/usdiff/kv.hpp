// Copyright 2026 The usdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace usdiff {

/// Malformed key=value text or an unknown/invalid key.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Ordered key=value document: one `key=value` per line, `#` comments, blank
/// lines ignored, arrays as comma lists.
using KeyValues = std::map<std::string, std::string>;

KeyValues parse_kv(std::string_view text);
std::string format_kv(const KeyValues& kv);

std::vector<std::string> split_list(std::string_view value);
std::string join_list(const std::vector<std::string>& items);

/// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

double parse_double(std::string_view key, std::string_view value);
int64_t parse_int(std::string_view key, std::string_view value);
uint64_t parse_u64(std::string_view key, std::string_view value);
bool parse_bool(std::string_view key, std::string_view value);

} // namespace usdiff
