// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>

namespace icmlp {

/// Shortest decimal that parses back to the same double.
std::string format_double(double value);

/// Writes `text` to `path`, replacing any existing file. Throws IoError.
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace icmlp
