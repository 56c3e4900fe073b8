// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "icmlp/data.hpp"
#include "icmlp/train.hpp"

namespace icmlp {

/// Applies `key = value` lines (with `#` comments) onto `cfg`. Keys are the
/// TrainConfig field names. Throws ConfigError on unknown keys or bad values;
/// `source` names the input in messages.
void apply_config_text(TrainConfig& cfg, const std::string& text,
                       const std::string& source = "<config>");
void apply_config_file(TrainConfig& cfg, const std::filesystem::path& path);
/// Every TrainConfig field as `key = value` lines, in declaration order.
std::string format_config(const TrainConfig& cfg);

/// Unit-norm Gaussian clusters: one random unit centre per class, each sample
/// is normalize(centre + difficulty / sqrt(dim) * N(0, I)). Labels cycle
/// through the classes. difficulty 0 places every sample on its centre.
Dataset make_synthetic(std::size_t n_samples, std::size_t dim, std::size_t n_classes,
                       double difficulty, std::uint64_t seed);
void gen_synthetic(std::size_t n_samples, std::size_t dim, std::size_t n_classes,
                   double difficulty, std::uint64_t seed, const std::filesystem::path& path);

/// Exit codes of run_cli.
inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Entry point of the `icmlp` tool. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace icmlp
