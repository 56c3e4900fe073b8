// SPDX-License-Identifier: Apache-2.0
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "icmlp/cli.hpp"
#include "icmlp/errors.hpp"
#include "icmlp/format.hpp"

namespace icmlp {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& value, const std::string& where) {
  T out{};
  const char* begin = value.data();
  const char* end = begin + value.size();
  const auto [ptr, ec] = std::from_chars(begin, end, out);
  if (ec != std::errc() || ptr != end || value.empty()) {
    throw ConfigError(where + ": invalid value '" + value + "' for " + key);
  }
  if constexpr (std::is_floating_point_v<T>) {
    if (!std::isfinite(out)) throw ConfigError(where + ": non-finite value for " + key);
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& value, const std::string& where) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError(where + ": invalid boolean '" + value + "' for " + key);
}

}  // namespace

void apply_config_text(TrainConfig& cfg, const std::string& text, const std::string& source) {
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(line_no);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));

    if (key == "n_residual") {
      cfg.n_residual = parse_number<std::size_t>(key, value, where);
    } else if (key == "n_downsample") {
      cfg.n_downsample = parse_number<std::size_t>(key, value, where);
    } else if (key == "batch_size") {
      cfg.batch_size = parse_number<std::size_t>(key, value, where);
    } else if (key == "initial_lr") {
      cfg.initial_lr = parse_number<double>(key, value, where);
    } else if (key == "weight_decay") {
      cfg.weight_decay = parse_number<double>(key, value, where);
    } else if (key == "lr_gamma") {
      cfg.lr_gamma = parse_number<double>(key, value, where);
    } else if (key == "dropout_p") {
      cfg.dropout_p = parse_number<double>(key, value, where);
    } else if (key == "patience") {
      cfg.patience = parse_number<std::size_t>(key, value, where);
    } else if (key == "max_epochs") {
      cfg.max_epochs = parse_number<std::size_t>(key, value, where);
    } else if (key == "seed") {
      cfg.seed = parse_number<std::uint64_t>(key, value, where);
    } else if (key == "no_dropout") {
      cfg.ablation.no_dropout = parse_bool(key, value, where);
    } else if (key == "no_ic") {
      cfg.ablation.no_ic = parse_bool(key, value, where);
    } else if (key == "no_skip") {
      cfg.ablation.no_skip = parse_bool(key, value, where);
    } else if (key == "init_weights_path") {
      if (value.empty()) {
        cfg.init_weights_path.reset();
      } else {
        cfg.init_weights_path = value;
      }
    } else {
      throw ConfigError(where + ": unknown key '" + key + "'");
    }
  }
}

void apply_config_file(TrainConfig& cfg, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  apply_config_text(cfg, buf.str(), path.string());
}

std::string format_config(const TrainConfig& cfg) {
  auto b = [](bool v) { return v ? std::string("true") : std::string("false"); };
  std::string out;
  out += "n_residual = " + std::to_string(cfg.n_residual) + '\n';
  out += "n_downsample = " + std::to_string(cfg.n_downsample) + '\n';
  out += "batch_size = " + std::to_string(cfg.batch_size) + '\n';
  out += "initial_lr = " + format_double(cfg.initial_lr) + '\n';
  out += "weight_decay = " + format_double(cfg.weight_decay) + '\n';
  out += "lr_gamma = " + format_double(cfg.lr_gamma) + '\n';
  out += "dropout_p = " + format_double(cfg.dropout_p) + '\n';
  out += "patience = " + std::to_string(cfg.patience) + '\n';
  out += "max_epochs = " + std::to_string(cfg.max_epochs) + '\n';
  out += "seed = " + std::to_string(cfg.seed) + '\n';
  out += "no_dropout = " + b(cfg.ablation.no_dropout) + '\n';
  out += "no_ic = " + b(cfg.ablation.no_ic) + '\n';
  out += "no_skip = " + b(cfg.ablation.no_skip) + '\n';
  out += "init_weights_path = " + cfg.init_weights_path.value_or("") + '\n';
  return out;
}

}  // namespace icmlp
