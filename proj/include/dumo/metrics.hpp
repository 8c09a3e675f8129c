#pragma once

// Per-step training records and their JSON-lines encoding.

#include <cmath>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

namespace dumo {

struct PassCounts {
  int grad_tracking = 0;
  int grad_free = 0;
  bool operator==(const PassCounts&) const = default;
};

struct MetricsRecord {
  long step = 0;
  double l_v = 0.0;
  double l_u = 0.0;
  double total = 0.0;
  double grad_norm = 0.0;
  PassCounts passes;
  std::optional<double> mmd;       // EMA weights
  std::optional<double> mmd_live;  // live weights, when enabled
  double wall_seconds = 0.0;       // not serialized: logs must be reproducible byte for byte
};

namespace detail {

inline nlohmann::json finite_or_null(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

inline double number_or_nan(const nlohmann::json& j) {
  return j.is_null() ? std::nan("") : j.get<double>();
}

}  // namespace detail

inline nlohmann::json to_json(const MetricsRecord& r) {
  nlohmann::json j = {{"step", r.step},
                      {"l_v", detail::finite_or_null(r.l_v)},
                      {"l_u", detail::finite_or_null(r.l_u)},
                      {"total", detail::finite_or_null(r.total)},
                      {"grad_norm", detail::finite_or_null(r.grad_norm)},
                      {"passes_grad", r.passes.grad_tracking},
                      {"passes_free", r.passes.grad_free}};
  if (r.mmd) j["mmd"] = detail::finite_or_null(*r.mmd);
  if (r.mmd_live) j["mmd_live"] = detail::finite_or_null(*r.mmd_live);
  return j;
}

inline MetricsRecord record_from_json(const nlohmann::json& j) {
  MetricsRecord r;
  r.step = j.at("step").get<long>();
  r.l_v = detail::number_or_nan(j.at("l_v"));
  r.l_u = detail::number_or_nan(j.at("l_u"));
  r.total = detail::number_or_nan(j.at("total"));
  r.grad_norm = detail::number_or_nan(j.at("grad_norm"));
  r.passes.grad_tracking = j.at("passes_grad").get<int>();
  r.passes.grad_free = j.at("passes_free").get<int>();
  if (j.contains("mmd")) r.mmd = detail::number_or_nan(j.at("mmd"));
  if (j.contains("mmd_live")) r.mmd_live = detail::number_or_nan(j.at("mmd_live"));
  return r;
}

inline void write_jsonl(std::ostream& out, const std::vector<MetricsRecord>& log) {
  for (const auto& r : log) out << to_json(r).dump() << "\n";
}

inline std::vector<MetricsRecord> read_jsonl(std::istream& in) {
  std::vector<MetricsRecord> log;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) log.push_back(record_from_json(nlohmann::json::parse(line)));
  }
  return log;
}

}  // namespace dumo
