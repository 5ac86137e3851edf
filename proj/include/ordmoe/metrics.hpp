#pragma once

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ordmoe/common.hpp"

namespace ordmoe {

inline constexpr int kMetricsSchemaVersion = 1;

/// One evaluation snapshot during training.  wall_ms is timing-only and is
/// excluded from determinism comparisons.
struct MetricsRecord {
  std::size_t step = 0;
  double ntp = 0.0;
  double erl = 0.0;
  double balance = 0.0;
  double total = 0.0;
  std::vector<double> tier_avg;
  double separation = 0.0;
  double ordinal_consistency = 0.0;
  double accuracy = 0.0;
  double load_entropy = 0.0;
  double lr = 0.0;
  double wall_ms = 0.0;

  nlohmann::json to_json() const {
    return {{"step", step},
            {"ntp", ntp},
            {"erl", erl},
            {"balance", balance},
            {"total", total},
            {"tier_avg", tier_avg},
            {"separation", separation},
            {"ordinal_consistency", ordinal_consistency},
            {"accuracy", accuracy},
            {"load_entropy", load_entropy},
            {"lr", lr},
            {"wall_ms", wall_ms}};
  }

  static MetricsRecord from_json(const nlohmann::json& j) {
    MetricsRecord r;
    r.step = j.at("step").get<std::size_t>();
    r.ntp = j.at("ntp").get<double>();
    r.erl = j.at("erl").get<double>();
    r.balance = j.at("balance").get<double>();
    r.total = j.at("total").get<double>();
    r.tier_avg = j.at("tier_avg").get<std::vector<double>>();
    r.separation = j.at("separation").get<double>();
    r.ordinal_consistency = j.at("ordinal_consistency").get<double>();
    r.accuracy = j.at("accuracy").get<double>();
    r.load_entropy = j.at("load_entropy").get<double>();
    r.lr = j.at("lr").get<double>();
    r.wall_ms = j.at("wall_ms").get<double>();
    return r;
  }

  /// Equality up to timing; exact on every numeric payload field.
  bool same_values(const MetricsRecord& o) const {
    return step == o.step && ntp == o.ntp && erl == o.erl && balance == o.balance &&
           total == o.total && tier_avg == o.tier_avg && separation == o.separation &&
           ordinal_consistency == o.ordinal_consistency && accuracy == o.accuracy &&
           load_entropy == o.load_entropy && lr == o.lr;
  }
};

/// Line-delimited JSON metrics stream.  The first line carries the schema
/// name and version so readers can reject incompatible files.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path) : os_(path) {
    if (!os_) throw config_error("metrics: cannot open for writing: " + path);
    nlohmann::json header = {{"schema", "ordmoe-metrics"},
                             {"version", kMetricsSchemaVersion}};
    os_ << header.dump() << '\n';
    os_.flush();
  }

  void write(const MetricsRecord& r) {
    os_ << r.to_json().dump() << '\n';
    os_.flush();
  }

 private:
  std::ofstream os_;
};

inline std::vector<MetricsRecord> read_metrics(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw config_error("metrics: cannot open: " + path);
  std::string line;
  if (!std::getline(is, line)) throw config_error("metrics: empty file: " + path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw config_error(std::string("metrics: bad header line: ") + e.what());
  }
  if (!header.contains("schema") || header.at("schema") != "ordmoe-metrics")
    throw config_error("metrics: unrecognized schema header in " + path);
  if (!header.contains("version") || header.at("version").get<int>() != kMetricsSchemaVersion)
    throw config_error("metrics: unsupported schema version in " + path);
  std::vector<MetricsRecord> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(MetricsRecord::from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw config_error(std::string("metrics: bad record line: ") + e.what());
    }
  }
  return out;
}

}  // namespace ordmoe
