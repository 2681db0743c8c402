#include "parawidth/loss_record.hpp"

#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>

#include "json.hpp"
#include "parawidth/errors.hpp"

namespace parawidth {

std::string to_json_line(const LossRecord& record) {
  nlohmann::ordered_json j;
  j["iter"] = record.iteration;
  j["part"] = record.part;
  j["widths"] = record.widths.widths;
  j["loss"] = record.raw_loss;
  j["flops"] = record.flops;
  j["is_largest"] = record.is_largest;
  return j.dump();
}

LossRecord parse_json_line(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  LossRecord r;
  r.iteration = j.at("iter").get<long>();
  r.part = j.at("part").get<int>();
  r.widths.widths = j.at("widths").get<std::vector<int>>();
  r.raw_loss = j.at("loss").get<double>();
  r.flops = j.at("flops").get<std::int64_t>();
  r.is_largest = j.at("is_largest").get<bool>();
  if (!std::isfinite(r.raw_loss) || r.raw_loss < 0.0) throw ConfigError("loss must be finite and non-negative");
  if (r.flops <= 0) throw ConfigError("flops must be positive");
  return r;
}

void write_records(std::ostream& out, const std::vector<LossRecord>& records) {
  for (const auto& r : records) out << to_json_line(r) << '\n';
}

std::vector<LossRecord> read_records(std::istream& in) {
  std::vector<LossRecord> records;
  std::string line;
  long number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      records.push_back(parse_json_line(line));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("loss record line " + std::to_string(number) + ": " + e.what());
    } catch (const ConfigError& e) {
      throw ConfigError("loss record line " + std::to_string(number) + ": " + e.what());
    }
  }
  return records;
}

std::vector<LossRecord> read_records_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open loss records '" + path + "'");
  return read_records(in);
}

}  // namespace parawidth
