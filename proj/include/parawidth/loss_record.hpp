#pragma once

// Training-time loss records, streamed as JSON lines:
//   {"iter":12,"part":0,"widths":[16,32],"loss":2.17,"flops":3145728,"is_largest":true}

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "parawidth/search_space.hpp"

namespace parawidth {

struct LossRecord {
  long iteration = 0;
  int part = 0;
  WidthConfig widths;
  double raw_loss = 0.0;
  std::int64_t flops = 0;
  bool is_largest = false;
};

std::string to_json_line(const LossRecord& record);
LossRecord parse_json_line(const std::string& line);

void write_records(std::ostream& out, const std::vector<LossRecord>& records);
// Throws ConfigError naming the line on malformed input.
std::vector<LossRecord> read_records(std::istream& in);
std::vector<LossRecord> read_records_file(const std::string& path);

}  // namespace parawidth
