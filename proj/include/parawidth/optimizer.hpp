#pragma once

#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "parawidth/network.hpp"

namespace parawidth {

enum class ScheduleKind { kConstant, kCosine, kStep };

struct LrSchedule {
  ScheduleKind kind = ScheduleKind::kCosine;
  double base_lr = 0.1;
  long warmup_iters = 0;
  double final_lr = 0.0;          // cosine floor
  std::vector<long> milestones;   // step decay, in iterations
  double gamma = 0.1;

  double at(long iteration, long total_iters) const;
};

struct OptimizerSpec {
  std::string kind = "sgd";  // sgd | lamb
  LrSchedule schedule;
  double momentum = 0.9;
  bool nesterov = true;
  double weight_decay = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-6;
};

template <typename T>
class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step(std::vector<Param<T>>& params, double lr) = 0;
  virtual void save(std::ostream& out) const = 0;
  virtual void load(std::istream& in) = 0;
};

template <typename T>
std::unique_ptr<Optimizer<T>> make_optimizer(const OptimizerSpec& spec);

OptimizerSpec optimizer_from_json(const nlohmann::json& j);
nlohmann::json optimizer_to_json(const OptimizerSpec& spec);

}  // namespace parawidth
