#include "parawidth/optimizer.hpp"

#include <cmath>
#include <istream>
#include <numbers>
#include <ostream>

#include "parawidth/errors.hpp"

namespace parawidth {

double LrSchedule::at(long iteration, long total_iters) const {
  if (warmup_iters > 0 && iteration < warmup_iters) {
    return base_lr * static_cast<double>(iteration + 1) / static_cast<double>(warmup_iters);
  }
  switch (kind) {
    case ScheduleKind::kConstant:
      return base_lr;
    case ScheduleKind::kCosine: {
      const long span = std::max(1L, total_iters - warmup_iters);
      const double progress = std::min(1.0, static_cast<double>(iteration - warmup_iters) / static_cast<double>(span));
      return final_lr + 0.5 * (base_lr - final_lr) * (1.0 + std::cos(std::numbers::pi * progress));
    }
    case ScheduleKind::kStep: {
      double lr = base_lr;
      for (long m : milestones) {
        if (iteration >= m) lr *= gamma;
      }
      return lr;
    }
  }
  return base_lr;
}

namespace {

template <typename T>
void write_buffers(std::ostream& out, const std::vector<std::vector<T>>& bufs) {
  const std::uint64_t count = bufs.size();
  out.write(reinterpret_cast<const char*>(&count), sizeof(count));
  for (const auto& b : bufs) {
    const std::uint64_t size = b.size();
    out.write(reinterpret_cast<const char*>(&size), sizeof(size));
    out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(size * sizeof(T)));
  }
}

template <typename T>
void read_buffers(std::istream& in, std::vector<std::vector<T>>& bufs) {
  std::uint64_t count = 0;
  in.read(reinterpret_cast<char*>(&count), sizeof(count));
  if (!in) throw ConfigError("truncated optimizer state");
  bufs.assign(count, {});
  for (auto& b : bufs) {
    std::uint64_t size = 0;
    in.read(reinterpret_cast<char*>(&size), sizeof(size));
    b.resize(size);
    in.read(reinterpret_cast<char*>(b.data()), static_cast<std::streamsize>(size * sizeof(T)));
    if (!in) throw ConfigError("truncated optimizer state");
  }
}

template <typename T>
void ensure_state(std::vector<std::vector<T>>& state, const std::vector<Param<T>>& params) {
  if (state.size() == params.size()) return;
  state.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) state[i].assign(params[i].value.size(), T(0));
}

template <typename T>
class Sgd final : public Optimizer<T> {
 public:
  explicit Sgd(const OptimizerSpec& spec) : spec_(spec) {}

  void step(std::vector<Param<T>>& params, double lr) override {
    ensure_state(velocity_, params);
    const T mu = static_cast<T>(spec_.momentum);
    const T step = static_cast<T>(lr);
    for (std::size_t i = 0; i < params.size(); ++i) {
      Param<T>& p = params[i];
      const T wd = p.decay ? static_cast<T>(spec_.weight_decay) : T(0);
      auto& v = velocity_[i];
      for (std::size_t j = 0; j < p.value.size(); ++j) {
        const T g = p.grad[j] + wd * p.value[j];
        v[j] = mu * v[j] + g;
        const T d = spec_.nesterov ? g + mu * v[j] : v[j];
        p.value[j] -= step * d;
      }
    }
  }

  void save(std::ostream& out) const override { write_buffers(out, velocity_); }
  void load(std::istream& in) override { read_buffers(in, velocity_); }

 private:
  OptimizerSpec spec_;
  std::vector<std::vector<T>> velocity_;
};

template <typename T>
class Lamb final : public Optimizer<T> {
 public:
  explicit Lamb(const OptimizerSpec& spec) : spec_(spec) {}

  void step(std::vector<Param<T>>& params, double lr) override {
    ensure_state(m_, params);
    ensure_state(v_, params);
    ++t_;
    const double b1 = spec_.beta1, b2 = spec_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    std::vector<double> update;
    for (std::size_t i = 0; i < params.size(); ++i) {
      Param<T>& p = params[i];
      const double wd = p.decay ? spec_.weight_decay : 0.0;
      update.assign(p.value.size(), 0.0);
      double wnorm = 0.0, unorm = 0.0;
      for (std::size_t j = 0; j < p.value.size(); ++j) {
        const double g = static_cast<double>(p.grad[j]);
        const double m = b1 * static_cast<double>(m_[i][j]) + (1.0 - b1) * g;
        const double v = b2 * static_cast<double>(v_[i][j]) + (1.0 - b2) * g * g;
        m_[i][j] = static_cast<T>(m);
        v_[i][j] = static_cast<T>(v);
        const double w = static_cast<double>(p.value[j]);
        const double u = (m / c1) / (std::sqrt(v / c2) + spec_.eps) + wd * w;
        update[j] = u;
        wnorm += w * w;
        unorm += u * u;
      }
      wnorm = std::sqrt(wnorm);
      unorm = std::sqrt(unorm);
      const double trust = (wnorm > 0.0 && unorm > 0.0) ? wnorm / unorm : 1.0;
      for (std::size_t j = 0; j < p.value.size(); ++j) {
        p.value[j] -= static_cast<T>(lr * trust * update[j]);
      }
    }
  }

  void save(std::ostream& out) const override {
    out.write(reinterpret_cast<const char*>(&t_), sizeof(t_));
    write_buffers(out, m_);
    write_buffers(out, v_);
  }
  void load(std::istream& in) override {
    in.read(reinterpret_cast<char*>(&t_), sizeof(t_));
    read_buffers(in, m_);
    read_buffers(in, v_);
  }

 private:
  OptimizerSpec spec_;
  long t_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

ScheduleKind schedule_kind(const std::string& name) {
  if (name == "cosine") return ScheduleKind::kCosine;
  if (name == "step") return ScheduleKind::kStep;
  if (name == "constant") return ScheduleKind::kConstant;
  throw ConfigError("unknown learning-rate schedule '" + name + "'");
}

std::string schedule_name(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::kCosine: return "cosine";
    case ScheduleKind::kStep: return "step";
    case ScheduleKind::kConstant: return "constant";
  }
  return "cosine";
}

}  // namespace

template <typename T>
std::unique_ptr<Optimizer<T>> make_optimizer(const OptimizerSpec& spec) {
  if (spec.kind == "sgd") return std::make_unique<Sgd<T>>(spec);
  if (spec.kind == "lamb") return std::make_unique<Lamb<T>>(spec);
  throw ConfigError("unknown optimizer '" + spec.kind + "'");
}

OptimizerSpec optimizer_from_json(const nlohmann::json& j) {
  OptimizerSpec spec;
  spec.kind = j.value("kind", spec.kind);
  if (spec.kind != "sgd" && spec.kind != "lamb") throw ConfigError("unknown optimizer '" + spec.kind + "'");
  spec.momentum = j.value("momentum", spec.momentum);
  spec.nesterov = j.value("nesterov", spec.nesterov);
  spec.weight_decay = j.value("weight_decay", spec.weight_decay);
  spec.beta1 = j.value("beta1", spec.beta1);
  spec.beta2 = j.value("beta2", spec.beta2);
  spec.eps = j.value("eps", spec.eps);
  spec.schedule.kind = schedule_kind(j.value("schedule", std::string("cosine")));
  spec.schedule.base_lr = j.value("lr", spec.schedule.base_lr);
  spec.schedule.final_lr = j.value("final_lr", spec.schedule.final_lr);
  spec.schedule.warmup_iters = j.value("warmup_iters", spec.schedule.warmup_iters);
  spec.schedule.gamma = j.value("gamma", spec.schedule.gamma);
  if (j.contains("milestones")) spec.schedule.milestones = j.at("milestones").get<std::vector<long>>();
  if (spec.schedule.base_lr < 0) throw ConfigError("learning rate must be non-negative");
  return spec;
}

nlohmann::json optimizer_to_json(const OptimizerSpec& spec) {
  nlohmann::json j;
  j["kind"] = spec.kind;
  j["lr"] = spec.schedule.base_lr;
  j["schedule"] = schedule_name(spec.schedule.kind);
  j["final_lr"] = spec.schedule.final_lr;
  j["warmup_iters"] = spec.schedule.warmup_iters;
  j["milestones"] = spec.schedule.milestones;
  j["gamma"] = spec.schedule.gamma;
  j["momentum"] = spec.momentum;
  j["nesterov"] = spec.nesterov;
  j["weight_decay"] = spec.weight_decay;
  j["beta1"] = spec.beta1;
  j["beta2"] = spec.beta2;
  j["eps"] = spec.eps;
  return j;
}

template std::unique_ptr<Optimizer<float>> make_optimizer<float>(const OptimizerSpec&);
template std::unique_ptr<Optimizer<double>> make_optimizer<double>(const OptimizerSpec&);

}  // namespace parawidth
