#include "branch_lln/engine.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <queue>

#include "branch_lln/parallel.hpp"
#include "branch_lln/stats.hpp"

namespace branch_lln::engine {

namespace {

struct Event {
  double time = 0.0;
  enum class Kind : std::uint8_t { Absorb, Branch } kind = Kind::Branch;
  ParticleId id;
  std::uint64_t idkey = 0;
  double position = 0.0;  // branch position (live coordinate)
  int offspring = 0;
};

// min-heap order on (time, label); labels are unique, so the order is total
struct EventAfter {
  bool operator()(const Event& a, const Event& b) const {
    if (a.time != b.time) return a.time > b.time;
    return b.id < a.id;
  }
};

class Simulator {
 public:
  explicit Simulator(const BranchConfig& cfg)
      : cfg_(cfg),
        motion_(*cfg.motion),
        snaps_(cfg.snapshot_times),
        buffers_(snaps_.size()),
        births_delta_(snaps_.size(), 0),
        absorbed_delta_(snaps_.size(), 0),
        dead_delta_(snaps_.size(), 0) {}

  Trajectory run() {
    tally(births_delta_, 0.0);  // the initial particle
    spawn(ParticleId{}, root_key(cfg_.seed), 0.0,
          cfg_.x0);
    while (!overflowed_ && !heap_.empty()) {
      const Event ev = heap_.top();
      heap_.pop();
      process(ev);
      if (live_ == 0) {
        extinct_time_ = ev.time;
        break;
      }
    }
    return assemble();
  }

 private:
  void tally(std::vector<std::uint64_t>& deltas, double t) {
    const auto it = std::lower_bound(snaps_.begin(), snaps_.end(), t);
    if (it != snaps_.end()) ++deltas[std::size_t(it - snaps_.begin())];
  }

  // Advances the walking particle to `target`, splitting the stretch into
  // equal substeps <= step_dt. Returns false when absorbed on the way (the
  // absorption is tallied and scheduled).
  bool advance_to(double target, const ParticleId& id, double& t_cur,
                  ParticleState& s, RandomStream& rs) {
    if (target <= t_cur) return true;
    const double span = target - t_cur;
    const int nsub = std::max(1, int(std::ceil(span / cfg_.step_dt - 1e-9)));
    const double dt = span / nsub;
    for (int i = 0; i < nsub; ++i) {
      const StepResult sr = motion_.step(s, dt, rs);
      if (!sr.state.is_live()) {
        const double t_abs = t_cur + i * dt + std::min(sr.absorbed_at, dt);
        tally(absorbed_delta_, t_abs);
        heap_.push(Event{t_abs, Event::Kind::Absorb, id, 0, 0.0, 0});
        return false;
      }
      s = sr.state;
    }
    t_cur = target;
    return true;
  }

  // Creates the particle, walks its whole lifetime immediately (recording
  // snapshots), and schedules its resolution event. The walk happens at
  // birth, so heap processing stays chronological.
  void spawn(const ParticleId& id, std::uint64_t idkey, double t_birth,
             ParticleState state) {
    ++live_;
    if (live_ > cfg_.max_population) {
      overflowed_ = true;
      overflow_time_ = t_birth;
      return;
    }
    RandomStream clock = stream_for_key(idkey, kBranchClock);
    const double t_branch = t_birth + clock.exponential(cfg_.r);
    const double resolve = std::min(t_branch, cfg_.t_end);

    RandomStream ms = stream_for_key(idkey, kMotion);
    double t_cur = t_birth;
    ParticleState s = state;
    auto it = std::lower_bound(snaps_.begin(), snaps_.end(), t_birth);
    for (; it != snaps_.end() && *it <= resolve; ++it) {
      if (!advance_to(*it, id, t_cur, s, ms)) return;
      // at exactly t_branch the parent is already replaced by its children
      if (*it < t_branch)
        buffers_[std::size_t(it - snaps_.begin())].emplace_back(id, s);
    }
    if (!advance_to(resolve, id, t_cur, s, ms)) return;
    if (t_branch > cfg_.t_end) return;  // survives the horizon, no event

    RandomStream os = stream_for_key(idkey, kOffspring);
    const int k = cfg_.offspring.sample(os);
    heap_.push(Event{t_branch, Event::Kind::Branch, id, idkey, s.value, k});
  }

  void process(const Event& ev) {
    if (ev.kind == Event::Kind::Absorb) {
      --live_;
      return;
    }
    --live_;  // the parent dies at its ring
    if (ev.offspring == 0) {
      tally(dead_delta_, ev.time);
      return;
    }
    // one child continues the parent's account, the other k-1 are new births
    for (int i = 1; i < ev.offspring; ++i) tally(births_delta_, ev.time);
    for (int i = 0; i < ev.offspring && !overflowed_; ++i) {
      spawn(ev.id.child(std::uint32_t(i)),
            fold_key(ev.idkey, std::uint64_t(i)), ev.time,
            ParticleState::live(ev.position));
    }
  }

  Trajectory assemble() {
    Trajectory out;
    out.overflowed = overflowed_;
    out.extinct_time = extinct_time_;
    std::uint64_t births = 0, absorbed = 0, dead = 0;
    for (std::size_t i = 0; i < snaps_.size(); ++i) {
      if (overflowed_ && snaps_[i] >= overflow_time_) break;
      births += births_delta_[i];
      absorbed += absorbed_delta_[i];
      dead += dead_delta_[i];
      Population p;
      p.time = snaps_[i];
      p.particles = std::move(buffers_[i]);
      p.births = births;
      p.absorbed_count = absorbed;
      p.dead_count = dead;
      out.snapshots.push_back(std::move(p));
    }
    return out;
  }

  const BranchConfig& cfg_;
  const MotionModel& motion_;
  std::vector<double> snaps_;
  std::vector<std::vector<std::pair<ParticleId, ParticleState>>> buffers_;
  std::vector<std::uint64_t> births_delta_, absorbed_delta_, dead_delta_;
  std::priority_queue<Event, std::vector<Event>, EventAfter> heap_;
  std::size_t live_ = 0;
  bool overflowed_ = false;
  double overflow_time_ = 0.0;
  std::optional<double> extinct_time_;
};

}  // namespace

Trajectory simulate(const BranchConfig& cfg) {
  cfg.validate();
  Simulator sim(cfg);
  return sim.run();
}

ReplicaReduction run_replicas(
    const BranchConfig& cfg, std::size_t n_rep,
    const std::function<std::vector<double>(const Trajectory&)>& reduce,
    unsigned workers, const std::function<void(std::size_t)>& progress) {
  cfg.validate();
  ReplicaReduction out;
  out.rows.resize(n_rep);
  std::vector<std::uint8_t> overflow(n_rep, 0);
  std::atomic<std::size_t> done{0};
  std::mutex progress_mu;
  parallel_for(n_rep, workers, [&](std::size_t i) {
    BranchConfig rc = cfg;
    rc.seed = replica_seed(cfg.seed, i);
    const Trajectory traj = simulate(rc);
    overflow[i] = traj.overflowed ? 1 : 0;
    out.rows[i] = reduce(traj);
    const std::size_t d = done.fetch_add(1) + 1;
    if (progress) {
      std::lock_guard<std::mutex> lock(progress_mu);
      progress(d);
    }
  });
  for (auto f : overflow) out.overflow_count += f;
  const std::size_t width = n_rep ? out.rows.front().size() : 0;
  out.merged.resize(width);
  std::vector<double> col(n_rep);
  for (std::size_t j = 0; j < width; ++j) {
    for (std::size_t i = 0; i < n_rep; ++i) col[i] = out.rows[i][j];
    out.merged[j] = stats::estimate(col);
  }
  return out;
}

std::vector<std::vector<double>> run_replicas_collect(
    const BranchConfig& cfg, std::size_t n_rep,
    const std::function<std::vector<double>(const Trajectory&)>& collect,
    unsigned workers, std::size_t* overflow_count,
    const std::function<void(std::size_t)>& progress) {
  cfg.validate();
  std::vector<std::vector<double>> out(n_rep);
  std::vector<std::uint8_t> overflow(n_rep, 0);
  std::atomic<std::size_t> done{0};
  std::mutex progress_mu;
  parallel_for(n_rep, workers, [&](std::size_t i) {
    BranchConfig rc = cfg;
    rc.seed = replica_seed(cfg.seed, i);
    const Trajectory traj = simulate(rc);
    overflow[i] = traj.overflowed ? 1 : 0;
    out[i] = collect(traj);
    const std::size_t d = done.fetch_add(1) + 1;
    if (progress) {
      std::lock_guard<std::mutex> lock(progress_mu);
      progress(d);
    }
  });
  if (overflow_count) {
    *overflow_count = 0;
    for (auto f : overflow) *overflow_count += f;
  }
  return out;
}

}  // namespace branch_lln::engine
