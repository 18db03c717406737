// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "riverpref/action.hpp"
#include "riverpref/common.hpp"

namespace riverpref {

inline constexpr int kMaskSize = 16;
inline constexpr int kMaskCells = kMaskSize * kMaskSize;
inline constexpr int kWorldFormatVersion = 1;

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

/// One arc-length element of the coverage ground set.
struct Segment {
  Point2 center;
  Point2 tangent;  // unit norm
  double arc_begin = 0.0;
  double arc_end = 0.0;
};

struct WorldConfig {
  std::vector<Point2> spline;  // centerline control points, meters
  double width = 10.0;
  double corridor_half_width = 7.0;
  double z_min = 2.0;
  double z_max = 10.0;
  double segment_length = 1.0;
  double yaw_limit_deg = 90.0;
  int step_limit = 600;
  std::uint64_t seed = 0;

  /// 200 m sinusoidal river, width 10 m.
  static WorldConfig default_river();
  /// Straight river along +x of the given length (tests, symmetry checks).
  static WorldConfig straight(double length, double width = 10.0);
};

struct Pose {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
  double yaw = 0.0;  // degrees, [-180, 180)
  friend bool operator==(const Pose&, const Pose&) = default;
};

/// Visited flags over the segments plus their count.
class CoverageState {
 public:
  CoverageState() = default;
  explicit CoverageState(std::size_t num_segments) : visited_(num_segments, 0) {}

  std::size_t size() const { return visited_.size(); }
  std::size_t count() const { return count_; }
  bool visited(std::size_t id) const { return visited_.at(id) != 0; }
  void mark(std::size_t id) {
    if (visited_.at(id) == 0) {
      visited_[id] = 1;
      ++count_;
    }
  }
  bool complete() const { return count_ == visited_.size(); }
  std::string bitstring() const;

  friend bool operator==(const CoverageState&, const CoverageState&) = default;

 private:
  std::vector<std::uint8_t> visited_;
  std::size_t count_ = 0;
};

using Mask = std::array<std::uint8_t, kMaskCells>;  // row-major, row 0 = top of image

struct Observation {
  Mask mask{};
  MultiDiscreteAction prev_action;

  friend bool operator==(const Observation&, const Observation&) = default;
};

std::string mask_to_bits(const Mask& mask);
Mask mask_from_bits(const std::string& bits);

enum class TerminationReason { kNone, kCorridorViolation, kFullTraversal, kStepLimit };

std::string to_string(TerminationReason r);
TerminationReason termination_from_string(const std::string& s);

struct StepOutcome {
  Observation observation;
  double reward = 0.0;
  bool terminated = false;
  TerminationReason termination_reason = TerminationReason::kNone;
  std::optional<std::size_t> segment_entered;
};

struct StartSpec {
  std::size_t segment_index = 0;
  double lateral_offset = 0.0;  // meters, + = left of the downstream tangent
  double z = 6.0;
  double yaw_offset = 0.0;  // degrees relative to the local tangent
  friend bool operator==(const StartSpec&, const StartSpec&) = default;
};

/// Nearest-arc-length projection of a horizontal position onto the centerline.
struct Projection {
  double arc = 0.0;
  double lateral = 0.0;   // signed, + = left
  double distance = 0.0;  // |lateral| except past the ends
  Point2 tangent;
  bool beyond_ends = false;
};

/// Kinematic transition without rendering.
struct Transition {
  Pose pose;
  bool violation = false;
  std::optional<std::size_t> segment;
};

/// Full episode state as carried between steps.
struct EpisodeState {
  Pose pose;
  CoverageState coverage;
  int steps = 0;
  bool terminated = false;
  std::uint64_t seed = 0;
};

/// Deterministic river-following world: spline corridor, arc-length coverage
/// elements, first-person water mask.
class RiverWorld {
 public:
  explicit RiverWorld(WorldConfig cfg);

  const WorldConfig& config() const { return cfg_; }
  const std::vector<Segment>& segments() const { return segments_; }
  std::size_t num_segments() const { return segments_.size(); }
  double total_length() const { return arc_.back(); }
  const std::vector<Point2>& polyline() const { return poly_; }

  Projection project(double x, double y) const;
  std::size_t segment_at_arc(double arc) const;
  /// Downstream tangent heading in degrees at a horizontal position.
  double tangent_yaw_deg(double x, double y) const;
  bool inside_corridor(const Pose& p) const;
  bool in_river(double x, double y) const;

  std::tuple<Pose, CoverageState, Observation> reset(const StartSpec& start, std::uint64_t seed) const;
  EpisodeState reset_episode(const StartSpec& start, std::uint64_t seed) const;

  /// Kinematics + corridor test only (used by lookahead oracles).
  Transition transition(const Pose& pose, const MultiDiscreteAction& action) const;

  std::tuple<Pose, CoverageState, StepOutcome> step(const Pose& pose, const CoverageState& cov,
                                                    const MultiDiscreteAction& action) const;
  /// Steps an EpisodeState in place, enforcing the step limit and refusing
  /// terminated episodes.
  StepOutcome step(EpisodeState& ep, const MultiDiscreteAction& action) const;

  double marginal_gain(std::size_t segment_id, const CoverageState& cov) const;
  Mask render_mask(const Pose& pose) const;

 private:
  std::size_t piece_at_arc(double arc) const;
  void build_grid();

  WorldConfig cfg_;
  std::vector<Point2> poly_;
  std::vector<double> arc_;
  std::vector<Segment> segments_;

  // Uniform grid over polyline pieces, each piece registered in every cell
  // its bounding box (grown by the query radius) touches.
  double cell_ = 4.0;
  double grid_x0_ = 0.0, grid_y0_ = 0.0;
  int grid_nx_ = 0, grid_ny_ = 0;
  double grid_radius_ = 0.0;
  std::vector<std::vector<std::uint32_t>> grid_;
};

double wrap_deg(double deg);

nlohmann::json world_to_json(const WorldConfig& cfg);
WorldConfig world_from_json(const nlohmann::json& j);
WorldConfig load_world(const std::string& path);
void save_world(const WorldConfig& cfg, const std::string& path);

nlohmann::json pose_to_json(const Pose& p);
Pose pose_from_json(const nlohmann::json& j);
nlohmann::json start_to_json(const StartSpec& s);
StartSpec start_from_json(const nlohmann::json& j);

/// Samples a start within the inner part of the corridor (initial-state distribution).
StartSpec sample_start(const RiverWorld& world, Rng& rng);

}  // namespace riverpref
