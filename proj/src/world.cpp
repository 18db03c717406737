// SPDX-License-Identifier: Apache-2.0
#include "riverpref/world.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

namespace riverpref {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;
constexpr double kCameraPitchDeg = -15.0;
constexpr int kSplineSubdivisions = 8;

Point2 catmull_rom(const Point2& p0, const Point2& p1, const Point2& p2, const Point2& p3, double t) {
  const double t2 = t * t;
  const double t3 = t2 * t;
  auto axis = [&](double a0, double a1, double a2, double a3) {
    return 0.5 * (2.0 * a1 + (-a0 + a2) * t + (2.0 * a0 - 5.0 * a1 + 4.0 * a2 - a3) * t2 +
                  (-a0 + 3.0 * a1 - 3.0 * a2 + a3) * t3);
  };
  return {axis(p0.x, p1.x, p2.x, p3.x), axis(p0.y, p1.y, p2.y, p3.y)};
}

void validate(const WorldConfig& c) {
  if (c.spline.size() < 2) throw ConfigError("world: spline needs at least 2 control points");
  if (!(c.segment_length > 0.0)) throw ConfigError("world: segment_length must be > 0");
  if (!(c.width > 0.0)) throw ConfigError("world: width must be > 0");
  if (c.corridor_half_width < c.width / 2.0)
    throw ConfigError("world: corridor_half_width must be >= width/2");
  if (!(c.z_min > 0.0) || !(c.z_max > c.z_min)) throw ConfigError("world: need 0 < z_min < z_max");
  if (!(c.yaw_limit_deg > 0.0) || c.yaw_limit_deg > 180.0)
    throw ConfigError("world: yaw_limit_deg must be in (0, 180]");
  if (c.step_limit < 1) throw ConfigError("world: step_limit must be >= 1");
}

}  // namespace

double wrap_deg(double deg) {
  double w = std::fmod(deg + 180.0, 360.0);
  if (w < 0.0) w += 360.0;
  w -= 180.0;
  if (w >= 180.0) w -= 360.0;
  return w;
}

WorldConfig WorldConfig::default_river() {
  WorldConfig c;
  for (int i = 0; i <= 38; ++i) {
    const double x = 5.0 * i;
    c.spline.push_back({x, 8.0 * std::sin(2.0 * std::numbers::pi * x / 100.0)});
  }
  // Rescale so the centerline is 199.9 m long: 200 segments, the last one
  // nearly full length.
  const double scale = 199.9 / RiverWorld(c).total_length();
  for (auto& p : c.spline) {
    p.x *= scale;
    p.y *= scale;
  }
  return c;
}

WorldConfig WorldConfig::straight(double length, double width) {
  WorldConfig c;
  c.spline = {{0.0, 0.0}, {length, 0.0}};
  c.width = width;
  c.corridor_half_width = width / 2.0 + 2.0;
  return c;
}

std::string CoverageState::bitstring() const {
  std::string s(visited_.size(), '0');
  for (std::size_t i = 0; i < visited_.size(); ++i)
    if (visited_[i]) s[i] = '1';
  return s;
}

std::string mask_to_bits(const Mask& mask) {
  std::string s(kMaskCells, '0');
  for (int i = 0; i < kMaskCells; ++i)
    if (mask[i]) s[i] = '1';
  return s;
}

Mask mask_from_bits(const std::string& bits) {
  if (bits.size() != static_cast<std::size_t>(kMaskCells))
    throw FormatError("mask bitstring must have 256 characters");
  Mask m{};
  for (int i = 0; i < kMaskCells; ++i) {
    if (bits[i] == '1') m[i] = 1;
    else if (bits[i] != '0') throw FormatError("mask bitstring may only contain 0/1");
  }
  return m;
}

std::string to_string(TerminationReason r) {
  switch (r) {
    case TerminationReason::kNone: return "none";
    case TerminationReason::kCorridorViolation: return "corridor_violation";
    case TerminationReason::kFullTraversal: return "full_traversal";
    case TerminationReason::kStepLimit: return "step_limit";
  }
  return "none";
}

TerminationReason termination_from_string(const std::string& s) {
  if (s == "none") return TerminationReason::kNone;
  if (s == "corridor_violation") return TerminationReason::kCorridorViolation;
  if (s == "full_traversal") return TerminationReason::kFullTraversal;
  if (s == "step_limit") return TerminationReason::kStepLimit;
  throw FormatError("unknown termination reason: " + s);
}

RiverWorld::RiverWorld(WorldConfig cfg) : cfg_(std::move(cfg)) {
  validate(cfg_);
  const auto& cp = cfg_.spline;
  const std::size_t n = cp.size();
  auto at = [&](std::ptrdiff_t i) {
    return cp[static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i, 0, static_cast<std::ptrdiff_t>(n) - 1))];
  };
  std::vector<Point2> raw;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const auto si = static_cast<std::ptrdiff_t>(i);
    for (int k = 0; k < kSplineSubdivisions; ++k)
      raw.push_back(catmull_rom(at(si - 1), at(si), at(si + 1), at(si + 2),
                                static_cast<double>(k) / kSplineSubdivisions));
  }
  raw.push_back(cp.back());
  for (const auto& p : raw) {
    if (!poly_.empty() && std::hypot(p.x - poly_.back().x, p.y - poly_.back().y) < 1e-12) continue;
    poly_.push_back(p);
  }
  if (poly_.size() < 2) throw ConfigError("world: spline has zero length");

  arc_.assign(poly_.size(), 0.0);
  for (std::size_t i = 1; i < poly_.size(); ++i)
    arc_[i] = arc_[i - 1] + std::hypot(poly_[i].x - poly_[i - 1].x, poly_[i].y - poly_[i - 1].y);

  const double total = arc_.back();
  const auto nseg = static_cast<std::size_t>(std::ceil(total / cfg_.segment_length - 1e-9));
  segments_.reserve(nseg);
  for (std::size_t k = 0; k < nseg; ++k) {
    Segment s;
    s.arc_begin = static_cast<double>(k) * cfg_.segment_length;
    s.arc_end = std::min(static_cast<double>(k + 1) * cfg_.segment_length, total);
    const double mid = 0.5 * (s.arc_begin + s.arc_end);
    const std::size_t piece = piece_at_arc(mid);
    const Point2& a = poly_[piece];
    const Point2& b = poly_[piece + 1];
    const double len = arc_[piece + 1] - arc_[piece];
    const double t = (mid - arc_[piece]) / len;
    s.center = {a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)};
    s.tangent = {(b.x - a.x) / len, (b.y - a.y) / len};
    segments_.push_back(s);
  }
  build_grid();
}

std::size_t RiverWorld::piece_at_arc(double arc) const {
  auto it = std::upper_bound(arc_.begin(), arc_.end(), arc);
  std::size_t idx = it == arc_.begin() ? 0 : static_cast<std::size_t>(it - arc_.begin()) - 1;
  return std::min(idx, poly_.size() - 2);
}

std::size_t RiverWorld::segment_at_arc(double arc) const {
  const double k = std::floor(arc / cfg_.segment_length);
  if (k <= 0.0) return 0;
  return std::min(static_cast<std::size_t>(k), segments_.size() - 1);
}

void RiverWorld::build_grid() {
  grid_radius_ = std::max(cfg_.corridor_half_width, cfg_.width / 2.0) + 1e-6;
  double xmin = poly_[0].x, xmax = xmin, ymin = poly_[0].y, ymax = ymin;
  for (const auto& p : poly_) {
    xmin = std::min(xmin, p.x);
    xmax = std::max(xmax, p.x);
    ymin = std::min(ymin, p.y);
    ymax = std::max(ymax, p.y);
  }
  grid_x0_ = xmin - grid_radius_ - cell_;
  grid_y0_ = ymin - grid_radius_ - cell_;
  grid_nx_ = static_cast<int>(std::ceil((xmax + grid_radius_ + cell_ - grid_x0_) / cell_)) + 1;
  grid_ny_ = static_cast<int>(std::ceil((ymax + grid_radius_ + cell_ - grid_y0_) / cell_)) + 1;
  grid_.assign(static_cast<std::size_t>(grid_nx_) * grid_ny_, {});
  for (std::size_t i = 0; i + 1 < poly_.size(); ++i) {
    const double bx0 = std::min(poly_[i].x, poly_[i + 1].x) - grid_radius_;
    const double bx1 = std::max(poly_[i].x, poly_[i + 1].x) + grid_radius_;
    const double by0 = std::min(poly_[i].y, poly_[i + 1].y) - grid_radius_;
    const double by1 = std::max(poly_[i].y, poly_[i + 1].y) + grid_radius_;
    const int cx0 = static_cast<int>(std::floor((bx0 - grid_x0_) / cell_));
    const int cx1 = static_cast<int>(std::floor((bx1 - grid_x0_) / cell_));
    const int cy0 = static_cast<int>(std::floor((by0 - grid_y0_) / cell_));
    const int cy1 = static_cast<int>(std::floor((by1 - grid_y0_) / cell_));
    for (int cy = cy0; cy <= cy1; ++cy)
      for (int cx = cx0; cx <= cx1; ++cx)
        grid_[static_cast<std::size_t>(cy) * grid_nx_ + cx].push_back(static_cast<std::uint32_t>(i));
  }
}

Projection RiverWorld::project(double x, double y) const {
  Projection best;
  best.distance = std::numeric_limits<double>::infinity();
  const int cx = static_cast<int>(std::floor((x - grid_x0_) / cell_));
  const int cy = static_cast<int>(std::floor((y - grid_y0_) / cell_));
  if (cx < 0 || cy < 0 || cx >= grid_nx_ || cy >= grid_ny_) return best;
  const std::size_t last = poly_.size() - 2;
  for (const std::uint32_t i : grid_[static_cast<std::size_t>(cy) * grid_nx_ + cx]) {
    const Point2& a = poly_[i];
    const Point2& b = poly_[i + 1];
    const double len = arc_[i + 1] - arc_[i];
    const double dx = (b.x - a.x) / len;
    const double dy = (b.y - a.y) / len;
    const double along = (x - a.x) * dx + (y - a.y) * dy;
    const double t = std::clamp(along, 0.0, len);
    const double fx = a.x + t * dx;
    const double fy = a.y + t * dy;
    const double d = std::hypot(x - fx, y - fy);
    if (d < best.distance) {
      best.distance = d;
      best.arc = arc_[i] + t;
      best.tangent = {dx, dy};
      best.lateral = dx * (y - a.y) - dy * (x - a.x);
      best.beyond_ends = (i == 0 && along < 0.0) || (i == last && along > len);
    }
  }
  return best;
}

double RiverWorld::tangent_yaw_deg(double x, double y) const {
  const Projection p = project(x, y);
  if (!std::isfinite(p.distance)) {
    const auto& s = segments_.front();
    return std::atan2(s.tangent.y, s.tangent.x) / kDeg;
  }
  return std::atan2(p.tangent.y, p.tangent.x) / kDeg;
}

bool RiverWorld::inside_corridor(const Pose& p) const {
  if (p.z < cfg_.z_min || p.z > cfg_.z_max) return false;
  const Projection pr = project(p.x, p.y);
  return !pr.beyond_ends && pr.distance <= cfg_.corridor_half_width;
}

bool RiverWorld::in_river(double x, double y) const {
  const Projection pr = project(x, y);
  return !pr.beyond_ends && pr.distance <= cfg_.width / 2.0;
}

EpisodeState RiverWorld::reset_episode(const StartSpec& start, std::uint64_t seed) const {
  if (start.segment_index >= segments_.size()) throw ConfigError("start: segment_index out of range");
  if (std::abs(start.lateral_offset) > cfg_.corridor_half_width)
    throw ConfigError("start: lateral_offset outside the corridor");
  if (start.z < cfg_.z_min || start.z > cfg_.z_max) throw ConfigError("start: z outside the corridor");
  if (std::abs(start.yaw_offset) > cfg_.yaw_limit_deg) throw ConfigError("start: |yaw_offset| exceeds yaw limit");
  const Segment& s = segments_[start.segment_index];
  EpisodeState ep;
  ep.pose.x = s.center.x - start.lateral_offset * s.tangent.y;
  ep.pose.y = s.center.y + start.lateral_offset * s.tangent.x;
  ep.pose.z = start.z;
  ep.pose.yaw = wrap_deg(std::atan2(s.tangent.y, s.tangent.x) / kDeg + start.yaw_offset);
  if (!inside_corridor(ep.pose)) throw ConfigError("start: position outside the corridor");
  ep.coverage = CoverageState(segments_.size());
  ep.coverage.mark(segment_at_arc(project(ep.pose.x, ep.pose.y).arc));
  ep.seed = seed;
  return ep;
}

std::tuple<Pose, CoverageState, Observation> RiverWorld::reset(const StartSpec& start, std::uint64_t seed) const {
  EpisodeState ep = reset_episode(start, seed);
  Observation obs{render_mask(ep.pose), MultiDiscreteAction::identity()};
  return {ep.pose, ep.coverage, obs};
}

Transition RiverWorld::transition(const Pose& pose, const MultiDiscreteAction& action) const {
  const double yaw = pose.yaw * kDeg;
  const double c = std::cos(yaw);
  const double s = std::sin(yaw);
  const double f = action.forward_m();
  const double l = action.lateral_m();
  Transition tr;
  tr.pose.x = pose.x + f * c - l * s;
  tr.pose.y = pose.y + f * s + l * c;
  tr.pose.z = pose.z + action.vertical_m();
  tr.pose.yaw = wrap_deg(pose.yaw + action.yaw_deg());
  if (tr.pose.z < cfg_.z_min || tr.pose.z > cfg_.z_max) {
    tr.violation = true;
    return tr;
  }
  const Projection pr = project(tr.pose.x, tr.pose.y);
  if (pr.beyond_ends || !(pr.distance <= cfg_.corridor_half_width)) {
    tr.violation = true;
    return tr;
  }
  const double tangent = std::atan2(pr.tangent.y, pr.tangent.x) / kDeg;
  const double rel = wrap_deg(tr.pose.yaw - tangent);
  const double clamped = std::clamp(rel, -cfg_.yaw_limit_deg, cfg_.yaw_limit_deg);
  if (clamped != rel) tr.pose.yaw = wrap_deg(tangent + clamped);
  tr.segment = segment_at_arc(pr.arc);
  return tr;
}

std::tuple<Pose, CoverageState, StepOutcome> RiverWorld::step(const Pose& pose, const CoverageState& cov,
                                                              const MultiDiscreteAction& action) const {
  if (cov.size() != segments_.size()) throw UsageError("step: coverage state does not match world");
  const Transition tr = transition(pose, action);
  CoverageState next = cov;
  StepOutcome out;
  if (tr.violation) {
    out.terminated = true;
    out.termination_reason = TerminationReason::kCorridorViolation;
  } else {
    out.segment_entered = tr.segment;
    out.reward = marginal_gain(*tr.segment, cov);
    next.mark(*tr.segment);
    if (next.complete()) {
      out.terminated = true;
      out.termination_reason = TerminationReason::kFullTraversal;
    }
  }
  out.observation = Observation{render_mask(tr.pose), action};
  return {tr.pose, next, out};
}

StepOutcome RiverWorld::step(EpisodeState& ep, const MultiDiscreteAction& action) const {
  if (ep.terminated) throw UsageError("step: episode already terminated");
  auto [pose, cov, out] = step(ep.pose, ep.coverage, action);
  ep.pose = pose;
  ep.coverage = std::move(cov);
  ++ep.steps;
  if (!out.terminated && ep.steps >= cfg_.step_limit) {
    out.terminated = true;
    out.termination_reason = TerminationReason::kStepLimit;
  }
  ep.terminated = out.terminated;
  return out;
}

double RiverWorld::marginal_gain(std::size_t segment_id, const CoverageState& cov) const {
  if (segment_id >= segments_.size() || segment_id >= cov.size())
    throw UsageError("marginal_gain: invalid segment id");
  return cov.visited(segment_id) ? 0.0 : 1.0;
}

Mask RiverWorld::render_mask(const Pose& pose) const {
  Mask mask{};
  if (!(pose.z > 0.0)) return mask;
  const double yaw = pose.yaw * kDeg;
  const double pitch = kCameraPitchDeg * kDeg;
  const double cy = std::cos(yaw), sy = std::sin(yaw);
  const double cp = std::cos(pitch), sp = std::sin(pitch);
  // Forward, right and up axes of the camera; focal length 1 gives a 90 deg FOV.
  const double fx = cp * cy, fy = cp * sy, fz = sp;
  const double rx = sy, ry = -cy;
  const double ux = -sp * cy, uy = -sp * sy, uz = cp;
  for (int i = 0; i < kMaskSize; ++i) {
    const double v = 1.0 - ((i + 0.5) / kMaskSize) * 2.0;
    for (int j = 0; j < kMaskSize; ++j) {
      const double u = ((j + 0.5) / kMaskSize) * 2.0 - 1.0;
      const double dz = fz + v * uz;
      if (!(dz < 0.0)) continue;
      const double dx = fx + u * rx + v * ux;
      const double dy = fy + u * ry + v * uy;
      const double t = -pose.z / dz;
      if (in_river(pose.x + t * dx, pose.y + t * dy)) mask[static_cast<std::size_t>(i * kMaskSize + j)] = 1;
    }
  }
  return mask;
}

nlohmann::json world_to_json(const WorldConfig& c) {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : c.spline) pts.push_back({p.x, p.y});
  return {{"format_version", kWorldFormatVersion},
          {"spline", pts},
          {"width", c.width},
          {"corridor_half_width", c.corridor_half_width},
          {"z_min", c.z_min},
          {"z_max", c.z_max},
          {"segment_length", c.segment_length},
          {"yaw_limit_deg", c.yaw_limit_deg},
          {"step_limit", c.step_limit},
          {"seed", c.seed}};
}

WorldConfig world_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format_version").get<int>() != kWorldFormatVersion)
      throw FormatError("world file: unsupported format_version");
    WorldConfig c;
    c.spline.clear();
    for (const auto& p : j.at("spline")) c.spline.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    c.width = j.at("width").get<double>();
    c.corridor_half_width = j.value("corridor_half_width", c.width / 2.0 + 2.0);
    c.z_min = j.value("z_min", 2.0);
    c.z_max = j.value("z_max", 10.0);
    c.segment_length = j.value("segment_length", 1.0);
    c.yaw_limit_deg = j.value("yaw_limit_deg", 90.0);
    c.step_limit = j.value("step_limit", 600);
    c.seed = j.value("seed", std::uint64_t{0});
    validate(c);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("world file: ") + e.what());
  }
}

WorldConfig load_world(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open world file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("world file " + path + ": " + e.what());
  }
  return world_from_json(j);
}

void save_world(const WorldConfig& cfg, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write world file " + path);
  out << world_to_json(cfg).dump(2) << '\n';
}

nlohmann::json pose_to_json(const Pose& p) { return {{"x", p.x}, {"y", p.y}, {"z", p.z}, {"yaw", p.yaw}}; }

Pose pose_from_json(const nlohmann::json& j) {
  return {j.at("x").get<double>(), j.at("y").get<double>(), j.at("z").get<double>(), j.at("yaw").get<double>()};
}

nlohmann::json start_to_json(const StartSpec& s) {
  return {{"segment_index", s.segment_index},
          {"lateral_offset", s.lateral_offset},
          {"z", s.z},
          {"yaw_offset", s.yaw_offset}};
}

StartSpec start_from_json(const nlohmann::json& j) {
  return {j.at("segment_index").get<std::size_t>(), j.at("lateral_offset").get<double>(), j.at("z").get<double>(),
          j.at("yaw_offset").get<double>()};
}

StartSpec sample_start(const RiverWorld& world, Rng& rng) {
  const auto& c = world.config();
  StartSpec s;
  s.segment_index = static_cast<std::size_t>(uniform_index(rng, std::max<std::size_t>(1, world.num_segments() / 10)));
  const double lat = std::min(2.0, c.width / 2.0);
  s.lateral_offset = uniform(rng, -lat, lat);
  s.z = std::round(0.5 * (c.z_min + c.z_max));
  s.yaw_offset = uniform(rng, -std::min(30.0, c.yaw_limit_deg), std::min(30.0, c.yaw_limit_deg));
  return s;
}

}  // namespace riverpref
