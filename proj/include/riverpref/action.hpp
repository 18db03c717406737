// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "riverpref/common.hpp"

namespace riverpref {

inline constexpr int kNumBranches = 4;
inline constexpr int kBranchSize = 3;
inline constexpr int kNumJointActions = 81;
inline constexpr int kActionOneHotDim = kNumBranches * kBranchSize;

/// Branch order: vertical, yaw, forward, lateral. Index 1 is the no-op on
/// every branch; 0 is the negative increment and 2 the positive one.
enum class Branch : int { kVertical = 0, kYaw = 1, kForward = 2, kLateral = 3 };

inline constexpr std::array<double, 3> kVerticalStep{-1.0, 0.0, 1.0};
inline constexpr std::array<double, 3> kYawStepDeg{-15.0, 0.0, 15.0};
inline constexpr std::array<double, 3> kForwardStep{-1.0, 0.0, 1.0};
inline constexpr std::array<double, 3> kLateralStep{-0.5, 0.0, 0.5};

struct MultiDiscreteAction {
  std::array<std::uint8_t, kNumBranches> idx{1, 1, 1, 1};

  static MultiDiscreteAction identity() { return {}; }

  static MultiDiscreteAction make(int vertical, int yaw, int forward, int lateral) {
    MultiDiscreteAction a;
    const std::array<int, 4> v{vertical, yaw, forward, lateral};
    for (int b = 0; b < kNumBranches; ++b) {
      if (v[b] < 0 || v[b] >= kBranchSize) throw UsageError("action branch index out of range");
      a.idx[b] = static_cast<std::uint8_t>(v[b]);
    }
    return a;
  }

  /// Mixed-radix index: vertical*27 + yaw*9 + forward*3 + lateral.
  int joint_index() const { return idx[0] * 27 + idx[1] * 9 + idx[2] * 3 + idx[3]; }

  static MultiDiscreteAction from_joint(int j) {
    if (j < 0 || j >= kNumJointActions) throw UsageError("joint action index out of range");
    return make(j / 27, (j / 9) % 3, (j / 3) % 3, j % 3);
  }

  int operator[](Branch b) const { return idx[static_cast<int>(b)]; }

  double vertical_m() const { return kVerticalStep[idx[0]]; }
  double yaw_deg() const { return kYawStepDeg[idx[1]]; }
  double forward_m() const { return kForwardStep[idx[2]]; }
  double lateral_m() const { return kLateralStep[idx[3]]; }

  /// 12-dim one-hot (3 slots per branch).
  Vec one_hot() const {
    Vec v = Vec::Zero(kActionOneHotDim);
    for (int b = 0; b < kNumBranches; ++b) v(b * kBranchSize + idx[b]) = 1.0;
    return v;
  }

  friend bool operator==(const MultiDiscreteAction&, const MultiDiscreteAction&) = default;
};

}  // namespace riverpref
