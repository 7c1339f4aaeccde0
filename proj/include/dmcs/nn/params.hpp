#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dmcs/errors.hpp"

namespace dmcs::nn {

/// Independently freezable parameter groups: shared trunk (w), region head (w_r),
/// edge side branches plus their fusion weights (w_e), fusion network (w_f).
enum class Group : std::uint8_t { trunk = 0, region = 1, edge = 2, fusion = 3 };
inline constexpr std::array<Group, 4> kAllGroups = {Group::trunk, Group::region, Group::edge, Group::fusion};

inline std::string_view group_name(Group g) {
  switch (g) {
    case Group::trunk: return "w";
    case Group::region: return "w_r";
    case Group::edge: return "w_e";
    case Group::fusion: return "w_f";
  }
  return "?";
}

inline Group parse_group(std::string_view s) {
  for (Group g : kAllGroups)
    if (group_name(g) == s) return g;
  throw UsageError("unknown parameter group '" + std::string(s) + "' (expected w, w_r, w_e or w_f)");
}

/// Set of groups, stored as a bitmask.
class GroupSet {
 public:
  constexpr GroupSet() = default;
  constexpr GroupSet(std::initializer_list<Group> gs) {
    for (Group g : gs) insert(g);
  }
  static constexpr GroupSet all() { return {Group::trunk, Group::region, Group::edge, Group::fusion}; }

  constexpr void insert(Group g) { bits_ |= bit(g); }
  constexpr bool contains(Group g) const { return (bits_ & bit(g)) != 0; }
  constexpr bool empty() const { return bits_ == 0; }
  constexpr bool operator==(const GroupSet&) const = default;

  std::string str() const {
    std::string out;
    for (Group g : kAllGroups)
      if (contains(g)) out += (out.empty() ? "" : " ") + std::string(group_name(g));
    return out;
  }

 private:
  static constexpr std::uint8_t bit(Group g) { return static_cast<std::uint8_t>(1u << static_cast<int>(g)); }
  std::uint8_t bits_ = 0;
};

enum class ParamKind : std::uint8_t { conv_weight, bias, upsample, fuse_weight };

template <typename T>
struct ParamTensor {
  std::string name;
  Group group = Group::trunk;
  ParamKind kind = ParamKind::conv_weight;
  std::vector<int> shape;
  std::vector<T> value;
  int fan_in = 0;
  int fan_out = 0;

  // Weight decay skips the edge fusion vector and the upsampling kernels.
  bool decays() const { return kind == ParamKind::conv_weight || kind == ParamKind::bias; }
};

template <typename T>
class ParamSet {
 public:
  int add(ParamTensor<T> p) {
    if (index_.count(p.name)) throw UsageError("duplicate parameter " + p.name);
    std::size_t n = 1;
    for (int d : p.shape) n *= static_cast<std::size_t>(d);
    p.value.assign(n, T(0));
    index_[p.name] = static_cast<int>(tensors_.size());
    tensors_.push_back(std::move(p));
    return static_cast<int>(tensors_.size()) - 1;
  }

  std::size_t size() const { return tensors_.size(); }
  ParamTensor<T>& operator[](std::size_t i) { return tensors_[i]; }
  const ParamTensor<T>& operator[](std::size_t i) const { return tensors_[i]; }
  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }
  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }

  int find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
  }

  std::size_t count(Group g) const {
    std::size_t n = 0;
    for (const auto& p : tensors_)
      if (p.group == g) n += p.value.size();
    return n;
  }

  /// Same layout, all values zero.
  ParamSet zeros_like() const {
    ParamSet out = *this;
    for (auto& p : out.tensors_) std::fill(p.value.begin(), p.value.end(), T(0));
    return out;
  }

  void set_zero() {
    for (auto& p : tensors_) std::fill(p.value.begin(), p.value.end(), T(0));
  }

  template <typename U>
  void copy_values_from(const ParamSet<U>& other) {
    if (other.size() != size()) throw ShapeError("parameter set layout mismatch");
    for (std::size_t i = 0; i < size(); ++i) {
      if (other[i].value.size() != tensors_[i].value.size())
        throw ShapeError("parameter " + tensors_[i].name + " size mismatch");
      for (std::size_t j = 0; j < tensors_[i].value.size(); ++j)
        tensors_[i].value[j] = static_cast<T>(other[i].value[j]);
    }
  }

  bool group_equal(const ParamSet& other, Group g) const {
    for (std::size_t i = 0; i < size(); ++i)
      if (tensors_[i].group == g && tensors_[i].value != other.tensors_[i].value) return false;
    return true;
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a[i].name != b[i].name || a[i].value != b[i].value) return false;
    return true;
  }

 private:
  std::vector<ParamTensor<T>> tensors_;
  std::unordered_map<std::string, int> index_;
};

/// Uniform Xavier: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
template <typename T, typename Rng>
void xavier_fill(ParamTensor<T>& p, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(p.fan_in + p.fan_out));
  std::uniform_real_distribution<double> dist(-a, a);
  for (auto& v : p.value) v = static_cast<T>(dist(rng));
}

}  // namespace dmcs::nn
