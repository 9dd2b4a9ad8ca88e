#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace nfcf::data {

enum class Gender : std::uint8_t { kUnknown = 0, kMale = 1, kFemale = 2 };
enum class ItemClass : std::uint8_t { kNonSensitive = 0, kSensitive = 1 };

inline constexpr std::array<ItemClass, 2> kItemClasses = {ItemClass::kNonSensitive,
                                                          ItemClass::kSensitive};

std::string_view to_string(Gender g);
std::string_view to_string(ItemClass c);
// Accepts M/F/male/female in any case; anything else is unknown.
Gender parse_gender(std::string_view s);
ItemClass parse_item_class(std::string_view s);

constexpr std::size_t class_slot(ItemClass c) { return static_cast<std::size_t>(c); }

// Implicit feedback: the user interacted with the item. Item indices are
// local to the item class the pair belongs to.
struct Pair {
  std::uint32_t user = 0;
  std::uint32_t item = 0;
  auto operator<=>(const Pair&) const = default;
};

// Per-user protected attribute. Immutable once built.
class UserCatalog {
 public:
  UserCatalog() = default;
  explicit UserCatalog(std::vector<Gender> genders);

  std::size_t num_users() const { return genders_.size(); }
  Gender gender(std::uint32_t user) const { return genders_.at(user); }
  std::span<const Gender> genders() const { return genders_; }
  std::size_t count(Gender g) const { return counts_[static_cast<std::size_t>(g)]; }
  // Users with the given label, ascending.
  std::vector<std::uint32_t> users_with(Gender g) const;

 private:
  std::vector<Gender> genders_;
  std::array<std::size_t, 3> counts_{};
};

// Users share one index space; each item class has its own dense item
// vocabulary. Pairs per class are sorted and unique.
class InteractionDataset {
 public:
  InteractionDataset() = default;
  InteractionDataset(std::vector<std::string> user_ids,
                     std::array<std::vector<std::string>, 2> item_ids,
                     std::array<std::vector<Pair>, 2> pairs);

  std::size_t num_users() const { return user_ids_.size(); }
  std::size_t num_items(ItemClass c) const { return item_ids_[class_slot(c)].size(); }
  const std::vector<Pair>& pairs(ItemClass c) const { return pairs_[class_slot(c)]; }
  std::size_t num_pairs() const { return pairs_[0].size() + pairs_[1].size(); }

  const std::string& user_id(std::uint32_t u) const { return user_ids_.at(u); }
  const std::string& item_id(ItemClass c, std::uint32_t i) const {
    return item_ids_[class_slot(c)].at(i);
  }
  const std::vector<std::string>& user_ids() const { return user_ids_; }
  const std::vector<std::string>& item_ids(ItemClass c) const { return item_ids_[class_slot(c)]; }

  // -1 when the id is unknown.
  std::int64_t find_user(const std::string& id) const;
  std::int64_t find_item(ItemClass c, const std::string& id) const;

  // Per-class interaction counts per item.
  std::vector<std::size_t> item_counts(ItemClass c) const;
  // Users with at least one pair in the given class, ascending.
  std::vector<std::uint32_t> active_users(ItemClass c) const;

 private:
  std::vector<std::string> user_ids_;
  std::array<std::vector<std::string>, 2> item_ids_;
  std::array<std::vector<Pair>, 2> pairs_;
  std::unordered_map<std::string, std::uint32_t> user_lookup_;
  std::array<std::unordered_map<std::string, std::uint32_t>, 2> item_lookup_;
};

// Accumulates id-keyed interactions and assigns dense indices in first-seen
// order. Duplicate pairs collapse.
class DatasetBuilder {
 public:
  std::uint32_t add_user(const std::string& id);
  std::uint32_t add_item(ItemClass c, const std::string& id);
  void add_pair(const std::string& user, ItemClass c, const std::string& item);
  void add_pair_indices(std::uint32_t user, ItemClass c, std::uint32_t item);
  std::size_t num_users() const { return user_ids_.size(); }

  InteractionDataset build() &&;

 private:
  std::vector<std::string> user_ids_;
  std::array<std::vector<std::string>, 2> item_ids_;
  std::array<std::vector<Pair>, 2> pairs_;
  std::unordered_map<std::string, std::uint32_t> user_lookup_;
  std::array<std::unordered_map<std::string, std::uint32_t>, 2> item_lookup_;
};

// Compressed per-user item lists for constant-time membership tests.
class UserItemIndex {
 public:
  UserItemIndex() = default;
  UserItemIndex(std::size_t num_users, std::span<const Pair> pairs);

  bool contains(std::uint32_t user, std::uint32_t item) const;
  std::span<const std::uint32_t> items(std::uint32_t user) const;
  std::size_t num_users() const { return offsets_.empty() ? 0 : offsets_.size() - 1; }

 private:
  std::vector<std::size_t> offsets_;
  std::vector<std::uint32_t> items_;
};

}  // namespace nfcf::data
