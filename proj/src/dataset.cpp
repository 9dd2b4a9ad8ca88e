#include "nfcf/dataset.hpp"

#include <algorithm>
#include <cctype>

#include "nfcf/errors.hpp"

namespace nfcf::data {

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

}  // namespace

std::string_view to_string(Gender g) {
  switch (g) {
    case Gender::kMale:
      return "M";
    case Gender::kFemale:
      return "F";
    default:
      return "U";
  }
}

std::string_view to_string(ItemClass c) {
  return c == ItemClass::kSensitive ? "sensitive" : "nonsensitive";
}

Gender parse_gender(std::string_view s) {
  const std::string l = lower(s);
  if (l == "m" || l == "male") return Gender::kMale;
  if (l == "f" || l == "female") return Gender::kFemale;
  return Gender::kUnknown;
}

ItemClass parse_item_class(std::string_view s) {
  const std::string l = lower(s);
  if (l == "sensitive" || l == "s" || l == "1") return ItemClass::kSensitive;
  if (l == "nonsensitive" || l == "non-sensitive" || l == "non_sensitive" || l == "n" || l == "0") {
    return ItemClass::kNonSensitive;
  }
  throw ConfigError("unknown item class '" + std::string(s) + "'");
}

UserCatalog::UserCatalog(std::vector<Gender> genders) : genders_(std::move(genders)) {
  for (Gender g : genders_) ++counts_[static_cast<std::size_t>(g)];
}

std::vector<std::uint32_t> UserCatalog::users_with(Gender g) const {
  std::vector<std::uint32_t> out;
  for (std::size_t u = 0; u < genders_.size(); ++u) {
    if (genders_[u] == g) out.push_back(static_cast<std::uint32_t>(u));
  }
  return out;
}

InteractionDataset::InteractionDataset(std::vector<std::string> user_ids,
                                       std::array<std::vector<std::string>, 2> item_ids,
                                       std::array<std::vector<Pair>, 2> pairs)
    : user_ids_(std::move(user_ids)), item_ids_(std::move(item_ids)), pairs_(std::move(pairs)) {
  for (std::size_t u = 0; u < user_ids_.size(); ++u) {
    if (!user_lookup_.emplace(user_ids_[u], static_cast<std::uint32_t>(u)).second) {
      throw ContractError("duplicate user id '" + user_ids_[u] + "'");
    }
  }
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t i = 0; i < item_ids_[c].size(); ++i) {
      if (!item_lookup_[c].emplace(item_ids_[c][i], static_cast<std::uint32_t>(i)).second) {
        throw ContractError("duplicate item id '" + item_ids_[c][i] + "'");
      }
    }
    auto& ps = pairs_[c];
    std::sort(ps.begin(), ps.end());
    ps.erase(std::unique(ps.begin(), ps.end()), ps.end());
    for (const Pair& p : ps) {
      if (p.user >= user_ids_.size() || p.item >= item_ids_[c].size()) {
        throw ContractError("pair index out of range");
      }
    }
  }
}

std::int64_t InteractionDataset::find_user(const std::string& id) const {
  auto it = user_lookup_.find(id);
  return it == user_lookup_.end() ? -1 : static_cast<std::int64_t>(it->second);
}

std::int64_t InteractionDataset::find_item(ItemClass c, const std::string& id) const {
  const auto& m = item_lookup_[class_slot(c)];
  auto it = m.find(id);
  return it == m.end() ? -1 : static_cast<std::int64_t>(it->second);
}

std::vector<std::size_t> InteractionDataset::item_counts(ItemClass c) const {
  std::vector<std::size_t> counts(num_items(c), 0);
  for (const Pair& p : pairs(c)) ++counts[p.item];
  return counts;
}

std::vector<std::uint32_t> InteractionDataset::active_users(ItemClass c) const {
  std::vector<std::uint32_t> out;
  for (const Pair& p : pairs(c)) {
    if (out.empty() || out.back() != p.user) out.push_back(p.user);
  }
  return out;
}

std::uint32_t DatasetBuilder::add_user(const std::string& id) {
  auto [it, inserted] = user_lookup_.try_emplace(id, static_cast<std::uint32_t>(user_ids_.size()));
  if (inserted) user_ids_.push_back(id);
  return it->second;
}

std::uint32_t DatasetBuilder::add_item(ItemClass c, const std::string& id) {
  auto& ids = item_ids_[class_slot(c)];
  auto [it, inserted] =
      item_lookup_[class_slot(c)].try_emplace(id, static_cast<std::uint32_t>(ids.size()));
  if (inserted) ids.push_back(id);
  return it->second;
}

void DatasetBuilder::add_pair(const std::string& user, ItemClass c, const std::string& item) {
  const std::uint32_t u = add_user(user);
  const std::uint32_t i = add_item(c, item);
  pairs_[class_slot(c)].push_back({u, i});
}

void DatasetBuilder::add_pair_indices(std::uint32_t user, ItemClass c, std::uint32_t item) {
  pairs_[class_slot(c)].push_back({user, item});
}

InteractionDataset DatasetBuilder::build() && {
  return InteractionDataset(std::move(user_ids_), std::move(item_ids_), std::move(pairs_));
}

UserItemIndex::UserItemIndex(std::size_t num_users, std::span<const Pair> pairs)
    : offsets_(num_users + 1, 0) {
  for (const Pair& p : pairs) {
    if (p.user >= num_users) throw ContractError("UserItemIndex: user out of range");
    ++offsets_[p.user + 1];
  }
  for (std::size_t u = 0; u < num_users; ++u) offsets_[u + 1] += offsets_[u];
  items_.resize(pairs.size());
  std::vector<std::size_t> cursor(offsets_.begin(), offsets_.end() - 1);
  for (const Pair& p : pairs) items_[cursor[p.user]++] = p.item;
  for (std::size_t u = 0; u < num_users; ++u) {
    auto b = items_.begin() + static_cast<std::ptrdiff_t>(offsets_[u]);
    auto e = items_.begin() + static_cast<std::ptrdiff_t>(offsets_[u + 1]);
    std::sort(b, e);
  }
}

bool UserItemIndex::contains(std::uint32_t user, std::uint32_t item) const {
  auto its = items(user);
  return std::binary_search(its.begin(), its.end(), item);
}

std::span<const std::uint32_t> UserItemIndex::items(std::uint32_t user) const {
  if (user + 1 >= offsets_.size()) return {};
  return {items_.data() + offsets_[user], offsets_[user + 1] - offsets_[user]};
}

}  // namespace nfcf::data
