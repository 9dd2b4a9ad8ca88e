#include "nfcf/split.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>

#include "json.hpp"

#include "nfcf/errors.hpp"

namespace nfcf::data {

void SplitSpec::validate() const {
  for (double f : {test_nonsensitive, test_sensitive, dev_nonsensitive, dev_sensitive}) {
    if (!(f >= 0.0 && f < 1.0)) {
      throw ConfigError("split fractions must lie in [0, 1), got " + std::to_string(f));
    }
  }
}

std::vector<Pair> DataSplit::pairs(const InteractionDataset& ds, ItemClass c, Part p) const {
  const auto& idx = of(c).part(p);
  const auto& all = ds.pairs(c);
  std::vector<Pair> out;
  out.reserve(idx.size());
  for (std::uint32_t i : idx) out.push_back(all.at(i));
  std::sort(out.begin(), out.end());
  return out;
}

namespace {

std::size_t share(std::size_t n, double fraction) {
  return std::min<std::size_t>(n, static_cast<std::size_t>(std::llround(n * fraction)));
}

void partition_group(std::vector<std::uint32_t> group, double test_f, double dev_f,
                     std::mt19937_64& rng, PairPartition& out) {
  std::shuffle(group.begin(), group.end(), rng);
  const std::size_t n_test = share(group.size(), test_f);
  const std::size_t n_dev = share(group.size() - n_test, dev_f);
  out.test.insert(out.test.end(), group.begin(), group.begin() + n_test);
  out.dev.insert(out.dev.end(), group.begin() + n_test, group.begin() + n_test + n_dev);
  out.train.insert(out.train.end(), group.begin() + n_test + n_dev, group.end());
}

}  // namespace

DataSplit split(const InteractionDataset& ds, const UserCatalog& catalog, const SplitSpec& spec) {
  spec.validate();
  DataSplit out;
  out.spec = spec;
  std::mt19937_64 rng(spec.seed);
  for (ItemClass c : kItemClasses) {
    const auto& pairs = ds.pairs(c);
    PairPartition& part = out.classes[class_slot(c)];
    std::map<Gender, std::vector<std::uint32_t>> groups;
    const bool stratify = c == ItemClass::kSensitive && spec.stratify_sensitive_by_gender;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const std::uint32_t u = pairs[i].user;
      const Gender g =
          stratify && u < catalog.num_users() ? catalog.gender(u) : Gender::kUnknown;
      groups[g].push_back(static_cast<std::uint32_t>(i));
    }
    for (auto& [g, members] : groups) {
      partition_group(std::move(members), spec.test_fraction(c), spec.dev_fraction(c), rng, part);
    }
    for (auto* v : {&part.train, &part.dev, &part.test}) std::sort(v->begin(), v->end());
  }

  const auto& sens = ds.pairs(ItemClass::kSensitive);
  std::array<std::size_t, 3> test_by_gender{};
  for (std::uint32_t i : out.of(ItemClass::kSensitive).test) {
    const std::uint32_t u = sens[i].user;
    if (u < catalog.num_users()) ++test_by_gender[static_cast<std::size_t>(catalog.gender(u))];
  }
  if (!sens.empty() && (test_by_gender[1] == 0 || test_by_gender[2] == 0)) {
    out.sensitive_test_missing_gender = true;
    out.warnings.push_back(
        "sensitive test split lacks one gender; fairness metrics on test are undefined");
  }
  return out;
}

void save_split(const DataSplit& s, const std::filesystem::path& path) {
  nlohmann::json j;
  j["seed"] = s.spec.seed;
  j["fractions"] = {{"test_nonsensitive", s.spec.test_nonsensitive},
                    {"test_sensitive", s.spec.test_sensitive},
                    {"dev_nonsensitive", s.spec.dev_nonsensitive},
                    {"dev_sensitive", s.spec.dev_sensitive}};
  j["stratify_sensitive_by_gender"] = s.spec.stratify_sensitive_by_gender;
  for (ItemClass c : kItemClasses) {
    const auto& p = s.of(c);
    j["pairs"][std::string(to_string(c))] = {{"train", p.train}, {"dev", p.dev}, {"test", p.test}};
  }
  j["warnings"] = s.warnings;
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write " + path.string());
  out << j.dump() << '\n';
}

DataSplit load_split(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open " + path.string());
  DataSplit s;
  try {
    const nlohmann::json j = nlohmann::json::parse(in);
    s.spec.seed = j.at("seed").get<std::uint64_t>();
    const auto& f = j.at("fractions");
    s.spec.test_nonsensitive = f.at("test_nonsensitive").get<double>();
    s.spec.test_sensitive = f.at("test_sensitive").get<double>();
    s.spec.dev_nonsensitive = f.at("dev_nonsensitive").get<double>();
    s.spec.dev_sensitive = f.at("dev_sensitive").get<double>();
    s.spec.stratify_sensitive_by_gender = j.at("stratify_sensitive_by_gender").get<bool>();
    for (ItemClass c : kItemClasses) {
      const auto& p = j.at("pairs").at(std::string(to_string(c)));
      auto& part = s.classes[class_slot(c)];
      part.train = p.at("train").get<std::vector<std::uint32_t>>();
      part.dev = p.at("dev").get<std::vector<std::uint32_t>>();
      part.test = p.at("test").get<std::vector<std::uint32_t>>();
    }
    s.warnings = j.value("warnings", std::vector<std::string>{});
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("bad split manifest " + path.string() + ": " + e.what());
  }
  return s;
}

}  // namespace nfcf::data
