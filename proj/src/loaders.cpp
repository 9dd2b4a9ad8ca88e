#include "nfcf/loaders.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <unordered_map>

#include "nfcf/errors.hpp"

namespace nfcf::data {

const std::array<std::string_view, 21> kMovieLensOccupations = {
    "other or not specified", "academic/educator",    "artist",
    "clerical/admin",         "college/grad student", "customer service",
    "doctor/health care",     "executive/managerial", "farmer",
    "homemaker",              "K-12 student",         "lawyer",
    "programmer",             "retired",              "sales/marketing",
    "scientist",              "self-employed",        "technician/engineer",
    "tradesman/craftsman",    "unemployed",           "writer"};

std::vector<std::string> movielens_excluded_occupations() {
  return {"K-12 student", "retired", "unemployed", "other or not specified"};
}

namespace {

std::vector<std::string_view> split_double_colon(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find("::", start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 2;
  }
  return out;
}

bool parse_int(std::string_view s, long long& out) {
  if (s.empty()) return false;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

std::string_view trim_cr(std::string_view s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == '\n')) s.remove_suffix(1);
  return s;
}

std::ifstream open_or_throw(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw LoadError("cannot open " + p.string());
  return in;
}

}  // namespace

LoadedData load_movielens(const std::filesystem::path& ratings, const std::filesystem::path& users) {
  DatasetBuilder builder;
  std::unordered_map<std::string, Gender> genders;
  LoadStats stats;
  for (std::size_t code = 0; code < kMovieLensOccupations.size(); ++code) {
    builder.add_item(ItemClass::kSensitive, std::string(kMovieLensOccupations[code]));
  }

  {
    auto in = open_or_throw(users);
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
      ++line_no;
      ++stats.lines_read;
      const std::string_view line = trim_cr(raw);
      if (line.empty()) continue;
      const auto f = split_double_colon(line);
      long long uid = 0, age = 0, occ = 0;
      if (f.size() != 5 || !parse_int(f[0], uid) || !parse_int(f[2], age) ||
          !parse_int(f[3], occ) || (f[1] != "M" && f[1] != "F")) {
        throw ParseError(users.string(), line_no, "malformed users record '" + raw + "'");
      }
      if (occ < 0 || occ >= static_cast<long long>(kMovieLensOccupations.size())) {
        ++stats.rejected_users;
        continue;
      }
      const std::string id(f[0]);
      const std::uint32_t u = builder.add_user(id);
      genders[id] = parse_gender(f[1]);
      builder.add_pair_indices(u, ItemClass::kSensitive, static_cast<std::uint32_t>(occ));
    }
  }

  {
    auto in = open_or_throw(ratings);
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
      ++line_no;
      ++stats.lines_read;
      const std::string_view line = trim_cr(raw);
      if (line.empty()) continue;
      const auto f = split_double_colon(line);
      long long uid = 0, mid = 0, rating = 0, ts = 0;
      if (f.size() != 4 || !parse_int(f[0], uid) || !parse_int(f[1], mid) ||
          !parse_int(f[2], rating) || !parse_int(f[3], ts)) {
        throw ParseError(ratings.string(), line_no, "malformed ratings record '" + raw + "'");
      }
      builder.add_pair(std::string(f[0]), ItemClass::kNonSensitive, std::string(f[1]));
    }
  }

  InteractionDataset ds = std::move(builder).build();
  std::vector<Gender> g(ds.num_users(), Gender::kUnknown);
  for (std::size_t u = 0; u < ds.num_users(); ++u) {
    auto it = genders.find(ds.user_id(static_cast<std::uint32_t>(u)));
    if (it != genders.end()) g[u] = it->second;
  }
  return {std::move(ds), UserCatalog(std::move(g)), stats};
}

std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(std::move(cur));
  return out;
}

namespace {

std::map<std::string, std::size_t> header_columns(const std::filesystem::path& p,
                                                  std::string_view line,
                                                  std::initializer_list<const char*> required) {
  std::map<std::string, std::size_t> cols;
  const auto fields = split_csv_line(line);
  for (std::size_t i = 0; i < fields.size(); ++i) cols[fields[i]] = i;
  for (const char* r : required) {
    if (!cols.count(r)) throw ParseError(p.string(), 1, std::string("missing column '") + r + "'");
  }
  return cols;
}

std::string quote_csv(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

}  // namespace

LoadedData load_csv(const std::filesystem::path& interactions, const std::filesystem::path& users) {
  DatasetBuilder builder;
  LoadStats stats;
  std::unordered_map<std::string, Gender> genders;
  {
    auto in = open_or_throw(users);
    std::string raw;
    std::size_t line_no = 0;
    std::map<std::string, std::size_t> cols;
    while (std::getline(in, raw)) {
      ++line_no;
      const std::string_view line = trim_cr(raw);
      if (line_no == 1) {
        cols = header_columns(users, line, {"user_id", "gender"});
        continue;
      }
      if (line.empty()) continue;
      ++stats.lines_read;
      const auto f = split_csv_line(line);
      if (f.size() < cols.size()) {
        throw ParseError(users.string(), line_no, "expected " + std::to_string(cols.size()) +
                                                      " fields, got " + std::to_string(f.size()));
      }
      const std::string& id = f[cols["user_id"]];
      builder.add_user(id);
      genders[id] = parse_gender(f[cols["gender"]]);
    }
  }
  {
    auto in = open_or_throw(interactions);
    std::string raw;
    std::size_t line_no = 0;
    std::map<std::string, std::size_t> cols;
    std::size_t added = 0;
    while (std::getline(in, raw)) {
      ++line_no;
      const std::string_view line = trim_cr(raw);
      if (line_no == 1) {
        cols = header_columns(interactions, line, {"user_id", "item_id", "item_class"});
        continue;
      }
      if (line.empty()) continue;
      ++stats.lines_read;
      const auto f = split_csv_line(line);
      if (f.size() < cols.size()) {
        throw ParseError(interactions.string(), line_no,
                         "expected " + std::to_string(cols.size()) + " fields, got " +
                             std::to_string(f.size()));
      }
      ItemClass cls;
      try {
        cls = parse_item_class(f[cols["item_class"]]);
      } catch (const ConfigError& e) {
        throw ParseError(interactions.string(), line_no, e.what());
      }
      builder.add_pair(f[cols["user_id"]], cls, f[cols["item_id"]]);
      ++added;
    }
    InteractionDataset ds = std::move(builder).build();
    stats.duplicate_pairs = added - ds.num_pairs();
    std::vector<Gender> g(ds.num_users(), Gender::kUnknown);
    for (std::size_t u = 0; u < ds.num_users(); ++u) {
      auto it = genders.find(ds.user_id(static_cast<std::uint32_t>(u)));
      if (it != genders.end()) g[u] = it->second;
    }
    return {std::move(ds), UserCatalog(std::move(g)), stats};
  }
}

DataFormat detect_format(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (fs::exists(dir / "ratings.dat") && fs::exists(dir / "users.dat")) return DataFormat::kMovieLens;
  if (fs::exists(dir / "interactions.csv") && fs::exists(dir / "users.csv")) return DataFormat::kCsv;
  throw LoadError("no ratings.dat/users.dat or interactions.csv/users.csv in " + dir.string());
}

LoadedData load_directory(const std::filesystem::path& dir) {
  if (detect_format(dir) == DataFormat::kMovieLens) {
    return load_movielens(dir / "ratings.dat", dir / "users.dat");
  }
  return load_csv(dir / "interactions.csv", dir / "users.csv");
}

void write_csv(const std::filesystem::path& interactions, const std::filesystem::path& users,
               const InteractionDataset& ds, const UserCatalog& catalog) {
  std::ofstream ui(users);
  if (!ui) throw LoadError("cannot write " + users.string());
  ui << "user_id,gender\n";
  for (std::size_t u = 0; u < ds.num_users(); ++u) {
    const Gender g = u < catalog.num_users() ? catalog.gender(static_cast<std::uint32_t>(u))
                                             : Gender::kUnknown;
    ui << quote_csv(ds.user_id(static_cast<std::uint32_t>(u))) << ','
       << (g == Gender::kUnknown ? "" : std::string(to_string(g))) << '\n';
  }
  std::ofstream ii(interactions);
  if (!ii) throw LoadError("cannot write " + interactions.string());
  ii << "user_id,item_id,item_class\n";
  for (ItemClass c : kItemClasses) {
    for (const Pair& p : ds.pairs(c)) {
      ii << quote_csv(ds.user_id(p.user)) << ',' << quote_csv(ds.item_id(c, p.item)) << ','
         << to_string(c) << '\n';
    }
  }
}

}  // namespace nfcf::data
