#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "nfcf/dataset.hpp"

namespace nfcf::data {

struct LoadStats {
  std::size_t lines_read = 0;
  std::size_t rejected_users = 0;
  std::size_t duplicate_pairs = 0;
};

struct LoadedData {
  InteractionDataset dataset;
  UserCatalog catalog;
  LoadStats stats;
};

// MovieLens-1M occupation codes 0..20, in code order.
extern const std::array<std::string_view, 21> kMovieLensOccupations;
// Occupations whose users are dropped from the career data.
std::vector<std::string> movielens_excluded_occupations();

// ratings: UserID::MovieID::Rating::Timestamp
// users:   UserID::Gender::Age::Occupation::Zip-code
// Every rating becomes one non-sensitive pair regardless of its value; the
// occupation becomes the user's single sensitive pair. A user record with an
// unknown occupation code is rejected. Malformed lines throw ParseError.
LoadedData load_movielens(const std::filesystem::path& ratings, const std::filesystem::path& users);

// interactions: header with user_id,item_id,item_class (any column order)
// users:        header with user_id,gender
// Duplicate pairs are dropped.
LoadedData load_csv(const std::filesystem::path& interactions, const std::filesystem::path& users);

// Resolves a data directory holding either ratings.dat + users.dat or
// interactions.csv + users.csv.
enum class DataFormat { kMovieLens, kCsv };
DataFormat detect_format(const std::filesystem::path& dir);
LoadedData load_directory(const std::filesystem::path& dir);

void write_csv(const std::filesystem::path& interactions, const std::filesystem::path& users,
               const InteractionDataset& ds, const UserCatalog& catalog);

// Splits one CSV record, honouring double quotes.
std::vector<std::string> split_csv_line(std::string_view line);

}  // namespace nfcf::data
