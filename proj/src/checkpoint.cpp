#include "nfcf/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "nfcf/errors.hpp"

namespace nfcf::models {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'N', 'F', 'C', 'F', 'C', 'K', 'P', 'T'};

std::vector<Parameter*> tensors_of(AnyModel& m) {
  return std::visit([](auto& p) { return parameters(p); }, m);
}

nlohmann::json widths_json(const std::vector<std::size_t>& w) { return nlohmann::json(w); }

}  // namespace

std::string to_string(ItemScope s) {
  switch (s) {
    case ItemScope::kSensitive:
      return "sensitive";
    case ItemScope::kCombined:
      return "combined";
    default:
      return "nonsensitive";
  }
}

ItemScope parse_item_scope(const std::string& s) {
  if (s == "sensitive") return ItemScope::kSensitive;
  if (s == "combined") return ItemScope::kCombined;
  if (s == "nonsensitive") return ItemScope::kNonSensitive;
  throw LoadError("unknown item scope '" + s + "'");
}

std::string kind_name(const AnyModel& m) {
  switch (m.index()) {
    case 0:
      return "ncf";
    case 1:
      return "mf";
    default:
      return std::get<ClassifierParams>(m).input == ClassifierInput::kItemBag
                 ? "dnn_classifier"
                 : "projection_classifier";
  }
}

Scorer make_scorer(const StoredModel& m) {
  const std::uint32_t offset = m.scope == ItemScope::kCombined ? m.item_offset : 0;
  return std::visit(
      [offset](const auto& p) -> Scorer {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, ClassifierParams>) {
          return make_scorer(p);
        } else {
          return make_scorer(p, offset);
        }
      },
      m.model);
}

void save_checkpoint(const StoredModel& m, const std::filesystem::path& path) {
  AnyModel& model = const_cast<AnyModel&>(m.model);
  nlohmann::json manifest;
  manifest["version"] = kCheckpointVersion;
  manifest["kind"] = kind_name(m.model);
  manifest["scope"] = to_string(m.scope);
  manifest["item_offset"] = m.item_offset;
  manifest["seed"] = m.seed;
  manifest["info"] = m.info;
  std::visit(
      [&manifest](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, NcfParams>) {
          manifest["dim"] = p.dim;
          manifest["widths"] = widths_json(p.widths);
        } else if constexpr (std::is_same_v<T, MfParams>) {
          manifest["dim"] = p.dim;
        } else {
          manifest["widths"] = widths_json(p.widths);
        }
      },
      m.model);
  auto tensors = tensors_of(model);
  nlohmann::json list = nlohmann::json::array();
  for (const Parameter* t : tensors) {
    list.push_back({{"name", t->name},
                    {"rows", t->value.rows()},
                    {"cols", t->value.cols()},
                    {"frozen", t->frozen}});
  }
  manifest["tensors"] = list;
  const std::string text = manifest.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw LoadError("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof kMagic);
  const std::uint32_t version = kCheckpointVersion;
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const Parameter* t : tensors) {
    out.write(reinterpret_cast<const char*>(t->value.data().data()),
              static_cast<std::streamsize>(t->value.size() * sizeof(double)));
  }
  if (!out) throw LoadError("failed writing checkpoint " + path.string());
}

StoredModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw LoadError(path.string() + " is not a checkpoint (bad magic)");
  }
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  if (!in.read(reinterpret_cast<char*>(&version), sizeof version) ||
      !in.read(reinterpret_cast<char*>(&len), sizeof len)) {
    throw LoadError(path.string() + ": truncated header");
  }
  if (version != kCheckpointVersion) {
    throw LoadError(path.string() + ": checkpoint version " + std::to_string(version) +
                    ", expected " + std::to_string(kCheckpointVersion));
  }
  if (len > (1ull << 30)) throw LoadError(path.string() + ": implausible manifest length");
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) {
    throw LoadError(path.string() + ": truncated manifest");
  }

  StoredModel m;
  try {
    const nlohmann::json manifest = nlohmann::json::parse(text);
    const std::string kind = manifest.at("kind").get<std::string>();
    m.scope = parse_item_scope(manifest.at("scope").get<std::string>());
    m.item_offset = manifest.at("item_offset").get<std::uint32_t>();
    m.seed = manifest.at("seed").get<std::uint64_t>();
    m.info = manifest.value("info", nlohmann::json::object());
    if (kind == "ncf") {
      NcfParams p;
      p.dim = manifest.at("dim").get<std::size_t>();
      p.widths = manifest.at("widths").get<std::vector<std::size_t>>();
      p.layers.resize(p.widths.size() - 1);
      m.model = std::move(p);
    } else if (kind == "mf") {
      MfParams p;
      p.dim = manifest.at("dim").get<std::size_t>();
      m.model = std::move(p);
    } else if (kind == "dnn_classifier" || kind == "projection_classifier") {
      ClassifierParams p;
      p.input = kind == "dnn_classifier" ? ClassifierInput::kItemBag
                                         : ClassifierInput::kUserEmbedding;
      p.widths = manifest.at("widths").get<std::vector<std::size_t>>();
      const std::size_t first = p.input == ClassifierInput::kItemBag ? 1 : 0;
      if (p.widths.size() < first + 2) throw LoadError("classifier widths too short");
      p.layers.resize(p.widths.size() - 1 - first);
      m.model = std::move(p);
    } else {
      throw LoadError("unknown model kind '" + kind + "'");
    }

    auto tensors = tensors_of(m.model);
    const auto& list = manifest.at("tensors");
    if (list.size() != tensors.size()) {
      throw LoadError("manifest lists " + std::to_string(list.size()) + " tensors, model has " +
                      std::to_string(tensors.size()));
    }
    for (std::size_t k = 0; k < tensors.size(); ++k) {
      const auto& e = list[k];
      const std::size_t rows = e.at("rows").get<std::size_t>();
      const std::size_t cols = e.at("cols").get<std::size_t>();
      Parameter& t = *tensors[k];
      t.name = e.at("name").get<std::string>();
      t.frozen = e.at("frozen").get<bool>();
      t.value = diff::Matrix(rows, cols);
      const auto bytes = static_cast<std::streamsize>(rows * cols * sizeof(double));
      if (bytes > 0 && !in.read(reinterpret_cast<char*>(t.value.data().data()), bytes)) {
        throw LoadError("truncated tensor payload for " + t.name);
      }
    }
    if (in.peek() != std::char_traits<char>::eof()) {
      throw LoadError("trailing bytes after tensor payload");
    }
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(path.string() + ": bad manifest: " + e.what());
  } catch (const LoadError& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
  return m;
}

}  // namespace nfcf::models
