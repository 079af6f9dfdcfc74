#include "candle/feature_pack.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include "candle/byte_io.hpp"
#include "candle/errors.hpp"
#include "json.hpp"

namespace candle {

using nlohmann::ordered_json;

const char* to_string(PackKind kind) { return kind == PackKind::image ? "image" : "text"; }

PackKind pack_kind_from_string(const std::string& s) {
  if (s == "image") return PackKind::image;
  if (s == "text") return PackKind::text;
  throw ValidationError("kind", "unknown pack kind '" + s + "'");
}

void FeaturePack::validate() const {
  if (dim == 0) throw ValidationError("dim", "must be positive");
  if (labels.empty()) throw ValidationError("count", "must be positive");
  if (class_names.empty()) throw ValidationError("num_classes", "must be positive");
  if (features.size() != labels.size() * dim) {
    throw ValidationError("features", "expected " + std::to_string(labels.size() * dim) +
                                          " values, got " + std::to_string(features.size()));
  }
  std::set<std::string> seen;
  for (const auto& name : class_names) {
    if (!seen.insert(name).second) throw ValidationError("class_names", "duplicate name '" + name + "'");
  }
  const auto k = class_names.size();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= k) {
      throw ValidationError("labels", "label " + std::to_string(labels[i]) + " at row " +
                                          std::to_string(i) + " is outside [0, " +
                                          std::to_string(k) + ")");
    }
  }
  if (kind == PackKind::text) {
    if (labels.size() != k) throw ValidationError("count", "text pack must have one row per class");
    for (std::size_t i = 0; i < k; ++i) {
      if (labels[i] != i) throw ValidationError("labels", "text pack labels must be 0..K-1 in order");
    }
  }
  for (float v : features) {
    if (!std::isfinite(v)) throw ValidationError("features", "non-finite value");
  }
  if (normalized) {
    for (std::size_t i = 0; i < labels.size(); ++i) {
      double sq = 0.0;
      for (float v : row(i)) sq += static_cast<double>(v) * v;
      if (std::abs(std::sqrt(sq) - 1.0) > 1e-5) {
        throw ValidationError("normalized", "row " + std::to_string(i) + " has norm " +
                                                std::to_string(std::sqrt(sq)));
      }
    }
  }
}

Matrix FeaturePack::matrix() const {
  Matrix m(static_cast<Eigen::Index>(count()), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < features.size(); ++i) m.data()[i] = features[i];
  return m;
}

std::vector<std::size_t> FeaturePack::indices_of(std::uint32_t class_id) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == class_id) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> FeaturePack::histogram() const {
  std::vector<std::size_t> h(num_classes(), 0);
  for (auto y : labels) {
    if (y < h.size()) ++h[y];
  }
  return h;
}

FeaturePack FeaturePack::select(std::span<const std::size_t> rows) const {
  FeaturePack out = *this;
  out.features.clear();
  out.labels.clear();
  out.features.reserve(rows.size() * dim);
  out.labels.reserve(rows.size());
  for (auto r : rows) {
    auto src = row(r);
    out.features.insert(out.features.end(), src.begin(), src.end());
    out.labels.push_back(labels[r]);
  }
  return out;
}

std::vector<std::uint8_t> encode_pack(const FeaturePack& pack) {
  pack.validate();
  ordered_json header;
  header["dataset"] = pack.dataset;
  header["split"] = pack.split;
  header["kind"] = to_string(pack.kind);
  header["dim"] = pack.dim;
  header["count"] = pack.count();
  header["num_classes"] = pack.num_classes();
  header["class_names"] = pack.class_names;
  header["normalized"] = pack.normalized;
  header["seed"] = pack.seed ? ordered_json(*pack.seed) : ordered_json(nullptr);
  const std::string text = header.dump();

  ByteWriter w;
  w.bytes(std::span<const char>(kPackMagic, 4));
  w.u32(kPackVersion);
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.bytes(std::span<const char>(text.data(), text.size()));
  for (float v : pack.features) w.f32(v);
  for (auto y : pack.labels) w.u32(y);
  return std::move(w).take();
}

FeaturePack decode_pack(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic(kPackMagic);
  const auto version = r.u32();
  if (version != kPackVersion) {
    throw FormatError(4, "unsupported pack version " + std::to_string(version));
  }
  const ordered_json header = r.json_header();
  const std::size_t payload_offset = r.offset();

  FeaturePack pack;
  std::size_t count = 0;
  std::size_t num_classes = 0;
  try {
    pack.dataset = header.at("dataset").get<std::string>();
    pack.split = header.at("split").get<std::string>();
    pack.kind = pack_kind_from_string(header.at("kind").get<std::string>());
    pack.dim = header.at("dim").get<std::size_t>();
    count = header.at("count").get<std::size_t>();
    num_classes = header.at("num_classes").get<std::size_t>();
    pack.class_names = header.at("class_names").get<std::vector<std::string>>();
    pack.normalized = header.at("normalized").get<bool>();
    const auto& seed = header.at("seed");
    if (!seed.is_null()) pack.seed = seed.get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(12, std::string("bad pack header: ") + e.what());
  }
  if (pack.class_names.size() != num_classes) {
    throw FormatError(12, "num_classes does not match class_names length");
  }

  const std::size_t expected = count * pack.dim * 4 + count * 4;
  if (r.remaining() != expected) {
    throw FormatError(payload_offset, "payload length mismatch: expected " +
                                          std::to_string(expected) + " bytes, got " +
                                          std::to_string(r.remaining()));
  }
  pack.features.resize(count * pack.dim);
  for (auto& v : pack.features) v = r.f32();
  pack.labels.resize(count);
  for (auto& y : pack.labels) y = r.u32();
  pack.validate();
  return pack;
}

void write_pack(const FeaturePack& pack, std::ostream& out) {
  const auto bytes = encode_pack(pack);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing pack");
}

FeaturePack read_pack(std::istream& in) {
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_pack(bytes);
}

void write_pack_file(const FeaturePack& pack, const std::filesystem::path& path) {
  write_bytes_file(encode_pack(pack), path);
}

FeaturePack read_pack_file(const std::filesystem::path& path) {
  return decode_pack(read_bytes_file(path));
}

Matrix normalize_rows(const Matrix& m) {
  Matrix out = m;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    if (!(n > 0.0)) throw DegenerateError(static_cast<std::size_t>(i), "zero-norm row");
    out.row(i) /= n;
  }
  return out;
}

FeaturePack l2_normalize(const FeaturePack& pack) {
  FeaturePack out = pack;
  for (std::size_t i = 0; i < pack.count(); ++i) {
    double sq = 0.0;
    for (float v : pack.row(i)) sq += static_cast<double>(v) * v;
    const double n = std::sqrt(sq);
    if (!(n > 0.0)) throw DegenerateError(i, "zero-norm row");
    for (std::size_t j = 0; j < pack.dim; ++j) {
      out.features[i * pack.dim + j] = static_cast<float>(pack.features[i * pack.dim + j] / n);
    }
  }
  out.normalized = true;
  return out;
}

FeaturePack make_pack(PackKind kind, const Matrix& features, std::vector<std::uint32_t> labels,
                      std::vector<std::string> class_names, bool normalized) {
  FeaturePack p;
  p.kind = kind;
  p.dim = static_cast<std::size_t>(features.cols());
  p.class_names = std::move(class_names);
  p.labels = std::move(labels);
  p.features.resize(static_cast<std::size_t>(features.size()));
  for (Eigen::Index i = 0; i < features.size(); ++i) {
    p.features[static_cast<std::size_t>(i)] = static_cast<float>(features.data()[i]);
  }
  p.normalized = normalized;
  return p;
}

}  // namespace candle
