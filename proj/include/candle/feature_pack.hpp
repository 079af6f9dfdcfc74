#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace candle {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

enum class PackKind { image, text };

const char* to_string(PackKind kind);
PackKind pack_kind_from_string(const std::string& s);

/// Labeled embedding matrix; the interchange unit between tools.
///
/// Features are stored exactly as serialized (row-major f32) so that a
/// read/write round trip is bit-identical. Use `matrix()` for math.
struct FeaturePack {
  std::string dataset = "unnamed";
  std::string split = "all";
  PackKind kind = PackKind::image;
  std::size_t dim = 0;
  std::vector<std::string> class_names;
  std::vector<float> features;  // count x dim, row-major
  std::vector<std::uint32_t> labels;
  bool normalized = false;
  std::optional<std::uint64_t> seed;

  std::size_t count() const { return labels.size(); }
  std::size_t num_classes() const { return class_names.size(); }
  std::span<const float> row(std::size_t i) const {
    return {features.data() + i * dim, dim};
  }

  /// Throws ValidationError naming the first failing field.
  void validate() const;

  /// Features widened to double.
  Matrix matrix() const;
  /// Rows whose label is `class_id`, in pack order.
  std::vector<std::size_t> indices_of(std::uint32_t class_id) const;
  /// Number of samples per class, indexed by class id.
  std::vector<std::size_t> histogram() const;
  /// New pack with the selected rows, in the given order; metadata is copied.
  FeaturePack select(std::span<const std::size_t> rows) const;

  bool operator==(const FeaturePack&) const = default;
};

inline constexpr char kPackMagic[4] = {'C', 'N', 'D', 'P'};
inline constexpr std::uint32_t kPackVersion = 1;

/// Serialize: "CNDP", u32 version, u32 header length, JSON header,
/// f32 LE features, u32 LE labels.
std::vector<std::uint8_t> encode_pack(const FeaturePack& pack);
FeaturePack decode_pack(std::span<const std::uint8_t> bytes);

void write_pack(const FeaturePack& pack, std::ostream& out);
FeaturePack read_pack(std::istream& in);
void write_pack_file(const FeaturePack& pack, const std::filesystem::path& path);
FeaturePack read_pack_file(const std::filesystem::path& path);

/// Scale every row to unit Euclidean norm and set `normalized`.
/// Throws DegenerateError on a zero row.
FeaturePack l2_normalize(const FeaturePack& pack);

/// Row-wise normalization of a dense matrix (same error contract).
Matrix normalize_rows(const Matrix& m);

/// Pack from a double matrix; values are rounded to f32.
FeaturePack make_pack(PackKind kind, const Matrix& features, std::vector<std::uint32_t> labels,
                      std::vector<std::string> class_names, bool normalized);

}  // namespace candle
