#include "candle/checkpoint.hpp"

#include "candle/byte_io.hpp"
#include "candle/errors.hpp"

namespace candle {

using nlohmann::ordered_json;

namespace {

void put(ByteWriter& w, const Matrix& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) w.f32(static_cast<float>(m.data()[i]));
}

Matrix take(ByteReader& r, Eigen::Index rows, Eigen::Index cols) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = r.f32();
  return m;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const HeadModel& model) {
  const auto& p = model.params;
  const auto& protos = model.prototypes;
  p.validate();
  const auto d = static_cast<Eigen::Index>(p.dim());
  if (protos.textual.cols() != d || protos.visual.cols() != d) {
    throw ValidationError("dim", "prototype width differs from model width");
  }
  if (static_cast<std::size_t>(protos.visual.rows()) != protos.split.base_ids.size() ||
      static_cast<std::size_t>(protos.virtual_protos.rows()) != protos.split.new_ids.size()) {
    throw ValidationError("prototypes", "prototype rows do not match base/new ids");
  }

  ordered_json h;
  h["dim"] = p.dim();
  h["heads"] = p.heads;
  h["tau_t"] = p.tau_t;
  h["tau_v"] = p.tau_v;
  h["base_ids"] = protos.split.base_ids;
  h["new_ids"] = protos.split.new_ids;
  h["class_names"] = model.class_names;
  h["use_attention"] = model.options.use_attention;
  h["use_virtual"] = model.options.use_virtual;
  h["mask"] = to_string(model.options.mask);
  const std::string text = h.dump();

  ByteWriter w;
  w.bytes(std::span<const char>(kModelMagic, 4));
  w.u32(kModelVersion);
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.bytes(std::span<const char>(text.data(), text.size()));
  for (const Matrix* m : {&p.proj_image, &p.proj_text, &p.query, &p.key, &p.value, &p.output,
                          &protos.visual, &protos.textual, &protos.virtual_protos}) {
    put(w, *m);
  }
  return std::move(w).take();
}

HeadModel decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic(kModelMagic);
  const auto version = r.u32();
  if (version != kModelVersion) throw FormatError(4, "unsupported checkpoint version " + std::to_string(version));
  const auto h = r.json_header();
  const auto payload_offset = r.offset();

  HeadModel m;
  std::size_t dim = 0;
  try {
    dim = h.at("dim").get<std::size_t>();
    m.params.heads = h.at("heads").get<std::size_t>();
    m.params.tau_t = h.at("tau_t").get<double>();
    m.params.tau_v = h.at("tau_v").get<double>();
    m.prototypes.split.base_ids = h.at("base_ids").get<std::vector<std::uint32_t>>();
    m.prototypes.split.new_ids = h.at("new_ids").get<std::vector<std::uint32_t>>();
    m.class_names = h.at("class_names").get<std::vector<std::string>>();
    m.options.use_attention = h.value("use_attention", true);
    m.options.use_virtual = h.value("use_virtual", true);
    m.options.mask = attention_mask_from_string(h.value("mask", std::string("none")));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(12, std::string("bad checkpoint header: ") + e.what());
  }
  const auto k = m.class_names.size();
  const auto kb = m.prototypes.split.base_ids.size();
  const auto kn = m.prototypes.split.new_ids.size();
  const std::size_t expected = 4 * dim * (6 * dim + kb + k + kn);
  if (r.remaining() != expected) {
    throw FormatError(payload_offset, "payload length mismatch: expected " + std::to_string(expected) +
                                          " bytes, got " + std::to_string(r.remaining()));
  }
  const auto d = static_cast<Eigen::Index>(dim);
  auto& p = m.params;
  for (Matrix* w : {&p.proj_image, &p.proj_text, &p.query, &p.key, &p.value, &p.output}) *w = take(r, d, d);
  m.prototypes.visual = take(r, static_cast<Eigen::Index>(kb), d);
  m.prototypes.textual = take(r, static_cast<Eigen::Index>(k), d);
  m.prototypes.virtual_protos = take(r, static_cast<Eigen::Index>(kn), d);
  p.validate();
  m.prototypes.split.validate(k, false);
  return m;
}

void save_checkpoint(const HeadModel& model, const std::filesystem::path& path) {
  write_bytes_file(encode_checkpoint(model), path);
}

HeadModel load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_bytes_file(path));
}

HeadModel round_to_f32(const HeadModel& model) {
  return decode_checkpoint(encode_checkpoint(model));
}

}  // namespace candle
