#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "candle/feature_pack.hpp"
#include "candle/prototypes.hpp"

namespace candle {

/// Which attention pairs are blocked. The visual part is image features,
/// visual prototypes and virtual prototypes; the textual part is the
/// textual prototypes.
enum class AttentionMask { none, within_visual, within_text, cross };

const char* to_string(AttentionMask mask);
AttentionMask attention_mask_from_string(const std::string& s);

/// Architecture switches used by the ablations.
struct HeadOptions {
  bool use_attention = true;
  bool use_virtual = true;
  AttentionMask mask = AttentionMask::none;
  bool operator==(const HeadOptions&) const = default;
};

/// Trainable weights plus the two (fixed) temperatures. All weight matrices
/// are D x D and act on column vectors: projected = W * x.
struct ModelParams {
  std::size_t heads = 4;
  double tau_t = 0.01;
  double tau_v = 0.01;
  Matrix proj_image;
  Matrix proj_text;
  Matrix query;
  Matrix key;
  Matrix value;
  Matrix output;

  std::size_t dim() const { return static_cast<std::size_t>(proj_image.rows()); }
  void validate() const;
};

/// Identity projections, query/key/value ~ N(0, 0.02^2), zero output matrix.
ModelParams init_params(std::size_t dim, std::size_t heads, double tau_t, double tau_v,
                        std::uint64_t seed);

/// Gradient (or momentum) buffers, one per trainable tensor.
struct ParamGrads {
  Matrix proj_image;
  Matrix proj_text;
  Matrix query;
  Matrix key;
  Matrix value;
  Matrix output;
  Matrix virtual_protos;

  static ParamGrads zeros_like(const ModelParams& p, const Matrix& virtual_protos);
};

/// Row-wise cosine similarity between A and B divided by tau.
Matrix cosine_logits(const Matrix& a, const Matrix& b, double tau);

/// Everything the backward pass needs from a forward evaluation.
struct HeadForward {
  std::size_t batch = 0;
  std::size_t num_protos = 0;  // rows of [visual; virtual]
  std::size_t num_text = 0;
  Matrix samples;      // B x D
  Matrix protos;       // P x D, [visual; virtual]
  Matrix textual;      // K x D
  Matrix tokens;       // N x D, [P_I x; P_I protos; P_T text]
  Matrix q, k, v;      // N x D
  std::vector<Matrix> attn;  // per head, N x N (rows sum to 1 or 0)
  Matrix context;      // N x D
  Matrix out;          // N x D
  Matrix z_proj;       // B x K
  Matrix z_visual;     // B x P, columns in [visual; virtual] order
  Matrix z_text;       // B x K
  bool attention_applied = false;
};

/// Full head evaluation: projection logits, cross-modal attention, and the
/// post-attention visual and textual logits.
HeadForward head_forward(const ModelParams& params, const HeadOptions& options,
                         const Matrix& samples, const Matrix& visual,
                         const Matrix& virtual_protos, const Matrix& textual);

struct HeadGrads {
  ParamGrads params;  // virtual_protos is left empty; see d_protos
  Matrix d_samples;   // B x D
  Matrix d_protos;    // P x D, rows in [visual; virtual] order
};

/// Vector-Jacobian product of head_forward for upstream logit gradients.
HeadGrads head_backward(const ModelParams& params, const HeadForward& fwd, const Matrix& dz_proj,
                        const Matrix& dz_visual, const Matrix& dz_text);

/// z_P[b,i] = cos(P_I x_b, P_T T_i) / tau_t.
Matrix project_logits(const Matrix& samples, const Matrix& textual, const ModelParams& params);

struct AttentionOutput {
  Matrix samples;  // x'
  Matrix protos;   // [V'; V^']
  Matrix textual;  // T'
};

AttentionOutput cross_modal_attention(const Matrix& samples, const Matrix& visual,
                                      const Matrix& virtual_protos, const Matrix& textual,
                                      const ModelParams& params, AttentionMask mask);

/// z_V over the [visual; virtual] prototype block, temperature tau_v.
Matrix visual_logits(const Matrix& attended_samples, const Matrix& attended_protos,
                     const ModelParams& params);
/// z_T, temperature tau_t.
Matrix textual_logits(const Matrix& attended_samples, const Matrix& attended_text,
                      const ModelParams& params);

/// Inference logits z = z_V + z_T with columns indexed by class id. Without
/// virtual prototypes, the visual slot of a new class is filled by
/// image-text matching at tau_v.
Matrix aggregated_logits(const ModelParams& params, const HeadOptions& options,
                         const PrototypeSet& protos, const Matrix& samples);

/// aggregated_logits over `samples` processed as attention sequences of at
/// most `batch_size` rows. Rows are grouped by a seeded shuffle so that a
/// batch is not dominated by one class; results come back in input order.
Matrix batched_logits(const ModelParams& params, const HeadOptions& options,
                      const PrototypeSet& protos, const Matrix& samples, std::size_t batch_size,
                      std::uint64_t order_seed);

/// Argmax over `label_space` (class ids); ties go to the lowest id.
std::vector<std::uint32_t> predict(const Matrix& logits, std::span<const std::uint32_t> label_space);

/// Argmax of raw cosine against rows of `prototypes`; row r stands for
/// class_ids[r]. Ties go to the lowest class id.
std::vector<std::uint32_t> nearest_prototype(const Matrix& samples, const Matrix& prototypes,
                                             std::span<const std::uint32_t> class_ids);

/// Image-text matching over all textual prototypes.
std::vector<std::uint32_t> zero_shot_predict(const Matrix& samples, const Matrix& textual);
/// Image-image matching over visual prototypes; row r is class r.
std::vector<std::uint32_t> visual_proto_predict(const Matrix& samples, const Matrix& visual);

}  // namespace candle
