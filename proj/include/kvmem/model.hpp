#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "kvmem/autograd.hpp"
#include "kvmem/error.hpp"
#include "kvmem/tensor.hpp"

namespace kvmem {

enum class FfnKind { standard, swiglu };
enum class Activation { relu, swish, sigmoid, identity };

inline std::string to_string(FfnKind k) {
  return k == FfnKind::standard ? "standard" : "swiglu";
}

inline FfnKind parse_ffn_kind(const std::string& s) {
  if (s == "standard") return FfnKind::standard;
  if (s == "swiglu") return FfnKind::swiglu;
  throw ConfigError("ffn_kind", "expected 'standard' or 'swiglu', got '" + s + "'");
}

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::swish: return "swish";
    case Activation::sigmoid: return "sigmoid";
    case Activation::identity: return "identity";
  }
  return "?";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "swish") return Activation::swish;
  if (s == "sigmoid") return Activation::sigmoid;
  if (s == "identity") return Activation::identity;
  throw ConfigError("activation", "unknown activation '" + s + "'");
}

/// 4*d_e for the classic FFN, floor(8/3*d_e) for SwiGLU.
inline std::size_t default_ffn_width(FfnKind kind, std::size_t d_e) {
  return kind == FfnKind::standard ? 4 * d_e : (8 * d_e) / 3;
}

struct ModelConfig {
  std::size_t n_layers = 3;
  std::size_t d_e = 128;
  std::size_t d_m = 0;  // 0 selects default_ffn_width
  std::size_t n_heads = 4;
  std::size_t vocab_size = 0;
  std::size_t max_seq = 16;
  FfnKind ffn_kind = FfnKind::standard;
  Activation activation = Activation::relu;
  std::uint64_t seed = 0;

  std::size_t ffn_width() const {
    return d_m ? d_m : default_ffn_width(ffn_kind, d_e);
  }

  void validate() const {
    auto positive = [](const char* field, std::size_t v) {
      if (v < 1) throw ConfigError(field, "must be >= 1");
    };
    positive("n_layers", n_layers);
    positive("d_e", d_e);
    positive("n_heads", n_heads);
    positive("vocab_size", vocab_size);
    positive("max_seq", max_seq);
    if (ffn_width() < 1) throw ConfigError("d_m", "must be >= 1");
    if (d_e % n_heads != 0) {
      throw ConfigError("n_heads", "d_e=" + std::to_string(d_e) +
                                       " is not divisible by n_heads=" +
                                       std::to_string(n_heads));
    }
  }

  /// Closed-form parameter count of the base model (no adapters).
  std::size_t parameter_count() const {
    const std::size_t d = d_e, m = ffn_width();
    const std::size_t ffn_mats = ffn_kind == FfnKind::standard ? 2 : 3;
    const std::size_t per_layer = 4 * d * d + 4 * d + ffn_mats * m * d;
    return vocab_size * d + max_seq * d + n_layers * per_layer + 2 * d +
           vocab_size * d;
  }

  bool operator==(const ModelConfig&) const = default;
};

/// Matrices that can carry a low-rank adapter.
enum class LoraTarget {
  attn_q,
  attn_v,
  ffn_key_gate,
  ffn_key_up,
  ffn_value_down,
  ffn_key,
  ffn_value
};

inline std::string to_string(LoraTarget t) {
  switch (t) {
    case LoraTarget::attn_q: return "attn_q";
    case LoraTarget::attn_v: return "attn_v";
    case LoraTarget::ffn_key_gate: return "ffn_key_gate";
    case LoraTarget::ffn_key_up: return "ffn_key_up";
    case LoraTarget::ffn_value_down: return "ffn_value_down";
    case LoraTarget::ffn_key: return "ffn_key";
    case LoraTarget::ffn_value: return "ffn_value";
  }
  return "?";
}

inline LoraTarget parse_lora_target(const std::string& s) {
  for (auto t : {LoraTarget::attn_q, LoraTarget::attn_v, LoraTarget::ffn_key_gate,
                 LoraTarget::ffn_key_up, LoraTarget::ffn_value_down,
                 LoraTarget::ffn_key, LoraTarget::ffn_value}) {
    if (to_string(t) == s) return t;
  }
  throw ConfigError("targets", "unknown LoRA target '" + s + "'");
}

struct LoraSpec {
  std::size_t rank = 8;
  double alpha = 8.0;
  std::vector<LoraTarget> targets;
  std::uint64_t seed = 0;

  double scale() const { return alpha / static_cast<double>(rank); }
  bool operator==(const LoraSpec&) const = default;
};

/// Rank-r correction B*A for a [d_out x d_in] linear map.
template <class T>
struct LoraPair {
  Tensor<T> A;  // [r x d_in]
  Tensor<T> B;  // [d_out x r]
};

template <class T>
struct AttentionLayer {
  Tensor<T> W_q, W_k, W_v, W_o;  // [d_e x d_e], applied as x * W^T
};

/// Classic FFN: f(h K^T) V with K, V both [d_m x d_e].
template <class T>
struct StandardFfn {
  Tensor<T> K, V;
};

/// Gated FFN: (Swish(x K_gate^T) * (x K_up^T)) V_down, all [d_m x d_e].
template <class T>
struct SwigluFfn {
  Tensor<T> K_gate, K_up, V_down;
};

template <class T>
using FfnLayer = std::variant<StandardFfn<T>, SwigluFfn<T>>;

template <class T>
struct Block {
  Tensor<T> ln1_gain, ln1_bias;
  AttentionLayer<T> attn;
  Tensor<T> ln2_gain, ln2_bias;
  FfnLayer<T> ffn;
  std::map<LoraTarget, LoraPair<T>> adapters;
};

template <class T = float>
struct Model {
  using scalar_type = T;

  ModelConfig config;
  Tensor<T> tok_emb;  // [vocab x d_e]
  Tensor<T> pos_emb;  // [max_seq x d_e]
  std::vector<Block<T>> blocks;
  Tensor<T> lnf_gain, lnf_bias;
  Tensor<T> w_out;  // [vocab x d_e]
  std::optional<LoraSpec> lora;
};

/// Visits every parameter tensor in canonical order as
/// `f(name, tensor, is_adapter)`. Adapters follow the base weights of
/// their layer. Works on const and non-const models.
template <class M, class F>
void visit_params(M& model, F&& f) {
  using S = typename std::remove_const_t<M>::scalar_type;
  f(std::string("tok_emb"), model.tok_emb, false);
  f(std::string("pos_emb"), model.pos_emb, false);
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    auto& b = model.blocks[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    f(p + "ln1.gain", b.ln1_gain, false);
    f(p + "ln1.bias", b.ln1_bias, false);
    f(p + "attn.q", b.attn.W_q, false);
    f(p + "attn.k", b.attn.W_k, false);
    f(p + "attn.v", b.attn.W_v, false);
    f(p + "attn.o", b.attn.W_o, false);
    f(p + "ln2.gain", b.ln2_gain, false);
    f(p + "ln2.bias", b.ln2_bias, false);
    std::visit(
        [&](auto& ffn) {
          using L = std::remove_cvref_t<decltype(ffn)>;
          if constexpr (std::is_same_v<L, StandardFfn<S>>) {
            f(p + "ffn.key", ffn.K, false);
            f(p + "ffn.value", ffn.V, false);
          } else {
            f(p + "ffn.key_gate", ffn.K_gate, false);
            f(p + "ffn.key_up", ffn.K_up, false);
            f(p + "ffn.value_down", ffn.V_down, false);
          }
        },
        b.ffn);
    for (auto& [target, pair] : b.adapters) {
      f(p + "lora." + to_string(target) + ".A", pair.A, true);
      f(p + "lora." + to_string(target) + ".B", pair.B, true);
    }
  }
  f(std::string("ln_f.gain"), model.lnf_gain, false);
  f(std::string("ln_f.bias"), model.lnf_bias, false);
  f(std::string("out"), model.w_out, false);
}

template <class T>
std::size_t count_parameters(const Model<T>& model, bool include_adapters = false) {
  std::size_t n = 0;
  visit_params(model, [&](const std::string&, const Tensor<T>& t, bool adapter) {
    if (!adapter || include_adapters) n += t.size();
  });
  return n;
}

/// Seeded scaled-normal initialisation (std = d_e^-1/2) of every weight
/// matrix and embedding; layer-norm gains start at 1 and biases at 0.
template <class T = float>
Model<T> init_params(ModelConfig config) {
  config.validate();
  config.d_m = config.ffn_width();
  const std::size_t d = config.d_e, m = config.d_m;
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(double(d)));
  auto randn = [&](Shape shape) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(normal(rng));
    return t;
  };

  Model<T> model;
  model.config = config;
  model.tok_emb = randn({config.vocab_size, d});
  model.pos_emb = randn({config.max_seq, d});
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    Block<T> b;
    b.ln1_gain = Tensor<T>({d}, T(1));
    b.ln1_bias = Tensor<T>({d});
    b.attn.W_q = randn({d, d});
    b.attn.W_k = randn({d, d});
    b.attn.W_v = randn({d, d});
    b.attn.W_o = randn({d, d});
    b.ln2_gain = Tensor<T>({d}, T(1));
    b.ln2_bias = Tensor<T>({d});
    if (config.ffn_kind == FfnKind::standard) {
      StandardFfn<T> f;
      f.K = randn({m, d});
      f.V = randn({m, d});
      b.ffn = std::move(f);
    } else {
      SwigluFfn<T> f;
      f.K_gate = randn({m, d});
      f.K_up = randn({m, d});
      f.V_down = randn({m, d});
      b.ffn = std::move(f);
    }
    model.blocks.push_back(std::move(b));
  }
  model.lnf_gain = Tensor<T>({d}, T(1));
  model.lnf_bias = Tensor<T>({d});
  model.w_out = randn({config.vocab_size, d});
  return model;
}

/// Tape handles for one linear map, with an optional adapter.
///
/// `input_major` marks weights stored [d_in x d_out] and applied as x * W
/// (the FFN value matrices); all others are stored [d_out x d_in] and
/// applied as x * W^T.
struct LinearVars {
  LinearVars() = default;
  LinearVars(Var w, bool in_major = false) : weight(w), input_major(in_major) {}

  Var weight;
  bool input_major = false;
  std::optional<Var> lora_a;
  std::optional<Var> lora_b;
  double lora_scale = 1.0;
};

template <class T>
Var apply_linear(Tape<T>& tape, Var x, const LinearVars& lin) {
  Var y = lin.input_major ? matmul(tape, x, lin.weight) : matmul_bt(tape, x, lin.weight);
  if (lin.lora_a && lin.lora_b) {
    Var low = matmul_bt(tape, x, *lin.lora_a);
    Var up = matmul_bt(tape, low, *lin.lora_b);
    y = add(tape, y, scale(tape, up, static_cast<T>(lin.lora_scale)));
  }
  return y;
}

template <class T>
Var activate(Tape<T>& tape, Var x, Activation f) {
  switch (f) {
    case Activation::relu: return relu(tape, x);
    case Activation::swish: return swish(tape, x);
    case Activation::sigmoid: return sigmoid(tape, x);
    case Activation::identity: return x;
  }
  return x;
}

/// f(h K^T) V on the tape. `activations`, when given, receives the node
/// holding f(h K^T), the per-key weights applied to the value rows.
template <class T>
Var ffn_block(Tape<T>& tape, Var h, const LinearVars& key, const LinearVars& value,
              Activation f, Var* activations = nullptr) {
  Var act = activate(tape, apply_linear(tape, h, key), f);
  if (activations) *activations = act;
  return apply_linear(tape, act, value);
}

/// (Swish(x K_gate^T) * (x K_up^T)) V_down on the tape.
template <class T>
Var swiglu_block(Tape<T>& tape, Var x, const LinearVars& gate, const LinearVars& up,
                 const LinearVars& down, Var* activations = nullptr) {
  Var g = swish(tape, apply_linear(tape, x, gate));
  Var u = apply_linear(tape, x, up);
  Var act = mul(tape, g, u);
  if (activations) *activations = act;
  return apply_linear(tape, act, down);
}

namespace detail {
template <class T>
void require_width(const char* op, const Tensor<T>& x, const Tensor<T>& w) {
  if (x.cols() != w.cols()) {
    throw ShapeError(std::string(op) + ": input " + shape_str(x.shape()) +
                     " does not match key width of " + shape_str(w.shape()));
  }
}
}  // namespace detail

/// Untracked f(h K^T) V. When `activations` is non-null it receives f(h K^T).
template <class T>
Tensor<T> ffn_forward(const StandardFfn<T>& layer, const Tensor<T>& h, Activation f,
                      Tensor<T>* activations = nullptr) {
  detail::require_width("ffn_forward", h, layer.K);
  if (layer.K.shape() != layer.V.shape()) {
    throw ShapeError("ffn_forward: K " + shape_str(layer.K.shape()) + " and V " +
                     shape_str(layer.V.shape()) + " differ");
  }
  Tape<T> tape(false);
  Var act;
  Var out = ffn_block(tape, tape.input(h), LinearVars{tape.input(layer.K)},
                      LinearVars{tape.input(layer.V), true}, f, &act);
  if (activations) *activations = tape.value(act).detached();
  return tape.value(out).detached();
}

/// Untracked (Swish(x K_gate^T) * (x K_up^T)) V_down.
template <class T>
Tensor<T> swiglu_forward(const SwigluFfn<T>& layer, const Tensor<T>& x,
                         Tensor<T>* activations = nullptr) {
  detail::require_width("swiglu_forward", x, layer.K_gate);
  detail::require_width("swiglu_forward", x, layer.K_up);
  Tape<T> tape(false);
  Var act;
  Var out = swiglu_block(tape, tape.input(x), LinearVars{tape.input(layer.K_gate)},
                         LinearVars{tape.input(layer.K_up)},
                         LinearVars{tape.input(layer.V_down), true}, &act);
  if (activations) *activations = tape.value(act).detached();
  return tape.value(out).detached();
}

/// Optional per-layer diagnostics captured during model_forward.
template <class T>
struct ForwardTrace {
  std::vector<Tensor<T>> ffn_activations;  // one [seq x d_m] per layer
};

inline void check_tokens(const ModelConfig& config, std::span<const std::size_t> ids) {
  if (ids.empty()) throw std::invalid_argument("model_forward: empty sequence");
  if (ids.size() > config.max_seq) {
    throw std::length_error("model_forward: sequence of " + std::to_string(ids.size()) +
                            " tokens exceeds max_seq " + std::to_string(config.max_seq));
  }
  for (auto id : ids) {
    if (id >= config.vocab_size) {
      throw std::out_of_range("model_forward: token " + std::to_string(id) +
                              " outside vocabulary of " +
                              std::to_string(config.vocab_size));
    }
  }
}

/// Embedding, pre-norm causal attention and FFN blocks with residual
/// additions, final norm and output projection. Returns [seq x vocab]
/// next-token logits. Parameters of a non-const model are bound as
/// trainable leaves (subject to their requires_grad flag).
template <class T, class M>
Var model_forward(Tape<T>& tape, M& model, std::span<const std::size_t> ids,
                  ForwardTrace<T>* trace = nullptr) {
  static_assert(std::is_same_v<std::remove_const_t<M>, Model<T>>);
  const auto& cfg = model.config;
  check_tokens(cfg, ids);
  auto leaf = [&tape](auto& t) {
    if constexpr (std::is_const_v<M>) {
      return tape.input(t);
    } else {
      return tape.param(t);
    }
  };
  std::vector<std::size_t> token_ids(ids.begin(), ids.end());
  std::vector<std::size_t> positions(ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;

  Var x = add(tape, gather_rows(tape, leaf(model.tok_emb), token_ids),
              gather_rows(tape, leaf(model.pos_emb), positions));

  const double lora_scale = model.lora ? model.lora->scale() : 1.0;
  for (auto& block : model.blocks) {
    auto linear = [&](auto& weight, bool input_major, LoraTarget target) {
      LinearVars lin{leaf(weight), input_major};
      auto it = block.adapters.find(target);
      if (it != block.adapters.end()) {
        lin.lora_a = leaf(it->second.A);
        lin.lora_b = leaf(it->second.B);
        lin.lora_scale = lora_scale;
      }
      return lin;
    };

    Var h = layer_norm(tape, x, leaf(block.ln1_gain), leaf(block.ln1_bias));
    Var q = apply_linear(tape, h, linear(block.attn.W_q, false, LoraTarget::attn_q));
    Var k = matmul_bt(tape, h, leaf(block.attn.W_k));
    Var v = apply_linear(tape, h, linear(block.attn.W_v, false, LoraTarget::attn_v));
    Var att = causal_attention(tape, q, k, v, cfg.n_heads);
    x = add(tape, x, matmul_bt(tape, att, leaf(block.attn.W_o)));

    Var h2 = layer_norm(tape, x, leaf(block.ln2_gain), leaf(block.ln2_bias));
    Var act;
    Var ffn_out = std::visit(
        [&](auto& ffn) {
          using L = std::remove_cvref_t<decltype(ffn)>;
          if constexpr (std::is_same_v<L, StandardFfn<T>>) {
            return ffn_block(tape, h2, linear(ffn.K, false, LoraTarget::ffn_key),
                             linear(ffn.V, true, LoraTarget::ffn_value), cfg.activation,
                             &act);
          } else {
            return swiglu_block(tape, h2,
                                linear(ffn.K_gate, false, LoraTarget::ffn_key_gate),
                                linear(ffn.K_up, false, LoraTarget::ffn_key_up),
                                linear(ffn.V_down, true, LoraTarget::ffn_value_down),
                                &act);
          }
        },
        block.ffn);
    if (trace) trace->ffn_activations.push_back(tape.value(act).detached());
    x = add(tape, x, ffn_out);
  }
  Var hf = layer_norm(tape, x, leaf(model.lnf_gain), leaf(model.lnf_bias));
  return matmul_bt(tape, hf, leaf(model.w_out));
}

/// Untracked logits [seq x vocab].
template <class T>
Tensor<T> logits(const Model<T>& model, std::span<const std::size_t> ids,
                 ForwardTrace<T>* trace = nullptr) {
  Tape<T> tape(false);
  Var out = model_forward(tape, model, ids, trace);
  return tape.value(out).detached();
}

/// Softmax over the final position's logits.
template <class T>
std::vector<T> next_token_probs(const Model<T>& model, std::span<const std::size_t> ids) {
  const auto l = logits(model, ids);
  return linalg::softmax(linalg::row(l, l.rows() - 1));
}

}  // namespace kvmem
