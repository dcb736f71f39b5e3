#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "kvmem/error.hpp"
#include "kvmem/lora.hpp"
#include "kvmem/model.hpp"

namespace kvmem {

inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string shape_token(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

inline std::size_t parse_count(const std::string& s, const std::string& what) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
    throw FormatError("checkpoint: bad " + what + " '" + s + "'");
  return std::stoull(s);
}

// key=value tokens after the leading keyword
inline std::map<std::string, std::string> parse_fields(std::istringstream& line) {
  std::map<std::string, std::string> out;
  std::string tok;
  while (line >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw FormatError("checkpoint: expected key=value, got " + tok);
    out[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  return out;
}

inline const std::string& field(const std::map<std::string, std::string>& f,
                                const std::string& key) {
  auto it = f.find(key);
  if (it == f.end()) throw FormatError("checkpoint: manifest lacks '" + key + "'");
  return it->second;
}

}  // namespace detail

inline std::string config_line(const ModelConfig& c) {
  return "config n_layers=" + std::to_string(c.n_layers) + " d_e=" + std::to_string(c.d_e) +
         " d_m=" + std::to_string(c.ffn_width()) + " n_heads=" + std::to_string(c.n_heads) +
         " vocab_size=" + std::to_string(c.vocab_size) + " max_seq=" + std::to_string(c.max_seq) +
         " ffn_kind=" + to_string(c.ffn_kind) + " activation=" + to_string(c.activation) +
         " seed=" + std::to_string(c.seed);
}

inline std::string lora_line(const LoraSpec& s) {
  std::string targets;
  for (std::size_t i = 0; i < s.targets.size(); ++i)
    targets += (i ? "," : "") + to_string(s.targets[i]);
  return "lora rank=" + std::to_string(s.rank) + " alpha=" + detail::format_double(s.alpha) +
         " seed=" + std::to_string(s.seed) + " targets=" + targets;
}

/// Text manifest followed by a little-endian f32 payload in index order.
inline std::string checkpoint_bytes(const Model<float>& model) {
  std::ostringstream head;
  head << "kvmem-checkpoint " << kCheckpointVersion << "\n" << config_line(model.config) << "\n";
  if (model.lora) head << lora_line(*model.lora) << "\n";
  std::vector<std::string> index;
  std::size_t offset = 0;
  std::string payload;
  visit_params(model, [&](const std::string& name, const Tensor<float>& t, bool) {
    index.push_back(name + " " + detail::shape_token(t.shape()) + " " + std::to_string(offset));
    for (float v : t.data()) {
      const auto bits = std::bit_cast<std::uint32_t>(v);
      for (int b = 0; b < 4; ++b) payload.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
    }
    offset += 4 * t.size();
  });
  head << "tensors " << index.size() << "\n";
  for (const auto& line : index) head << line << "\n";
  head << "payload_bytes " << payload.size() << "\nend\n";
  return head.str() + payload;
}

inline Model<float> checkpoint_from_bytes(const std::string& bytes) {
  std::size_t pos = 0;
  auto next_line = [&]() {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string::npos) throw FormatError("checkpoint: manifest ends early");
    std::string line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };

  {
    std::istringstream magic(next_line());
    std::string word;
    int version = 0;
    if (!(magic >> word >> version) || word != "kvmem-checkpoint")
      throw FormatError("checkpoint: not a kvmem checkpoint");
    if (version != kCheckpointVersion)
      throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  }

  ModelConfig config;
  {
    std::istringstream line(next_line());
    std::string word;
    line >> word;
    if (word != "config") throw FormatError("checkpoint: expected config line");
    const auto f = detail::parse_fields(line);
    config.n_layers = detail::parse_count(detail::field(f, "n_layers"), "n_layers");
    config.d_e = detail::parse_count(detail::field(f, "d_e"), "d_e");
    config.d_m = detail::parse_count(detail::field(f, "d_m"), "d_m");
    config.n_heads = detail::parse_count(detail::field(f, "n_heads"), "n_heads");
    config.vocab_size = detail::parse_count(detail::field(f, "vocab_size"), "vocab_size");
    config.max_seq = detail::parse_count(detail::field(f, "max_seq"), "max_seq");
    config.seed = detail::parse_count(detail::field(f, "seed"), "seed");
    try {
      config.ffn_kind = parse_ffn_kind(detail::field(f, "ffn_kind"));
      config.activation = parse_activation(detail::field(f, "activation"));
      config.validate();
    } catch (const ConfigError& e) {
      throw FormatError(std::string("checkpoint: ") + e.what());
    }
  }

  // Reject before allocating: the base weights alone need this many bytes.
  if (config.parameter_count() > bytes.size() / 4) {
    throw FormatError("checkpoint: payload truncated (config needs " +
                      std::to_string(4 * config.parameter_count()) + " bytes)");
  }
  Model<float> model = init_params<float>(config);
  std::string line = next_line();
  if (line.rfind("lora ", 0) == 0) {
    std::istringstream ls(line.substr(5));
    const auto f = detail::parse_fields(ls);
    LoraSpec spec;
    spec.rank = detail::parse_count(detail::field(f, "rank"), "rank");
    spec.seed = detail::parse_count(detail::field(f, "seed"), "seed");
    try {
      spec.alpha = std::stod(detail::field(f, "alpha"));
      std::istringstream ts(detail::field(f, "targets"));
      std::string t;
      while (std::getline(ts, t, ',')) spec.targets.push_back(parse_lora_target(t));
      attach(model, spec);
    } catch (const std::invalid_argument& e) {
      throw FormatError(std::string("checkpoint: bad lora line: ") + e.what());
    }
    line = next_line();
  }

  std::istringstream count_line(line);
  std::string word, count;
  count_line >> word >> count;
  if (word != "tensors") throw FormatError("checkpoint: expected tensor index");
  const std::size_t n = detail::parse_count(count, "tensor count");

  struct Entry {
    std::string name, shape;
    std::size_t offset;
  };
  std::vector<Entry> index;
  for (std::size_t i = 0; i < n; ++i) {
    std::istringstream es(next_line());
    Entry e;
    std::string off;
    if (!(es >> e.name >> e.shape >> off)) throw FormatError("checkpoint: bad index entry");
    e.offset = detail::parse_count(off, "offset");
    index.push_back(std::move(e));
  }
  std::istringstream pl(next_line());
  std::string pb;
  pl >> word >> pb;
  if (word != "payload_bytes") throw FormatError("checkpoint: expected payload_bytes");
  const std::size_t payload_bytes = detail::parse_count(pb, "payload_bytes");
  if (next_line() != "end") throw FormatError("checkpoint: expected end of manifest");

  const std::size_t available = bytes.size() - pos;
  if (available < payload_bytes) {
    throw FormatError("checkpoint: payload truncated (" + std::to_string(available) + " of " +
                      std::to_string(payload_bytes) + " bytes)");
  }
  if (available > payload_bytes) throw FormatError("checkpoint: trailing bytes after payload");

  std::size_t i = 0, expected_offset = 0;
  visit_params(model, [&](const std::string& name, Tensor<float>& t, bool) {
    if (i >= index.size()) throw FormatError("checkpoint: index lacks tensor " + name);
    const auto& e = index[i++];
    if (e.name != name || e.shape != detail::shape_token(t.shape()))
      throw FormatError("checkpoint: index entry " + e.name + " " + e.shape + " does not match " +
                        name + " " + detail::shape_token(t.shape()));
    if (e.offset != expected_offset) throw FormatError("checkpoint: bad offset for " + name);
    if (e.offset + 4 * t.size() > payload_bytes)
      throw FormatError("checkpoint: tensor " + name + " runs past the payload");
    const auto* src = reinterpret_cast<const unsigned char*>(bytes.data() + pos + e.offset);
    auto data = t.data();
    for (std::size_t k = 0; k < data.size(); ++k) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= std::uint32_t(src[4 * k + b]) << (8 * b);
      data[k] = std::bit_cast<float>(bits);
    }
    expected_offset += 4 * t.size();
  });
  if (i != index.size()) throw FormatError("checkpoint: index lists extra tensors");
  if (expected_offset != payload_bytes) throw FormatError("checkpoint: payload size mismatch");
  return model;
}

inline void save_checkpoint(const Model<float>& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  const auto bytes = checkpoint_bytes(model);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

inline Model<float> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return checkpoint_from_bytes(ss.str());
}

}  // namespace kvmem
