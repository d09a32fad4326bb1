#pragma once

// Synthetic I/Q modulation datasets and the AMCD file format.

#include <algorithm>
#include <bit>
#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "amc/autodiff/tensor.hpp"
#include "amc/error.hpp"
#include "amc/io.hpp"

namespace amc::signals {

enum class Modulation : std::uint8_t { BPSK, QPSK, PSK8, QAM16, QAM64, PAM4, CPFSK, GFSK };

inline constexpr Modulation kAllModulations[] = {
    Modulation::BPSK,  Modulation::QPSK, Modulation::PSK8,  Modulation::QAM16,
    Modulation::QAM64, Modulation::PAM4, Modulation::CPFSK, Modulation::GFSK};

inline std::string modulation_name(Modulation m) {
  switch (m) {
    case Modulation::BPSK: return "BPSK";
    case Modulation::QPSK: return "QPSK";
    case Modulation::PSK8: return "8PSK";
    case Modulation::QAM16: return "QAM16";
    case Modulation::QAM64: return "QAM64";
    case Modulation::PAM4: return "PAM4";
    case Modulation::CPFSK: return "CPFSK";
    case Modulation::GFSK: return "GFSK";
  }
  return "?";
}

inline Modulation parse_modulation(const std::string& name) {
  for (auto m : kAllModulations) {
    if (modulation_name(m) == name) return m;
  }
  throw ConfigError("unknown modulation '" + name + "'");
}

inline std::size_t alphabet_size(Modulation m) {
  switch (m) {
    case Modulation::BPSK: return 2;
    case Modulation::QPSK: return 4;
    case Modulation::PSK8: return 8;
    case Modulation::QAM16: return 16;
    case Modulation::QAM64: return 64;
    case Modulation::PAM4: return 4;
    case Modulation::CPFSK: return 2;
    case Modulation::GFSK: return 2;
  }
  return 0;
}

inline bool constant_envelope(Modulation m) {
  return m == Modulation::CPFSK || m == Modulation::GFSK;
}

struct ModulationScheme {
  Modulation kind = Modulation::BPSK;
  std::size_t samples_per_symbol = 4;
  double mod_index = 0.5;   // CPFSK / GFSK
  double gfsk_bt = 0.35;    // Gaussian bandwidth-time product
  std::size_t gfsk_span = 3;  // Gaussian pulse length in symbols
};

using Complex = std::complex<double>;

inline std::uint32_t gray(std::uint32_t v) { return v ^ (v >> 1); }

inline std::uint32_t gray_inverse(std::uint32_t g) {
  std::uint32_t v = 0;
  for (; g; g >>= 1) v ^= g;
  return v;
}

/// Gray-mapped, unit-average-energy constellation for the linear schemes.
/// Entry s is the point transmitted for symbol s.
inline std::vector<Complex> constellation(Modulation m) {
  std::vector<Complex> pts;
  auto pam_levels = [](std::uint32_t bits) {
    // level index k -> amplitude 2k - (L-1); symbol bits are Gray coded.
    const std::uint32_t levels = 1u << bits;
    std::vector<double> amp(levels);
    for (std::uint32_t sym = 0; sym < levels; ++sym) {
      const std::uint32_t k = gray_inverse(sym);
      amp[sym] = 2.0 * k - (levels - 1.0);
    }
    return amp;
  };
  switch (m) {
    case Modulation::BPSK:
      pts = {Complex(1, 0), Complex(-1, 0)};
      break;
    case Modulation::QPSK: {
      const double a = 1.0 / std::numbers::sqrt2;
      // high bit -> sign of I, low bit -> sign of Q
      for (std::uint32_t s = 0; s < 4; ++s) {
        pts.emplace_back((s & 2) ? -a : a, (s & 1) ? -a : a);
      }
      break;
    }
    case Modulation::PSK8:
      pts.resize(8);
      for (std::uint32_t k = 0; k < 8; ++k) {
        pts[gray(k)] = std::polar(1.0, 2.0 * std::numbers::pi * k / 8.0);
      }
      break;
    case Modulation::QAM16:
    case Modulation::QAM64: {
      const std::uint32_t bits = m == Modulation::QAM16 ? 2 : 3;
      const auto amp = pam_levels(bits);
      const std::uint32_t side = 1u << bits;
      for (std::uint32_t s = 0; s < side * side; ++s) {
        pts.emplace_back(amp[s >> bits], amp[s & (side - 1)]);
      }
      break;
    }
    case Modulation::PAM4:
      for (double a : pam_levels(2)) pts.emplace_back(a, 0.0);
      break;
    default:
      throw ValueError("constellation: " + modulation_name(m) + " is not a linear scheme");
  }
  double energy = 0.0;
  for (const auto& p : pts) energy += std::norm(p);
  const double scale = 1.0 / std::sqrt(energy / static_cast<double>(pts.size()));
  for (auto& p : pts) p *= scale;
  return pts;
}

/// Gaussian-smoothed rectangular frequency pulse, taps summing to one.
inline std::vector<double> gfsk_pulse(std::size_t sps, double bt, std::size_t span) {
  const std::size_t taps = std::max<std::size_t>(span, 1) * sps;
  const double sigma = std::sqrt(std::log(2.0)) / (2.0 * std::numbers::pi * bt) *
                       static_cast<double>(sps);
  const double center = (static_cast<double>(taps) - static_cast<double>(sps)) / 2.0;
  std::vector<double> g(taps, 0.0);
  double total = 0.0;
  for (std::size_t n = 0; n < taps; ++n) {
    for (std::size_t m = 0; m < sps; ++m) {
      const double t = static_cast<double>(n) - static_cast<double>(m) - center;
      g[n] += std::exp(-t * t / (2.0 * sigma * sigma));
    }
    total += g[n];
  }
  for (auto& v : g) v /= total;
  return g;
}

struct IQFrame {
  std::vector<double> i;
  std::vector<double> q;

  std::size_t length() const { return i.size(); }

  /// Mean |x|^2 per complex sample.
  double power() const {
    if (i.empty()) return 0.0;
    double p = 0.0;
    for (std::size_t n = 0; n < i.size(); ++n) p += i[n] * i[n] + q[n] * q[n];
    return p / static_cast<double>(i.size());
  }

  friend bool operator==(const IQFrame&, const IQFrame&) = default;
};

/// Maps a symbol stream to `frame_len` baseband samples with rectangular
/// pulses (linear schemes) or continuous phase (CPFSK / GFSK).
inline IQFrame modulate(std::span<const std::uint32_t> symbols, const ModulationScheme& scheme,
                        std::size_t frame_len) {
  const std::size_t sps = scheme.samples_per_symbol;
  if (sps == 0) throw ValueError("modulate: samples_per_symbol must be positive");
  const std::size_t m = alphabet_size(scheme.kind);
  for (auto s : symbols) {
    if (s >= m) throw ValueError("modulate: symbol " + std::to_string(s) + " out of range");
  }
  if (symbols.size() * sps < frame_len) throw ValueError("modulate: frame underrun");

  IQFrame f;
  f.i.resize(frame_len);
  f.q.resize(frame_len);
  if (!constant_envelope(scheme.kind)) {
    const auto pts = constellation(scheme.kind);
    for (std::size_t n = 0; n < frame_len; ++n) {
      const Complex p = pts[symbols[n / sps]];
      f.i[n] = p.real();
      f.q[n] = p.imag();
    }
    return f;
  }

  // Frequency per sample, then integrate phase.
  std::vector<double> freq(frame_len, 0.0);
  if (scheme.kind == Modulation::CPFSK) {
    for (std::size_t n = 0; n < frame_len; ++n) {
      freq[n] = (2.0 * symbols[n / sps] - 1.0) / static_cast<double>(sps);
    }
  } else {
    const auto pulse = gfsk_pulse(sps, scheme.gfsk_bt, scheme.gfsk_span);
    const long delay = static_cast<long>(pulse.size() / 2);
    for (std::size_t k = 0; k < symbols.size(); ++k) {
      const double a = 2.0 * symbols[k] - 1.0;
      for (std::size_t t = 0; t < pulse.size(); ++t) {
        const long n = static_cast<long>(k * sps + t) - delay;
        if (n >= 0 && n < static_cast<long>(frame_len)) freq[n] += a * pulse[t];
      }
    }
  }
  double phase = 0.0;
  for (std::size_t n = 0; n < frame_len; ++n) {
    f.i[n] = std::cos(phase);
    f.q[n] = std::sin(phase);
    phase += std::numbers::pi * scheme.mod_index * freq[n];
  }
  return f;
}

enum class ChannelKind : std::uint8_t { AWGN, FlatFading };

struct ChannelModel {
  ChannelKind kind = ChannelKind::AWGN;
  // Log-normal fading: 20*log10(gain) ~ N(0, fading_sigma_db^2).
  double fading_sigma_db = 0.0;

  double sample_gain(std::mt19937_64& rng) const {
    if (kind == ChannelKind::AWGN || fading_sigma_db == 0.0) return 1.0;
    std::normal_distribution<double> d(0.0, fading_sigma_db);
    return std::pow(10.0, d(rng) / 20.0);
  }
};

inline constexpr double kNoiseless = std::numeric_limits<double>::infinity();

/// H_t * x + n with n complex AWGN at `snr_db` relative to the power of x.
/// snr_db = +infinity disables the noise.
inline IQFrame apply_channel(const IQFrame& x, const ChannelModel& channel, double snr_db,
                             std::uint64_t seed) {
  const double px = x.power();
  if (!(px > 0.0)) throw ValueError("apply_channel: non-positive signal power");
  std::mt19937_64 rng(seed);
  const double gain = channel.sample_gain(rng);
  if (!(gain > 0.0)) throw ValueError("apply_channel: fading gain must be positive");
  IQFrame y = x;
  for (std::size_t n = 0; n < y.length(); ++n) {
    y.i[n] *= gain;
    y.q[n] *= gain;
  }
  if (std::isinf(snr_db) && snr_db > 0) return y;
  const double pn = px / std::pow(10.0, snr_db / 10.0);
  std::normal_distribution<double> noise(0.0, std::sqrt(pn / 2.0));
  for (std::size_t n = 0; n < y.length(); ++n) {
    y.i[n] += noise(rng);
    y.q[n] += noise(rng);
  }
  return y;
}

/// Frames stored as float32, matching the file format, so that a dataset
/// survives a write/read cycle bit-exactly.
struct LabeledDataset {
  std::size_t frame_len = 0;
  std::vector<std::string> class_names;
  std::vector<float> samples;  // per frame: frame_len I values, then frame_len Q values
  std::vector<std::uint32_t> labels;
  std::vector<std::int32_t> snr_db;
  std::uint64_t seed = 0;  // generator seed; not persisted

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
  std::size_t num_classes() const { return class_names.size(); }
  std::size_t frame_stride() const { return 2 * frame_len; }

  std::span<const float> frame_data(std::size_t k) const {
    return std::span<const float>(samples).subspan(k * frame_stride(), frame_stride());
  }

  IQFrame frame(std::size_t k) const {
    auto d = frame_data(k);
    IQFrame f;
    f.i.assign(d.begin(), d.begin() + frame_len);
    f.q.assign(d.begin() + frame_len, d.end());
    return f;
  }

  void push_back(const IQFrame& f, std::uint32_t label, std::int32_t snr) {
    if (f.length() != frame_len) throw ShapeError("dataset: frame length mismatch");
    for (double v : f.i) samples.push_back(static_cast<float>(v));
    for (double v : f.q) samples.push_back(static_cast<float>(v));
    labels.push_back(label);
    snr_db.push_back(snr);
  }

  void push_back(std::span<const double> frame, std::uint32_t label, std::int32_t snr) {
    if (frame.size() != frame_stride()) throw ShapeError("dataset: frame length mismatch");
    for (double v : frame) samples.push_back(static_cast<float>(v));
    labels.push_back(label);
    snr_db.push_back(snr);
  }

  /// Throws unless the containers agree and every label is in range.
  void validate() const {
    if (samples.size() != labels.size() * frame_stride() || snr_db.size() != labels.size()) {
      throw ShapeError("dataset: inconsistent container lengths");
    }
    for (auto l : labels) {
      if (l >= num_classes()) throw ValueError("dataset: label out of range");
    }
  }

  friend bool operator==(const LabeledDataset& a, const LabeledDataset& b) {
    return a.frame_len == b.frame_len && a.class_names == b.class_names &&
           a.labels == b.labels && a.snr_db == b.snr_db &&
           std::equal(a.samples.begin(), a.samples.end(), b.samples.begin(), b.samples.end(),
                      [](float x, float y) {
                        return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y);
                      });
  }
};

inline LabeledDataset empty_like(const LabeledDataset& ds) {
  LabeledDataset out;
  out.frame_len = ds.frame_len;
  out.class_names = ds.class_names;
  out.seed = ds.seed;
  return out;
}

inline LabeledDataset subset(const LabeledDataset& ds, std::span<const std::size_t> idx) {
  LabeledDataset out = empty_like(ds);
  out.samples.reserve(idx.size() * ds.frame_stride());
  for (auto k : idx) {
    if (k >= ds.size()) throw ValueError("subset: index out of range");
    auto d = ds.frame_data(k);
    out.samples.insert(out.samples.end(), d.begin(), d.end());
    out.labels.push_back(ds.labels[k]);
    out.snr_db.push_back(ds.snr_db[k]);
  }
  return out;
}

/// Frames as a [n, 2, frame_len] tensor.
inline Tensor to_tensor(const LabeledDataset& ds) {
  Tensor t(Shape{ds.size(), 2, ds.frame_len});
  std::copy(ds.samples.begin(), ds.samples.end(), t.data().begin());
  return t;
}

inline std::vector<std::size_t> labels_of(const LabeledDataset& ds) {
  return std::vector<std::size_t>(ds.labels.begin(), ds.labels.end());
}

/// Mean per-frame power over the dataset.
inline double mean_power(const LabeledDataset& ds) {
  if (ds.empty()) return 0.0;
  double total = 0.0;
  for (float v : ds.samples) total += static_cast<double>(v) * v;
  return total / static_cast<double>(ds.size() * ds.frame_len);
}

/// Per-class frame indices in dataset order.
inline std::vector<std::vector<std::size_t>> indices_by_class(const LabeledDataset& ds) {
  std::vector<std::vector<std::size_t>> by(ds.num_classes());
  for (std::size_t k = 0; k < ds.size(); ++k) by.at(ds.labels[k]).push_back(k);
  return by;
}

struct GeneratorConfig {
  std::vector<Modulation> schemes{std::begin(kAllModulations), std::end(kAllModulations)};
  std::vector<int> snr_db{0, 4, 8, 12, 16};
  std::size_t frames_per_class_per_snr = 50;
  std::size_t frame_len = 128;
  std::size_t samples_per_symbol = 4;
  double mod_index = 0.5;
  double gfsk_bt = 0.35;
  ChannelModel channel;
  std::uint64_t seed = 1;
};

/// Balanced dataset ordered by class, then SNR, then frame. Frame k draws
/// its symbols and noise from seed mix(cfg.seed, k), so the result does not
/// depend on generation order.
inline LabeledDataset generate_dataset(const GeneratorConfig& cfg) {
  if (cfg.schemes.empty()) throw ConfigError("generate_dataset: empty scheme list");
  if (cfg.snr_db.empty()) throw ConfigError("generate_dataset: empty SNR grid");
  for (int s : cfg.snr_db) {
    if (s < -60 || s > 100) throw ConfigError("generate_dataset: SNR out of range");
  }
  if (cfg.frames_per_class_per_snr == 0) {
    throw ConfigError("generate_dataset: frames_per_class_per_snr must be >= 1");
  }
  if (cfg.frame_len == 0 || cfg.samples_per_symbol == 0) {
    throw ConfigError("generate_dataset: frame_len and samples_per_symbol must be positive");
  }
  LabeledDataset ds;
  ds.frame_len = cfg.frame_len;
  ds.seed = cfg.seed;
  for (auto m : cfg.schemes) ds.class_names.push_back(modulation_name(m));
  const std::size_t n_symbols =
      (cfg.frame_len + cfg.samples_per_symbol - 1) / cfg.samples_per_symbol;
  std::uint64_t k = 0;
  std::vector<std::uint32_t> symbols(n_symbols);
  for (std::uint32_t c = 0; c < cfg.schemes.size(); ++c) {
    ModulationScheme scheme{cfg.schemes[c], cfg.samples_per_symbol, cfg.mod_index, cfg.gfsk_bt};
    std::uniform_int_distribution<std::uint32_t> sym(
        0, static_cast<std::uint32_t>(alphabet_size(scheme.kind) - 1));
    for (int snr : cfg.snr_db) {
      for (std::size_t f = 0; f < cfg.frames_per_class_per_snr; ++f, ++k) {
        const std::uint64_t fs = io::mix_seed(cfg.seed, k);
        std::mt19937_64 rng(fs);
        for (auto& s : symbols) s = sym(rng);
        IQFrame x = modulate(symbols, scheme, cfg.frame_len);
        ds.push_back(apply_channel(x, cfg.channel, snr, io::mix_seed(fs, 1)), c, snr);
      }
    }
  }
  return ds;
}

// AMCD file:
//   "AMCD" | version u32 | frame_len u32 | C u32 | n_frames u64 |
//   C x (u32 length, UTF-8 bytes) |
//   per frame: frame_len x f32 (I), frame_len x f32 (Q), label u32, snr_db i32 |
//   CRC32 of all preceding bytes
inline constexpr std::uint32_t kDatasetVersion = 1;

inline io::Bytes encode_dataset(const LabeledDataset& ds) {
  ds.validate();
  io::Writer w;
  w.magic("AMCD");
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(ds.frame_len));
  w.u32(static_cast<std::uint32_t>(ds.num_classes()));
  w.u64(ds.size());
  for (const auto& name : ds.class_names) w.str(name);
  for (std::size_t k = 0; k < ds.size(); ++k) {
    for (float v : ds.frame_data(k)) w.f32(v);
    w.u32(ds.labels[k]);
    w.i32(ds.snr_db[k]);
  }
  return w.finish();
}

inline LabeledDataset decode_dataset(const io::Bytes& bytes) {
  io::Reader r(bytes, "AMCD", "dataset");
  const auto version = r.u32();
  if (version != kDatasetVersion) {
    throw FormatError("dataset: version mismatch (" + std::to_string(version) + ")");
  }
  LabeledDataset ds;
  ds.frame_len = r.u32();
  const auto classes = r.u32();
  const auto n = r.u64();
  for (std::uint32_t c = 0; c < classes; ++c) ds.class_names.push_back(r.str());
  const std::uint64_t per_frame = ds.frame_stride() * 4 + 8;
  if (per_frame != 0 && n > std::numeric_limits<std::uint64_t>::max() / per_frame) {
    throw FormatError("dataset: truncated file");
  }
  r.ensure(n * per_frame);
  ds.samples.reserve(n * ds.frame_stride());
  ds.labels.reserve(n);
  ds.snr_db.reserve(n);
  for (std::uint64_t k = 0; k < n; ++k) {
    for (std::size_t j = 0; j < ds.frame_stride(); ++j) ds.samples.push_back(r.f32());
    ds.labels.push_back(r.u32());
    ds.snr_db.push_back(r.i32());
  }
  r.finish();
  ds.validate();
  return ds;
}

inline void write_dataset(const LabeledDataset& ds, const std::filesystem::path& path) {
  io::write_file(path, encode_dataset(ds));
}

inline LabeledDataset read_dataset(const std::filesystem::path& path) {
  return decode_dataset(io::read_file(path));
}

/// SHA-256 of the encoded dataset.
inline std::string dataset_hash(const LabeledDataset& ds) {
  return io::sha256_hex(encode_dataset(ds));
}

}  // namespace amc::signals
