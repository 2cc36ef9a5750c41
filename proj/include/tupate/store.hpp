#pragma once

// Persistence: the TPTE tensor container, key=value manifests, score/gain
// CSV files, text reports, suite directories and checkpoints.

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include <unistd.h>

#include "tupate/lab.hpp"

namespace tupate {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Container

enum class FormatErrc {
  BadMagic = 1,
  UnknownVersion,
  Truncated,
  DuplicateName,
  BadDtype,
  TrailingBytes,
  BadName,
};

inline const char* to_string(FormatErrc c) {
  switch (c) {
    case FormatErrc::BadMagic: return "bad magic";
    case FormatErrc::UnknownVersion: return "unknown version";
    case FormatErrc::Truncated: return "truncated payload";
    case FormatErrc::DuplicateName: return "duplicate tensor name";
    case FormatErrc::BadDtype: return "unknown dtype";
    case FormatErrc::TrailingBytes: return "trailing bytes";
    case FormatErrc::BadName: return "bad tensor name";
  }
  return "format error";
}

class FormatError : public Error {
 public:
  FormatError(FormatErrc code, const std::string& detail)
      : Error(std::string("container: ") + to_string(code) + (detail.empty() ? "" : " (" + detail + ")")),
        code_(code) {}
  FormatErrc code() const { return code_; }

 private:
  FormatErrc code_;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline constexpr std::array<char, 4> kContainerMagic = {'T', 'P', 'T', 'E'};
inline constexpr std::uint32_t kContainerVersion = 1;

namespace detail {

inline void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }
inline void put_u16(std::string& out, std::uint16_t v) {
  for (int i = 0; i < 2; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::string_view b) : b_(b) {}

  std::uint64_t get(std::size_t n, const char* what) {
    if (b_.size() - pos_ < n) {
      throw FormatError(FormatErrc::Truncated, std::string("reading ") + what + " at byte " + std::to_string(pos_));
    }
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += n;
    return v;
  }
  std::string_view bytes(std::size_t n, const char* what) {
    if (b_.size() - pos_ < n) {
      throw FormatError(FormatErrc::Truncated, std::string("reading ") + what + " at byte " + std::to_string(pos_));
    }
    auto s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  std::string_view b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Serializes tensors in the given order. Names must be unique and non-empty.
inline std::string encode_container(const NamedTensors& tensors) {
  std::set<std::string> seen;
  std::string out(kContainerMagic.begin(), kContainerMagic.end());
  detail::put_u32(out, kContainerVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.empty() || name.size() > 0xffff) throw FormatError(FormatErrc::BadName, "length " + std::to_string(name.size()));
    if (!seen.insert(name).second) throw FormatError(FormatErrc::DuplicateName, name);
    if (t.rank() > 0xff) throw Error("container: rank too large for " + name);
    detail::put_u16(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    detail::put_u8(out, 0);
    detail::put_u8(out, static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.dims()) {
      if (d > 0xffffffffu) throw Error("container: dimension too large for " + name);
      detail::put_u32(out, static_cast<std::uint32_t>(d));
    }
    for (float v : t.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

inline NamedTensors decode_container(std::string_view bytes) {
  detail::Reader r(bytes);
  if (bytes.size() < kContainerMagic.size() ||
      !std::equal(kContainerMagic.begin(), kContainerMagic.end(), bytes.begin())) {
    throw FormatError(FormatErrc::BadMagic, "");
  }
  r.bytes(4, "magic");
  const auto version = r.get(4, "version");
  if (version != kContainerVersion) throw FormatError(FormatErrc::UnknownVersion, "version " + std::to_string(version));
  const auto count = r.get(4, "tensor count");
  NamedTensors out;
  std::set<std::string> seen;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = r.get(2, "name length");
    std::string name(r.bytes(len, "name"));
    if (name.empty()) throw FormatError(FormatErrc::BadName, "empty name");
    if (!seen.insert(name).second) throw FormatError(FormatErrc::DuplicateName, name);
    const auto dtype = r.get(1, "dtype");
    if (dtype != 0) throw FormatError(FormatErrc::BadDtype, "dtype " + std::to_string(dtype));
    const auto rank = r.get(1, "rank");
    std::vector<std::size_t> dims;
    std::uint64_t n = 1;
    for (std::uint64_t k = 0; k < rank; ++k) {
      const auto d = r.get(4, "dims");
      if (d == 0) throw FormatError(FormatErrc::Truncated, "zero dimension in " + name);
      dims.push_back(static_cast<std::size_t>(d));
      n *= d;
      if (n > r.remaining()) throw FormatError(FormatErrc::Truncated, "payload of " + name);
    }
    if (rank == 0) throw FormatError(FormatErrc::BadName, "rank 0 tensor " + name);
    std::vector<float> data(n);
    for (auto& v : data) v = std::bit_cast<float>(static_cast<std::uint32_t>(r.get(4, "payload")));
    out.emplace_back(std::move(name), Tensor(std::move(dims), std::move(data)));
  }
  if (r.remaining() != 0) throw FormatError(FormatErrc::TrailingBytes, std::to_string(r.remaining()) + " bytes");
  return out;
}

inline const Tensor& find_tensor(const NamedTensors& ts, const std::string& name) {
  for (const auto& [n, t] : ts)
    if (n == name) return t;
  throw Error("container has no tensor '" + name + "'");
}

// ---------------------------------------------------------------------------
// Files

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw Error("cannot read " + path.string());
  return ss.str();
}

/// Writes to a temporary sibling, then renames over `path`.
inline void write_file_atomic(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      fs::remove(tmp, ec);
      throw Error("cannot write " + tmp.string());
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw Error("cannot rename into " + path.string());
  }
}

inline void write_container(const fs::path& path, const NamedTensors& tensors) {
  write_file_atomic(path, encode_container(tensors));
}

inline NamedTensors read_container(const fs::path& path) {
  try {
    return decode_container(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(e.code(), path.string());
  }
}

// ---------------------------------------------------------------------------
// Text values

/// Shortest round-trip decimal; integral values keep a ".0".
inline std::string format_double(double v) {
  std::array<char, 64> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  std::string s(buf.data(), res.ptr);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

inline double parse_double(const std::string& s, const std::string& what) {
  double v = 0.0;
  const char* b = s.data();
  const char* e = s.data() + s.size();
  const auto res = std::from_chars(b, e, v);
  if (res.ec != std::errc() || res.ptr != e || s.empty()) throw Error("bad number for " + what + ": '" + s + "'");
  return v;
}

inline std::uint64_t parse_u64(const std::string& s, const std::string& what) {
  std::uint64_t v = 0;
  const char* e = s.data() + s.size();
  const auto res = std::from_chars(s.data(), e, v);
  if (res.ec != std::errc() || res.ptr != e || s.empty()) throw Error("bad integer for " + what + ": '" + s + "'");
  return v;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

inline std::string join(const std::vector<std::string>& parts, char sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out.push_back(sep);
    out += parts[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifest

/// key=value lines, keys sorted. The "created" key is informational only.
struct Manifest {
  std::map<std::string, std::string> fields;

  bool has(const std::string& k) const { return fields.count(k) != 0; }
  const std::string& get(const std::string& k) const {
    const auto it = fields.find(k);
    if (it == fields.end()) throw Error("manifest: missing key '" + k + "'");
    return it->second;
  }
  std::string get_or(const std::string& k, const std::string& def) const { return has(k) ? get(k) : def; }
  double get_double(const std::string& k) const { return parse_double(get(k), k); }
  std::uint64_t get_u64(const std::string& k) const { return parse_u64(get(k), k); }

  void set(const std::string& k, std::string v) {
    if (k.empty() || k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw Error("manifest: bad key or value for '" + k + "'");
    }
    fields[k] = std::move(v);
  }
  void set(const std::string& k, double v) { set(k, format_double(v)); }
  void set(const std::string& k, std::uint64_t v) { set(k, std::to_string(v)); }
  void set(const std::string& k, const char* v) { set(k, std::string(v)); }

  /// Sets "created" from SOURCE_DATE_EPOCH when present, else the clock.
  void stamp() {
    std::time_t t = std::time(nullptr);
    if (const char* env = std::getenv("SOURCE_DATE_EPOCH")) t = static_cast<std::time_t>(std::atoll(env));
    std::array<char, 32> buf{};
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::strftime(buf.data(), buf.size(), "%Y-%m-%dT%H:%M:%SZ", &tm);
    set("created", std::string(buf.data()));
  }

  std::string str() const {
    std::string out;
    for (const auto& [k, v] : fields) out += k + "=" + v + "\n";
    return out;
  }

  static Manifest parse(const std::string& text, const std::string& where = "manifest") {
    Manifest m;
    std::istringstream in(text);
    std::string line;
    std::size_t no = 0;
    while (std::getline(in, line)) {
      ++no;
      if (line.empty() || line[0] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos || eq == 0) throw Error(where + ": line " + std::to_string(no) + " is not key=value");
      m.fields[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return m;
  }
};

inline void write_manifest(const fs::path& path, const Manifest& m) { write_file_atomic(path, m.str()); }
inline Manifest read_manifest(const fs::path& path) { return Manifest::parse(read_file(path), path.string()); }

inline std::string hex64(std::uint64_t v) {
  std::array<char, 17> buf{};
  std::snprintf(buf.data(), buf.size(), "%016llx", static_cast<unsigned long long>(v));
  return buf.data();
}

inline ModelConfig parse_model_config(const std::string& canonical) {
  ModelConfig c;
  std::map<std::string, std::size_t*> slots = {
      {"vocab", &c.vocab_size}, {"seq", &c.max_seq_len}, {"d_h", &c.d_h},       {"heads", &c.n_heads},
      {"layers", &c.n_layers},  {"ffn", &c.d_ffn},       {"classes", &c.n_classes}};
  std::set<std::string> got;
  for (const auto& part : split(canonical, ';')) {
    const auto eq = part.find('=');
    if (eq == std::string::npos) throw Error("model config: bad field '" + part + "'");
    const auto key = part.substr(0, eq);
    const auto it = slots.find(key);
    if (it == slots.end()) throw Error("model config: unknown field '" + key + "'");
    *it->second = static_cast<std::size_t>(parse_u64(part.substr(eq + 1), key));
    got.insert(key);
  }
  if (got.size() != slots.size()) throw Error("model config: missing fields in '" + canonical + "'");
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Score / gain CSV

inline std::string matrix_csv(const ScoreMatrix& m) {
  m.validate();
  std::string out = "source";
  for (const auto& t : m.targets) out += "," + t;
  out += "\n";
  for (std::size_t s = 0; s < m.sources.size(); ++s) {
    out += m.sources[s];
    for (std::size_t t = 0; t < m.targets.size(); ++t) out += "," + format_double(m.at(s, t));
    out += "\n";
  }
  return out;
}

inline ScoreMatrix parse_matrix_csv(const std::string& text, const std::string& where = "csv") {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw Error(where + ": empty file");
  auto header = split(line, ',');
  if (header.size() < 2) throw Error(where + ": header needs at least one target");
  std::vector<std::string> targets(header.begin() + 1, header.end());
  std::vector<std::string> sources;
  std::vector<double> values;
  std::size_t no = 1;
  while (std::getline(in, line)) {
    ++no;
    if (line.empty()) continue;
    auto cells = split(line, ',');
    if (cells.size() != header.size()) {
      throw Error(where + ": line " + std::to_string(no) + " has " + std::to_string(cells.size()) + " cells, expected " +
                  std::to_string(header.size()));
    }
    sources.push_back(cells[0]);
    for (std::size_t i = 1; i < cells.size(); ++i) values.push_back(parse_double(cells[i], where + " line " + std::to_string(no)));
  }
  ScoreMatrix m;
  m.sources = std::move(sources);
  m.targets = std::move(targets);
  m.values = std::move(values);
  m.validate();
  return m;
}

inline void write_matrix(const fs::path& path, const ScoreMatrix& m) { write_file_atomic(path, matrix_csv(m)); }
inline ScoreMatrix read_matrix(const fs::path& path) { return parse_matrix_csv(read_file(path), path.string()); }

/// Gain CSV plus a sidecar manifest carrying the regime tag.
inline void write_gains(const fs::path& path, const GainMatrix& g) {
  write_matrix(path, g);
  Manifest m;
  m.set("kind", "gains");
  m.set("regime", g.regime);
  write_manifest(path.string() + ".manifest", m);
}

inline GainMatrix read_gains(const fs::path& path) {
  GainMatrix g(read_matrix(path));
  const fs::path side = path.string() + ".manifest";
  if (fs::exists(side)) g.regime = read_manifest(side).get_or("regime", "");
  return g;
}

// ---------------------------------------------------------------------------
// Reports

inline std::string report_text(const RankingReport& r) {
  std::ostringstream o;
  o << "predictor=" << r.predictor << "\n";
  o << "regime=" << r.regime << "\n";
  o << "grouping=" << r.grouping << "\n";
  o << "targets=" << r.targets.size() << "\n";
  o << "rho=" << format_double(r.rho) << "\n";
  o << "ndcg=" << format_double(r.ndcg) << "\n";
  for (const auto& t : r.targets) {
    o << "\n[target " << t.target << "]\n";
    if (!t.best_source.empty()) {
      o << "best_source=" << t.best_source << "\n";
      o << "best_rank=" << t.best_rank << "\n";
      o << "ndcg=" << format_double(t.ndcg) << "\n";
    }
    std::vector<std::string> parts;
    for (const auto& s : t.ranking) parts.push_back(s.id + ":" + format_double(s.score));
    o << "ranking=" << join(parts, ',') << "\n";
  }
  return o.str();
}

inline std::string report_text(const CorrelationReport& r) {
  std::ostringstream o;
  o << "study=correlate\n";
  o << "method=" << to_string(r.method) << "\n";
  o << "runs=" << r.runs.size() << "\n";
  o << "pearson_ndcg_accuracy=" << format_double(r.pearson_ndcg_accuracy) << "\n";
  o << "delta_rho=" << format_double(r.delta_rho) << "\n";
  o << "delta_ndcg=" << format_double(r.delta_ndcg) << "\n";
  for (std::size_t i = 0; i < r.runs.size(); ++i) {
    const auto& run = r.runs[i];
    o << "\n[run " << i << "]\n";
    o << "lr=" << format_double(run.lr) << "\n";
    o << "seed=" << run.seed << "\n";
    o << "mean_accuracy=" << format_double(run.mean_accuracy) << "\n";
    o << "rho=" << format_double(run.rho) << "\n";
    o << "ndcg=" << format_double(run.ndcg) << "\n";
  }
  return o.str();
}

inline std::string report_text(const EarlyVsBest& r) {
  std::ostringstream o;
  o << "study=early-vs-best\n";
  o << "method=" << to_string(r.method) << "\n";
  o << "grouping=" << r.best.grouping << "\n";
  o << "early_rho=" << format_double(r.early.rho) << "\n";
  o << "early_ndcg=" << format_double(r.early.ndcg) << "\n";
  o << "best_rho=" << format_double(r.best.rho) << "\n";
  o << "best_ndcg=" << format_double(r.best.ndcg) << "\n";
  o << "delta_ndcg=" << format_double(r.early.ndcg - r.best.ndcg) << "\n";
  return o.str();
}

// ---------------------------------------------------------------------------
// Suite directories

inline Manifest suite_manifest(const Suite& s) {
  const auto& c = s.config;
  Manifest m;
  m.set("kind", "suite");
  m.set("clusters", std::uint64_t{c.n_clusters});
  m.set("tasks_per_cluster", std::uint64_t{c.tasks_per_cluster});
  m.set("cluster_spread", c.cluster_spread);
  m.set("centroid_scale", c.centroid_scale);
  m.set("d_task", std::uint64_t{c.d_task});
  m.set("vocab", std::uint64_t{c.vocab_size});
  m.set("seq_len", std::uint64_t{c.seq_len});
  m.set("classes", std::uint64_t{c.n_classes});
  m.set("signal", c.signal);
  m.set("n_train", std::uint64_t{c.n_train});
  m.set("n_val", std::uint64_t{c.n_val});
  m.set("n_test", std::uint64_t{c.n_test});
  m.set("seed", std::uint64_t{c.seed});
  m.set("tasks", join(s.ids(), ','));
  return m;
}

inline SuiteConfig suite_config_from(const Manifest& m) {
  SuiteConfig c;
  c.n_clusters = m.get_u64("clusters");
  c.tasks_per_cluster = m.get_u64("tasks_per_cluster");
  c.cluster_spread = m.get_double("cluster_spread");
  c.centroid_scale = m.get_double("centroid_scale");
  c.d_task = m.get_u64("d_task");
  c.vocab_size = m.get_u64("vocab");
  c.seq_len = m.get_u64("seq_len");
  c.n_classes = m.get_u64("classes");
  c.signal = m.get_double("signal");
  c.n_train = m.get_u64("n_train");
  c.n_val = m.get_u64("n_val");
  c.n_test = m.get_u64("n_test");
  c.seed = m.get_u64("seed");
  return c;
}

namespace detail {

inline void write_examples(std::ostringstream& o, const char* split_name, const std::vector<Example>& xs) {
  o << "[" << split_name << "]\n";
  for (const auto& e : xs) {
    o << e.label;
    for (int t : e.tokens) o << ' ' << t;
    o << '\n';
  }
}

}  // namespace detail

inline std::string task_file_text(const Task& t) {
  std::ostringstream o;
  o << "id=" << t.spec.id << "\n";
  o << "cluster=" << t.spec.cluster << "\n";
  o << "family=" << t.spec.family << "\n";
  std::vector<std::string> th;
  for (float v : t.spec.theta.data()) th.push_back(format_double(static_cast<double>(v)));
  o << "theta=" << join(th, ',') << "\n";
  detail::write_examples(o, "train", t.data.train);
  detail::write_examples(o, "validation", t.data.validation);
  detail::write_examples(o, "test", t.data.test);
  return o.str();
}

inline Task parse_task_file(const std::string& text, const Suite& suite, const std::string& where) {
  Task t;
  std::istringstream in(text);
  std::string line;
  std::vector<Example>* cur = nullptr;
  Manifest head;
  std::size_t no = 0;
  while (std::getline(in, line)) {
    ++no;
    if (line.empty()) continue;
    if (line == "[train]") { cur = &t.data.train; continue; }
    if (line == "[validation]") { cur = &t.data.validation; continue; }
    if (line == "[test]") { cur = &t.data.test; continue; }
    if (!cur) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw Error(where + ": line " + std::to_string(no) + " is not key=value");
      head.fields[line.substr(0, eq)] = line.substr(eq + 1);
      continue;
    }
    std::istringstream ls(line);
    Example e;
    if (!(ls >> e.label)) throw Error(where + ": line " + std::to_string(no) + " has no label");
    int tok = 0;
    while (ls >> tok) {
      if (tok < 0 || static_cast<std::size_t>(tok) >= suite.config.vocab_size) {
        throw Error(where + ": line " + std::to_string(no) + " token out of range");
      }
      e.tokens.push_back(tok);
    }
    if (!ls.eof()) throw Error(where + ": line " + std::to_string(no) + " is not numeric");
    if (e.label < 0 || static_cast<std::size_t>(e.label) >= suite.config.n_classes) {
      throw Error(where + ": line " + std::to_string(no) + " label out of range");
    }
    cur->push_back(std::move(e));
  }
  t.spec.id = head.get("id");
  t.spec.cluster = head.get_u64("cluster");
  t.spec.family = head.get("family");
  std::vector<float> th;
  for (const auto& v : split(head.get("theta"), ',')) th.push_back(static_cast<float>(parse_double(v, "theta")));
  if (th.size() != suite.config.d_task) throw Error(where + ": theta has wrong length");
  const std::size_t d = th.size();
  t.spec.theta = Tensor({d}, std::move(th));
  t.spec.class_token_probs = class_token_probs(suite.token_features, t.spec.theta, suite.config.n_classes, suite.config.signal);
  return t;
}

inline void save_suite(const fs::path& dir, const Suite& s) {
  fs::create_directories(dir / "tasks");
  write_container(dir / "features.tpte", {{"token_features", s.token_features}});
  for (const auto& t : s.tasks) write_file_atomic(dir / "tasks" / (t.spec.id + ".txt"), task_file_text(t));
  write_manifest(dir / "manifest.txt", suite_manifest(s));
}

inline Suite load_suite(const fs::path& dir) {
  const auto m = read_manifest(dir / "manifest.txt");
  if (m.get_or("kind", "") != "suite") throw Error(dir.string() + ": not a suite directory");
  Suite s;
  s.config = suite_config_from(m);
  s.token_features = find_tensor(read_container(dir / "features.tpte"), "token_features");
  if (s.token_features.dims() != std::vector<std::size_t>{s.config.vocab_size, s.config.d_task}) {
    throw Error(dir.string() + ": token features shape " + dims_to_string(s.token_features.dims()) +
                " does not match the manifest");
  }
  for (const auto& id : split(m.get("tasks"), ',')) {
    const auto path = dir / "tasks" / (id + ".txt");
    auto t = parse_task_file(read_file(path), s, path.string());
    if (t.spec.id != id) throw Error(path.string() + ": id mismatch");
    s.tasks.push_back(std::move(t));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Models and checkpoints

inline NamedTensors model_tensors(const ModelParams& p) {
  NamedTensors out;
  for_each_model_tensor(p, [&](const std::string& n, const Tensor& t) { out.emplace_back(n, t); });
  return out;
}

inline void fill_model(ModelParams& p, const NamedTensors& ts, const std::string& where) {
  std::size_t used = 0;
  for_each_model_tensor(p, [&](const std::string& n, Tensor& t) {
    const Tensor& src = find_tensor(ts, n);
    if (src.dims() != t.dims()) {
      throw Error(where + ": tensor " + n + " has shape " + dims_to_string(src.dims()) + ", expected " +
                  dims_to_string(t.dims()));
    }
    t = src;
    ++used;
  });
  if (used != ts.size()) throw Error(where + ": unexpected extra tensors");
}

inline Manifest model_manifest(const ModelConfig& c, std::uint64_t seed) {
  Manifest m;
  m.set("kind", "base-model");
  m.set("model_config", c.canonical());
  m.set("config_hash", hex64(c.hash()));
  m.set("seed", seed);
  m.set("container", "tensors.tpte");
  return m;
}

inline void save_model(const fs::path& dir, const ModelParams& p, std::uint64_t seed) {
  write_container(dir / "tensors.tpte", model_tensors(p));
  auto m = model_manifest(p.config, seed);
  m.stamp();
  write_manifest(dir / "manifest.txt", m);
}

inline ModelConfig checked_config(const Manifest& m, const std::string& where) {
  const auto cfg = parse_model_config(m.get("model_config"));
  if (m.get("config_hash") != hex64(cfg.hash())) throw Error(where + ": config hash does not match model_config");
  return cfg;
}

inline ModelParams load_model(const fs::path& dir) {
  const auto m = read_manifest(dir / "manifest.txt");
  const auto cfg = checked_config(m, dir.string());
  Rng rng(0);
  ModelParams p = zeros_like(init_model<float>(cfg, rng));
  fill_model(p, read_container(dir / m.get("container")), dir.string());
  return p;
}

inline NamedTensors checkpoint_tensors(const Checkpoint& c) {
  if (c.model) return model_tensors(*c.model);
  if (!c.adapter) throw Error("checkpoint has neither adapter nor model");
  NamedTensors out;
  for_each_adapter_tensor(*c.adapter, [&](const std::string& n, const Tensor& t) { out.emplace_back(n, t); });
  out.emplace_back("head.w", c.head_w);
  out.emplace_back("head.b", c.head_b);
  return out;
}

inline Manifest checkpoint_manifest(const Checkpoint& c, const ModelConfig& cfg, const AdapterOptions& opt) {
  Manifest m;
  m.set("kind", "checkpoint");
  m.set("method", to_string(c.method));
  m.set("task", c.task_id);
  m.set("epoch", std::uint64_t{c.epoch});
  m.set("val_accuracy", c.val_accuracy);
  m.set("seed", std::uint64_t{c.seed});
  m.set("lr", c.lr);
  m.set("model_config", cfg.canonical());
  m.set("config_hash", hex64(cfg.hash()));
  m.set("container", "tensors.tpte");
  if (c.adapter) {
    if (c.method == Method::Prefix) m.set("prefix_length", std::uint64_t{opt.prefix_length});
    if (c.method == Method::Lora) {
      m.set("lora_rank", std::uint64_t{opt.lora_rank});
      m.set("lora_alpha", opt.lora_alpha);
    }
  }
  return m;
}

inline void save_checkpoint(const fs::path& dir, const Checkpoint& c, const ModelConfig& cfg, const AdapterOptions& opt) {
  write_container(dir / "tensors.tpte", checkpoint_tensors(c));
  auto m = checkpoint_manifest(c, cfg, opt);
  m.stamp();
  write_manifest(dir / "manifest.txt", m);
}

/// Loads a checkpoint written by save_checkpoint. `expected`, when given, must
/// match the stored model config.
inline Checkpoint load_checkpoint(const fs::path& dir, const ModelConfig* expected = nullptr) {
  const auto m = read_manifest(dir / "manifest.txt");
  if (m.get_or("kind", "") != "checkpoint") throw Error(dir.string() + ": not a checkpoint directory");
  const auto cfg = checked_config(m, dir.string());
  if (expected && !(cfg == *expected)) {
    throw Error(dir.string() + ": model config " + cfg.canonical() + " differs from " + expected->canonical());
  }
  Checkpoint c;
  c.method = parse_method(m.get("method"));
  c.task_id = m.get("task");
  c.epoch = m.get_u64("epoch");
  c.val_accuracy = m.get_double("val_accuracy");
  c.seed = m.get_u64("seed");
  c.lr = m.get_double("lr");
  if (c.val_accuracy < 0.0 || c.val_accuracy > 1.0) throw Error(dir.string() + ": validation accuracy outside [0, 1]");
  const auto ts = read_container(dir / m.get("container"));
  Rng rng(0);
  if (c.method == Method::Full) {
    ModelParams p = zeros_like(init_model<float>(cfg, rng));
    fill_model(p, ts, dir.string());
    c.model = std::move(p);
    return c;
  }
  AdapterOptions opt;
  if (c.method == Method::Prefix) opt.prefix_length = m.get_u64("prefix_length");
  if (c.method == Method::Lora) {
    opt.lora_rank = m.get_u64("lora_rank");
    opt.lora_alpha = m.get_double("lora_alpha");
  }
  AdapterParams ad = zeros_like(init_adapter<float>(c.method, cfg, opt, rng));
  std::size_t used = 0;
  for_each_adapter_tensor(ad, [&](const std::string& n, Tensor& t) {
    const Tensor& src = find_tensor(ts, n);
    if (src.dims() != t.dims()) {
      throw Error(dir.string() + ": tensor " + n + " has shape " + dims_to_string(src.dims()) + ", expected " +
                  dims_to_string(t.dims()));
    }
    t = src;
    ++used;
  });
  c.head_w = find_tensor(ts, "head.w");
  c.head_b = find_tensor(ts, "head.b");
  if (used + 2 != ts.size()) throw Error(dir.string() + ": unexpected extra tensors");
  c.adapter = std::move(ad);
  return c;
}

// ---------------------------------------------------------------------------
// Embedding sets

struct EmbeddingSet {
  std::string method;  // "tupate-prefix", "textemb", "taskemb", "datasize"
  std::map<std::string, Tensor> vectors;
};

inline void save_embeddings(const fs::path& path, const EmbeddingSet& e) {
  NamedTensors ts(e.vectors.begin(), e.vectors.end());
  write_container(path, ts);
  Manifest m;
  m.set("kind", "embeddings");
  m.set("method", e.method);
  m.set("count", std::uint64_t{e.vectors.size()});
  m.stamp();
  write_manifest(path.string() + ".manifest", m);
}

inline EmbeddingSet load_embeddings(const fs::path& path) {
  const auto m = read_manifest(path.string() + ".manifest");
  if (m.get_or("kind", "") != "embeddings") throw Error(path.string() + ".manifest: not an embeddings manifest");
  EmbeddingSet e;
  e.method = m.get("method");
  for (auto& [n, t] : read_container(path)) e.vectors.emplace(n, std::move(t));
  return e;
}

/// Scores for an embedding set: cosine similarity, or the raw source value
/// for the size baseline.
inline ScoreMatrix scores_for(const EmbeddingSet& e) {
  if (e.method != "datasize") return similarity_scores(e.vectors);
  std::map<std::string, double> sizes;
  for (const auto& [id, t] : e.vectors) sizes[id] = static_cast<double>(t[0]);
  return datasize_scores(sizes);
}

}  // namespace tupate

namespace tupate {

// ---------------------------------------------------------------------------
// Training runs: base model, per-task early/best checkpoints, run manifest

inline ModelParams make_base(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng = Rng(seed).derive("base-model");
  return init_model<float>(cfg, rng);
}

struct RunInfo {
  TrainConfig train;
  Regime regime = Regime::Full;
  std::size_t limited_size = kDefaultLimitedSize;
  ModelConfig model;
  std::uint64_t model_seed = 0;
  std::vector<std::string> tasks;
};

inline Manifest run_manifest(const RunInfo& r) {
  Manifest m;
  m.set("kind", "run");
  m.set("method", to_string(r.train.method));
  std::vector<std::string> lrs;
  for (double v : r.train.learning_rates()) lrs.push_back(format_double(v));
  m.set("lr_grid", join(lrs, ','));
  m.set("batch_size", std::uint64_t{r.train.batch_size});
  m.set("epochs", std::uint64_t{r.train.epochs});
  m.set("early_epoch", std::uint64_t{r.train.early_epoch});
  m.set("seed", std::uint64_t{r.train.seed});
  m.set("init_seed", std::uint64_t{r.train.init_seed});
  m.set("prefix_length", std::uint64_t{r.train.adapter.prefix_length});
  m.set("lora_rank", std::uint64_t{r.train.adapter.lora_rank});
  m.set("lora_alpha", r.train.adapter.lora_alpha);
  m.set("init_std", r.train.adapter.init_std);
  m.set("regime", to_string(r.regime));
  m.set("limited_size", std::uint64_t{r.limited_size});
  m.set("model_config", r.model.canonical());
  m.set("config_hash", hex64(r.model.hash()));
  m.set("model_seed", std::uint64_t{r.model_seed});
  m.set("tasks", join(r.tasks, ','));
  return m;
}

inline RunInfo run_info_from(const Manifest& m, const std::string& where) {
  if (m.get_or("kind", "") != "run") throw Error(where + ": not a training run directory");
  RunInfo r;
  r.train.method = parse_method(m.get("method"));
  r.train.lr_grid.clear();
  for (const auto& v : split(m.get("lr_grid"), ',')) r.train.lr_grid.push_back(parse_double(v, "lr_grid"));
  r.train.lr_scale = 1.0;
  r.train.batch_size = m.get_u64("batch_size");
  r.train.epochs = m.get_u64("epochs");
  r.train.early_epoch = m.get_u64("early_epoch");
  r.train.seed = m.get_u64("seed");
  r.train.init_seed = m.get_u64("init_seed");
  r.train.adapter.prefix_length = m.get_u64("prefix_length");
  r.train.adapter.lora_rank = m.get_u64("lora_rank");
  r.train.adapter.lora_alpha = m.get_double("lora_alpha");
  r.train.adapter.init_std = m.get_double("init_std");
  r.regime = parse_regime(m.get("regime"));
  r.limited_size = m.get_u64("limited_size");
  r.model = checked_config(m, where);
  r.model_seed = m.get_u64("model_seed");
  r.tasks = split(m.get("tasks"), ',');
  return r;
}

struct LoadedRun {
  RunInfo info;
  ModelParams base;
  SuiteTraining training;
};

inline void save_run(const fs::path& dir, const RunInfo& info, const ModelParams& base, const SuiteTraining& training) {
  save_model(dir / "base", base, info.model_seed);
  Manifest m = run_manifest(info);
  for (const auto& id : info.tasks) {
    const auto& r = training.results.at(id);
    save_checkpoint(dir / id / "early", r.early, info.model, info.train.adapter);
    save_checkpoint(dir / id / "best", r.best, info.model, info.train.adapter);
    std::vector<std::string> curve;
    for (double v : r.curve) curve.push_back(format_double(v));
    m.set("curve." + id, join(curve, ','));
    m.set("lr." + id, r.lr);
  }
  m.stamp();
  write_manifest(dir / "manifest.txt", m);
}

inline LoadedRun load_run(const fs::path& dir) {
  LoadedRun out;
  const auto m = read_manifest(dir / "manifest.txt");
  out.info = run_info_from(m, dir.string());
  out.base = load_model(dir / "base");
  if (!(out.base.config == out.info.model)) throw Error(dir.string() + ": base model config differs from the run manifest");
  for (const auto& id : out.info.tasks) {
    TrainResult r;
    r.early = load_checkpoint(dir / id / "early", &out.info.model);
    r.best = load_checkpoint(dir / id / "best", &out.info.model);
    if (r.best.method != out.info.train.method) throw Error(dir.string() + ": checkpoint method differs for " + id);
    for (const auto& v : split(m.get_or("curve." + id, ""), ',')) {
      if (!v.empty()) r.curve.push_back(parse_double(v, "curve"));
    }
    r.lr = m.has("lr." + id) ? m.get_double("lr." + id) : r.best.lr;
    out.training.results.emplace(id, std::move(r));
  }
  return out;
}

/// Checks that a suite and a run refer to the same tasks.
inline void check_run_matches(const Suite& suite, const RunInfo& info) {
  if (suite.ids() != info.tasks) throw Error("run tasks do not match the suite tasks");
  if (info.model.vocab_size != suite.config.vocab_size || info.model.n_classes != suite.config.n_classes ||
      info.model.max_seq_len < suite.config.seq_len) {
    throw Error("run model config " + info.model.canonical() + " does not fit the suite");
  }
}

}  // namespace tupate
