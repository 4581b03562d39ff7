#include "qdwi/qspace.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "qdwi/error.hpp"

namespace qdwi {

double BVector::norm() const { return std::sqrt(x * x + y * y + z * z); }

GradientTable::GradientTable(std::vector<GradientEntry> entries) : entries_(std::move(entries)) {}

double GradientTable::max_bvalue() const {
  if (max_override_) return *max_override_;
  double m = 0;
  for (const auto& e : entries_) m = std::max(m, e.bvalue);
  return m;
}

GradientTable GradientTable::subset(const std::vector<std::size_t>& indices) const {
  std::vector<GradientEntry> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(entries_.at(i));
  GradientTable t(std::move(out));
  t.max_override_ = max_override_;
  return t;
}

namespace {

std::vector<std::vector<double>> parse_rows(std::string_view text, const char* what) {
  std::vector<std::vector<double>> rows;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    std::string_view line = text.substr(pos, eol - pos);
    std::vector<double> row;
    std::size_t i = 0;
    while (i < line.size()) {
      while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
      if (i >= line.size()) break;
      std::size_t j = i;
      while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
      std::string_view tok = line.substr(i, j - i);
      double v = 0;
      const char* first = tok.data();
      if (!tok.empty() && tok.front() == '+') ++first;
      auto [ptr, ec] = std::from_chars(first, tok.data() + tok.size(), v);
      if (ec != std::errc() || ptr != tok.data() + tok.size() || !std::isfinite(v)) {
        throw FormatError(std::string(what) + ": non-numeric token '" + std::string(tok) + "'");
      }
      row.push_back(v);
      i = j;
    }
    if (!row.empty()) rows.push_back(std::move(row));
    if (eol == text.size()) break;
    pos = eol + 1;
  }
  return rows;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void append_number(std::string& out, double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, ptr);
}

}  // namespace

GradientTable parse_gradient_table(std::string_view bvec_text, std::string_view bval_text) {
  auto vec_rows = parse_rows(bvec_text, "bvec");
  auto val_rows = parse_rows(bval_text, "bval");
  if (val_rows.size() != 1) {
    throw FormatError("bval: expected 1 row, found " + std::to_string(val_rows.size()));
  }
  if (vec_rows.size() != 3) {
    throw FormatError("bvec: expected 3 rows, found " + std::to_string(vec_rows.size()));
  }
  const std::size_t n = val_rows[0].size();
  for (const auto& r : vec_rows) {
    if (r.size() != n) {
      throw FormatError("row-length mismatch: bvec rows " + std::to_string(vec_rows[0].size()) + "/" +
                        std::to_string(vec_rows[1].size()) + "/" + std::to_string(vec_rows[2].size()) +
                        ", bval " + std::to_string(n));
    }
  }
  std::vector<GradientEntry> entries;
  entries.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    GradientEntry e{{vec_rows[0][i], vec_rows[1][i], vec_rows[2][i]}, val_rows[0][i]};
    if (e.bvalue < 0) throw FormatError("negative bvalue at entry " + std::to_string(i));
    const double nrm = e.direction.norm();
    if (nrm >= 0.9 && nrm <= 1.1) {
      // Already-unit directions are kept as written so text round trips are exact.
      if (std::abs(nrm - 1.0) > 1e-12) e.direction = {e.direction.x / nrm, e.direction.y / nrm, e.direction.z / nrm};
    } else if (e.bvalue == 0) {
      e.direction = {};
    } else {
      throw FormatError("direction norm " + std::to_string(nrm) + " outside [0.9, 1.1] at entry " +
                        std::to_string(i) + " with bvalue " + std::to_string(e.bvalue));
    }
    entries.push_back(e);
  }
  return GradientTable(std::move(entries));
}

GradientTable read_gradient_table(const std::filesystem::path& bvec, const std::filesystem::path& bval) {
  return parse_gradient_table(read_file(bvec), read_file(bval));
}

std::string format_bvec(const GradientTable& table) {
  std::string out;
  for (int axis = 0; axis < 3; ++axis) {
    for (std::size_t i = 0; i < table.size(); ++i) {
      const BVector& d = table[i].direction;
      if (i) out.push_back(' ');
      append_number(out, axis == 0 ? d.x : axis == 1 ? d.y : d.z);
    }
    out.push_back('\n');
  }
  return out;
}

std::string format_bval(const GradientTable& table) {
  std::string out;
  for (std::size_t i = 0; i < table.size(); ++i) {
    if (i) out.push_back(' ');
    append_number(out, table[i].bvalue);
  }
  out.push_back('\n');
  return out;
}

void write_gradient_table(const GradientTable& table, const std::filesystem::path& bvec,
                          const std::filesystem::path& bval) {
  std::ofstream vec(bvec, std::ios::binary), val(bval, std::ios::binary);
  if (!vec) throw Error("cannot write " + bvec.string());
  if (!val) throw Error("cannot write " + bval.string());
  vec << format_bvec(table);
  val << format_bval(table);
}

ConditionVector to_condition(const GradientEntry& entry, double max_bvalue) {
  if (!(max_bvalue > 0)) throw FormatError("max_bvalue must be positive");
  if (entry.bvalue > max_bvalue) {
    throw FormatError("out-of-range condition: bvalue " + std::to_string(entry.bvalue) +
                      " exceeds max " + std::to_string(max_bvalue));
  }
  if (entry.bvalue < 0) throw FormatError("negative bvalue");
  return {static_cast<float>(entry.direction.x), static_cast<float>(entry.direction.y),
          static_cast<float>(entry.direction.z), static_cast<float>(entry.bvalue / max_bvalue)};
}

std::size_t retained_count(std::size_t n, double r) {
  if (!(r >= 0 && r < 1)) throw FormatError("downsampling rate must lie in [0, 1)");
  return static_cast<std::size_t>(std::floor((1.0 - r) * static_cast<double>(n) + 0.5));
}

Downsampled downsample(const GradientTable& table, double r, std::uint64_t seed) {
  if (table.empty()) throw FormatError("downsample: empty table");
  const std::size_t n = table.size();
  const std::size_t k = retained_count(n, r);
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  // Partial Fisher-Yates: the first k slots become a uniform k-subset.
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  Downsampled out;
  out.kept_indices.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
  out.removed_indices.assign(idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end());
  std::sort(out.kept_indices.begin(), out.kept_indices.end());
  std::sort(out.removed_indices.begin(), out.removed_indices.end());
  out.kept = table.subset(out.kept_indices);
  out.removed = table.subset(out.removed_indices);
  return out;
}

BVector antipodal_canonicalize(const BVector& v) {
  for (double c : {v.x, v.y, v.z}) {
    if (c > 0) return v;
    if (c < 0) return -v;
  }
  return v;
}

BVector slerp(const BVector& from, const BVector& to, double t) {
  const double na = from.norm(), nb = to.norm();
  if (na == 0 || nb == 0) throw FormatError("slerp: zero direction");
  const BVector a{from.x / na, from.y / na, from.z / na};
  const BVector b{to.x / nb, to.y / nb, to.z / nb};
  const double cosw = std::clamp(a.x * b.x + a.y * b.y + a.z * b.z, -1.0, 1.0);
  const double omega = std::acos(cosw);
  if (omega < 1e-9) return a;
  if (std::numbers::pi - omega < 1e-9) throw FormatError("slerp: antipodal endpoints have no unique path");
  const double s = std::sin(omega);
  const double wa = std::sin((1 - t) * omega) / s, wb = std::sin(t * omega) / s;
  return {wa * a.x + wb * b.x, wa * a.y + wb * b.y, wa * a.z + wb * b.z};
}

GradientTable make_multishell_table(const std::vector<double>& shells, int per_shell) {
  if (per_shell < 1) throw FormatError("per_shell must be positive");
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  std::vector<GradientEntry> entries;
  for (std::size_t s = 0; s < shells.size(); ++s) {
    const double offset = static_cast<double>(s) * 2.0 * std::numbers::pi / (3.0 * static_cast<double>(shells.size()));
    for (int i = 0; i < per_shell; ++i) {
      // Upper hemisphere, z from ~1 down to ~0.
      const double z = 1.0 - (static_cast<double>(i) + 0.5) / static_cast<double>(per_shell);
      const double rho = std::sqrt(std::max(0.0, 1.0 - z * z));
      const double phi = golden * static_cast<double>(i) + offset;
      entries.push_back({{rho * std::cos(phi), rho * std::sin(phi), z}, shells[s]});
    }
  }
  return GradientTable(std::move(entries));
}

}  // namespace qdwi
