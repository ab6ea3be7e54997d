#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "bitfold/alphabet.hpp"
#include "bitfold/geometry.hpp"

namespace bitfold {

int aa_index(char c) {
  const auto pos = kAminoAcids.find(c);
  return pos == std::string_view::npos ? -1 : static_cast<int>(pos);
}

std::string sequence_to_string(const std::vector<int>& seq) {
  std::string s;
  s.reserve(seq.size());
  for (int a : seq) s += a == kAaMask ? '#' : a == kAaPad ? '-' : kAminoAcids.at(a);
  return s;
}

std::vector<int> sequence_from_string(std::string_view s) {
  std::vector<int> out;
  out.reserve(s.size());
  for (char c : s) {
    if (c == '#') out.push_back(kAaMask);
    else if (c == '-') out.push_back(kAaPad);
    else {
      const int a = aa_index(c);
      if (a < 0) fail(ErrorCode::SpecInvalid, std::string("unknown amino acid '") + c + "'");
      out.push_back(a);
    }
  }
  return out;
}

} // namespace bitfold

namespace bitfold::geom {

Coords BackboneStructure::atom(Atom a) const {
  Coords out(length(), 3);
  for (int i = 0; i < length(); ++i) out.row(i) = residues[i].atoms.row(a);
  return out;
}

Coords BackboneStructure::all_atoms() const {
  Coords out(4 * length(), 3);
  for (int i = 0; i < length(); ++i)
    for (int a = 0; a < 4; ++a) out.row(4 * i + a) = residues[i].atoms.row(a);
  return out;
}

void BackboneStructure::set_all_atoms(const Coords& xyz) {
  if (xyz.rows() != 4 * length()) fail(ErrorCode::LengthMismatch, "set_all_atoms row count");
  for (int i = 0; i < length(); ++i)
    for (int a = 0; a < 4; ++a) residues[i].atoms.row(a) = xyz.row(4 * i + a);
}

std::vector<int> BackboneStructure::chain_ids() const {
  std::vector<int> out;
  out.reserve(residues.size());
  for (const Residue& r : residues) out.push_back(r.chain_id);
  return out;
}

int BackboneStructure::chain_count() const {
  std::set<int> ids;
  for (const Residue& r : residues) ids.insert(r.chain_id);
  return static_cast<int>(ids.size());
}

AlignmentResult kabsch_align(const BackboneStructure& mobile, const BackboneStructure& target) {
  if (mobile.length() != target.length())
    fail(ErrorCode::LengthMismatch, std::to_string(mobile.length()) + " vs " + std::to_string(target.length()) +
                                        " residues");
  return kabsch(mobile.ca(), target.ca());
}

double ca_rmsd(const BackboneStructure& model, const BackboneStructure& reference) {
  return kabsch_align(model, reference).rmsd;
}

BackboneStructure transformed(const BackboneStructure& s, const Mat3& rotation, const Vec3& translation) {
  BackboneStructure out = s;
  out.set_all_atoms(apply_transform(s.all_atoms(), rotation, translation));
  return out;
}

BackboneStructure centered(const BackboneStructure& s) {
  const Vec3 c = s.ca().colwise().mean().transpose();
  return transformed(s, Mat3::Identity(), -c);
}

BackboneStructure superposed(const BackboneStructure& mobile, const BackboneStructure& target) {
  const AlignmentResult a = kabsch_align(mobile, target);
  return transformed(mobile, a.rotation, a.translation);
}

double tm_d0(int length) {
  if (length <= 21) return 0.5;
  return std::max(0.5, 1.24 * std::cbrt(static_cast<double>(length - 15)) - 1.8);
}

double tm_score(const BackboneStructure& model, const BackboneStructure& reference) {
  const int n = model.length();
  if (n != reference.length())
    fail(ErrorCode::LengthMismatch, std::to_string(n) + " vs " + std::to_string(reference.length()) + " residues");
  const Coords x = model.ca();
  const Coords y = reference.ca();
  const double d0 = tm_d0(n);
  std::vector<int> subset(n);
  for (int i = 0; i < n; ++i) subset[i] = i;
  double best = 0.0;
  for (int iter = 0; iter < 3; ++iter) {
    Coords xs(subset.size(), 3), ys(subset.size(), 3);
    for (std::size_t k = 0; k < subset.size(); ++k) {
      xs.row(k) = x.row(subset[k]);
      ys.row(k) = y.row(subset[k]);
    }
    AlignmentResult a;
    try {
      a = kabsch(xs, ys);
    } catch (const Error&) {
      break;
    }
    const Coords moved = apply_transform(x, a.rotation, a.translation);
    std::vector<double> dist(n);
    double score = 0;
    for (int i = 0; i < n; ++i) {
      dist[i] = (moved.row(i) - y.row(i)).norm();
      score += 1.0 / (1.0 + (dist[i] / d0) * (dist[i] / d0));
    }
    best = std::max(best, score / n);
    std::vector<int> next;
    for (int i = 0; i < n; ++i)
      if (dist[i] < d0) next.push_back(i);
    if (next.size() < 3) {
      std::vector<int> order(n);
      for (int i = 0; i < n; ++i) order[i] = i;
      std::stable_sort(order.begin(), order.end(), [&](int p, int q) { return dist[p] < dist[q]; });
      next.assign(order.begin(), order.begin() + std::min(n, 3));
      std::sort(next.begin(), next.end());
    }
    subset = std::move(next);
  }
  return std::min(best, 1.0);
}

// ------------------------------------------------------------------- I/O

namespace {

std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.push_back(line);
    pos = end + 1;
  }
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  return lines;
}

std::vector<std::string_view> split_ws(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    std::size_t j = i;
    while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) ++j;
    if (j > i) out.push_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

double parse_double(std::string_view field, int line, const char* what) {
  const std::string s(field);
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  const bool trailing_ok = end && std::all_of(static_cast<const char*>(end), s.c_str() + s.size(), [](char c) { return c == ' '; });
  if (s.find_first_not_of(' ') == std::string::npos || end == s.c_str() || !trailing_ok || !std::isfinite(v))
    throw ParseError(line, std::string("invalid ") + what + " '" + s + "'");
  return v;
}

int parse_int(std::string_view field, int line, const char* what) {
  const std::string s(field);
  char* end = nullptr;
  const long v = std::strtol(s.c_str(), &end, 10);
  if (s.empty() || end != s.c_str() + s.size()) throw ParseError(line, std::string("invalid ") + what + " '" + s + "'");
  return static_cast<int>(v);
}

BackboneStructure parse_native(std::string_view text, std::string source_id) {
  const auto lines = split_lines(text);
  if (lines.empty()) throw ParseError(1, "empty input");
  const auto head = split_ws(lines[0]);
  if (head.size() != 3 || head[0] != "BKB" || head[1] != "v1" || head[2].substr(0, 2) != "L=")
    throw ParseError(1, "expected header 'BKB v1 L=<n>'");
  const int n = parse_int(head[2].substr(2), 1, "length");
  if (n < 0) throw ParseError(1, "negative length");
  if (static_cast<int>(lines.size()) - 1 != n)
    throw ParseError(static_cast<int>(lines.size()), "header declares " + std::to_string(n) + " residues, found " +
                                                        std::to_string(lines.size() - 1));
  BackboneStructure s;
  s.source_id = std::move(source_id);
  s.residues.resize(n);
  for (int i = 0; i < n; ++i) {
    const int line_no = i + 2;
    const auto f = split_ws(lines[i + 1]);
    if (f.size() != 13) {
      if (f.size() > 0 && f.size() < 13 && (f.size() - 1) % 3 != 0)
        throw ParseError(line_no, "expected chain id and 12 coordinates, got " + std::to_string(f.size()) + " fields");
      if (f.size() > 13) throw ParseError(line_no, "trailing fields");
      fail(ErrorCode::MissingAtom, "line " + std::to_string(line_no) + ": residue lacks backbone atoms");
    }
    s.residues[i].chain_id = parse_int(f[0], line_no, "chain id");
    for (int k = 0; k < 12; ++k) s.residues[i].atoms(k / 3, k % 3) = parse_double(f[k + 1], line_no, "coordinate");
  }
  return s;
}

BackboneStructure parse_pdb(std::string_view text, std::string source_id) {
  struct Pending {
    Residue res;
    bool have[4] = {false, false, false, false};
    std::string key;
    int line = 0;
  };
  BackboneStructure s;
  s.source_id = std::move(source_id);
  std::vector<Pending> pending;
  int chain_index = -1;
  char last_chain = '\0';
  bool chain_break = true;
  const auto lines = split_lines(text);
  for (std::size_t li = 0; li < lines.size(); ++li) {
    const std::string_view line = lines[li];
    const int line_no = static_cast<int>(li) + 1;
    if (line.substr(0, 3) == "TER") {
      chain_break = true;
      continue;
    }
    if (line.substr(0, 6) != "ATOM  ") continue;
    if (line.size() < 54) throw ParseError(line_no, "ATOM record shorter than 54 columns");
    std::string name(line.substr(12, 4));
    name.erase(std::remove(name.begin(), name.end(), ' '), name.end());
    int atom = -1;
    if (name == "N") atom = kN;
    else if (name == "CA") atom = kCA;
    else if (name == "C") atom = kC;
    else if (name == "O") atom = kO;
    const char chain = line[21];
    const std::string key = std::string(1, chain) + std::string(line.substr(22, 5));
    const double x = parse_double(line.substr(30, 8), line_no, "x coordinate");
    const double y = parse_double(line.substr(38, 8), line_no, "y coordinate");
    const double z = parse_double(line.substr(46, 8), line_no, "z coordinate");
    if (chain != last_chain) chain_break = true;
    if (pending.empty() || pending.back().key != key || chain_break) {
      if (chain_break) {
        ++chain_index;
        chain_break = false;
        last_chain = chain;
      }
      Pending p;
      p.key = key;
      p.line = line_no;
      p.res.chain_id = chain_index;
      pending.push_back(std::move(p));
    }
    if (atom >= 0) {
      Pending& p = pending.back();
      p.res.atoms.row(atom) << x, y, z;
      p.have[atom] = true;
    }
  }
  for (const Pending& p : pending) {
    if (!(p.have[0] && p.have[1] && p.have[2] && p.have[3]))
      fail(ErrorCode::MissingAtom, "residue starting at line " + std::to_string(p.line) + " lacks N/CA/C/O");
    s.residues.push_back(p.res);
  }
  return s;
}

} // namespace

BackboneStructure parse_backbone(std::string_view text, Format format, std::string source_id) {
  return format == Format::Native ? parse_native(text, std::move(source_id)) : parse_pdb(text, std::move(source_id));
}

std::string write_backbone(const BackboneStructure& s) {
  std::string out = "BKB v1 L=" + std::to_string(s.length()) + "\n";
  char buf[64];
  for (const Residue& r : s.residues) {
    out += std::to_string(r.chain_id);
    for (int a = 0; a < 4; ++a) {
      out += ' ';
      for (int k = 0; k < 3; ++k) {
        std::snprintf(buf, sizeof buf, " %.6f", r.atoms(a, k));
        out += buf;
      }
    }
    out += '\n';
  }
  return out;
}

BackboneStructure read_backbone_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  const bool pdb = path.size() >= 4 && path.substr(path.size() - 4) == ".pdb";
  std::string id = path.substr(path.find_last_of('/') + 1);
  id = id.substr(0, id.find_last_of('.'));
  return parse_backbone(text, pdb ? Format::PdbSubset : Format::Native, id);
}

void write_backbone_file(const std::string& path, const BackboneStructure& s) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::Io, "cannot write " + path);
  out << write_backbone(s);
}

BackboneStructure round_to_native_precision(const BackboneStructure& s) {
  BackboneStructure out = s;
  for (Residue& r : out.residues)
    for (int a = 0; a < 4; ++a)
      for (int k = 0; k < 3; ++k) {
        double v = std::round(r.atoms(a, k) * 1e6) / 1e6;
        r.atoms(a, k) = v == 0.0 ? 0.0 : v;  // no negative zero in text
      }
  return out;
}

double dihedral(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d) {
  const Vec3 b1 = b - a, b2 = c - b, b3 = d - c;
  const Vec3 n1 = b1.cross(b2), n2 = b2.cross(b3);
  return std::atan2(b2.norm() * b1.dot(n2), n1.dot(n2));
}

} // namespace bitfold::geom
