#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "bitfold/alphabet.hpp"
#include "bitfold/geometry.hpp"
#include "bitfold/rng.hpp"

namespace bitfold::geom {
namespace {

constexpr double kCaCa = 3.8;
constexpr double kDeg = std::numbers::pi / 180.0;

struct Internal {
  double angle;     // virtual bond angle at the previous C-alpha
  double torsion;   // virtual torsion ending at the new C-alpha
};

double angle_at(const Vec3& a, const Vec3& b, const Vec3& c) {
  return std::acos(std::clamp((a - b).normalized().dot((c - b).normalized()), -1.0, 1.0));
}

Coords ideal_strand_ca(int n) {
  const double half_width = std::sqrt(kCaCa * kCaCa - 3.3 * 3.3) / 2.0;
  Coords p(n, 3);
  for (int k = 0; k < n; ++k) p.row(k) << 3.3 * k, (k % 2 == 0 ? half_width : -half_width), 0.0;
  return p;
}

Internal internal_of(const Coords& p) {
  return {angle_at(p.row(0), p.row(1), p.row(2)), dihedral(p.row(0), p.row(1), p.row(2), p.row(3))};
}

const Internal& helix_internal() {
  static const Internal h = internal_of(ideal_helix_ca(4));
  return h;
}

const Internal& strand_internal() {
  static const Internal s = internal_of(ideal_strand_ca(4));
  return s;
}

// Places d so that |cd| = bond, angle(b, c, d) = angle and dihedral(a, b, c, d) = torsion.
Vec3 place(const Vec3& a, const Vec3& b, const Vec3& c, double bond, double angle, double torsion) {
  const Vec3 bc = (c - b).normalized();
  const Vec3 n = (b - a).cross(bc).normalized();
  const Vec3 m = n.cross(bc);
  const Vec3 local(-bond * std::cos(angle), bond * std::sin(angle) * std::cos(torsion),
                   bond * std::sin(angle) * std::sin(torsion));
  return c + local.x() * bc + local.y() * m + local.z() * n;
}

std::vector<Segment> random_plan(int length, Rng& rng) {
  std::vector<Segment> plan;
  int used = 0;
  bool loop = true;
  while (used < length) {
    Segment s;
    if (loop) {
      s.kind = SecondaryStructure::Loop;
      s.length = rng.uniform_int(2, 5);
    } else if (rng.bernoulli(0.6)) {
      s.kind = SecondaryStructure::Helix;
      s.length = rng.uniform_int(8, 16);
    } else {
      s.kind = SecondaryStructure::Strand;
      s.length = rng.uniform_int(5, 9);
    }
    s.length = std::min(s.length, length - used);
    used += s.length;
    plan.push_back(s);
    loop = !loop;
  }
  return plan;
}

std::vector<SecondaryStructure> expand(const std::vector<Segment>& plan) {
  std::vector<SecondaryStructure> out;
  for (const Segment& s : plan) out.insert(out.end(), s.length, s.kind);
  return out;
}

Internal ss_internal(SecondaryStructure ss) {
  return ss == SecondaryStructure::Helix ? helix_internal() : strand_internal();
}

Coords build_trace(const std::vector<SecondaryStructure>& ss, Rng& rng) {
  const int n = static_cast<int>(ss.size());
  // Per-residue internal coordinates; loops interpolate between flanking
  // regular segments and get a seeded perturbation.
  std::vector<Internal> ic(n);
  for (int i = 0; i < n; ++i) {
    if (ss[i] != SecondaryStructure::Loop) {
      ic[i] = ss_internal(ss[i]);
      continue;
    }
    int lo = i, hi = i;
    while (lo >= 0 && ss[lo] == SecondaryStructure::Loop) --lo;
    while (hi < n && ss[hi] == SecondaryStructure::Loop) ++hi;
    const Internal left = lo >= 0 ? ss_internal(ss[lo]) : Internal{110 * kDeg, -120 * kDeg};
    const Internal right = hi < n ? ss_internal(ss[hi]) : Internal{110 * kDeg, -120 * kDeg};
    const double f = static_cast<double>(i - lo) / static_cast<double>(hi - lo);
    ic[i].angle = std::clamp((1 - f) * left.angle + f * right.angle + rng.normal(0.0, 8 * kDeg), 85 * kDeg,
                             145 * kDeg);
    ic[i].torsion = (1 - f) * left.torsion + f * right.torsion + rng.normal(0.0, 70 * kDeg);
  }
  Coords p(n, 3);
  const Internal first = ic[std::min(1, n - 1)];
  p.row(0) << 0, 0, 0;
  if (n > 1) p.row(1) << kCaCa, 0, 0;
  if (n > 2) p.row(2) = p.row(1) + kCaCa * Vec3(-std::cos(first.angle), std::sin(first.angle), 0).transpose();
  for (int k = 3; k < n; ++k) {
    const Internal& c = ic[k - 1];
    p.row(k) = place(p.row(k - 3), p.row(k - 2), p.row(k - 1), kCaCa, c.angle, c.torsion).transpose();
  }
  return p;
}

bool has_clash(const Coords& p) {
  for (int i = 0; i < p.rows(); ++i)
    for (int j = i + 3; j < p.rows(); ++j)
      if ((p.row(i) - p.row(j)).norm() < 3.6) return true;
  return false;
}

// N, C, O from the C-alpha trace using a fixed peptide-plane template in the
// frame of each consecutive C-alpha pair.
void add_backbone_atoms(const Coords& ca, int chain_id, std::vector<Residue>& out) {
  const int n = static_cast<int>(ca.rows());
  std::vector<Residue> res(n);
  auto frame = [&](int i, Vec3& e1, Vec3& e2) {
    const Vec3 a = ca.row(i), b = ca.row(i + 1);
    e1 = (b - a).normalized();
    const Vec3 ref = i > 0 ? Vec3(ca.row(i - 1)) : (n > i + 2 ? Vec3(ca.row(i + 2)) : a + Vec3(0, 1, 0));
    Vec3 u = ref - a;
    u -= u.dot(e1) * e1;
    if (u.norm() < 1e-9) u = e1.unitOrthogonal();
    e2 = -u.normalized();
  };
  for (int i = 0; i < n; ++i) {
    res[i].chain_id = chain_id;
    res[i].atoms.row(kCA) = ca.row(i);
  }
  for (int i = 0; i + 1 < n; ++i) {
    Vec3 e1, e2;
    frame(i, e1, e2);
    const Vec3 a = ca.row(i);
    res[i].atoms.row(kC) = (a + 1.40 * e1 + 0.60 * e2).transpose();
    res[i].atoms.row(kO) = (a + 1.55 * e1 + 1.82 * e2).transpose();
    res[i + 1].atoms.row(kN) = (a + 2.45 * e1 - 0.45 * e2).transpose();
  }
  if (n >= 2) {
    Vec3 e1, e2;
    frame(0, e1, e2);
    const Vec3 a = ca.row(0);
    res[0].atoms.row(kN) = (a - 1.03 * e1 - 1.03 * e2).transpose();
    frame(n - 2, e1, e2);
    const Vec3 z = ca.row(n - 1);
    res[n - 1].atoms.row(kC) = (z + 1.40 * e1 + 0.60 * e2).transpose();
    res[n - 1].atoms.row(kO) = (z + 1.55 * e1 + 1.82 * e2).transpose();
  }
  out.insert(out.end(), res.begin(), res.end());
}

int residue_for(SecondaryStructure ss, Rng& rng) {
  static const std::string helix = "AELMQKR";
  static const std::string strand = "VIYFTW";
  static const std::string loop = "GPNDSHC";
  if (rng.bernoulli(0.1)) return rng.uniform_int(0, kNumAminoAcids - 1);
  const std::string& pool = ss == SecondaryStructure::Helix ? helix : ss == SecondaryStructure::Strand ? strand : loop;
  return aa_index(pool[rng.uniform_int(0, static_cast<int>(pool.size()) - 1)]);
}

Mat3 random_rotation(Rng& rng) {
  Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  q.normalize();
  return q.toRotationMatrix();
}

double min_distance(const Coords& a, const Coords& b) {
  double m = std::numeric_limits<double>::infinity();
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < b.rows(); ++j) m = std::min(m, (a.row(i) - b.row(j)).norm());
  return m;
}

} // namespace

BackboneStructure backbone_from_ca(const Coords& ca, int chain_id) {
  BackboneStructure s;
  add_backbone_atoms(ca, chain_id, s.residues);
  return s;
}

Coords ideal_helix_ca(int n) {
  const double omega = 100.0 * kDeg;
  const double rise = 1.5;
  const double radius = std::sqrt(kCaCa * kCaCa - rise * rise) / (2.0 * std::sin(omega / 2.0));
  Coords p(n, 3);
  for (int k = 0; k < n; ++k) p.row(k) << radius * std::cos(k * omega), radius * std::sin(k * omega), rise * k;
  return p;
}

SynthResult synth_backbone(const SynthSpec& spec, std::uint64_t seed) {
  if (spec.length < 8 || spec.length > 512)
    fail(ErrorCode::SpecInvalid, "length " + std::to_string(spec.length) + " outside [8, 512]");
  if (spec.chains < 1 || spec.length / spec.chains < 4)
    fail(ErrorCode::SpecInvalid, "chain count " + std::to_string(spec.chains) + " for length " +
                                     std::to_string(spec.length));
  if (!spec.plan.empty()) {
    if (spec.chains != 1) fail(ErrorCode::SpecInvalid, "explicit segment plans are single-chain only");
    int total = 0;
    for (const Segment& s : spec.plan) {
      if (s.length <= 0) fail(ErrorCode::SpecInvalid, "segment length must be positive");
      total += s.length;
    }
    if (total != spec.length) fail(ErrorCode::SpecInvalid, "segment plan does not sum to length");
  }
  if (spec.jitter < 0) fail(ErrorCode::SpecInvalid, "negative jitter");

  Rng rng(seed);
  SynthResult out;
  std::vector<Coords> chain_ca;
  for (int c = 0; c < spec.chains; ++c) {
    const int len = spec.length / spec.chains + (c < spec.length % spec.chains ? 1 : 0);
    Rng chain_rng = rng.split();
    std::vector<SecondaryStructure> ss;
    Coords ca;
    // Most compact clash-free trace among several seeded loop draws.
    double best_rg = std::numeric_limits<double>::infinity();
    int accepted = 0;
    for (int attempt = 0; attempt < 64 && accepted < 12; ++attempt) {
      Rng trial = chain_rng.split();
      const std::vector<SecondaryStructure> cand_ss =
          spec.plan.empty() ? expand(random_plan(len, trial)) : expand(spec.plan);
      const Coords cand = build_trace(cand_ss, trial);
      if (has_clash(cand) && attempt < 63) continue;
      ++accepted;
      const double rg = (cand.rowwise() - cand.colwise().mean()).rowwise().squaredNorm().mean();
      if (rg < best_rg) {
        best_rg = rg;
        ss = cand_ss;
        ca = cand;
      }
    }
    Rng seq_rng = chain_rng.split();
    for (SecondaryStructure s : ss) out.sequence.push_back(residue_for(s, seq_rng));
    out.secondary.insert(out.secondary.end(), ss.begin(), ss.end());
    // Center; chains after the first get a seeded rigid placement next to the
    // existing ones with a 5-15 A minimum C-alpha gap.
    const Eigen::RowVector3d centroid = ca.colwise().mean();
    ca = ca.rowwise() - centroid;
    if (c > 0) {
      Coords placed(0, 3);
      for (const Coords& prev : chain_ca) {
        Coords grown(placed.rows() + prev.rows(), 3);
        grown << placed, prev;
        placed = grown;
      }
      const Mat3 r = random_rotation(rng);
      ca = ca * r.transpose();
      Vec3 dir(rng.normal(), rng.normal(), rng.normal());
      dir.normalize();
      const double target = rng.uniform(6.0, 14.0);
      const Eigen::RowVector3d base = placed.colwise().mean();
      const double reach = placed.rowwise().norm().maxCoeff() + ca.rowwise().norm().maxCoeff() + 20.0;
      Coords moved;
      for (double d = reach; d >= 0.0; d -= 0.25) {
        moved = ca.rowwise() + (base + d * dir.transpose());
        if (min_distance(moved, placed) <= target) break;
      }
      ca = moved;
    }
    chain_ca.push_back(ca);
    add_backbone_atoms(ca, c, out.structure.residues);
  }
  if (spec.jitter > 0) {
    Rng jitter_rng = rng.split();
    for (Residue& r : out.structure.residues)
      for (int a = 0; a < 4; ++a)
        for (int k = 0; k < 3; ++k) r.atoms(a, k) += jitter_rng.normal(0.0, spec.jitter);
  }
  out.structure = round_to_native_precision(centered(out.structure));
  out.structure.source_id = "synth-" + std::to_string(seed);
  return out;
}

} // namespace bitfold::geom
