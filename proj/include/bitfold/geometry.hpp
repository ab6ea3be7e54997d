#ifndef BITFOLD_GEOMETRY_HPP_
#define BITFOLD_GEOMETRY_HPP_

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "bitfold/error.hpp"

namespace bitfold::geom {

template <typename Scalar>
using Points = Eigen::Matrix<Scalar, Eigen::Dynamic, 3>;
using Coords = Points<double>;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

enum Atom : int { kN = 0, kCA = 1, kC = 2, kO = 3 };
constexpr int kAtomsPerResidue = 4;

struct Residue {
  int chain_id = 0;
  Eigen::Matrix<double, 4, 3, Eigen::RowMajor> atoms = Eigen::Matrix<double, 4, 3, Eigen::RowMajor>::Zero();

  friend bool operator==(const Residue& a, const Residue& b) {
    return a.chain_id == b.chain_id && a.atoms == b.atoms;
  }
};

struct BackboneStructure {
  std::vector<Residue> residues;
  std::string source_id;

  int length() const { return static_cast<int>(residues.size()); }
  Coords atom(Atom a) const;
  Coords ca() const { return atom(kCA); }
  /// (4L, 3) in residue order, atoms [N, CA, C, O] within each residue.
  Coords all_atoms() const;
  void set_all_atoms(const Coords& xyz);
  std::vector<int> chain_ids() const;
  int chain_count() const;

  friend bool operator==(const BackboneStructure& a, const BackboneStructure& b) {
    return a.residues == b.residues;
  }
};

struct AlignmentResult {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();
  double rmsd = 0.0;
};

/// Least-squares rigid superposition of mobile rows onto target rows:
/// target ~ rotation * mobile + translation. Reflections are corrected to a
/// proper rotation; rank-deficient covariance (collinear or coincident
/// points) raises DegenerateInput.
template <typename DerivedA, typename DerivedB>
AlignmentResult kabsch(const Eigen::MatrixBase<DerivedA>& mobile, const Eigen::MatrixBase<DerivedB>& target) {
  using Scalar = typename DerivedA::Scalar;
  if (mobile.rows() != target.rows() || mobile.cols() != 3 || target.cols() != 3)
    fail(ErrorCode::LengthMismatch, "kabsch on " + std::to_string(mobile.rows()) + " vs " +
                                        std::to_string(target.rows()) + " points");
  const Eigen::Matrix<Scalar, 1, 3> mc = mobile.colwise().mean();
  const Eigen::Matrix<Scalar, 1, 3> tc = target.colwise().mean();
  const Points<Scalar> x = mobile.rowwise() - mc;
  const Points<Scalar> y = target.rowwise() - tc;
  const Eigen::Matrix<Scalar, 3, 3> h = x.transpose() * y;
  const Eigen::JacobiSVD<Eigen::Matrix<Scalar, 3, 3>> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const auto& s = svd.singularValues();
  if (s(0) <= Scalar(1e-12) || s(1) <= Scalar(1e-10) * s(0))
    fail(ErrorCode::DegenerateInput, "point cloud spans fewer than two dimensions");
  const Eigen::Matrix<Scalar, 3, 3> u = svd.matrixU();
  const Eigen::Matrix<Scalar, 3, 3> v = svd.matrixV();
  Eigen::Matrix<Scalar, 3, 3> d = Eigen::Matrix<Scalar, 3, 3>::Identity();
  if ((v * u.transpose()).determinant() < 0) d(2, 2) = Scalar(-1);
  const Eigen::Matrix<Scalar, 3, 3> r = v * d * u.transpose();
  AlignmentResult out;
  out.rotation = r.template cast<double>();
  out.translation = (tc.transpose() - r * mc.transpose()).template cast<double>();
  const Points<Scalar> moved = (x * r.transpose()).rowwise() + tc;
  out.rmsd = static_cast<double>(std::sqrt((moved - target).rowwise().squaredNorm().mean()));
  return out;
}

/// Root mean square deviation of corresponding rows with no superposition.
template <typename DerivedA, typename DerivedB>
double rmsd_unaligned(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  if (a.rows() != b.rows()) fail(ErrorCode::LengthMismatch, "rmsd on unequal point counts");
  return std::sqrt((a - b).rowwise().squaredNorm().mean());
}

/// Applies x -> rotation * x + translation row-wise.
template <typename Derived>
Coords apply_transform(const Eigen::MatrixBase<Derived>& pts, const Mat3& rotation, const Vec3& translation) {
  return (pts * rotation.transpose()).rowwise() + translation.transpose();
}

/// Kabsch on C-alpha atoms.
AlignmentResult kabsch_align(const BackboneStructure& mobile, const BackboneStructure& target);
double ca_rmsd(const BackboneStructure& model, const BackboneStructure& reference);
BackboneStructure transformed(const BackboneStructure& s, const Mat3& rotation, const Vec3& translation);
/// Translates so the C-alpha centroid is at the origin.
BackboneStructure centered(const BackboneStructure& s);
/// `mobile` superposed onto `target` (C-alpha Kabsch), all atoms moved.
BackboneStructure superposed(const BackboneStructure& mobile, const BackboneStructure& target);

/// d0(L) = 1.24 (L - 15)^(1/3) - 1.8, and 0.5 for L <= 21 or whenever smaller.
double tm_d0(int length);
/// TM-score over aligned residue pairs. Superposition starts from all
/// residues and is refined twice on residues closer than d0; the best
/// score seen is returned.
double tm_score(const BackboneStructure& model, const BackboneStructure& reference);

enum class Format { Native, PdbSubset };

BackboneStructure parse_backbone(std::string_view text, Format format, std::string source_id = "");
std::string write_backbone(const BackboneStructure& s);  // native format
BackboneStructure read_backbone_file(const std::string& path);
void write_backbone_file(const std::string& path, const BackboneStructure& s);
/// Rounds coordinates onto the native text grid (6 fraction digits) so that
/// write/parse roundtrips are bit-exact.
BackboneStructure round_to_native_precision(const BackboneStructure& s);

// ------------------------------------------------------------ synthesis

enum class SecondaryStructure { Helix, Strand, Loop };

struct Segment {
  SecondaryStructure kind = SecondaryStructure::Loop;
  int length = 0;
};

struct SynthSpec {
  int length = 64;             // total residues over all chains
  std::vector<Segment> plan;   // single-chain only; empty draws a seeded plan per chain
  int chains = 1;
  double jitter = 0.1;         // Angstrom, per coordinate
};

struct SynthResult {
  BackboneStructure structure;
  std::vector<int> sequence;   // amino-acid ids in [0, 20)
  std::vector<SecondaryStructure> secondary;
};

SynthResult synth_backbone(const SynthSpec& spec, std::uint64_t seed);

/// Single-chain backbone with N, C and O placed from a peptide-plane template
/// around consecutive C-alpha positions.
BackboneStructure backbone_from_ca(const Coords& ca, int chain_id = 0);

/// Ideal C-alpha helix (radius from 3.8 A spacing, 1.5 A rise, 100 deg/residue).
Coords ideal_helix_ca(int n);

/// Backbone dihedral (radians) of four points.
double dihedral(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d);

} // namespace bitfold::geom

#endif
