//! Bead-level chromosome conformations and preprocessing transforms.
//!
//! A [`Conformation`] holds the coordinates of a parental chain and a
//! (possibly partial) replicated chain, both laid out bin-major: bead `k` of
//! bin `i` lives at flat index `i * beads_per_bin + k`. The parental chain is
//! always fully present; the replicated chain carries a binary mask and
//! coordinates at mask-0 positions are ignored by every transform, loss and
//! metric downstream.
//!
//! The tabular layout used for model input and on-disk storage packs one row
//! per bin, `8 * beads_per_bin` columns, ordered per bead as
//! `[px, py, pz, pm, rx, ry, rz, rm]` (parental coords + mask, then
//! replicated coords + mask).

pub mod io;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub type Vec3 = [f64; 3];

/// Columns per bead in the packed row layout.
pub const ROW_COLS_PER_BEAD: usize = 8;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("conformation has no masked beads")]
    AllMasked,
    #[error("degenerate conformation: mean masked bead norm is zero")]
    Degenerate,
    #[error("conformation is not centered (masked centroid norm {0:.3e})")]
    NotCentered(f64),
    #[error("not a rotation matrix: {0}")]
    NotARotation(String),
    #[error("bin count must be at least 1")]
    EmptyConformation,
    #[error("coordinate/mask arrays disagree with bins={bins} beads_per_bin={beads_per_bin}")]
    BadLayout { bins: usize, beads_per_bin: usize },
    #[error("row table has {got} values, expected {expected}")]
    BadTableShape { got: usize, expected: usize },
    #[error("mask value {0} is not binary")]
    NonBinaryMask(f64),
    #[error("parental mask must be 1 at every position")]
    ParentalMaskZero,
    #[error("empty ensemble")]
    EmptyEnsemble,
    #[error("ensemble members disagree on bins/beads_per_bin")]
    MixedLayout,
    #[error("{path}: parse error at line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-bin bead coordinates for a parental chain and a partially replicated
/// chain, plus the replication mask.
///
/// Invariants kept by construction:
/// * the parental chain is fully present (its mask is all ones and therefore
///   not stored);
/// * `mask_replicated` is 0/1 per replicated bead;
/// * `scale` is the positive factor removed by the latest scale
///   normalization (1 for raw conformations).
#[derive(Debug, Clone, PartialEq)]
pub struct Conformation {
    bins: usize,
    beads_per_bin: usize,
    coords_parental: Vec<Vec3>,
    coords_replicated: Vec<Vec3>,
    mask_replicated: Vec<u8>,
    scale: f64,
}

impl Conformation {
    pub fn new(
        bins: usize,
        beads_per_bin: usize,
        coords_parental: Vec<Vec3>,
        coords_replicated: Vec<Vec3>,
        mask_replicated: Vec<u8>,
    ) -> Result<Self, GeomError> {
        if bins == 0 || beads_per_bin == 0 {
            return Err(GeomError::EmptyConformation);
        }
        let n = bins * beads_per_bin;
        if coords_parental.len() != n || coords_replicated.len() != n || mask_replicated.len() != n
        {
            return Err(GeomError::BadLayout {
                bins,
                beads_per_bin,
            });
        }
        if let Some(bad) = mask_replicated.iter().find(|&&m| m > 1) {
            return Err(GeomError::NonBinaryMask(f64::from(*bad)));
        }
        Ok(Self {
            bins,
            beads_per_bin,
            coords_parental,
            coords_replicated,
            mask_replicated,
            scale: 1.0,
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn beads_per_bin(&self) -> usize {
        self.beads_per_bin
    }

    /// Beads per chain (`bins * beads_per_bin`).
    pub fn beads_per_chain(&self) -> usize {
        self.bins * self.beads_per_bin
    }

    pub fn coords_parental(&self) -> &[Vec3] {
        &self.coords_parental
    }

    pub fn coords_replicated(&self) -> &[Vec3] {
        &self.coords_replicated
    }

    pub fn mask_replicated(&self) -> &[u8] {
        &self.mask_replicated
    }

    /// True when the replicated bead at flat index `i` exists.
    pub fn replicated_valid(&self, i: usize) -> bool {
        self.mask_replicated[i] == 1
    }

    /// Scale factor removed by the latest normalization (1 if none).
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn set_scale(&mut self, scale: f64) {
        self.scale = scale;
    }

    /// Iterates over all valid bead positions: every parental bead, then the
    /// replicated beads whose mask is 1.
    pub fn masked_positions(&self) -> impl Iterator<Item = Vec3> + '_ {
        self.coords_parental.iter().copied().chain(
            self.coords_replicated
                .iter()
                .zip(self.mask_replicated.iter())
                .filter(|(_, &m)| m == 1)
                .map(|(&c, _)| c),
        )
    }

    pub fn masked_count(&self) -> usize {
        self.beads_per_chain() + self.mask_replicated.iter().filter(|&&m| m == 1).count()
    }

    fn centroid(&self) -> Result<Vec3, GeomError> {
        let mut acc = [0.0; 3];
        let mut n = 0usize;
        for p in self.masked_positions() {
            acc[0] += p[0];
            acc[1] += p[1];
            acc[2] += p[2];
            n += 1;
        }
        if n == 0 {
            return Err(GeomError::AllMasked);
        }
        let inv = 1.0 / n as f64;
        Ok([acc[0] * inv, acc[1] * inv, acc[2] * inv])
    }

    /// Mean Euclidean norm over valid beads.
    pub fn mean_masked_norm(&self) -> f64 {
        let mut acc = 0.0;
        let mut n = 0usize;
        for p in self.masked_positions() {
            acc += (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            n += 1;
        }
        acc / n as f64
    }

    /// Translates the conformation so the centroid of the valid beads sits at
    /// the origin. Every coordinate (masked or not) is shifted identically;
    /// masks are unchanged.
    pub fn center(&self) -> Result<Conformation, GeomError> {
        let c = self.centroid()?;
        let shift = |p: &Vec3| [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
        let mut out = self.clone();
        out.coords_parental = self.coords_parental.iter().map(shift).collect();
        out.coords_replicated = self.coords_replicated.iter().map(shift).collect();
        Ok(out)
    }

    /// Rescales coordinates so the mean Euclidean norm of the valid beads is
    /// exactly 1, storing the removed factor in `scale`.
    ///
    /// Requires a centered conformation; refuses degenerate input where all
    /// valid beads sit at the origin.
    pub fn scale_normalize(&self) -> Result<Conformation, GeomError> {
        let c = self.centroid()?;
        let s = self.mean_masked_norm();
        let cnorm = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        if cnorm > 1e-6 * s.max(1.0) {
            return Err(GeomError::NotCentered(cnorm));
        }
        if s <= f64::MIN_POSITIVE.sqrt() {
            return Err(GeomError::Degenerate);
        }
        let inv = 1.0 / s;
        let mul = |p: &Vec3| [p[0] * inv, p[1] * inv, p[2] * inv];
        let mut out = self.clone();
        out.coords_parental = self.coords_parental.iter().map(mul).collect();
        out.coords_replicated = self.coords_replicated.iter().map(mul).collect();
        out.scale = s;
        Ok(out)
    }

    /// Left-multiplies every bead coordinate by the rotation. Masks and scale
    /// are unchanged; all pairwise distances are preserved.
    pub fn apply_rotation(&self, r: &RotationMatrix) -> Conformation {
        let mut out = self.clone();
        out.coords_parental = self.coords_parental.iter().map(|p| r.apply(*p)).collect();
        out.coords_replicated = self
            .coords_replicated
            .iter()
            .map(|p| r.apply(*p))
            .collect();
        out
    }

    /// Packs the conformation into the per-bin row table: `bins` rows of
    /// `8 * beads_per_bin` values, per bead `[px, py, pz, 1, rx, ry, rz, rm]`.
    /// The table is row-major and lossless (plain `f64` copies).
    pub fn pack_rows(&self) -> Vec<f64> {
        let cols = ROW_COLS_PER_BEAD * self.beads_per_bin;
        let mut out = Vec::with_capacity(self.bins * cols);
        for bin in 0..self.bins {
            for k in 0..self.beads_per_bin {
                let i = bin * self.beads_per_bin + k;
                let p = self.coords_parental[i];
                let r = self.coords_replicated[i];
                out.extend_from_slice(&[p[0], p[1], p[2], 1.0]);
                out.extend_from_slice(&[r[0], r[1], r[2], f64::from(self.mask_replicated[i])]);
            }
        }
        out
    }

    /// Inverse of [`pack_rows`](Self::pack_rows). Rejects tables with the
    /// wrong number of values, non-binary mask entries, and parental-mask
    /// entries that are not exactly 1.
    pub fn unpack_rows(
        bins: usize,
        beads_per_bin: usize,
        table: &[f64],
    ) -> Result<Conformation, GeomError> {
        let expected = bins * beads_per_bin * ROW_COLS_PER_BEAD;
        if table.len() != expected {
            return Err(GeomError::BadTableShape {
                got: table.len(),
                expected,
            });
        }
        let n = bins * beads_per_bin;
        let mut coords_parental = Vec::with_capacity(n);
        let mut coords_replicated = Vec::with_capacity(n);
        let mut mask_replicated = Vec::with_capacity(n);
        for b in 0..n {
            let v = &table[b * ROW_COLS_PER_BEAD..(b + 1) * ROW_COLS_PER_BEAD];
            if v[3] != 0.0 && v[3] != 1.0 {
                return Err(GeomError::NonBinaryMask(v[3]));
            }
            if v[3] != 1.0 {
                return Err(GeomError::ParentalMaskZero);
            }
            if v[7] != 0.0 && v[7] != 1.0 {
                return Err(GeomError::NonBinaryMask(v[7]));
            }
            coords_parental.push([v[0], v[1], v[2]]);
            coords_replicated.push([v[4], v[5], v[6]]);
            mask_replicated.push(v[7] as u8);
        }
        Conformation::new(
            bins,
            beads_per_bin,
            coords_parental,
            coords_replicated,
            mask_replicated,
        )
    }
}

/// A proper rotation: orthonormal columns, determinant +1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix([[f64; 3]; 3]);

impl RotationMatrix {
    pub fn identity() -> Self {
        Self([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    /// Builds the rotation for a quaternion `(w, x, y, z)`; the quaternion is
    /// normalized internally.
    pub fn from_quaternion(q: [f64; 4]) -> Self {
        let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        let (w, x, y, z) = (q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm);
        Self([
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ])
    }

    /// Validates a raw 3x3 matrix: `max |R^T R - I| < 1e-9` and
    /// `det R = 1 +- 1e-9`.
    pub fn from_matrix(m: [[f64; 3]; 3]) -> Result<Self, GeomError> {
        let mut max_dev: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                max_dev = max_dev.max((dot - target).abs());
            }
        }
        if max_dev >= 1e-9 {
            return Err(GeomError::NotARotation(format!(
                "columns not orthonormal (max deviation {max_dev:.3e})"
            )));
        }
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        if (det - 1.0).abs() >= 1e-9 {
            return Err(GeomError::NotARotation(format!("det = {det}")));
        }
        Ok(Self(m))
    }

    pub fn transpose(&self) -> Self {
        let m = &self.0;
        Self([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn apply(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }

    pub fn as_array(&self) -> &[[f64; 3]; 3] {
        &self.0
    }
}

/// Draws a rotation uniformly from SO(3): four independent standard normals
/// normalized to a unit quaternion, then converted to a matrix. The
/// measure-zero zero quaternion is resampled.
pub fn sample_uniform_rotation<R: Rng + ?Sized>(rng: &mut R) -> RotationMatrix {
    loop {
        let q: [f64; 4] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let norm2 = q.iter().map(|v| v * v).sum::<f64>();
        if norm2 > 1e-24 {
            return RotationMatrix::from_quaternion(q);
        }
    }
}

/// A set of conformations sharing one condition; the source of one contact
/// map. Members must agree on bins and beads_per_bin.
#[derive(Debug, Clone)]
pub struct Ensemble {
    members: Vec<Conformation>,
    condition_id: String,
}

impl Ensemble {
    pub fn new(members: Vec<Conformation>, condition_id: impl Into<String>) -> Result<Self, GeomError> {
        let first = members.first().ok_or(GeomError::EmptyEnsemble)?;
        let (b, k) = (first.bins(), first.beads_per_bin());
        if members
            .iter()
            .any(|m| m.bins() != b || m.beads_per_bin() != k)
        {
            return Err(GeomError::MixedLayout);
        }
        Ok(Self {
            members,
            condition_id: condition_id.into(),
        })
    }

    pub fn members(&self) -> &[Conformation] {
        &self.members
    }

    pub fn condition_id(&self) -> &str {
        &self.condition_id
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn bins(&self) -> usize {
        self.members[0].bins()
    }

    pub fn beads_per_bin(&self) -> usize {
        self.members[0].beads_per_bin()
    }

    /// Mean of the members' stored scale factors.
    pub fn mean_scale(&self) -> f64 {
        self.members.iter().map(|m| m.scale()).sum::<f64>() / self.members.len() as f64
    }

    /// Same members under a different condition id.
    pub fn relabel(self, condition_id: impl Into<String>) -> Ensemble {
        Ensemble {
            members: self.members,
            condition_id: condition_id.into(),
        }
    }
}
