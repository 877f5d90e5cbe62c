//! Evaluation metrics for contact maps and conformational ensembles.
//!
//! Map similarity: stratum-adjusted correlation (strata are circular genomic
//! separations) and a naive full-matrix Pearson baseline. Ensemble diversity:
//! mean pairwise dRMSD with a Gaussian-perturbation reference and bond-length
//! normalization.

use crate::geom::{Conformation, Ensemble, Vec3};
use crate::hic::HiCMap;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("maps disagree on bin count ({0} vs {1})")]
    BinMismatch(usize, usize),
    #[error("all strata have zero variance; correlation undefined")]
    DegenerateStrata,
    #[error("zero variance; correlation undefined")]
    ZeroVariance,
    #[error("need at least 3 common valid beads, got {0}")]
    TooFewBeads(usize),
    #[error("ensemble must have at least 2 members")]
    SingletonEnsemble,
    #[error("invalid parameter: {0}")]
    BadParam(String),
}

/// Stratum range and smoothing for the stratum-adjusted correlation.
#[derive(Debug, Clone, Copy)]
pub struct SccConfig {
    pub smoothing_radius: usize,
    pub min_stratum: usize,
    pub max_stratum: usize,
}

impl SccConfig {
    /// Desk defaults for a `bins`-bin map: radius 1, strata `1..=bins/2`
    /// (the constant diagonal is excluded).
    pub fn for_bins(bins: usize) -> Self {
        Self {
            smoothing_radius: 1,
            min_stratum: 1,
            max_stratum: bins / 2,
        }
    }

    fn validate(&self, bins: usize) -> Result<(), MetricError> {
        if self.min_stratum > self.max_stratum || self.max_stratum > bins / 2 {
            return Err(MetricError::BadParam(format!(
                "stratum range {}..={} invalid for {} bins",
                self.min_stratum, self.max_stratum, bins
            )));
        }
        Ok(())
    }
}

/// Replaces each entry by the mean of its `(2h+1) x (2h+1)` window with
/// wrap-around index arithmetic on both axes. `h = 0` is the identity.
/// Symmetry is preserved exactly (the lower triangle is mirrored).
pub fn smooth_map(map: &HiCMap, h: usize) -> HiCMap {
    if h == 0 {
        return map.clone();
    }
    let b = map.bins();
    let size = (2 * h + 1) * (2 * h + 1);
    let mut out = vec![0.0f64; b * b];
    for i in 0..b {
        for j in i..b {
            let mut sum = 0.0;
            for di in 0..=2 * h {
                let ii = (i + b + di - h) % b;
                for dj in 0..=2 * h {
                    let jj = (j + b + dj - h) % b;
                    sum += map.get(ii, jj);
                }
            }
            let v = sum / size as f64;
            out[i * b + j] = v;
            out[j * b + i] = v;
        }
    }
    HiCMap::new(b, out, map.contact_threshold()).expect("smoothing preserves validity")
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys.iter()) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt()
}

/// Unordered bin pairs at circular separation `s` (each pair listed once).
fn stratum_pairs(bins: usize, s: usize) -> Vec<(usize, usize)> {
    if s == 0 {
        return (0..bins).map(|i| (i, i)).collect();
    }
    let limit = if 2 * s == bins { bins / 2 } else { bins };
    (0..limit).map(|i| (i, (i + s) % bins)).collect()
}

/// Stratum-adjusted correlation: both maps are smoothed, then per-stratum
/// Pearson correlations are combined with weights `n_s * sigma_a * sigma_b`.
/// Zero-variance strata are skipped; an error is returned only when every
/// stratum is degenerate.
pub fn scc(a: &HiCMap, b: &HiCMap, cfg: &SccConfig) -> Result<f64, MetricError> {
    if a.bins() != b.bins() {
        return Err(MetricError::BinMismatch(a.bins(), b.bins()));
    }
    cfg.validate(a.bins())?;
    let sa = smooth_map(a, cfg.smoothing_radius);
    let sb = smooth_map(b, cfg.smoothing_radius);
    let mut num = 0.0;
    let mut den = 0.0;
    for s in cfg.min_stratum..=cfg.max_stratum {
        let pairs = stratum_pairs(a.bins(), s);
        let xs: Vec<f64> = pairs.iter().map(|&(i, j)| sa.get(i, j)).collect();
        let ys: Vec<f64> = pairs.iter().map(|&(i, j)| sb.get(i, j)).collect();
        let Some(rho) = pearson(&xs, &ys) else {
            continue;
        };
        let w = pairs.len() as f64 * population_std(&xs) * population_std(&ys);
        num += w * rho;
        den += w;
    }
    if den == 0.0 {
        return Err(MetricError::DegenerateStrata);
    }
    Ok(num / den)
}

/// Naive Pearson over all off-diagonal entries.
pub fn pcc_full(a: &HiCMap, b: &HiCMap) -> Result<f64, MetricError> {
    if a.bins() != b.bins() {
        return Err(MetricError::BinMismatch(a.bins(), b.bins()));
    }
    let n = a.bins();
    let mut xs = Vec::with_capacity(n * (n - 1));
    let mut ys = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                xs.push(a.get(i, j));
                ys.push(b.get(i, j));
            }
        }
    }
    pearson(&xs, &ys).ok_or(MetricError::ZeroVariance)
}

/// Beads valid in both conformations: every parental bead, then replicated
/// beads masked in both. Order is deterministic (parental block first).
fn common_beads(a: &Conformation, b: &Conformation) -> Vec<(Vec3, Vec3)> {
    let mut out = Vec::new();
    for (pa, pb) in a.coords_parental().iter().zip(b.coords_parental().iter()) {
        out.push((*pa, *pb));
    }
    for i in 0..a.beads_per_chain() {
        if a.replicated_valid(i) && b.replicated_valid(i) {
            out.push((a.coords_replicated()[i], b.coords_replicated()[i]));
        }
    }
    out
}

fn dist(p: Vec3, q: Vec3) -> f64 {
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
}

fn drmsd_with_prefactor(
    a: &Conformation,
    b: &Conformation,
    prefactor: impl Fn(f64) -> f64,
) -> Result<f64, MetricError> {
    let beads = common_beads(a, b);
    let l = beads.len();
    if l < 3 {
        return Err(MetricError::TooFewBeads(l));
    }
    let mut sum = 0.0;
    for i in 0..l {
        for j in (i + 1)..l {
            let da = dist(beads[i].0, beads[j].0);
            let db = dist(beads[i].1, beads[j].1);
            sum += (da - db) * (da - db);
        }
    }
    Ok((prefactor(l as f64) * sum).sqrt())
}

/// Distance-RMSD between two conformations over their common valid beads:
/// `sqrt( 2/(L(L-2)) * sum_{i<j} (D_a(i,j) - D_b(i,j))^2 )`.
///
/// Invariant to global rigid motions; 0 for identical geometry. Requires at
/// least 3 common beads. See [`drmsd_pair_mean`] for the variant normalized
/// by the exact unordered-pair count.
pub fn drmsd(a: &Conformation, b: &Conformation) -> Result<f64, MetricError> {
    drmsd_with_prefactor(a, b, |l| 2.0 / (l * (l - 2.0)))
}

/// dRMSD normalized by the exact number of unordered pairs,
/// `2/(L(L-1))`, for sensitivity analysis against [`drmsd`].
pub fn drmsd_pair_mean(a: &Conformation, b: &Conformation) -> Result<f64, MetricError> {
    drmsd_with_prefactor(a, b, |l| 2.0 / (l * (l - 1.0)))
}

/// Mean dRMSD over all unordered member pairs.
pub fn mean_pairwise_drmsd(ens: &Ensemble) -> Result<f64, MetricError> {
    let n = ens.len();
    if n < 2 {
        return Err(MetricError::SingletonEnsemble);
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            sum += drmsd(&ens.members()[i], &ens.members()[j])?;
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

/// Mean distance between consecutive valid beads along each chain, averaged
/// over members. The parental ring always contributes its circular closure;
/// the replicated chain contributes bonds between consecutive masked beads
/// and closes the ring only when fully replicated.
pub fn mean_bond_length(ens: &Ensemble) -> f64 {
    let mut member_means = Vec::with_capacity(ens.len());
    for conf in ens.members() {
        let n = conf.beads_per_chain();
        let mut total = 0.0;
        let mut bonds = 0usize;
        let par = conf.coords_parental();
        for i in 0..n {
            total += dist(par[i], par[(i + 1) % n]);
            bonds += 1;
        }
        let rep = conf.coords_replicated();
        let fully = (0..n).all(|i| conf.replicated_valid(i));
        for i in 0..n {
            let j = (i + 1) % n;
            if i + 1 == n && !fully {
                continue;
            }
            if conf.replicated_valid(i) && conf.replicated_valid(j) {
                total += dist(rep[i], rep[j]);
                bonds += 1;
            }
        }
        if bonds > 0 {
            member_means.push(total / bonds as f64);
        }
    }
    member_means.iter().sum::<f64>() / member_means.len() as f64
}

/// Diversity summary: mean pairwise dRMSD, mean bond length of the same
/// ensemble, and their ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiversityReport {
    pub mean_pairwise_drmsd: f64,
    pub mean_bond_length: f64,
    pub ratio: f64,
}

impl DiversityReport {
    pub fn from_ensemble(ens: &Ensemble) -> Result<Self, MetricError> {
        let d = mean_pairwise_drmsd(ens)?;
        let b = mean_bond_length(ens);
        Ok(Self {
            mean_pairwise_drmsd: d,
            mean_bond_length: b,
            ratio: d / b,
        })
    }
}

/// Reference diversity from minor deformations: `count` copies of `conf`
/// with i.i.d. `N(0, sigma^2)` noise on each valid bead coordinate.
pub fn perturbation_baseline<R: Rng + ?Sized>(
    conf: &Conformation,
    sigma: f64,
    count: usize,
    rng: &mut R,
) -> Result<DiversityReport, MetricError> {
    if sigma <= 0.0 {
        return Err(MetricError::BadParam(format!("sigma = {sigma}")));
    }
    if count < 2 {
        return Err(MetricError::BadParam(format!("count = {count}")));
    }
    let n = conf.beads_per_chain();
    let mut members = Vec::with_capacity(count);
    for _ in 0..count {
        let mut par = conf.coords_parental().to_vec();
        let mut rep = conf.coords_replicated().to_vec();
        for p in par.iter_mut().take(n) {
            for a in 0..3 {
                let z: f64 = StandardNormal.sample(rng);
                p[a] += sigma * z;
            }
        }
        for (i, r) in rep.iter_mut().enumerate().take(n) {
            if conf.replicated_valid(i) {
                for a in 0..3 {
                    let z: f64 = StandardNormal.sample(rng);
                    r[a] += sigma * z;
                }
            }
        }
        let mut c = Conformation::new(
            conf.bins(),
            conf.beads_per_bin(),
            par,
            rep,
            conf.mask_replicated().to_vec(),
        )
        .expect("layout preserved");
        c.set_scale(conf.scale());
        members.push(c);
    }
    let ens = Ensemble::new(members, "perturbation-baseline").expect("uniform layout");
    DiversityReport::from_ensemble(&ens)
}
