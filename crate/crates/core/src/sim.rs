//! Coarse-grained Langevin dynamics for a confined circular bead-spring
//! polymer with an optional replication branch and annealed pairwise
//! restraints.
//!
//! Energy terms (forces are the exact negative gradients):
//!
//! * bonds: `k_b * (|r| - r0)^2` along the parental ring, between consecutive
//!   valid replicated beads, and across replication-fork junctions (a valid
//!   replicated bead bonded to the parental bead across each mask boundary);
//! * excluded volume: WCA, `4*eps*((sigma/r)^12 - (sigma/r)^6) + eps` for
//!   `r < 2^(1/6)*sigma`, zero beyond, over all valid bead pairs;
//! * confinement: `k_w * max(0, |x| - half_extent)^2` per axis per bead;
//! * restraints: `w * k * (|r| - target)^2` between the first parental beads
//!   of the restrained bins, with anneal weight `w` decaying linearly to 0.
//!
//! Integration is overdamped Euler–Maruyama:
//! `x <- x + (dt/gamma) F + sqrt(2 kT dt / gamma) xi`. Only valid beads move.

use crate::geom::{Conformation, Ensemble, GeomError, Vec3};
use crate::hic::{circular_distance, HiCMap};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite coordinate on bead {bead}")]
    NonFinite { bead: usize },
    #[error(
        "instability: bead {bead} moved {displacement:.3e} (> sigma {sigma:.3e}) in one step; \
         reduce dt"
    )]
    Instability {
        bead: usize,
        displacement: f64,
        sigma: f64,
    },
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// Trajectory-level fault: carries the failing step and the snapshots
/// collected before the fault so a partial-output manifest can be written.
#[derive(Debug)]
pub struct TrajectoryFault {
    pub step: usize,
    pub error: SimError,
    pub partial: Vec<Conformation>,
}

impl std::fmt::Display for TrajectoryFault {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "trajectory fault at step {} ({} partial snapshots): {}",
            self.step,
            self.partial.len(),
            self.error
        )
    }
}

impl std::error::Error for TrajectoryFault {}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub n_bins: usize,
    pub beads_per_bin: usize,
    /// Replicated arc fraction `g` in [0, 1]; the chromosome copy number is
    /// `1 + g`.
    pub replication_fraction: f64,
    pub box_half_extents: [f64; 3],
    pub bond_rest_length: f64,
    pub bond_stiffness: f64,
    pub wca_sigma: f64,
    pub wca_epsilon: f64,
    pub wall_stiffness: f64,
    pub friction: f64,
    pub temperature: f64,
    pub dt: f64,
    pub steps: usize,
    pub sample_every: usize,
    pub restraint_anneal_steps: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_bins: 64,
            beads_per_bin: 2,
            replication_fraction: 0.0,
            box_half_extents: [24.0, 24.0, 48.0],
            bond_rest_length: 1.0,
            bond_stiffness: 100.0,
            wca_sigma: 1.0,
            wca_epsilon: 1.0,
            wall_stiffness: 50.0,
            friction: 1.0,
            temperature: 1.0,
            dt: 5e-4,
            steps: 50_000,
            sample_every: 500,
            restraint_anneal_steps: 10_000,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn beads_per_chain(&self) -> usize {
        self.n_bins * self.beads_per_bin
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            ("bond_rest_length", self.bond_rest_length),
            ("bond_stiffness", self.bond_stiffness),
            ("wca_sigma", self.wca_sigma),
            ("wca_epsilon", self.wca_epsilon),
            ("wall_stiffness", self.wall_stiffness),
            ("friction", self.friction),
            ("dt", self.dt),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(SimError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.temperature < 0.0 {
            return Err(SimError::Config("temperature must be >= 0".into()));
        }
        if self.box_half_extents.iter().any(|&h| !(h > 0.0)) {
            return Err(SimError::Config("box half extents must be positive".into()));
        }
        if self.beads_per_chain() < 3 {
            return Err(SimError::Config("need at least 3 beads per chain".into()));
        }
        if !(0.0..=1.0).contains(&self.replication_fraction) {
            return Err(SimError::Config(format!(
                "replication_fraction must be in [0,1], got {}",
                self.replication_fraction
            )));
        }
        if self.dt * self.friction >= 0.5 {
            return Err(SimError::Config(format!(
                "dt*friction = {} violates the stability guard (< 0.5)",
                self.dt * self.friction
            )));
        }
        if self.bond_rest_length >= 2.0 * self.wca_sigma * (2.0f64).powf(1.0 / 6.0) {
            return Err(SimError::Config(
                "bond_rest_length too large for the excluded-volume diameter".into(),
            ));
        }
        if self.sample_every == 0 || self.sample_every > self.steps {
            return Err(SimError::Config(
                "sample_every must be in 1..=steps".into(),
            ));
        }
        if self.restraint_anneal_steps + self.sample_every > self.steps {
            return Err(SimError::Config(
                "steps too small: no snapshot would be taken after annealing".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Restraint {
    pub bin_i: usize,
    pub bin_j: usize,
    pub target_distance: f64,
    pub stiffness: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RestraintSet {
    pub pairs: Vec<Restraint>,
}

impl RestraintSet {
    pub fn empty() -> Self {
        Self { pairs: Vec::new() }
    }

    pub fn validate(&self, n_bins: usize) -> Result<(), SimError> {
        for r in &self.pairs {
            if r.bin_i == r.bin_j {
                return Err(SimError::Config(format!(
                    "restraint on identical bins ({}, {})",
                    r.bin_i, r.bin_j
                )));
            }
            if r.bin_i >= n_bins || r.bin_j >= n_bins {
                return Err(SimError::Config(format!(
                    "restraint bin out of range ({}, {})",
                    r.bin_i, r.bin_j
                )));
            }
            if r.stiffness < 0.0 {
                return Err(SimError::Config("restraint stiffness must be >= 0".into()));
            }
        }
        Ok(())
    }
}

/// Turns the `top_k` strongest off-diagonal contacts (circular separation
/// greater than 2 bins, nonzero count) into harmonic restraints at the given
/// target distance and stiffness. Ties break by (i, j) lexicographic order;
/// if fewer candidate pairs exist than `top_k`, the set is clamped.
pub fn build_restraints(
    map: &HiCMap,
    top_k: usize,
    target_distance: f64,
    stiffness: f64,
) -> RestraintSet {
    let b = map.bins();
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..b {
        for j in (i + 1)..b {
            let d = circular_distance(i, j, b).expect("in range");
            if d > 2 && map.get(i, j) > 0.0 {
                candidates.push((map.get(i, j), i, j));
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("finite counts")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    RestraintSet {
        pairs: candidates
            .into_iter()
            .take(top_k)
            .map(|(_, i, j)| Restraint {
                bin_i: i,
                bin_j: j,
                target_distance,
                stiffness,
            })
            .collect(),
    }
}

/// WCA pair energy at separation `r`.
pub fn wca_energy(r: f64, sigma: f64, epsilon: f64) -> f64 {
    let cutoff = sigma * (2.0f64).powf(1.0 / 6.0);
    if r >= cutoff {
        return 0.0;
    }
    let sr6 = (sigma / r).powi(6);
    4.0 * epsilon * (sr6 * sr6 - sr6) + epsilon
}

/// Magnitude of the repulsive WCA force (dE/dr negated); zero at and beyond
/// the cutoff.
pub fn wca_force_magnitude(r: f64, sigma: f64, epsilon: f64) -> f64 {
    let cutoff = sigma * (2.0f64).powf(1.0 / 6.0);
    if r >= cutoff {
        return 0.0;
    }
    let sr6 = (sigma / r).powi(6);
    24.0 * epsilon * (2.0 * sr6 * sr6 - sr6) / r
}

/// Parental beads occupy global indices `0..n`, replicated beads `n..2n`.
fn positions_of(conf: &Conformation) -> Vec<Vec3> {
    let mut pos = conf.coords_parental().to_vec();
    pos.extend_from_slice(conf.coords_replicated());
    pos
}

fn active_indices(conf: &Conformation) -> Vec<usize> {
    let n = conf.beads_per_chain();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.extend((0..n).filter(|&i| conf.replicated_valid(i)).map(|i| n + i));
    idx
}

/// Bond topology implied by the replication mask: the parental ring,
/// consecutive valid replicated beads (closing into its own ring only when
/// fully replicated), and a fork-junction bond from the replicated bead on
/// each side of a mask boundary to the parental bead just across it.
fn bond_pairs(conf: &Conformation) -> Vec<(usize, usize)> {
    let n = conf.beads_per_chain();
    let mut bonds = Vec::with_capacity(2 * n);
    for i in 0..n {
        bonds.push((i, (i + 1) % n));
    }
    for i in 0..n {
        let j = (i + 1) % n;
        let vi = conf.replicated_valid(i);
        let vj = conf.replicated_valid(j);
        if vi && vj {
            if i + 1 < n || (0..n).all(|k| conf.replicated_valid(k)) {
                bonds.push((n + i, n + j));
            }
        } else if vi {
            bonds.push((n + i, j));
        } else if vj {
            bonds.push((n + j, i));
        }
    }
    bonds
}

fn dist(a: Vec3, b: Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Restraints act between the first parental beads of the two bins.
fn restraint_beads(r: &Restraint, beads_per_bin: usize) -> (usize, usize) {
    (r.bin_i * beads_per_bin, r.bin_j * beads_per_bin)
}

/// Total potential energy; the companion of [`compute_forces`] for
/// finite-difference verification and zero-temperature descent checks.
pub fn total_energy(
    conf: &Conformation,
    cfg: &SimConfig,
    restraints: &RestraintSet,
    anneal_weight: f64,
) -> f64 {
    let pos = positions_of(conf);
    let active = active_indices(conf);
    let mut e = 0.0;
    for (a, b) in bond_pairs(conf) {
        let d = dist(pos[a], pos[b]);
        e += cfg.bond_stiffness * (d - cfg.bond_rest_length).powi(2);
    }
    for (ai, &a) in active.iter().enumerate() {
        for &b in active.iter().skip(ai + 1) {
            e += wca_energy(dist(pos[a], pos[b]), cfg.wca_sigma, cfg.wca_epsilon);
        }
    }
    for &a in &active {
        for axis in 0..3 {
            let excess = pos[a][axis].abs() - cfg.box_half_extents[axis];
            if excess > 0.0 {
                e += cfg.wall_stiffness * excess * excess;
            }
        }
    }
    if anneal_weight > 0.0 {
        for r in &restraints.pairs {
            let (a, b) = restraint_beads(r, cfg.beads_per_bin);
            let d = dist(pos[a], pos[b]);
            e += anneal_weight * r.stiffness * (d - r.target_distance).powi(2);
        }
    }
    e
}

/// Forces on every bead (exact negative energy gradient). Indexing matches
/// [`positions_of`]: parental beads first, then replicated; entries for
/// invalid beads are zero.
pub fn compute_forces(
    conf: &Conformation,
    cfg: &SimConfig,
    restraints: &RestraintSet,
    anneal_weight: f64,
) -> Result<Vec<Vec3>, SimError> {
    let pos = positions_of(conf);
    for (i, p) in pos.iter().enumerate() {
        if !p.iter().all(|v| v.is_finite()) {
            return Err(SimError::NonFinite { bead: i });
        }
    }
    let active = active_indices(conf);
    let mut forces = vec![[0.0f64; 3]; pos.len()];

    let add_pair = |forces: &mut Vec<Vec3>, a: usize, b: usize, mag_over_r: f64| {
        // positive mag_over_r pushes a and b apart
        for axis in 0..3 {
            let d = pos[a][axis] - pos[b][axis];
            forces[a][axis] += mag_over_r * d;
            forces[b][axis] -= mag_over_r * d;
        }
    };

    for (a, b) in bond_pairs(conf) {
        let d = dist(pos[a], pos[b]);
        if d > 0.0 {
            let f = -2.0 * cfg.bond_stiffness * (d - cfg.bond_rest_length);
            add_pair(&mut forces, a, b, f / d);
        }
    }

    let cutoff2 = (cfg.wca_sigma * (2.0f64).powf(1.0 / 6.0)).powi(2);
    for (ai, &a) in active.iter().enumerate() {
        for &b in active.iter().skip(ai + 1) {
            let dx = pos[a][0] - pos[b][0];
            let dy = pos[a][1] - pos[b][1];
            let dz = pos[a][2] - pos[b][2];
            let d2 = dx * dx + dy * dy + dz * dz;
            if d2 >= cutoff2 || d2 == 0.0 {
                continue;
            }
            let d = d2.sqrt();
            let f = wca_force_magnitude(d, cfg.wca_sigma, cfg.wca_epsilon);
            forces[a][0] += f * dx / d;
            forces[a][1] += f * dy / d;
            forces[a][2] += f * dz / d;
            forces[b][0] -= f * dx / d;
            forces[b][1] -= f * dy / d;
            forces[b][2] -= f * dz / d;
        }
    }

    for &a in &active {
        for axis in 0..3 {
            let x = pos[a][axis];
            let excess = x.abs() - cfg.box_half_extents[axis];
            if excess > 0.0 {
                forces[a][axis] -= 2.0 * cfg.wall_stiffness * excess * x.signum();
            }
        }
    }

    if anneal_weight > 0.0 {
        for r in &restraints.pairs {
            let (a, b) = restraint_beads(r, cfg.beads_per_bin);
            let d = dist(pos[a], pos[b]);
            if d > 0.0 {
                let f = -2.0 * anneal_weight * r.stiffness * (d - r.target_distance);
                add_pair(&mut forces, a, b, f / d);
            }
        }
    }

    Ok(forces)
}

/// One overdamped Euler–Maruyama step. Only valid beads move; a per-step
/// displacement above `wca_sigma` is treated as an integration blow-up.
pub fn langevin_step<R: rand::Rng + ?Sized>(
    conf: &Conformation,
    cfg: &SimConfig,
    forces: &[Vec3],
    rng: &mut R,
) -> Result<Conformation, SimError> {
    let n = conf.beads_per_chain();
    let mobility = cfg.dt / cfg.friction;
    let noise = (2.0 * cfg.temperature * cfg.dt / cfg.friction).sqrt();
    let mut par = conf.coords_parental().to_vec();
    let mut rep = conf.coords_replicated().to_vec();
    let mut move_bead = |bead: usize, p: &mut Vec3| -> Result<(), SimError> {
        let mut disp2 = 0.0;
        let mut d = [0.0f64; 3];
        for axis in 0..3 {
            let xi: f64 = if noise > 0.0 {
                StandardNormal.sample(rng)
            } else {
                0.0
            };
            d[axis] = mobility * forces[bead][axis] + noise * xi;
            disp2 += d[axis] * d[axis];
        }
        if disp2 > cfg.wca_sigma * cfg.wca_sigma {
            return Err(SimError::Instability {
                bead,
                displacement: disp2.sqrt(),
                sigma: cfg.wca_sigma,
            });
        }
        for axis in 0..3 {
            p[axis] += d[axis];
        }
        Ok(())
    };
    for (i, p) in par.iter_mut().enumerate() {
        move_bead(i, p)?;
    }
    for i in 0..n {
        if conf.replicated_valid(i) {
            move_bead(n + i, &mut rep[i])?;
        }
    }
    let mut out = Conformation::new(
        conf.bins(),
        conf.beads_per_bin(),
        par,
        rep,
        conf.mask_replicated().to_vec(),
    )?;
    out.set_scale(conf.scale());
    Ok(out)
}

/// Initial state: the parental ring laid out on a circle of circumference
/// `n * r0` in the xy-plane, and, for `g > 0`, a replicated copy of the
/// contiguous arc of `ceil(g * n)` beads starting at bin 0. The arc is
/// lifted rigidly by one excluded-volume diameter out of the ring plane (so
/// it does not start inside its template) and each bead gets a small random
/// displacement. Coordinates of invalid replicated beads are zero.
pub fn init_conformation(cfg: &SimConfig) -> Result<Conformation, SimError> {
    cfg.validate()?;
    let n = cfg.beads_per_chain();
    let radius = n as f64 * cfg.bond_rest_length / (2.0 * std::f64::consts::PI);
    if radius > cfg.box_half_extents[0].min(cfg.box_half_extents[1]) {
        return Err(SimError::Config(format!(
            "initial circle radius {radius:.3} does not fit the box"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0);
    let par: Vec<Vec3> = (0..n)
        .map(|i| {
            let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            [radius * a.cos(), radius * a.sin(), 0.0]
        })
        .collect();
    let m = (cfg.replication_fraction * n as f64).ceil() as usize;
    let m = m.min(n);
    let arc_offset = [0.0, 0.0, cfg.wca_sigma];
    let jitter_sd = 0.02 * cfg.wca_sigma;
    let mut rep = vec![[0.0f64; 3]; n];
    let mut mask = vec![0u8; n];
    for i in 0..m {
        for axis in 0..3 {
            let z: f64 = StandardNormal.sample(&mut rng);
            rep[i][axis] = par[i][axis] + arc_offset[axis] + jitter_sd * z;
        }
        mask[i] = 1;
    }
    Ok(Conformation::new(
        cfg.n_bins,
        cfg.beads_per_bin,
        par,
        rep,
        mask,
    )?)
}

fn anneal_weight(step: usize, anneal_steps: usize) -> f64 {
    if anneal_steps == 0 {
        return 0.0;
    }
    (1.0 - step as f64 / anneal_steps as f64).max(0.0)
}

/// Runs one trajectory: restraints anneal linearly to zero over
/// `restraint_anneal_steps`, then unbiased dynamics; every `sample_every`
/// steps after annealing a centered (not normalized) snapshot is appended.
/// A fixed seed makes the trajectory bit-identical across runs.
pub fn run_trajectory(
    cfg: &SimConfig,
    restraints: &RestraintSet,
) -> Result<Ensemble, TrajectoryFault> {
    let fault = |step: usize, error: SimError, partial: &[Conformation]| TrajectoryFault {
        step,
        error,
        partial: partial.to_vec(),
    };
    let mut snapshots: Vec<Conformation> = Vec::new();
    cfg.validate().map_err(|e| fault(0, e, &snapshots))?;
    restraints
        .validate(cfg.n_bins)
        .map_err(|e| fault(0, e, &snapshots))?;
    let mut conf = init_conformation(cfg).map_err(|e| fault(0, e, &snapshots))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    for step in 1..=cfg.steps {
        let w = anneal_weight(step, cfg.restraint_anneal_steps);
        let forces =
            compute_forces(&conf, cfg, restraints, w).map_err(|e| fault(step, e, &snapshots))?;
        conf = langevin_step(&conf, cfg, &forces, &mut rng)
            .map_err(|e| fault(step, e, &snapshots))?;
        if step > cfg.restraint_anneal_steps
            && (step - cfg.restraint_anneal_steps) % cfg.sample_every == 0
        {
            let snap = conf.center().map_err(|e| {
                fault(step, SimError::Geom(e), &snapshots)
            })?;
            snapshots.push(snap);
        }
    }
    Ensemble::new(snapshots.clone(), format!("seed{}", cfg.seed))
        .map_err(|e| fault(cfg.steps, SimError::Geom(e), &snapshots))
}
