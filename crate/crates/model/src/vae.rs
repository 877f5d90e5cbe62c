//! Length-preserving residual-convolutional variational autoencoder.
//!
//! The encoder maps the packed per-bin rows (`[B, 8*K]`, coordinates plus
//! replication masks) through a stack of stride-1 residual conv blocks to
//! per-bin latent mean and log-variance; the decoder mirrors it back to
//! coordinate channels (unbounded) and mask channels (logits). Bin/token
//! alignment is exact: `B` rows in, `B` tokens out, `B` rows back.
//!
//! Replicated coordinates at mask-0 positions are zeroed before entering the
//! encoder and carry zero weight in the coordinate loss, so they influence
//! nothing.

use crate::nn::Conv1d;
use crate::{ModelError, LN_EPS};
use chromoforge_core::geom::{Conformation, ROW_COLS_PER_BEAD};
use chromoforge_tensor::{concat_cols, Binding, ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone)]
pub struct VaeConfig {
    pub beads_per_bin: usize,
    pub hidden: usize,
    pub latent_channels: usize,
    pub n_res_blocks: usize,
    pub lambda_mask: f64,
    pub lambda_kl: f64,
}

impl VaeConfig {
    /// Desk-scale defaults; the row layout fixes `in_channels = 8 * K`.
    pub fn desk_default() -> Self {
        Self {
            beads_per_bin: 2,
            hidden: 32,
            latent_channels: 8,
            n_res_blocks: 4,
            lambda_mask: 1.0,
            lambda_kl: 5e-3,
        }
    }

    pub fn in_channels(&self) -> usize {
        ROW_COLS_PER_BEAD * self.beads_per_bin
    }

    pub fn validate(&self) {
        assert!(self.beads_per_bin >= 1, "beads_per_bin must be >= 1");
        assert!(
            self.hidden >= 1 && self.latent_channels >= 1 && self.n_res_blocks >= 1,
            "all VAE dimensions must be >= 1"
        );
        assert!(
            self.lambda_mask >= 0.0 && self.lambda_kl >= 0.0,
            "loss weights must be >= 0"
        );
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv_a: Conv1d,
    conv_b: Conv1d,
}

impl ResBlock {
    fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, hidden: usize, rng: &mut R) -> Self {
        Self {
            conv_a: Conv1d::xavier(ps, &format!("{name}.a"), hidden, hidden, 3, rng),
            conv_b: Conv1d::xavier(ps, &format!("{name}.b"), hidden, hidden, 3, rng),
        }
    }

    fn forward(&self, bind: &Binding, x: &Tensor) -> Tensor {
        let h = x.layer_norm(LN_EPS);
        let h = self.conv_a.forward(bind, &h).gelu();
        let h = self.conv_b.forward(bind, &h);
        x.add(&h)
    }
}

#[derive(Debug, Clone)]
pub struct Vae {
    pub cfg: VaeConfig,
    pub params: ParamSet,
    enc_stem: Conv1d,
    enc_blocks: Vec<ResBlock>,
    enc_head: Conv1d,
    dec_stem: Conv1d,
    dec_blocks: Vec<ResBlock>,
    dec_head: Conv1d,
}

impl Vae {
    pub fn new(cfg: VaeConfig, seed: u64) -> Self {
        cfg.validate();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let ch = cfg.in_channels();
        let enc_stem = Conv1d::xavier(&mut ps, "enc.stem", ch, cfg.hidden, 3, &mut rng);
        let enc_blocks = (0..cfg.n_res_blocks)
            .map(|i| ResBlock::new(&mut ps, &format!("enc.block{i}"), cfg.hidden, &mut rng))
            .collect();
        let enc_head = Conv1d::xavier(
            &mut ps,
            "enc.head",
            cfg.hidden,
            2 * cfg.latent_channels,
            3,
            &mut rng,
        );
        let dec_stem = Conv1d::xavier(
            &mut ps,
            "dec.stem",
            cfg.latent_channels,
            cfg.hidden,
            3,
            &mut rng,
        );
        let dec_blocks = (0..cfg.n_res_blocks)
            .map(|i| ResBlock::new(&mut ps, &format!("dec.block{i}"), cfg.hidden, &mut rng))
            .collect();
        let dec_head = Conv1d::xavier(&mut ps, "dec.head", cfg.hidden, ch, 3, &mut rng);
        Self {
            cfg,
            params: ps,
            enc_stem,
            enc_blocks,
            enc_head,
            dec_stem,
            dec_blocks,
            dec_head,
        }
    }

    /// Rebuilds the model around parameters loaded from a checkpoint; the
    /// layer wiring is reconstructed with the same naming scheme, then the
    /// parameter values are replaced wholesale.
    pub fn from_params(cfg: VaeConfig, params: ParamSet) -> Self {
        let mut model = Vae::new(cfg, 0);
        assert_eq!(
            model.params.len(),
            params.len(),
            "checkpoint has {} parameters, model expects {}",
            params.len(),
            model.params.len()
        );
        for (a, b) in model.params.entries().iter().zip(params.entries()) {
            assert_eq!(a.name, b.name, "parameter order mismatch");
            assert_eq!(a.shape, b.shape, "parameter {} shape mismatch", a.name);
        }
        model.params = params;
        model
    }

    /// Packs a normalized conformation into the encoder input rows, gating
    /// replicated coordinates by their mask so invalid positions contribute
    /// nothing. Rejects conformations whose valid-bead mean norm deviates
    /// from 1 by more than 1e-3.
    pub fn input_rows(&self, conf: &Conformation) -> Result<Tensor, ModelError> {
        let norm = conf.mean_masked_norm();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(ModelError::NotNormalized(norm));
        }
        Ok(self.input_rows_unchecked(conf))
    }

    /// Same packing without the normalization precondition (loss targets).
    pub fn input_rows_unchecked(&self, conf: &Conformation) -> Tensor {
        let k = self.cfg.beads_per_bin;
        assert_eq!(
            conf.beads_per_bin(),
            k,
            "conformation has {} beads per bin, model expects {k}",
            conf.beads_per_bin()
        );
        let mut table = conf.pack_rows();
        let cols = ROW_COLS_PER_BEAD * k;
        for bin in 0..conf.bins() {
            for bead in 0..k {
                let i = bin * k + bead;
                if !conf.replicated_valid(i) {
                    let base = bin * cols + bead * ROW_COLS_PER_BEAD;
                    table[base + 4] = 0.0;
                    table[base + 5] = 0.0;
                    table[base + 6] = 0.0;
                }
            }
        }
        Tensor::leaf(vec![conf.bins(), cols], table)
    }

    /// Per-bin latent mean and log-variance, `[B, latent]` each.
    pub fn encode(&self, bind: &Binding, rows: &Tensor) -> (Tensor, Tensor) {
        let mut h = self.enc_stem.forward(bind, rows);
        for b in &self.enc_blocks {
            h = b.forward(bind, &h);
        }
        let out = self.enc_head.forward(bind, &h);
        let l = self.cfg.latent_channels;
        (out.slice_cols(0, l), out.slice_cols(l, 2 * l))
    }

    /// Decodes latent tokens back to rows: coordinate channels unbounded,
    /// mask channels as logits.
    pub fn decode(&self, bind: &Binding, z: &Tensor) -> Tensor {
        let mut h = self.dec_stem.forward(bind, z);
        for b in &self.dec_blocks {
            h = b.forward(bind, &h);
        }
        self.dec_head.forward(bind, &h)
    }

    /// Thresholds decoded rows into a conformation: replicated mask at
    /// sigmoid > 0.5, parental chain always present, replicated coordinates
    /// zeroed where the mask came out 0.
    pub fn decoded_to_conformation(&self, decoded: &Tensor) -> Conformation {
        let k = self.cfg.beads_per_bin;
        let cols = ROW_COLS_PER_BEAD * k;
        let bins = decoded.shape()[0];
        let v = decoded.values();
        let n = bins * k;
        let mut par = vec![[0.0f64; 3]; n];
        let mut rep = vec![[0.0f64; 3]; n];
        let mut mask = vec![0u8; n];
        for bin in 0..bins {
            for bead in 0..k {
                let i = bin * k + bead;
                let base = bin * cols + bead * ROW_COLS_PER_BEAD;
                par[i] = [v[base], v[base + 1], v[base + 2]];
                let on = v[base + 7] > 0.0; // sigmoid(logit) > 0.5
                mask[i] = u8::from(on);
                if on {
                    rep[i] = [v[base + 4], v[base + 5], v[base + 6]];
                }
            }
        }
        Conformation::new(bins, k, par, rep, mask).expect("decoded layout is consistent")
    }
}

/// `z = mean + exp(logvar / 2) * xi`, `xi ~ N(0, 1)`; gradients flow to both
/// mean and log-variance.
pub fn reparameterize<R: Rng + ?Sized>(mean: &Tensor, logvar: &Tensor, rng: &mut R) -> Tensor {
    let xi: Vec<f64> = (0..mean.len())
        .map(|_| StandardNormal.sample(rng))
        .collect();
    let noise = Tensor::leaf(mean.shape().to_vec(), xi);
    mean.add(&logvar.scale(0.5).exp().mul(&noise))
}

/// Loss parts: the total is a graph scalar for backward; the components are
/// plain numbers for logging.
pub struct VaeLoss {
    pub total: Tensor,
    pub coord: f64,
    pub mask: f64,
    pub kl: f64,
}

/// Masked coordinate MSE (averaged over valid coordinate slots only), mask
/// BCE over all positions, and the standard Gaussian KL averaged per
/// component: `total = coord + lambda_mask * mask + lambda_kl * kl`.
pub fn vae_loss(
    cfg: &VaeConfig,
    conf: &Conformation,
    decoded: &Tensor,
    mean: &Tensor,
    logvar: &Tensor,
) -> VaeLoss {
    let k = cfg.beads_per_bin;
    let cols = ROW_COLS_PER_BEAD * k;
    let bins = conf.bins();
    assert_eq!(
        decoded.shape(),
        &[bins, cols],
        "decoded shape {:?} vs expected [{bins}, {cols}]",
        decoded.shape()
    );

    // constant target rows with gated replicated coords
    let mut target = conf.pack_rows();
    let mut weight = vec![0.0f64; bins * cols];
    let mut active = 0.0f64;
    for bin in 0..bins {
        for bead in 0..k {
            let i = bin * k + bead;
            let base = bin * cols + bead * ROW_COLS_PER_BEAD;
            for a in 0..3 {
                weight[base + a] = 1.0;
            }
            active += 3.0;
            if conf.replicated_valid(i) {
                for a in 4..7 {
                    weight[base + a] = 1.0;
                }
                active += 3.0;
            } else {
                target[base + 4] = 0.0;
                target[base + 5] = 0.0;
                target[base + 6] = 0.0;
            }
        }
    }
    let target_t = Tensor::leaf(vec![bins, cols], target);
    let weight_t = Tensor::leaf(vec![bins, cols], weight);
    let diff = decoded.sub(&target_t);
    let coord = diff
        .mul(&diff)
        .mul(&weight_t)
        .sum_all()
        .scale(1.0 / active);

    // mask logits live in columns 3 and 7 of each bead block
    let mut logit_slices = Vec::with_capacity(2 * k);
    let mut mask_targets = Vec::with_capacity(bins * 2 * k);
    for bead in 0..k {
        let base = bead * ROW_COLS_PER_BEAD;
        logit_slices.push(decoded.slice_cols(base + 3, base + 4));
        logit_slices.push(decoded.slice_cols(base + 7, base + 8));
    }
    for bin in 0..bins {
        for bead in 0..k {
            let i = bin * k + bead;
            mask_targets.push(1.0);
            mask_targets.push(f64::from(conf.mask_replicated()[i]));
        }
    }
    let logit_refs: Vec<&Tensor> = logit_slices.iter().collect();
    let logits = concat_cols(&logit_refs);
    let targets = Tensor::leaf(vec![bins, 2 * k], mask_targets);
    let mask = logits.bce_with_logits(&targets).mean_all();

    let kl = logvar
        .add_scalar(1.0)
        .sub(&mean.mul(mean))
        .sub(&logvar.exp())
        .mean_all()
        .scale(-0.5);

    let total = coord
        .add(&mask.scale(cfg.lambda_mask))
        .add(&kl.scale(cfg.lambda_kl));
    VaeLoss {
        coord: coord.values()[0],
        mask: mask.values()[0],
        kl: kl.values()[0],
        total,
    }
}

/// Reciprocal of the population standard deviation of all latent-mean
/// components over the given conformations; multiplying latents by the
/// returned scale gives unit component spread.
pub fn calibrate_latent_scale(
    vae: &Vae,
    bind: &Binding,
    confs: &[Conformation],
) -> Result<f64, ModelError> {
    let mut all = Vec::new();
    for conf in confs {
        let rows = vae.input_rows(conf)?;
        let (mean, _) = vae.encode(bind, &rows);
        all.extend_from_slice(mean.values());
    }
    if all.is_empty() {
        return Err(ModelError::DegenerateLatents);
    }
    let n = all.len() as f64;
    let mu = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= 0.0 {
        return Err(ModelError::DegenerateLatents);
    }
    Ok(1.0 / std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chromoforge_tensor::adam::{Adam, AdamConfig};

    fn ring_conformation(bins: usize, k: usize, g: f64, seed: u64) -> Conformation {
        let n = bins * k;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = (g * n as f64).ceil() as usize;
        let mut par = Vec::with_capacity(n);
        for i in 0..n {
            let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            let jitter: f64 = StandardNormal.sample(&mut rng);
            par.push([a.cos() + 0.05 * jitter, a.sin(), 0.1 * (a * 3.0).sin()]);
        }
        let mut rep = vec![[0.0f64; 3]; n];
        let mut mask = vec![0u8; n];
        for i in 0..m {
            let z: f64 = StandardNormal.sample(&mut rng);
            rep[i] = [par[i][0] + 0.05 * z, par[i][1], par[i][2] + 0.1];
            mask[i] = 1;
        }
        let conf = Conformation::new(bins, k, par, rep, mask).unwrap();
        conf.center().unwrap().scale_normalize().unwrap()
    }

    #[test]
    fn encode_token_count_matches_bins_for_any_b() {
        let vae = Vae::new(VaeConfig::desk_default(), 1);
        let bind = vae.params.bind(false);
        for bins in [4usize, 9, 17] {
            let conf = ring_conformation(bins, 2, 0.5, bins as u64);
            let rows = vae.input_rows(&conf).unwrap();
            let (mean, logvar) = vae.encode(&bind, &rows);
            assert_eq!(mean.shape(), &[bins, 8]);
            assert_eq!(logvar.shape(), &[bins, 8]);
            let decoded = vae.decode(&bind, &mean);
            assert_eq!(decoded.shape(), &[bins, 16]);
        }
    }

    #[test]
    fn encode_rejects_unnormalized_input() {
        let vae = Vae::new(VaeConfig::desk_default(), 1);
        let conf = ring_conformation(6, 2, 0.0, 3);
        // scale it away from unit mean norm
        let wrong = Conformation::new(
            6,
            2,
            conf.coords_parental().iter().map(|p| [2.0 * p[0], 2.0 * p[1], 2.0 * p[2]]).collect(),
            conf.coords_replicated().to_vec(),
            conf.mask_replicated().to_vec(),
        )
        .unwrap();
        assert!(matches!(
            vae.input_rows(&wrong),
            Err(ModelError::NotNormalized(_))
        ));
    }

    #[test]
    fn receptive_field_is_local() {
        let cfg = VaeConfig {
            n_res_blocks: 2,
            ..VaeConfig::desk_default()
        };
        let vae = Vae::new(cfg, 2);
        let bind = vae.params.bind(false);
        let bins = 32;
        let conf = ring_conformation(bins, 2, 0.4, 9);
        let rows_a = vae.input_rows(&conf).unwrap();
        // perturb bin 20 only
        let mut table = rows_a.values().to_vec();
        for c in 0..16 {
            table[20 * 16 + c] += 0.37;
        }
        let rows_b = Tensor::leaf(vec![bins, 16], table);
        let (ma, _) = vae.encode(&bind, &rows_a);
        let (mb, _) = vae.encode(&bind, &rows_b);
        // radius: stem(1) + 2 blocks * 2 convs + head(1) = 6
        let radius = 6usize;
        for bin in 0..bins {
            let same = ma.values()[bin * 8..(bin + 1) * 8]
                == mb.values()[bin * 8..(bin + 1) * 8];
            if bin.abs_diff(20) > radius {
                assert!(same, "bin {bin} outside receptive field changed");
            }
        }
        // and the perturbed bin itself definitely changed
        assert_ne!(
            ma.values()[20 * 8..21 * 8].to_vec(),
            mb.values()[20 * 8..21 * 8].to_vec()
        );
    }

    #[test]
    fn reparameterize_collapses_to_mean_at_tiny_variance() {
        let mean = Tensor::leaf(vec![3, 2], vec![0.5; 6]);
        let logvar = Tensor::leaf(vec![3, 2], vec![-800.0; 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = reparameterize(&mean, &logvar, &mut rng);
        for (a, b) in z.values().iter().zip(mean.values()) {
            assert!((a - b).abs() < 1e-100);
        }
    }

    #[test]
    fn reparameterize_sample_mean_approaches_mean() {
        let mean = Tensor::leaf(vec![1, 2], vec![1.5, -0.5]);
        let logvar = Tensor::leaf(vec![1, 2], vec![0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let mut acc = [0.0f64; 2];
        for _ in 0..n {
            let z = reparameterize(&mean, &logvar, &mut rng);
            acc[0] += z.values()[0];
            acc[1] += z.values()[1];
        }
        // 3 sigma / sqrt(n) with sigma = 1
        let tol = 3.0 / (n as f64).sqrt();
        assert!((acc[0] / n as f64 - 1.5).abs() < tol);
        assert!((acc[1] / n as f64 + 0.5).abs() < tol);
    }

    #[test]
    fn reparameterize_gradients_reach_mean_and_logvar() {
        let mean = Tensor::leaf_grad(vec![2, 2], vec![0.3, -0.2, 0.8, 0.1]);
        let logvar = Tensor::leaf_grad(vec![2, 2], vec![-0.5, 0.2, 0.0, -1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = reparameterize(&mean, &logvar, &mut rng);
        z.mul(&z).sum_all().backward();
        assert!(mean.grad().iter().any(|&g| g != 0.0));
        assert!(logvar.grad().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn decoded_mask_probabilities_lie_in_unit_interval() {
        let vae = Vae::new(VaeConfig::desk_default(), 7);
        let bind = vae.params.bind(false);
        let z = Tensor::leaf(vec![5, 8], (0..40).map(|i| (i as f64 * 0.7).sin()).collect());
        let decoded = vae.decode(&bind, &z);
        for bead in 0..2 {
            for bin in 0..5 {
                for col in [3usize, 7] {
                    let logit = decoded.values()[bin * 16 + bead * 8 + col];
                    let p = 1.0 / (1.0 + (-logit).exp());
                    assert!(p > 0.0 && p < 1.0);
                }
            }
        }
    }

    #[test]
    fn loss_is_zero_for_perfect_reconstruction() {
        let cfg = VaeConfig::desk_default();
        let conf = ring_conformation(6, 2, 0.5, 8);
        // perfect coords, saturated mask logits, mean 0, logvar 0
        let mut decoded = conf.pack_rows();
        for bin in 0..6 {
            for bead in 0..2 {
                let i = bin * 2 + bead;
                let base = bin * 16 + bead * 8;
                if !conf.replicated_valid(i) {
                    decoded[base + 4] = 0.0;
                    decoded[base + 5] = 0.0;
                    decoded[base + 6] = 0.0;
                }
                decoded[base + 3] = 40.0;
                decoded[base + 7] = if conf.replicated_valid(i) { 40.0 } else { -40.0 };
            }
        }
        let decoded = Tensor::leaf(vec![6, 16], decoded);
        let mean = Tensor::leaf(vec![6, 8], vec![0.0; 48]);
        let logvar = Tensor::leaf(vec![6, 8], vec![0.0; 48]);
        let loss = vae_loss(&cfg, &conf, &decoded, &mean, &logvar);
        assert_eq!(loss.coord, 0.0);
        assert_eq!(loss.kl, 0.0);
        assert!(loss.mask < 1e-12);
        assert!(loss.total.values()[0] < 1e-12);
    }

    #[test]
    fn coord_loss_gradient_is_exactly_zero_at_masked_out_positions() {
        let cfg = VaeConfig::desk_default();
        let conf = ring_conformation(6, 2, 0.5, 9);
        let decoded = Tensor::leaf_grad(
            vec![6, 16],
            (0..96).map(|i| (i as f64 * 0.13).sin()).collect(),
        );
        let mean = Tensor::leaf(vec![6, 8], vec![0.0; 48]);
        let logvar = Tensor::leaf(vec![6, 8], vec![0.0; 48]);
        // isolate the coordinate term: lambda_mask = lambda_kl = 0
        let cfg0 = VaeConfig {
            lambda_mask: 0.0,
            lambda_kl: 0.0,
            ..cfg
        };
        let loss = vae_loss(&cfg0, &conf, &decoded, &mean, &logvar);
        loss.total.backward();
        let grad = decoded.grad();
        for bin in 0..6 {
            for bead in 0..2 {
                let i = bin * 2 + bead;
                let base = bin * 16 + bead * 8;
                if !conf.replicated_valid(i) {
                    for a in 4..7 {
                        assert_eq!(grad[base + a], 0.0, "grad at masked-out coord");
                    }
                }
                // mask-logit columns carry no coordinate gradient either
                assert_eq!(grad[base + 3], 0.0);
                assert_eq!(grad[base + 7], 0.0);
            }
        }
    }

    #[test]
    fn perturbing_masked_out_coordinates_changes_no_loss_part() {
        let cfg = VaeConfig::desk_default();
        let vae = Vae::new(cfg.clone(), 10);
        let bind = vae.params.bind(false);
        let conf = ring_conformation(8, 2, 0.5, 11);
        let mut perturbed_rep = conf.coords_replicated().to_vec();
        for i in 0..conf.beads_per_chain() {
            if !conf.replicated_valid(i) {
                perturbed_rep[i] = [99.0, -42.0, 7.0];
            }
        }
        let perturbed = Conformation::new(
            8,
            2,
            conf.coords_parental().to_vec(),
            perturbed_rep,
            conf.mask_replicated().to_vec(),
        )
        .unwrap();
        let run = |c: &Conformation| {
            let rows = vae.input_rows(c).unwrap();
            let (mean, logvar) = vae.encode(&bind, &rows);
            let decoded = vae.decode(&bind, &mean);
            let loss = vae_loss(&cfg, c, &decoded, &mean, &logvar);
            (loss.total.values()[0], loss.coord, loss.mask, loss.kl)
        };
        assert_eq!(run(&conf), run(&perturbed));
    }

    #[test]
    fn loss_matches_straight_line_oracle() {
        let cfg = VaeConfig {
            lambda_mask: 0.7,
            lambda_kl: 0.01,
            ..VaeConfig::desk_default()
        };
        let conf = ring_conformation(5, 2, 0.3, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let rand_vals = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        let decoded_v = rand_vals(80, &mut rng);
        let mean_v = rand_vals(40, &mut rng);
        let logvar_v = rand_vals(40, &mut rng);
        let decoded = Tensor::leaf(vec![5, 16], decoded_v.clone());
        let mean = Tensor::leaf(vec![5, 8], mean_v.clone());
        let logvar = Tensor::leaf(vec![5, 8], logvar_v.clone());
        let loss = vae_loss(&cfg, &conf, &decoded, &mean, &logvar);

        // oracle: plain loops over the row layout
        let table = conf.pack_rows();
        let mut se = 0.0;
        let mut active = 0.0;
        let mut bce = 0.0;
        for bin in 0..5 {
            for bead in 0..2 {
                let i = bin * 2 + bead;
                let base = bin * 16 + bead * 8;
                for a in 0..3 {
                    se += (decoded_v[base + a] - table[base + a]).powi(2);
                    active += 1.0;
                }
                if conf.replicated_valid(i) {
                    for a in 4..7 {
                        se += (decoded_v[base + a] - table[base + a]).powi(2);
                        active += 1.0;
                    }
                }
                for (col, y) in [
                    (3usize, 1.0f64),
                    (7, f64::from(conf.mask_replicated()[i])),
                ] {
                    let z = decoded_v[base + col];
                    bce += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
                }
            }
        }
        let coord = se / active;
        let mask = bce / 20.0;
        let kl = -0.5
            * mean_v
                .iter()
                .zip(&logvar_v)
                .map(|(m, l)| 1.0 + l - m * m - l.exp())
                .sum::<f64>()
            / 40.0;
        assert!((loss.coord - coord).abs() < 1e-12);
        assert!((loss.mask - mask).abs() < 1e-12);
        assert!((loss.kl - kl).abs() < 1e-12);
        let total = coord + 0.7 * mask + 0.01 * kl;
        assert!((loss.total.values()[0] - total).abs() < 1e-12);
    }

    #[test]
    fn kl_term_is_nonnegative() {
        let cfg = VaeConfig::desk_default();
        let conf = ring_conformation(4, 2, 0.0, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..20 {
            let mean = Tensor::leaf(
                vec![4, 8],
                (0..32).map(|_| rng.random_range(-2.0..2.0)).collect(),
            );
            let logvar = Tensor::leaf(
                vec![4, 8],
                (0..32).map(|_| rng.random_range(-3.0..3.0)).collect(),
            );
            let decoded = Tensor::leaf(vec![4, 16], vec![0.0; 64]);
            let loss = vae_loss(&cfg, &conf, &decoded, &mean, &logvar);
            assert!(loss.kl >= 0.0, "kl = {}", loss.kl);
        }
    }

    #[test]
    fn calibrate_scale_on_unit_and_doubled_latents() {
        // synthetic check through the public surface: train-free, feed
        // conformations and verify homogeneity by scaling encoder output
        // indirectly -- here we check the statistic itself on raw vectors
        let vals: Vec<f64> = (0..1000).map(|i| ((i as f64) * 0.618).sin()).collect();
        let n = vals.len() as f64;
        let mu = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n).sqrt();
        let unit: Vec<f64> = vals.iter().map(|v| (v - mu) / std).collect();
        let stat = |xs: &[f64]| {
            let n = xs.len() as f64;
            let mu = xs.iter().sum::<f64>() / n;
            (xs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n).sqrt()
        };
        assert!((1.0 / stat(&unit) - 1.0).abs() < 1e-6);
        let doubled: Vec<f64> = unit.iter().map(|v| 2.0 * v).collect();
        assert!((1.0 / stat(&doubled) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn full_vae_loss_gradient_passes_finite_difference_check() {
        // tiny shapes: B = 6, hidden = 8
        let cfg = VaeConfig {
            beads_per_bin: 2,
            hidden: 8,
            latent_channels: 4,
            n_res_blocks: 1,
            lambda_mask: 1.0,
            lambda_kl: 5e-3,
        };
        let vae = Vae::new(cfg.clone(), 20);
        let conf = ring_conformation(6, 2, 0.5, 21);
        let rows = vae.input_rows(&conf).unwrap();
        let noise: Vec<f64> = {
            let mut rng = ChaCha8Rng::seed_from_u64(22);
            (0..24).map(|_| StandardNormal.sample(&mut rng)).collect()
        };
        let loss_of = |bind: &Binding| -> Tensor {
            let (mean, logvar) = vae.encode(bind, &rows);
            let xi = Tensor::leaf(mean.shape().to_vec(), noise.clone());
            let z = mean.add(&logvar.scale(0.5).exp().mul(&xi));
            let decoded = vae.decode(bind, &z);
            vae_loss(&cfg, &conf, &decoded, &mean, &logvar).total
        };
        let mut params = vae.params.clone();
        let (max_err, worst) =
            chromoforge_tensor::gradcheck::fd_check_params(&mut params, 1e-5, loss_of);
        assert!(max_err < 1e-4, "max relative error {max_err} at {worst}");
    }

    #[test]
    fn short_training_run_beats_untrained_reconstruction_tenfold() {
        let cfg = VaeConfig {
            beads_per_bin: 2,
            hidden: 24,
            latent_channels: 6,
            n_res_blocks: 2,
            lambda_mask: 1.0,
            lambda_kl: 5e-3,
        };
        let mut vae = Vae::new(cfg.clone(), 30);
        let data: Vec<Conformation> = (0..24)
            .map(|s| ring_conformation(12, 2, if s % 2 == 0 { 0.5 } else { 0.0 }, 100 + s))
            .collect();
        let untrained = {
            let bind = vae.params.bind(false);
            let mut acc = 0.0;
            for c in &data {
                let rows = vae.input_rows(c).unwrap();
                let (mean, logvar) = vae.encode(&bind, &rows);
                let decoded = vae.decode(&bind, &mean);
                acc += vae_loss(&cfg, c, &decoded, &mean, &logvar).coord;
            }
            acc / data.len() as f64
        };
        let mut adam = Adam::new(&vae.params, AdamConfig::with_lr(3e-3));
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for step in 0..240 {
            let bind = vae.params.bind(true);
            let conf = &data[step % data.len()];
            let rows = vae.input_rows(conf).unwrap();
            let (mean, logvar) = vae.encode(&bind, &rows);
            let z = reparameterize(&mean, &logvar, &mut rng);
            let decoded = vae.decode(&bind, &z);
            let loss = vae_loss(&cfg, conf, &decoded, &mean, &logvar);
            loss.total.backward();
            adam.step(&mut vae.params, &bind);
        }
        let trained = {
            let bind = vae.params.bind(false);
            let mut acc = 0.0;
            for c in &data {
                let rows = vae.input_rows(c).unwrap();
                let (mean, logvar) = vae.encode(&bind, &rows);
                let decoded = vae.decode(&bind, &mean);
                acc += vae_loss(&cfg, c, &decoded, &mean, &logvar).coord;
            }
            acc / data.len() as f64
        };
        assert!(
            trained * 10.0 < untrained,
            "coord loss {untrained} -> {trained}, less than 10x improvement"
        );
    }

    #[test]
    fn calibrated_scale_normalizes_heldout_latents() {
        let cfg = VaeConfig {
            beads_per_bin: 2,
            hidden: 16,
            latent_channels: 6,
            n_res_blocks: 2,
            lambda_mask: 1.0,
            lambda_kl: 5e-3,
        };
        let vae = Vae::new(cfg, 40);
        let bind = vae.params.bind(false);
        let train: Vec<Conformation> = (0..64)
            .map(|s| ring_conformation(24, 2, 0.5, 400 + s))
            .collect();
        let held: Vec<Conformation> = (0..64)
            .map(|s| ring_conformation(24, 2, 0.5, 900 + s))
            .collect();
        let scale = calibrate_latent_scale(&vae, &bind, &train).unwrap();
        // recomputation oracle on the calibration set: exactly unit std
        let mut scaled = Vec::new();
        for c in &train {
            let rows = vae.input_rows(c).unwrap();
            let (mean, _) = vae.encode(&bind, &rows);
            scaled.extend(mean.values().iter().map(|v| v * scale));
        }
        let stat = |xs: &[f64]| {
            let n = xs.len() as f64;
            let mu = xs.iter().sum::<f64>() / n;
            (xs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n).sqrt()
        };
        assert!((stat(&scaled) - 1.0).abs() < 1e-9);
        // held-out draw from the same process stays near unit spread
        let mut held_scaled = Vec::new();
        for c in &held {
            let rows = vae.input_rows(c).unwrap();
            let (mean, _) = vae.encode(&bind, &rows);
            held_scaled.extend(mean.values().iter().map(|v| v * scale));
        }
        let s = stat(&held_scaled);
        assert!((s - 1.0).abs() < 0.05, "held-out scaled std {s}");
    }
}
