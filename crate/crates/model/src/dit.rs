//! Conditional latent diffusion transformer.
//!
//! A transformer encoder turns the contact map into per-bin condition tokens
//! `z_c` (rows as the sequence, columns as features) plus a mean-pooled
//! summary. The backbone runs AdaLN-Zero blocks over the latent tokens: the
//! global condition `c = timestep_embedding(t) + pooled` regresses the
//! shift/scale/gate modulation (zero-initialized, so every block starts as
//! the identity), and a one-way cross-attention reads `z_c` with the
//! modulated latent tokens as queries. Condition tokens are never updated.
//!
//! Training follows flow matching along straight interpolants
//! `z_t = (1-t) z_0 + t eps` with velocity target `eps - z_0`; sampling
//! integrates the learned velocity from `t = 1` noise down to `t = 0` with
//! explicit Euler steps and classifier-free guidance.

use crate::nn::{Linear, Mha};
use crate::vae::Vae;
use crate::{ModelError, LN_EPS};
use chromoforge_core::geom::{Conformation, Ensemble};
use chromoforge_core::hic::HiCMap;
use chromoforge_tensor::{sinusoidal_time_features, Binding, ParamId, ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone)]
pub struct DitConfig {
    pub bins: usize,
    pub latent_channels: usize,
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub encoder_depth: usize,
    pub mlp_ratio: usize,
    pub cond_dropout_prob: f64,
}

impl DitConfig {
    /// Desk-scale defaults: depth 4, hidden 64, heads 4, encoder depth 2.
    pub fn desk_default(bins: usize, latent_channels: usize) -> Self {
        Self {
            bins,
            latent_channels,
            depth: 4,
            hidden: 64,
            heads: 4,
            encoder_depth: 2,
            mlp_ratio: 2,
            cond_dropout_prob: 0.1,
        }
    }

    /// Reference configuration S: depth 12, hidden 384, 6 heads, encoder
    /// depth 8. Representable, not trained in CI.
    pub fn reference_small(bins: usize, latent_channels: usize) -> Self {
        Self {
            bins,
            latent_channels,
            depth: 12,
            hidden: 384,
            heads: 6,
            encoder_depth: 8,
            mlp_ratio: 4,
            cond_dropout_prob: 0.1,
        }
    }

    /// Reference configuration L: depth 24, hidden 1024, 16 heads, encoder
    /// depth 8. Representable, not trained in CI.
    pub fn reference_large(bins: usize, latent_channels: usize) -> Self {
        Self {
            bins,
            latent_channels,
            depth: 24,
            hidden: 1024,
            heads: 16,
            encoder_depth: 8,
            mlp_ratio: 4,
            cond_dropout_prob: 0.1,
        }
    }

    pub fn validate(&self) {
        assert!(
            self.hidden % self.heads == 0,
            "hidden {} must be divisible by heads {}",
            self.hidden,
            self.heads
        );
        assert!(self.depth >= 1 && self.encoder_depth >= 1);
        assert!((0.0..=1.0).contains(&self.cond_dropout_prob));
    }
}

/// Per-bin condition tokens and their mean-pooled summary.
pub struct CondTokens {
    pub tokens: Tensor,
    pub pooled: Tensor,
}

#[derive(Debug, Clone)]
struct EncBlock {
    attn: Mha,
    ffn1: Linear,
    ffn2: Linear,
}

impl EncBlock {
    fn forward(&self, bind: &Binding, x: &Tensor) -> Tensor {
        let h = x.layer_norm(LN_EPS);
        let x = x.add(&self.attn.forward(bind, &h, &h));
        let h = x.layer_norm(LN_EPS);
        let f = self.ffn2.forward(bind, &self.ffn1.forward(bind, &h).gelu());
        x.add(&f)
    }
}

/// Modulation slot order inside the 9H AdaLN-Zero head.
const MOD_SLOTS: usize = 9;
const SHIFT_SA: usize = 0;
const SCALE_SA: usize = 1;
const GATE_SA: usize = 2;
const SHIFT_CA: usize = 3;
const SCALE_CA: usize = 4;
const GATE_CA: usize = 5;
const SHIFT_FFN: usize = 6;
const SCALE_FFN: usize = 7;
const GATE_FFN: usize = 8;

#[derive(Debug, Clone)]
struct DitBlock {
    modulation: Linear,
    self_attn: Mha,
    cross_attn: Mha,
    ffn1: Linear,
    ffn2: Linear,
}

impl DitBlock {
    fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        hidden: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            // zero-initialized: shifts, scales and gates all start at 0, so
            // each residual branch is gated off and the block is an identity
            modulation: Linear::zeros(ps, &format!("{name}.mod"), hidden, MOD_SLOTS * hidden),
            self_attn: Mha::new(ps, &format!("{name}.sa"), hidden, heads, rng),
            cross_attn: Mha::new(ps, &format!("{name}.ca"), hidden, heads, rng),
            ffn1: Linear::xavier(ps, &format!("{name}.ffn1"), hidden, mlp_ratio * hidden, rng),
            ffn2: Linear::xavier(ps, &format!("{name}.ffn2"), mlp_ratio * hidden, hidden, rng),
        }
    }

    fn forward(&self, bind: &Binding, x: &Tensor, zc: &Tensor, c: &Tensor) -> Tensor {
        let hidden = self.modulation.in_dim;
        let m = self
            .modulation
            .forward_vec(bind, c)
            .reshape(vec![1, MOD_SLOTS * hidden]);
        let slot = |i: usize| -> Tensor {
            m.slice_cols(i * hidden, (i + 1) * hidden)
                .reshape(vec![hidden])
        };
        let modulate = |x: &Tensor, shift: usize, scale: usize| -> Tensor {
            x.layer_norm(LN_EPS)
                .mul_row(&slot(scale).add_scalar(1.0))
                .add_row(&slot(shift))
        };

        let h = modulate(x, SHIFT_SA, SCALE_SA);
        let a = self.self_attn.forward(bind, &h, &h);
        let x = x.add(&a.mul_row(&slot(GATE_SA)));

        // queries from modulated latents, keys/values from the condition;
        // zc itself is never written
        let h = modulate(&x, SHIFT_CA, SCALE_CA);
        let a = self.cross_attn.forward(bind, &h, zc);
        let x = x.add(&a.mul_row(&slot(GATE_CA)));

        let h = modulate(&x, SHIFT_FFN, SCALE_FFN);
        let f = self.ffn2.forward(bind, &self.ffn1.forward(bind, &h).gelu());
        x.add(&f.mul_row(&slot(GATE_FFN)))
    }
}

#[derive(Debug, Clone)]
pub struct Dit {
    pub cfg: DitConfig,
    pub params: ParamSet,
    enc_proj: Linear,
    enc_pos: ParamId,
    enc_blocks: Vec<EncBlock>,
    t_mlp1: Linear,
    t_mlp2: Linear,
    in_proj: Linear,
    pos: ParamId,
    blocks: Vec<DitBlock>,
    final_mod: Linear,
    final_out: Linear,
    null_cond: ParamId,
}

impl Dit {
    pub fn new(cfg: DitConfig, seed: u64) -> Self {
        cfg.validate();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let h = cfg.hidden;
        let enc_proj = Linear::xavier(&mut ps, "enc.proj", cfg.bins, h, &mut rng);
        let enc_pos = ps.add("enc.pos", vec![cfg.bins, h], vec![0.0; cfg.bins * h]);
        let enc_blocks = (0..cfg.encoder_depth)
            .map(|i| EncBlock {
                attn: Mha::new(&mut ps, &format!("enc.block{i}.attn"), h, cfg.heads, &mut rng),
                ffn1: Linear::xavier(
                    &mut ps,
                    &format!("enc.block{i}.ffn1"),
                    h,
                    cfg.mlp_ratio * h,
                    &mut rng,
                ),
                ffn2: Linear::xavier(
                    &mut ps,
                    &format!("enc.block{i}.ffn2"),
                    cfg.mlp_ratio * h,
                    h,
                    &mut rng,
                ),
            })
            .collect();
        let t_mlp1 = Linear::xavier(&mut ps, "time.mlp1", h, h, &mut rng);
        let t_mlp2 = Linear::xavier(&mut ps, "time.mlp2", h, h, &mut rng);
        let in_proj = Linear::xavier(&mut ps, "in_proj", cfg.latent_channels, h, &mut rng);
        let pos = ps.add("pos", vec![cfg.bins, h], vec![0.0; cfg.bins * h]);
        let blocks = (0..cfg.depth)
            .map(|i| DitBlock::new(&mut ps, &format!("block{i}"), h, cfg.heads, cfg.mlp_ratio, &mut rng))
            .collect();
        let final_mod = Linear::zeros(&mut ps, "final.mod", h, 2 * h);
        let final_out = Linear::zeros(&mut ps, "final.out", h, cfg.latent_channels);
        let null_cond = ps.add("null_cond", vec![h], vec![0.0; h]);
        Self {
            cfg,
            params: ps,
            enc_proj,
            enc_pos,
            enc_blocks,
            t_mlp1,
            t_mlp2,
            in_proj,
            pos,
            blocks,
            final_mod,
            final_out,
            null_cond,
        }
    }

    /// Rebuilds the model around checkpointed parameters.
    pub fn from_params(cfg: DitConfig, params: ParamSet) -> Self {
        let mut model = Dit::new(cfg, 0);
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

    /// Encodes a contact map into condition tokens: rows become the token
    /// sequence (columns are the features), after log1p and per-map
    /// standardization.
    pub fn encode_hic(&self, bind: &Binding, map: &HiCMap) -> Result<CondTokens, ModelError> {
        if map.bins() != self.cfg.bins {
            return Err(ModelError::BinMismatch {
                got: map.bins(),
                expected: self.cfg.bins,
            });
        }
        let b = map.bins();
        let logged: Vec<f64> = map.counts().iter().map(|v| v.ln_1p()).collect();
        let n = logged.len() as f64;
        let mu = logged.iter().sum::<f64>() / n;
        let var = logged.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        let inv = 1.0 / var.sqrt().max(1e-12);
        let standardized: Vec<f64> = logged.iter().map(|v| (v - mu) * inv).collect();
        let rows = Tensor::leaf(vec![b, b], standardized);
        let mut h = self
            .enc_proj
            .forward(bind, &rows)
            .add(bind.get(self.enc_pos));
        for block in &self.enc_blocks {
            h = block.forward(bind, &h);
        }
        let pooled = h.mean_rows();
        Ok(CondTokens { tokens: h, pooled })
    }

    /// The learned null condition used for classifier-free guidance: one
    /// embedding replacing the token sequence and the pooled summary at once.
    pub fn null_cond_tokens(&self, bind: &Binding) -> CondTokens {
        let v = bind.get(self.null_cond);
        CondTokens {
            tokens: v.broadcast_row(self.cfg.bins),
            pooled: v.clone(),
        }
    }

    /// Sinusoidal features of `t` through a two-layer MLP, `[hidden]`.
    pub fn timestep_embedding(&self, bind: &Binding, t: f64) -> Tensor {
        let feats = sinusoidal_time_features(&Tensor::scalar(t), self.cfg.hidden);
        let h = self.t_mlp1.forward_vec(bind, &feats).reshape(vec![1, self.cfg.hidden]);
        self.t_mlp2
            .forward(bind, &h.silu())
            .reshape(vec![self.cfg.hidden])
    }

    /// Predicted velocity for latent tokens `z` (`[B, latent]`) at time `t`,
    /// conditioned on `cond` (or the learned null condition). The untrained
    /// model is the identity map on `z`.
    pub fn velocity(&self, bind: &Binding, z: &Tensor, t: f64, cond: Option<&CondTokens>) -> Tensor {
        assert_eq!(
            z.shape(),
            &[self.cfg.bins, self.cfg.latent_channels],
            "latent shape {:?} vs configured [{}, {}]",
            z.shape(),
            self.cfg.bins,
            self.cfg.latent_channels
        );
        let null;
        let (tokens, pooled) = match cond {
            Some(c) => (&c.tokens, &c.pooled),
            None => {
                null = self.null_cond_tokens(bind);
                (&null.tokens, &null.pooled)
            }
        };
        let c = self.timestep_embedding(bind, t).add(pooled);
        let mut h = self.in_proj.forward(bind, z).add(bind.get(self.pos));
        for block in &self.blocks {
            h = block.forward(bind, &h, tokens, &c);
        }
        let hidden = self.cfg.hidden;
        let fm = self
            .final_mod
            .forward_vec(bind, &c)
            .reshape(vec![1, 2 * hidden]);
        let shift = fm.slice_cols(0, hidden).reshape(vec![hidden]);
        let scale = fm.slice_cols(hidden, 2 * hidden).reshape(vec![hidden]);
        let hm = h
            .layer_norm(LN_EPS)
            .mul_row(&scale.add_scalar(1.0))
            .add_row(&shift);
        let out = self.final_out.forward(bind, &hm);
        z.add(&out)
    }
}

/// Straight-line interpolant `(1 - t) z0 + t eps`.
pub fn flow_interpolant(z0: &Tensor, eps: &Tensor, t: f64) -> Tensor {
    z0.scale(1.0 - t).add(&eps.scale(t))
}

/// Velocity target `eps - z0`.
pub fn flow_target(z0: &Tensor, eps: &Tensor) -> Tensor {
    eps.sub(z0)
}

/// Flow-matching loss for an arbitrary velocity predictor; mean squared
/// error between the prediction at `z_t` and `eps - z0`.
pub fn flow_matching_loss_with<V>(velocity: V, z0: &Tensor, eps: &Tensor, t: f64) -> Tensor
where
    V: FnOnce(&Tensor, f64) -> Tensor,
{
    let zt = flow_interpolant(z0, eps, t);
    let v = velocity(&zt, t);
    let diff = v.sub(&flow_target(z0, eps));
    diff.mul(&diff).mean_all()
}

/// Flow-matching loss of the model itself; pass `cond = None` for the
/// dropped-condition (null embedding) branch.
pub fn flow_matching_loss(
    dit: &Dit,
    bind: &Binding,
    z0: &Tensor,
    cond: Option<&CondTokens>,
    t: f64,
    eps: &Tensor,
) -> Tensor {
    flow_matching_loss_with(|zt, t| dit.velocity(bind, zt, t, cond), z0, eps, t)
}

fn initial_noise<R: Rng + ?Sized>(dit: &Dit, rng: &mut R) -> Vec<f64> {
    (0..dit.cfg.bins * dit.cfg.latent_channels)
        .map(|_| StandardNormal.sample(rng))
        .collect()
}

fn euler_steps(
    dit: &Dit,
    bind: &Binding,
    mut z: Vec<f64>,
    steps: usize,
    mut guided: impl FnMut(&Tensor, f64) -> Vec<f64>,
) -> Vec<f64> {
    let dt = 1.0 / steps as f64;
    for k in 0..steps {
        let t = 1.0 - k as f64 * dt;
        let zt = Tensor::leaf(
            vec![dit.cfg.bins, dit.cfg.latent_channels],
            z.clone(),
        );
        let v = guided(&zt, t);
        for (zi, vi) in z.iter_mut().zip(&v) {
            *zi -= dt * vi;
        }
    }
    z
}

/// Rectified-flow sampling: Euler integration from `t = 1` noise down to
/// `t = 0` with classifier-free guidance
/// `v = v_uncond + cfg_scale * (v_cond - v_uncond)`. Both passes are always
/// evaluated; at `cfg_scale = 1` the guided velocity is the conditional
/// prediction by algebraic identity. The returned latents are in scaled
/// (diffusion) space; divide by the latent scale before decoding.
pub fn sample<R: Rng + ?Sized>(
    dit: &Dit,
    bind: &Binding,
    cond: &CondTokens,
    steps: usize,
    cfg_scale: f64,
    rng: &mut R,
) -> Result<Vec<f64>, ModelError> {
    assert!(steps >= 1, "steps must be >= 1");
    if dit.params.any_non_finite() {
        return Err(ModelError::NonFiniteParams);
    }
    let z = initial_noise(dit, rng);
    Ok(euler_steps(dit, bind, z, steps, |zt, t| {
        let vc = dit.velocity(bind, zt, t, Some(cond));
        let vu = dit.velocity(bind, zt, t, None);
        if cfg_scale == 1.0 {
            vc.values().to_vec()
        } else {
            vu.values()
                .iter()
                .zip(vc.values())
                .map(|(u, c)| u + cfg_scale * (c - u))
                .collect()
        }
    }))
}

/// Conditional-only sampling (no guidance combination); reference path for
/// the `cfg_scale = 1` identity.
pub fn sample_conditional<R: Rng + ?Sized>(
    dit: &Dit,
    bind: &Binding,
    cond: &CondTokens,
    steps: usize,
    rng: &mut R,
) -> Result<Vec<f64>, ModelError> {
    assert!(steps >= 1, "steps must be >= 1");
    if dit.params.any_non_finite() {
        return Err(ModelError::NonFiniteParams);
    }
    let z = initial_noise(dit, rng);
    Ok(euler_steps(dit, bind, z, steps, |zt, t| {
        dit.velocity(bind, zt, t, Some(cond)).values().to_vec()
    }))
}

/// Generation settings for [`generate_ensemble`].
#[derive(Debug, Clone)]
pub struct GenerateConfig {
    pub count: usize,
    pub steps: usize,
    pub cfg_scale: f64,
    pub latent_scale: f64,
    /// Original-space scale stamped on each generated member (the mean
    /// scale of the reference ensemble), used later for threshold rescaling.
    pub member_scale: f64,
    pub seed: u64,
    pub threads: usize,
}

/// Draws `count` independent samples conditioned on the map, decodes each
/// through the VAE and thresholds the replication masks. Members are
/// produced from per-member seeded streams, so the result is independent of
/// the thread count.
pub fn generate_ensemble(
    dit: &Dit,
    vae: &Vae,
    map: &HiCMap,
    condition_id: &str,
    gen: &GenerateConfig,
) -> Result<Ensemble, ModelError> {
    let worker = |dit: &Dit, vae: &Vae, member: usize| -> Result<Conformation, ModelError> {
        let dbind = dit.params.bind(false);
        let vbind = vae.params.bind(false);
        let cond = dit.encode_hic(&dbind, map)?;
        let mut rng = ChaCha8Rng::seed_from_u64(gen.seed);
        rng.set_stream(member as u64);
        let z = sample(dit, &dbind, &cond, gen.steps, gen.cfg_scale, &mut rng)?;
        let latent: Vec<f64> = z.iter().map(|v| v / gen.latent_scale).collect();
        let latent_t = Tensor::leaf(vec![dit.cfg.bins, dit.cfg.latent_channels], latent);
        let decoded = vae.decode(&vbind, &latent_t);
        let mut conf = vae.decoded_to_conformation(&decoded);
        conf.set_scale(gen.member_scale);
        Ok(conf)
    };

    let threads = gen.threads.max(1).min(gen.count.max(1));
    let members: Vec<Conformation> = if threads <= 1 {
        let mut out = Vec::with_capacity(gen.count);
        for i in 0..gen.count {
            out.push(worker(dit, vae, i)?);
        }
        out
    } else {
        let mut slots: Vec<Option<Result<Conformation, ModelError>>> =
            (0..gen.count).map(|_| None).collect();
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for t in 0..threads {
                let dit = dit.clone();
                let vae = vae.clone();
                handles.push(scope.spawn(move || {
                    let mut results = Vec::new();
                    let mut i = t;
                    while i < gen.count {
                        results.push((i, worker(&dit, &vae, i)));
                        i += threads;
                    }
                    results
                }));
            }
            for h in handles {
                for (i, r) in h.join().expect("generation worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots
            .into_iter()
            .map(|s| s.expect("every member filled"))
            .collect::<Result<Vec<_>, _>>()?
    };
    Ok(Ensemble::new(members, condition_id)?)
}
