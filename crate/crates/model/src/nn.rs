//! Layer building blocks on top of the tensor engine.

use chromoforge_tensor::params::xavier_uniform;
use chromoforge_tensor::{concat_cols, Binding, ParamId, ParamSet, Tensor};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn xavier<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w = ps.add(
            format!("{name}.w"),
            vec![in_dim, out_dim],
            xavier_uniform(rng, in_dim, out_dim),
        );
        let b = ps.add(format!("{name}.b"), vec![out_dim], vec![0.0; out_dim]);
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    /// All-zero weights and bias; the output is identically zero until
    /// trained (AdaLN-Zero heads, gated residual outputs).
    pub fn zeros(ps: &mut ParamSet, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = ps.add(
            format!("{name}.w"),
            vec![in_dim, out_dim],
            vec![0.0; in_dim * out_dim],
        );
        let b = ps.add(format!("{name}.b"), vec![out_dim], vec![0.0; out_dim]);
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, bind: &Binding, x: &Tensor) -> Tensor {
        x.matmul(bind.get(self.w)).add_row(bind.get(self.b))
    }

    /// Applies the layer to a single vector `[in] -> [out]`.
    pub fn forward_vec(&self, bind: &Binding, v: &Tensor) -> Tensor {
        self.forward(bind, &v.reshape(vec![1, self.in_dim]))
            .reshape(vec![self.out_dim])
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Conv1d {
    pub fn xavier<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel * cin;
        let bound = (6.0 / (fan_in + cout) as f64).sqrt();
        let w = ps.add(
            format!("{name}.w"),
            vec![kernel * cin, cout],
            (0..kernel * cin * cout)
                .map(|_| rng.random_range(-bound..bound))
                .collect(),
        );
        let b = ps.add(format!("{name}.b"), vec![cout], vec![0.0; cout]);
        Self {
            w,
            b,
            kernel,
            cin,
            cout,
        }
    }

    pub fn forward(&self, bind: &Binding, x: &Tensor) -> Tensor {
        x.conv1d(bind.get(self.w), bind.get(self.b), self.kernel)
    }
}

/// Multi-head scaled dot-product attention composed from matmul and
/// softmax. Queries may come from a different sequence than keys/values
/// (cross-attention); the key/value sequence is never written to.
#[derive(Debug, Clone)]
pub struct Mha {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub hidden: usize,
}

impl Mha {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        hidden: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(
            hidden % heads == 0,
            "hidden {hidden} must be divisible by heads {heads}"
        );
        Self {
            wq: Linear::xavier(ps, &format!("{name}.q"), hidden, hidden, rng),
            wk: Linear::xavier(ps, &format!("{name}.k"), hidden, hidden, rng),
            wv: Linear::xavier(ps, &format!("{name}.v"), hidden, hidden, rng),
            wo: Linear::xavier(ps, &format!("{name}.o"), hidden, hidden, rng),
            heads,
            hidden,
        }
    }

    pub fn forward(&self, bind: &Binding, q_in: &Tensor, kv_in: &Tensor) -> Tensor {
        let q = self.wq.forward(bind, q_in);
        let k = self.wk.forward(bind, kv_in);
        let v = self.wv.forward(bind, kv_in);
        let dh = self.hidden / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qs = q.slice_cols(h * dh, (h + 1) * dh);
            let ks = k.slice_cols(h * dh, (h + 1) * dh);
            let vs = v.slice_cols(h * dh, (h + 1) * dh);
            let scores = qs.matmul(&ks.transpose()).scale(scale);
            head_outs.push(scores.softmax_rows().matmul(&vs));
        }
        let refs: Vec<&Tensor> = head_outs.iter().collect();
        self.wo.forward(bind, &concat_cols(&refs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_shapes() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::xavier(&mut ps, "l", 4, 6, &mut rng);
        let bind = ps.bind(false);
        let x = Tensor::leaf(vec![3, 4], vec![0.5; 12]);
        assert_eq!(lin.forward(&bind, &x).shape(), &[3, 6]);
        let v = Tensor::leaf(vec![4], vec![1.0; 4]);
        assert_eq!(lin.forward_vec(&bind, &v).shape(), &[6]);
    }

    #[test]
    fn zero_linear_outputs_zero() {
        let mut ps = ParamSet::new();
        let lin = Linear::zeros(&mut ps, "z", 4, 3);
        let bind = ps.bind(false);
        let x = Tensor::leaf(vec![2, 4], vec![3.7; 8]);
        assert!(lin.forward(&bind, &x).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_preserves_query_length() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mha = Mha::new(&mut ps, "a", 8, 2, &mut rng);
        let bind = ps.bind(false);
        let q = Tensor::leaf(vec![5, 8], (0..40).map(|i| (i as f64).sin()).collect());
        let kv = Tensor::leaf(vec![3, 8], (0..24).map(|i| (i as f64).cos()).collect());
        let kv_before = kv.values().to_vec();
        let out = mha.forward(&bind, &q, &kv);
        assert_eq!(out.shape(), &[5, 8]);
        // cross K/V inputs are immutable through the op
        assert_eq!(kv.values(), kv_before.as_slice());
    }
}
