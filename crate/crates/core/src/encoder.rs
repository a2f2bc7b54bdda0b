//! Target encoder: a two-layer GCN trunk whose second layer splits into a
//! mean head and a softplus variance head, plus the projection head used by
//! the contrastive objective.
//!
//! The encoder is stochastic: `encode` returns `U = U_mu + eps . U_sigma`
//! with caller-supplied standard-normal noise, so a forward pass is
//! reproducible given the noise and differentiable through both heads.

use std::str::FromStr;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore, ParamVars, Tape, Var};
use crate::sparse::CsrMatrix;

/// Variance floor added to the softplus head.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Norm floor for cosine similarities of projected rows.
pub const NORM_FLOOR: f64 = 1e-12;

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// Learnable negative slope, initialized at 0.25.
    Prelu,
    /// Leaky rectifier with fixed slope 0.2.
    RRelu,
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Activation::Relu),
            "prelu" => Ok(Activation::Prelu),
            "rrelu" => Ok(Activation::RRelu),
            other => Err(format!("unknown activation `{other}` (expected relu|prelu|rrelu)")),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Activation::Relu => "relu",
            Activation::Prelu => "prelu",
            Activation::RRelu => "rrelu",
        };
        f.write_str(s)
    }
}

/// Glorot-uniform initialization: U(-l, l) with l = sqrt(6 / (fan_in + fan_out)).
pub fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

/// Adjacency a propagation step multiplies by: either a constant normalized
/// matrix or the differentiable masked view produced by the generator.
pub enum ViewAdj {
    Fixed(Arc<CsrMatrix>),
    /// Normalized masked adjacency, kept in factored form:
    /// D^{-1/2} (I + M) D^{-1/2} with M the mask-weighted edge matrix.
    Masked { edges: Arc<Vec<(usize, usize)>>, mask: Var, deg_isqrt: Var },
}

impl ViewAdj {
    /// Multiplies the (normalized, self-looped) adjacency into `z`.
    pub fn propagate(&self, tape: &mut Tape, z: Var) -> Var {
        match self {
            ViewAdj::Fixed(adj) => tape.spmm(adj, z),
            ViewAdj::Masked { edges, mask, deg_isqrt } => {
                let scaled = tape.scale_rows(z, *deg_isqrt);
                let hop = tape.adj_mask_mul(edges, *mask, scaled);
                let with_loop = tape.add(hop, scaled);
                tape.scale_rows(with_loop, *deg_isqrt)
            }
        }
    }
}

/// Stochastic encoder output: `u = mu + eps . sigma`.
pub struct EncodeOut {
    pub u: Var,
    pub mu: Var,
    pub sigma: Var,
}

/// Two-layer GCN with a shared first layer and separate mean/variance heads.
pub struct TargetEncoder {
    pub w1: ParamId,
    pub w_mu: ParamId,
    pub w_sigma: ParamId,
    pub prelu_slope: Option<ParamId>,
    pub activation: Activation,
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
}

impl TargetEncoder {
    pub fn init(
        store: &mut ParamStore,
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> TargetEncoder {
        let w1 = store.register("encoder.w1", glorot(rng, in_dim, hidden_dim)).expect("fresh name");
        let w_mu =
            store.register("encoder.w_mu", glorot(rng, hidden_dim, out_dim)).expect("fresh name");
        let w_sigma = store
            .register("encoder.w_sigma", glorot(rng, hidden_dim, out_dim))
            .expect("fresh name");
        let prelu_slope = match activation {
            Activation::Prelu => Some(
                store
                    .register("encoder.prelu_slope", Array2::from_elem((1, 1), 0.25))
                    .expect("fresh name"),
            ),
            _ => None,
        };
        TargetEncoder { w1, w_mu, w_sigma, prelu_slope, activation, in_dim, hidden_dim, out_dim }
    }

    fn activate(&self, tape: &mut Tape, vars: &ParamVars, x: Var) -> Var {
        match self.activation {
            Activation::Relu => tape.relu(x),
            Activation::Prelu => {
                let slope = vars.var(self.prelu_slope.expect("prelu slope registered"));
                tape.prelu(x, slope)
            }
            Activation::RRelu => tape.leaky_relu(x, 0.2),
        }
    }

    /// Differentiable forward pass. `eps` must be standard-normal noise of
    /// shape (num_nodes, out_dim); pass zeros to get `u == mu`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        adj: &ViewAdj,
        x: Var,
        eps: &Array2<f64>,
    ) -> EncodeOut {
        assert_eq!(tape.shape(x).1, self.in_dim, "encode: feature dim mismatch");
        let xw = tape.matmul(x, vars.var(self.w1));
        let pre = adj.propagate(tape, xw);
        let hidden = self.activate(tape, vars, pre);

        let mu_w = tape.matmul(hidden, vars.var(self.w_mu));
        let mu = adj.propagate(tape, mu_w);

        let sig_w = tape.matmul(hidden, vars.var(self.w_sigma));
        let sig_pre = adj.propagate(tape, sig_w);
        let soft = tape.softplus(sig_pre);
        let sigma = tape.add_scalar(soft, SIGMA_FLOOR);

        assert_eq!(eps.dim(), tape.shape(mu), "encode: noise shape mismatch");
        let eps_v = tape.input(eps.clone());
        let scaled = tape.mul(eps_v, sigma);
        let u = tape.add(mu, scaled);
        EncodeOut { u, mu, sigma }
    }

    /// Deterministic mean embeddings without a tape: the downstream-facing
    /// representation (`eps = 0`).
    #[must_use]
    pub fn embed_mu(&self, store: &ParamStore, adj: &CsrMatrix, x: &Array2<f64>) -> Array2<f64> {
        let xw = x.dot(store.value(self.w1));
        let mut hidden = adj.matmul_dense(&xw);
        match self.activation {
            Activation::Relu => hidden.mapv_inplace(|v| v.max(0.0)),
            Activation::Prelu => {
                let s = store.value(self.prelu_slope.expect("prelu slope registered"))[(0, 0)];
                hidden.mapv_inplace(|v| if v > 0.0 { v } else { s * v });
            }
            Activation::RRelu => hidden.mapv_inplace(|v| if v > 0.0 { v } else { 0.2 * v }),
        }
        adj.matmul_dense(&hidden.dot(store.value(self.w_mu)))
    }
}

/// Two dense layers with a rectifier between, applied to encoder outputs
/// before cosine similarity.
pub struct ProjectionHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub dim: usize,
}

impl ProjectionHead {
    pub fn init(store: &mut ParamStore, dim: usize, rng: &mut ChaCha8Rng) -> ProjectionHead {
        let w1 = store.register("head.w1", glorot(rng, dim, dim)).expect("fresh name");
        let b1 = store.register("head.b1", Array2::zeros((1, dim))).expect("fresh name");
        let w2 = store.register("head.w2", glorot(rng, dim, dim)).expect("fresh name");
        let b2 = store.register("head.b2", Array2::zeros((1, dim))).expect("fresh name");
        ProjectionHead { w1, b1, w2, b2, dim }
    }

    /// Differentiable projection.
    pub fn project(&self, tape: &mut Tape, vars: &ParamVars, z: Var) -> Var {
        let h = tape.matmul(z, vars.var(self.w1));
        let h = tape.add_row(h, vars.var(self.b1));
        let h = tape.relu(h);
        let out = tape.matmul(h, vars.var(self.w2));
        tape.add_row(out, vars.var(self.b2))
    }

    /// Projection followed by row L2-normalization, the similarity space of
    /// the contrastive loss.
    pub fn project_normalized(&self, tape: &mut Tape, vars: &ParamVars, z: Var) -> Var {
        let p = self.project(tape, vars, z);
        tape.row_normalize_l2(p, NORM_FLOOR)
    }

    /// Plain (non-tape) projection, for scoring outside training.
    #[must_use]
    pub fn project_plain(&self, store: &ParamStore, z: &Array2<f64>) -> Array2<f64> {
        let mut h = z.dot(store.value(self.w1));
        h += store.value(self.b1);
        h.mapv_inplace(|v| v.max(0.0));
        let mut out = h.dot(store.value(self.w2));
        out += store.value(self.b2);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{sbm_generate, sym_normalize};
    use rand::SeedableRng;

    fn setup(
        activation: Activation,
        seed: u64,
    ) -> (ParamStore, TargetEncoder, Arc<CsrMatrix>, Array2<f64>) {
        let g = sbm_generate(&[4, 4], 0.8, 0.2, 5, 0.5, seed).unwrap();
        let adj = Arc::new(sym_normalize(&g));
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = TargetEncoder::init(&mut store, 5, 6, 3, activation, &mut rng);
        let x = g.features().clone();
        (store, enc, adj, x)
    }

    #[test]
    fn zero_noise_returns_the_mean_exactly() {
        let (store, enc, adj, x) = setup(Activation::Relu, 1);
        let mut tape = Tape::new();
        let vars = store.attach(&mut tape);
        let vx = tape.input(x.clone());
        let out = enc.encode(
            &mut tape,
            &vars,
            &ViewAdj::Fixed(Arc::clone(&adj)),
            vx,
            &Array2::zeros((8, 3)),
        );
        assert_eq!(tape.value(out.u), tape.value(out.mu));
    }

    #[test]
    fn sigma_is_strictly_positive() {
        for act in [Activation::Relu, Activation::Prelu, Activation::RRelu] {
            let (store, enc, adj, x) = setup(act, 2);
            let mut tape = Tape::new();
            let vars = store.attach(&mut tape);
            let vx = tape.input(x.clone());
            let out = enc.encode(
                &mut tape,
                &vars,
                &ViewAdj::Fixed(Arc::clone(&adj)),
                vx,
                &Array2::zeros((8, 3)),
            );
            assert!(tape.value(out.sigma).iter().all(|s| *s >= SIGMA_FLOOR));
        }
    }

    #[test]
    fn init_is_reproducible_and_glorot_variance_matches() {
        let mut s1 = ParamStore::new();
        let mut s2 = ParamStore::new();
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let e1 = TargetEncoder::init(&mut s1, 7, 9, 4, Activation::Relu, &mut r1);
        let _e2 = TargetEncoder::init(&mut s2, 7, 9, 4, Activation::Relu, &mut r2);
        assert_eq!(s1.content_hash(), s2.content_hash());
        let _ = e1;

        // Monte Carlo variance of Glorot entries: Var U(-l, l) = l^2 / 3
        // = 2 / (fan_in + fan_out).
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (fi, fo) = (80, 45);
        let w = glorot(&mut rng, fi, fo);
        let n = (fi * fo) as f64;
        let mean = w.sum() / n;
        let var = w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let expected = 2.0 / (fi + fo) as f64;
        assert!(
            (var - expected).abs() / expected < 0.10,
            "glorot variance {var} vs expected {expected}"
        );
    }

    #[test]
    fn reparameterization_noise_scales_with_sigma() {
        let (store, enc, adj, x) = setup(Activation::Relu, 3);
        // One encode recovers (mu, sigma); the sampled u must equal
        // mu + eps . sigma exactly for any eps.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let eps = Array2::from_shape_fn((8, 3), |_| {
            rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng)
        });
        let mut tape = Tape::new();
        let vars = store.attach(&mut tape);
        let vx = tape.input(x.clone());
        let out =
            enc.encode(&mut tape, &vars, &ViewAdj::Fixed(Arc::clone(&adj)), vx, &eps);
        let mu = tape.value(out.mu).clone();
        let sigma = tape.value(out.sigma).clone();
        let u = tape.value(out.u).clone();
        let recon = &mu + &(&eps * &sigma);
        assert_eq!(u, recon);

        // Monte Carlo: per-entry variance of u over fresh noise approaches
        // sigma^2 within 5% relative.
        let draws = 10_000usize;
        let mut acc = Array2::<f64>::zeros((8, 3));
        let mut acc_sq = Array2::<f64>::zeros((8, 3));
        for _ in 0..draws {
            let e = Array2::from_shape_fn((8, 3), |_| {
                rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng)
            });
            let u = &mu + &(&e * &sigma);
            acc += &u;
            acc_sq += &u.mapv(|v| v * v);
        }
        let nf = draws as f64;
        for i in 0..8 {
            for j in 0..3 {
                let mean = acc[(i, j)] / nf;
                let var = acc_sq[(i, j)] / nf - mean * mean;
                let want = sigma[(i, j)] * sigma[(i, j)];
                assert!(
                    (var - want).abs() / want < 0.05,
                    "entry ({i},{j}): var {var} vs sigma^2 {want}"
                );
            }
        }
    }

    #[test]
    fn embed_mu_matches_tape_forward() {
        for act in [Activation::Relu, Activation::Prelu, Activation::RRelu] {
            let (store, enc, adj, x) = setup(act, 4);
            let mut tape = Tape::new();
            let vars = store.attach(&mut tape);
            let vx = tape.input(x.clone());
            let out = enc.encode(
                &mut tape,
                &vars,
                &ViewAdj::Fixed(Arc::clone(&adj)),
                vx,
                &Array2::zeros((8, 3)),
            );
            let plain = enc.embed_mu(&store, &adj, &x);
            assert_eq!(&plain, tape.value(out.mu));
        }
    }

    #[test]
    fn gradients_reach_all_encoder_parameters_at_init() {
        let (mut store, enc, adj, x) = setup(Activation::Prelu, 6);
        let mut tape = Tape::new();
        let vars = store.attach(&mut tape);
        let vx = tape.input(x.clone());
        let out = enc.encode(
            &mut tape,
            &vars,
            &ViewAdj::Fixed(Arc::clone(&adj)),
            vx,
            &Array2::ones((8, 3)),
        );
        let sq = tape.square(out.u);
        let loss = tape.reduce_mean(sq);
        tape.backward(loss).unwrap();
        store.collect_grads(&tape, &vars);
        for id in store.ids() {
            let g = store.grad(id);
            assert!(
                g.iter().any(|v| *v != 0.0),
                "parameter `{}` received no gradient",
                store.name(id)
            );
        }
    }

    #[test]
    fn projection_head_plain_matches_tape() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let head = ProjectionHead::init(&mut store, 4, &mut rng);
        let z = Array2::from_shape_fn((5, 4), |(i, j)| (i as f64 - 2.0) * 0.3 + j as f64 * 0.1);
        let mut tape = Tape::new();
        let vars = store.attach(&mut tape);
        let vz = tape.input(z.clone());
        let p = head.project(&mut tape, &vars, vz);
        assert_eq!(&head.project_plain(&store, &z), tape.value(p));
    }

    #[test]
    fn activation_parses_and_prints() {
        for (s, a) in
            [("relu", Activation::Relu), ("prelu", Activation::Prelu), ("rrelu", Activation::RRelu)]
        {
            assert_eq!(s.parse::<Activation>().unwrap(), a);
            assert_eq!(a.to_string(), s);
        }
        assert!("gelu".parse::<Activation>().is_err());
    }
}
