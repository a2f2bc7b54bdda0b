//! Learned view generator: scores every edge of the original graph with a
//! small GNN + MLP, then samples a differentiable keep/drop mask through a
//! binary-concrete relaxation.
//!
//! The generator always reads the *original* normalized adjacency; only the
//! view handed to the encoder is masked. Dropping an edge removes it from
//! both directions, and degrees are recomputed from the mask so the masked
//! adjacency stays a valid symmetric normalization.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore, ParamVars, Tape, Var};
use crate::encoder::{glorot, ViewAdj};
use crate::graph::{sym_normalize, Graph};
use crate::sparse::CsrMatrix;

/// Drop probabilities are clamped into [SCORE_EPS, 1 - SCORE_EPS] before the
/// logit so the concrete relaxation never sees 0 or 1.
pub const SCORE_EPS: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum GeneratorError {
    #[error("drop-probability bounds ({lo}, {hi}) must satisfy 0 <= lo <= hi <= 1")]
    Bounds { lo: f64, hi: f64 },
    #[error("concrete temperature {0} must be positive")]
    Temperature(f64),
}

/// Per-graph constants the generator needs every forward pass.
pub struct ViewContext {
    /// Symmetrically normalized original adjacency (with self-loops).
    pub adj_norm: Arc<CsrMatrix>,
    /// Canonical undirected edge list, i < j, sorted.
    pub edges: Arc<Vec<(usize, usize)>>,
    pub heads: Arc<Vec<usize>>,
    pub tails: Arc<Vec<usize>>,
    /// Node-edge incidence (num_nodes x num_edges): incidence * mask gives
    /// each node's masked degree (before the +1 self-loop).
    pub incidence: Arc<CsrMatrix>,
    pub num_nodes: usize,
}

impl ViewContext {
    pub fn new(graph: &Graph) -> ViewContext {
        let n = graph.num_nodes();
        let edges = graph.edge_list();
        let heads: Vec<usize> = edges.iter().map(|&(i, _)| i).collect();
        let tails: Vec<usize> = edges.iter().map(|&(_, j)| j).collect();
        let triplets: Vec<(usize, usize, f64)> = edges
            .iter()
            .enumerate()
            .flat_map(|(e, &(i, j))| [(i, e, 1.0), (j, e, 1.0)])
            .collect();
        let incidence = CsrMatrix::from_triplets(n, edges.len(), &triplets);
        ViewContext {
            adj_norm: Arc::new(sym_normalize(graph)),
            edges: Arc::new(edges),
            heads: Arc::new(heads),
            tails: Arc::new(tails),
            incidence: Arc::new(incidence),
            num_nodes: n,
        }
    }
}

/// A sampled view: the mask and factored normalized adjacency stay on the
/// tape for gradients; `snapshot` is the same matrix materialized for
/// inspection and non-differentiable consumers.
pub struct GeneratedView {
    /// Per-edge drop probabilities, (num_edges, 1).
    pub scores: Var,
    /// Per-edge keep mask, (num_edges, 1); exactly {0,1} when sampled hard.
    pub mask: Var,
    pub adj: ViewAdj,
    pub snapshot: CsrMatrix,
}

/// One-layer GCN over the original graph followed by an edge MLP producing
/// per-edge drop probabilities in [lo, hi].
pub struct ViewGenerator {
    pub gnn_w: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
    pub bounds: (f64, f64),
    pub temperature: f64,
    pub in_dim: usize,
    pub hidden_dim: usize,
}

impl ViewGenerator {
    /// `bounds = (lo, hi)` confines drop probabilities; `temperature` is the
    /// concrete-relaxation temperature.
    pub fn init(
        store: &mut ParamStore,
        in_dim: usize,
        hidden_dim: usize,
        bounds: (f64, f64),
        temperature: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<ViewGenerator, GeneratorError> {
        let (lo, hi) = bounds;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(GeneratorError::Bounds { lo, hi });
        }
        if temperature <= 0.0 {
            return Err(GeneratorError::Temperature(temperature));
        }
        let gnn_w = store.register("gen.gnn_w", glorot(rng, in_dim, hidden_dim)).expect("fresh");
        let mlp_w1 =
            store.register("gen.mlp_w1", glorot(rng, 2 * hidden_dim, hidden_dim)).expect("fresh");
        let mlp_b1 = store.register("gen.mlp_b1", Array2::zeros((1, hidden_dim))).expect("fresh");
        let mlp_w2 = store.register("gen.mlp_w2", glorot(rng, hidden_dim, 1)).expect("fresh");
        let mlp_b2 = store.register("gen.mlp_b2", Array2::zeros((1, 1))).expect("fresh");
        Ok(ViewGenerator {
            gnn_w,
            mlp_w1,
            mlp_b1,
            mlp_w2,
            mlp_b2,
            bounds,
            temperature,
            in_dim,
            hidden_dim,
        })
    }

    /// Per-edge drop probabilities, shape (num_edges, 1), in
    /// [bounds.0, bounds.1].
    pub fn edge_scores(&self, tape: &mut Tape, vars: &ParamVars, ctx: &ViewContext, x: Var) -> Var {
        assert_eq!(tape.shape(x).1, self.in_dim, "edge_scores: feature dim mismatch");
        let xw = tape.matmul(x, vars.var(self.gnn_w));
        let pre = tape.spmm(&ctx.adj_norm, xw);
        let h = tape.relu(pre);

        let hi = tape.gather_rows(h, &ctx.heads);
        let hj = tape.gather_rows(h, &ctx.tails);
        let cat = tape.concat_cols(hi, hj);
        let z = tape.matmul(cat, vars.var(self.mlp_w1));
        let z = tape.add_row(z, vars.var(self.mlp_b1));
        let z = tape.relu(z);
        let raw = tape.matmul(z, vars.var(self.mlp_w2));
        let raw = tape.add_row(raw, vars.var(self.mlp_b2));

        let (lo, hi_b) = self.bounds;
        let sig = tape.sigmoid(raw);
        let scaled = tape.mul_scalar(sig, hi_b - lo);
        tape.add_scalar(scaled, lo)
    }

    /// Binary-concrete keep mask from drop probabilities. `noise` must be
    /// logistic draws of shape (num_edges, 1); `hard` rounds the forward
    /// value at 0.5 with a straight-through gradient.
    pub fn sample_mask(&self, tape: &mut Tape, scores: Var, noise: &Array2<f64>, hard: bool) -> Var {
        assert_eq!(tape.shape(scores), noise.dim(), "sample_mask: noise shape mismatch");
        let s = tape.clamp(scores, SCORE_EPS, 1.0 - SCORE_EPS);
        let neg = tape.mul_scalar(s, -1.0);
        let one_minus = tape.add_scalar(neg, 1.0);
        let log_s = tape.log(s);
        let log_1ms = tape.log(one_minus);
        let logit = tape.sub(log_s, log_1ms);
        let l = tape.input(noise.clone());
        let shifted = tape.add(logit, l);
        let sharp = tape.mul_scalar(shifted, 1.0 / self.temperature);
        let drop = tape.sigmoid(sharp);
        let neg_drop = tape.mul_scalar(drop, -1.0);
        let keep = tape.add_scalar(neg_drop, 1.0);
        if hard {
            tape.hard_gate(keep)
        } else {
            keep
        }
    }

    /// Full view sampling: scores, mask, and the factored normalized masked
    /// adjacency D^{-1/2} (I + M) D^{-1/2} with degrees recomputed from the
    /// mask.
    pub fn generate_view(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        ctx: &ViewContext,
        x: Var,
        noise: &Array2<f64>,
        hard: bool,
    ) -> GeneratedView {
        let scores = self.edge_scores(tape, vars, ctx, x);
        let mask = self.sample_mask(tape, scores, noise, hard);

        let deg = tape.spmm(&ctx.incidence, mask);
        let deg = tape.add_scalar(deg, 1.0);
        let sqrt_deg = tape.sqrt(deg);
        let deg_isqrt = tape.recip(sqrt_deg);

        let snapshot = masked_adjacency_csr(
            ctx.num_nodes,
            &ctx.edges,
            tape.value(mask),
            tape.value(deg_isqrt),
        );
        let adj =
            ViewAdj::Masked { edges: Arc::clone(&ctx.edges), mask, deg_isqrt };
        GeneratedView { scores, mask, adj, snapshot }
    }
}

/// Materializes D^{-1/2} (I + M) D^{-1/2} from mask values and the
/// inverse-sqrt degrees, as a plain CSR matrix.
pub fn masked_adjacency_csr(
    n: usize,
    edges: &[(usize, usize)],
    mask: &Array2<f64>,
    deg_isqrt: &Array2<f64>,
) -> CsrMatrix {
    let mut triplets = Vec::with_capacity(2 * edges.len() + n);
    for i in 0..n {
        triplets.push((i, i, deg_isqrt[(i, 0)] * deg_isqrt[(i, 0)]));
    }
    for (e, &(i, j)) in edges.iter().enumerate() {
        let w = mask[(e, 0)] * deg_isqrt[(i, 0)] * deg_isqrt[(j, 0)];
        if w != 0.0 {
            triplets.push((i, j, w));
            triplets.push((j, i, w));
        }
    }
    CsrMatrix::from_triplets(n, n, &triplets)
}

/// Standard-logistic draws, shape (m, 1): L = log u - log(1 - u).
pub fn logistic_noise(rng: &mut ChaCha8Rng, m: usize) -> Array2<f64> {
    Array2::from_shape_fn((m, 1), |_| {
        let u: f64 = rng.gen_range(f64::EPSILON..1.0);
        u.ln() - (1.0 - u).ln()
    })
}

/// Fraction of edges a mask keeps (forward value >= 0.5). Edgeless graphs
/// preserve everything vacuously.
pub fn edge_preserve_rate(mask: &Array2<f64>) -> f64 {
    if mask.is_empty() {
        return 1.0;
    }
    let kept = mask.iter().filter(|&&v| v >= 0.5).count();
    kept as f64 / mask.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::sbm_generate;
    use rand::SeedableRng;

    fn toy() -> (Graph, ViewContext) {
        // Path 0-1-2 plus edge 1-3: 4 nodes, 3 edges.
        let x = Array2::from_shape_fn((4, 2), |(i, j)| 0.3 * i as f64 - 0.2 * j as f64 + 0.1);
        let g = Graph::new(4, &[(0, 1), (1, 2), (1, 3)], x, None, None).unwrap();
        let ctx = ViewContext::new(&g);
        (g, ctx)
    }

    fn gen_with(
        bounds: (f64, f64),
        temperature: f64,
        seed: u64,
    ) -> (ParamStore, ViewGenerator) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gen =
            ViewGenerator::init(&mut store, 2, 4, bounds, temperature, &mut rng).unwrap();
        (store, gen)
    }

    #[test]
    fn init_rejects_bad_bounds_and_temperature() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(ViewGenerator::init(&mut store, 2, 4, (0.5, 0.2), 0.5, &mut rng).is_err());
        let mut store = ParamStore::new();
        assert!(ViewGenerator::init(&mut store, 2, 4, (0.0, 1.2), 0.5, &mut rng).is_err());
        let mut store = ParamStore::new();
        assert!(ViewGenerator::init(&mut store, 2, 4, (0.0, 0.5), 0.0, &mut rng).is_err());
    }

    #[test]
    fn zero_bounds_keep_every_edge() {
        let (_g, ctx) = toy();
        let (store, gen) = gen_with((0.0, 0.0), 0.5, 1);
        let mut tape = Tape::new();
        let vars = store.attach(&mut tape);
        let x = tape.input(ctx_features());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = logistic_noise(&mut rng, 3);
        let view = gen.generate_view(&mut tape, &vars, &ctx, x, &noise, true);
        let mask = tape.value(view.mask);
        assert!(mask.iter().all(|&v| v == 1.0), "drop bound 0 must keep all edges: {mask:?}");
        assert_eq!(edge_preserve_rate(mask), 1.0);
    }

    fn ctx_features() -> Array2<f64> {
        Array2::from_shape_fn((4, 2), |(i, j)| 0.3 * i as f64 - 0.2 * j as f64 + 0.1)
    }

    #[test]
    fn saturated_mlp_hits_the_upper_bound() {
        let (_g, ctx) = toy();
        let (mut store, gen) = gen_with((0.1, 0.7), 0.5, 3);
        // Huge positive output bias saturates the sigmoid.
        store.set_value(gen.mlp_b2, Array2::from_elem((1, 1), 50.0));
        let mut tape = Tape::new();
        let vars = store.attach(&mut tape);
        let x = tape.input(ctx_features());
        let s = gen.edge_scores(&mut tape, &vars, &ctx, x);
        for &v in tape.value(s) {
            assert!((v - 0.7).abs() < 1e-12, "score {v} should saturate at hi bound");
        }
    }

    #[test]
    fn edge_scores_match_a_hand_rolled_forward() {
        let (_g, ctx) = toy();
        let (mut store, gen) = gen_with((0.0, 0.6), 0.5, 4);
        // Small deterministic parameters.
        store.set_value(gen.gnn_w, Array2::from_shape_fn((2, 4), |(i, j)| {
            0.1 * (i as f64 + 1.0) - 0.05 * j as f64
        }));
        store.set_value(gen.mlp_w1, Array2::from_shape_fn((8, 4), |(i, j)| {
            0.03 * i as f64 - 0.02 * j as f64 + 0.01
        }));
        store.set_value(gen.mlp_b1, Array2::from_elem((1, 4), 0.05));
        store.set_value(gen.mlp_w2, Array2::from_shape_fn((4, 1), |(i, _)| 0.2 - 0.1 * i as f64));
        store.set_value(gen.mlp_b2, Array2::from_elem((1, 1), -0.1));

        let mut tape = Tape::new();
        let vars = store.attach(&mut tape);
        let x = tape.input(ctx_features());
        let s = gen.edge_scores(&mut tape, &vars, &ctx, x);
        let got = tape.value(s);

        // Independent recomputation with plain ndarray ops.
        let xf = ctx_features();
        let h_pre = ctx.adj_norm.matmul_dense(&xf.dot(store.value(gen.gnn_w)));
        let h = h_pre.mapv(|v| v.max(0.0));
        for (e, &(i, j)) in ctx.edges.iter().enumerate() {
            let mut cat = Vec::with_capacity(8);
            cat.extend(h.row(i).iter().copied());
            cat.extend(h.row(j).iter().copied());
            let cat = Array2::from_shape_vec((1, 8), cat).unwrap();
            let z =
                (cat.dot(store.value(gen.mlp_w1)) + store.value(gen.mlp_b1)).mapv(|v| v.max(0.0));
            let raw = (z.dot(store.value(gen.mlp_w2)) + store.value(gen.mlp_b2))[(0, 0)];
            let want = 0.6 / (1.0 + (-raw).exp());
            assert!(
                (got[(e, 0)] - want).abs() < 1e-12,
                "edge {e}: got {} want {want}",
                got[(e, 0)]
            );
        }
    }

    #[test]
    fn hard_masks_are_binary_and_keep_rate_is_calibrated() {
        // With drop probability s, the hard mask keeps an edge with
        // probability exactly 1 - s: P(sigmoid((logit s + L)/t) < 1/2)
        // = P(L < -logit s) = 1 - s for logistic L, any temperature.
        let (_g, _ctx) = toy();
        let (_store, gen) = gen_with((0.0, 1.0), 0.1, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let draws = 10_000usize;
        for s in [0.1, 0.5, 0.9] {
            let mut kept = 0usize;
            for _ in 0..draws {
                let mut tape = Tape::new();
                let sv = tape.input(Array2::from_elem((1, 1), s));
                let noise = logistic_noise(&mut rng, 1);
                let m = gen.sample_mask(&mut tape, sv, &noise, true);
                let v = tape.value(m)[(0, 0)];
                assert!(v == 0.0 || v == 1.0, "hard mask must be binary, got {v}");
                if v == 1.0 {
                    kept += 1;
                }
            }
            let rate = kept as f64 / draws as f64;
            let sd = (s * (1.0 - s) / draws as f64).sqrt();
            assert!(
                (rate - (1.0 - s)).abs() < 4.0 * sd,
                "s = {s}: keep rate {rate} vs expected {} (4 sigma = {})",
                1.0 - s,
                4.0 * sd
            );
        }
    }

    #[test]
    fn soft_mask_gradients_pass_finite_differences() {
        let (_g, ctx) = toy();
        let (mut store, gen) = gen_with((0.05, 0.8), 0.7, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let noise = logistic_noise(&mut rng, 3);
        let report = crate::autodiff::grad_check(&mut store, 1e-6, |tape, vars| {
            let x = tape.input(ctx_features());
            let scores = gen.edge_scores(tape, vars, &ctx, x);
            let mask = gen.sample_mask(tape, scores, &noise, false);
            tape.reduce_mean(mask)
        })
        .unwrap();
        assert!(
            report.max_rel_err < 1e-5,
            "max rel err {} on `{}`",
            report.max_rel_err,
            report.worst_param
        );
    }

    #[test]
    fn all_kept_view_equals_the_original_normalization() {
        // Drop bound 0 forces mask = 1 (hard), so the masked normalization
        // must reproduce sym_normalize of the original graph exactly.
        let g = sbm_generate(&[6, 6], 0.7, 0.3, 4, 0.4, 11).unwrap();
        let ctx = ViewContext::new(&g);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let gen = ViewGenerator::init(&mut store, 4, 4, (0.0, 0.0), 0.5, &mut rng).unwrap();
        let mut tape = Tape::new();
        let vars = store.attach(&mut tape);
        let x = tape.input(g.features().clone());
        let noise = logistic_noise(&mut rng, ctx.edges.len());
        let view = gen.generate_view(&mut tape, &vars, &ctx, x, &noise, true);

        let want = sym_normalize(&g).to_dense();
        let got = view.snapshot.to_dense();
        let max_diff = (&want - &got).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        assert!(max_diff < 1e-12, "max diff {max_diff}");
        assert!(view.snapshot.is_symmetric());

        // The factored tape path must agree with the snapshot.
        let y = Array2::from_shape_fn((12, 4), |(i, j)| (i + j) as f64 * 0.1 - 0.3);
        let yv = tape.input(y.clone());
        let through = view.adj.propagate(&mut tape, yv);
        let direct = view.snapshot.matmul_dense(&y);
        let diff = (tape.value(through) - &direct).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        assert!(diff < 1e-12, "factored vs snapshot diff {diff}");
    }

    #[test]
    fn masked_view_matches_a_dense_oracle() {
        // Random soft mask: build D^{-1/2}(I + M)D^{-1/2} densely and compare
        // both the snapshot and the factored propagate path.
        let (g, ctx) = toy();
        let n = g.num_nodes();
        let mask = Array2::from_shape_vec((3, 1), vec![0.9, 0.4, 0.0]).unwrap();

        let mut dense = Array2::<f64>::eye(n);
        for (e, &(i, j)) in ctx.edges.iter().enumerate() {
            dense[(i, j)] = mask[(e, 0)];
            dense[(j, i)] = mask[(e, 0)];
        }
        let deg: Vec<f64> = (0..n).map(|i| dense.row(i).sum()).collect();
        let mut want = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                want[(i, j)] = dense[(i, j)] / (deg[i] * deg[j]).sqrt();
            }
        }

        let mut tape = Tape::new();
        let mv = tape.input(mask.clone());
        let deg_t = tape.spmm(&ctx.incidence, mv);
        let deg_t = tape.add_scalar(deg_t, 1.0);
        let sq = tape.sqrt(deg_t);
        let dinv = tape.recip(sq);
        let snapshot = masked_adjacency_csr(n, &ctx.edges, &mask, tape.value(dinv));
        let diff =
            (&want - &snapshot.to_dense()).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        assert!(diff < 1e-12, "snapshot diff {diff}");

        let y = Array2::from_shape_fn((n, 2), |(i, j)| i as f64 - 0.5 * j as f64);
        let yv = tape.input(y.clone());
        let adj = ViewAdj::Masked { edges: Arc::clone(&ctx.edges), mask: mv, deg_isqrt: dinv };
        let through = adj.propagate(&mut tape, yv);
        let direct = want.dot(&y);
        let pdiff = (tape.value(through) - &direct).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        assert!(pdiff < 1e-12, "propagate diff {pdiff}");
    }

    #[test]
    fn preserve_rate_counts_the_forward_mask() {
        let m = Array2::from_shape_vec((4, 1), vec![1.0, 0.0, 0.6, 0.49]).unwrap();
        assert_eq!(edge_preserve_rate(&m), 0.5);
        assert_eq!(edge_preserve_rate(&Array2::zeros((0, 1))), 1.0);
    }

    #[test]
    fn view_sampling_is_deterministic_given_seed() {
        let (_g, ctx) = toy();
        let (store, gen) = gen_with((0.0, 0.9), 0.5, 13);
        let run = || {
            let mut tape = Tape::new();
            let vars = store.attach(&mut tape);
            let x = tape.input(ctx_features());
            let mut rng = ChaCha8Rng::seed_from_u64(14);
            let noise = logistic_noise(&mut rng, 3);
            let view = gen.generate_view(&mut tape, &vars, &ctx, x, &noise, true);
            (tape.value(view.mask).clone(), view.snapshot.to_dense())
        };
        let (m1, s1) = run();
        let (m2, s2) = run();
        assert_eq!(m1, m2);
        assert_eq!(s1, s2);
    }
}
