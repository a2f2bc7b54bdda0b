//! Contrastive and variational objectives.
//!
//! Similarities are cosines between projected rows. The per-node contrastive
//! loss for anchor i in the first view scores the positive pair of projected
//! means against two negative pools: inter-view pairs that contrast the
//! *sampled* anchor with the other view's means, and intra-view pairs among
//! the anchor view's means. The KL term closes each latent dimension toward
//! a standard normal.
//!
//! All log-sum-exp reductions shift by the row maximum. The shift enters the
//! tape as a constant, which leaves gradients exact: d/dx [log sum exp(x-c)
//! + c] equals softmax(x) for any constant c.

use std::str::FromStr;
use std::sync::Arc;

use ndarray::Array2;

use crate::autodiff::{ParamStore, ParamVars, Tape, Var};
use crate::encoder::{EncodeOut, ProjectionHead, NORM_FLOOR};

/// What the generator descends: the KL of the generated view, or the
/// negated contrastive loss (pure adversary).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorObjective {
    Kl,
    InfoNce,
}

impl FromStr for GeneratorObjective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "kl" => Ok(GeneratorObjective::Kl),
            "infonce" => Ok(GeneratorObjective::InfoNce),
            other => Err(format!("unknown generator objective `{other}` (expected kl|infonce)")),
        }
    }
}

impl std::fmt::Display for GeneratorObjective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GeneratorObjective::Kl => "kl",
            GeneratorObjective::InfoNce => "infonce",
        })
    }
}

/// Numerically stable log(sum_i exp(xs_i)).
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Cosine similarity of two rows after projection, the score the
/// contrastive loss is built from.
pub fn similarity(head: &ProjectionHead, store: &ParamStore, x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), head.dim);
    assert_eq!(y.len(), head.dim);
    let xa = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row");
    let ya = Array2::from_shape_vec((1, y.len()), y.to_vec()).expect("row");
    let px = head.project_plain(store, &xa);
    let py = head.project_plain(store, &ya);
    let dot: f64 = px.row(0).dot(&py.row(0));
    let nx = px.row(0).dot(&px.row(0)).sqrt().max(NORM_FLOOR);
    let ny = py.row(0).dot(&py.row(0)).sqrt().max(NORM_FLOOR);
    dot / (nx * ny)
}

/// Per-node contrastive loss for anchor `i`, given already-projected and
/// row-normalized matrices: `p_u` the sampled anchor view, `p_u_mu` its
/// means, `p_v_mu` the other view's means.
pub fn l1(
    i: usize,
    p_u: &Array2<f64>,
    p_u_mu: &Array2<f64>,
    p_v_mu: &Array2<f64>,
    tau: f64,
) -> f64 {
    let n = p_u.nrows();
    assert!(tau > 0.0, "temperature must be positive");
    assert!(i < n);
    let pos = p_u_mu.row(i).dot(&p_v_mu.row(i)) / tau;
    let mut terms = Vec::with_capacity(2 * n - 1);
    terms.push(pos);
    for k in 0..n {
        if k == i {
            continue;
        }
        terms.push(p_u.row(i).dot(&p_v_mu.row(k)) / tau);
        terms.push(p_u_mu.row(i).dot(&p_u_mu.row(k)) / tau);
    }
    logsumexp(&terms) - pos
}

/// Per-dimension KL(N(mu, sigma^2) || N(0, 1)) summed over dimensions for
/// one row.
pub fn l2_kl(mu: &[f64], sigma: &[f64]) -> f64 {
    assert_eq!(mu.len(), sigma.len());
    mu.iter()
        .zip(sigma)
        .map(|(&m, &s)| 0.5 * (s * s + m * m - 2.0 * s.ln() - 1.0))
        .sum()
}

/// Off-diagonal mask (ones with a zero diagonal), shared by the negative
/// pools. Callers cache this per node count.
pub fn offdiag_mask(n: usize) -> Arc<Array2<f64>> {
    Arc::new(Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { 1.0 }))
}

/// One direction of the contrastive loss on the tape: per-node losses,
/// shape (n, 1). `pos` is (n, 1); `inter` and `intra` are (n, n) similarity
/// matrices whose diagonals are excluded from the negative pools.
fn nce_direction(
    tape: &mut Tape,
    pos: Var,
    inter: Var,
    intra: Var,
    tau: f64,
    offdiag: &Arc<Array2<f64>>,
) -> Var {
    let n = tape.shape(pos).0;
    assert_eq!(tape.shape(inter), (n, n));
    assert_eq!(tape.shape(intra), (n, n));
    let x_pos = tape.mul_scalar(pos, 1.0 / tau);
    let x_inter = tape.mul_scalar(inter, 1.0 / tau);
    let x_intra = tape.mul_scalar(intra, 1.0 / tau);

    // Row-max over every term that enters the denominator, as a constant.
    let mut shift = Array2::<f64>::zeros((n, 1));
    {
        let pv = tape.value(x_pos);
        let bv = tape.value(x_inter);
        let cv = tape.value(x_intra);
        for i in 0..n {
            let mut m = pv[(i, 0)];
            for k in 0..n {
                if k != i {
                    m = m.max(bv[(i, k)]).max(cv[(i, k)]);
                }
            }
            shift[(i, 0)] = m;
        }
    }
    let neg_shift = tape.input(shift.mapv(|v| -v));
    let shift_c = tape.input(shift);

    let pos_shifted = tape.add(x_pos, neg_shift);
    let e_pos = tape.exp(pos_shifted);
    let inter_shifted = tape.add_col(x_inter, neg_shift);
    let e_inter = tape.exp(inter_shifted);
    let e_inter = tape.mul_const(e_inter, offdiag);
    let intra_shifted = tape.add_col(x_intra, neg_shift);
    let e_intra = tape.exp(intra_shifted);
    let e_intra = tape.mul_const(e_intra, offdiag);

    let sum_inter = tape.sum_cols(e_inter);
    let sum_intra = tape.sum_cols(e_intra);
    let negs = tape.add(sum_inter, sum_intra);
    let denom = tape.add(e_pos, negs);
    let log_denom = tape.log(denom);
    let lse = tape.add(log_denom, shift_c);
    tape.sub(lse, x_pos)
}

/// Everything the two players of one iteration descend.
pub struct LossBundle {
    pub j1: Var,
    pub j2: Var,
    pub j2_prime: Var,
    pub encoder_loss: Var,
    pub generator_loss: Var,
}

/// Per-node KL terms, shape (n, 1).
pub fn kl_per_node(tape: &mut Tape, mu: Var, sigma: Var) -> Var {
    let sq_mu = tape.square(mu);
    let sq_sig = tape.square(sigma);
    let log_sig = tape.log(sigma);
    let two_log = tape.mul_scalar(log_sig, 2.0);
    let sum = tape.add(sq_sig, sq_mu);
    let diff = tape.sub(sum, two_log);
    let inner = tape.add_scalar(diff, -1.0);
    let half = tape.mul_scalar(inner, 0.5);
    tape.sum_cols(half)
}

/// Builds J1, J2, J2' and both players' objectives from two encoded views.
/// `offdiag` must come from [`offdiag_mask`] at the graph's node count.
#[allow(clippy::too_many_arguments)]
pub fn build_losses(
    tape: &mut Tape,
    view_u: &EncodeOut,
    view_v: &EncodeOut,
    head: &ProjectionHead,
    vars: &ParamVars,
    tau: f64,
    lambda: f64,
    objective: GeneratorObjective,
    offdiag: &Arc<Array2<f64>>,
) -> LossBundle {
    assert!(tau > 0.0, "temperature must be positive");
    let p_u = head.project_normalized(tape, vars, view_u.u);
    let p_u_mu = head.project_normalized(tape, vars, view_u.mu);
    let p_v = head.project_normalized(tape, vars, view_v.u);
    let p_v_mu = head.project_normalized(tape, vars, view_v.mu);

    let prod = tape.mul(p_u_mu, p_v_mu);
    let pos = tape.sum_cols(prod);

    let inter_u = tape.matmul_nt(p_u, p_v_mu);
    let intra_u = tape.matmul_nt(p_u_mu, p_u_mu);
    let loss_u = nce_direction(tape, pos, inter_u, intra_u, tau, offdiag);

    let inter_v = tape.matmul_nt(p_v, p_u_mu);
    let intra_v = tape.matmul_nt(p_v_mu, p_v_mu);
    let loss_v = nce_direction(tape, pos, inter_v, intra_v, tau, offdiag);

    let mean_u = tape.reduce_mean(loss_u);
    let mean_v = tape.reduce_mean(loss_v);
    let both = tape.add(mean_u, mean_v);
    let j1 = tape.mul_scalar(both, 0.5);

    let kl_u = kl_per_node(tape, view_u.mu, view_u.sigma);
    let kl_v = kl_per_node(tape, view_v.mu, view_v.sigma);
    let mean_kl_u = tape.reduce_mean(kl_u);
    let mean_kl_v = tape.reduce_mean(kl_v);
    let kl_both = tape.add(mean_kl_u, mean_kl_v);
    let j2 = tape.mul_scalar(kl_both, 0.5);
    let j2_prime = mean_kl_u;

    let weighted = tape.mul_scalar(j2, lambda);
    let encoder_loss = tape.add(j1, weighted);
    let generator_loss = match objective {
        GeneratorObjective::Kl => j2_prime,
        GeneratorObjective::InfoNce => tape.mul_scalar(j1, -1.0),
    };
    LossBundle { j1, j2, j2_prime, encoder_loss, generator_loss }
}
