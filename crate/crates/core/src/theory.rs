//! Numerical verification of the framework's checkable identities on
//! exactly enumerable toy instances: the latent-class risk decomposition,
//! the class-collision probability, the mean-classifier-versus-logistic-
//! regression inequality, and the data processing inequality. Everything
//! here is exact enumeration or deterministic descent; nothing is sampled.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Largest total support size `contrastive_risk` will enumerate.
pub const DEFAULT_ENUM_CAP: usize = 50;

#[derive(Debug, thiserror::Error)]
pub enum TheoryError {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("support of {size} nodes exceeds the enumeration cap {cap}")]
    SupportTooLarge { size: usize, cap: usize },
    #[error("class {0} has no examples")]
    EmptyClass(usize),
}

fn check_simplex(p: &[f64], what: &str) -> Result<(), TheoryError> {
    if p.is_empty() {
        return Err(TheoryError::InvalidDistribution(format!("{what} is empty")));
    }
    if p.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(TheoryError::InvalidDistribution(format!("{what} has entries outside [0,1]")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(TheoryError::InvalidDistribution(format!("{what} sums to {s}, expected 1")));
    }
    Ok(())
}

/// Probability of drawing the same latent class twice from `rho`.
pub fn tau(rho: &[f64]) -> Result<f64, TheoryError> {
    check_simplex(rho, "rho")?;
    Ok(rho.iter().map(|&p| p * p).sum())
}

/// Finite latent-class sampling scheme: classes with probabilities `rho`,
/// per-class node distributions, and an explicit embedding per node.
#[derive(Debug, Clone)]
pub struct LatentClassSpec {
    pub rho: Vec<f64>,
    /// Per class: (node index, probability) pairs summing to 1.
    pub supports: Vec<Vec<(usize, f64)>>,
    /// Row v = embedding of node v.
    pub embeddings: Array2<f64>,
}

impl LatentClassSpec {
    pub fn validate(&self) -> Result<(), TheoryError> {
        check_simplex(&self.rho, "rho")?;
        if self.supports.len() != self.rho.len() {
            return Err(TheoryError::InvalidDistribution(format!(
                "{} supports for {} classes",
                self.supports.len(),
                self.rho.len()
            )));
        }
        for (c, support) in self.supports.iter().enumerate() {
            let probs: Vec<f64> = support.iter().map(|&(_, p)| p).collect();
            check_simplex(&probs, &format!("support of class {c}"))?;
            for &(v, _) in support {
                if v >= self.embeddings.nrows() {
                    return Err(TheoryError::InvalidDistribution(format!(
                        "class {c} references node {v} outside the embedding table"
                    )));
                }
            }
        }
        Ok(())
    }

    fn support_size(&self) -> usize {
        self.supports.iter().map(Vec::len).sum()
    }

    /// Random spec for property tests and sweeps: up to `max_classes`
    /// classes, up to `max_nodes` support nodes each, `dim`-dimensional
    /// embeddings in [-1, 1].
    pub fn random(
        rng: &mut ChaCha8Rng,
        max_classes: usize,
        max_nodes: usize,
        dim: usize,
    ) -> LatentClassSpec {
        let k = rng.gen_range(1..=max_classes.max(1));
        let rho = random_simplex(rng, k);
        let mut supports = Vec::with_capacity(k);
        let mut next_node = 0usize;
        for _ in 0..k {
            let n = rng.gen_range(1..=max_nodes.max(1));
            let probs = random_simplex(rng, n);
            supports.push(
                probs
                    .into_iter()
                    .map(|p| {
                        let v = next_node;
                        next_node += 1;
                        (v, p)
                    })
                    .collect(),
            );
        }
        let embeddings =
            Array2::from_shape_fn((next_node, dim), |_| rng.gen_range(-1.0..1.0));
        LatentClassSpec { rho, supports, embeddings }
    }
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| -rng.gen_range(f64::EPSILON..1.0f64).ln()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Loss applied to the margin f(v) . (f(v+) - f(v-)).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossForm {
    /// log(1 + e^{-x})
    Logistic,
    /// max(0, 1 - x)
    Hinge,
}

impl LossForm {
    pub fn value(self, x: f64) -> f64 {
        match self {
            // ln(1 + e^{-x}) computed stably for large |x|.
            LossForm::Logistic => (-x).max(0.0) + (-(-x).abs()).exp().ln_1p(),
            LossForm::Hinge => (1.0 - x).max(0.0),
        }
    }
}

/// Exact unconditional and class-conditional contrastive risks.
#[derive(Debug, Clone, Copy)]
pub struct RiskDecomposition {
    pub l_p: f64,
    /// E[loss | c+ != c-]; zero when only one class exists.
    pub l_p_neq: f64,
    /// E[loss | c+ = c-].
    pub l_p_eq: f64,
    pub tau: f64,
}

/// Enumerates E over (c+, c-) ~ rho^2, v, v+ ~ D_{c+}, v- ~ D_{c-} exactly.
/// The unconditional risk and both conditional risks are separate sums, so
/// the decomposition identity is a real consistency check.
pub fn contrastive_risk(
    spec: &LatentClassSpec,
    loss: LossForm,
    cap: usize,
) -> Result<RiskDecomposition, TheoryError> {
    spec.validate()?;
    let size = spec.support_size();
    if size > cap {
        return Err(TheoryError::SupportTooLarge { size, cap });
    }
    let t = tau(&spec.rho)?;
    let emb = &spec.embeddings;
    let margin = |v: usize, vp: usize, vn: usize| {
        let mut x = 0.0;
        for d in 0..emb.ncols() {
            x += emb[(v, d)] * (emb[(vp, d)] - emb[(vn, d)]);
        }
        loss.value(x)
    };
    // Per-(c+, c-) inner expectation over the three node draws.
    let pair_risk = |cp: usize, cn: usize| {
        let mut acc = 0.0;
        for &(v, p_v) in &spec.supports[cp] {
            for &(vp, p_vp) in &spec.supports[cp] {
                for &(vn, p_vn) in &spec.supports[cn] {
                    acc += p_v * p_vp * p_vn * margin(v, vp, vn);
                }
            }
        }
        acc
    };
    let k = spec.rho.len();
    let mut l_p = 0.0;
    let mut joint_neq = 0.0;
    let mut joint_eq = 0.0;
    for cp in 0..k {
        for cn in 0..k {
            let w = spec.rho[cp] * spec.rho[cn];
            if w == 0.0 {
                continue;
            }
            let r = w * pair_risk(cp, cn);
            l_p += r;
            if cp == cn {
                joint_eq += r;
            } else {
                joint_neq += r;
            }
        }
    }
    let l_p_neq = if t < 1.0 { joint_neq / (1.0 - t) } else { 0.0 };
    let l_p_eq = if t > 0.0 { joint_eq / t } else { 0.0 };
    Ok(RiskDecomposition { l_p, l_p_neq, l_p_eq, tau: t })
}

/// Outcome of the mean-init-versus-trained logistic regression check.
#[derive(Debug, Clone, Copy)]
pub struct MeanVsLr {
    /// Cross-entropy at the class-mean initialization.
    pub initial_loss: f64,
    /// Cross-entropy after backtracking gradient descent.
    pub final_loss: f64,
    pub holds: bool,
}

fn softmax_ce(emb: &Array2<f64>, labels: &[usize], w: &Array2<f64>) -> f64 {
    let logits = emb.dot(w);
    let mut total = 0.0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[labels[i]];
    }
    total / labels.len() as f64
}

fn ce_grad(emb: &Array2<f64>, labels: &[usize], w: &Array2<f64>) -> Array2<f64> {
    let mut p = emb.dot(w);
    for (i, mut row) in p.rows_mut().into_iter().enumerate() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
        row[labels[i]] -= 1.0;
    }
    emb.t().dot(&p).mapv(|v| v / labels.len() as f64)
}

/// Initializes a bias-free logistic regression at the class means (column k
/// of W is mu_k) and runs `steps` of backtracking-line-search gradient
/// descent. Descent is monotone by construction, so the final loss can
/// never exceed the mean-classifier loss.
pub fn check_mean_vs_lr(
    embeddings: &Array2<f64>,
    labels: &[usize],
    num_classes: usize,
    steps: usize,
) -> Result<MeanVsLr, TheoryError> {
    assert_eq!(embeddings.nrows(), labels.len());
    let d = embeddings.ncols();
    let mut w = Array2::<f64>::zeros((d, num_classes));
    let mut counts = vec![0usize; num_classes];
    for (&l, row) in labels.iter().zip(embeddings.rows()) {
        counts[l] += 1;
        for c in 0..d {
            w[(c, l)] += row[c];
        }
    }
    for (k, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(TheoryError::EmptyClass(k));
        }
        for c in 0..d {
            w[(c, k)] /= count as f64;
        }
    }

    let initial_loss = softmax_ce(embeddings, labels, &w);
    let mut loss = initial_loss;
    for _ in 0..steps {
        let g = ce_grad(embeddings, labels, &w);
        let g_sq: f64 = g.iter().map(|v| v * v).sum();
        if g_sq == 0.0 {
            break;
        }
        // Armijo backtracking: halve until sufficient decrease.
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = &w - &g.mapv(|v| t * v);
            let cand_loss = softmax_ce(embeddings, labels, &cand);
            if cand_loss <= loss - 1e-4 * t * g_sq {
                accepted = Some((cand, cand_loss));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, cand_loss)) = accepted else { break };
        debug_assert!(cand_loss <= loss, "backtracking step increased the loss");
        w = cand;
        loss = cand_loss;
    }
    Ok(MeanVsLr { initial_loss, final_loss: loss, holds: loss <= initial_loss })
}

/// Finite Markov chain X -> Y -> Z given by the X marginal and two
/// row-stochastic transition matrices.
#[derive(Debug, Clone)]
pub struct DiscreteChannelChain {
    pub px: Vec<f64>,
    pub xy: Array2<f64>,
    pub yz: Array2<f64>,
}

impl DiscreteChannelChain {
    pub fn validate(&self) -> Result<(), TheoryError> {
        check_simplex(&self.px, "p(x)")?;
        if self.xy.nrows() != self.px.len() {
            return Err(TheoryError::InvalidDistribution(
                "p(x) length does not match the X->Y channel".into(),
            ));
        }
        if self.yz.nrows() != self.xy.ncols() {
            return Err(TheoryError::InvalidDistribution(
                "X->Y output alphabet does not match the Y->Z input".into(),
            ));
        }
        for (name, m) in [("X->Y", &self.xy), ("Y->Z", &self.yz)] {
            for (i, row) in m.rows().into_iter().enumerate() {
                let r: Vec<f64> = row.iter().copied().collect();
                check_simplex(&r, &format!("{name} row {i}"))?;
            }
        }
        Ok(())
    }

    /// Random chain with the given alphabet sizes.
    pub fn random(rng: &mut ChaCha8Rng, nx: usize, ny: usize, nz: usize) -> DiscreteChannelChain {
        let px = random_simplex(rng, nx);
        let mut xy = Array2::<f64>::zeros((nx, ny));
        for mut row in xy.rows_mut() {
            let r = random_simplex(rng, ny);
            for (c, v) in r.into_iter().enumerate() {
                row[c] = v;
            }
        }
        let mut yz = Array2::<f64>::zeros((ny, nz));
        for mut row in yz.rows_mut() {
            let r = random_simplex(rng, nz);
            for (c, v) in r.into_iter().enumerate() {
                row[c] = v;
            }
        }
        DiscreteChannelChain { px, xy, yz }
    }
}

/// Mutual information of an exact joint, 0 log 0 = 0, natural log.
fn mutual_information(joint: &Array2<f64>, pa: &[f64], pb: &[f64]) -> f64 {
    let mut mi = 0.0;
    for i in 0..joint.nrows() {
        for j in 0..joint.ncols() {
            let p = joint[(i, j)];
            if p > 0.0 {
                mi += p * (p / (pa[i] * pb[j])).ln();
            }
        }
    }
    mi
}

/// Result of one data-processing-inequality check.
#[derive(Debug, Clone, Copy)]
pub struct DpiReport {
    pub i_xy: f64,
    pub i_yz: f64,
    pub i_xz: f64,
    pub holds: bool,
}

/// Composes the exact joints of the chain and checks
/// I(X;Z) <= min(I(X;Y), I(Y;Z)) with 1e-12 slack.
pub fn check_dpi(chain: &DiscreteChannelChain) -> Result<DpiReport, TheoryError> {
    chain.validate()?;
    let (nx, ny) = chain.xy.dim();
    let nz = chain.yz.ncols();

    let mut joint_xy = Array2::<f64>::zeros((nx, ny));
    for i in 0..nx {
        for j in 0..ny {
            joint_xy[(i, j)] = chain.px[i] * chain.xy[(i, j)];
        }
    }
    let py: Vec<f64> = (0..ny).map(|j| (0..nx).map(|i| joint_xy[(i, j)]).sum()).collect();

    let mut joint_yz = Array2::<f64>::zeros((ny, nz));
    for j in 0..ny {
        for k in 0..nz {
            joint_yz[(j, k)] = py[j] * chain.yz[(j, k)];
        }
    }
    let mut joint_xz = Array2::<f64>::zeros((nx, nz));
    for i in 0..nx {
        for j in 0..ny {
            let pij = joint_xy[(i, j)];
            if pij == 0.0 {
                continue;
            }
            for k in 0..nz {
                joint_xz[(i, k)] += pij * chain.yz[(j, k)];
            }
        }
    }
    let pz: Vec<f64> = (0..nz).map(|k| (0..ny).map(|j| joint_yz[(j, k)]).sum()).collect();

    let i_xy = mutual_information(&joint_xy, &chain.px, &py);
    let i_yz = mutual_information(&joint_yz, &py, &pz);
    let i_xz = mutual_information(&joint_xz, &chain.px, &pz);
    Ok(DpiReport { i_xy, i_yz, i_xz, holds: i_xz <= i_xy.min(i_yz) + 1e-12 })
}
