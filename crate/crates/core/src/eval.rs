//! Downstream protocols on frozen embeddings: the linear probe, the mean
//! classifier, link prediction metrics, and the empirical generalization
//! gap between pretext and downstream loss curves.

use ndarray::Array2;
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::LinkSplit;
use crate::losses::logsumexp;

/// Train fraction of the node-classification protocol.
pub const PROBE_TRAIN_FRACTION: f64 = 0.10;

/// L2 penalty grid searched by cross-validation.
pub const PENALTY_GRID: [f64; 7] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2];

const PROBE_FOLDS: usize = 5;
const PROBE_STEPS: usize = 500;
const PROBE_LR: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("class {0} has no training examples")]
    EmptyClass(usize),
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("first-epoch loss is zero; cannot normalize")]
    ZeroBaseline,
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("labels required for this protocol")]
    MissingLabels,
}

/// Micro-averaged F1. For single-label multiclass prediction this is
/// exactly accuracy: global TP / total.
pub fn f1_micro(pred: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "f1_micro: length mismatch");
    assert!(!pred.is_empty(), "f1_micro: empty input");
    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    correct as f64 / pred.len() as f64
}

/// Sample mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    assert!(!values.is_empty());
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One metric across seeds/splits with its summary statistics.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricSeries {
    pub metric: String,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl MetricSeries {
    pub fn new(metric: impl Into<String>, values: Vec<f64>) -> MetricSeries {
        let (mean, std) = mean_std(&values);
        MetricSeries { metric: metric.into(), values, mean, std }
    }
}

/// Evaluation result for one task, serialized to JSON by the CLI.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub series: Vec<MetricSeries>,
}

fn l2_normalize_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let norm: f64 = row.dot(&row).sqrt().max(1e-12);
        row.mapv_inplace(|v| v / norm);
    }
    out
}

fn take_rows(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((idx.len(), x.ncols()), |(r, c)| x[(idx[r], c)])
}

fn take_labels(labels: &[usize], idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| labels[i]).collect()
}

/// Multinomial logistic regression by full-batch gradient descent with an
/// L2 penalty on the weights (bias unpenalized). Deterministic: zero init,
/// fixed step count.
fn softmax_regression(
    x: &Array2<f64>,
    labels: &[usize],
    num_classes: usize,
    penalty: f64,
    steps: usize,
    lr: f64,
) -> (Array2<f64>, Array2<f64>) {
    let (n, d) = x.dim();
    let mut w = Array2::<f64>::zeros((d, num_classes));
    let mut b = Array2::<f64>::zeros((1, num_classes));
    let nf = n as f64;
    for _ in 0..steps {
        let mut p = x.dot(&w) + &b;
        for (i, mut row) in p.rows_mut().into_iter().enumerate() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
            row[labels[i]] -= 1.0;
        }
        let grad_w = x.t().dot(&p).mapv(|v| v / nf) + &w.mapv(|v| penalty * v);
        let grad_b = {
            let mut g = Array2::<f64>::zeros((1, num_classes));
            for row in p.rows() {
                for (k, v) in row.iter().enumerate() {
                    g[(0, k)] += v;
                }
            }
            g.mapv(|v| v / nf)
        };
        w -= &grad_w.mapv(|v| lr * v);
        b -= &grad_b.mapv(|v| lr * v);
    }
    (w, b)
}

fn predict_logits(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .expect("nonempty row")
                .0
        })
        .collect()
}

/// Training indices for the probe: a plain random draw of `fraction`, redrawn
/// stratified (at least one node per class) if any class came up empty.
pub(crate) fn probe_train_split(
    labels: &[usize],
    num_classes: usize,
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let n = labels.len();
    let want = ((n as f64 * fraction).round() as usize).max(1).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let plain: Vec<usize> = order[..want].to_vec();
    let mut present = vec![false; num_classes];
    for &i in &plain {
        present[labels[i]] = true;
    }
    if present.iter().all(|&p| p) {
        return plain;
    }
    // Stratified redraw: proportional per class, at least one each.
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for &i in &order {
        by_class[labels[i]].push(i);
    }
    let mut train = Vec::with_capacity(want + num_classes);
    for members in by_class.iter().filter(|m| !m.is_empty()) {
        let quota = ((members.len() as f64 * fraction).round() as usize)
            .max(1)
            .min(members.len());
        train.extend_from_slice(&members[..quota]);
    }
    train.sort_unstable();
    train
}

/// Node-classification protocol: freeze and row-normalize embeddings, fit an
/// L2-regularized softmax probe on a `fraction` train split (penalty chosen
/// by 5-fold cross-validation), and score F1-micro on the held-out rest.
pub fn linear_probe(
    embeddings: &Array2<f64>,
    labels: &[usize],
    num_classes: usize,
    fraction: f64,
    seed: u64,
) -> Result<f64, EvalError> {
    assert_eq!(embeddings.nrows(), labels.len(), "linear_probe: label count mismatch");
    let z = l2_normalize_rows(embeddings);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = probe_train_split(labels, num_classes, fraction, &mut rng);
    let in_train: std::collections::HashSet<usize> = train.iter().copied().collect();
    let test: Vec<usize> = (0..labels.len()).filter(|i| !in_train.contains(i)).collect();
    if test.is_empty() {
        return Err(EvalError::EmptySet("test"));
    }

    // 5-fold CV over the penalty grid; ties resolve to the smaller penalty.
    let mut shuffled = train.clone();
    shuffled.shuffle(&mut rng);
    let mut best = (PENALTY_GRID[0], f64::NEG_INFINITY);
    for &penalty in &PENALTY_GRID {
        let mut scores = Vec::with_capacity(PROBE_FOLDS);
        for fold in 0..PROBE_FOLDS {
            let val: Vec<usize> = shuffled
                .iter()
                .enumerate()
                .filter(|(pos, _)| pos % PROBE_FOLDS == fold)
                .map(|(_, &i)| i)
                .collect();
            let fit: Vec<usize> = shuffled
                .iter()
                .enumerate()
                .filter(|(pos, _)| pos % PROBE_FOLDS != fold)
                .map(|(_, &i)| i)
                .collect();
            if val.is_empty() || fit.is_empty() {
                continue;
            }
            let (w, b) = softmax_regression(
                &take_rows(&z, &fit),
                &take_labels(labels, &fit),
                num_classes,
                penalty,
                PROBE_STEPS,
                PROBE_LR,
            );
            let logits = take_rows(&z, &val).dot(&w) + &b;
            // The stiffest grid penalties can blow up at the fixed step
            // size; a diverged fold scores zero and loses the selection.
            if logits.iter().any(|v| !v.is_finite()) {
                scores.push(0.0);
                continue;
            }
            scores.push(f1_micro(&predict_logits(&logits), &take_labels(labels, &val)));
        }
        if !scores.is_empty() {
            let mean = scores.iter().sum::<f64>() / scores.len() as f64;
            if mean > best.1 {
                best = (penalty, mean);
            }
        }
    }

    let (w, b) = softmax_regression(
        &take_rows(&z, &train),
        &take_labels(labels, &train),
        num_classes,
        best.0,
        PROBE_STEPS,
        PROBE_LR,
    );
    let logits = take_rows(&z, &test).dot(&w) + &b;
    Ok(f1_micro(&predict_logits(&logits), &take_labels(labels, &test)))
}

/// Prediction rule of the [`MeanClassifier`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeanRule {
    /// argmax_k <mu_k, z> (row-parameter reading).
    Inner,
    /// argmin_k |z - mu_k| (distance reading).
    Euclidean,
}

/// Classifier whose k-th parameter row is the mean embedding of class k's
/// training nodes.
#[derive(Debug, Clone)]
pub struct MeanClassifier {
    pub means: Array2<f64>,
    pub rule: MeanRule,
}

impl MeanClassifier {
    pub fn fit(
        embeddings: &Array2<f64>,
        labels: &[usize],
        train_idx: &[usize],
        num_classes: usize,
        rule: MeanRule,
    ) -> Result<MeanClassifier, EvalError> {
        let d = embeddings.ncols();
        let mut means = Array2::<f64>::zeros((num_classes, d));
        let mut counts = vec![0usize; num_classes];
        for &i in train_idx {
            let k = labels[i];
            counts[k] += 1;
            for c in 0..d {
                means[(k, c)] += embeddings[(i, c)];
            }
        }
        for (k, &count) in counts.iter().enumerate() {
            if count == 0 {
                return Err(EvalError::EmptyClass(k));
            }
            for c in 0..d {
                means[(k, c)] /= count as f64;
            }
        }
        Ok(MeanClassifier { means, rule })
    }

    /// Inner-product logits <mu_k, z> for one embedding row.
    pub fn logits(&self, z: &[f64]) -> Vec<f64> {
        self.means
            .rows()
            .into_iter()
            .map(|mu| mu.iter().zip(z).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn predict(&self, z: &[f64]) -> usize {
        match self.rule {
            MeanRule::Inner => self
                .logits(z)
                .into_iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(&b.1).expect("finite"))
                .expect("at least one class")
                .0,
            MeanRule::Euclidean => self
                .means
                .rows()
                .into_iter()
                .map(|mu| mu.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .enumerate()
                .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite"))
                .expect("at least one class")
                .0,
        }
    }

    pub fn f1_on(&self, embeddings: &Array2<f64>, labels: &[usize], idx: &[usize]) -> f64 {
        let pred: Vec<usize> = idx
            .iter()
            .map(|&i| self.predict(embeddings.row(i).as_slice().expect("contiguous row")))
            .collect();
        f1_micro(&pred, &take_labels(labels, idx))
    }

    /// Mean cross-entropy of softmax over the inner-product logits,
    /// regardless of the prediction rule.
    pub fn cross_entropy(&self, embeddings: &Array2<f64>, labels: &[usize], idx: &[usize]) -> f64 {
        assert!(!idx.is_empty());
        let mut total = 0.0;
        for &i in idx {
            let logits = self.logits(embeddings.row(i).as_slice().expect("contiguous row"));
            total += logsumexp(&logits) - logits[labels[i]];
        }
        total / idx.len() as f64
    }
}

/// Probability that a random positive outranks a random negative, ties at
/// one half (rank form of the Mann-Whitney statistic, midranks for ties).
pub fn auc(pos: &[f64], neg: &[f64]) -> Result<f64, EvalError> {
    if pos.is_empty() {
        return Err(EvalError::EmptySet("positive"));
    }
    if neg.is_empty() {
        return Err(EvalError::EmptySet("negative"));
    }
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // Ranks are 1-based; tied entries share the midrank.
        let midrank = (i + 1 + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let p = pos.len() as f64;
    let n = neg.len() as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Area under the precision-recall curve by the standard step
/// interpolation: the mean of precision at each positive hit, scores ranked
/// descending with stable tie order (positives listed before negatives).
pub fn average_precision(pos: &[f64], neg: &[f64]) -> Result<f64, EvalError> {
    if pos.is_empty() {
        return Err(EvalError::EmptySet("positive"));
    }
    if neg.is_empty() {
        return Err(EvalError::EmptySet("negative"));
    }
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank0, (_, is_pos)) in all.iter().enumerate() {
        if *is_pos {
            hits += 1;
            total += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(total / pos.len() as f64)
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LinkMetrics {
    pub auc: f64,
    pub ap: f64,
}

/// Scores test edges against test negatives with sigmoid inner products.
pub fn link_predict_eval(
    embeddings: &Array2<f64>,
    split: &LinkSplit,
) -> Result<LinkMetrics, EvalError> {
    let score = |&(i, j): &(usize, usize)| {
        let dot: f64 = embeddings.row(i).dot(&embeddings.row(j));
        1.0 / (1.0 + (-dot).exp())
    };
    let pos: Vec<f64> = split.test_edges.iter().map(score).collect();
    let neg: Vec<f64> = split.test_negatives.iter().map(score).collect();
    Ok(LinkMetrics { auc: auc(&pos, &neg)?, ap: average_precision(&pos, &neg)? })
}

/// Per-epoch generalization gap |L_T(e)/L_T(1) - L_P(e)/L_P(1)| between a
/// downstream loss series and the pretext loss series.
pub fn gcl_ge(pretext: &[f64], downstream: &[f64]) -> Result<Vec<f64>, EvalError> {
    if pretext.is_empty() {
        return Err(EvalError::EmptySet("pretext"));
    }
    if downstream.is_empty() {
        return Err(EvalError::EmptySet("downstream"));
    }
    if pretext.len() != downstream.len() {
        return Err(EvalError::LengthMismatch(pretext.len(), downstream.len()));
    }
    if pretext[0] == 0.0 || downstream[0] == 0.0 {
        return Err(EvalError::ZeroBaseline);
    }
    Ok(pretext
        .iter()
        .zip(downstream)
        .map(|(&p, &t)| (t / downstream[0] - p / pretext[0]).abs())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn ranked_list_example_matches_hand_values() {
        // Ranked [+, -, +, -] via scores 4 > 3 > 2 > 1.
        let pos = [4.0, 2.0];
        let neg = [3.0, 1.0];
        assert!((auc(&pos, &neg).unwrap() - 0.75).abs() < 1e-15);
        assert!((average_precision(&pos, &neg).unwrap() - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn separated_scores_and_ties_hit_the_conventions() {
        let pos = [0.9, 0.8, 0.7];
        let neg = [0.3, 0.2];
        assert_eq!(auc(&pos, &neg).unwrap(), 1.0);
        assert_eq!(average_precision(&pos, &neg).unwrap(), 1.0);
        // All-equal scores: every pair is a tie worth one half.
        let pos = [0.5, 0.5];
        let neg = [0.5, 0.5, 0.5];
        assert!((auc(&pos, &neg).unwrap() - 0.5).abs() < 1e-15);
        assert!(auc(&[], &[1.0]).is_err());
        assert!(average_precision(&[1.0], &[]).is_err());
    }

    /// O(P*N) pair-counting AUC, the definition.
    fn auc_brute(pos: &[f64], neg: &[f64]) -> f64 {
        let mut total = 0.0;
        for &p in pos {
            for &n in neg {
                total += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        total / (pos.len() * neg.len()) as f64
    }

    /// AP as explicit precision-recall step integration.
    fn ap_brute(pos: &[f64], neg: &[f64]) -> f64 {
        let mut all: Vec<(f64, bool)> = pos
            .iter()
            .map(|&s| (s, true))
            .chain(neg.iter().map(|&s| (s, false)))
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let mut area = 0.0;
        let mut tp = 0.0;
        let mut prev_recall = 0.0;
        for (k, (_, is_pos)) in all.iter().enumerate() {
            if *is_pos {
                tp += 1.0;
            }
            let recall = tp / pos.len() as f64;
            let precision = tp / (k + 1) as f64;
            area += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        area
    }

    #[test]
    fn rank_metrics_match_brute_force_on_random_lists() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..200 {
            let np = rng.gen_range(1..=25);
            let nn = rng.gen_range(1..=25);
            // Draw from a coarse grid so ties are frequent.
            let pos: Vec<f64> = (0..np).map(|_| rng.gen_range(0..10) as f64 / 10.0).collect();
            let neg: Vec<f64> = (0..nn).map(|_| rng.gen_range(0..10) as f64 / 10.0).collect();
            let fast = auc(&pos, &neg).unwrap();
            let slow = auc_brute(&pos, &neg);
            assert!(
                (fast - slow).abs() < 1e-12,
                "trial {trial}: auc {fast} vs brute {slow}"
            );
            // AP step integration only coincides with the positive-hit mean
            // when no scores tie across the boundary; use distinct scores.
            let pos: Vec<f64> =
                (0..np).map(|i| rng.gen_range(0.0..1.0) + i as f64 * 2.0).collect();
            let neg: Vec<f64> =
                (0..nn).map(|i| rng.gen_range(0.0..1.0) + i as f64 * 2.0 + 0.33).collect();
            let fast = average_precision(&pos, &neg).unwrap();
            let slow = ap_brute(&pos, &neg);
            assert!(
                (fast - slow).abs() < 1e-12,
                "trial {trial}: ap {fast} vs brute {slow}"
            );
        }
    }

    #[test]
    fn f1_micro_is_accuracy_and_permutation_invariant() {
        let pred = [0usize, 1, 2, 2, 1];
        let truth = [0usize, 1, 1, 2, 1];
        assert!((f1_micro(&pred, &truth) - 0.8).abs() < 1e-15);
        let perm = [4usize, 2, 0, 3, 1];
        let pp: Vec<usize> = perm.iter().map(|&i| pred[i]).collect();
        let tp: Vec<usize> = perm.iter().map(|&i| truth[i]).collect();
        assert_eq!(f1_micro(&pred, &truth), f1_micro(&pp, &tp));
    }

    fn blobs(n_per: usize, centers: &[(f64, f64)], spread: f64, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = n_per * centers.len();
        let mut x = Array2::<f64>::zeros((n, 2));
        let mut labels = Vec::with_capacity(n);
        for (k, &(cx, cy)) in centers.iter().enumerate() {
            for i in 0..n_per {
                let r = k * n_per + i;
                x[(r, 0)] = cx + rng.gen_range(-spread..spread);
                x[(r, 1)] = cy + rng.gen_range(-spread..spread);
                labels.push(k);
            }
        }
        (x, labels)
    }

    #[test]
    fn probe_is_perfect_on_separable_blobs() {
        let (x, labels) = blobs(50, &[(-5.0, 0.0), (5.0, 0.0)], 0.5, 2);
        let f1 = linear_probe(&x, &labels, 2, PROBE_TRAIN_FRACTION, 7).unwrap();
        assert_eq!(f1, 1.0);
    }

    #[test]
    fn probe_on_random_labels_sits_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 400;
        let k = 4;
        let x = Array2::from_shape_fn((n, 8), |_| rng.gen_range(-1.0..1.0));
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let f1 = linear_probe(&x, &labels, k, PROBE_TRAIN_FRACTION, 11).unwrap();
        assert!(
            (f1 - 0.25).abs() < 0.10,
            "chance-level probe should sit near 1/K, got {f1}"
        );
    }

    #[test]
    fn probe_is_deterministic_per_seed() {
        let (x, labels) = blobs(30, &[(-2.0, 0.0), (2.0, 1.0), (0.0, -2.0)], 1.5, 4);
        let a = linear_probe(&x, &labels, 3, PROBE_TRAIN_FRACTION, 5).unwrap();
        let b = linear_probe(&x, &labels, 3, PROBE_TRAIN_FRACTION, 5).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn train_split_always_covers_every_class() {
        // Class 2 has only two members out of 100 nodes; a plain 10% draw
        // misses it regularly, so the stratified fallback must kick in.
        let mut labels = vec![0usize; 49];
        labels.extend(vec![1usize; 49]);
        labels.extend(vec![2usize; 2]);
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let train = probe_train_split(&labels, 3, 0.10, &mut rng);
            let mut present = [false; 3];
            for &i in &train {
                present[labels[i]] = true;
            }
            assert!(present.iter().all(|&p| p), "seed {seed}: {train:?}");
            assert!(train.len() <= 15, "split should stay near 10%: {}", train.len());
        }
    }

    #[test]
    fn mean_classifier_matches_hand_enumeration() {
        // 8 nodes, 2 classes, 2 dims; train on the first 3 of each class.
        let x = Array2::from_shape_vec(
            (8, 2),
            vec![
                1.0, 0.0, //
                2.0, 1.0, //
                3.0, -1.0, //
                -1.0, 1.0, //
                -2.0, 0.0, //
                -3.0, 2.0, //
                2.5, 0.5, // test, class 0
                -1.5, 0.5, // test, class 1
            ],
        )
        .unwrap();
        let labels = vec![0, 0, 0, 1, 1, 1, 0, 1];
        let train: Vec<usize> = (0..6).collect();
        let mc = MeanClassifier::fit(&x, &labels, &train, 2, MeanRule::Inner).unwrap();
        // mu_0 = (2, 0), mu_1 = (-2, 1).
        assert_eq!(mc.means[(0, 0)], 2.0);
        assert_eq!(mc.means[(0, 1)], 0.0);
        assert_eq!(mc.means[(1, 0)], -2.0);
        assert_eq!(mc.means[(1, 1)], 1.0);
        // Node 6: <mu_0, z> = 5, <mu_1, z> = -4.5 -> class 0.
        // Node 7: <mu_0, z> = -3, <mu_1, z> = 3.5 -> class 1.
        assert_eq!(mc.predict(&[2.5, 0.5]), 0);
        assert_eq!(mc.predict(&[-1.5, 0.5]), 1);
        assert_eq!(mc.f1_on(&x, &labels, &[6, 7]), 1.0);

        // A node exactly at a class mean, other mean orthogonal.
        let y = Array2::from_shape_vec((2, 2), vec![3.0, 0.0, 0.0, 4.0]).unwrap();
        let mc2 =
            MeanClassifier::fit(&y, &[0, 1], &[0, 1], 2, MeanRule::Inner).unwrap();
        assert_eq!(mc2.predict(&[3.0, 0.0]), 0);
        assert_eq!(mc2.predict(&[0.0, 4.0]), 1);
    }

    #[test]
    fn mean_rules_disagree_when_norms_differ() {
        // mu_0 = (2, 0) has the larger inner product with z = (1, 0), but
        // mu_1 = (0.5, 0) is the nearer mean.
        let x = Array2::from_shape_vec((2, 2), vec![2.0, 0.0, 0.5, 0.0]).unwrap();
        let labels = vec![0, 1];
        let inner =
            MeanClassifier::fit(&x, &labels, &[0, 1], 2, MeanRule::Inner).unwrap();
        let eucl =
            MeanClassifier::fit(&x, &labels, &[0, 1], 2, MeanRule::Euclidean).unwrap();
        assert_eq!(inner.predict(&[1.0, 0.0]), 0);
        assert_eq!(eucl.predict(&[1.0, 0.0]), 1);
    }

    #[test]
    fn mean_classifier_requires_every_class() {
        let x = Array2::<f64>::zeros((3, 2));
        let labels = vec![0, 0, 1];
        match MeanClassifier::fit(&x, &labels, &[0, 1], 2, MeanRule::Inner) {
            Err(EvalError::EmptyClass(1)) => {}
            other => panic!("expected empty class 1, got {other:?}"),
        }
    }

    #[test]
    fn mean_classifier_cross_entropy_is_log_k_when_uninformative() {
        // All means identical: uniform softmax, CE = ln K.
        let x = Array2::<f64>::ones((4, 3));
        let labels = vec![0, 1, 0, 1];
        let mc = MeanClassifier::fit(&x, &labels, &[0, 1, 2, 3], 2, MeanRule::Inner).unwrap();
        let ce = mc.cross_entropy(&x, &labels, &[0, 1, 2, 3]);
        assert!((ce - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn link_eval_scores_split_pairs() {
        // Two tight clusters: embeddings e0-ish for nodes 0/1, e1-ish for
        // 2/3. Positives inside clusters, negatives across.
        let z = Array2::from_shape_vec(
            (4, 2),
            vec![3.0, 0.0, 3.0, 0.1, 0.0, 3.0, 0.1, 3.0],
        )
        .unwrap();
        let split = LinkSplit {
            train_edges: vec![],
            val_edges: vec![],
            test_edges: vec![(0, 1), (2, 3)],
            val_negatives: vec![],
            test_negatives: vec![(0, 2), (1, 3)],
        };
        let m = link_predict_eval(&z, &split).unwrap();
        assert_eq!(m.auc, 1.0);
        assert_eq!(m.ap, 1.0);
    }

    #[test]
    fn generalization_gap_arithmetic() {
        // Epoch 1 is 0 by construction; halved downstream vs constant
        // pretext gives one half.
        let pre = [2.0, 2.0, 2.0];
        let down = [4.0, 2.0, 1.0];
        let ge = gcl_ge(&pre, &down).unwrap();
        assert_eq!(ge[0], 0.0);
        assert!((ge[1] - 0.5).abs() < 1e-15);
        assert!((ge[2] - 0.75).abs() < 1e-15);

        assert!(matches!(gcl_ge(&[0.0, 1.0], &[1.0, 1.0]), Err(EvalError::ZeroBaseline)));
        assert!(matches!(gcl_ge(&[1.0], &[1.0, 2.0]), Err(EvalError::LengthMismatch(1, 2))));
        assert!(matches!(gcl_ge(&[], &[]), Err(EvalError::EmptySet(_))));
    }

    #[test]
    fn metric_series_summaries_are_consistent() {
        let s = MetricSeries::new("f1", vec![0.8, 0.9, 1.0]);
        assert!((s.mean - 0.9).abs() < 1e-15);
        // Population std of {0.8, 0.9, 1.0} is sqrt(2/300).
        assert!((s.std - (0.02f64 / 3.0).sqrt()).abs() < 1e-12);
    }
}
