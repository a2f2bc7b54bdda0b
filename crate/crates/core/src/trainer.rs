//! Alternating two-player training loop.
//!
//! Each iteration samples both views once, then computes both players'
//! gradients at the same parameter point: the generator's from one tape, the
//! encoder's from a second tape replaying the identical forward pass (a tape
//! supports a single backward). Each player's optimizer only ever sees its
//! own store, so a generator step cannot touch encoder parameters and vice
//! versa. The generator steps every iteration; the encoder and projection
//! head step every `freq_ratio`-th iteration.

use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{AdamConfig, AutodiffError, ParamStore, ParamVars, Tape};
use crate::encoder::{Activation, ProjectionHead, TargetEncoder, ViewAdj};
use crate::generator::{
    edge_preserve_rate, logistic_noise, GeneratorError, ViewContext, ViewGenerator,
};
use crate::graph::{drop_edges_random, feature_mask, sym_normalize, Graph};
use crate::losses::{build_losses, offdiag_mask, GeneratorObjective, LossBundle};
use crate::sparse::CsrMatrix;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected key=value, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: invalid value for `{key}`: {detail}")]
    BadValue { line: usize, key: String, detail: String },
    #[error("{0}")]
    OutOfRange(String),
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("generator: {0}")]
    Generator(#[from] GeneratorError),
    #[error("autodiff: {0}")]
    Autodiff(AutodiffError),
    #[error("training diverged at epoch {epoch} ({detail})")]
    Diverged { epoch: usize, detail: String },
}

/// All hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    /// Weight of the KL term in the encoder objective.
    pub lambda: f64,
    /// Feature-mask probability, first view.
    pub p_f1: f64,
    /// Feature-mask probability, second view.
    pub p_f2: f64,
    /// Upper bound of the learned drop probability, first view.
    pub p_ea: f64,
    /// Random edge-drop probability, second view.
    pub p_e2: f64,
    pub lr_encoder: f64,
    pub lr_generator: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub hidden_dim: usize,
    pub activation: Activation,
    /// Contrastive temperature.
    pub tau_nce: f64,
    /// Concrete-relaxation temperature.
    pub t_g: f64,
    /// Generator steps per encoder step.
    pub freq_ratio: usize,
    pub generator_objective: GeneratorObjective,
    /// `false` replaces the learned first view with random edge dropping at
    /// rate `p_ea` and steps the encoder every iteration: the plain
    /// contrastive baseline (combine with `lambda = 0`).
    pub use_generator: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale defaults tuned for the synthetic block-model graphs.
    fn default() -> TrainConfig {
        TrainConfig {
            lambda: 1e-3,
            p_f1: 0.2,
            p_f2: 0.2,
            p_ea: 0.6,
            p_e2: 0.2,
            lr_encoder: 0.01,
            lr_generator: 0.01,
            weight_decay: 1e-5,
            epochs: 200,
            hidden_dim: 64,
            activation: Activation::Relu,
            tau_nce: 0.5,
            t_g: 0.5,
            freq_ratio: 1,
            generator_objective: GeneratorObjective::Kl,
            use_generator: true,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let prob = |name: &str, v: f64| {
            if !(0.0..1.0).contains(&v) {
                Err(ConfigError::OutOfRange(format!("{name} = {v} must lie in [0, 1)")))
            } else {
                Ok(())
            }
        };
        prob("p_f1", self.p_f1)?;
        prob("p_f2", self.p_f2)?;
        prob("p_ea", self.p_ea)?;
        prob("p_e2", self.p_e2)?;
        let positive = |name: &str, v: f64| {
            if !(v.is_finite() && v > 0.0) {
                Err(ConfigError::OutOfRange(format!("{name} = {v} must be positive")))
            } else {
                Ok(())
            }
        };
        positive("lr_encoder", self.lr_encoder)?;
        positive("lr_generator", self.lr_generator)?;
        positive("tau_nce", self.tau_nce)?;
        positive("t_g", self.t_g)?;
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(ConfigError::OutOfRange(format!(
                "lambda = {} must be finite and nonnegative",
                self.lambda
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(ConfigError::OutOfRange(format!(
                "weight_decay = {} must be finite and nonnegative",
                self.weight_decay
            )));
        }
        if self.epochs < 1 {
            return Err(ConfigError::OutOfRange("epochs must be at least 1".into()));
        }
        if self.freq_ratio < 1 {
            return Err(ConfigError::OutOfRange("freq_ratio must be at least 1".into()));
        }
        if self.hidden_dim < 1 {
            return Err(ConfigError::OutOfRange("hidden_dim must be at least 1".into()));
        }
        Ok(())
    }

    /// Parses flat `key=value` text. Lines may be blank or start with `#`;
    /// keys are exactly the field names; unset keys keep their defaults.
    pub fn from_key_values(text: &str) -> Result<TrainConfig, ConfigError> {
        let mut cfg = TrainConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(ConfigError::Syntax { line, text: trimmed.to_string() });
            };
            let key = key.trim();
            let value = value.trim();
            let bad = |detail: String| ConfigError::BadValue {
                line,
                key: key.to_string(),
                detail,
            };
            macro_rules! set {
                ($field:ident, $ty:ty) => {
                    cfg.$field =
                        value.parse::<$ty>().map_err(|e| bad(e.to_string()))?
                };
            }
            match key {
                "lambda" => set!(lambda, f64),
                "p_f1" => set!(p_f1, f64),
                "p_f2" => set!(p_f2, f64),
                "p_ea" => set!(p_ea, f64),
                "p_e2" => set!(p_e2, f64),
                "lr_encoder" => set!(lr_encoder, f64),
                "lr_generator" => set!(lr_generator, f64),
                "weight_decay" => set!(weight_decay, f64),
                "epochs" => set!(epochs, usize),
                "hidden_dim" => set!(hidden_dim, usize),
                "activation" => set!(activation, Activation),
                "tau_nce" => set!(tau_nce, f64),
                "t_g" => set!(t_g, f64),
                "freq_ratio" => set!(freq_ratio, usize),
                "generator_objective" => set!(generator_objective, GeneratorObjective),
                "use_generator" => set!(use_generator, bool),
                "seed" => set!(seed, u64),
                other => {
                    return Err(ConfigError::UnknownKey { line, key: other.to_string() })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Inverse of [`TrainConfig::from_key_values`].
    #[must_use]
    pub fn to_key_values(&self) -> String {
        format!(
            "lambda={}\np_f1={}\np_f2={}\np_ea={}\np_e2={}\nlr_encoder={}\nlr_generator={}\n\
             weight_decay={}\nepochs={}\nhidden_dim={}\nactivation={}\ntau_nce={}\nt_g={}\n\
             freq_ratio={}\ngenerator_objective={}\nuse_generator={}\nseed={}\n",
            self.lambda,
            self.p_f1,
            self.p_f2,
            self.p_ea,
            self.p_e2,
            self.lr_encoder,
            self.lr_generator,
            self.weight_decay,
            self.epochs,
            self.hidden_dim,
            self.activation,
            self.tau_nce,
            self.t_g,
            self.freq_ratio,
            self.generator_objective,
            self.use_generator,
            self.seed,
        )
    }
}

/// Published per-dataset settings, plus `"sbm"` for the synthetic graphs.
/// The generator rate equals the encoder rate; shared knobs (temperatures,
/// ratio) keep their defaults.
pub fn dataset_defaults(name: &str) -> Option<TrainConfig> {
    let with = |lambda: f64,
                p_f1: f64,
                p_f2: f64,
                p_ea: f64,
                p_e2: f64,
                lr: f64,
                epochs: usize,
                hidden_dim: usize,
                activation: Activation| TrainConfig {
        lambda,
        p_f1,
        p_f2,
        p_ea,
        p_e2,
        lr_encoder: lr,
        lr_generator: lr,
        weight_decay: 1e-5,
        epochs,
        hidden_dim,
        activation,
        ..TrainConfig::default()
    };
    use Activation::{Prelu, RRelu, Relu};
    Some(match name {
        "cora" => with(1e-5, 0.4, 0.3, 0.8, 0.2, 5e-4, 1000, 128, Relu),
        "citeseer" => with(1e-5, 0.3, 0.2, 0.2, 0.0, 1e-3, 500, 256, Prelu),
        "pubmed" => with(10.0, 0.1, 0.1, 0.3, 0.5, 1e-3, 2500, 256, Relu),
        "coauthor-cs" => with(1e-5, 0.3, 0.4, 0.3, 0.2, 5e-4, 1000, 256, RRelu),
        "coauthor-phy" => with(10.0, 0.1, 0.4, 0.4, 0.1, 0.01, 1900, 128, RRelu),
        "wiki-cs" => with(10.0, 0.1, 0.1, 0.2, 0.3, 0.01, 3100, 256, Prelu),
        "amazon-photo" => with(60.0, 0.1, 0.1, 0.9, 0.3, 0.01, 2700, 256, Relu),
        "amazon-computers" => with(0.5, 0.2, 0.3, 0.9, 0.3, 0.01, 2000, 128, RRelu),
        "sbm" => TrainConfig::default(),
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub j1: f64,
    pub j2: f64,
    pub j2_prime: f64,
    pub encoder_loss: f64,
    pub generator_loss: f64,
    pub edge_preserve_rate: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str =
        "epoch,J1,J2,J2prime,encoder_loss,generator_loss,edge_preserve_rate,seconds";

    /// Renders the log as CSV. With `include_timing` off the seconds column
    /// is zeroed, which keeps serial reruns byte-identical.
    #[must_use]
    pub fn to_csv(&self, include_timing: bool) -> String {
        let mut out = String::with_capacity(64 * (self.records.len() + 1));
        out.push_str(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let seconds = if include_timing { r.seconds } else { 0.0 };
            out.push_str(&format!(
                "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.3}\n",
                r.epoch,
                r.j1,
                r.j2,
                r.j2_prime,
                r.encoder_loss,
                r.generator_loss,
                r.edge_preserve_rate,
                seconds
            ));
        }
        out
    }
}

/// Everything a finished run hands back.
pub struct TrainOutput {
    /// Encoder and projection-head parameters.
    pub encoder_store: ParamStore,
    /// Generator parameters; empty without a generator.
    pub generator_store: ParamStore,
    pub encoder: TargetEncoder,
    pub head: ProjectionHead,
    pub generator: Option<ViewGenerator>,
    pub log: TrainLog,
}

impl TrainOutput {
    /// Mean embeddings on the clean graph, the downstream representation.
    #[must_use]
    pub fn embeddings(&self, g: &Graph) -> Array2<f64> {
        let adj = sym_normalize(g);
        self.encoder.embed_mu(&self.encoder_store, &adj, g.features())
    }
}

/// Per-epoch snapshot handed to a training monitor after the updates.
pub struct EpochView<'a> {
    pub record: &'a EpochRecord,
    pub store: &'a ParamStore,
    pub encoder: &'a TargetEncoder,
}

struct ForwardPass {
    tape: Tape,
    enc_vars: ParamVars,
    gen_vars: Option<ParamVars>,
    bundle: LossBundle,
    preserve_rate: f64,
}

pub fn train(g: &Graph, cfg: &TrainConfig) -> Result<TrainOutput, TrainError> {
    train_with_monitor(g, cfg, |_| {})
}

/// Trains and calls `monitor` once per epoch with the fresh parameters.
pub fn train_with_monitor(
    g: &Graph,
    cfg: &TrainConfig,
    mut monitor: impl FnMut(&EpochView),
) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let in_dim = g.feat_dim();
    let h = cfg.hidden_dim;
    let n = g.num_nodes();

    let mut enc_store = ParamStore::new();
    let encoder = TargetEncoder::init(&mut enc_store, in_dim, h, h, cfg.activation, &mut rng);
    let head = ProjectionHead::init(&mut enc_store, h, &mut rng);
    let mut gen_store = ParamStore::new();
    let generator = if cfg.use_generator {
        Some(ViewGenerator::init(
            &mut gen_store,
            in_dim,
            h,
            (0.0, cfg.p_ea),
            cfg.t_g,
            &mut rng,
        )?)
    } else {
        None
    };

    let ctx = ViewContext::new(g);
    let num_edges = ctx.edges.len();
    let offdiag = offdiag_mask(n);
    let adam_enc = AdamConfig::new(cfg.lr_encoder, cfg.weight_decay);
    let adam_gen = AdamConfig::new(cfg.lr_generator, cfg.weight_decay);
    let x_full = g.features();

    let mut log = TrainLog::default();
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();

        // All of this epoch's randomness, drawn in a fixed order.
        let seed_f1: u64 = rng.gen();
        let seed_f2: u64 = rng.gen();
        let seed_e2: u64 = rng.gen();
        let gen_noise = generator.as_ref().map(|_| logistic_noise(&mut rng, num_edges));
        let random_view1: Option<(Arc<CsrMatrix>, f64)> = if generator.is_none() {
            let seed: u64 = rng.gen();
            let dropped = drop_edges_random(g, cfg.p_ea, seed);
            let rate = if num_edges == 0 {
                1.0
            } else {
                dropped.edge_list().len() as f64 / num_edges as f64
            };
            Some((Arc::new(sym_normalize(&dropped)), rate))
        } else {
            None
        };
        let eps_u = standard_normal(&mut rng, n, h);
        let eps_v = standard_normal(&mut rng, n, h);

        let x1 = feature_mask(x_full, cfg.p_f1, seed_f1);
        let x2 = feature_mask(x_full, cfg.p_f2, seed_f2);
        let g2 = drop_edges_random(g, cfg.p_e2, seed_e2);
        let adj2 = Arc::new(sym_normalize(&g2));

        let forward = || -> ForwardPass {
            let mut tape = Tape::new();
            let enc_vars = enc_store.attach(&mut tape);
            let mut gen_vars = None;
            let (view1, preserve_rate) = match (&generator, &random_view1) {
                (Some(gen), _) => {
                    let gv = gen_store.attach(&mut tape);
                    let x0 = tape.input(x_full.clone());
                    let view = gen.generate_view(
                        &mut tape,
                        &gv,
                        &ctx,
                        x0,
                        gen_noise.as_ref().expect("noise drawn with generator"),
                        true,
                    );
                    gen_vars = Some(gv);
                    let rate = edge_preserve_rate(tape.value(view.mask));
                    (view.adj, rate)
                }
                (None, Some((adj1, rate))) => (ViewAdj::Fixed(Arc::clone(adj1)), *rate),
                (None, None) => unreachable!("one view-1 source is always set"),
            };
            let x1v = tape.input(x1.clone());
            let x2v = tape.input(x2.clone());
            let u = encoder.encode(&mut tape, &enc_vars, &view1, x1v, &eps_u);
            let view2 = ViewAdj::Fixed(Arc::clone(&adj2));
            let v = encoder.encode(&mut tape, &enc_vars, &view2, x2v, &eps_v);
            let bundle = build_losses(
                &mut tape,
                &u,
                &v,
                &head,
                &enc_vars,
                cfg.tau_nce,
                cfg.lambda,
                cfg.generator_objective,
                &offdiag,
            );
            ForwardPass { tape, enc_vars, gen_vars, bundle, preserve_rate }
        };

        let diverged = |epoch: usize, e: AutodiffError| match e {
            AutodiffError::NonFinite { op } => TrainError::Diverged { epoch, detail: op },
            other => TrainError::Autodiff(other),
        };

        let encoder_steps_now = generator.is_none() || epoch % cfg.freq_ratio == 0;

        // Both gradients at the shared point: run (and backward) every pass
        // before either store takes an optimizer step.
        let (record, gen_pass, enc_pass) = {
            let pass = forward();
            let record = EpochRecord {
                epoch,
                j1: pass.tape.value(pass.bundle.j1)[(0, 0)],
                j2: pass.tape.value(pass.bundle.j2)[(0, 0)],
                j2_prime: pass.tape.value(pass.bundle.j2_prime)[(0, 0)],
                encoder_loss: pass.tape.value(pass.bundle.encoder_loss)[(0, 0)],
                generator_loss: pass.tape.value(pass.bundle.generator_loss)[(0, 0)],
                edge_preserve_rate: pass.preserve_rate,
                seconds: 0.0,
            };
            if !record.encoder_loss.is_finite() || !record.generator_loss.is_finite() {
                return Err(TrainError::Diverged { epoch, detail: "non-finite loss".into() });
            }
            let mut gen_pass = None;
            let mut enc_pass = None;
            if generator.is_some() {
                let mut p = pass;
                p.tape.backward(p.bundle.generator_loss).map_err(|e| diverged(epoch, e))?;
                gen_pass = Some(p);
                if encoder_steps_now {
                    let mut second = forward();
                    second
                        .tape
                        .backward(second.bundle.encoder_loss)
                        .map_err(|e| diverged(epoch, e))?;
                    enc_pass = Some(second);
                }
            } else if encoder_steps_now {
                let mut p = pass;
                p.tape.backward(p.bundle.encoder_loss).map_err(|e| diverged(epoch, e))?;
                enc_pass = Some(p);
            }
            (record, gen_pass, enc_pass)
        };

        if let Some(p) = &gen_pass {
            gen_store.collect_grads(&p.tape, p.gen_vars.as_ref().expect("generator attached"));
            gen_store.adam_step(&adam_gen).map_err(TrainError::Autodiff)?;
        }
        if let Some(p) = &enc_pass {
            enc_store.collect_grads(&p.tape, &p.enc_vars);
            enc_store.adam_step(&adam_enc).map_err(TrainError::Autodiff)?;
        }

        let record = EpochRecord { seconds: started.elapsed().as_secs_f64(), ..record };
        log.records.push(record);
        monitor(&EpochView {
            record: log.records.last().expect("just pushed"),
            store: &enc_store,
            encoder: &encoder,
        });
    }

    for store in [&enc_store, &gen_store] {
        for id in store.ids() {
            if !store.value(id).iter().all(|v| v.is_finite()) {
                return Err(TrainError::Diverged {
                    epoch: cfg.epochs,
                    detail: format!("parameter `{}` is non-finite", store.name(id)),
                });
            }
        }
    }

    Ok(TrainOutput { encoder_store: enc_store, generator_store: gen_store, encoder, head, generator, log })
}

fn standard_normal(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| StandardNormal.sample(rng))
}

impl FromStr for TrainConfig {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TrainConfig::from_key_values(s)
    }
}
