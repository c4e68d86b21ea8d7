//! Composite objective, optimizer, schedule, checkpoint averaging and the
//! training loop.
//!
//! Per utterance, the transfer objective is
//!
//! ```text
//! total = lambda * ctc + (1 - lambda) * w * (align + eot)
//! ```
//!
//! where `ctc` is the utterance's negative log-likelihood, `eot` is the entropic
//! transport loss between the teacher sequence `Z` and the projected
//! acoustic sequence `H`, and `align` compares `Z` with `gamma * H` on the
//! interior text positions. Batch values are means over the utterances
//! that were usable.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Array, Graph, GraphError, Var};
use crate::ctc::{self, CtcError};
use crate::encoders::{self, EncoderConfig, EncoderError, Student, Teacher, MIN_FRAMES};
use crate::io::{self, Checkpoint, FormatError};
use crate::ot::{self, Coupling, CostMatrix, EotResult, Marginals, OtError, SinkhornConfig};
use crate::params::{Bound, ParamSet};
use crate::synthdata::{Corpus, Utterance};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("invalid hyperparameters: {0}")]
    Config(String),
    #[error("cannot average checkpoints: {0}")]
    Average(String),
    #[error("utterance {id}: {source}")]
    Utterance {
        id: String,
        #[source]
        source: Box<TrainError>,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    Ot(#[from] OtError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Training variants, in report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// CTC on the unfused head.
    Baseline,
    /// Adapter attached, CTC on the fused head, no alignment losses.
    AdapterCtc,
    /// Full objective, predictions from the unfused encoder output.
    OtNoAdapter,
    /// Full objective with adapter-fused predictions.
    Transfer,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::AdapterCtc, Mode::OtNoAdapter, Mode::Transfer];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::AdapterCtc => "adapter-ctc",
            Mode::OtNoAdapter => "ot-no-adapter",
            Mode::Transfer => "transfer",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Mode::Baseline => "Conformer+CTC (Baseline)",
            Mode::AdapterCtc => "ConformerAdpt+CTC",
            Mode::OtNoAdapter => "Conformer+CTC-OT-BERT",
            Mode::Transfer => "ConformerAdpt+CTC-OT-BERT",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        match s {
            "baseline" | "ctc-only" | "ctc_only" => Some(Mode::Baseline),
            "adapter-ctc" | "adapter" | "adapter_ctc" => Some(Mode::AdapterCtc),
            "ot-no-adapter" | "no-adapter" | "no_adapter" => Some(Mode::OtNoAdapter),
            "transfer" => Some(Mode::Transfer),
            _ => None,
        }
    }

    pub fn uses_ot(self) -> bool {
        matches!(self, Mode::OtNoAdapter | Mode::Transfer)
    }

    pub fn uses_adapter(self) -> bool {
        matches!(self, Mode::AdapterCtc | Mode::Transfer)
    }

    /// CTC-only modes weight the CTC term by one.
    pub fn effective_lambda(self, lambda: f64) -> f64 {
        if self.uses_ot() {
            lambda
        } else {
            1.0
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub alpha: f64,
    pub lambda: f64,
    pub w: f64,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub average_last: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub sinkhorn_max_iter: usize,
    pub sinkhorn_tol: f64,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            lambda: 0.3,
            w: 1.0,
            base_lr: 1e-3,
            warmup_steps: 200,
            epochs: 40,
            average_last: 5,
            batch_size: 8,
            clip_norm: 5.0,
            sinkhorn_max_iter: 1000,
            sinkhorn_tol: 1e-6,
            seed: 0,
        }
    }
}

impl HyperParams {
    /// The full-size schedule (20k warm-up steps, 130 epochs, last-10 average).
    pub fn full_scale() -> Self {
        Self {
            warmup_steps: 20_000,
            epochs: 130,
            average_last: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TrainError::Config(m));
        if !(self.alpha > 0.0) {
            return fail(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if self.warmup_steps == 0 {
            return fail("warmup_steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.average_last == 0 {
            return fail("average_last must be at least 1".into());
        }
        if !(self.base_lr > 0.0) || !(self.clip_norm > 0.0) || !(self.sinkhorn_tol > 0.0) {
            return fail("base_lr, clip_norm and sinkhorn_tol must be positive".into());
        }
        Ok(())
    }

    pub fn sinkhorn(&self) -> SinkhornConfig {
        SinkhornConfig {
            alpha: self.alpha,
            max_iter: self.sinkhorn_max_iter,
            tol: self.sinkhorn_tol,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub ctc: f64,
    pub align: f64,
    pub eot: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(ctc: f64, align: f64, eot: f64, lambda: f64, w: f64) -> Self {
        Self {
            ctc,
            align,
            eot,
            total: lambda * ctc + (1.0 - lambda) * w * (align + eot),
        }
    }

    /// `|total - (lambda ctc + (1 - lambda) w (align + eot))|`.
    pub fn identity_residual(&self, lambda: f64, w: f64) -> f64 {
        (self.total - (lambda * self.ctc + (1.0 - lambda) * w * (self.align + self.eot))).abs()
    }
}

/// `base_lr * min(step / warmup, sqrt(warmup / step))`.
pub fn lr_schedule(step: usize, hp: &HyperParams) -> f64 {
    let step = step.max(1) as f64;
    let warmup = hp.warmup_steps as f64;
    hp.base_lr * (step / warmup).min((warmup / step).sqrt())
}

/// Student and its frozen teacher.
#[derive(Debug, Clone)]
pub struct Model {
    pub student: Student,
    pub teacher: Teacher,
}

impl Model {
    pub fn new(config: &EncoderConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            student: Student::new(config, seed)?,
            teacher: Teacher::new(config, seed ^ 0x7465_6163_6865_7200)?,
        })
    }
}

/// Where the OT couplings come from.
#[derive(Debug, Clone, Copy)]
pub enum Couplings<'a> {
    /// Run Sinkhorn on the current cost matrices.
    Solve,
    /// Reuse couplings, one per usable utterance in batch order.
    Fixed(&'a [Coupling]),
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub breakdown: LossBreakdown,
    pub used: usize,
    pub skipped: usize,
    /// Sinkhorn runs that hit the iteration budget.
    pub unconverged: usize,
    /// Couplings of the usable utterances, in batch order.
    pub couplings: Vec<Coupling>,
    /// One gradient per student parameter, when requested.
    pub grads: Option<Vec<Array>>,
}

/// Whether `utt` can be scored in `mode`: long enough to subsample, enough
/// frames for CTC, and at least one interior text position for alignment.
pub fn is_feasible(utt: &Utterance, mode: Mode) -> bool {
    let frames = utt.features.nrows();
    frames >= MIN_FRAMES
        && encoders::subsampled_len(frames) >= ctc::min_frames(utt.tokens.ids())
        && (!mode.uses_ot() || !utt.tokens.is_empty())
}

struct Parts {
    ctc: Var,
    align: Option<Var>,
    eot: Option<Var>,
}

#[allow(clippy::too_many_arguments)]
fn utterance_parts(
    g: &Graph,
    p: &Bound,
    model: &Model,
    utt: &Utterance,
    hp: &HyperParams,
    mode: Mode,
    fixed: Option<&Coupling>,
    solved: &mut Vec<(Coupling, bool)>,
) -> Result<Parts> {
    let student = &model.student;
    let x = g.constant(utt.features.clone());
    let (h_tilde, h) = student.encode(g, p, x)?;

    let (align, eot) = if mode.uses_ot() {
        let z = g.constant(model.teacher.encode(&utt.tokens)?);
        let cost = ot::cosine_cost(g, z, h)?;
        let result = match fixed {
            Some(c) => {
                let entropy = ot::entropy(&c.gamma);
                let transport = (&c.gamma * &*g.value(cost)).sum();
                EotResult {
                    coupling: c.clone(),
                    transport_cost: transport,
                    entropy,
                    eot_loss: transport - hp.alpha * entropy,
                    iterations: 0,
                    converged: true,
                }
            }
            None => {
                let (rows, cols) = g.shape(cost);
                let values = CostMatrix(g.value(cost).mapv(|v| v.clamp(0.0, 2.0)));
                ot::sinkhorn(&values, &Marginals::uniform(rows, cols), &hp.sinkhorn())?
            }
        };
        let eot = ot::eot_term(g, cost, &result, hp.alpha)?;
        let z_tilde = ot::project(g, &result.coupling, h)?;
        let align = ot::alignment_loss(g, z, z_tilde)?;
        solved.push((result.coupling, result.converged));
        (Some(align), Some(eot))
    } else {
        (None, None)
    };

    let top = if mode.uses_adapter() {
        student.fuse(g, p, h_tilde, h, student.config.adapter_scale)?
    } else {
        h_tilde
    };
    let log_probs = student.predict(g, p, top)?;
    let ctc = ctc::ctc_loss(g, log_probs, utt.tokens.ids())?;
    Ok(Parts { ctc, align, eot })
}

/// Loss breakdown (and optionally gradients) for one batch.
///
/// Utterances that fail [`is_feasible`] are skipped and counted.
pub fn batch_loss(
    model: &Model,
    batch: &[&Utterance],
    hp: &HyperParams,
    mode: Mode,
    couplings: Couplings<'_>,
    want_grads: bool,
) -> Result<BatchOutcome> {
    let g = Graph::new();
    let p = model.student.bind(&g);
    let mut ctc_terms = Vec::new();
    let mut align_terms = Vec::new();
    let mut eot_terms = Vec::new();
    let mut solved = Vec::new();
    let mut skipped = 0;

    for utt in batch {
        if !is_feasible(utt, mode) {
            skipped += 1;
            continue;
        }
        let fixed = match couplings {
            Couplings::Fixed(list) => Some(list.get(solved.len()).ok_or_else(|| {
                TrainError::Config(format!("no fixed coupling for utterance {}", utt.id))
            })?),
            Couplings::Solve => None,
        };
        let parts = utterance_parts(&g, &p, model, utt, hp, mode, fixed, &mut solved).map_err(|e| {
            TrainError::Utterance {
                id: utt.id.clone(),
                source: Box::new(e),
            }
        })?;
        ctc_terms.push(parts.ctc);
        align_terms.extend(parts.align);
        eot_terms.extend(parts.eot);
    }

    let used = ctc_terms.len();
    if used == 0 {
        return Ok(BatchOutcome {
            breakdown: LossBreakdown::default(),
            used,
            skipped,
            unconverged: 0,
            couplings: Vec::new(),
            grads: want_grads.then(|| model.student.params.values().iter().map(|v| Array::zeros(v.dim())).collect()),
        });
    }

    let mean = |terms: &[Var]| -> Result<Option<Var>> {
        if terms.is_empty() {
            return Ok(None);
        }
        let stacked = g.concat_rows(terms)?;
        Ok(Some(g.scale(g.sum(stacked), 1.0 / used as f64)))
    };
    let ctc_mean = mean(&ctc_terms)?.expect("at least one utterance");
    let align_mean = mean(&align_terms)?;
    let eot_mean = mean(&eot_terms)?;

    let lambda = mode.effective_lambda(hp.lambda);
    let mut total = g.scale(ctc_mean, lambda);
    if let (Some(a), Some(e)) = (align_mean, eot_mean) {
        let transfer = g.scale(g.add(a, e)?, (1.0 - lambda) * hp.w);
        total = g.add(total, transfer)?;
    }

    let value = |v: Option<Var>| v.map_or(0.0, |v| g.scalar(v));
    let breakdown = LossBreakdown {
        ctc: g.scalar(ctc_mean),
        align: value(align_mean),
        eot: value(eot_mean),
        total: g.scalar(total),
    };
    let grads = if want_grads {
        let grads = g.backward(total)?;
        Some(p.vars().iter().map(|&v| grads.wrt(v)).collect())
    } else {
        None
    };
    let unconverged = solved.iter().filter(|(_, ok)| !ok).count();
    Ok(BatchOutcome {
        breakdown,
        used,
        skipped,
        unconverged,
        couplings: solved.into_iter().map(|(c, _)| c).collect(),
        grads,
    })
}

/// Loss breakdown of a batch without gradients.
pub fn total_loss(model: &Model, batch: &[&Utterance], hp: &HyperParams, mode: Mode) -> Result<BatchOutcome> {
    batch_loss(model, batch, hp, mode, Couplings::Solve, false)
}

/// Rescales `grads` in place so their global norm is at most `cap`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Array], cap: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > cap {
        let k = cap / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * k);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Array>,
    pub second: Vec<Array>,
}

impl Adam {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros = || params.values().iter().map(|v| Array::zeros(v.dim())).collect();
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &[Array], lr: f64) -> Result<()> {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        for (name, (value, grad)) in params.names().iter().zip(params.values().iter().zip(grads)) {
            if grad.dim() != value.dim() {
                return Err(TrainError::Config(format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    grad.dim(),
                    value.dim()
                )));
            }
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((value, grad), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            ndarray::Zip::from(value)
                .and(grad)
                .and(m)
                .and(v)
                .for_each(|x, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *x -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
        Ok(())
    }
}

/// Elementwise mean of parameter sets with identical layouts.
pub fn average_params(sets: &[&ParamSet]) -> Result<ParamSet> {
    let Some(first) = sets.first() else {
        return Err(TrainError::Average("no checkpoints given".into()));
    };
    let mut out = (*first).clone();
    for (k, other) in sets.iter().enumerate().skip(1) {
        if other.names() != first.names() {
            return Err(TrainError::Average(format!("checkpoint {k} has a different parameter list")));
        }
        for ((name, acc), value) in first.names().iter().zip(out.values_mut()).zip(other.values()) {
            if acc.dim() != value.dim() {
                return Err(TrainError::Average(format!(
                    "{name}: shape {:?} vs {:?} in checkpoint {k}",
                    acc.dim(),
                    value.dim()
                )));
            }
            *acc += value;
        }
    }
    let n = sets.len() as f64;
    for v in out.values_mut() {
        v.mapv_inplace(|x| x / n);
    }
    Ok(out)
}

/// Loads and averages checkpoint files.
pub fn average_checkpoints(paths: &[impl AsRef<Path>]) -> Result<Checkpoint> {
    let loaded = paths
        .iter()
        .map(|p| io::load_checkpoint(p.as_ref()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let Some(first) = loaded.first() else {
        return Err(TrainError::Average("no checkpoints given".into()));
    };
    if loaded.iter().any(|c| c.student.config != first.student.config) {
        return Err(TrainError::Average("checkpoints have different encoder configs".into()));
    }
    let sets: Vec<&ParamSet> = loaded.iter().map(|c| &c.student.params).collect();
    let params = average_params(&sets)?;
    let mut student = first.student.clone();
    student.params = params;
    Ok(Checkpoint {
        student,
        use_adapter: first.use_adapter,
    })
}

/// Corpus-level character error rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CerReport {
    pub utterances: usize,
    pub edits: usize,
    pub reference_chars: usize,
}

impl CerReport {
    /// Total edits over total reference length; NaN on an empty split.
    pub fn cer(&self) -> f64 {
        if self.reference_chars == 0 {
            f64::NAN
        } else {
            self.edits as f64 / self.reference_chars as f64
        }
    }
}

/// Greedy-decodes every utterance with the student alone.
pub fn evaluate(student: &Student, use_adapter: bool, utterances: &[Utterance]) -> Result<CerReport> {
    let mut report = CerReport {
        utterances: 0,
        edits: 0,
        reference_chars: 0,
    };
    for utt in utterances {
        let log_probs = student.infer(&utt.features, use_adapter)?;
        let hyp = ctc::greedy_decode(&log_probs);
        report.utterances += 1;
        report.edits += ctc::edit_distance(hyp.ids(), utt.tokens.ids());
        report.reference_chars += utt.tokens.len();
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mode: Mode,
    pub train: LossBreakdown,
    pub dev_cer: f64,
    pub lr: f64,
    pub skipped: usize,
    pub unconverged: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Student replaced by the average of the last snapshots.
    pub model: Model,
    pub history: Vec<EpochMetrics>,
    pub steps: usize,
}

/// Length-bucketed batches: utterances sorted by frame count, then cut
/// into consecutive groups.
pub fn length_buckets(utterances: &[Utterance], batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..utterances.len()).collect();
    order.sort_by_key(|&i| (utterances[i].features.nrows(), i));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Trains `model.student` on `corpus.train`, reporting dev CER per epoch.
///
/// `on_epoch` sees every epoch's metrics and the student as it stands at
/// the end of that epoch. The returned model holds the average of the last
/// `hp.average_last` epoch-end students; with zero epochs it is the input
/// model unchanged.
pub fn train(
    mut model: Model,
    corpus: &Corpus,
    hp: &HyperParams,
    mode: Mode,
    mut on_epoch: impl FnMut(&EpochMetrics, &Student),
) -> Result<TrainOutcome> {
    hp.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut adam = Adam::new(&model.student.params, AdamConfig::default());
    let buckets = length_buckets(&corpus.train, hp.batch_size);
    let mut snapshots: VecDeque<ParamSet> = VecDeque::new();
    let mut history = Vec::with_capacity(hp.epochs);
    let mut step = 0;
    let use_adapter = mode.uses_adapter();

    for epoch in 1..=hp.epochs {
        let mut order: Vec<usize> = (0..buckets.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        let (mut batches, mut skipped, mut unconverged) = (0, 0, 0);
        let mut lr = 0.0;
        for &b in &order {
            let batch: Vec<&Utterance> = buckets[b].iter().map(|&i| &corpus.train[i]).collect();
            let outcome = batch_loss(&model, &batch, hp, mode, Couplings::Solve, true)?;
            skipped += outcome.skipped;
            unconverged += outcome.unconverged;
            if outcome.used == 0 {
                continue;
            }
            let mut grads = outcome.grads.expect("gradients requested");
            clip_global_norm(&mut grads, hp.clip_norm);
            step += 1;
            lr = lr_schedule(step, hp);
            adam.update(&mut model.student.params, &grads, lr)?;
            let b = outcome.breakdown;
            sum.ctc += b.ctc;
            sum.align += b.align;
            sum.eot += b.eot;
            sum.total += b.total;
            batches += 1;
        }
        let n = batches.max(1) as f64;
        let train = LossBreakdown {
            ctc: sum.ctc / n,
            align: sum.align / n,
            eot: sum.eot / n,
            total: sum.total / n,
        };
        let dev_cer = evaluate(&model.student, use_adapter, &corpus.dev)?.cer();
        let metrics = EpochMetrics {
            epoch,
            mode,
            train,
            dev_cer,
            lr,
            skipped,
            unconverged,
        };
        on_epoch(&metrics, &model.student);
        history.push(metrics);
        snapshots.push_back(model.student.params.clone());
        if snapshots.len() > hp.average_last {
            snapshots.pop_front();
        }
    }

    if !snapshots.is_empty() {
        let sets: Vec<&ParamSet> = snapshots.iter().collect();
        model.student.params = average_params(&sets)?;
    }
    Ok(TrainOutcome {
        model,
        history,
        steps: step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{gen_corpus, CorpusConfig};
    use ndarray::array;

    #[test]
    fn loss_combination_examples() {
        let b = LossBreakdown::combine(2.0, 0.5, 0.1, 0.3, 1.0);
        assert!((b.total - 1.02).abs() < 1e-12);
        let b = LossBreakdown::combine(2.0, 0.5, 0.1, 1.0, 1.0);
        assert_eq!(b.total, 2.0);
        let b = LossBreakdown::combine(2.0, 0.0, 0.1, 0.3, 1.0);
        assert!((b.total - (0.3 * 2.0 + 0.7 * 0.1)).abs() < 1e-12);
    }

    #[test]
    fn schedule_examples() {
        let hp = HyperParams {
            base_lr: 1e-3,
            warmup_steps: 200,
            ..Default::default()
        };
        assert!((lr_schedule(200, &hp) - 1e-3).abs() < 1e-18);
        assert!((lr_schedule(100, &hp) - 5e-4).abs() < 1e-18);
        assert!((lr_schedule(800, &hp) - 5e-4).abs() < 1e-18);
    }

    fn one_param(value: Array) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("x", value);
        p
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = one_param(array![[1.0, -2.0]]);
        let mut adam = Adam::new(&p, AdamConfig::default());
        adam.update(&mut p, &[array![[0.5, 0.5]]], 0.1).unwrap();
        let after_one = p.values()[0].clone();
        let m = adam.first[0].clone();
        adam.update(&mut p, &[array![[0.0, 0.0]]], 0.0).unwrap();
        assert_eq!(p.values()[0], after_one);
        assert_eq!(adam.first[0], &m * 0.9);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut p = one_param(array![[1.0, 1.0, 1.0]]);
        let mut adam = Adam::new(&p, AdamConfig::default());
        adam.update(&mut p, &[array![[3.0, -0.01, 250.0]]], 0.01).unwrap();
        let delta = &p.values()[0] - 1.0;
        for (d, s) in delta.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((d - s * 0.01).abs() < 1e-8, "{d}");
        }
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = one_param(array![[1.0]]);
        let mut adam = Adam::new(&p, AdamConfig::default());
        let err = adam.update(&mut p, &[array![[f64::NAN]]], 0.1).unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteGradient(ref n) if n == "x"));
    }

    #[test]
    fn averaging_examples() {
        let p = one_param(array![[1.0, -3.0]]);
        assert_eq!(average_params(&[&p]).unwrap(), p);
        let neg = one_param(array![[-1.0, 3.0]]);
        assert_eq!(average_params(&[&p, &neg]).unwrap().values()[0], array![[0.0, 0.0]]);
        assert_eq!(average_params(&[&p, &p, &p]).unwrap(), p);
        let other = one_param(array![[1.0]]);
        assert!(matches!(average_params(&[&p, &other]), Err(TrainError::Average(_))));
        assert!(matches!(average_params(&[]), Err(TrainError::Average(_))));
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![array![[3.0]], array![[4.0]]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][[0, 0]] - 0.6).abs() < 1e-15);
        let mut small = vec![array![[0.1]]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][[0, 0]], 0.1);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(Mode::parse(m.name()), Some(m));
        }
        assert_eq!(Mode::parse("ctc_only"), Some(Mode::Baseline));
        assert_eq!(Mode::parse("no_adapter"), Some(Mode::OtNoAdapter));
        assert_eq!(Mode::parse("bogus"), None);
    }

    #[test]
    fn hyperparams_validation() {
        assert!(HyperParams::default().validate().is_ok());
        assert!(HyperParams::full_scale().validate().is_ok());
        let bad = HyperParams {
            lambda: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = HyperParams {
            warmup_steps: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    fn tiny_corpus() -> Corpus {
        gen_corpus(&CorpusConfig {
            train_utts: 6,
            dev_utts: 2,
            test_utts: 2,
            noise_std: 0.3,
            seed: 1,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn ctc_only_modes_zero_alignment_terms() {
        let corpus = tiny_corpus();
        let model = Model::new(&EncoderConfig::default(), 3).unwrap();
        let batch: Vec<&Utterance> = corpus.train.iter().collect();
        let hp = HyperParams::default();
        for mode in [Mode::Baseline, Mode::AdapterCtc] {
            let before = crate::probe::snapshot();
            let out = total_loss(&model, &batch, &hp, mode).unwrap();
            let delta = crate::probe::snapshot().since(&before);
            assert_eq!(delta.sinkhorn_calls, 0);
            assert_eq!(delta.teacher_passes, 0);
            assert_eq!(out.breakdown.align, 0.0);
            assert_eq!(out.breakdown.eot, 0.0);
            assert_eq!(out.breakdown.total, out.breakdown.ctc);
        }
        for mode in [Mode::OtNoAdapter, Mode::Transfer] {
            let out = total_loss(&model, &batch, &hp, mode).unwrap();
            assert!(out.breakdown.align > 0.0);
            assert_ne!(out.breakdown.eot, 0.0);
            assert!(out.breakdown.identity_residual(hp.lambda, hp.w) < 1e-12);
        }
    }

    #[test]
    fn lambda_one_reduces_to_ctc() {
        let corpus = tiny_corpus();
        let model = Model::new(&EncoderConfig::default(), 3).unwrap();
        let batch: Vec<&Utterance> = corpus.train.iter().collect();
        let hp = HyperParams {
            lambda: 1.0,
            ..Default::default()
        };
        let out = total_loss(&model, &batch, &hp, Mode::Transfer).unwrap();
        assert_eq!(out.breakdown.total, out.breakdown.ctc);
    }

    #[test]
    fn infeasible_utterances_are_skipped() {
        let mut corpus = tiny_corpus();
        // 8 frames -> 1 subsampled frame; two labels cannot fit
        corpus.train[0].features = Array::zeros((8, 16));
        let model = Model::new(&EncoderConfig::default(), 3).unwrap();
        let batch: Vec<&Utterance> = corpus.train.iter().collect();
        let out = total_loss(&model, &batch, &HyperParams::default(), Mode::Transfer).unwrap();
        assert_eq!(out.skipped, 1);
        assert_eq!(out.used, 5);
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let corpus = tiny_corpus();
        let model = Model::new(&EncoderConfig::default(), 3).unwrap();
        let hp = HyperParams {
            epochs: 0,
            ..Default::default()
        };
        let out = train(model.clone(), &corpus, &hp, Mode::Transfer, |_, _| {}).unwrap();
        assert_eq!(out.model.student.params, model.student.params);
        assert!(out.history.is_empty());
    }
}
