//! Optimizers, schedules and the training loops.
//!
//! Single-domain teachers, the multi-domain baseline and distillation all
//! run through [`fit`]: a multi-domain model, one cross-entropy term per
//! domain and, when teachers are supplied, annealed prediction and feature
//! matching terms.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use thiserror::Error;

use crate::data::{DataError, DomainDataset, MultiDomainBatcher};
use crate::losses::{self, KernelSpec, LossError};
use crate::nets::{MultiDomainModel, NetError, Parameters, SingleDomainNet, TeacherBank};
use crate::rng::stream;
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Error, Debug)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },
    #[error("parameter #{0} has no gradient")]
    MissingGradient(usize),
    #[error("no teacher for domain {0}")]
    MissingTeacher(String),
    #[error("teacher for {domain} does not fit the student: {detail}")]
    TeacherMismatch { domain: String, detail: String },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl TrainError {
    /// True for failures caused by the numbers rather than the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::Diverged { .. }
                | TrainError::Tensor(TensorError::NonFinite { .. } | TensorError::Domain { .. })
                | TrainError::Loss(
                    LossError::DegenerateCka
                        | LossError::DegenerateBandwidth
                        | LossError::Tensor(TensorError::NonFinite { .. } | TensorError::Domain { .. })
                )
        )
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Cosine restart period in iterations.
    pub anneal_every: usize,
    pub max_iters: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 7e-4,
            anneal_every: 400,
            max_iters: 1200,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::Config("weight decay must be non-negative".into()));
        }
        if self.anneal_every == 0 {
            return Err(TrainError::Config("annealing frequency must be positive".into()));
        }
        Ok(())
    }

    /// Cosine schedule with warm restarts and a zero floor.
    pub fn lr_at(&self, t: usize) -> f64 {
        let f = self.anneal_every as f64;
        let phase = (t % self.anneal_every) as f64 / f;
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * phase).cos())
    }
}

/// Momentum buffers, allocated on first use.
#[derive(Clone, Debug, Default)]
pub struct SgdState {
    velocity: Vec<Vec<f64>>,
}

fn grads_of(params: &[&mut Tensor]) -> Result<()> {
    match params.iter().position(|p| p.grad().is_none()) {
        Some(i) => Err(TrainError::MissingGradient(i)),
        None => Ok(()),
    }
}

pub fn sgd_step(params: &mut [&mut Tensor], state: &mut SgdState, cfg: &SgdConfig, t: usize) -> Result<()> {
    grads_of(params)?;
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
    }
    if state.velocity.len() != params.len() {
        return Err(TrainError::Config("optimizer state belongs to another parameter set".into()));
    }
    let lr = cfg.lr_at(t);
    for (p, v) in params.iter_mut().zip(&mut state.velocity) {
        let g = p.grad().expect("checked").to_vec();
        let data = p.data_mut();
        for ((x, vi), gi) in data.iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = cfg.momentum * *vi + gi + cfg.weight_decay * *x;
            *x -= lr * *vi;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdadeltaConfig {
    pub rho: f64,
    pub eps: f64,
    pub lr: f64,
}

impl Default for AdadeltaConfig {
    fn default() -> Self {
        Self {
            rho: 0.9,
            eps: 1e-6,
            lr: 0.1,
        }
    }
}

/// Running averages of squared gradients and squared updates.
#[derive(Clone, Debug)]
pub struct AdadeltaState {
    pub cfg: AdadeltaConfig,
    sq_grad: Vec<Vec<f64>>,
    sq_delta: Vec<Vec<f64>>,
}

impl AdadeltaState {
    pub fn new(cfg: AdadeltaConfig) -> Self {
        Self {
            cfg,
            sq_grad: Vec::new(),
            sq_delta: Vec::new(),
        }
    }

    pub fn sq_grad(&self) -> &[Vec<f64>] {
        &self.sq_grad
    }

    pub fn sq_delta(&self) -> &[Vec<f64>] {
        &self.sq_delta
    }
}

pub fn adadelta_step(params: &mut [&mut Tensor], state: &mut AdadeltaState) -> Result<()> {
    grads_of(params)?;
    if state.sq_grad.is_empty() {
        state.sq_grad = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        state.sq_delta = state.sq_grad.clone();
    }
    if state.sq_grad.len() != params.len() {
        return Err(TrainError::Config("optimizer state belongs to another parameter set".into()));
    }
    let AdadeltaConfig { rho, eps, lr } = state.cfg;
    for ((p, eg), ed) in params.iter_mut().zip(&mut state.sq_grad).zip(&mut state.sq_delta) {
        let g = p.grad().expect("checked").to_vec();
        for (((x, gi), egi), edi) in p.data_mut().iter_mut().zip(g).zip(eg.iter_mut()).zip(ed.iter_mut()) {
            *egi = rho * *egi + (1.0 - rho) * gi * gi;
            let delta = -((*edi + eps).sqrt() / (*egi + eps).sqrt()) * gi;
            *edi = rho * *edi + (1.0 - rho) * delta * delta;
            *x += lr * delta;
        }
    }
    Ok(())
}

/// Linear decay `lambda0 * max(0, 1 - t / horizon)`.
pub fn anneal_lambda(lambda0: f64, t: usize, horizon: usize) -> f64 {
    if horizon == 0 {
        return 0.0;
    }
    lambda0 * (1.0 - t as f64 / horizon as f64).max(0.0)
}

/// Hidden widths and feature width of the backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            feature_dim: 32,
        }
    }
}

impl ModelConfig {
    pub fn widths(&self, input_dim: usize) -> Vec<usize> {
        let mut w = vec![input_dim];
        w.extend(&self.hidden);
        w.push(self.feature_dim);
        w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    /// Base per-domain batch size.
    pub batch_size: usize,
    /// Integer multiplier of the batch size per domain; empty means all 1.
    pub batch_weights: Vec<usize>,
    /// Keep the snapshot with the best mean validation accuracy, checked at
    /// the end of every annealing period.
    pub early_stopping: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sgd: SgdConfig::default(),
            batch_size: 32,
            batch_weights: Vec::new(),
            early_stopping: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureLoss {
    Cka,
    L2,
    Cosine,
    None,
}

impl FeatureLoss {
    pub const ALL: [FeatureLoss; 4] = [FeatureLoss::Cka, FeatureLoss::L2, FeatureLoss::Cosine, FeatureLoss::None];

    /// Default feature-loss weight. The squared distance grows with the raw
    /// teacher feature norms, so it starts an order of magnitude lower.
    pub fn default_weight(self) -> f64 {
        match self {
            FeatureLoss::L2 => 0.1,
            _ => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureLoss::Cka => "cka",
            FeatureLoss::L2 => "l2",
            FeatureLoss::Cosine => "cosine",
            FeatureLoss::None => "none",
        }
    }
}

impl fmt::Display for FeatureLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureLoss {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        FeatureLoss::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown feature loss {s:?} (expected cka, l2, cosine or none)"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub lambda_p: f64,
    pub lambda_f: f64,
    /// Domain whose weights are multiplied, with the multiplier.
    pub anchor: Option<(String, f64)>,
    /// Default annealing horizon in iterations.
    pub horizon: usize,
    /// Per-domain horizon overrides.
    pub horizons: BTreeMap<String, usize>,
    pub feature_loss: FeatureLoss,
    pub use_kl: bool,
    pub kernel: KernelSpec,
    /// Weight of the cross-entropy terms.
    pub ce_weight: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda_p: 1.0,
            lambda_f: 1.0,
            anchor: None,
            horizon: 1200,
            horizons: BTreeMap::new(),
            feature_loss: FeatureLoss::Cka,
            use_kl: true,
            kernel: KernelSpec::default(),
            ce_weight: 1.0,
        }
    }
}

impl DistillConfig {
    /// Defaults for one feature loss, with or without the prediction term.
    pub fn with_losses(feature_loss: FeatureLoss, use_kl: bool) -> Self {
        Self {
            lambda_f: feature_loss.default_weight(),
            feature_loss,
            use_kl,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |v: f64| v >= 0.0 && v.is_finite();
        if !nonneg(self.lambda_p) || !nonneg(self.lambda_f) || !nonneg(self.ce_weight) {
            return Err(TrainError::Config("loss weights must be finite and non-negative".into()));
        }
        if let Some((_, m)) = &self.anchor {
            if !nonneg(*m) {
                return Err(TrainError::Config("anchor multiplier must be non-negative".into()));
            }
        }
        if self.horizon == 0 || self.horizons.values().any(|&h| h == 0) {
            return Err(TrainError::Config("annealing horizons must be positive".into()));
        }
        Ok(())
    }

    /// `(lambda_p, lambda_f)` for `domain` at iteration `t`.
    pub fn lambdas(&self, domain: &str, t: usize) -> (f64, f64) {
        let scale = match &self.anchor {
            Some((name, m)) if name == domain => *m,
            _ => 1.0,
        };
        let horizon = self.horizons.get(domain).copied().unwrap_or(self.horizon);
        let lp = if self.use_kl { self.lambda_p } else { 0.0 };
        let lf = if self.feature_loss == FeatureLoss::None { 0.0 } else { self.lambda_f };
        (
            anneal_lambda(scale * lp, t, horizon),
            anneal_lambda(scale * lf, t, horizon),
        )
    }
}

/// One row of the loss trace. Distillation terms are `None` when not
/// computed at that step.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub domain: String,
    pub ce: f64,
    pub kl: Option<f64>,
    pub feature: Option<f64>,
    pub lambda_p: f64,
    pub lambda_f: f64,
}

pub const TRACE_HEADER: &str = "iteration,domain,ce,kl,feature,lambda_p,lambda_f";

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], out: &mut W) -> std::io::Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.iteration,
            r.domain,
            r.ce,
            opt(r.kl),
            opt(r.feature),
            r.lambda_p,
            r.lambda_f
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub trace: Vec<TraceRow>,
    /// Mean validation accuracy at every check, as `(iteration, accuracy)`.
    pub validation: Vec<(usize, f64)>,
    /// Iteration count of the returned snapshot.
    pub best_iteration: usize,
}

/// Teacher outputs on a domain's full training split.
struct TeacherTargets {
    feats: Tensor,
    logits: Tensor,
}

struct DomainSlot<'a> {
    ds: &'a DomainDataset,
    targets: Vec<usize>,
    head_index: usize,
    teacher: Option<TeacherTargets>,
}

struct DomainBatch<'a> {
    slot: &'a DomainSlot<'a>,
    index: Vec<usize>,
}

/// Builds the summed loss of one step. Returns the loss node and one trace
/// row per domain.
fn step_loss(
    g: &mut Graph,
    model: &MultiDomainModel,
    vars: &[Var],
    batches: &[DomainBatch<'_>],
    distill: Option<&DistillConfig>,
    t: usize,
) -> Result<(Var, Vec<TraceRow>)> {
    let nb = model.backbone.layers().len() * 2;
    let nh = model.heads.len();
    let (bvars, rest) = vars.split_at(nb);
    let (hvars, avars) = rest.split_at(2 * nh);
    let adapters: Vec<_> = model.adapters.values().collect();
    let heads: Vec<_> = model.heads.values().collect();
    let ce_weight = distill.map_or(1.0, |d| d.ce_weight);

    let mut total: Option<Var> = None;
    let mut rows = Vec::with_capacity(batches.len());
    for b in batches {
        let s = b.slot;
        let name = &s.ds.name;
        let x = g.constant(s.ds.train.x.select_rows(&b.index)?);
        let labels: Vec<usize> = b.index.iter().map(|&i| s.targets[i]).collect();
        let feats = model.backbone.forward(g, bvars, x)?;
        let hv = &hvars[2 * s.head_index..2 * s.head_index + 2];
        let logits = heads[s.head_index].forward(g, hv, feats)?;
        let ce = losses::cross_entropy_var(g, logits, &labels)?;
        let mut row = TraceRow {
            iteration: t,
            domain: name.clone(),
            ce: g.scalar(ce),
            kl: None,
            feature: None,
            lambda_p: 0.0,
            lambda_f: 0.0,
        };
        let mut term = g.mul(ce, ce_weight)?;
        if let (Some(cfg), Some(teacher)) = (distill, &s.teacher) {
            let (lp, lf) = cfg.lambdas(name, t);
            row.lambda_p = lp;
            row.lambda_f = lf;
            if lp > 0.0 {
                let tl = g.constant(teacher.logits.select_rows(&b.index)?);
                let kl = losses::kl_pred_loss_var(g, logits, tl)?;
                row.kl = Some(g.scalar(kl));
                let w = g.mul(kl, lp)?;
                term = g.add(term, w)?;
            }
            if lf > 0.0 {
                let tf = g.constant(teacher.feats.select_rows(&b.index)?);
                let aligned = adapters[s.head_index].forward(g, avars[s.head_index], feats)?;
                let fl = match cfg.feature_loss {
                    FeatureLoss::Cka => losses::cka_dissimilarity_var(g, aligned, tf, cfg.kernel)?,
                    FeatureLoss::L2 => losses::l2_feature_loss_var(g, aligned, tf)?,
                    FeatureLoss::Cosine => losses::cosine_feature_loss_var(g, aligned, tf)?,
                    FeatureLoss::None => unreachable!("lambda_f is zero without a feature loss"),
                };
                row.feature = Some(g.scalar(fl));
                let w = g.mul(fl, lf)?;
                term = g.add(term, w)?;
            }
        }
        rows.push(row);
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| TrainError::Config("no domains to train".into()))?;
    Ok((total, rows))
}

fn diverged(iteration: usize) -> impl Fn(TrainError) -> TrainError {
    move |e| {
        if e.is_numeric() {
            TrainError::Diverged {
                iteration,
                detail: e.to_string(),
            }
        } else {
            e
        }
    }
}

/// Mean validation accuracy over domains, using the nearest-centroid rule
/// with the first half of each validation class as support.
pub fn validation_accuracy(model: &MultiDomainModel, datasets: &[&DomainDataset]) -> Result<f64> {
    let mut sum = 0.0;
    for ds in datasets {
        let feats = model.backbone.forward_features(&ds.val.x)?;
        sum += crate::eval::holdout_accuracy(&feats, &ds.val.labels).map_err(|e| TrainError::Config(e.to_string()))?;
    }
    Ok(sum / datasets.len() as f64)
}

/// Trains `init` on the given domains. With `distill`, every domain must have
/// a teacher whose features match the student width.
pub fn fit(
    init: MultiDomainModel,
    datasets: &[&DomainDataset],
    distill: Option<(&TeacherBank, &DistillConfig)>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome<MultiDomainModel>> {
    cfg.sgd.validate()?;
    if datasets.is_empty() {
        return Err(TrainError::Config("no training domains".into()));
    }
    if cfg.batch_size == 0 {
        return Err(TrainError::Config("batch size must be positive".into()));
    }
    let weights = if cfg.batch_weights.is_empty() {
        vec![1; datasets.len()]
    } else {
        cfg.batch_weights.clone()
    };
    if weights.len() != datasets.len() || weights.contains(&0) {
        return Err(TrainError::Config("one positive batch weight per domain required".into()));
    }
    if let Some((_, d)) = distill {
        d.validate()?;
    }
    let names: Vec<&str> = init.domains().collect();
    let d = init.backbone.feature_dim();
    let mut slots = Vec::with_capacity(datasets.len());
    for ds in datasets {
        if ds.input_dim != init.backbone.input_dim() {
            return Err(NetError::DimensionMismatch {
                expected: init.backbone.input_dim(),
                found: ds.input_dim,
            }
            .into());
        }
        let head_index = names
            .iter()
            .position(|n| *n == ds.name)
            .ok_or_else(|| TrainError::Config(format!("model has no head for domain {}", ds.name)))?;
        if slots.iter().any(|s: &DomainSlot| s.head_index == head_index) {
            return Err(TrainError::Config(format!("domain {} listed twice", ds.name)));
        }
        let (classes, targets) = ds.train_targets();
        let head_classes = init.heads[&ds.name].classes();
        if head_classes != classes {
            return Err(TrainError::Config(format!(
                "head {} has {head_classes} outputs for {classes} classes",
                ds.name
            )));
        }
        let teacher = match distill {
            None => None,
            Some((bank, _)) => {
                let t = bank.get(&ds.name).ok_or_else(|| TrainError::MissingTeacher(ds.name.clone()))?;
                let mismatch = |detail: String| TrainError::TeacherMismatch {
                    domain: ds.name.clone(),
                    detail,
                };
                if t.backbone.feature_dim() != d {
                    return Err(mismatch(format!("teacher width {} vs student {d}", t.backbone.feature_dim())));
                }
                if t.head.classes() != classes {
                    return Err(mismatch(format!("teacher predicts {} classes, domain has {classes}", t.head.classes())));
                }
                let feats = t.backbone.forward_features(&ds.train.x)?;
                let logits = t.head.logits(&feats)?;
                Some(TeacherTargets { feats, logits })
            }
        };
        slots.push(DomainSlot {
            ds,
            targets,
            head_index,
            teacher,
        });
    }

    let counts: Vec<usize> = datasets.iter().map(|ds| ds.train.len()).collect();
    let mut batcher = MultiDomainBatcher::weighted(&counts, cfg.batch_size, &weights, stream(seed, "batches"))?;
    let distill_cfg = distill.map(|(_, c)| c);
    let mut model = init;
    let nb = model.backbone.layers().len() * 2 + model.heads.len() * 2;
    let mut core_state = SgdState::default();
    let mut adapter_state = SgdState::default();
    let mut trace = Vec::new();
    let mut validation = Vec::new();
    let mut best: Option<(f64, usize, MultiDomainModel)> = None;

    for t in 0..cfg.sgd.max_iters {
        let index = batcher.next().expect("batcher is endless");
        let batches: Vec<DomainBatch> = slots
            .iter()
            .zip(index)
            .map(|(slot, index)| DomainBatch { slot, index })
            .collect();
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let (loss, rows) = step_loss(&mut g, &model, &vars, &batches, distill_cfg, t).map_err(diverged(t))?;
        if !g.scalar(loss).is_finite() {
            return Err(TrainError::Diverged {
                iteration: t,
                detail: format!("loss is {}", g.scalar(loss)),
            });
        }
        g.backward(loss).map_err(|e| diverged(t)(e.into()))?;
        let adapters_active = rows.iter().any(|r| r.feature.is_some());
        trace.extend(rows);

        model.zero_grad();
        model.collect_grads(&g, &vars)?;
        let mut params = model.params_mut();
        let (core, adapters) = params.split_at_mut(nb);
        sgd_step(core, &mut core_state, &cfg.sgd, t)?;
        if adapters_active {
            // Adapters of domains without a feature term this step get a zero
            // gradient so that momentum and decay still apply uniformly.
            for a in adapters.iter_mut().filter(|a| a.grad().is_none()) {
                let zeros = vec![0.0; a.numel()];
                a.accumulate_grad(&zeros)?;
            }
            sgd_step(adapters, &mut adapter_state, &cfg.sgd, t)?;
        }
        drop(params);
        if model.params().iter().any(|p| p.data().iter().any(|v| !v.is_finite())) {
            return Err(TrainError::Diverged {
                iteration: t,
                detail: "parameters became non-finite".into(),
            });
        }

        let done = t + 1;
        if cfg.early_stopping && (done % cfg.sgd.anneal_every == 0 || done == cfg.sgd.max_iters) {
            let acc = validation_accuracy(&model, datasets)?;
            validation.push((done, acc));
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, done, model.clone()));
            }
        }
    }
    model.zero_grad();
    let (model, best_iteration) = match best {
        Some((_, it, mut m)) => {
            m.zero_grad();
            (m, it)
        }
        None => (model, cfg.sgd.max_iters),
    };
    Ok(TrainOutcome {
        model,
        trace,
        validation,
        best_iteration,
    })
}

fn domain_classes(datasets: &[&DomainDataset]) -> Vec<(String, usize)> {
    datasets.iter().map(|ds| (ds.name.clone(), ds.train_targets().0)).collect()
}

/// Stage-one teacher for one domain. The returned network is frozen.
pub fn train_single_domain(
    ds: &DomainDataset,
    model: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome<SingleDomainNet>> {
    let init = MultiDomainModel::new(&model.widths(ds.input_dim), &domain_classes(&[ds]), seed)?;
    let out = fit(init, &[ds], None, cfg, seed)?;
    let MultiDomainModel { backbone, mut heads, .. } = out.model;
    let head = heads.remove(&ds.name).expect("single head");
    let net = SingleDomainNet {
        domain: ds.name.clone(),
        backbone,
        head,
    };
    Ok(TrainOutcome {
        model: net.frozen(),
        trace: out.trace,
        validation: out.validation,
        best_iteration: out.best_iteration,
    })
}

fn input_dim_of(datasets: &[&DomainDataset]) -> Result<usize> {
    let p = datasets[0].input_dim;
    if datasets.iter().any(|d| d.input_dim != p) {
        return Err(TrainError::Config("domains disagree on input width".into()));
    }
    Ok(p)
}

/// Shared backbone with per-domain heads trained on the summed
/// cross-entropies. Adapters stay at identity.
pub fn train_mdl(
    datasets: &[&DomainDataset],
    model: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome<MultiDomainModel>> {
    if datasets.len() < 2 {
        return Err(TrainError::Config("multi-domain training needs at least 2 domains".into()));
    }
    let init = MultiDomainModel::new(&model.widths(input_dim_of(datasets)?), &domain_classes(datasets), seed)?;
    fit(init, datasets, None, cfg, seed)
}

/// Multi-domain training distilled from frozen per-domain teachers.
pub fn train_url(
    datasets: &[&DomainDataset],
    teachers: &TeacherBank,
    model: &ModelConfig,
    distill: &DistillConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome<MultiDomainModel>> {
    if datasets.is_empty() {
        return Err(TrainError::Config("no training domains".into()));
    }
    let init = MultiDomainModel::new(&model.widths(input_dim_of(datasets)?), &domain_classes(datasets), seed)?;
    fit(init, datasets, Some((teachers, distill)), cfg, seed)
}

/// Mean minibatch distillation gaps over one shuffled pass of each
/// domain's training split: `(domain, 1 - CKA, KL)`. Batches with fewer
/// than two samples are skipped.
pub fn distillation_gaps(
    model: &MultiDomainModel,
    teachers: &TeacherBank,
    datasets: &[&DomainDataset],
    batch_size: usize,
    kernel: KernelSpec,
    seed: u64,
) -> Result<Vec<(String, f64, f64)>> {
    use rand::seq::SliceRandom;
    let mut out = Vec::new();
    for ds in datasets {
        let teacher = teachers.get(&ds.name).ok_or_else(|| TrainError::MissingTeacher(ds.name.clone()))?;
        let adapter = model
            .adapters
            .get(&ds.name)
            .ok_or_else(|| TrainError::Config(format!("model has no adapter for {}", ds.name)))?;
        let head = &model.heads[&ds.name];
        let mut order: Vec<usize> = (0..ds.train.len()).collect();
        order.shuffle(&mut stream(seed, &format!("gaps/{}", ds.name)));
        let (mut cka, mut kl, mut n) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(batch_size.max(2)).filter(|c| c.len() >= 2) {
            let x = ds.train.x.select_rows(chunk)?;
            let sf = model.backbone.forward_features(&x)?;
            let tf = teacher.backbone.forward_features(&x)?;
            let aligned = crate::nets::apply_adapter(adapter, &sf)?;
            cka += losses::cka_dissimilarity(&aligned, &tf, kernel)?;
            kl += losses::kl_pred_loss(&head.logits(&sf)?, &teacher.head.logits(&tf)?)?;
            n += 1;
        }
        if n == 0 {
            return Err(TrainError::Config(format!("domain {} has too few samples", ds.name)));
        }
        out.push((ds.name.clone(), cka / n as f64, kl / n as f64));
    }
    Ok(out)
}
