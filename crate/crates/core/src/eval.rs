//! Meta-test classifiers, episode aggregation and retrieval metrics.
//!
//! All classifiers work on backbone features. The nearest-centroid rule uses
//! a softmax over cosine similarities; the adapted variant first learns a
//! square linear map on the support set; the Mahalanobis variant measures
//! distances under a pooled within-class covariance.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::data::{sample_episode, DataError, EpisodeConfig, Regime, Split};
use crate::losses::{self, LossError, NORM_EPS};
use crate::nets::{Adapter, Backbone, NetError};
use crate::rng::{stream, StreamRng};
use crate::tensor::{Graph, Tensor, TensorError, Var};
use crate::train::{adadelta_step, AdadeltaConfig, AdadeltaState, TrainError};

#[derive(Error, Debug)]
pub enum EvalError {
    #[error("class {0} has no support samples")]
    EmptyClass(usize),
    #[error("class {0} has a single sample; retrieval needs at least 2")]
    SingletonClass(usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("covariance is singular (add a ridge term)")]
    Singular,
    #[error("adaptation raised the support loss from {before} to {after}")]
    AdaptationDiverged { before: f64, after: f64 },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl EvalError {
    pub fn is_numeric(&self) -> bool {
        match self {
            EvalError::NonFinite(_) | EvalError::Singular | EvalError::AdaptationDiverged { .. } => true,
            EvalError::Train(e) => e.is_numeric(),
            EvalError::Tensor(TensorError::NonFinite { .. }) => true,
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Class means of the support embeddings; row `j` belongs to local class `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidSet {
    pub centroids: Tensor,
    pub classes: Vec<usize>,
}

/// `C x n` matrix whose product with the support features gives the class
/// means.
fn averaging_matrix(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut counts = vec![0usize; classes];
    for &l in labels {
        if l >= classes {
            return Err(EvalError::Invalid(format!("label {l} out of range for {classes} classes")));
        }
        counts[l] += 1;
    }
    if let Some(j) = counts.iter().position(|&c| c == 0) {
        return Err(EvalError::EmptyClass(j));
    }
    let n = labels.len();
    let mut data = vec![0.0; classes * n];
    for (i, &l) in labels.iter().enumerate() {
        data[l * n + i] = 1.0 / counts[l] as f64;
    }
    Ok(Tensor::new(&[classes, n], data)?)
}

fn centroids_var(g: &mut Graph, feats: Var, labels: &[usize], classes: usize) -> Result<Var> {
    let avg = g.constant(averaging_matrix(labels, classes)?);
    Ok(g.matmul(avg, feats)?)
}

/// Class means for labels `0..classes`.
pub fn compute_centroids(feats: &Tensor, labels: &[usize], classes: usize) -> Result<CentroidSet> {
    if feats.rank() != 2 || feats.rows() != labels.len() {
        return Err(EvalError::Invalid(format!(
            "{} labels for features of shape {:?}",
            labels.len(),
            feats.shape()
        )));
    }
    let mut g = Graph::new();
    let f = g.constant(feats.clone());
    let c = centroids_var(&mut g, f, labels, classes)?;
    Ok(CentroidSet {
        centroids: g.tensor(c),
        classes: (0..classes).collect(),
    })
}

/// `scale * cos(z_i, c_j)` logits.
fn cosine_logits_var(g: &mut Graph, z: Var, c: Var, scale: f64) -> Result<Var> {
    let zn = g.normalize_rows(z, NORM_EPS)?;
    let cn = g.normalize_rows(c, NORM_EPS)?;
    let ct = g.transpose(cn)?;
    let sim = g.matmul(zn, ct)?;
    Ok(g.mul(sim, scale)?)
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn check_finite(what: &'static str, t: &Tensor) -> Result<()> {
    if t.data().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(EvalError::NonFinite(what))
    }
}

/// Softmax over `scale * cos(z, c_j)`, and the argmax class per query.
pub fn ncc_predict_scaled(query: &Tensor, centroids: &CentroidSet, scale: f64) -> Result<(Tensor, Vec<usize>)> {
    check_finite("query features", query)?;
    check_finite("centroids", &centroids.centroids)?;
    if query.cols() != centroids.centroids.cols() {
        return Err(EvalError::Invalid("query and centroid widths differ".into()));
    }
    let mut g = Graph::new();
    let z = g.constant(query.clone());
    let c = g.constant(centroids.centroids.clone());
    let logits = cosine_logits_var(&mut g, z, c, scale)?;
    let probs = g.softmax_rows(logits)?;
    let labels = (0..query.rows()).map(|i| argmax(g.tensor(logits).row(i))).collect();
    Ok((g.tensor(probs), labels))
}

pub fn ncc_predict(query: &Tensor, centroids: &CentroidSet) -> Result<(Tensor, Vec<usize>)> {
    ncc_predict_scaled(query, centroids, 1.0)
}

/// Accuracy of the nearest-centroid rule when each class contributes the
/// first half of its samples (at least one) as support and the rest as
/// queries.
pub fn holdout_accuracy(feats: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    let (mut support, mut slabels, mut query, mut qlabels) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (local, idx) in groups.values().enumerate() {
        let k = (idx.len() / 2).max(1);
        support.extend_from_slice(&idx[..k]);
        slabels.extend(std::iter::repeat_n(local, k));
        query.extend_from_slice(&idx[k..]);
        qlabels.extend(std::iter::repeat_n(local, idx.len() - k));
    }
    if query.is_empty() {
        return Err(EvalError::Invalid("no held-out samples".into()));
    }
    let cents = compute_centroids(&feats.select_rows(&support)?, &slabels, groups.len())?;
    let (_, pred) = ncc_predict(&feats.select_rows(&query)?, &cents)?;
    Ok(accuracy(&pred, &qlabels))
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptConfig {
    pub iterations: usize,
    pub optimizer: AdadeltaConfig,
    /// Multiplier on the cosine logits.
    pub scale: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            iterations: 40,
            optimizer: AdadeltaConfig::default(),
            scale: 1.0,
        }
    }
}

/// Learned map plus the support loss before every step and after the last.
#[derive(Clone, Debug)]
pub struct AdaptationState {
    pub adapter: Adapter,
    pub optimizer: AdadeltaState,
    pub nll_trace: Vec<f64>,
}

/// Mean support NLL of the cosine nearest-centroid rule after mapping the
/// features through `matrix`.
pub fn support_nll(g: &mut Graph, feats: &Tensor, labels: &[usize], classes: usize, matrix: Var, scale: f64) -> Result<Var> {
    let f = g.constant(feats.clone());
    let z = g.matmul(f, matrix)?;
    let c = centroids_var(g, z, labels, classes)?;
    let logits = cosine_logits_var(g, z, c, scale)?;
    Ok(losses::cross_entropy_var(g, logits, labels)?)
}

/// Fits an identity-initialised map on the support features by minimising
/// the mean negative log-likelihood of the support labels under the
/// cosine nearest-centroid rule.
pub fn adapt_features(support: &Tensor, labels: &[usize], classes: usize, cfg: &AdaptConfig) -> Result<AdaptationState> {
    check_finite("support features", support)?;
    let mut adapter = Adapter::identity(support.cols())?;
    let mut optimizer = AdadeltaState::new(cfg.optimizer);
    let mut nll_trace = Vec::with_capacity(cfg.iterations + 1);
    for it in 0..=cfg.iterations {
        let mut g = Graph::new();
        let m = g.leaf(&adapter.matrix);
        let loss = support_nll(&mut g, support, labels, classes, m, cfg.scale)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(EvalError::NonFinite("support loss"));
        }
        nll_trace.push(value);
        if it == cfg.iterations {
            break;
        }
        g.backward(loss)?;
        adapter.matrix.zero_grad();
        adapter.matrix.accumulate_grad(g.grad(m).ok_or(EvalError::NonFinite("adapter gradient"))?)?;
        adadelta_step(&mut [&mut adapter.matrix], &mut optimizer)?;
    }
    let (before, after) = (nll_trace[0], nll_trace[cfg.iterations]);
    if after > before {
        return Err(EvalError::AdaptationDiverged { before, after });
    }
    adapter.matrix.zero_grad();
    Ok(AdaptationState {
        adapter,
        optimizer,
        nll_trace,
    })
}

/// How the covariance ridge is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Ridge {
    /// `factor * trace(Q) / d`, never below [`RIDGE_FLOOR`].
    Relative(f64),
    Absolute(f64),
}

impl Default for Ridge {
    fn default() -> Self {
        Ridge::Relative(1e-3)
    }
}

/// Smallest relative ridge. Keeps one-shot episodes (zero within-class
/// scatter) well posed; they reduce to Euclidean distances.
pub const RIDGE_FLOOR: f64 = 1e-9;

/// Pooled within-class covariance, normalised by `max(n - C, 1)`.
pub fn pooled_covariance(feats: &Tensor, labels: &[usize], classes: usize) -> Result<Tensor> {
    let cents = compute_centroids(feats, labels, classes)?;
    let d = feats.cols();
    let mut q = vec![0.0; d * d];
    for (i, &l) in labels.iter().enumerate() {
        let diff: Vec<f64> = feats.row(i).iter().zip(cents.centroids.row(l)).map(|(a, b)| a - b).collect();
        for r in 0..d {
            for c in 0..d {
                q[r * d + c] += diff[r] * diff[c];
            }
        }
    }
    let denom = labels.len().saturating_sub(classes).max(1) as f64;
    q.iter_mut().for_each(|v| *v /= denom);
    Ok(Tensor::new(&[d, d], q)?)
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn invert(a: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    if a.shape() != [n, n] {
        return Err(EvalError::Invalid("inverse needs a square matrix".into()));
    }
    let mut m = a.data().to_vec();
    let mut inv = Tensor::identity(n)?.into_data();
    let scale = m.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .expect("non-empty");
        if !(m[piv * n + col].abs() > 1e-13 * scale) {
            return Err(EvalError::Singular);
        }
        for k in 0..n {
            m.swap(col * n + k, piv * n + k);
            inv.swap(col * n + k, piv * n + k);
        }
        let p = m[col * n + col];
        for k in 0..n {
            m[col * n + k] /= p;
            inv[col * n + k] /= p;
        }
        for r in (0..n).filter(|&r| r != col) {
            let f = m[r * n + col];
            if f != 0.0 {
                for k in 0..n {
                    m[r * n + k] -= f * m[col * n + k];
                    inv[r * n + k] -= f * inv[col * n + k];
                }
            }
        }
    }
    Ok(Tensor::new(&[n, n], inv)?)
}

/// Lower-triangular `L` with `a = L L^T`.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let v = a.at(i, i) - s;
                if !(v > 0.0) {
                    return Err(EvalError::Singular);
                }
                l[i * n + i] = v.sqrt();
            } else {
                l[i * n + j] = (a.at(i, j) - s) / l[j * n + j];
            }
        }
    }
    Ok(Tensor::new(&[n, n], l)?)
}

/// Regularised covariance with its inverse and a Cholesky factor of the
/// inverse.
#[derive(Clone, Debug, PartialEq)]
pub struct MahalanobisParams {
    pub q: Tensor,
    pub ridge: f64,
    pub inverse: Tensor,
    pub factor: Tensor,
}

impl MahalanobisParams {
    pub fn new(q: Tensor, ridge: Ridge) -> Result<Self> {
        let d = q.rows();
        let r = match ridge {
            Ridge::Absolute(r) => r,
            Ridge::Relative(f) => {
                let tr: f64 = (0..d).map(|i| q.at(i, i)).sum();
                (f * tr / d as f64).max(RIDGE_FLOOR)
            }
        };
        if !(r >= 0.0 && r.is_finite()) {
            return Err(EvalError::Invalid(format!("ridge must be non-negative, got {r}")));
        }
        let mut reg = q.clone();
        for i in 0..d {
            reg.data_mut()[i * d + i] += r;
        }
        let inverse = invert(&reg)?;
        let factor = cholesky(&inverse)?;
        Ok(Self {
            q,
            ridge: r,
            inverse,
            factor,
        })
    }

    /// `0.5 (f - c)^T Q^-1 (f - c)` using the explicit inverse.
    pub fn distance(&self, f: &[f64], c: &[f64]) -> f64 {
        let d = f.len();
        let diff: Vec<f64> = f.iter().zip(c).map(|(a, b)| a - b).collect();
        let mut s = 0.0;
        for r in 0..d {
            let row: f64 = (0..d).map(|k| self.inverse.at(r, k) * diff[k]).sum();
            s += diff[r] * row;
        }
        0.5 * s
    }

    /// Same distance as half the squared Euclidean norm of `L^T (f - c)`.
    pub fn distance_via_factor(&self, f: &[f64], c: &[f64]) -> f64 {
        let d = f.len();
        let diff: Vec<f64> = f.iter().zip(c).map(|(a, b)| a - b).collect();
        let mut s = 0.0;
        for j in 0..d {
            let v: f64 = (j..d).map(|i| self.factor.at(i, j) * diff[i]).sum();
            s += v * v;
        }
        0.5 * s
    }
}

/// Nearest class mean under the pooled-covariance Mahalanobis distance.
/// Ties go to the lowest class.
pub fn mahalanobis_predict(
    query: &Tensor,
    support: &Tensor,
    labels: &[usize],
    classes: usize,
    ridge: Ridge,
) -> Result<Vec<usize>> {
    check_finite("support features", support)?;
    check_finite("query features", query)?;
    let cents = compute_centroids(support, labels, classes)?;
    let params = MahalanobisParams::new(pooled_covariance(support, labels, classes)?, ridge)?;
    Ok((0..query.rows())
        .map(|i| {
            let neg: Vec<f64> = (0..classes)
                .map(|j| -params.distance(query.row(i), cents.centroids.row(j)))
                .collect();
            argmax(&neg)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ClassifierKind {
    Ncc,
    NccAdapt,
    NccMd,
}

impl ClassifierKind {
    pub const ALL: [ClassifierKind; 3] = [ClassifierKind::Ncc, ClassifierKind::NccAdapt, ClassifierKind::NccMd];

    pub fn name(self) -> &'static str {
        match self {
            ClassifierKind::Ncc => "ncc",
            ClassifierKind::NccAdapt => "ncc-adapt",
            ClassifierKind::NccMd => "ncc-md",
        }
    }
}

impl fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassifierKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        ClassifierKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown classifier {s:?} (expected ncc, ncc-adapt or ncc-md)"))
    }
}

/// Predictions for one episode, plus the adaptation loss trace when the
/// classifier adapts.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOutcome {
    pub predictions: Vec<usize>,
    pub nll_trace: Option<Vec<f64>>,
}

pub trait EpisodeClassifier {
    fn name(&self) -> String;

    fn classify(
        &self,
        support: &Tensor,
        support_labels: &[usize],
        way: usize,
        query: &Tensor,
        rng: &mut StreamRng,
    ) -> Result<EpisodeOutcome>;
}

/// The three meta-test classifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub kind: ClassifierKind,
    pub adapt: AdaptConfig,
    pub ridge: Ridge,
}

impl Classifier {
    pub fn new(kind: ClassifierKind) -> Self {
        Self {
            kind,
            adapt: AdaptConfig::default(),
            ridge: Ridge::default(),
        }
    }
}

impl EpisodeClassifier for Classifier {
    fn name(&self) -> String {
        self.kind.name().to_string()
    }

    fn classify(
        &self,
        support: &Tensor,
        support_labels: &[usize],
        way: usize,
        query: &Tensor,
        _rng: &mut StreamRng,
    ) -> Result<EpisodeOutcome> {
        match self.kind {
            ClassifierKind::Ncc => {
                let cents = compute_centroids(support, support_labels, way)?;
                let (_, predictions) = ncc_predict_scaled(query, &cents, self.adapt.scale)?;
                Ok(EpisodeOutcome {
                    predictions,
                    nll_trace: None,
                })
            }
            ClassifierKind::NccAdapt => {
                let state = adapt_features(support, support_labels, way, &self.adapt)?;
                let s = crate::nets::apply_adapter(&state.adapter, support)?;
                let q = crate::nets::apply_adapter(&state.adapter, query)?;
                let cents = compute_centroids(&s, support_labels, way)?;
                let (_, predictions) = ncc_predict_scaled(&q, &cents, self.adapt.scale)?;
                Ok(EpisodeOutcome {
                    predictions,
                    nll_trace: Some(state.nll_trace),
                })
            }
            ClassifierKind::NccMd => Ok(EpisodeOutcome {
                predictions: mahalanobis_predict(query, support, support_labels, way, self.ridge)?,
                nll_trace: None,
            }),
        }
    }
}

/// Summary of the adaptation traces of an evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationSummary {
    /// Episodes whose support loss never rose between iterations.
    pub monotone_episodes: usize,
    pub mean_initial_nll: f64,
    pub mean_final_nll: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub dataset: String,
    pub regime: Regime,
    pub classifier: String,
    pub episodes: usize,
    /// Mean query accuracy in `[0, 1]`.
    pub mean: f64,
    /// 95% half-width, absent below two episodes.
    pub ci: Option<f64>,
    pub accuracies: Vec<f64>,
    pub adaptation: Option<AdaptationSummary>,
}

/// Mean and `1.96 * std / sqrt(n)` (sample standard deviation).
pub fn mean_and_ci(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, Some(1.96 * var.sqrt() / (n as f64).sqrt()))
}

/// Runs `episodes` episodes of `regime` on `split`, featurised by `backbone`.
/// Episode `i` draws from the stream `episode/<i>` of `seed`, so results do
/// not depend on evaluation order.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_episodes(
    dataset: &str,
    split: &Split,
    backbone: &Backbone,
    classifier: &dyn EpisodeClassifier,
    regime: Regime,
    episodes: usize,
    cfg: &EpisodeConfig,
    seed: u64,
) -> Result<EvalReport> {
    let feats = backbone.forward_features(&split.x)?;
    evaluate_on_features(dataset, split, &feats, classifier, regime, episodes, cfg, seed)
}

/// [`evaluate_episodes`] on precomputed features, one row per sample.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_on_features(
    dataset: &str,
    split: &Split,
    feats: &Tensor,
    classifier: &dyn EpisodeClassifier,
    regime: Regime,
    episodes: usize,
    cfg: &EpisodeConfig,
    seed: u64,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(EvalError::Invalid("episode count must be positive".into()));
    }
    if feats.rows() != split.len() {
        return Err(EvalError::Invalid("one feature row per sample required".into()));
    }
    let mut accuracies = Vec::with_capacity(episodes);
    let mut traces = Vec::new();
    for i in 0..episodes {
        let mut rng = stream(seed, &format!("episode/{i}"));
        let ep = sample_episode(split, regime, cfg, &mut rng)?;
        let support = feats.select_rows(&ep.support)?;
        let query = feats.select_rows(&ep.query)?;
        let out = classifier.classify(&support, &ep.support_labels, ep.way(), &query, &mut rng)?;
        if out.predictions.len() != ep.query_labels.len() {
            return Err(EvalError::Invalid("classifier returned the wrong number of predictions".into()));
        }
        accuracies.push(accuracy(&out.predictions, &ep.query_labels));
        if let Some(t) = out.nll_trace {
            traces.push(t);
        }
    }
    let (mean, ci) = mean_and_ci(&accuracies);
    let adaptation = (!traces.is_empty()).then(|| {
        let n = traces.len() as f64;
        AdaptationSummary {
            monotone_episodes: traces.iter().filter(|t| t.windows(2).all(|w| w[1] <= w[0])).count(),
            mean_initial_nll: traces.iter().map(|t| t[0]).sum::<f64>() / n,
            mean_final_nll: traces.iter().map(|t| t[t.len() - 1]).sum::<f64>() / n,
        }
    });
    Ok(EvalReport {
        dataset: dataset.to_string(),
        regime,
        classifier: classifier.name(),
        episodes,
        mean,
        ci,
        accuracies,
        adaptation,
    })
}

pub const REPORT_HEADER: &str = "dataset,regime,classifier,episodes,mean,ci";

/// CSV with accuracies in percent.
pub fn write_report_csv<W: Write>(reports: &[EvalReport], out: &mut W) -> std::io::Result<()> {
    writeln!(out, "{REPORT_HEADER}")?;
    for r in reports {
        let ci = r.ci.map(|c| format!("{:.4}", 100.0 * c)).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{:.4},{}",
            r.dataset,
            r.regime,
            r.classifier,
            r.episodes,
            100.0 * r.mean,
            ci
        )?;
    }
    Ok(())
}

/// `"mean ± ci"` in percent with one decimal; `"mean"` alone without a CI.
pub fn format_cell(mean: f64, ci: Option<f64>) -> String {
    match ci {
        Some(c) => format!("{:.1} ± {:.1}", 100.0 * mean, 100.0 * c),
        None => format!("{:.1}", 100.0 * mean),
    }
}

/// Aligned table: one row per dataset, one column per classifier/regime.
pub fn format_report_table(reports: &[EvalReport]) -> String {
    let mut columns: Vec<String> = Vec::new();
    let mut rows: Vec<String> = Vec::new();
    let mut cells: BTreeMap<(String, String), String> = BTreeMap::new();
    for r in reports {
        let col = format!("{} {}", r.classifier, r.regime);
        if !columns.contains(&col) {
            columns.push(col.clone());
        }
        if !rows.contains(&r.dataset) {
            rows.push(r.dataset.clone());
        }
        cells.insert((r.dataset.clone(), col), format_cell(r.mean, r.ci));
    }
    let width0 = rows.iter().map(|r| r.chars().count()).chain(["dataset".len()]).max().unwrap_or(0);
    let widths: Vec<usize> = columns
        .iter()
        .map(|c| {
            rows.iter()
                .filter_map(|r| cells.get(&(r.clone(), c.clone())))
                .map(|s| s.chars().count())
                .chain([c.chars().count()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let pad = |s: &str, w: usize| format!("{s}{}", " ".repeat(w - s.chars().count()));
    let mut out = pad("dataset", width0);
    for (c, w) in columns.iter().zip(&widths) {
        out.push_str("  ");
        out.push_str(&pad(c, *w));
    }
    out = out.trim_end().to_string();
    out.push('\n');
    for r in &rows {
        let mut line = pad(r, width0);
        for (c, w) in columns.iter().zip(&widths) {
            line.push_str("  ");
            let cell = cells.get(&(r.clone(), c.clone())).map_or("-", String::as_str);
            line.push_str(&pad(cell, *w));
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

/// Fraction of samples whose `k` most cosine-similar other samples include
/// one with the same label, for every `k` in `ks` (clamped to `n - 1`).
/// Similarity ties go to the lower sample index.
pub fn recall_at_k(feats: &Tensor, labels: &[usize], ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    check_finite("retrieval features", feats)?;
    let n = labels.len();
    if feats.rows() != n || n < 2 {
        return Err(EvalError::Invalid("retrieval needs one feature row per label and at least 2 samples".into()));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    labels.iter().for_each(|&l| *counts.entry(l).or_default() += 1);
    if let Some((&c, _)) = counts.iter().find(|(_, &v)| v < 2) {
        return Err(EvalError::SingletonClass(c));
    }
    if ks.contains(&0) {
        return Err(EvalError::Invalid("k must be positive".into()));
    }
    let mut g = Graph::new();
    let f = g.constant(feats.clone());
    let fnorm = g.normalize_rows(f, NORM_EPS)?;
    let unit = g.tensor(fnorm);
    // Rank of the first same-label neighbour for every sample.
    let first_hit: Vec<usize> = (0..n)
        .map(|i| {
            let sims: Vec<f64> = (0..n)
                .map(|j| unit.row(i).iter().zip(unit.row(j)).map(|(a, b)| a * b).sum())
                .collect();
            let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
            order.iter().position(|&j| labels[j] == labels[i]).expect("class has two samples")
        })
        .collect();
    Ok(ks
        .iter()
        .map(|&k| {
            let k = k.min(n - 1);
            (k, first_hit.iter().filter(|&&r| r < k).count() as f64 / n as f64)
        })
        .collect())
}

/// A label-agnostic baseline that guesses uniformly among the episode's
/// classes.
#[derive(Clone, Copy, Debug, Default)]
pub struct RandomGuess;

impl EpisodeClassifier for RandomGuess {
    fn name(&self) -> String {
        "random".into()
    }

    fn classify(&self, _: &Tensor, _: &[usize], way: usize, query: &Tensor, rng: &mut StreamRng) -> Result<EpisodeOutcome> {
        Ok(EpisodeOutcome {
            predictions: (0..query.rows()).map(|_| rng.random_range(0..way)).collect(),
            nll_trace: None,
        })
    }
}
