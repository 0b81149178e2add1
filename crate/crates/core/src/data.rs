//! Synthetic multi-domain datasets, episode sampling and batch iteration.
//!
//! A dataset directory holds `manifest.json` plus one raw payload pair per
//! split: `<split>_x.f64` (row-major little-endian `f64`) and `<split>_y.i32`
//! (little-endian `i32` labels).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::stream;
use crate::tensor::{Tensor, TensorError};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Error, Debug)]
pub enum DataError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("regime {regime} infeasible: {detail}")]
    Infeasible { regime: Regime, detail: String },
    #[error("dataset {0} has no samples")]
    EmptyDataset(String),
    #[error("invalid batch configuration: {0}")]
    InvalidBatch(String),
    #[error("missing payload file {0}")]
    MissingPayload(PathBuf),
    #[error("payload {file} holds {found} bytes, manifest implies {expected}")]
    SizeMismatch {
        file: PathBuf,
        expected: u64,
        found: u64,
    },
    #[error("dataset format version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("split {split}: {detail}")]
    Validation { split: String, detail: String },
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Samples of one split: an `n x p` matrix and one class id per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Sorted distinct class ids.
    pub fn classes(&self) -> Vec<usize> {
        self.labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Sample indices grouped by class, in class-id order.
    pub fn by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            map.entry(l).or_default().push(i);
        }
        map
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::Train, SplitKind::Val, SplitKind::Test];

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub name: String,
    pub input_dim: usize,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl DomainDataset {
    pub fn split(&self, kind: SplitKind) -> &Split {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::Test => &self.test,
        }
    }

    /// Training labels remapped to `0..C` in class-id order, for the heads.
    pub fn train_targets(&self) -> (usize, Vec<usize>) {
        let classes = self.train.classes();
        let index: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        (classes.len(), self.train.labels.iter().map(|l| index[l]).collect())
    }

    /// Class-disjointness across splits, row widths, and at least two
    /// samples per test class.
    pub fn validate(&self) -> Result<()> {
        let mut seen: BTreeMap<usize, &str> = BTreeMap::new();
        for kind in SplitKind::ALL {
            let s = self.split(kind);
            if s.x.rank() != 2 || s.x.cols() != self.input_dim || s.x.rows() != s.len() {
                return Err(DataError::Validation {
                    split: kind.name().into(),
                    detail: format!("sample matrix {:?} does not match {} labels of width {}", s.x.shape(), s.len(), self.input_dim),
                });
            }
            for c in s.classes() {
                if let Some(other) = seen.insert(c, kind.name()) {
                    return Err(DataError::Validation {
                        split: kind.name().into(),
                        detail: format!("class {c} also appears in split {other}"),
                    });
                }
            }
        }
        if let Some((c, idx)) = self.test.by_class().into_iter().find(|(_, v)| v.len() < 2) {
            return Err(DataError::Validation {
                split: "test".into(),
                detail: format!("class {c} has {} sample(s), need at least 2", idx.len()),
            });
        }
        Ok(())
    }
}

/// Parameters of the synthetic benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub domains: usize,
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
    pub samples_per_class: usize,
    pub latent_dim: usize,
    pub input_dim: usize,
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            domains: 3,
            train_classes: 10,
            val_classes: 5,
            test_classes: 10,
            samples_per_class: 20,
            latent_dim: 8,
            input_dim: 16,
            noise: 0.6,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("domains", self.domains),
            ("train_classes", self.train_classes),
            ("val_classes", self.val_classes),
            ("test_classes", self.test_classes),
            ("samples_per_class", self.samples_per_class),
            ("latent_dim", self.latent_dim),
            ("input_dim", self.input_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(DataError::InvalidSpec(format!("{name} must be positive")));
        }
        if self.input_dim < self.latent_dim {
            return Err(DataError::InvalidSpec("input_dim must be at least latent_dim".into()));
        }
        if self.samples_per_class < 2 {
            return Err(DataError::InvalidSpec("samples_per_class must be at least 2".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(DataError::InvalidSpec("noise must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Per-domain elementwise squashing applied after the linear lift.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Squash {
    Tanh,
    Sine,
    Softsign,
}

impl Squash {
    fn apply(self, v: f64) -> f64 {
        match self {
            Squash::Tanh => v.tanh(),
            Squash::Sine => v.sin(),
            Squash::Softsign => v / (1.0 + v.abs()),
        }
    }
}

/// `rows x cols` matrix with orthonormal columns (Gram-Schmidt on gaussians).
fn orthonormal_columns(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

/// Builds `spec.domains` datasets. Each domain draws its own class
/// prototypes from a shared latent distribution and renders them through
/// its own random lift, squashing function and offset.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Vec<DomainDataset>> {
    spec.validate()?;
    const SQUASHES: [Squash; 3] = [Squash::Tanh, Squash::Sine, Squash::Softsign];
    let (p, l) = (spec.input_dim, spec.latent_dim);
    let total_classes = spec.train_classes + spec.val_classes + spec.test_classes;
    (0..spec.domains)
        .map(|tau| {
            let name = format!("domain{tau}");
            let mut trng = stream(seed, &format!("synthetic/transform/{tau}"));
            let lift = orthonormal_columns(&mut trng, p, l);
            let gain = 1.5;
            let squash = SQUASHES[tau % SQUASHES.len()];
            let offset: Vec<f64> = (0..p).map(|_| 0.5 * trng.sample::<f64, _>(StandardNormal)).collect();

            let mut crng = stream(seed, &format!("synthetic/prototypes/{tau}"));
            let protos: Vec<Vec<f64>> = (0..total_classes)
                .map(|_| (0..l).map(|_| crng.sample(StandardNormal)).collect())
                .collect();

            let mut srng = stream(seed, &format!("synthetic/samples/{tau}"));
            let mut render = |proto: &[f64]| -> Vec<f64> {
                let z: Vec<f64> = proto
                    .iter()
                    .map(|m| m + spec.noise * srng.sample::<f64, _>(StandardNormal))
                    .collect();
                (0..p)
                    .map(|r| {
                        let s: f64 = (0..l).map(|c| lift[c][r] * z[c]).sum();
                        squash.apply(gain * s) + offset[r]
                    })
                    .collect()
            };
            let mut make = |classes: std::ops::Range<usize>| -> Result<Split> {
                let mut x = Vec::new();
                let mut labels = Vec::new();
                for c in classes {
                    for _ in 0..spec.samples_per_class {
                        x.extend(render(&protos[c]));
                        labels.push(c);
                    }
                }
                Ok(Split {
                    x: Tensor::new(&[labels.len(), p], x)?,
                    labels,
                })
            };
            let a = spec.train_classes;
            let b = a + spec.val_classes;
            let ds = DomainDataset {
                name,
                input_dim: p,
                train: make(0..a)?,
                val: make(a..b)?,
                test: make(b..total_classes)?,
            };
            ds.validate()?;
            Ok(ds)
        })
        .collect()
}

/// Episode sampling regime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Regime {
    /// Random way, random shot per class.
    Varying,
    /// Random way, five shots per class.
    VaryingWayFiveShot,
    /// Five ways, one shot per class.
    FiveWayOneShot,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Varying, Regime::VaryingWayFiveShot, Regime::FiveWayOneShot];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Varying => "varying",
            Regime::VaryingWayFiveShot => "vw5shot",
            Regime::FiveWayOneShot => "5way1shot",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| format!("unknown regime {s:?} (expected varying, vw5shot or 5way1shot)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeConfig {
    pub max_way: usize,
    pub max_shot: usize,
    /// Queries per class upper bound.
    pub query_cap: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            max_way: 10,
            max_shot: 10,
            query_cap: 10,
        }
    }
}

/// One few-shot task. Samples are row indices into the sampled split;
/// labels are episode-local (`0..way`), with `classes[j]` the original id of
/// local label `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub regime: Regime,
    pub classes: Vec<usize>,
    pub support: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query: Vec<usize>,
    pub query_labels: Vec<usize>,
}

impl Episode {
    pub fn way(&self) -> usize {
        self.classes.len()
    }
}

/// Draws one episode from `split` under `regime`.
pub fn sample_episode(split: &Split, regime: Regime, cfg: &EpisodeConfig, rng: &mut impl Rng) -> Result<Episode> {
    let infeasible = |detail: String| DataError::Infeasible { regime, detail };
    let fixed_shot = match regime {
        Regime::Varying => None,
        Regime::VaryingWayFiveShot => Some(5),
        Regime::FiveWayOneShot => Some(1),
    };
    let min_samples = fixed_shot.unwrap_or(1) + 1;
    let by_class = split.by_class();
    let eligible: Vec<(usize, &Vec<usize>)> = by_class
        .iter()
        .filter(|(_, v)| v.len() >= min_samples)
        .map(|(c, v)| (*c, v))
        .collect();
    let way = match regime {
        Regime::FiveWayOneShot => {
            if eligible.len() < 5 {
                return Err(infeasible(format!("{} classes with >= 2 samples, need 5", eligible.len())));
            }
            5
        }
        _ => {
            let hi = cfg.max_way.min(eligible.len());
            if hi < 2 {
                return Err(infeasible(format!(
                    "{} classes with >= {min_samples} samples (max_way {}), need 2",
                    eligible.len(),
                    cfg.max_way
                )));
            }
            rng.random_range(2..=hi)
        }
    };
    if cfg.query_cap == 0 {
        return Err(infeasible("query cap is zero".into()));
    }
    let picked = rand::seq::index::sample(rng, eligible.len(), way).into_vec();
    let mut chosen = Vec::with_capacity(way);
    for &e in &picked {
        let (class, idx) = eligible[e];
        let mut idx = idx.clone();
        idx.shuffle(rng);
        let shot = match fixed_shot {
            Some(s) => s,
            None => rng.random_range(1..=cfg.max_shot.max(1).min(idx.len() - 1)),
        };
        chosen.push((class, idx, shot));
    }
    let queries = chosen
        .iter()
        .map(|(_, idx, shot)| idx.len() - shot)
        .min()
        .unwrap_or(0)
        .min(cfg.query_cap);

    let mut ep = Episode {
        regime,
        classes: Vec::with_capacity(way),
        support: Vec::new(),
        support_labels: Vec::new(),
        query: Vec::new(),
        query_labels: Vec::new(),
    };
    for (local, (class, idx, shot)) in chosen.into_iter().enumerate() {
        ep.classes.push(class);
        ep.support.extend_from_slice(&idx[..shot]);
        ep.support_labels.extend(std::iter::repeat_n(local, shot));
        ep.query.extend_from_slice(&idx[shot..shot + queries]);
        ep.query_labels.extend(std::iter::repeat_n(local, queries));
    }
    Ok(ep)
}

/// Endless per-domain batch stream. Each domain walks a shuffled
/// permutation of its samples and reshuffles once it is used up, so every
/// sample is visited exactly once per epoch. Batches may straddle epochs.
#[derive(Debug)]
pub struct MultiDomainBatcher<R: Rng> {
    orders: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    sizes: Vec<usize>,
    rng: R,
}

impl<R: Rng> MultiDomainBatcher<R> {
    pub fn new(sample_counts: &[usize], batch_sizes: &[usize], mut rng: R) -> Result<Self> {
        if sample_counts.len() != batch_sizes.len() || sample_counts.is_empty() {
            return Err(DataError::InvalidBatch("one batch size per domain required".into()));
        }
        if let Some(i) = sample_counts.iter().position(|&n| n == 0) {
            return Err(DataError::EmptyDataset(format!("domain #{i}")));
        }
        if batch_sizes.contains(&0) {
            return Err(DataError::InvalidBatch("batch sizes must be positive".into()));
        }
        let orders = sample_counts
            .iter()
            .map(|&n| {
                let mut o: Vec<usize> = (0..n).collect();
                o.shuffle(&mut rng);
                o
            })
            .collect();
        Ok(Self {
            orders,
            cursors: vec![0; sample_counts.len()],
            sizes: batch_sizes.to_vec(),
            rng,
        })
    }

    /// Base batch size `b` scaled by integer per-domain weights.
    pub fn weighted(sample_counts: &[usize], base: usize, weights: &[usize], rng: R) -> Result<Self> {
        let sizes: Vec<usize> = weights.iter().map(|w| w * base).collect();
        Self::new(sample_counts, &sizes, rng)
    }

    pub fn batch_sizes(&self) -> &[usize] {
        &self.sizes
    }
}

impl<R: Rng> Iterator for MultiDomainBatcher<R> {
    type Item = Vec<Vec<usize>>;

    fn next(&mut self) -> Option<Self::Item> {
        let mut out = Vec::with_capacity(self.sizes.len());
        for d in 0..self.sizes.len() {
            let mut batch = Vec::with_capacity(self.sizes[d]);
            while batch.len() < self.sizes[d] {
                if self.cursors[d] == self.orders[d].len() {
                    self.orders[d].shuffle(&mut self.rng);
                    self.cursors[d] = 0;
                }
                batch.push(self.orders[d][self.cursors[d]]);
                self.cursors[d] += 1;
            }
            out.push(batch);
        }
        Some(out)
    }
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
struct SplitManifest {
    classes: Vec<usize>,
    counts: Vec<usize>,
    samples: usize,
    x_file: String,
    y_file: String,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
struct Manifest {
    format_version: u32,
    domain: String,
    input_dim: usize,
    train: SplitManifest,
    val: SplitManifest,
    test: SplitManifest,
}

pub fn save_dataset(ds: &DomainDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifests = Vec::new();
    for kind in SplitKind::ALL {
        let s = ds.split(kind);
        let x_file = format!("{}_x.f64", kind.name());
        let y_file = format!("{}_y.i32", kind.name());
        let xb: Vec<u8> = s.x.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let yb: Vec<u8> = s.labels.iter().flat_map(|&l| (l as i32).to_le_bytes()).collect();
        fs::write(dir.join(&x_file), xb)?;
        fs::write(dir.join(&y_file), yb)?;
        let groups = s.by_class();
        manifests.push(SplitManifest {
            classes: groups.keys().copied().collect(),
            counts: groups.values().map(Vec::len).collect(),
            samples: s.len(),
            x_file,
            y_file,
        });
    }
    let mut it = manifests.into_iter();
    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        domain: ds.name.clone(),
        input_dim: ds.input_dim,
        train: it.next().expect("train"),
        val: it.next().expect("val"),
        test: it.next().expect("test"),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn read_payload(dir: &Path, name: &str, expected: u64) -> Result<Vec<u8>> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(DataError::MissingPayload(path));
    }
    let bytes = fs::read(&path)?;
    if bytes.len() as u64 != expected {
        return Err(DataError::SizeMismatch {
            file: path,
            expected,
            found: bytes.len() as u64,
        });
    }
    Ok(bytes)
}

fn load_split(dir: &Path, kind: SplitKind, m: &SplitManifest, p: usize) -> Result<Split> {
    let invalid = |detail: String| DataError::Validation {
        split: kind.name().into(),
        detail,
    };
    if m.classes.len() != m.counts.len() {
        return Err(invalid("classes and counts lists differ in length".into()));
    }
    if m.counts.iter().sum::<usize>() != m.samples {
        return Err(invalid(format!("counts sum to {}, manifest claims {} samples", m.counts.iter().sum::<usize>(), m.samples)));
    }
    if m.samples == 0 {
        return Err(invalid("split is empty".into()));
    }
    let xb = read_payload(dir, &m.x_file, (m.samples * p * 8) as u64)?;
    let yb = read_payload(dir, &m.y_file, (m.samples * 4) as u64)?;
    let x: Vec<f64> = xb.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect();
    let labels = yb
        .chunks_exact(4)
        .map(|c| {
            let v = i32::from_le_bytes(c.try_into().expect("4"));
            usize::try_from(v).map_err(|_| invalid(format!("negative label {v}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let split = Split {
        x: Tensor::new(&[m.samples, p], x)?,
        labels,
    };
    let groups = split.by_class();
    let classes: Vec<usize> = groups.keys().copied().collect();
    let counts: Vec<usize> = groups.values().map(Vec::len).collect();
    if classes.len() != m.classes.len() {
        return Err(invalid(format!(
            "manifest lists {} classes, payload holds {}",
            m.classes.len(),
            classes.len()
        )));
    }
    if classes != m.classes || counts != m.counts {
        return Err(invalid("per-class counts disagree with the payload".into()));
    }
    Ok(split)
}

pub fn load_dataset(dir: &Path) -> Result<DomainDataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(DataError::MissingPayload(manifest_path));
    }
    let m: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    if m.format_version != DATASET_FORMAT_VERSION {
        return Err(DataError::VersionMismatch {
            found: m.format_version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    if m.input_dim == 0 {
        return Err(DataError::Validation {
            split: "train".into(),
            detail: "input_dim is zero".into(),
        });
    }
    let ds = DomainDataset {
        name: m.domain.clone(),
        input_dim: m.input_dim,
        train: load_split(dir, SplitKind::Train, &m.train, m.input_dim)?,
        val: load_split(dir, SplitKind::Val, &m.val, m.input_dim)?,
        test: load_split(dir, SplitKind::Test, &m.test, m.input_dim)?,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes each domain into `root/<domain name>/`.
pub fn save_benchmark(datasets: &[DomainDataset], root: &Path) -> Result<()> {
    for ds in datasets {
        save_dataset(ds, &root.join(&ds.name))?;
    }
    Ok(())
}

/// Loads every subdirectory of `root` holding a manifest, in name order.
pub fn load_benchmark(root: &Path) -> Result<Vec<DomainDataset>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(DataError::MissingPayload(root.join("*").join(MANIFEST_FILE)));
    }
    dirs.iter().map(|d| load_dataset(d)).collect()
}
