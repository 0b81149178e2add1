//! MLP backbone, per-domain heads and adapters, plus checkpoint files.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "URLD" | version: u32 | count: u32
//! count x { name_len: u32 | name: utf-8 | rank: u32 | dims: rank x u32 }
//! payloads: f64 values of every tensor, in manifest order
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::tensor::{Graph, Tensor, TensorError, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"URLD";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Error, Debug)]
pub enum NetError {
    #[error("checkpoint header corrupt: expected magic {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint malformed: {0}")]
    Malformed(String),
    #[error("checkpoint layout: {0}")]
    Layout(String),
    #[error("feature dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NetError>;

/// Anything that owns trainable tensors in a fixed order.
pub trait Parameters {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    /// Records every parameter as a graph leaf, in `params` order.
    fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params().into_iter().map(|t| g.leaf(t)).collect()
    }

    /// Folds the graph gradients of previously bound leaves into the
    /// parameters' gradient buffers.
    fn collect_grads(&mut self, g: &Graph, vars: &[Var]) -> std::result::Result<(), TensorError> {
        for (t, v) in self.params_mut().into_iter().zip(vars) {
            if let Some(grad) = g.grad(*v) {
                t.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }

    fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Tensor::zero_grad);
    }
}

/// Uniform init in `±sqrt(6 / (fan_in + fan_out))`.
fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Result<Tensor> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Ok(Tensor::new(&[fan_in, fan_out], data)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            weight: glorot(rng, fan_in, fan_out)?.with_grad(),
            bias: Tensor::zeros(&[fan_out])?.with_grad(),
        })
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            weight: Tensor::zeros(&[fan_in, fan_out])?.with_grad(),
            bias: Tensor::zeros(&[fan_out])?.with_grad(),
        })
    }

    fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    fn apply(g: &mut Graph, weight: Var, bias: Var, x: Var) -> std::result::Result<Var, TensorError> {
        let h = g.matmul(x, weight)?;
        g.add_row(h, bias)
    }
}

/// Fully connected feature extractor. Hidden layers use ReLU; the output
/// layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    layers: Vec<Linear>,
}

impl Backbone {
    /// `widths` lists input, hidden and output sizes (at least two entries).
    pub fn new(widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        Self::check_widths(widths)?;
        let layers = widths
            .windows(2)
            .map(|w| Linear::new(rng, w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        Self::check_widths(widths)?;
        let layers = widths
            .windows(2)
            .map(|w| Linear::zeros(w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Linear>) -> Result<Self> {
        if layers.is_empty() {
            return Err(NetError::Layout("backbone needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(NetError::Layout(format!(
                    "layer widths {} and {} do not chain",
                    pair[0].out_dim(),
                    pair[1].in_dim()
                )));
            }
        }
        for l in &layers {
            if l.bias.numel() != l.out_dim() {
                return Err(NetError::Layout("bias width differs from layer output".into()));
            }
        }
        Ok(Self { layers })
    }

    fn check_widths(widths: &[usize]) -> Result<()> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(NetError::Layout(format!("invalid widths {widths:?}")));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(Linear::out_dim));
        w
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Forward pass on already-bound parameter leaves.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let width = g.shape(x).get(1).copied().unwrap_or(0);
        if g.shape(x).len() != 2 || width != self.input_dim() {
            return Err(NetError::DimensionMismatch {
                expected: self.input_dim(),
                found: width,
            });
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, pair) in vars.chunks(2).enumerate() {
            h = Linear::apply(g, pair[0], pair[1], h)?;
            if i < last {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    /// `n x p` batch to `n x d` features, without tracking gradients.
    pub fn forward_features(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params().into_iter().map(|t| g.constant(t.clone())).collect();
        let x = g.constant(batch.clone());
        let out = self.forward(&mut g, &vars, x)?;
        Ok(g.tensor(out))
    }
}

impl Parameters for Backbone {
    fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// Linear classifier over features.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub linear: Linear,
}

impl Head {
    pub fn new(rng: &mut impl Rng, feature_dim: usize, classes: usize) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(rng, feature_dim, classes)?,
        })
    }

    pub fn classes(&self) -> usize {
        self.linear.out_dim()
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], feats: Var) -> Result<Var> {
        Ok(Linear::apply(g, vars[0], vars[1], feats)?)
    }

    pub fn logits(&self, feats: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let w = g.constant(self.linear.weight.clone());
        let b = g.constant(self.linear.bias.clone());
        let f = g.constant(feats.clone());
        let out = Linear::apply(&mut g, w, b, f)?;
        Ok(g.tensor(out))
    }
}

impl Parameters for Head {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.linear.weight, &self.linear.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.linear.weight, &mut self.linear.bias]
    }
}

/// Square bias-free linear map applied on the right: `feats x matrix`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub matrix: Tensor,
}

impl Adapter {
    pub fn identity(d: usize) -> Result<Self> {
        Ok(Self {
            matrix: Tensor::identity(d)?.with_grad(),
        })
    }

    pub fn from_matrix(matrix: Tensor) -> Result<Self> {
        match matrix.shape() {
            [a, b] if a == b => Ok(Self { matrix }),
            s => Err(NetError::Layout(format!("adapter must be square, got {s:?}"))),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn forward(&self, g: &mut Graph, matrix: Var, feats: Var) -> Result<Var> {
        let width = g.shape(feats).get(1).copied().unwrap_or(0);
        if width != self.dim() {
            return Err(NetError::DimensionMismatch {
                expected: self.dim(),
                found: width,
            });
        }
        Ok(g.matmul(feats, matrix)?)
    }
}

impl Parameters for Adapter {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.matrix]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.matrix]
    }
}

pub fn apply_adapter(adapter: &Adapter, feats: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let m = g.constant(adapter.matrix.clone());
    let f = g.constant(feats.clone());
    let out = adapter.forward(&mut g, m, f)?;
    Ok(g.tensor(out))
}

/// Shared backbone with one head and one adapter per domain.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiDomainModel {
    pub backbone: Backbone,
    pub heads: BTreeMap<String, Head>,
    pub adapters: BTreeMap<String, Adapter>,
}

impl MultiDomainModel {
    /// Random backbone and heads, identity adapters. `domains` pairs each
    /// domain name with its training class count.
    pub fn new(widths: &[usize], domains: &[(String, usize)], seed: u64) -> Result<Self> {
        let mut rng = crate::rng::stream(seed, "init/backbone");
        let backbone = Backbone::new(widths, &mut rng)?;
        let d = backbone.feature_dim();
        let mut heads = BTreeMap::new();
        let mut adapters = BTreeMap::new();
        for (name, classes) in domains {
            let mut rng = crate::rng::stream(seed, &format!("init/head/{name}"));
            heads.insert(name.clone(), Head::new(&mut rng, d, *classes)?);
            adapters.insert(name.clone(), Adapter::identity(d)?);
        }
        Self::from_parts(backbone, heads, adapters)
    }

    pub fn from_parts(
        backbone: Backbone,
        heads: BTreeMap<String, Head>,
        adapters: BTreeMap<String, Adapter>,
    ) -> Result<Self> {
        if !heads.keys().eq(adapters.keys()) {
            return Err(NetError::Layout("heads and adapters cover different domains".into()));
        }
        let d = backbone.feature_dim();
        for (name, h) in &heads {
            if h.linear.in_dim() != d {
                return Err(NetError::Layout(format!("head {name} expects width {}", h.linear.in_dim())));
            }
        }
        for (name, a) in &adapters {
            if a.dim() != d {
                return Err(NetError::Layout(format!("adapter {name} has size {}", a.dim())));
            }
        }
        Ok(Self {
            backbone,
            heads,
            adapters,
        })
    }

    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.heads.keys().map(String::as_str)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        push_backbone(&mut ck, &self.backbone);
        for (name, h) in &self.heads {
            ck.push(format!("head.{name}.weight"), &h.linear.weight);
            ck.push(format!("head.{name}.bias"), &h.linear.bias);
        }
        for (name, a) in &self.adapters {
            ck.push(format!("adapter.{name}"), &a.matrix);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let parts = ck.parts()?;
        let heads = parts
            .heads
            .into_iter()
            .map(|(k, l)| (k, Head { linear: l }))
            .collect();
        let adapters = parts
            .adapters
            .into_iter()
            .map(|(k, m)| Ok((k, Adapter::from_matrix(m.with_grad())?)))
            .collect::<Result<_>>()?;
        Self::from_parts(parts.backbone, heads, adapters)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl Parameters for MultiDomainModel {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.backbone.params();
        p.extend(self.heads.values().flat_map(|h| h.params()));
        p.extend(self.adapters.values().flat_map(|a| a.params()));
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.backbone.params_mut();
        p.extend(self.heads.values_mut().flat_map(|h| h.params_mut()));
        p.extend(self.adapters.values_mut().flat_map(|a| a.params_mut()));
        p
    }
}

/// Backbone and head trained on one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct SingleDomainNet {
    pub domain: String,
    pub backbone: Backbone,
    pub head: Head,
}

impl SingleDomainNet {
    /// Frozen copy suitable for a [`TeacherBank`].
    pub fn frozen(&self) -> Self {
        let mut t = self.clone();
        t.params_mut().into_iter().for_each(|p| *p = p.clone().frozen());
        t
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        push_backbone(&mut ck, &self.backbone);
        ck.push(format!("head.{}.weight", self.domain), &self.head.linear.weight);
        ck.push(format!("head.{}.bias", self.domain), &self.head.linear.bias);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let parts = ck.parts()?;
        if !parts.adapters.is_empty() || parts.heads.len() != 1 {
            return Err(NetError::Layout(
                "single-domain checkpoint must hold exactly one head and no adapters".into(),
            ));
        }
        let (domain, linear) = parts.heads.into_iter().next().expect("one head");
        if linear.in_dim() != parts.backbone.feature_dim() {
            return Err(NetError::Layout("head width differs from backbone output".into()));
        }
        Ok(Self {
            domain,
            backbone: parts.backbone,
            head: Head { linear },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl Parameters for SingleDomainNet {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.backbone.params();
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.backbone.params_mut();
        p.extend(self.head.params_mut());
        p
    }
}

/// Frozen per-domain teachers.
#[derive(Clone, Debug, Default)]
pub struct TeacherBank {
    teachers: BTreeMap<String, SingleDomainNet>,
}

impl TeacherBank {
    pub fn new(nets: impl IntoIterator<Item = SingleDomainNet>) -> Self {
        let teachers = nets.into_iter().map(|n| (n.domain.clone(), n.frozen())).collect();
        Self { teachers }
    }

    pub fn get(&self, domain: &str) -> Option<&SingleDomainNet> {
        self.teachers.get(domain)
    }

    pub fn iter(&self) -> impl Iterator<Item = &SingleDomainNet> {
        self.teachers.values()
    }

    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }
}

fn push_backbone(ck: &mut Checkpoint, b: &Backbone) {
    for (i, l) in b.layers.iter().enumerate() {
        ck.push(format!("backbone.{i}.weight"), &l.weight);
        ck.push(format!("backbone.{i}.bias"), &l.bias);
    }
}

struct Parts {
    backbone: Backbone,
    heads: BTreeMap<String, Linear>,
    adapters: BTreeMap<String, Tensor>,
}

/// Ordered list of named tensors, the unit of persistence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => NetError::Truncated(what),
        _ => NetError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &'static str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

impl Checkpoint {
    pub fn push(&mut self, name: String, t: &Tensor) {
        self.tensors.push((name, t.clone()));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
        }
        for (_, t) in &self.tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(NetError::BadMagic {
                expected: *CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = read_u32(r, "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(NetError::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let count = read_u32(r, "tensor count")?;
        let mut manifest = Vec::with_capacity(count.min(4096) as usize);
        for _ in 0..count {
            let len = read_u32(r, "name length")? as usize;
            let mut name = vec![0u8; len];
            read_exact(r, &mut name, "tensor name")?;
            let name = String::from_utf8(name).map_err(|_| NetError::Malformed("tensor name is not utf-8".into()))?;
            let rank = read_u32(r, "rank")? as usize;
            let dims = (0..rank)
                .map(|_| read_u32(r, "dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if dims.contains(&0) {
                return Err(NetError::Malformed(format!("tensor {name} has a zero dimension")));
            }
            manifest.push((name, dims));
        }
        let mut tensors = Vec::with_capacity(manifest.len());
        for (name, dims) in manifest {
            let n: usize = dims.iter().product();
            let mut raw = vec![0u8; n * 8];
            read_exact(r, &mut raw, "payload")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(&dims, data)?));
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(NetError::Malformed("trailing bytes after payload".into()));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    fn parts(&self) -> Result<Parts> {
        let mut layers: BTreeMap<usize, (Option<Tensor>, Option<Tensor>)> = BTreeMap::new();
        let mut heads: BTreeMap<String, (Option<Tensor>, Option<Tensor>)> = BTreeMap::new();
        let mut adapters = BTreeMap::new();
        for (name, t) in &self.tensors {
            let t = t.clone().with_grad();
            let bad = || NetError::Layout(format!("unrecognised tensor name {name:?}"));
            if let Some(rest) = name.strip_prefix("backbone.") {
                let (idx, kind) = rest.split_once('.').ok_or_else(bad)?;
                let idx: usize = idx.parse().map_err(|_| bad())?;
                let slot = layers.entry(idx).or_default();
                match kind {
                    "weight" => slot.0 = Some(t),
                    "bias" => slot.1 = Some(t),
                    _ => return Err(bad()),
                }
            } else if let Some(rest) = name.strip_prefix("head.") {
                let (domain, kind) = rest.rsplit_once('.').ok_or_else(bad)?;
                let slot = heads.entry(domain.to_string()).or_default();
                match kind {
                    "weight" => slot.0 = Some(t),
                    "bias" => slot.1 = Some(t),
                    _ => return Err(bad()),
                }
            } else if let Some(domain) = name.strip_prefix("adapter.") {
                adapters.insert(domain.to_string(), t);
            } else {
                return Err(bad());
            }
        }
        let linear = |label: String, (w, b): (Option<Tensor>, Option<Tensor>)| -> Result<Linear> {
            match (w, b) {
                (Some(weight), Some(bias)) if weight.rank() == 2 && bias.rank() == 1 => {
                    Ok(Linear { weight, bias })
                }
                _ => Err(NetError::Layout(format!("{label} is missing a weight or bias"))),
            }
        };
        if layers.keys().copied().ne(0..layers.len()) {
            return Err(NetError::Layout("backbone layer indices are not contiguous".into()));
        }
        let layers = layers
            .into_iter()
            .map(|(i, wb)| linear(format!("backbone layer {i}"), wb))
            .collect::<Result<Vec<_>>>()?;
        let backbone = Backbone::from_layers(layers)?;
        let heads = heads
            .into_iter()
            .map(|(k, wb)| Ok((k.clone(), linear(format!("head {k}"), wb)?)))
            .collect::<Result<_>>()?;
        Ok(Parts {
            backbone,
            heads,
            adapters,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tensor::testutil::rel_err;
    use sha2::{Digest, Sha256};

    fn input(n: usize, p: usize, seed: u64) -> Tensor {
        let mut rng = stream(seed, "input");
        Tensor::new(&[n, p], (0..n * p).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn model() -> MultiDomainModel {
        let domains = vec![("alpha".to_string(), 4), ("beta".to_string(), 3)];
        MultiDomainModel::new(&[5, 8, 6], &domains, 11).unwrap()
    }

    #[test]
    fn zero_backbone_gives_zero_features() {
        let b = Backbone::zeros(&[4, 7, 3]).unwrap();
        let f = b.forward_features(&input(5, 4, 1)).unwrap();
        assert_eq!(f.shape(), &[5, 3]);
        assert!(f.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_single_layer_passes_input_through() {
        let mut b = Backbone::zeros(&[3, 3]).unwrap();
        b.layers[0].weight = Tensor::identity(3).unwrap();
        let x = input(4, 3, 2);
        assert_eq!(b.forward_features(&x).unwrap().data(), x.data());
    }

    #[test]
    fn forward_matches_hand_rolled_arithmetic() {
        let b = Backbone::new(&[3, 5, 2], &mut stream(3, "net")).unwrap();
        let x = input(4, 3, 4);
        let got = b.forward_features(&x).unwrap();
        let (l0, l1) = (&b.layers[0], &b.layers[1]);
        for i in 0..4 {
            let hidden: Vec<f64> = (0..5)
                .map(|j| {
                    let s: f64 = (0..3).map(|k| x.at(i, k) * l0.weight.at(k, j)).sum::<f64>() + l0.bias.data()[j];
                    s.max(0.0)
                })
                .collect();
            for j in 0..2 {
                let o: f64 = (0..5).map(|k| hidden[k] * l1.weight.at(k, j)).sum::<f64>() + l1.bias.data()[j];
                assert!((o - got.at(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let b = Backbone::zeros(&[4, 3]).unwrap();
        assert!(matches!(
            b.forward_features(&input(2, 5, 0)),
            Err(NetError::DimensionMismatch { expected: 4, found: 5 })
        ));
    }

    #[test]
    fn glorot_init_respects_bounds() {
        let b = Backbone::new(&[16, 64, 32], &mut stream(0, "x")).unwrap();
        let lim = (6.0f64 / 80.0).sqrt();
        assert!(b.layers[0].weight.data().iter().all(|v| v.abs() <= lim));
        assert!(b.layers[0].bias.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn adapter_examples() {
        let f = input(2, 3, 5);
        assert_eq!(apply_adapter(&Adapter::identity(3).unwrap(), &f).unwrap().data(), f.data());
        let zero = Adapter::from_matrix(Tensor::zeros(&[3, 3]).unwrap()).unwrap();
        assert!(apply_adapter(&zero, &f).unwrap().data().iter().all(|v| *v == 0.0));

        let m = input(3, 3, 6);
        let a = Adapter::from_matrix(m.clone()).unwrap();
        let out = apply_adapter(&a, &f).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                let want: f64 = (0..3).map(|k| f.at(i, k) * m.at(k, j)).sum();
                assert!((want - out.at(i, j)).abs() < 1e-12);
            }
        }
        assert!(matches!(
            apply_adapter(&a, &input(2, 4, 0)),
            Err(NetError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn adapter_commutes_with_batching() {
        let a = Adapter::from_matrix(input(4, 4, 7)).unwrap();
        let x1 = input(3, 4, 8);
        let x2 = input(2, 4, 9);
        let both = Tensor::new(&[5, 4], [x1.data(), x2.data()].concat()).unwrap();
        let joint = apply_adapter(&a, &both).unwrap();
        let split = [apply_adapter(&a, &x1).unwrap().into_data(), apply_adapter(&a, &x2).unwrap().into_data()].concat();
        assert_eq!(joint.data(), &split[..]);
    }

    #[test]
    fn identity_adapter_after_backbone_is_exact() {
        let b = Backbone::new(&[4, 6, 3], &mut stream(1, "b")).unwrap();
        let x = input(5, 4, 10);
        let f = b.forward_features(&x).unwrap();
        let adapted = apply_adapter(&Adapter::identity(3).unwrap(), &f).unwrap();
        assert_eq!(f.data(), adapted.data());
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let back = MultiDomainModel::load(&path).unwrap();
        assert_eq!(back.heads.keys().collect::<Vec<_>>(), vec!["alpha", "beta"]);
        for (a, b) in m.params().iter().zip(back.params()) {
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn checkpoint_bytes_are_stable() {
        let digest = || {
            let mut buf = Vec::new();
            model().to_checkpoint().write_to(&mut buf).unwrap();
            Sha256::digest(&buf).to_vec()
        };
        assert_eq!(digest(), digest());
    }

    #[test]
    fn checkpoint_errors_are_distinct() {
        let mut buf = Vec::new();
        model().to_checkpoint().write_to(&mut buf).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::read_from(&mut &bad[..]), Err(NetError::BadMagic { .. })));

        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(
            Checkpoint::read_from(&mut &bad[..]),
            Err(NetError::VersionMismatch { found: 9, .. })
        ));

        let short = &buf[..buf.len() - 3];
        assert!(matches!(Checkpoint::read_from(&mut &short[..]), Err(NetError::Truncated("payload"))));
    }

    #[test]
    fn teacher_round_trip_and_freezing() {
        let net = SingleDomainNet {
            domain: "gamma".into(),
            backbone: Backbone::new(&[3, 4, 2], &mut stream(2, "t")).unwrap(),
            head: Head::new(&mut stream(2, "h"), 2, 5).unwrap(),
        };
        let back = SingleDomainNet::from_checkpoint(&net.to_checkpoint()).unwrap();
        assert_eq!(back, net);
        let bank = TeacherBank::new([back]);
        assert!(bank.get("gamma").unwrap().params().iter().all(|p| !p.requires_grad()));
        assert!(SingleDomainNet::from_checkpoint(&model().to_checkpoint()).is_err());
    }

    #[test]
    fn collect_grads_matches_graph() {
        let mut m = model();
        let mut g = Graph::new();
        let vars = m.backbone.bind(&mut g);
        let x = g.constant(input(3, 5, 12));
        let f = m.backbone.forward(&mut g, &vars, x).unwrap();
        let l = g.sum(f).unwrap();
        g.backward(l).unwrap();
        m.backbone.collect_grads(&g, &vars).unwrap();
        let want = g.grad(vars[0]).unwrap();
        assert!(rel_err(m.backbone.params()[0].grad().unwrap(), want) == 0.0);
        m.zero_grad();
        assert!(m.params().iter().all(|p| p.grad().is_none()));
    }
}
