//! Feature and prediction matching losses.
//!
//! Every loss comes in a graph form taking [`Var`]s (used during training)
//! and, where handy, a plain form on [`Tensor`]s. Teacher-side arguments are
//! always detached: gradients only reach the student.

use thiserror::Error;

use crate::tensor::{Graph, Tensor, TensorError, Var};

/// Norm guard used by the cosine-based losses and classifiers.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum LossError {
    #[error("kernel matrices need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("rbf bandwidth is degenerate: all pairwise distances are zero")]
    DegenerateBandwidth,
    #[error("cka is undefined: centered kernel has zero norm")]
    DegenerateCka,
    #[error("invalid kernel parameter {0}")]
    InvalidKernel(f64),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// How the rbf bandwidth is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bandwidth {
    /// `sigma = c * median` of the nonzero pairwise distances of the batch.
    MedianFraction(f64),
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KernelSpec {
    Linear,
    Rbf(Bandwidth),
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::Rbf(Bandwidth::MedianFraction(0.5))
    }
}

impl KernelSpec {
    fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Rbf(Bandwidth::MedianFraction(c)) | KernelSpec::Rbf(Bandwidth::Fixed(c))
                if !(c > 0.0 && c.is_finite()) =>
            {
                Err(LossError::InvalidKernel(c))
            }
            _ => Ok(()),
        }
    }
}

/// Median of the nonzero upper-triangle entries of a squared-distance
/// matrix, returned as a (non-squared) distance.
fn median_distance(sq: &[f64], n: usize) -> Result<f64> {
    let mut d: Vec<f64> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .map(|(i, j)| sq[i * n + j].sqrt())
        .filter(|v| *v > 0.0)
        .collect();
    if d.is_empty() {
        return Err(LossError::DegenerateBandwidth);
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    Ok(if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    })
}

fn rows_of(g: &Graph, x: Var) -> Result<usize> {
    match g.shape(x) {
        [n, _] if *n >= 2 => Ok(*n),
        [n, _] => Err(LossError::TooFewSamples(*n)),
        s => Err(LossError::ShapeMismatch {
            op: "gram",
            left: s.to_vec(),
            right: vec![0, 0],
        }),
    }
}

/// Kernel matrix of the rows of `x`. The rbf bandwidth is computed from the
/// current values and treated as a constant for differentiation.
pub fn gram_var(g: &mut Graph, x: Var, spec: KernelSpec) -> Result<Var> {
    spec.validate()?;
    let n = rows_of(g, x)?;
    match spec {
        KernelSpec::Linear => {
            let xt = g.transpose(x)?;
            Ok(g.matmul(x, xt)?)
        }
        KernelSpec::Rbf(bw) => {
            let d2 = g.pairwise_sq_dist(x)?;
            let sigma = match bw {
                Bandwidth::Fixed(s) => s,
                Bandwidth::MedianFraction(c) => c * median_distance(g.value(d2), n)?,
            };
            let scaled = g.mul(d2, -1.0 / (2.0 * sigma * sigma))?;
            Ok(g.exp(scaled)?)
        }
    }
}

pub fn gram(x: &Tensor, spec: KernelSpec) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let k = gram_var(&mut g, v, spec)?;
    Ok(g.tensor(k))
}

/// Centering matrix `I - 11^T / n`.
pub fn centering(n: usize) -> Tensor {
    let mut h = vec![-1.0 / n as f64; n * n];
    for i in 0..n {
        h[i * n + i] += 1.0;
    }
    Tensor::new(&[n, n], h).expect("square")
}

fn same_shape(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(LossError::ShapeMismatch {
            op,
            left: g.shape(a).to_vec(),
            right: g.shape(b).to_vec(),
        });
    }
    Ok(())
}

fn detach(g: &mut Graph, v: Var) -> Var {
    let t = g.tensor(v);
    g.constant(t)
}

/// `1 - CKA(M, Y)` over one minibatch, with gradient flowing into `m` only.
pub fn cka_dissimilarity_var(g: &mut Graph, m: Var, y: Var, spec: KernelSpec) -> Result<Var> {
    let (nm, ny) = (g.shape(m).first().copied(), g.shape(y).first().copied());
    if nm != ny {
        return Err(LossError::ShapeMismatch {
            op: "cka",
            left: g.shape(m).to_vec(),
            right: g.shape(y).to_vec(),
        });
    }
    let y = detach(g, y);
    let n = rows_of(g, m)?;
    let p = gram_var(g, m, spec)?;
    let t = gram_var(g, y, spec)?;
    let h = g.constant(centering(n));
    let ph = g.matmul(p, h)?;
    let hph = g.matmul(h, ph)?;
    let cross = g.mul(hph, t)?;
    let num = g.sum(cross)?;
    let self_p = g.mul(hph, p)?;
    let den_p = g.sum(self_p)?;
    let th = g.matmul(t, h)?;
    let hth = g.matmul(h, th)?;
    let self_t = g.mul(hth, t)?;
    let den_t = g.sum(self_t)?;

    let fro = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let degenerate = |den: f64, k: &[f64]| !(den > 1e-20 * fro(k));
    if degenerate(g.scalar(den_p), g.value(p)) || degenerate(g.scalar(den_t), g.value(t)) {
        return Err(LossError::DegenerateCka);
    }
    let den = g.mul(den_p, den_t)?;
    let root = g.sqrt(den)?;
    let sim = g.div(num, root)?;
    let neg = g.neg(sim)?;
    Ok(g.add(neg, 1.0)?)
}

pub fn cka_dissimilarity(m: &Tensor, y: &Tensor, spec: KernelSpec) -> Result<f64> {
    let mut g = Graph::new();
    let mv = g.constant(m.clone());
    let yv = g.constant(y.clone());
    let l = cka_dissimilarity_var(&mut g, mv, yv, spec)?;
    Ok(g.scalar(l))
}

/// Mean over rows of `|m_i - y_i|^2`.
pub fn l2_feature_loss_var(g: &mut Graph, m: Var, y: Var) -> Result<Var> {
    same_shape(g, "l2", m, y)?;
    let y = detach(g, y);
    let n = g.shape(m)[0] as f64;
    let diff = g.sub(m, y)?;
    let sq = g.mul(diff, diff)?;
    let s = g.sum(sq)?;
    Ok(g.div(s, n)?)
}

/// Mean over rows of `1 - cos(m_i, y_i)`.
pub fn cosine_feature_loss_var(g: &mut Graph, m: Var, y: Var) -> Result<Var> {
    same_shape(g, "cosine", m, y)?;
    let y = detach(g, y);
    let n = g.shape(m)[0] as f64;
    let mn = g.normalize_rows(m, NORM_EPS)?;
    let yn = g.normalize_rows(y, NORM_EPS)?;
    let prod = g.mul(mn, yn)?;
    let s = g.sum(prod)?;
    let mean = g.div(s, n)?;
    let neg = g.neg(mean)?;
    Ok(g.add(neg, 1.0)?)
}

pub fn l2_feature_loss(m: &Tensor, y: &Tensor) -> Result<f64> {
    plain2(m, y, l2_feature_loss_var)
}

pub fn cosine_feature_loss(m: &Tensor, y: &Tensor) -> Result<f64> {
    plain2(m, y, cosine_feature_loss_var)
}

fn plain2(a: &Tensor, b: &Tensor, f: impl Fn(&mut Graph, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let bv = g.constant(b.clone());
    let out = f(&mut g, av, bv)?;
    Ok(g.scalar(out))
}

/// Mean over rows of `KL(softmax(teacher) || softmax(student))`.
pub fn kl_pred_loss_var(g: &mut Graph, student: Var, teacher: Var) -> Result<Var> {
    same_shape(g, "kl", student, teacher)?;
    let teacher = detach(g, teacher);
    let n = g.shape(student)[0] as f64;
    let log_p = g.log_softmax_rows(teacher)?;
    let p = g.softmax_rows(teacher)?;
    let log_q = g.log_softmax_rows(student)?;
    let diff = g.sub(log_p, log_q)?;
    let terms = g.mul(p, diff)?;
    let s = g.sum(terms)?;
    Ok(g.div(s, n)?)
}

pub fn kl_pred_loss(student: &Tensor, teacher: &Tensor) -> Result<f64> {
    plain2(student, teacher, kl_pred_loss_var)
}

/// One-hot `n x classes` matrix for the labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(LossError::LabelOutOfRange { label: l, classes });
        }
        data[i * classes + l] = 1.0;
    }
    Ok(Tensor::new(&[labels.len(), classes], data)?)
}

/// Mean negative log-softmax probability of the true class.
pub fn cross_entropy_var(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, c) = match g.shape(logits) {
        [n, c] => (*n, *c),
        s => {
            return Err(LossError::ShapeMismatch {
                op: "cross_entropy",
                left: s.to_vec(),
                right: vec![labels.len(), 0],
            })
        }
    };
    if n != labels.len() {
        return Err(LossError::ShapeMismatch {
            op: "cross_entropy",
            left: vec![n, c],
            right: vec![labels.len()],
        });
    }
    let oh = g.constant(one_hot(labels, c)?);
    let ls = g.log_softmax_rows(logits)?;
    let picked = g.mul(ls, oh)?;
    let s = g.sum(picked)?;
    Ok(g.div(s, -(n as f64))?)
}

pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(logits.clone());
    let l = cross_entropy_var(&mut g, v, labels)?;
    Ok(g.scalar(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tensor::testutil::grad_check;
    use proptest::prelude::*;
    use rand::Rng;

    fn random(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = stream(seed, "losses");
        Tensor::new(&[n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Double-double arithmetic for the extended-precision trace oracle.
    #[derive(Clone, Copy, Debug)]
    struct Dd(f64, f64);

    impl Dd {
        fn from(x: f64) -> Self {
            Dd(x, 0.0)
        }
        fn two_sum(a: f64, b: f64) -> (f64, f64) {
            let s = a + b;
            let bb = s - a;
            (s, (a - (s - bb)) + (b - bb))
        }
        fn add(self, o: Dd) -> Dd {
            let (s, e) = Self::two_sum(self.0, o.0);
            let e = e + self.1 + o.1;
            let (hi, lo) = Self::two_sum(s, e);
            Dd(hi, lo)
        }
        fn neg(self) -> Dd {
            Dd(-self.0, -self.1)
        }
        fn mul(self, o: Dd) -> Dd {
            let p = self.0 * o.0;
            let e = self.0.mul_add(o.0, -p) + (self.0 * o.1 + self.1 * o.0);
            let (hi, lo) = Self::two_sum(p, e);
            Dd(hi, lo)
        }
        fn div(self, o: Dd) -> Dd {
            let q1 = self.0 / o.0;
            let r = self.add(o.mul(Dd::from(q1)).neg());
            let q2 = r.0 / o.0;
            let (hi, lo) = Self::two_sum(q1, q2);
            Dd(hi, lo)
        }
        fn sqrt(self) -> Dd {
            let s = self.0.sqrt();
            let r = self.add(Dd::from(s).mul(Dd::from(s)).neg());
            let (hi, lo) = Self::two_sum(s, r.0 / (2.0 * s));
            Dd(hi, lo)
        }
    }

    type DdMat = Vec<Vec<Dd>>;

    fn dd_matmul(a: &DdMat, b: &DdMat) -> DdMat {
        let (n, k, m) = (a.len(), b.len(), b[0].len());
        (0..n)
            .map(|i| {
                (0..m)
                    .map(|j| (0..k).fold(Dd::from(0.0), |acc, p| acc.add(a[i][p].mul(b[p][j]))))
                    .collect()
            })
            .collect()
    }

    fn dd_trace(a: &DdMat) -> Dd {
        (0..a.len()).fold(Dd::from(0.0), |acc, i| acc.add(a[i][i]))
    }

    /// Forms H explicitly and evaluates the trace formula for linear kernels.
    fn cka_oracle_linear(m: &Tensor, y: &Tensor) -> f64 {
        let n = m.rows();
        let to_dd = |t: &Tensor| -> DdMat {
            (0..t.rows()).map(|i| t.row(i).iter().map(|v| Dd::from(*v)).collect()).collect()
        };
        let transpose = |a: &DdMat| -> DdMat { (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect() };
        let (md, yd) = (to_dd(m), to_dd(y));
        let p = dd_matmul(&md, &transpose(&md));
        let t = dd_matmul(&yd, &transpose(&yd));
        let h: DdMat = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let delta = if i == j { Dd::from(1.0) } else { Dd::from(0.0) };
                        delta.add(Dd::from(1.0).div(Dd::from(n as f64)).neg())
                    })
                    .collect()
            })
            .collect();
        let hsic = |a: &DdMat, b: &DdMat| dd_trace(&dd_matmul(&dd_matmul(&dd_matmul(a, &h), b), &h));
        let num = hsic(&p, &t);
        let den = hsic(&p, &p).mul(hsic(&t, &t)).sqrt();
        Dd::from(1.0).add(num.div(den).neg()).0
    }

    /// Plain f64 explicit-matrix version for arbitrary kernels.
    fn cka_oracle_explicit(p: &Tensor, t: &Tensor) -> f64 {
        let n = p.rows();
        let h = |i: usize, j: usize| if i == j { 1.0 - 1.0 / n as f64 } else { -1.0 / n as f64 };
        let mm = |a: &dyn Fn(usize, usize) -> f64, b: &dyn Fn(usize, usize) -> f64| -> Vec<f64> {
            let mut out = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    out[i * n + j] = (0..n).map(|k| a(i, k) * b(k, j)).sum();
                }
            }
            out
        };
        let trace4 = |a: &Tensor, b: &Tensor| -> f64 {
            let ah = mm(&|i, j| a.at(i, j), &h);
            let aht = mm(&|i, j| ah[i * n + j], &|i, j| b.at(i, j));
            let ahth = mm(&|i, j| aht[i * n + j], &h);
            (0..n).map(|i| ahth[i * n + i]).sum()
        };
        1.0 - trace4(p, t) / (trace4(p, p) * trace4(t, t)).sqrt()
    }

    #[test]
    fn gram_examples() {
        let e = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(gram(&e, KernelSpec::Linear).unwrap().data(), &[1.0, 0.0, 0.0, 1.0]);

        let x = random(6, 3, 1);
        let k = gram(&x, KernelSpec::default()).unwrap();
        assert!((0..6).all(|i| k.at(i, i) == 1.0));

        let pts = Tensor::new(&[3, 2], vec![0.0, 0.0, 1.0, 2.0, -1.5, 0.5]).unwrap();
        let k = gram(&pts, KernelSpec::Rbf(Bandwidth::Fixed(1.0))).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let d2: f64 = (0..2).map(|c| (pts.at(i, c) - pts.at(j, c)).powi(2)).sum();
                assert!((k.at(i, j) - (-d2 / 2.0).exp()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gram_errors() {
        let one = random(1, 3, 2);
        assert_eq!(gram(&one, KernelSpec::Linear), Err(LossError::TooFewSamples(1)));
        let same = Tensor::new(&[3, 2], vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        assert_eq!(gram(&same, KernelSpec::default()), Err(LossError::DegenerateBandwidth));
        assert!(matches!(
            gram(&same, KernelSpec::Rbf(Bandwidth::MedianFraction(0.0))),
            Err(LossError::InvalidKernel(_))
        ));
    }

    #[test]
    fn median_ignores_duplicates_and_averages_even_counts() {
        // Points 0, 0, 3, 4 on a line: nonzero distances 3,4,3,4,1 -> median 3.
        let sq: Vec<f64> = {
            let p = [0.0f64, 0.0, 3.0, 4.0];
            (0..4).flat_map(|i| (0..4).map(move |j| (p[i] - p[j]).powi(2))).collect()
        };
        assert_eq!(median_distance(&sq, 4).unwrap(), 3.0);
        // Points 0, 1, 3: distances 1, 3, 2 -> median 2; add 6: 1,3,6,2,5,3 -> (3+3)/2.
        let p = [0.0f64, 1.0, 3.0, 6.0];
        let sq: Vec<f64> = (0..4).flat_map(|i| (0..4).map(move |j| (p[i] - p[j]).powi(2))).collect();
        assert_eq!(median_distance(&sq, 4).unwrap(), 3.0);
    }

    #[test]
    fn cka_self_is_zero() {
        let m = random(8, 4, 3);
        for spec in [KernelSpec::Linear, KernelSpec::default()] {
            assert!(cka_dissimilarity(&m, &m, spec).unwrap().abs() < 1e-10);
        }
    }

    #[test]
    fn linear_cka_orthogonal_invariance() {
        let m = random(7, 3, 4);
        // Rotation about z followed by a reflection.
        let (c, s) = (0.6f64, 0.8f64);
        let r = Tensor::new(&[3, 3], vec![c, -s, 0.0, s, c, 0.0, 0.0, 0.0, -1.0]).unwrap();
        let mut g = Graph::new();
        let mv = g.constant(m.clone());
        let rv = g.constant(r);
        let mr = g.matmul(mv, rv).unwrap();
        let mr = g.tensor(mr);
        assert!(cka_dissimilarity(&m, &mr, KernelSpec::Linear).unwrap().abs() < 1e-9);
    }

    #[test]
    fn cka_matches_explicit_oracles() {
        let m = random(5, 3, 5);
        let y = random(5, 3, 6);
        let got = cka_dissimilarity(&m, &y, KernelSpec::Linear).unwrap();
        let want = cka_oracle_linear(&m, &y);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");

        let spec = KernelSpec::default();
        let got = cka_dissimilarity(&m, &y, spec).unwrap();
        let want = cka_oracle_explicit(&gram(&m, spec).unwrap(), &gram(&y, spec).unwrap());
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn cka_degenerate_features() {
        let m = random(4, 3, 7);
        let constant = Tensor::new(&[4, 3], vec![0.5; 12]).unwrap();
        assert_eq!(cka_dissimilarity(&m, &constant, KernelSpec::Linear), Err(LossError::DegenerateCka));
    }

    #[test]
    fn cka_gradient_matches_finite_differences() {
        let m = random(6, 3, 8);
        let y = random(6, 3, 9);
        for spec in [KernelSpec::Linear, KernelSpec::Rbf(Bandwidth::Fixed(0.9))] {
            let err = grad_check(&m, |g, v| {
                let yv = g.constant(y.clone());
                cka_dissimilarity_var(g, v, yv, spec).unwrap()
            });
            assert!(err < 1e-4, "{spec:?}: {err}");
        }
    }

    #[test]
    fn cka_teacher_side_is_detached() {
        let m = random(5, 3, 10);
        let y = random(5, 3, 11).with_grad();
        let mut g = Graph::new();
        let mv = g.leaf(&m.clone().with_grad());
        let yv = g.leaf(&y);
        let l = cka_dissimilarity_var(&mut g, mv, yv, KernelSpec::Linear).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(mv).is_some());
        assert!(g.grad(yv).is_none());
    }

    #[test]
    fn l2_and_cosine_examples() {
        let m = random(3, 2, 12);
        assert_eq!(l2_feature_loss(&m, &m).unwrap(), 0.0);
        assert!(cosine_feature_loss(&m, &m).unwrap().abs() < 1e-12);

        let a = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
        assert!((cosine_feature_loss(&a, &b).unwrap() - 1.0).abs() < 1e-12);

        let m = Tensor::new(&[3, 2], vec![1.0, 2.0, -1.0, 0.5, 3.0, -2.0]).unwrap();
        let y = Tensor::new(&[3, 2], vec![0.0, 1.0, 2.0, 2.0, 1.0, 1.0]).unwrap();
        // Squared distances: 2, 11.25, 13 -> mean 26.25 / 3.
        assert!((l2_feature_loss(&m, &y).unwrap() - 26.25 / 3.0).abs() < 1e-12);
        let cos = |a: [f64; 2], b: [f64; 2]| {
            (a[0] * b[0] + a[1] * b[1]) / (a[0].hypot(a[1]) * b[0].hypot(b[1]))
        };
        let want = (3.0
            - cos([1.0, 2.0], [0.0, 1.0])
            - cos([-1.0, 0.5], [2.0, 2.0])
            - cos([3.0, -2.0], [1.0, 1.0]))
            / 3.0;
        assert!((cosine_feature_loss(&m, &y).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_row_is_guarded() {
        let m = Tensor::new(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let y = Tensor::new(&[2, 2], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        let v = cosine_feature_loss(&m, &y).unwrap();
        assert!((v - 0.5).abs() < 1e-9);
    }

    #[test]
    fn feature_loss_gradients() {
        let m = random(4, 3, 13);
        let y = random(4, 3, 14);
        let e1 = grad_check(&m, |g, v| {
            let yv = g.constant(y.clone());
            l2_feature_loss_var(g, v, yv).unwrap()
        });
        let e2 = grad_check(&m, |g, v| {
            let yv = g.constant(y.clone());
            cosine_feature_loss_var(g, v, yv).unwrap()
        });
        let e3 = grad_check(&m, |g, v| {
            let yv = g.constant(y.clone());
            kl_pred_loss_var(g, v, yv).unwrap()
        });
        assert!(e1 < 1e-4 && e2 < 1e-4 && e3 < 1e-4, "{e1} {e2} {e3}");
    }

    #[test]
    fn kl_examples() {
        let z = random(3, 4, 15);
        assert!(kl_pred_loss(&z, &z).unwrap().abs() < 1e-12);

        let t = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap();
        let s = Tensor::new(&[1, 2], vec![0.0, 1000.0]).unwrap();
        let v = kl_pred_loss(&s, &t).unwrap();
        assert!(v.is_finite() && v > 100.0);

        let t = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let s = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
        let e = std::f64::consts::E;
        let (p1, p2) = (e / (1.0 + e), 1.0 / (1.0 + e));
        let (q1, q2) = (p2, p1);
        let want = p1 * (p1 / q1).ln() + p2 * (p2 / q2).ln();
        assert!((kl_pred_loss(&s, &t).unwrap() - want).abs() < 1e-10);

        let bad = Tensor::new(&[1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(kl_pred_loss(&bad, &t).is_err());
    }

    #[test]
    fn kl_zero_for_row_shifted_logits() {
        let z = random(3, 4, 16);
        let shifted: Vec<f64> = (0..3).flat_map(|i| z.row(i).iter().map(move |v| v + i as f64 * 7.0)).collect();
        let s = Tensor::new(&[3, 4], shifted).unwrap();
        assert!(kl_pred_loss(&s, &z).unwrap().abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::new(&[2, 4], vec![0.3; 8]).unwrap();
        assert!((cross_entropy(&uniform, &[0, 3]).unwrap() - 4f64.ln()).abs() < 1e-6);

        let sharp = Tensor::new(&[1, 3], vec![50.0, 0.0, 0.0]).unwrap();
        assert!(cross_entropy(&sharp, &[0]).unwrap() < 1e-20);

        let z = Tensor::new(&[2, 3], vec![1.0, 2.0, 0.5, -1.0, 0.0, 3.0]).unwrap();
        let nll = |row: &[f64], l: usize| {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            -(row[l].exp() / s).ln()
        };
        let want = (nll(z.row(0), 1) + nll(z.row(1), 0)) / 2.0;
        assert!((cross_entropy(&z, &[1, 0]).unwrap() - want).abs() < 1e-12);

        assert_eq!(
            cross_entropy(&z, &[3, 0]),
            Err(LossError::LabelOutOfRange { label: 3, classes: 3 })
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn cka_is_symmetric_and_bounded(seed in 0u64..10_000, n in 3usize..9, d in 1usize..5) {
            let m = random(n, d, seed);
            let y = random(n, d, seed + 1);
            for spec in [KernelSpec::Linear, KernelSpec::default()] {
                let a = cka_dissimilarity(&m, &y, spec).unwrap();
                let b = cka_dissimilarity(&y, &m, spec).unwrap();
                prop_assert!((a - b).abs() < 1e-10);
                prop_assert!((-1e-9..=1.0 + 1e-9).contains(&a));
            }
        }

        #[test]
        fn cka_scale_invariance(seed in 0u64..10_000, alpha in prop::sample::select(vec![0.1, 10.0])) {
            let m = random(6, 3, seed);
            let y = random(6, 3, seed + 7);
            let scaled = Tensor::new(&[6, 3], m.data().iter().map(|v| v * alpha).collect()).unwrap();
            for spec in [KernelSpec::Linear, KernelSpec::default()] {
                let a = cka_dissimilarity(&m, &y, spec).unwrap();
                let b = cka_dissimilarity(&scaled, &y, spec).unwrap();
                prop_assert!((a - b).abs() < 1e-9, "{:?}: {} vs {}", spec, a, b);
            }
        }

        #[test]
        fn losses_nonnegative_and_zero_at_match(seed in 0u64..10_000) {
            let m = random(5, 3, seed);
            let y = random(5, 3, seed + 3);
            prop_assert!(l2_feature_loss(&m, &y).unwrap() >= 0.0);
            prop_assert!(cosine_feature_loss(&m, &y).unwrap() >= 0.0);
            prop_assert!(kl_pred_loss(&m, &y).unwrap() >= 0.0);
            prop_assert!(cka_dissimilarity(&m, &y, KernelSpec::default()).unwrap() >= -1e-12);
            prop_assert_eq!(l2_feature_loss(&m, &m).unwrap(), 0.0);
            prop_assert!(cosine_feature_loss(&m, &m).unwrap().abs() < 1e-12);
            prop_assert!(kl_pred_loss(&m, &m).unwrap().abs() < 1e-12);
            prop_assert!(cka_dissimilarity(&m, &m, KernelSpec::default()).unwrap().abs() < 1e-10);
        }
    }
}
