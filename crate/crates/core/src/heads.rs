//! Classification heads: support embeddings plus one query embedding in,
//! two logits out.
//!
//! Class order is fixed everywhere: index 0 is the positive class, index 1
//! the negative (two-way) or null (one-way) class.
//!
//! One-way heads never see negative supports. Their second class is the
//! null class at the origin of the embedding space: a zero centroid for the
//! prototypical head, a zero-mean Gaussian with unit (or trained) standard
//! deviation for the normal head.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Bindings, Graph, ParamSet, Tensor, Var};

/// Parameter holding the pre-softplus null-class standard deviation.
pub const NULL_SIGMA_PARAM: &str = "head.null_sigma_raw";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HeadKind {
    TwoWayMatching,
    TwoWayProto,
    TwoWayNormal,
    OneWayProto,
    OneWayNormal,
}

impl HeadKind {
    pub const ALL: [HeadKind; 5] = [
        HeadKind::TwoWayMatching,
        HeadKind::TwoWayProto,
        HeadKind::TwoWayNormal,
        HeadKind::OneWayProto,
        HeadKind::OneWayNormal,
    ];

    pub fn is_one_way(self) -> bool {
        matches!(self, HeadKind::OneWayProto | HeadKind::OneWayNormal)
    }

    pub fn is_gaussian(self) -> bool {
        matches!(self, HeadKind::TwoWayNormal | HeadKind::OneWayNormal)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::TwoWayMatching => "two_way_matching",
            HeadKind::TwoWayProto => "two_way_proto",
            HeadKind::TwoWayNormal => "two_way_normal",
            HeadKind::OneWayProto => "one_way_proto",
            HeadKind::OneWayNormal => "one_way_normal",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HeadKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::config(
                    "head",
                    format!(
                        "unknown head `{s}`, expected one of {}",
                        HeadKind::ALL.map(HeadKind::as_str).join(", ")
                    ),
                )
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchingMetric {
    SqEuclid,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NullSigma {
    Fixed,
    Trainable,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub matching_metric: MatchingMetric,
    pub null_sigma: NullSigma,
    pub sigma_floor: f64,
    pub min_gaussian_supports: usize,
    /// Divides the log-likelihood logits of the normal heads.
    pub temperature: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            kind: HeadKind::OneWayProto,
            matching_metric: MatchingMetric::SqEuclid,
            null_sigma: NullSigma::Fixed,
            sigma_floor: 1e-3,
            min_gaussian_supports: 2,
            temperature: 1.0,
        }
    }
}

/// `(q - c)ᵀ(q - c)`.
pub fn sq_euclidean<'g>(q: Var<'g>, c: Var<'g>) -> Result<Var<'g>> {
    if q.shape() != c.shape() || q.shape().len() != 1 {
        return Err(Error::Shape {
            op: "sq_euclidean",
            lhs: q.shape(),
            rhs: c.shape(),
        });
    }
    Ok(q.sub(c)?.square().sum())
}

fn support_count(s: &Var<'_>, op: &'static str) -> Result<usize> {
    let shape = s.shape();
    if shape.len() != 2 {
        return Err(Error::invalid(op, format!("supports must be [K, D], got {shape:?}")));
    }
    Ok(shape[0])
}

/// Mean over the support rows.
pub fn centroid<'g>(supports: Var<'g>) -> Result<Var<'g>> {
    support_count(&supports, "centroid")?;
    supports.mean_rows()
}

/// Diagonal Gaussian class model.
#[derive(Clone, Copy, Debug)]
pub struct Gaussian<'g> {
    pub mu: Var<'g>,
    pub sigma: Var<'g>,
}

/// Column means and population standard deviations, the latter clamped
/// from below at `sigma_floor`.
pub fn gaussian_fit<'g>(supports: Var<'g>, sigma_floor: f64, min_supports: usize) -> Result<Gaussian<'g>> {
    let k = support_count(&supports, "gaussian_fit")?;
    if k < min_supports.max(1) {
        return Err(Error::InsufficientSupports {
            got: k,
            need: min_supports,
        });
    }
    let mu = supports.mean_rows()?;
    let var = supports.sub(mu.tile_rows(k)?)?.square().mean_rows()?;
    let sigma = var.sqrt().clamp_min(sigma_floor);
    Ok(Gaussian { mu, sigma })
}

/// `Σ_d −½((q_d − μ_d)/σ_d)² − ln σ_d − ½ ln 2π`.
pub fn gaussian_loglik<'g>(q: Var<'g>, g: &Gaussian<'g>) -> Result<Var<'g>> {
    if q.shape() != g.mu.shape() || q.shape() != g.sigma.shape() {
        return Err(Error::Shape {
            op: "gaussian_loglik",
            lhs: q.shape(),
            rhs: g.mu.shape(),
        });
    }
    if g.sigma.value().data().iter().any(|&s| !(s > 0.0)) {
        return Err(Error::invalid("gaussian_loglik", "sigma must be positive"));
    }
    let d = q.shape()[0] as f64;
    let z = q.sub(g.mu)?.div(g.sigma)?;
    let quad = z.square().sum().mul_scalar(-0.5);
    let log_det = g.sigma.log().sum();
    Ok(quad.sub(log_det)?.add_scalar(-0.5 * d * (2.0 * PI).ln()))
}

/// The null class of the one-way heads.
#[derive(Clone, Copy, Debug)]
pub struct NullClass<'g> {
    pub gaussian: Gaussian<'g>,
}

impl<'g> NullClass<'g> {
    /// Zero mean, unit standard deviation.
    pub fn fixed(graph: &'g Graph, dim: usize) -> Self {
        Self {
            gaussian: Gaussian {
                mu: graph.constant(Tensor::zeros(&[dim])),
                sigma: graph.constant(Tensor::full(&[dim], 1.0)),
            },
        }
    }

    /// Zero mean, `σ = softplus(raw)` per dimension.
    pub fn trainable(graph: &'g Graph, raw: Var<'g>) -> Self {
        let dim = raw.shape().iter().product();
        Self {
            gaussian: Gaussian {
                mu: graph.constant(Tensor::zeros(&[dim])),
                sigma: raw.softplus(),
            },
        }
    }
}

/// Pre-softplus value that gives `σ = 1`.
pub fn unit_sigma_raw() -> f64 {
    (std::f64::consts::E - 1.0).ln()
}

/// A class summary that scores queries.
#[derive(Clone, Copy, Debug)]
pub enum ClassModel<'g> {
    Centroid(Var<'g>),
    Gaussian(Gaussian<'g>),
}

impl<'g> ClassModel<'g> {
    /// Negative squared distance for centroids, log-likelihood for Gaussians.
    pub fn score(&self, q: Var<'g>) -> Result<Var<'g>> {
        match self {
            ClassModel::Centroid(c) => Ok(sq_euclidean(q, *c)?.neg()),
            ClassModel::Gaussian(g) => gaussian_loglik(q, g),
        }
    }
}

fn pair<'g>(a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
    a.graph().concat(&[a.reshape(&[1])?, b.reshape(&[1])?])
}

fn rows<'g>(x: Var<'g>) -> Result<Vec<Var<'g>>> {
    let shape = x.shape();
    (0..shape[0])
        .map(|i| x.narrow(i, 1)?.reshape(&shape[1..]))
        .collect()
}

fn cosine<'g>(a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
    let dot = a.mul(b)?.sum();
    let na = a.square().sum().add_scalar(1e-12).sqrt();
    let nb = b.square().sum().add_scalar(1e-12).sqrt();
    dot.div(na.mul(nb)?)
}

/// Attention over all `2K` supports, `a_i = softmax_i(−d²(q, s_i))`; each
/// logit is `ln Σ_{i ∈ class} a_i`.
pub fn two_way_matching_logits<'g>(
    pos: Var<'g>,
    neg: Var<'g>,
    q: Var<'g>,
    metric: MatchingMetric,
) -> Result<Var<'g>> {
    let kp = support_count(&pos, "two_way_matching")?;
    let kn = support_count(&neg, "two_way_matching")?;
    if kp == 0 || kn == 0 {
        return Err(Error::invalid("two_way_matching", "both classes need supports"));
    }
    let graph = q.graph();
    let mut scores = Vec::with_capacity(kp + kn);
    for s in rows(pos)?.into_iter().chain(rows(neg)?) {
        let score = match metric {
            MatchingMetric::SqEuclid => sq_euclidean(q, s)?.neg(),
            MatchingMetric::Cosine => cosine(q, s)?,
        };
        scores.push(score.reshape(&[1])?);
    }
    let log_attn = graph.concat(&scores)?.log_softmax()?;
    let lp = log_attn.narrow(0, kp)?.logsumexp()?;
    let ln = log_attn.narrow(kp, kn)?.logsumexp()?;
    pair(lp, ln)
}

/// `[−d²(q, c_pos), −d²(q, c_neg)]`.
pub fn two_way_proto_logits<'g>(pos: Var<'g>, neg: Var<'g>, q: Var<'g>) -> Result<Var<'g>> {
    let sp = ClassModel::Centroid(centroid(pos)?).score(q)?;
    let sn = ClassModel::Centroid(centroid(neg)?).score(q)?;
    pair(sp, sn)
}

/// `[−d²(q, c_pos), −‖q‖²]`.
pub fn one_way_proto_logits<'g>(pos: Var<'g>, q: Var<'g>) -> Result<Var<'g>> {
    let sp = ClassModel::Centroid(centroid(pos)?).score(q)?;
    let null = q.square().sum().neg();
    pair(sp, null)
}

pub fn one_way_normal_logits<'g>(
    pos: Var<'g>,
    q: Var<'g>,
    null: &NullClass<'g>,
    sigma_floor: f64,
    min_supports: usize,
) -> Result<Var<'g>> {
    let g = gaussian_fit(pos, sigma_floor, min_supports)?;
    let sp = ClassModel::Gaussian(g).score(q)?;
    let sn = ClassModel::Gaussian(null.gaussian).score(q)?;
    pair(sp, sn)
}

pub fn two_way_normal_logits<'g>(
    pos: Var<'g>,
    neg: Var<'g>,
    q: Var<'g>,
    sigma_floor: f64,
    min_supports: usize,
) -> Result<Var<'g>> {
    let gp = gaussian_fit(pos, sigma_floor, min_supports)?;
    let gn = gaussian_fit(neg, sigma_floor, min_supports)?;
    pair(
        ClassModel::Gaussian(gp).score(q)?,
        ClassModel::Gaussian(gn).score(q)?,
    )
}

/// `−log_softmax(logits)[label]`.
pub fn cross_entropy<'g>(logits: Var<'g>, label: usize) -> Result<Var<'g>> {
    Ok(logits.log_softmax()?.narrow(label, 1)?.sum().neg())
}

/// A configured head.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub cfg: HeadConfig,
}

impl Head {
    pub fn new(cfg: HeadConfig) -> Result<Self> {
        if !(cfg.sigma_floor > 0.0) {
            return Err(Error::config("sigma_floor", "must be positive"));
        }
        if !(cfg.temperature > 0.0) || !cfg.temperature.is_finite() {
            return Err(Error::config("temperature", "must be positive"));
        }
        if cfg.min_gaussian_supports < 2 {
            return Err(Error::config("min_gaussian_supports", "must be at least 2"));
        }
        Ok(Self { cfg })
    }

    pub fn kind(&self) -> HeadKind {
        self.cfg.kind
    }

    fn trainable_null(&self) -> bool {
        self.cfg.kind == HeadKind::OneWayNormal && self.cfg.null_sigma == NullSigma::Trainable
    }

    /// Shot counts the head cannot work with.
    pub fn check_shots(&self, shots: usize) -> Result<()> {
        if shots == 0 {
            return Err(Error::config("shots", "must be at least 1"));
        }
        if self.cfg.kind.is_gaussian() && shots < self.cfg.min_gaussian_supports {
            return Err(Error::InsufficientSupports {
                got: shots,
                need: self.cfg.min_gaussian_supports,
            });
        }
        Ok(())
    }

    /// Registers the head's own parameters, if any.
    pub fn init_params(&self, dim: usize, params: &mut ParamSet) -> Result<()> {
        if self.trainable_null() {
            params.insert(NULL_SIGMA_PARAM, Tensor::full(&[dim], unit_sigma_raw()))?;
        }
        Ok(())
    }

    pub fn logits<'g>(
        &self,
        graph: &'g Graph,
        params: &Bindings<'g>,
        pos: Var<'g>,
        neg: Option<Var<'g>>,
        q: Var<'g>,
    ) -> Result<Var<'g>> {
        let need_neg = || {
            neg.ok_or_else(|| {
                Error::invalid("head", format!("{} needs negative supports", self.cfg.kind))
            })
        };
        let (floor, kmin) = (self.cfg.sigma_floor, self.cfg.min_gaussian_supports);
        let logits = match self.cfg.kind {
            HeadKind::TwoWayMatching => {
                two_way_matching_logits(pos, need_neg()?, q, self.cfg.matching_metric)?
            }
            HeadKind::TwoWayProto => two_way_proto_logits(pos, need_neg()?, q)?,
            HeadKind::OneWayProto => one_way_proto_logits(pos, q)?,
            HeadKind::TwoWayNormal => two_way_normal_logits(pos, need_neg()?, q, floor, kmin)?,
            HeadKind::OneWayNormal => {
                let dim = q.shape().iter().product();
                let null = if self.trainable_null() {
                    NullClass::trainable(graph, params.get(NULL_SIGMA_PARAM)?)
                } else {
                    NullClass::fixed(graph, dim)
                };
                one_way_normal_logits(pos, q, &null, floor, kmin)?
            }
        };
        if self.cfg.kind.is_gaussian() && self.cfg.temperature != 1.0 {
            Ok(logits.mul_scalar(1.0 / self.cfg.temperature))
        } else {
            Ok(logits)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m<'g>(g: &'g Graph, rows: &[&[f64]]) -> Var<'g> {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        g.constant(Tensor::from_rows(&rows).unwrap())
    }

    fn v<'g>(g: &'g Graph, x: &[f64]) -> Var<'g> {
        g.constant(Tensor::vector(x.to_vec()))
    }

    fn probs(logits: Var<'_>) -> Vec<f64> {
        logits.softmax().unwrap().value().data().to_vec()
    }

    #[test]
    fn centroid_examples() {
        let g = Graph::new();
        let c = centroid(m(&g, &[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        assert_eq!(c.value().data(), &[2.0, 3.0]);
        let c = centroid(m(&g, &[&[5.0, -1.0]])).unwrap();
        assert_eq!(c.value().data(), &[5.0, -1.0]);
    }

    #[test]
    fn centroid_rejects_non_matrix() {
        let g = Graph::new();
        assert!(centroid(v(&g, &[1.0])).is_err());
    }

    #[test]
    fn sq_euclidean_examples() {
        let g = Graph::new();
        assert_eq!(sq_euclidean(v(&g, &[0.0, 0.0]), v(&g, &[3.0, 4.0])).unwrap().item(), 25.0);
        let q = v(&g, &[1.5, -2.0]);
        assert_eq!(sq_euclidean(q, q).unwrap().item(), 0.0);
        assert!(sq_euclidean(q, v(&g, &[1.0])).is_err());
    }

    #[test]
    fn matching_prefers_exact_match() {
        let g = Graph::new();
        let q = v(&g, &[1.0, 1.0]);
        let pos = m(&g, &[&[1.0, 1.0]]);
        let neg = m(&g, &[&[10.0, -10.0]]);
        let p = probs(two_way_matching_logits(pos, neg, q, MatchingMetric::SqEuclid).unwrap());
        assert!(p[0] > 0.99);
    }

    #[test]
    fn matching_symmetric_supports_tie() {
        let g = Graph::new();
        let q = v(&g, &[0.0, 0.0]);
        let pos = m(&g, &[&[1.0, 0.0], &[0.0, 2.0]]);
        let neg = m(&g, &[&[-1.0, 0.0], &[0.0, -2.0]]);
        let p = probs(two_way_matching_logits(pos, neg, q, MatchingMetric::SqEuclid).unwrap());
        assert!((p[0] - 0.5).abs() < 1e-12);
        let p = probs(two_way_matching_logits(pos, neg, q, MatchingMetric::Cosine).unwrap());
        assert!((p[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn proto_examples() {
        let g = Graph::new();
        let q = v(&g, &[1.0, 1.0]);
        let pos = m(&g, &[&[0.0, 1.0], &[2.0, 1.0]]);
        let neg = m(&g, &[&[5.0, 5.0]]);
        let p = probs(two_way_proto_logits(pos, neg, q).unwrap());
        assert!(p[0] > p[1]);
        let pos = m(&g, &[&[2.0, 1.0]]);
        let neg = m(&g, &[&[0.0, 1.0]]);
        let p = probs(two_way_proto_logits(pos, neg, q).unwrap());
        assert!((p[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn one_way_proto_examples() {
        let g = Graph::new();
        let pos = m(&g, &[&[2.0, 0.0], &[4.0, 0.0]]);
        let p = probs(one_way_proto_logits(pos, v(&g, &[0.0, 0.0])).unwrap());
        assert!(p[1] > p[0]);
        let p = probs(one_way_proto_logits(pos, v(&g, &[3.0, 0.0])).unwrap());
        assert!(p[0] > p[1]);
        // On the perpendicular bisector of the segment from 0 to c = (3, 0).
        let logits = one_way_proto_logits(pos, v(&g, &[1.5, 7.0])).unwrap();
        let l = logits.value();
        assert_eq!(l.data()[0], l.data()[1]);
        assert!((probs(logits)[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gaussian_fit_examples() {
        let g = Graph::new();
        let fit = gaussian_fit(m(&g, &[&[0.0, 0.0], &[2.0, 2.0]]), 1e-3, 2).unwrap();
        assert_eq!(fit.mu.value().data(), &[1.0, 1.0]);
        assert_eq!(fit.sigma.value().data(), &[1.0, 1.0]);
        let fit = gaussian_fit(m(&g, &[&[3.0, -1.0], &[3.0, -1.0], &[3.0, -1.0]]), 1e-3, 2).unwrap();
        assert_eq!(fit.sigma.value().data(), &[1e-3, 1e-3]);
        let err = gaussian_fit(m(&g, &[&[1.0, 2.0]]), 1e-3, 2).unwrap_err();
        assert!(err.to_string().contains("insufficient supports for Gaussian head"));
    }

    #[test]
    fn loglik_at_mode() {
        let g = Graph::new();
        let d = 5;
        let gauss = Gaussian {
            mu: g.constant(Tensor::zeros(&[d])),
            sigma: g.constant(Tensor::full(&[d], 1.0)),
        };
        let ll = gaussian_loglik(g.constant(Tensor::zeros(&[d])), &gauss).unwrap().item();
        assert!((ll - (-(d as f64) / 2.0 * (2.0 * PI).ln())).abs() < 1e-12);

        let sig = [0.5, 2.0, 3.0];
        let gauss = Gaussian {
            mu: v(&g, &[1.0, 2.0, 3.0]),
            sigma: v(&g, &sig),
        };
        let ll = gaussian_loglik(v(&g, &[1.0, 2.0, 3.0]), &gauss).unwrap().item();
        let want = -sig.iter().map(|s: &f64| s.ln()).sum::<f64>() - 1.5 * (2.0 * PI).ln();
        assert!((ll - want).abs() < 1e-12);
    }

    #[test]
    fn loglik_rejects_nonpositive_sigma() {
        let g = Graph::new();
        let gauss = Gaussian {
            mu: v(&g, &[0.0]),
            sigma: v(&g, &[0.0]),
        };
        assert!(gaussian_loglik(v(&g, &[0.0]), &gauss).is_err());
    }

    #[test]
    fn one_way_normal_identical_distributions_tie() {
        let g = Graph::new();
        // Two supports at ±1 give mean 0 and population std 1.
        let pos = m(&g, &[&[1.0, -1.0], &[-1.0, 1.0]]);
        let null = NullClass::fixed(&g, 2);
        let p = probs(one_way_normal_logits(pos, v(&g, &[0.0, 0.0]), &null, 1e-3, 2).unwrap());
        assert!((p[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn one_way_normal_tight_cluster_far_out() {
        let g = Graph::new();
        let pos = m(&g, &[&[10.0, 10.0], &[10.1, 9.9], &[9.9, 10.1]]);
        let null = NullClass::fixed(&g, 2);
        let p = probs(one_way_normal_logits(pos, v(&g, &[10.0, 10.0]), &null, 1e-3, 2).unwrap());
        assert!(p[0] > 0.999);
    }

    #[test]
    fn trainable_null_starts_at_unit_sigma() {
        let g = Graph::new();
        let raw = g.param(Tensor::full(&[3], unit_sigma_raw()));
        let null = NullClass::trainable(&g, raw);
        for s in null.gaussian.sigma.value().data() {
            assert!((s - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn trainable_null_receives_gradient() {
        let head = Head::new(HeadConfig {
            kind: HeadKind::OneWayNormal,
            null_sigma: NullSigma::Trainable,
            ..HeadConfig::default()
        })
        .unwrap();
        let mut params = ParamSet::new();
        head.init_params(2, &mut params).unwrap();
        let g = Graph::new();
        let b = params.bind(&g);
        let pos = m(&g, &[&[1.0, 0.5], &[2.0, -0.5]]);
        let logits = head.logits(&g, &b, pos, None, v(&g, &[0.3, 0.1])).unwrap();
        g.backward(cross_entropy(logits, 1).unwrap()).unwrap();
        let grad = b.gradients()[NULL_SIGMA_PARAM].clone();
        assert!(grad.data().iter().all(|x| *x != 0.0 && x.is_finite()));
    }

    #[test]
    fn two_way_heads_need_negatives() {
        let head = Head::new(HeadConfig {
            kind: HeadKind::TwoWayProto,
            ..HeadConfig::default()
        })
        .unwrap();
        let g = Graph::new();
        let b = ParamSet::new().bind(&g);
        let pos = m(&g, &[&[1.0]]);
        assert!(head.logits(&g, &b, pos, None, v(&g, &[0.0])).is_err());
    }

    #[test]
    fn gaussian_heads_refuse_single_shot() {
        let head = Head::new(HeadConfig {
            kind: HeadKind::TwoWayNormal,
            ..HeadConfig::default()
        })
        .unwrap();
        assert!(matches!(head.check_shots(1), Err(Error::InsufficientSupports { .. })));
        assert!(head.check_shots(2).is_ok());
    }

    #[test]
    fn head_kind_names_round_trip() {
        for k in HeadKind::ALL {
            assert_eq!(k.as_str().parse::<HeadKind>().unwrap(), k);
        }
        assert!("three_way".parse::<HeadKind>().is_err());
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let g = Graph::new();
        let l = cross_entropy(v(&g, &[0.0, 0.0]), 0).unwrap().item();
        assert!((l - 2f64.ln()).abs() < 1e-15);
    }
}
