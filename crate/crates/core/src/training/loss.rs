//! Memory decoder objectives: the hybrid KL + LM loss and the alternative
//! divergences kept for comparison.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distribution::{SparseDist, NORM_TOL};
use crate::error::{invalid, Error, Result};
use crate::tensor::{Graph, Scalar, SparseRow, Tensor, Var};

/// Floor applied to retrieval probabilities before taking teacher logits.
const TEACHER_FLOOR: f64 = 1e-8;
const LOG_FLOOR: f64 = 1e-30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// `β·KL(p_kNN ‖ p_θ) + (1-β)·CE`.
    Hybrid,
    KlOnly,
    CeOnly,
    Focal,
    Jsd,
    Bild,
    SparsePenalty,
}

impl LossKind {
    pub const ABLATIONS: [LossKind; 4] = [
        LossKind::Focal,
        LossKind::Jsd,
        LossKind::Bild,
        LossKind::SparsePenalty,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Hybrid => "hybrid",
            LossKind::KlOnly => "kl-only",
            LossKind::CeOnly => "ce-only",
            LossKind::Focal => "focal",
            LossKind::Jsd => "jsd",
            LossKind::Bild => "bild",
            LossKind::SparsePenalty => "sparse-penalty",
        }
    }

    pub fn is_ablation(self) -> bool {
        Self::ABLATIONS.contains(&self)
    }

    /// The KL/LM mix actually applied for this kind.
    pub fn effective_beta(self, beta: f64) -> f64 {
        match self {
            LossKind::KlOnly => 1.0,
            LossKind::CeOnly => 0.0,
            _ => beta,
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            LossKind::Hybrid,
            LossKind::KlOnly,
            LossKind::CeOnly,
            LossKind::Focal,
            LossKind::Jsd,
            LossKind::Bild,
            LossKind::SparsePenalty,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| Error::UnknownLoss(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationHyper {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub bild_top_k: usize,
    pub sparse_alpha: f64,
}

impl Default for AblationHyper {
    fn default() -> Self {
        AblationHyper {
            focal_alpha: 0.5,
            focal_gamma: 2.0,
            bild_top_k: 8,
            sparse_alpha: 0.01,
        }
    }
}

/// Loss terms averaged over all scored positions of a batch.
///
/// `kl` and `lm` sum over supervised positions and `lm_unsupervised` over
/// the rest, each divided by the total position count, so that
/// `total = β·kl + (1-β)·lm + lm_unsupervised` for the hybrid kind (the
/// ablation term replaces `kl` for the alternative kinds).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub kl: f64,
    pub lm: f64,
    pub lm_unsupervised: f64,
    pub ablation: Option<f64>,
}

impl LossBreakdown {
    /// `total` minus its reconstruction from the individual terms.
    pub fn identity_residual(&self, kind: LossKind, beta: f64) -> f64 {
        let b = kind.effective_beta(beta);
        let first = if kind.is_ablation() {
            self.ablation.unwrap_or(0.0)
        } else {
            self.kl
        };
        self.total - (b * first + (1.0 - b) * self.lm + self.lm_unsupervised)
    }

    /// Mean negative log-likelihood over every position.
    pub fn nll(&self) -> f64 {
        self.lm + self.lm_unsupervised
    }
}

impl From<&SparseDist> for SparseRow {
    fn from(d: &SparseDist) -> Self {
        SparseRow {
            entries: d.support().iter().map(|&(t, p)| (t, f64::from(p))).collect(),
        }
    }
}

pub(crate) struct LossVars {
    pub total: Var,
    pub kl: Var,
    pub lm: Var,
    pub lm_unsupervised: Var,
    pub ablation: Option<Var>,
}

impl LossVars {
    pub fn read<S: Scalar>(&self, g: &Graph<S>) -> LossBreakdown {
        let v = |x: Var| g.value(x).item().as_f64();
        LossBreakdown {
            total: v(self.total),
            kl: v(self.kl),
            lm: v(self.lm),
            lm_unsupervised: v(self.lm_unsupervised),
            ablation: self.ablation.map(v),
        }
    }
}

fn check_row(row: &SparseRow, vocab: usize) -> Result<()> {
    if let Some(&(t, _)) = row.entries.iter().find(|&&(t, _)| t as usize >= vocab) {
        return Err(invalid(format!("supervision token {t} outside vocabulary")));
    }
    if row.entries.iter().any(|&(_, p)| !(p >= 0.0 && p.is_finite())) {
        return Err(invalid("negative or non-finite supervision probability"));
    }
    let mass: f64 = row.entries.iter().map(|&(_, p)| p).sum();
    if (mass - 1.0).abs() > NORM_TOL {
        return Err(Error::Unnormalized(mass));
    }
    Ok(())
}

/// Records the loss of `kind` for row logits `[R, V]`.
pub(crate) fn build_loss<S: Scalar>(
    g: &mut Graph<S>,
    logits: Var,
    targets: &[u32],
    supervision: &[Option<SparseRow>],
    kind: LossKind,
    beta: f64,
    hyper: &AblationHyper,
) -> Result<LossVars> {
    let (rows, vocab) = {
        let v = g.value(logits);
        (v.rows(), v.cols())
    };
    if targets.len() != rows || supervision.len() != rows {
        return Err(invalid("targets and supervision must match logit rows"));
    }
    if rows == 0 {
        return Err(invalid("loss over zero positions"));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(invalid(format!("beta = {beta} outside [0, 1]")));
    }
    if let Some(&t) = targets.iter().find(|&&t| t as usize >= vocab) {
        return Err(invalid(format!("target {t} outside vocabulary")));
    }
    for row in supervision.iter().flatten() {
        check_row(row, vocab)?;
    }
    let inv = 1.0 / rows as f64;
    let present: Vec<f64> = supervision
        .iter()
        .map(|s| if s.is_some() { inv } else { 0.0 })
        .collect();
    let absent: Vec<f64> = present.iter().map(|&w| inv - w).collect();
    let kl_rows: Vec<SparseRow> = supervision
        .iter()
        .map(|s| s.clone().unwrap_or_default())
        .collect();

    let logp = g.log_softmax(logits);
    let kl = g.sparse_kl(logp, kl_rows.clone(), &present);
    let lm = g.nll(logp, targets, &present);
    let lm_unsupervised = g.nll(logp, targets, &absent);

    let ablation = match kind {
        LossKind::Hybrid | LossKind::KlOnly | LossKind::CeOnly => None,
        LossKind::Focal => Some(focal(g, logp, &kl_rows, &present, hyper)),
        LossKind::Jsd => Some(jsd(g, logp, &kl_rows, &present)),
        LossKind::Bild => Some(bild(g, logits, &kl_rows, &present, hyper.bild_top_k)),
        LossKind::SparsePenalty => {
            Some(sparse_penalty(g, logp, kl, &kl_rows, &present, hyper.sparse_alpha))
        }
    };
    let b = kind.effective_beta(beta);
    let first = ablation.unwrap_or(kl);
    let total = g.weighted_sum(&[(first, b), (lm, 1.0 - b), (lm_unsupervised, 1.0)]);
    Ok(LossVars {
        total,
        kl,
        lm,
        lm_unsupervised,
        ablation,
    })
}

/// Dense `[R, V]` constant from per-row sparse entries mapped through `f`.
fn dense<S: Scalar>(
    rows: &[SparseRow],
    vocab: usize,
    fill: f64,
    f: impl Fn(f64) -> f64,
) -> Tensor<S> {
    let mut data = vec![S::from_f64(fill); rows.len() * vocab];
    for (r, row) in rows.iter().enumerate() {
        for &(t, p) in &row.entries {
            data[r * vocab + t as usize] = S::from_f64(f(p));
        }
    }
    Tensor::new(vec![rows.len(), vocab], data).unwrap()
}

fn row_weights<S: Scalar>(weights: &[f64], vocab: usize) -> Tensor<S> {
    let data = weights
        .iter()
        .flat_map(|&w| std::iter::repeat_n(S::from_f64(w), vocab))
        .collect();
    Tensor::new(vec![weights.len(), vocab], data).unwrap()
}

/// `-Σ_i [α(1-p)^γ q log p + (1-α) p^γ (1-q) log(1-p)]` per row.
fn focal<S: Scalar>(
    g: &mut Graph<S>,
    logp: Var,
    rows: &[SparseRow],
    weights: &[f64],
    h: &AblationHyper,
) -> Var {
    let vocab = g.value(logp).cols();
    let q = g.constant(dense(rows, vocab, 0.0, |p| p));
    let one_minus_q = g.constant(dense(rows, vocab, 1.0, |p| 1.0 - p));
    let w = g.constant(row_weights(weights, vocab));
    let p = g.exp(logp);
    let neg_p = g.scale(p, -1.0);
    let omp = g.add_scalar(neg_p, 1.0);
    let pos_w = g.pow(omp, h.focal_gamma);
    let t1 = g.mul(pos_w, q);
    let t1 = g.mul(t1, logp);
    let neg_w = g.pow(p, h.focal_gamma);
    let log_omp = g.ln_floor(omp, LOG_FLOOR);
    let t2 = g.mul(neg_w, one_minus_q);
    let t2 = g.mul(t2, log_omp);
    let s = g.weighted_sum(&[(t1, -h.focal_alpha), (t2, -(1.0 - h.focal_alpha))]);
    let s = g.mul(s, w);
    g.sum_all(s)
}

/// `½KL(q ‖ m) + ½KL(p ‖ m)` with `m = (q + p) / 2`.
fn jsd<S: Scalar>(g: &mut Graph<S>, logp: Var, rows: &[SparseRow], weights: &[f64]) -> Var {
    let vocab = g.value(logp).cols();
    let q = g.constant(dense(rows, vocab, 0.0, |p| p));
    let ln_q = g.constant(dense(rows, vocab, 0.0, |p| if p > 0.0 { p.ln() } else { 0.0 }));
    let w = g.constant(row_weights(weights, vocab));
    let p = g.exp(logp);
    let sum = g.add(q, p);
    let m = g.scale(sum, 0.5);
    let ln_m = g.ln_floor(m, LOG_FLOOR);
    let a = g.sub(ln_q, ln_m);
    let a = g.mul(q, a);
    let b = g.sub(logp, ln_m);
    let b = g.mul(p, b);
    let s = g.weighted_sum(&[(a, 0.5), (b, 0.5)]);
    let s = g.mul(s, w);
    g.sum_all(s)
}

/// `KL + α Σ_{q_i = 0} p_i` per row.
fn sparse_penalty<S: Scalar>(
    g: &mut Graph<S>,
    logp: Var,
    kl: Var,
    rows: &[SparseRow],
    weights: &[f64],
    alpha: f64,
) -> Var {
    let vocab = g.value(logp).cols();
    let mut mask = dense::<S>(rows, vocab, 1.0, |p| if p > 0.0 { 0.0 } else { 1.0 });
    for (m, &w) in mask.data_mut().iter_mut().zip(row_weights::<f64>(weights, vocab).data()) {
        *m *= S::from_f64(w);
    }
    let mask = g.constant(mask);
    let p = g.exp(logp);
    let off = g.mul(p, mask);
    let off = g.sum_all(off);
    g.weighted_sum(&[(kl, 1.0), (off, alpha)])
}

/// Indices of the `k` largest values, ties toward the lower index.
fn top_k(values: &[f64], k: usize) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..values.len() as u32).collect();
    idx.sort_by(|&a, &b| {
        values[b as usize]
            .total_cmp(&values[a as usize])
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Bidirectional logit-difference loss. Teacher logits are
/// `ln max(p_kNN, 1e-8)`.
fn bild<S: Scalar>(
    g: &mut Graph<S>,
    logits: Var,
    rows: &[SparseRow],
    weights: &[f64],
    top: usize,
) -> Var {
    let (n, vocab) = {
        let v = g.value(logits);
        (v.rows(), v.cols())
    };
    let k = top.min(vocab);
    let pairs: Vec<(usize, usize)> = (0..k)
        .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
        .collect();
    let zero = g.constant(Tensor::scalar(S::zero()));
    if pairs.is_empty() {
        return zero;
    }
    let teacher: Vec<Vec<f64>> = rows
        .iter()
        .map(|row| {
            let mut z = vec![TEACHER_FLOOR.ln(); vocab];
            for &(t, p) in &row.entries {
                z[t as usize] = p.max(TEACHER_FLOOR).ln();
            }
            z
        })
        .collect();
    let student: Vec<Vec<f64>> = (0..n)
        .map(|r| g.value(logits).row(r).iter().map(|v| v.as_f64()).collect())
        .collect();

    let mut terms = Vec::with_capacity(2);
    for leader in [&teacher, &student] {
        let mut ii = Vec::with_capacity(n * pairs.len());
        let mut jj = Vec::with_capacity(n * pairs.len());
        let mut targets = Vec::with_capacity(n);
        for r in 0..n {
            let sel = top_k(&leader[r], k);
            let diffs: Vec<f64> = pairs
                .iter()
                .map(|&(i, j)| teacher[r][sel[i] as usize] - teacher[r][sel[j] as usize])
                .collect();
            let dist = crate::tensor::softmax_f64(&diffs);
            targets.push(SparseRow {
                entries: dist.into_iter().enumerate().map(|(c, p)| (c as u32, p)).collect(),
            });
            for &(i, j) in &pairs {
                ii.push(sel[i]);
                jj.push(sel[j]);
            }
        }
        let zi = g.gather_cols(logits, &ii);
        let zj = g.gather_cols(logits, &jj);
        let d = g.sub(zi, zj);
        let lp = g.log_softmax(d);
        terms.push((g.sparse_kl(lp, targets, weights), 1.0));
    }
    g.weighted_sum(&terms)
}

/// Loss of one position from its logits; `None` supervision means plain LM
/// loss.
pub fn position_loss(
    kind: LossKind,
    logits: &[f64],
    supervision: Option<&SparseRow>,
    target: u32,
    beta: f64,
    hyper: &AblationHyper,
) -> Result<LossBreakdown> {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::new(vec![1, logits.len()], logits.to_vec())?);
    let vars = build_loss(&mut g, z, &[target], &[supervision.cloned()], kind, beta, hyper)?;
    Ok(vars.read(&g))
}

/// The hybrid objective at one position.
pub fn memdec_loss(
    logits: &[f64],
    supervision: Option<&SparseRow>,
    target: u32,
    beta: f64,
) -> Result<LossBreakdown> {
    position_loss(
        LossKind::Hybrid,
        logits,
        supervision,
        target,
        beta,
        &AblationHyper::default(),
    )
}

/// One of the alternative objectives at one position.
pub fn ablation_loss(
    kind: LossKind,
    logits: &[f64],
    supervision: &SparseRow,
    target: u32,
    beta: f64,
    hyper: &AblationHyper,
) -> Result<LossBreakdown> {
    if !kind.is_ablation() {
        return Err(invalid(format!("{kind} is not an alternative objective")));
    }
    position_loss(kind, logits, Some(supervision), target, beta, hyper)
}
