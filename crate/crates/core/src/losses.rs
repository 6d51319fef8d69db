//! Segmentation and distillation losses over per-point class probabilities,
//! each returning the loss and its analytic gradient with respect to the
//! (student) probabilities.
//!
//! All losses are means over points. Logs are guarded with
//! `ln(max(p, ε))`; guarded entries get a zero gradient.

use crate::pointcloud::LabelArray;
use crate::{Error, Result};

/// Row-sum tolerance accepted by [`ProbDist::new`].
pub const ROW_SUM_TOL: f64 = 1e-6;

/// `N × n_cls` row-stochastic matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist {
    n: usize,
    n_cls: usize,
    p: Vec<f64>,
}

impl ProbDist {
    pub fn new(n: usize, n_cls: usize, p: Vec<f64>) -> Result<Self> {
        let dist = Self::from_raw(n, n_cls, p)?;
        for (i, row) in dist.p.chunks_exact(n_cls.max(1)).enumerate() {
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidInput(format!("row {i} has probability {v}")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidInput(format!("row {i} sums to {sum}")));
            }
        }
        Ok(dist)
    }

    /// Shape-checked but not simplex-checked; used when probing losses
    /// off the simplex (finite differences).
    pub fn from_raw(n: usize, n_cls: usize, p: Vec<f64>) -> Result<Self> {
        if n_cls == 0 {
            return Err(Error::Shape("zero classes".into()));
        }
        if p.len() != n * n_cls {
            return Err(Error::Shape(format!("{} values for {n}×{n_cls} probabilities", p.len())));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite probability".into()));
        }
        Ok(Self { n, n_cls, p })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_cls(&self) -> usize {
        self.n_cls
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.p[i * self.n_cls..(i + 1) * self.n_cls]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.p
    }

    pub fn argmax(&self) -> Vec<usize> {
        self.p
            .chunks_exact(self.n_cls)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                    .0
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub class_weights: Vec<f64>,
    /// Distillation temperature λ.
    pub kd_temperature: f64,
    /// Weight of the segmentation loss (weighted CE + Lovász).
    pub lambda1: f64,
    /// Weight of the distillation loss.
    pub lambda2: f64,
    pub epsilon: f64,
}

impl LossConfig {
    /// Unit class weights, λ = 1, λ1 = λ2 = 1, ε = 1e-12.
    pub fn uniform(n_cls: usize) -> Self {
        Self {
            class_weights: vec![1.0; n_cls],
            kd_temperature: 1.0,
            lambda1: 1.0,
            lambda2: 1.0,
            epsilon: 1e-12,
        }
    }

    pub fn validate(&self, n_cls: usize) -> Result<()> {
        if self.class_weights.len() != n_cls {
            return Err(Error::Shape(format!(
                "{} class weights for {n_cls} classes",
                self.class_weights.len()
            )));
        }
        if self.class_weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidInput("class weights must be finite and positive".into()));
        }
        if !(self.kd_temperature.is_finite() && self.kd_temperature > 0.0) {
            return Err(Error::InvalidInput("KD temperature must be positive".into()));
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidInput(format!("{name} must be finite and ≥ 0")));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::InvalidInput("epsilon must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// A loss value with its gradient (`N × n_cls`, row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
}

fn check_labels(p: &ProbDist, labels: &LabelArray) -> Result<()> {
    if labels.len() != p.n {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), p.n)));
    }
    if let Some(bad) = labels.iter().find(|&l| l >= p.n_cls) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            n_cls: p.n_cls,
        });
    }
    Ok(())
}

/// `mean_i −w[y_i] · ln(max(p[i, y_i], ε))`.
pub fn weighted_ce(p: &ProbDist, labels: &LabelArray, cfg: &LossConfig) -> Result<LossOutput> {
    check_labels(p, labels)?;
    cfg.validate(p.n_cls)?;
    let mut grad = vec![0.0; p.p.len()];
    if p.n == 0 {
        return Ok(LossOutput { loss: 0.0, grad });
    }
    let scale = 1.0 / p.n as f64;
    let mut loss = 0.0;
    for (i, y) in labels.iter().enumerate() {
        let w = cfg.class_weights[y];
        let py = p.p[i * p.n_cls + y];
        if py >= cfg.epsilon {
            loss -= w * py.ln();
            grad[i * p.n_cls + y] = -w * scale / py;
        } else {
            loss -= w * cfg.epsilon.ln();
        }
    }
    Ok(LossOutput {
        loss: loss * scale,
        grad,
    })
}

/// Gradient of the Lovász extension of the Jaccard loss for a ground-truth
/// indicator already sorted by decreasing error.
pub fn lovasz_grad(sorted_fg: &[bool]) -> Vec<f64> {
    let gts = sorted_fg.iter().filter(|&&f| f).count() as f64;
    let mut out = Vec::with_capacity(sorted_fg.len());
    let mut cum_fg = 0.0;
    let mut prev = 0.0;
    for (k, &fg) in sorted_fg.iter().enumerate() {
        if fg {
            cum_fg += 1.0;
        }
        let intersection = gts - cum_fg;
        let union = gts + (k as f64 + 1.0 - cum_fg);
        let jaccard = 1.0 - intersection / union;
        out.push(jaccard - prev);
        prev = jaccard;
    }
    out
}

/// Point order by decreasing error; ties keep index order.
pub fn sort_by_error_desc(errors: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..errors.len()).collect();
    order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]));
    order
}

/// Lovász-Softmax averaged over the classes present in `labels`.
pub fn lovasz_softmax(p: &ProbDist, labels: &LabelArray) -> Result<LossOutput> {
    check_labels(p, labels)?;
    let k = p.n_cls;
    let mut grad = vec![0.0; p.p.len()];
    let mut present = vec![false; k];
    for y in labels.iter() {
        present[y] = true;
    }
    let n_present = present.iter().filter(|&&b| b).count();
    if n_present == 0 {
        return Ok(LossOutput { loss: 0.0, grad });
    }
    let scale = 1.0 / n_present as f64;
    let mut loss = 0.0;
    let mut errors = vec![0.0; p.n];
    for c in (0..k).filter(|&c| present[c]) {
        for (i, y) in labels.iter().enumerate() {
            let pc = p.p[i * k + c];
            errors[i] = if y == c { 1.0 - pc } else { pc };
        }
        let order = sort_by_error_desc(&errors);
        let fg: Vec<bool> = order.iter().map(|&i| labels.get(i) == c).collect();
        let g = lovasz_grad(&fg);
        let mut class_loss = 0.0;
        for ((&i, &gk), &is_fg) in order.iter().zip(&g).zip(&fg) {
            class_loss += errors[i] * gk;
            grad[i * k + c] += if is_fg { -gk } else { gk } * scale;
        }
        loss += class_loss;
    }
    Ok(LossOutput {
        loss: loss * scale,
        grad,
    })
}

/// Renormalizes all entries except `target` to sum to one. Returns `None`
/// when their mass is below `eps`.
pub fn normalize_non_target(v: &[f64], target: usize, eps: f64) -> Option<Vec<f64>> {
    let mass: f64 = v.iter().enumerate().filter(|(k, _)| *k != target).map(|(_, x)| x).sum();
    if mass.is_nan() || mass < eps {
        return None;
    }
    Some(
        v.iter()
            .enumerate()
            .map(|(k, &x)| if k == target { 0.0 } else { x / mass })
            .collect(),
    )
}

/// Weak-calibration distillation loss, per point with target class `c`:
///
/// `−p̂_c ln p_c − λ² Σ_{k≠c} N(p̂)_k ln N(p^λ)_k`
///
/// where `N` renormalizes over the non-target classes and `p^λ` is the
/// elementwise power. The teacher is a constant. When either distribution
/// has less than ε non-target mass, the second term is 0 for that point.
pub fn kd_loss(
    teacher: &ProbDist,
    student: &ProbDist,
    labels: &LabelArray,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    if teacher.n != student.n || teacher.n_cls != student.n_cls {
        return Err(Error::Shape(format!(
            "teacher is {}×{}, student is {}×{}",
            teacher.n, teacher.n_cls, student.n, student.n_cls
        )));
    }
    check_labels(student, labels)?;
    cfg.validate(student.n_cls)?;
    let k = student.n_cls;
    let eps = cfg.epsilon;
    let lam = cfg.kd_temperature;
    let lam2 = lam * lam;
    let mut grad = vec![0.0; student.p.len()];
    if student.n == 0 {
        return Ok(LossOutput { loss: 0.0, grad });
    }
    let scale = 1.0 / student.n as f64;
    let mut loss = 0.0;
    let mut powered = vec![0.0; k];
    for (i, c) in labels.iter().enumerate() {
        let t = teacher.row(i);
        let s = student.row(i);
        let g = &mut grad[i * k..(i + 1) * k];

        if s[c] >= eps {
            loss -= t[c] * s[c].ln();
            g[c] = -t[c] / s[c] * scale;
        } else {
            loss -= t[c] * eps.ln();
        }

        let Some(q) = normalize_non_target(t, c, eps) else {
            continue;
        };
        let student_mass: f64 = s.iter().enumerate().filter(|(j, _)| *j != c).map(|(_, x)| x).sum();
        if student_mass.is_nan() || student_mass < eps {
            continue;
        }
        for (j, slot) in powered.iter_mut().enumerate() {
            *slot = if j == c { 0.0 } else { s[j].max(0.0).powf(lam) };
        }
        let mass: f64 = powered.iter().sum();
        if mass.is_nan() || mass <= 0.0 {
            continue;
        }
        let mut guarded_q = 0.0;
        let mut term = 0.0;
        for j in (0..k).filter(|&j| j != c) {
            let nj = powered[j] / mass;
            if nj >= eps {
                term += q[j] * nj.ln();
                guarded_q += q[j];
                g[j] -= lam2 * q[j] * lam / s[j] * scale;
            } else {
                term += q[j] * eps.ln();
            }
        }
        loss -= lam2 * term;
        // Dependence of every unguarded log on the shared normalizer.
        for j in (0..k).filter(|&j| j != c) {
            if s[j] > 0.0 {
                g[j] += lam2 * guarded_q * lam * powered[j] / (s[j] * mass) * scale;
            }
        }
    }
    Ok(LossOutput {
        loss: loss * scale,
        grad,
    })
}

/// `λ1 · (weighted CE + Lovász) + λ2 · KD`. The teacher may be omitted when
/// `λ2 = 0`.
pub fn total_loss(
    p: &ProbDist,
    teacher: Option<&ProbDist>,
    labels: &LabelArray,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.validate(p.n_cls)?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; p.p.len()];
    let mut add = |out: LossOutput, weight: f64| {
        loss += weight * out.loss;
        for (g, d) in grad.iter_mut().zip(&out.grad) {
            *g += weight * d;
        }
    };
    if cfg.lambda1 > 0.0 {
        add(weighted_ce(p, labels, cfg)?, cfg.lambda1);
        add(lovasz_softmax(p, labels)?, cfg.lambda1);
    }
    if cfg.lambda2 > 0.0 {
        let teacher = teacher.ok_or_else(|| {
            Error::InvalidInput("a teacher distribution is required when lambda2 > 0".into())
        })?;
        add(kd_loss(teacher, p, labels, cfg)?, cfg.lambda2);
    }
    Ok(LossOutput { loss, grad })
}
