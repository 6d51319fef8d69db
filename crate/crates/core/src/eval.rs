//! Confusion matrices, per-class IoU and the multi-level weak-calibration
//! benchmark.

use rayon::prelude::*;
use serde::Serialize;

use crate::calib::{sample_disturbance, CalibrationRig, PerturbationLevel};
use crate::fusion::FeatureMap;
use crate::pointcloud::{LabelArray, PointCloud};
use crate::{Error, Result};

/// `counts[g * n_cls + p]` = points with ground truth `g` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    n_cls: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_cls: usize) -> Self {
        Self {
            n_cls,
            counts: vec![0; n_cls * n_cls],
        }
    }

    pub fn n_cls(&self) -> usize {
        self.n_cls
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n_cls + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, gt: &LabelArray, pred: &LabelArray) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::Shape(format!(
                "{} ground-truth labels but {} predictions",
                gt.len(),
                pred.len()
            )));
        }
        let k = self.n_cls;
        if let Some(bad) = gt.iter().chain(pred.iter()).find(|&l| l >= k) {
            return Err(Error::LabelOutOfRange { label: bad, n_cls: k });
        }
        for (g, p) in gt.iter().zip(pred.iter()) {
            self.counts[g * k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n_cls != self.n_cls {
            return Err(Error::Shape(format!(
                "cannot merge {}-class and {}-class matrices",
                self.n_cls, other.n_cls
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Per-class IoU (`None` where TP + FP + FN = 0) and their mean.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IoUReport {
    pub per_class_iou: Vec<Option<f64>>,
    /// `None` when no class is defined.
    pub miou: Option<f64>,
}

/// `IoU_c = TP_c / (TP_c + FP_c + FN_c)`, averaged over defined classes.
pub fn miou(cm: &ConfusionMatrix) -> IoUReport {
    let k = cm.n_cls;
    let ratios: Vec<Option<(u64, u64)>> = (0..k)
        .map(|c| {
            let tp = cm.get(c, c);
            let row: u64 = (0..k).map(|p| cm.get(c, p)).sum();
            let col: u64 = (0..k).map(|g| cm.get(g, c)).sum();
            let denom = row + col - tp;
            (denom > 0).then_some((tp, denom))
        })
        .collect();
    let per_class_iou = ratios.iter().map(|r| r.map(|(tp, d)| tp as f64 / d as f64)).collect::<Vec<_>>();
    let defined: Vec<(u64, u64)> = ratios.iter().flatten().copied().collect();
    let miou = (!defined.is_empty()).then(|| {
        exact_mean(&defined).unwrap_or_else(|| {
            per_class_iou.iter().flatten().sum::<f64>() / defined.len() as f64
        })
    });
    IoUReport { per_class_iou, miou }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Mean of `num/den` fractions as one correctly rounded division, or `None`
/// when the reduced fraction does not fit exactly in an f64 quotient.
fn exact_mean(fractions: &[(u64, u64)]) -> Option<f64> {
    let (mut num, mut den) = (0u128, 1u128);
    for &(t, d) in fractions {
        let (t, d) = (u128::from(t), u128::from(d));
        num = num.checked_mul(d)?.checked_add(t.checked_mul(den)?)?;
        den = den.checked_mul(d)?;
        let g = gcd(num, den).max(1);
        (num, den) = (num / g, den / g);
    }
    den = den.checked_mul(fractions.len() as u128)?;
    let g = gcd(num, den).max(1);
    (num, den) = (num / g, den / g);
    const EXACT: u128 = 1 << 53;
    (num <= EXACT && den <= EXACT).then(|| num as f64 / den as f64)
}

/// One evaluation sample: a labelled cloud with its calibrated camera maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: u64,
    pub cloud: PointCloud,
    pub labels: LabelArray,
    pub rig: CalibrationRig,
    pub maps: Vec<FeatureMap>,
}

/// Frame-level segmentation. `rig` is the calibration to use, which may be a
/// perturbed copy of `frame.rig`.
pub trait Predictor: Sync {
    fn predict(&self, frame: &Frame, rig: &CalibrationRig) -> Result<LabelArray>;
}

impl<F> Predictor for F
where
    F: Fn(&Frame, &CalibrationRig) -> Result<LabelArray> + Sync,
{
    fn predict(&self, frame: &Frame, rig: &CalibrationRig) -> Result<LabelArray> {
        self(frame, rig)
    }
}

/// Returns each frame's ground truth.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&self, frame: &Frame, _rig: &CalibrationRig) -> Result<LabelArray> {
        Ok(frame.labels.clone())
    }
}

/// How disturbances are drawn across a benchmark run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DisturbanceMode {
    /// Independent draw per (frame, camera).
    #[default]
    PerFrameCamera,
    /// One draw per camera shared by every frame.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelResult {
    pub level: u8,
    pub confusion: ConfusionMatrix,
    pub report: IoUReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkRun {
    pub seed: u64,
    pub mode: DisturbanceMode,
    pub frame_ids: Vec<u64>,
    pub levels: Vec<LevelResult>,
}

impl BenchmarkRun {
    pub fn level(&self, level: PerturbationLevel) -> Option<&LevelResult> {
        self.levels.iter().find(|r| r.level == level.index())
    }

    pub fn miou_at(&self, level: PerturbationLevel) -> Option<f64> {
        self.level(level).and_then(|r| r.report.miou)
    }
}

/// The rig a frame is evaluated with at `level`. Level 0 returns the
/// original calibration untouched.
pub fn rig_for_level(
    frame: &Frame,
    level: PerturbationLevel,
    seed: u64,
    mode: DisturbanceMode,
) -> Result<CalibrationRig> {
    if level == PerturbationLevel::L0 {
        return Ok(frame.rig.clone());
    }
    let frame_key = match mode {
        DisturbanceMode::PerFrameCamera => frame.id,
        DisturbanceMode::Global => 0,
    };
    let specs: Vec<_> = (0..frame.rig.len())
        .map(|cam| sample_disturbance(level, seed, frame_key, cam as u64))
        .collect();
    frame.rig.perturbed(&specs)
}

fn check_frame(frame: &Frame, n_cls: usize) -> Result<()> {
    if frame.labels.len() != frame.cloud.len() {
        return Err(Error::CountMismatch(format!(
            "{} labels for {} points",
            frame.labels.len(),
            frame.cloud.len()
        )));
    }
    if frame.labels.n_cls() != n_cls {
        return Err(Error::Shape(format!(
            "frame has {} classes, benchmark expects {n_cls}",
            frame.labels.n_cls()
        )));
    }
    Ok(())
}

fn evaluate_frames<G>(predictor: &dyn Predictor, frames: &[Frame], n_cls: usize, rig_of: G) -> Result<ConfusionMatrix>
where
    G: Fn(&Frame) -> Result<CalibrationRig> + Sync,
{
    let partials = frames
        .par_iter()
        .map(|frame| {
            let wrap = |e: Error| Error::Frame {
                frame: frame.id as usize,
                source: Box::new(e),
            };
            check_frame(frame, n_cls).map_err(wrap)?;
            let rig = rig_of(frame).map_err(wrap)?;
            let pred = predictor.predict(frame, &rig).map_err(wrap)?;
            let mut cm = ConfusionMatrix::new(n_cls);
            cm.accumulate(&frame.labels, &pred).map_err(wrap)?;
            Ok(cm)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = ConfusionMatrix::new(n_cls);
    for cm in &partials {
        total.merge(cm)?;
    }
    Ok(total)
}

/// Evaluates `predictor` on the original calibration, without any
/// perturbation machinery.
pub fn evaluate_unperturbed(predictor: &dyn Predictor, frames: &[Frame]) -> Result<ConfusionMatrix> {
    let n_cls = n_classes(frames)?;
    evaluate_frames(predictor, frames, n_cls, |f| Ok(f.rig.clone()))
}

fn n_classes(frames: &[Frame]) -> Result<usize> {
    frames
        .first()
        .map(|f| f.labels.n_cls())
        .ok_or_else(|| Error::InvalidInput("benchmark needs at least one frame".into()))
}

/// Runs `predictor` over every frame at every level, perturbing each camera
/// with draws from [`sample_disturbance`], and reports one confusion matrix
/// and IoU table per level.
pub fn weak_calib_benchmark(
    predictor: &dyn Predictor,
    frames: &[Frame],
    levels: &[PerturbationLevel],
    seed: u64,
    mode: DisturbanceMode,
) -> Result<BenchmarkRun> {
    let n_cls = n_classes(frames)?;
    let mut results = Vec::with_capacity(levels.len());
    for &level in levels {
        let confusion =
            evaluate_frames(predictor, frames, n_cls, |f| rig_for_level(f, level, seed, mode))?;
        if level == PerturbationLevel::L0 {
            debug_assert_eq!(confusion, evaluate_unperturbed(predictor, frames)?);
        }
        results.push(LevelResult {
            level: level.index(),
            report: miou(&confusion),
            confusion,
        });
    }
    Ok(BenchmarkRun {
        seed,
        mode,
        frame_ids: frames.iter().map(|f| f.id).collect(),
        levels: results,
    })
}
