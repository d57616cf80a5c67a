//! Foreground IoU, error and generalization-gap bookkeeping, plus the pixel
//! attack that mask legalization undoes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor};
use crate::doinn::{resist_from_logits, seg_loss, DoinnModel, Sample};
use crate::error::{LadaError, Result};
use crate::image::{BinaryImage, MaskImage, ResistImage};
use crate::litho::legalize;

const ROW_TOL: f64 = 1e-9;

/// Jaccard index of the foreground class. Two empty foregrounds score 1.
pub fn fiou(pred: &BinaryImage, gold: &BinaryImage) -> Result<f64> {
    if pred.dims() != gold.dims() {
        return Err(LadaError::shape(
            "fiou",
            format!("{:?} vs {:?}", pred.dims(), gold.dims()),
        ));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gold.data()) {
        inter += (p & g) as usize;
        union += (p | g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

pub fn gap(item_error_pct: f64, pretrain_train_error_pct: f64) -> f64 {
    item_error_pct - pretrain_train_error_pct
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub fiou_pct: f64,
    pub error_pct: f64,
}

impl Evaluation {
    pub fn from_fiou_pct(fiou_pct: f64) -> Self {
        Evaluation {
            fiou_pct,
            error_pct: 100.0 - fiou_pct,
        }
    }
}

/// Mean fIoU of the model's predictions over `data`, in percent.
pub fn evaluate(model: &DoinnModel, data: &[Sample]) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(LadaError::InvalidInput("cannot evaluate on an empty dataset".into()));
    }
    let scores: Vec<f64> = data
        .par_iter()
        .map(|(m, r)| fiou(&model.predict_resist(m)?, r))
        .collect::<Result<_>>()?;
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok(Evaluation::from_fiou_pct(100.0 * mean))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRow {
    pub name: String,
    pub fiou_pct: f64,
    pub error_pct: f64,
    pub gap_pct: f64,
}

impl MetricsRow {
    pub fn new(name: impl Into<String>, fiou_pct: f64, pretrain_train_error_pct: f64) -> Self {
        let error_pct = 100.0 - fiou_pct;
        MetricsRow {
            name: name.into(),
            fiou_pct,
            error_pct,
            gap_pct: gap(error_pct, pretrain_train_error_pct),
        }
    }

    /// Rows for a reference "train" evaluation followed by the others, all
    /// measured against the reference's error.
    pub fn table(train: (&str, f64), rest: &[(&str, f64)]) -> Vec<MetricsRow> {
        let base = 100.0 - train.1;
        std::iter::once(train)
            .chain(rest.iter().copied())
            .map(|(n, f)| MetricsRow::new(n, f, base))
            .collect()
    }
}

/// Checks the row identities; the first row is the reference.
pub fn check_rows(rows: &[MetricsRow]) -> Result<()> {
    let Some(base) = rows.first() else { return Ok(()) };
    for r in rows {
        let bad = |what: &str| {
            Err(LadaError::InvalidInput(format!("metrics row {:?}: {what}", r.name)))
        };
        if !(r.fiou_pct.is_finite() && r.error_pct.is_finite() && r.gap_pct.is_finite()) {
            return bad("non-finite value");
        }
        if (r.error_pct - (100.0 - r.fiou_pct)).abs() > ROW_TOL {
            return bad("error_pct != 100 - fiou_pct");
        }
        if (r.gap_pct - (r.error_pct - base.error_pct)).abs() > ROW_TOL {
            return bad("gap_pct != error_pct - reference error_pct");
        }
    }
    Ok(())
}

pub fn render_table(rows: &[MetricsRow]) -> String {
    let w = rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(4);
    let mut s = String::new();
    let _ = writeln!(s, "{:<w$}  {:>9}  {:>9}  {:>9}", "Item", "fIoU%", "error%", "Gap%");
    for (i, r) in rows.iter().enumerate() {
        let g = if i == 0 { "-".to_string() } else { format!("{:.4}", r.gap_pct) };
        let _ = writeln!(s, "{:<w$}  {:>9.4}  {:>9.4}  {:>9}", r.name, r.fiou_pct, r.error_pct, g);
    }
    s
}

/// Writes `metrics.json` and `metrics.txt` into `out`, after checking every row.
pub fn report(rows: &[MetricsRow], out: &Path) -> Result<(PathBuf, PathBuf)> {
    check_rows(rows)?;
    fs::create_dir_all(out).map_err(|e| LadaError::io(out, e))?;
    let json = out.join("metrics.json");
    let txt = out.join("metrics.txt");
    fs::write(&json, serde_json::to_string_pretty(rows)? + "\n").map_err(|e| LadaError::io(&json, e))?;
    fs::write(&txt, render_table(rows)).map_err(|e| LadaError::io(&txt, e))?;
    Ok((json, txt))
}

pub fn read_report(path: &Path) -> Result<Vec<MetricsRow>> {
    let s = fs::read_to_string(path).map_err(|e| LadaError::io(path, e))?;
    let rows: Vec<MetricsRow> = serde_json::from_str(&s)?;
    check_rows(&rows)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    /// fIoU of the clean prediction against the attack reference (itself)
    pub clean_fiou: f64,
    /// fIoU of the prediction on the perturbed input against the reference
    pub adv_fiou: f64,
    pub perturbation: f64,
    pub legalized_matches: bool,
}

#[derive(Clone, Debug)]
pub struct AttackDemo {
    /// perturbed encoded input `[1, H, W]`
    pub adv_raw: Tensor,
    pub clean_pred: ResistImage,
    pub adv_pred: ResistImage,
    pub legalized: MaskImage,
    pub report: AttackReport,
}

/// Sign-gradient ascent of the segmentation loss on the encoded input, with
/// the model's clean prediction as the target. Every pixel moves by at most
/// `step * iters < 1`, so legalization recovers the mask exactly.
pub fn attack_demo(f: &DoinnModel, mask: &MaskImage, step: f64, iters: usize) -> Result<AttackDemo> {
    let total = step * iters as f64;
    if !(step >= 0.0 && step.is_finite()) || total >= 1.0 {
        return Err(LadaError::InvalidInput(format!(
            "attack needs step >= 0 and step * iters < 1, got {step} * {iters}"
        )));
    }
    let clean = mask.encode();
    let clean_pred = f.predict_resist(mask)?;
    let mut x = clean.clone();
    for _ in 0..iters {
        let mut t = Tape::<f32>::new();
        let b = f.params.bind(&mut t, false);
        let xv = t.leaf(x.clone(), true);
        let out = f.forward(&mut t, &b, xv)?;
        let loss = seg_loss(&mut t, out.logits, &clean_pred)?;
        let g = t.backward(loss)?.take(xv);
        for (v, d) in x.data_mut().iter_mut().zip(g.data()) {
            let s = if *d > 0.0 {
                1.0
            } else if *d < 0.0 {
                -1.0
            } else {
                0.0
            };
            *v = (*v + step as f32 * s).clamp(-1.0, 1.0);
        }
    }
    let (h, w) = mask.dims();
    let adv_pred = resist_from_logits(&f.logits(&x)?);
    let legalized = legalize(x.data(), h, w)?;
    let report = AttackReport {
        clean_fiou: fiou(&clean_pred, &clean_pred)?,
        adv_fiou: fiou(&adv_pred, &clean_pred)?,
        perturbation: total,
        legalized_matches: &legalized == mask,
    };
    Ok(AttackDemo {
        adv_raw: x,
        clean_pred,
        adv_pred,
        legalized,
        report,
    })
}
