//! Dice ratio, average symmetric surface distance and evaluation reports.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelMap, TISSUES, TISSUE_NAMES};
use crate::segnet::{argmax_labels, SegNet};
use crate::tensorcore::{ParamSet, Tensor};

fn same_extent(a: &LabelMap, b: &LabelMap) -> Result<()> {
    if a.batch != b.batch || a.height != b.height || a.width != b.width {
        return Err(Error::Config(format!(
            "label maps {}×{}×{} and {}×{}×{} differ in extent",
            a.batch, a.height, a.width, b.batch, b.height, b.width
        )));
    }
    Ok(())
}

/// `2|P∩G| / (|P| + |G|)`; 1 when both are empty.
pub fn dice_score(pred: &LabelMap, gt: &LabelMap, class: u8) -> Result<f64> {
    same_extent(pred, gt)?;
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        let (ia, ib) = (a == class, b == class);
        p += ia as usize;
        g += ib as usize;
        inter += (ia && ib) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Class pixels of plane `b` with at least one 4-neighbour outside the
/// class; the image border counts as outside.
pub fn boundary(map: &LabelMap, b: usize, class: u8) -> Vec<bool> {
    let (h, w) = (map.height, map.width);
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if map.get(b, y, x) != class {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || map.get(b, y - 1, x) != class
                || map.get(b, y + 1, x) != class
                || map.get(b, y, x - 1) != class
                || map.get(b, y, x + 1) != class;
            out[y * w + x] = edge;
        }
    }
    out
}

const FAR: f64 = 1e20;

/// Exact squared distance of `f` sampled on a line: lower envelope of
/// parabolas rooted at each sample.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let meet = |q: usize, p: usize| ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
    for q in 1..n {
        let mut s = meet(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = meet(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest `true` pixel
/// of `seeds` (`h×w`, row-major). All `FAR`-ish when there are none.
pub fn squared_distance_transform(seeds: &[bool], h: usize, w: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { FAR }).collect();
    let n = h.max(w);
    let (mut f, mut out, mut v, mut z) = (vec![0.0; n], vec![0.0; n], vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

/// Sum over the `from` boundary pixels (raster order) of the distance to
/// the nearest `to` boundary pixel.
fn directed_sum(from: &[bool], to_dist2: &[f64]) -> f64 {
    let mut s = 0.0;
    for (i, &b) in from.iter().enumerate() {
        if b {
            s += to_dist2[i].sqrt();
        }
    }
    s
}

/// Average symmetric surface distance of `class` over all planes, scaled by
/// `spacing`. `None` when either mask is empty.
pub fn asd(pred: &LabelMap, gt: &LabelMap, class: u8, spacing: f64) -> Result<Option<f64>> {
    same_extent(pred, gt)?;
    let (h, w) = (pred.height, pred.width);
    let (mut s_pg, mut s_gp, mut count) = (0.0, 0.0, 0usize);
    for b in 0..pred.batch {
        let bp = boundary(pred, b, class);
        let bg = boundary(gt, b, class);
        let (np, ng) = (bp.iter().filter(|&&x| x).count(), bg.iter().filter(|&&x| x).count());
        if np == 0 || ng == 0 {
            return Ok(None);
        }
        s_pg += directed_sum(&bp, &squared_distance_transform(&bg, h, w));
        s_gp += directed_sum(&bg, &squared_distance_transform(&bp, h, w));
        count += np + ng;
    }
    Ok(Some((s_pg + s_gp) / count as f64 * spacing))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub id: String,
    /// CSF, GM, WM.
    pub dice: [f64; 3],
    /// `None` where the prediction or reference lacks the tissue.
    pub asd: [Option<f64>; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: String,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub asd_mean: Option<f64>,
    pub asd_std: Option<f64>,
    /// Subjects whose ASD was undefined and left out.
    pub asd_missing: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub subjects: usize,
    pub fingerprint: String,
    pub classes: Vec<ClassSummary>,
    /// Mean of the three tissue Dice means.
    pub mean_dice: f64,
    pub per_subject: Vec<SubjectMetrics>,
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    Some((m, var.sqrt()))
}

pub fn subject_metrics(id: &str, pred: &LabelMap, gt: &LabelMap, spacing: f64) -> Result<SubjectMetrics> {
    let mut dice = [0.0; 3];
    let mut dist = [None; 3];
    for (k, &c) in TISSUES.iter().enumerate() {
        dice[k] = dice_score(pred, gt, c)?;
        dist[k] = asd(pred, gt, c, spacing)?;
    }
    Ok(SubjectMetrics { id: id.into(), dice, asd: dist })
}

pub fn summarize(per_subject: Vec<SubjectMetrics>, fingerprint: &str) -> Result<EvalReport> {
    if per_subject.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    let mut classes = Vec::with_capacity(3);
    for k in 0..3 {
        let d: Vec<f64> = per_subject.iter().map(|s| s.dice[k]).collect();
        let a: Vec<f64> = per_subject.iter().filter_map(|s| s.asd[k]).collect();
        let (dm, ds) = mean_std(&d).expect("non-empty");
        let asd_ms = mean_std(&a);
        classes.push(ClassSummary {
            class: TISSUE_NAMES[k].into(),
            dice_mean: dm,
            dice_std: ds,
            asd_mean: asd_ms.map(|x| x.0),
            asd_std: asd_ms.map(|x| x.1),
            asd_missing: per_subject.len() - a.len(),
        });
    }
    let mean_dice = classes.iter().map(|c| c.dice_mean).sum::<f64>() / 3.0;
    Ok(EvalReport {
        subjects: per_subject.len(),
        fingerprint: fingerprint.into(),
        classes,
        mean_dice,
        per_subject,
    })
}

/// Scores precomputed predictions against references, one plane each.
pub fn evaluate_predictions(ids: &[String], preds: &[LabelMap], gts: &[LabelMap], spacing: f64, fingerprint: &str) -> Result<EvalReport> {
    if preds.len() != gts.len() || ids.len() != preds.len() {
        return Err(Error::Config("prediction and reference counts differ".into()));
    }
    let per = ids
        .iter()
        .zip(preds.iter().zip(gts))
        .map(|(id, (p, g))| subject_metrics(id, p, g, spacing))
        .collect::<Result<Vec<_>>>()?;
    summarize(per, fingerprint)
}

/// Predicts each image with the finest-scale logits and scores it.
pub fn evaluate(
    net: &SegNet,
    theta: &ParamSet,
    omega: &ParamSet,
    items: &[(String, Tensor, LabelMap)],
    spacing: f64,
    fingerprint: &str,
) -> Result<EvalReport> {
    let (theta, omega) = (theta.detach(), omega.detach());
    let mut ids = Vec::with_capacity(items.len());
    let mut preds = Vec::with_capacity(items.len());
    let mut gts = Vec::with_capacity(items.len());
    for chunk in items.chunks(8) {
        let imgs: Vec<&Tensor> = chunk.iter().map(|(_, i, _)| i).collect();
        let (_, logits) = net.forward(&theta, &omega, &Tensor::concat(&imgs, 0)?)?;
        let pred = argmax_labels(logits.last().expect("at least one scale"))?;
        for (k, (id, _, gt)) in chunk.iter().enumerate() {
            ids.push(id.clone());
            preds.push(pred.item(k));
            gts.push(gt.clone());
        }
    }
    evaluate_predictions(&ids, &preds, &gts, spacing, fingerprint)
}

fn pm(v: Option<(f64, f64)>, digits: usize) -> String {
    match v {
        Some((m, s)) => format!("{m:.digits$} ± {s:.digits$}"),
        None => "n/a".into(),
    }
}

impl EvalReport {
    /// Aligned text table, one row per tissue in CSF, GM, WM order.
    pub fn table(&self) -> String {
        let mut rows = vec![(
            "Class".to_string(),
            "Dice ↑".to_string(),
            "ASD ↓".to_string(),
            "ASD missing".to_string(),
        )];
        for c in &self.classes {
            rows.push((
                c.class.clone(),
                pm(Some((c.dice_mean, c.dice_std)), 4),
                pm(c.asd_mean.zip(c.asd_std), 3),
                c.asd_missing.to_string(),
            ));
        }
        let width = |f: fn(&(String, String, String, String)) -> &String| rows.iter().map(|r| f(r).chars().count()).max().unwrap_or(0);
        let (w0, w1, w2) = (width(|r| &r.0), width(|r| &r.1), width(|r| &r.2));
        let pad = |s: &str, w: usize| format!("{s}{}", " ".repeat(w - s.chars().count()));
        let mut out = String::new();
        for r in &rows {
            out.push_str(&format!("{}  {}  {}  {}\n", pad(&r.0, w0), pad(&r.1, w1), pad(&r.2, w2), r.3));
        }
        out.push_str(&format!("subjects: {}  mean Dice: {:.4}\n", self.subjects, self.mean_dice));
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}
