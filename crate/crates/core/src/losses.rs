//! Segmentation losses and the class-aware representation regularizers.
//!
//! Tissue representations are per-scale, per-class channel means of the
//! extractor's feature maps. The inter-tissue term pushes different tissues
//! towards zero cosine similarity at every scale; the intra-tissue term
//! rewards agreement of the same tissue across two datasets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelMap, TISSUES};
use crate::segnet::FeaturePyramid;
use crate::tensorcore::Tensor;

pub const DICE_EPS: f64 = 1e-5;
pub const COSINE_EPS: f64 = 1e-8;
/// Added under the square root of a norm so all-zero rows keep a finite
/// derivative.
const NORM_FLOOR: f64 = 1e-30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntraMode {
    /// Average each dataset's valid per-element reps before comparing.
    Batchmean,
    /// Compare element `i` of one batch with element `i` of the other.
    Positional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub beta: f64,
    pub gamma: f64,
    /// Per-scale weights, finest first.
    pub deep_supervision: Vec<f64>,
    pub intra_mode: IntraMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::for_scales(3)
    }
}

impl LossWeights {
    /// β = 0.1, γ = 0.001 and deep-supervision weights halving from 1 at
    /// the finest scale.
    pub fn for_scales(k: usize) -> Self {
        Self {
            beta: 0.1,
            gamma: 0.001,
            deep_supervision: (0..k).map(|i| 0.5f64.powi(i as i32)).collect(),
            intra_mode: IntraMode::Batchmean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 || self.gamma < 0.0 || self.deep_supervision.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.deep_supervision.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("deep-supervision weights sum to zero".into()));
        }
        Ok(())
    }
}

fn check_logits(logits: &Tensor, labels: &LabelMap) -> Result<usize> {
    let s = logits.shape();
    if s.len() != 4 || s[0] != labels.batch || s[2] != labels.height || s[3] != labels.width {
        return Err(Error::Config(format!(
            "logits {s:?} vs labels {}×{}×{}",
            labels.batch, labels.height, labels.width
        )));
    }
    labels.check_range(s[1])?;
    Ok(s[1])
}

/// Soft Dice over the whole batch, background included:
/// `1 − mean_c (2Σp·y + ε) / (Σp + Σy + ε)`.
pub fn dice_loss(logits: &Tensor, labels: &LabelMap) -> Result<Tensor> {
    let c = check_logits(logits, labels)?;
    let onehot = labels.one_hot(c)?;
    let probs = logits.log_softmax_channels()?.exp()?;
    let inter = probs.mul(&onehot)?.sum(&[0, 2, 3])?;
    let psum = probs.sum(&[0, 2, 3])?;
    let ysum = onehot.sum(&[0, 2, 3])?;
    let dice = inter.scale(2.0)?.shift(DICE_EPS)?.div(&psum.add(&ysum)?.shift(DICE_EPS)?)?;
    Ok(dice.mean_all()?.neg()?.shift(1.0)?)
}

/// Mean over pixels of `−log softmax` at the true class.
pub fn ce_loss(logits: &Tensor, labels: &LabelMap) -> Result<Tensor> {
    let c = check_logits(logits, labels)?;
    let onehot = labels.one_hot(c)?;
    let n = (labels.batch * labels.plane()) as f64;
    Ok(logits.log_softmax_channels()?.mul(&onehot)?.sum_all()?.scale(-1.0 / n)?)
}

/// Deep-supervised `Σ_k w_k (dice_k + ce_k) / Σ_k w_k`. `multi_logits` is
/// ordered coarsest first; `labels` are at the finest resolution and get
/// nearest-neighbour downsampled per scale.
pub fn seg_loss(multi_logits: &[Tensor], labels: &LabelMap, weights: &LossWeights) -> Result<Tensor> {
    let k = multi_logits.len();
    if k != weights.deep_supervision.len() {
        return Err(Error::Config(format!(
            "{k} logit scales but {} deep-supervision weights",
            weights.deep_supervision.len()
        )));
    }
    let total_w: f64 = weights.deep_supervision.iter().sum();
    let mut acc: Option<Tensor> = None;
    for (i, logits) in multi_logits.iter().enumerate() {
        let w = weights.deep_supervision[k - 1 - i];
        if w == 0.0 {
            continue;
        }
        let h = logits.shape().get(2).copied().unwrap_or(0);
        if h == 0 || labels.height % h != 0 {
            return Err(Error::Config(format!("logit extent {h} does not divide {}", labels.height)));
        }
        let lab = labels.downsample(labels.height / h)?;
        let term = dice_loss(logits, &lab)?.add(&ce_loss(logits, &lab)?)?.scale(w)?;
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term)?,
        });
    }
    let acc = acc.ok_or_else(|| Error::Config("all deep-supervision weights are zero".into()))?;
    Ok(acc.scale(1.0 / total_w)?)
}

/// Per-scale, per-tissue representations `f_k^c` (each `B×NC_k`) and which
/// batch elements actually contain the tissue at that scale.
#[derive(Clone, Debug)]
pub struct TissueReps {
    /// `reps[k][c]`, finest scale first, tissues in CSF/GM/WM order.
    pub reps: Vec<[Tensor; 3]>,
    pub valid: Vec<[Vec<bool>; 3]>,
}

impl TissueReps {
    pub fn scales(&self) -> usize {
        self.reps.len()
    }

    pub fn batch(&self) -> usize {
        self.valid.first().map(|v| v[0].len()).unwrap_or(0)
    }

    /// Multiplies every rep by `c` (used by scale-invariance checks).
    pub fn scaled(&self, c: f64) -> Result<TissueReps> {
        let reps = self
            .reps
            .iter()
            .map(|r| -> Result<[Tensor; 3]> { Ok([r[0].scale(c)?, r[1].scale(c)?, r[2].scale(c)?]) })
            .collect::<Result<_>>()?;
        Ok(TissueReps {
            reps,
            valid: self.valid.clone(),
        })
    }
}

pub fn tissue_representations(pyramid: &FeaturePyramid, labels: &LabelMap) -> Result<TissueReps> {
    let mut reps = Vec::with_capacity(pyramid.scales());
    let mut valid = Vec::with_capacity(pyramid.scales());
    for f in &pyramid.features {
        let s = f.shape();
        if s.len() != 4 || s[0] != labels.batch || s[2] == 0 || labels.height % s[2] != 0 {
            return Err(Error::Config(format!("feature map {s:?} vs labels")));
        }
        let m = labels.downsample(labels.height / s[2])?;
        let mshape = [m.batch, m.height, m.width];
        let mut r: Vec<Tensor> = Vec::with_capacity(3);
        let mut v: Vec<Vec<bool>> = Vec::with_capacity(3);
        for &c in &TISSUES {
            let (rep, ok) = f.masked_mean(&m.class_mask(c), &mshape)?;
            r.push(rep);
            v.push(ok);
        }
        let [r0, r1, r2]: [Tensor; 3] = r.try_into().expect("three tissues");
        let [v0, v1, v2]: [Vec<bool>; 3] = v.try_into().expect("three tissues");
        reps.push([r0, r1, r2]);
        valid.push([v0, v1, v2]);
    }
    Ok(TissueReps { reps, valid })
}

/// Mean cosine similarity of matching rows of `u` and `v` (both `B×C`),
/// over the rows where both sides are valid. Returns the value and whether
/// any row contributed; with no valid rows the value is 0.
pub fn cosine_similarity(u: &Tensor, v: &Tensor, valid_u: &[bool], valid_v: &[bool]) -> Result<(Tensor, bool)> {
    if u.shape() != v.shape() || u.shape().len() != 2 {
        return Err(Error::Config(format!("cosine of {:?} and {:?}", u.shape(), v.shape())));
    }
    let b = u.shape()[0];
    if valid_u.len() != b || valid_v.len() != b {
        return Err(Error::Config("validity masks do not match batch".into()));
    }
    let weights: Vec<f64> = valid_u.iter().zip(valid_v).map(|(&a, &c)| (a && c) as u8 as f64).collect();
    let count: f64 = weights.iter().sum();
    if count == 0.0 {
        return Ok((Tensor::scalar(0.0), false));
    }
    let dot = u.mul(v)?.sum(&[1])?;
    let nu = u.pow(2.0)?.sum(&[1])?.shift(NORM_FLOOR)?.pow(0.5)?;
    let nv = v.pow(2.0)?.sum(&[1])?.shift(NORM_FLOOR)?.pow(0.5)?;
    let cos = dot.div(&nu.mul(&nv)?.shift(COSINE_EPS)?)?;
    let w = Tensor::new(weights, &[b])?;
    Ok((cos.mul(&w)?.sum_all()?.scale(1.0 / count)?, true))
}

/// `(1/3K) Σ_k [cos(CSF,GM) + cos(CSF,WM) + cos(GM,WM)]`.
pub fn inter_tissue_loss(reps: &TissueReps) -> Result<Tensor> {
    let k = reps.scales();
    if k == 0 {
        return Err(Error::Config("no scales in tissue reps".into()));
    }
    let mut acc = Tensor::scalar(0.0);
    for (r, v) in reps.reps.iter().zip(&reps.valid) {
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            let (c, _) = cosine_similarity(&r[a], &r[b], &v[a], &v[b])?;
            acc = acc.add(&c)?;
        }
    }
    Ok(acc.scale(1.0 / (3 * k) as f64)?)
}

/// Mean of the valid rows of `rep`, as a `1×C` tensor; `None` when no row
/// is valid.
fn valid_row_mean(rep: &Tensor, valid: &[bool]) -> Result<Option<Tensor>> {
    let b = rep.shape()[0];
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return Ok(None);
    }
    let w = Tensor::new(
        valid.iter().map(|&v| if v { 1.0 / count as f64 } else { 0.0 }).collect(),
        &[1, b],
    )?;
    Ok(Some(w.matmul(rep)?))
}

/// `−(1/3K) Σ_k Σ_c cos(f_k^c(A), f_k^c(B))`.
pub fn intra_tissue_loss(a: &TissueReps, b: &TissueReps, mode: IntraMode) -> Result<Tensor> {
    let k = a.scales();
    if k == 0 || k != b.scales() {
        return Err(Error::Config(format!("intra loss over {k} and {} scales", b.scales())));
    }
    if mode == IntraMode::Positional && a.batch() != b.batch() {
        return Err(Error::Config(format!(
            "positional pairing needs equal mini-batch sizes ({} vs {})",
            a.batch(),
            b.batch()
        )));
    }
    let mut acc = Tensor::scalar(0.0);
    for s in 0..k {
        for c in 0..3 {
            let term = match mode {
                IntraMode::Positional => {
                    cosine_similarity(&a.reps[s][c], &b.reps[s][c], &a.valid[s][c], &b.valid[s][c])?.0
                }
                IntraMode::Batchmean => {
                    match (
                        valid_row_mean(&a.reps[s][c], &a.valid[s][c])?,
                        valid_row_mean(&b.reps[s][c], &b.valid[s][c])?,
                    ) {
                        (Some(ma), Some(mb)) => cosine_similarity(&ma, &mb, &[true], &[true])?.0,
                        _ => Tensor::scalar(0.0),
                    }
                }
            };
            acc = acc.add(&term)?;
        }
    }
    Ok(acc.scale(-1.0 / (3 * k) as f64)?)
}

/// One outer dataset's contribution: its logits, labels and tissue reps.
pub struct OuterView<'a> {
    pub logits: &'a [Tensor],
    pub labels: &'a LabelMap,
    pub reps: &'a TissueReps,
}

#[derive(Clone, Debug)]
pub struct OuterLoss {
    pub total: Tensor,
    pub seg: f64,
    pub inter: f64,
    pub intra: f64,
}

/// `mean(seg) + β·mean(inter) + γ·intra` over exactly two datasets.
pub fn outer_loss(views: &[OuterView<'_>], weights: &LossWeights) -> Result<OuterLoss> {
    if views.len() != 2 {
        return Err(Error::Config(format!("outer loss needs exactly 2 datasets, got {}", views.len())));
    }
    let seg0 = seg_loss(views[0].logits, views[0].labels, weights)?;
    let seg1 = seg_loss(views[1].logits, views[1].labels, weights)?;
    let seg = seg0.add(&seg1)?.scale(0.5)?;
    let mut total = seg.clone();
    let mut inter_v = 0.0;
    let mut intra_v = 0.0;
    if weights.beta != 0.0 {
        let inter = inter_tissue_loss(views[0].reps)?
            .add(&inter_tissue_loss(views[1].reps)?)?
            .scale(0.5)?;
        inter_v = inter.item();
        total = total.add(&inter.scale(weights.beta)?)?;
    }
    if weights.gamma != 0.0 {
        let intra = intra_tissue_loss(views[0].reps, views[1].reps, weights.intra_mode)?;
        intra_v = intra.item();
        total = total.add(&intra.scale(weights.gamma)?)?;
    }
    Ok(OuterLoss {
        seg: seg.item(),
        inter: inter_v,
        intra: intra_v,
        total,
    })
}
