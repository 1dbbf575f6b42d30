//! Integer label maps and image/label mini-batches.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorcore::Tensor;

pub const BACKGROUND: u8 = 0;
pub const CSF: u8 = 1;
pub const GM: u8 = 2;
pub const WM: u8 = 3;
/// Foreground tissue classes in report order.
pub const TISSUES: [u8; 3] = [CSF, GM, WM];
pub const TISSUE_NAMES: [&str; 3] = ["CSF", "GM", "WM"];

/// Class indices for a batch of `batch` maps of `height`×`width` pixels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(batch: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != batch * height * width || batch == 0 || height == 0 || width == 0 {
            return Err(Error::Config(format!(
                "label map {batch}×{height}×{width} with {} entries",
                data.len()
            )));
        }
        Ok(Self {
            batch,
            height,
            width,
            data,
        })
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, b: usize, y: usize, x: usize) -> u8 {
        self.data[(b * self.height + y) * self.width + x]
    }

    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Errors when any label is outside `0..num_classes`.
    pub fn check_range(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().find(|&&l| l as usize >= num_classes) {
            Some(l) => Err(Error::Config(format!("label {l} out of range for {num_classes} classes"))),
            None => Ok(()),
        }
    }

    /// Nearest-neighbour downsampling: keeps pixel `(y·f, x·f)`.
    pub fn downsample(&self, factor: usize) -> Result<LabelMap> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::Config(format!(
                "label map {}×{} not divisible by {factor}",
                self.height, self.width
            )));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut data = Vec::with_capacity(self.batch * h * w);
        for b in 0..self.batch {
            for y in 0..h {
                for x in 0..w {
                    data.push(self.get(b, y * factor, x * factor));
                }
            }
        }
        LabelMap::new(self.batch, h, w, data)
    }

    /// `B×C×H×W` one-hot encoding.
    pub fn one_hot(&self, num_classes: usize) -> Result<Tensor> {
        self.check_range(num_classes)?;
        let plane = self.plane();
        let mut out = vec![0.0; self.batch * num_classes * plane];
        for b in 0..self.batch {
            for p in 0..plane {
                let c = self.data[b * plane + p] as usize;
                out[(b * num_classes + c) * plane + p] = 1.0;
            }
        }
        Ok(Tensor::new(out, &[self.batch, num_classes, self.height, self.width])?)
    }

    /// 0/1 indicator of `class`, laid out `B×H×W`.
    pub fn class_mask(&self, class: u8) -> Vec<f64> {
        self.data.iter().map(|&l| (l == class) as u8 as f64).collect()
    }

    pub fn histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = vec![0; num_classes.max(self.max_label() as usize + 1)];
        for &l in &self.data {
            h[l as usize] += 1;
        }
        h
    }

    /// Single element `b` as a one-element batch.
    pub fn item(&self, b: usize) -> LabelMap {
        let p = self.plane();
        LabelMap {
            batch: 1,
            height: self.height,
            width: self.width,
            data: self.data[b * p..(b + 1) * p].to_vec(),
        }
    }

    pub fn stack(maps: &[&LabelMap]) -> Result<LabelMap> {
        let first = maps.first().ok_or_else(|| Error::Config("empty label stack".into()))?;
        let mut data = Vec::new();
        let mut batch = 0;
        for m in maps {
            if m.height != first.height || m.width != first.width {
                return Err(Error::Config("label maps of different extents".into()));
            }
            data.extend_from_slice(&m.data);
            batch += m.batch;
        }
        LabelMap::new(batch, first.height, first.width, data)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            self.data.iter().map(|&l| l as f64).collect(),
            &[self.batch, self.height, self.width],
        )
        .expect("non-empty label map")
    }

    pub fn from_tensor(t: &Tensor) -> Result<LabelMap> {
        let (b, h, w) = match t.shape() {
            &[h, w] => (1, h, w),
            &[b, h, w] => (b, h, w),
            s => return Err(Error::Config(format!("label tensor of shape {s:?}"))),
        };
        let mut data = Vec::with_capacity(t.numel());
        for &v in t.data() {
            if v < 0.0 || v > 255.0 || v.fract() != 0.0 {
                return Err(Error::Config(format!("label value {v} is not a class index")));
            }
            data.push(v as u8);
        }
        LabelMap::new(b, h, w, data)
    }
}

/// Images `B×C×H×W` with matching labels `B×H×W`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub labels: LabelMap,
}

impl Batch {
    pub fn new(images: Tensor, labels: LabelMap) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[0] != labels.batch || s[2] != labels.height || s[3] != labels.width {
            return Err(Error::Config(format!(
                "images {s:?} vs labels {}×{}×{}",
                labels.batch, labels.height, labels.width
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.batch
    }

    pub fn is_empty(&self) -> bool {
        self.labels.batch == 0
    }

    /// Random horizontal/vertical flips per element, then additive Gaussian
    /// noise of `noise_sigma` clipped to `[0, 1]`.
    pub fn augment<R: Rng + ?Sized>(&self, rng: &mut R, flips: bool, noise_sigma: f64) -> Result<Batch> {
        let s = self.images.shape();
        let (ch, h, w) = (s[1], s[2], s[3]);
        let plane = h * w;
        let mut img = self.images.to_vec();
        let mut lab = self.labels.data.clone();
        let noise = Normal::new(0.0, noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
        for b in 0..self.len() {
            let (fx, fy) = if flips { (rng.random::<bool>(), rng.random::<bool>()) } else { (false, false) };
            if fx || fy {
                let src = |y: usize, x: usize| {
                    let sy = if fy { h - 1 - y } else { y };
                    let sx = if fx { w - 1 - x } else { x };
                    sy * w + sx
                };
                for c in 0..ch {
                    let off = (b * ch + c) * plane;
                    let orig = img[off..off + plane].to_vec();
                    for y in 0..h {
                        for x in 0..w {
                            img[off + y * w + x] = orig[src(y, x)];
                        }
                    }
                }
                let off = b * plane;
                let orig = lab[off..off + plane].to_vec();
                for y in 0..h {
                    for x in 0..w {
                        lab[off + y * w + x] = orig[src(y, x)];
                    }
                }
            }
        }
        if noise_sigma > 0.0 {
            for v in img.iter_mut() {
                *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
            }
        }
        Batch::new(
            Tensor::new(img, s)?,
            LabelMap::new(self.labels.batch, h, w, lab)?,
        )
    }

    pub fn concat(parts: &[&Batch]) -> Result<Batch> {
        let imgs: Vec<&Tensor> = parts.iter().map(|b| &b.images).collect();
        let labels: Vec<&LabelMap> = parts.iter().map(|b| &b.labels).collect();
        Batch::new(Tensor::concat(&imgs, 0)?, LabelMap::stack(&labels)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_keeps_top_left_of_each_cell() {
        let m = LabelMap::new(1, 4, 4, (0..16).map(|v| (v % 4) as u8).collect()).unwrap();
        let d = m.downsample(2).unwrap();
        assert_eq!(d.data, vec![0, 2, 0, 2]);
        assert!(m.downsample(3).is_err());
    }

    #[test]
    fn one_hot_and_masks() {
        let m = LabelMap::new(1, 1, 3, vec![0, 2, 1]).unwrap();
        let oh = m.one_hot(3).unwrap();
        assert_eq!(oh.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        assert_eq!(m.class_mask(2), vec![0.0, 1.0, 0.0]);
        assert!(m.one_hot(2).is_err());
        assert_eq!(m.histogram(4), vec![1, 1, 1, 0]);
    }

    #[test]
    fn augment_keeps_images_and_labels_aligned() {
        use rand::SeedableRng;
        let data: Vec<u8> = (0..32).map(|i| (i % 4) as u8).collect();
        let labels = LabelMap::new(2, 4, 4, data.clone()).unwrap();
        let images = Tensor::new(data.iter().map(|&l| l as f64 / 4.0).collect(), &[2, 1, 4, 4]).unwrap();
        let batch = Batch::new(images, labels).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for _ in 0..8 {
            let a = batch.augment(&mut rng, true, 0.0).unwrap();
            for (v, &l) in a.images.data().iter().zip(&a.labels.data) {
                assert_eq!(*v, l as f64 / 4.0);
            }
            assert_eq!(a.labels.histogram(4), batch.labels.histogram(4));
        }
        let same = batch.augment(&mut rng, false, 0.0).unwrap();
        assert_eq!(same.images, batch.images);
        let noisy = batch.augment(&mut rng, false, 0.3).unwrap();
        assert!(noisy.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(noisy.images, batch.images);
    }

    #[test]
    fn tensor_round_trip() {
        let m = LabelMap::new(2, 2, 2, vec![0, 1, 2, 3, 3, 2, 1, 0]).unwrap();
        assert_eq!(LabelMap::from_tensor(&m.to_tensor()).unwrap(), m);
        assert!(LabelMap::from_tensor(&Tensor::full(&[2, 2], 0.5)).is_err());
    }
}
