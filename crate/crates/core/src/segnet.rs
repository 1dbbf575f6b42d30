//! 2-D encoder–decoder segmentation network split into a feature extractor
//! (encoder blocks) and a segmentation head (decoder blocks plus one 1×1
//! classifier per scale).
//!
//! Scale `k` runs at `image_size / 2^(k-1)` pixels with
//! `base_width · 2^(k-1)` channels; `k = 1` is the finest.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorcore::{ParamRole, ParamSet, Tensor};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub in_channels: usize,
    /// Including background.
    pub num_classes: usize,
    /// Number of scales `K`.
    pub scales: usize,
    pub base_width: usize,
    pub image_size: usize,
    pub instance_norm: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 4,
            scales: 3,
            base_width: 8,
            image_size: 32,
            instance_norm: true,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales < 2 {
            return Err(Error::Config("net.scales must be at least 2".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("net.num_classes must be at least 2".into()));
        }
        if self.in_channels == 0 || self.base_width == 0 {
            return Err(Error::Config("net.in_channels and net.base_width must be positive".into()));
        }
        let div = 1usize << (self.scales - 1);
        if self.image_size == 0 || self.image_size % div != 0 {
            return Err(Error::Config(format!(
                "net.image_size {} not divisible by 2^(K-1) = {div}",
                self.image_size
            )));
        }
        Ok(())
    }

    /// Channels at scale `k` (1-based).
    pub fn channels(&self, k: usize) -> usize {
        self.base_width << (k - 1)
    }

    /// Spatial extent at scale `k` (1-based).
    pub fn extent(&self, k: usize) -> usize {
        self.image_size >> (k - 1)
    }
}

/// Feature maps `F_k`, finest first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub features: Vec<Tensor>,
    /// Downsampling factor of each level relative to the input.
    pub factors: Vec<usize>,
}

impl FeaturePyramid {
    pub fn scales(&self) -> usize {
        self.features.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadPartition {
    pub trainable: BTreeSet<String>,
    pub frozen: BTreeSet<String>,
    pub n_upsample_layers: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegNet {
    config: NetConfig,
}

fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n: usize = shape.iter().product();
    Tensor::new((0..n).map(|_| normal.sample(rng)).collect(), shape).expect("valid shape")
}

impl SegNet {
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    fn conv_block_params(&self, p: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, cin: usize, cout: usize) -> Result<()> {
        for (j, ci) in [(1, cin), (2, cout)] {
            p.insert(format!("{prefix}.conv{j}.weight"), he_normal(rng, &[cout, ci, 3, 3]))?;
            if self.config.instance_norm {
                p.insert(format!("{prefix}.norm{j}.weight"), Tensor::ones(&[cout]))?;
                p.insert(format!("{prefix}.norm{j}.bias"), Tensor::zeros(&[cout]))?;
            } else {
                p.insert(format!("{prefix}.conv{j}.bias"), Tensor::zeros(&[cout]))?;
            }
        }
        Ok(())
    }

    /// Fresh He-initialized extractor and head parameters.
    pub fn init(&self, seed: u64) -> Result<(ParamSet, ParamSet)> {
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = ParamSet::new(ParamRole::Extractor);
        for k in 1..=c.scales {
            let cin = if k == 1 { c.in_channels } else { c.channels(k - 1) };
            self.conv_block_params(&mut theta, &mut rng, &format!("enc{k}"), cin, c.channels(k))?;
        }
        let mut omega = ParamSet::new(ParamRole::Head);
        for k in (1..c.scales).rev() {
            let cin = c.channels(k + 1) + c.channels(k);
            self.conv_block_params(&mut omega, &mut rng, &format!("dec{k}"), cin, c.channels(k))?;
        }
        for k in (1..=c.scales).rev() {
            omega.insert(format!("cls{k}.weight"), he_normal(&mut rng, &[c.num_classes, c.channels(k), 1, 1]))?;
            omega.insert(format!("cls{k}.bias"), Tensor::zeros(&[c.num_classes]))?;
        }
        Ok((theta, omega))
    }

    fn instance_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        let shape = x.shape().to_vec();
        let mean = x.mean(&[2, 3])?.expand(&shape, &[2, 3])?;
        let centered = x.sub(&mean)?;
        let inv_std = centered
            .pow(2.0)?
            .mean(&[2, 3])?
            .shift(NORM_EPS)?
            .pow(-0.5)?
            .expand(&shape, &[2, 3])?;
        let y = centered.mul(&inv_std)?;
        Ok(y.mul(&gamma.expand(&shape, &[0, 2, 3])?)?
            .add(&beta.expand(&shape, &[0, 2, 3])?)?)
    }

    /// conv3×3 → norm → relu, twice.
    fn conv_block(&self, p: &ParamSet, prefix: &str, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for j in 1..=2 {
            let w = p.get(&format!("{prefix}.conv{j}.weight"))?;
            h = if self.config.instance_norm {
                let conv = h.conv2d(w, None, 1, 1)?;
                Self::instance_norm(
                    &conv,
                    p.get(&format!("{prefix}.norm{j}.weight"))?,
                    p.get(&format!("{prefix}.norm{j}.bias"))?,
                )?
            } else {
                h.conv2d(w, Some(p.get(&format!("{prefix}.conv{j}.bias"))?), 1, 1)?
            };
            h = h.relu()?;
        }
        Ok(h)
    }

    /// Runs the encoder and returns every scale's output.
    pub fn extract_features(&self, theta: &ParamSet, images: &Tensor) -> Result<FeaturePyramid> {
        let c = &self.config;
        let s = images.shape();
        if s.len() != 4 || s[1] != c.in_channels || s[2] != c.image_size || s[3] != c.image_size {
            return Err(Error::Config(format!(
                "images {s:?} do not match {}×{}×{}",
                c.in_channels, c.image_size, c.image_size
            )));
        }
        let mut features = Vec::with_capacity(c.scales);
        let mut x = images.clone();
        for k in 1..=c.scales {
            if k > 1 {
                x = x.avg_down(2)?;
            }
            x = self.conv_block(theta, &format!("enc{k}"), &x)?;
            features.push(x.clone());
        }
        Ok(FeaturePyramid {
            features,
            factors: (0..c.scales).map(|k| 1 << k).collect(),
        })
    }

    /// Decodes coarse to fine. Returns one logit map per scale, coarsest
    /// first and finest last.
    pub fn decode(&self, omega: &ParamSet, pyramid: &FeaturePyramid) -> Result<Vec<Tensor>> {
        let c = &self.config;
        if pyramid.scales() != c.scales {
            return Err(Error::Config(format!(
                "pyramid has {} scales, network expects {}",
                pyramid.scales(),
                c.scales
            )));
        }
        for (k, f) in pyramid.features.iter().enumerate() {
            let s = f.shape();
            if s.len() != 4 || s[1] != c.channels(k + 1) || s[2] != c.extent(k + 1) {
                return Err(Error::Config(format!("feature map {} has shape {s:?}", k + 1)));
            }
        }
        let classify = |k: usize, d: &Tensor| -> Result<Tensor> {
            Ok(d.conv2d(
                omega.get(&format!("cls{k}.weight"))?,
                Some(omega.get(&format!("cls{k}.bias"))?),
                1,
                0,
            )?)
        };
        let mut logits = Vec::with_capacity(c.scales);
        let mut d = pyramid.features[c.scales - 1].clone();
        logits.push(classify(c.scales, &d)?);
        for k in (1..c.scales).rev() {
            let up = d.nearest_up(2)?;
            let cat = Tensor::concat(&[&up, &pyramid.features[k - 1]], 1)?;
            d = self.conv_block(omega, &format!("dec{k}"), &cat)?;
            logits.push(classify(k, &d)?);
        }
        Ok(logits)
    }

    pub fn forward(&self, theta: &ParamSet, omega: &ParamSet, images: &Tensor) -> Result<(FeaturePyramid, Vec<Tensor>)> {
        let pyramid = self.extract_features(theta, images)?;
        let logits = self.decode(omega, &pyramid)?;
        Ok((pyramid, logits))
    }

    /// Trainable set for fine-tuning: the last `n` decoder blocks (closest
    /// to the output) plus every classifier.
    pub fn partition_head(&self, omega: &ParamSet, n_upsample_layers: usize) -> Result<HeadPartition> {
        let k = self.config.scales;
        if n_upsample_layers > k - 1 {
            return Err(Error::Config(format!(
                "n_upsample_layers {n_upsample_layers} outside 0..={}",
                k - 1
            )));
        }
        let mut trainable = BTreeSet::new();
        let mut frozen = BTreeSet::new();
        for name in omega.names() {
            let block = name.split('.').next().unwrap_or("");
            let train = if block.starts_with("cls") {
                true
            } else if let Some(idx) = block.strip_prefix("dec") {
                idx.parse::<usize>().map(|i| i <= n_upsample_layers).unwrap_or(false)
            } else {
                false
            };
            if train {
                trainable.insert(name.to_string());
            } else {
                frozen.insert(name.to_string());
            }
        }
        Ok(HeadPartition {
            trainable,
            frozen,
            n_upsample_layers,
        })
    }
}

/// Per-pixel argmax of `B×C×H×W` logits.
pub fn argmax_labels(logits: &Tensor) -> Result<crate::labels::LabelMap> {
    let s = logits.shape();
    if s.len() != 4 {
        return Err(Error::Config(format!("logits of shape {s:?}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    let d = logits.data();
    let mut out = Vec::with_capacity(b * plane);
    for bi in 0..b {
        for p in 0..plane {
            let mut best = 0;
            for ci in 1..c {
                if d[(bi * c + ci) * plane + p] > d[(bi * c + best) * plane + p] {
                    best = ci;
                }
            }
            out.push(best as u8);
        }
    }
    crate::labels::LabelMap::new(b, h, w, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::{grad, GradOptions, Tape};

    fn small() -> NetConfig {
        NetConfig {
            base_width: 2,
            image_size: 8,
            scales: 2,
            ..NetConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(NetConfig::default().validate().is_ok());
        for bad in [
            NetConfig { scales: 1, ..NetConfig::default() },
            NetConfig { num_classes: 1, ..NetConfig::default() },
            NetConfig { image_size: 30, ..NetConfig::default() },
        ] {
            assert!(SegNet::new(bad).is_err());
        }
    }

    #[test]
    fn default_construction_counts() {
        let net = SegNet::new(NetConfig::default()).unwrap();
        let (theta, omega) = net.init(0).unwrap();
        let enc: BTreeSet<_> = theta.names().map(|n| n.split('.').next().unwrap().to_string()).collect();
        let dec: BTreeSet<_> = omega
            .names()
            .filter(|n| n.starts_with("dec"))
            .map(|n| n.split('.').next().unwrap().to_string())
            .collect();
        let cls: BTreeSet<_> = omega
            .names()
            .filter(|n| n.starts_with("cls"))
            .map(|n| n.split('.').next().unwrap().to_string())
            .collect();
        assert_eq!(enc.len(), 3);
        assert_eq!(dec.len(), 2);
        assert_eq!(cls.len(), 3);
        assert_eq!(theta.role(), ParamRole::Extractor);
        assert_eq!(omega.role(), ParamRole::Head);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let net = SegNet::new(NetConfig::default()).unwrap();
        let (a1, b1) = net.init(5).unwrap();
        let (a2, b2) = net.init(5).unwrap();
        assert!(a1.bit_eq(&a2) && b1.bit_eq(&b2));
        let (a3, _) = net.init(6).unwrap();
        assert!(!a1.bit_eq(&a3));
    }

    #[test]
    fn pyramid_and_logit_shapes() {
        let net = SegNet::new(NetConfig::default()).unwrap();
        let (theta, omega) = net.init(1).unwrap();
        let images = Tensor::full(&[2, 1, 32, 32], 0.3);
        let (pyr, logits) = net.forward(&theta, &omega, &images).unwrap();
        let extents: Vec<_> = pyr.features.iter().map(|f| f.shape().to_vec()).collect();
        assert_eq!(extents, vec![vec![2, 8, 32, 32], vec![2, 16, 16, 16], vec![2, 32, 8, 8]]);
        assert_eq!(logits.len(), 3);
        assert_eq!(logits[2].shape(), &[2, 4, 32, 32]);
        assert_eq!(logits[0].shape(), &[2, 4, 8, 8]);
        assert!(net.extract_features(&theta, &Tensor::ones(&[1, 1, 16, 16])).is_err());
    }

    #[test]
    fn zero_input_without_norm_stays_zero() {
        let net = SegNet::new(NetConfig {
            instance_norm: false,
            ..small()
        })
        .unwrap();
        let (theta, _) = net.init(3).unwrap();
        let pyr = net.extract_features(&theta, &Tensor::zeros(&[1, 1, 8, 8])).unwrap();
        assert!(pyr.features.iter().all(|f| f.data().iter().all(|&v| v == 0.0)));

        let normed = SegNet::new(small()).unwrap();
        let (theta, _) = normed.init(3).unwrap();
        let pyr = normed.extract_features(&theta, &Tensor::zeros(&[1, 1, 8, 8])).unwrap();
        assert!(pyr.features.iter().all(|f| f.is_finite()));
    }

    #[test]
    fn batch_elements_are_independent() {
        let net = SegNet::new(small()).unwrap();
        let (theta, omega) = net.init(4).unwrap();
        let img: Vec<f64> = (0..64).map(|i| ((i * 7) % 13) as f64 / 13.0).collect();
        let both = Tensor::new([img.clone(), img].concat(), &[2, 1, 8, 8]).unwrap();
        let (pyr, logits) = net.forward(&theta, &omega, &both).unwrap();
        for f in pyr.features.iter().chain(logits.iter()) {
            let half = f.numel() / 2;
            assert_eq!(&f.data()[..half], &f.data()[half..]);
        }
    }

    #[test]
    fn decode_is_deterministic_and_classifiers_are_isolated() {
        let net = SegNet::new(NetConfig::default()).unwrap();
        let (theta, omega) = net.init(2).unwrap();
        let images = Tensor::new((0..2048).map(|i| (i % 17) as f64 / 17.0).collect(), &[2, 1, 32, 32]).unwrap();
        let pyr = net.extract_features(&theta, &images).unwrap();
        let a = net.decode(&omega, &pyr).unwrap();
        let b = net.decode(&omega, &pyr).unwrap();
        assert_eq!(a, b);

        let mut perturbed = omega.clone();
        let w = perturbed.get("cls3.bias").unwrap().shift(0.5).unwrap();
        perturbed.set("cls3.bias", w).unwrap();
        let c = net.decode(&perturbed, &pyr).unwrap();
        assert_ne!(a[0], c[0]);
        assert_eq!(a[1], c[1]);
        assert_eq!(a[2], c[2]);
    }

    #[test]
    fn partition_examples() {
        let net = SegNet::new(NetConfig::default()).unwrap();
        let (_, omega) = net.init(0).unwrap();
        let all_names: BTreeSet<String> = omega.names().map(String::from).collect();
        for n in 0..=2 {
            let p = net.partition_head(&omega, n).unwrap();
            assert!(p.trainable.is_disjoint(&p.frozen));
            let union: BTreeSet<String> = p.trainable.union(&p.frozen).cloned().collect();
            assert_eq!(union, all_names);
        }
        let full = net.partition_head(&omega, 2).unwrap();
        assert!(full.frozen.is_empty());
        let cls_only = net.partition_head(&omega, 0).unwrap();
        assert!(cls_only.trainable.iter().all(|n| n.starts_with("cls")));
        let one = net.partition_head(&omega, 1).unwrap();
        assert!(one.trainable.iter().any(|n| n.starts_with("dec1")));
        assert!(one.frozen.iter().all(|n| n.starts_with("dec2")));
        assert!(net.partition_head(&omega, 3).is_err());
    }

    #[test]
    fn frozen_extractor_receives_no_gradient() {
        let net = SegNet::new(small()).unwrap();
        let (theta, omega) = net.init(9).unwrap();
        let tape = Tape::new();
        let omega_l = omega.attach(&tape);
        let images = Tensor::full(&[1, 1, 8, 8], 0.2);
        let (_, logits) = net.forward(&theta, &omega_l, &images).unwrap();
        let loss = logits[1].pow(2.0).unwrap().mean_all().unwrap();
        let theta_probe = theta.attach(&tape);
        let g = grad(&loss, &theta_probe.tensors(), GradOptions::first_order()).unwrap();
        assert!(g.reachable.iter().all(|r| !r));
        assert!(g.grads.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }
}
