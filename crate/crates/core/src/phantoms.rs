//! Synthetic cross-sectional "age group" phantoms and their on-disk pool.
//!
//! Each subject is a radially layered blob: a CSF rim, a folded GM band, a
//! WM core with a small central ventricle, all under a random affine warp.
//! Groups differ in tissue contrast, atrophy and fold count.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{Batch, LabelMap, BACKGROUND, CSF, GM, TISSUES, WM};
use crate::meta::BatchSource;
use crate::tensorcore::{dtns, Tensor};

pub const POOL_VERSION: u32 = 1;
pub const MIN_CLASS_FRACTION: f64 = 0.01;
const MAX_ATTEMPTS: u64 = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgeGroupSpec {
    pub name: String,
    /// Mean intensities of CSF, GM and WM.
    pub contrast: [f64; 3],
    /// Inward shift of the GM outer boundary, in pixels at 32×32 (scaled
    /// with the image).
    pub atrophy: f64,
    pub noise_sigma: f64,
    /// Inclusive range of cortical fold counts.
    pub folds: (u32, u32),
    pub subjects: usize,
    /// Affine warp strength in `[0, 1]`; 0 disables the warp.
    #[serde(default = "default_warp")]
    pub warp: f64,
    /// Probability of relabelling a boundary pixel to a neighbour's class.
    #[serde(default)]
    pub label_noise: f64,
    /// Allows GM and WM means closer than the usual separation.
    #[serde(default)]
    pub isointense: bool,
}

fn default_warp() -> f64 {
    1.0
}

impl AgeGroupSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("group {:?}: {m}", self.name)));
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return bad("name must be a plain directory name");
        }
        if self.contrast.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return bad("contrast means must lie in [0, 1]");
        }
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            let gap = (self.contrast[i] - self.contrast[j]).abs();
            let exempt = self.isointense && (i, j) == (1, 2);
            if gap < 0.05 && !exempt {
                return bad("tissue contrast means must differ by at least 0.05");
            }
        }
        if self.atrophy < 0.0 || self.noise_sigma < 0.0 || !(0.0..=1.0).contains(&self.warp) {
            return bad("atrophy, noise and warp must be non-negative (warp ≤ 1)");
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return bad("label_noise must be a probability");
        }
        if self.folds.0 > self.folds.1 {
            return bad("fold range is empty");
        }
        if self.subjects < 2 {
            return bad("at least 2 subjects are needed for a train/val split");
        }
        Ok(())
    }

    fn group(name: &str, contrast: [f64; 3], atrophy: f64, folds: (u32, u32), subjects: usize) -> Self {
        Self {
            name: name.into(),
            contrast,
            atrophy,
            noise_sigma: 0.05,
            folds,
            subjects,
            warp: 1.0,
            label_noise: 0.0,
            isointense: false,
        }
    }

    /// GM brighter than WM.
    pub fn infant_12m() -> Self {
        Self::group("12m-like", [0.2, 0.7, 0.45], 0.0, (5, 8), 20)
    }

    /// Mildly adult-like ordering.
    pub fn toddler_24m() -> Self {
        Self::group("24m-like", [0.2, 0.5, 0.65], 0.0, (5, 8), 20)
    }

    /// Adult ordering with enlarged CSF and thinner GM.
    pub fn elderly() -> Self {
        Self::group("elderly-like", [0.15, 0.45, 0.75], 2.0, (6, 9), 20)
    }

    /// Held-out isointense group: GM and WM nearly equal, WM slightly
    /// brighter.
    pub fn infant_6m() -> Self {
        Self {
            isointense: true,
            ..Self::group("6m-like", [0.25, 0.50, 0.52], 0.0, (4, 7), 40)
        }
    }

    /// Three training groups followed by the unseen test group.
    pub fn defaults() -> Vec<Self> {
        vec![Self::infant_12m(), Self::toddler_24m(), Self::elderly(), Self::infant_6m()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    /// `1×1×H×W`, values in `[0, 1]`.
    pub image: Tensor,
    pub labels: LabelMap,
    pub group: String,
    pub id: String,
    pub seed: u64,
}

/// Random affine map of the unit square centred at the origin.
struct Warp {
    inv: [[f64; 2]; 2],
    shift: [f64; 2],
}

impl Warp {
    fn draw(rng: &mut ChaCha8Rng, strength: f64, size: f64) -> Self {
        let rot = strength * rng.random_range(-PI..PI);
        let sx = 1.0 + strength * rng.random_range(-0.1..0.1);
        let sy = 1.0 + strength * rng.random_range(-0.1..0.1);
        let shear = strength * rng.random_range(-0.1..0.1);
        let shift = [
            strength * rng.random_range(-0.04..0.04) * size,
            strength * rng.random_range(-0.04..0.04) * size,
        ];
        let (c, s) = (rot.cos(), rot.sin());
        // forward = R · [[sx, shear], [0, sy]]
        let f = [[c * sx, c * shear - s * sy], [s * sx, s * shear + c * sy]];
        let det = f[0][0] * f[1][1] - f[0][1] * f[1][0];
        let inv = [[f[1][1] / det, -f[0][1] / det], [-f[1][0] / det, f[0][0] / det]];
        Self { inv, shift }
    }

    fn identity() -> Self {
        Self {
            inv: [[1.0, 0.0], [0.0, 1.0]],
            shift: [0.0, 0.0],
        }
    }

    fn apply_inverse(&self, x: f64, y: f64) -> (f64, f64) {
        let (x, y) = (x - self.shift[0], y - self.shift[1]);
        (self.inv[0][0] * x + self.inv[0][1] * y, self.inv[1][0] * x + self.inv[1][1] * y)
    }
}

fn draw_labels(spec: &AgeGroupSpec, size: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let s = size as f64;
    let px = s / 32.0;
    let folds = rng.random_range(spec.folds.0..=spec.folds.1) as f64;
    let harmonics: Vec<(f64, f64, f64)> = (1..=3)
        .map(|k| (k as f64, rng.random_range(0.0..0.04), rng.random_range(0.0..2.0 * PI)))
        .collect();
    let fold_phase = rng.random_range(0.0..2.0 * PI);
    let fold_depth = rng.random_range(0.25..0.45);
    let warp = if spec.warp > 0.0 {
        Warp::draw(rng, spec.warp, s)
    } else {
        Warp::identity()
    };
    let csf = 0.06 * s;
    let atrophy = spec.atrophy * px;
    let ventricle = 0.06 * s + 0.5 * atrophy;
    let centre = (s - 1.0) / 2.0;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = warp.apply_inverse(x as f64 - centre, y as f64 - centre);
            let r = u.hypot(v);
            let a = v.atan2(u);
            let outer = 0.40 * s * (1.0 + harmonics.iter().map(|(k, amp, ph)| amp * (k * a + ph).sin()).sum::<f64>());
            let gm_band = 0.10 * s * (1.0 + fold_depth * (folds * a + fold_phase).sin());
            let wm = outer - csf - gm_band;
            let gm_outer = (outer - csf - atrophy).max(wm + 0.03 * s);
            let l = if r > outer {
                BACKGROUND
            } else if r > gm_outer {
                CSF
            } else if r > wm {
                GM
            } else if r < ventricle {
                CSF
            } else {
                WM
            };
            out.push(l);
        }
    }
    out
}

/// Relabels each boundary pixel with probability `p` to the class of a
/// random differing 4-neighbour.
fn corrupt_boundaries(labels: &mut [u8], size: usize, p: f64, rng: &mut ChaCha8Rng) {
    if p <= 0.0 {
        return;
    }
    let orig = labels.to_vec();
    for y in 0..size {
        for x in 0..size {
            let here = orig[y * size + x];
            let mut others = [0u8; 4];
            let mut n = 0;
            let nb = [
                (y.wrapping_sub(1), x),
                (y + 1, x),
                (y, x.wrapping_sub(1)),
                (y, x + 1),
            ];
            for (ny, nx) in nb {
                if ny < size && nx < size && orig[ny * size + nx] != here {
                    others[n] = orig[ny * size + nx];
                    n += 1;
                }
            }
            if n > 0 && rng.random::<f64>() < p {
                labels[y * size + x] = others[rng.random_range(0..n)];
            }
        }
    }
}

fn prevalence_ok(labels: &[u8]) -> bool {
    let n = labels.len() as f64;
    TISSUES
        .iter()
        .all(|&c| labels.iter().filter(|&&l| l == c).count() as f64 >= MIN_CLASS_FRACTION * n)
}

/// Deterministic in `(spec, size, seed)`. Redraws the geometry up to ten
/// times until every tissue covers at least 1% of the image.
pub fn generate_subject(spec: &AgeGroupSpec, size: usize, seed: u64, id: &str) -> Result<Subject> {
    spec.validate()?;
    if size < 8 {
        return Err(Error::Config(format!("phantom size {size} is below 8")));
    }
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(attempt);
        let truth = draw_labels(spec, size, &mut rng);
        if !prevalence_ok(&truth) {
            continue;
        }
        let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        let image: Vec<f64> = truth
            .iter()
            .map(|&l| {
                let mean = if l == BACKGROUND { 0.0 } else { spec.contrast[l as usize - 1] };
                if spec.noise_sigma > 0.0 {
                    (mean + noise.sample(&mut rng)).clamp(0.0, 1.0)
                } else {
                    mean
                }
            })
            .collect();
        let mut labels = truth;
        corrupt_boundaries(&mut labels, size, spec.label_noise, &mut rng);
        return Ok(Subject {
            image: Tensor::new(image, &[1, 1, size, size])?,
            labels: LabelMap::new(1, size, size, labels)?,
            group: spec.name.clone(),
            id: id.into(),
            seed,
        });
    }
    Err(Error::Config(format!(
        "group {:?}: no subject with every tissue ≥ 1% after {MAX_ATTEMPTS} attempts (seed {seed})",
        spec.name
    )))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    pub spec: AgeGroupSpec,
    pub subjects: Vec<Subject>,
    pub split: GroupSplit,
}

impl Group {
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let subjects: Vec<&Subject> = indices
            .iter()
            .map(|&i| self.subjects.get(i).ok_or_else(|| Error::Config(format!("no subject {i}"))))
            .collect::<Result<_>>()?;
        subjects_batch(&subjects)
    }

    pub fn train_batch(&self) -> Result<Batch> {
        self.batch(&self.split.train)
    }

    pub fn val_batch(&self) -> Result<Batch> {
        self.batch(&self.split.val)
    }
}

pub fn subjects_batch(subjects: &[&Subject]) -> Result<Batch> {
    if subjects.is_empty() {
        return Err(Error::Config("empty subject list".into()));
    }
    let imgs: Vec<&Tensor> = subjects.iter().map(|s| &s.image).collect();
    let labels: Vec<&LabelMap> = subjects.iter().map(|s| &s.labels).collect();
    Batch::new(Tensor::concat(&imgs, 0)?, LabelMap::stack(&labels)?)
}

/// Three training groups and one unseen group (last).
#[derive(Clone, Debug, PartialEq)]
pub struct MetaPool {
    pub size: usize,
    pub seed: u64,
    pub groups: Vec<Group>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestSubject {
    id: String,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestGroup {
    spec: AgeGroupSpec,
    subjects: Vec<ManifestSubject>,
    split: GroupSplit,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    size: usize,
    seed: u64,
    groups: Vec<ManifestGroup>,
}

fn subject_seed(pool_seed: u64, group: usize, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(pool_seed);
    rng.set_stream(((group as u64) << 32) | index as u64);
    rng.next_u64()
}

/// Seeded shuffle, first 80% (rounded) to train, the rest to val.
pub fn split_indices(n: usize, seed: u64) -> GroupSplit {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let n_train = ((n as f64) * 0.8).round() as usize;
    let n_train = n_train.clamp(1, n - 1);
    let mut train = idx[..n_train].to_vec();
    let mut val = idx[n_train..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    GroupSplit { train, val }
}

impl MetaPool {
    pub fn train_groups(&self) -> &[Group] {
        &self.groups[..3]
    }

    pub fn test_group(&self) -> &Group {
        &self.groups[3]
    }

    pub fn group(&self, name: &str) -> Result<&Group> {
        self.groups
            .iter()
            .find(|g| g.spec.name == name)
            .ok_or_else(|| Error::Config(format!("no group named {name:?}")))
    }

    pub fn specs(&self) -> Vec<AgeGroupSpec> {
        self.groups.iter().map(|g| g.spec.clone()).collect()
    }

    /// Manifest JSON (pretty, stable key order).
    pub fn manifest_json(&self) -> String {
        let m = Manifest {
            version: POOL_VERSION,
            size: self.size,
            seed: self.seed,
            groups: self
                .groups
                .iter()
                .map(|g| ManifestGroup {
                    spec: g.spec.clone(),
                    subjects: g
                        .subjects
                        .iter()
                        .map(|s| ManifestSubject {
                            id: s.id.clone(),
                            seed: s.seed,
                        })
                        .collect(),
                    split: g.split.clone(),
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&m).expect("manifest serializes");
        s.push('\n');
        s
    }
}

/// Exactly three training specs plus one unseen spec; the unseen group must
/// not share a training group's tissue ordering and contrast.
pub fn build_pool(specs: &[AgeGroupSpec], size: usize, seed: u64) -> Result<MetaPool> {
    if specs.len() != 4 {
        return Err(Error::Config(format!(
            "a pool needs 3 training groups + 1 test group, got {} groups",
            specs.len()
        )));
    }
    for s in specs {
        s.validate()?;
    }
    for (i, a) in specs.iter().enumerate() {
        if specs[i + 1..].iter().any(|b| b.name == a.name) {
            return Err(Error::Config(format!("duplicate group name {:?}", a.name)));
        }
    }
    let test = &specs[3];
    if specs[..3].iter().any(|s| s.contrast == test.contrast) {
        return Err(Error::Config("the test group's contrast must differ from every training group".into()));
    }
    let mut groups = Vec::with_capacity(4);
    for (g, spec) in specs.iter().enumerate() {
        let subjects = (0..spec.subjects)
            .map(|i| generate_subject(spec, size, subject_seed(seed, g, i), &format!("s{i:03}")))
            .collect::<Result<Vec<_>>>()?;
        let split = split_indices(spec.subjects, subject_seed(seed, g, usize::MAX >> 32));
        groups.push(Group {
            spec: spec.clone(),
            subjects,
            split,
        });
    }
    Ok(MetaPool { size, seed, groups })
}

fn subject_paths(dir: &Path, group: &str, id: &str) -> (std::path::PathBuf, std::path::PathBuf) {
    let g = dir.join(group);
    (g.join(format!("{id}.img.dtns")), g.join(format!("{id}.lbl.dtns")))
}

/// Writes `manifest.json` and one image/label record pair per subject.
pub fn save_pool(pool: &MetaPool, dir: &Path) -> Result<()> {
    for g in &pool.groups {
        let gdir = dir.join(&g.spec.name);
        std::fs::create_dir_all(&gdir).map_err(|e| Error::io(&gdir, e))?;
        for s in &g.subjects {
            let (img, lbl) = subject_paths(dir, &g.spec.name, &s.id);
            dtns::save(&img, &s.image)?;
            let lt = s.labels.to_tensor();
            dtns::save(&lbl, &lt.reshape(&[s.labels.height, s.labels.width])?)?;
        }
    }
    let m = dir.join("manifest.json");
    dtns::write_atomic(&m, pool.manifest_json().as_bytes())?;
    Ok(())
}

pub fn load_pool(dir: &Path) -> Result<MetaPool> {
    let mpath = dir.join("manifest.json");
    let text = std::fs::read_to_string(&mpath).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(mpath.display().to_string()),
        _ => Error::io(&mpath, e),
    })?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    if m.version != POOL_VERSION {
        return Err(Error::format(&mpath, format!("pool version {} (expected {POOL_VERSION})", m.version)));
    }
    if m.groups.len() != 4 {
        return Err(Error::format(&mpath, format!("{} groups (expected 4)", m.groups.len())));
    }
    let mut groups = Vec::with_capacity(4);
    for mg in m.groups {
        mg.spec.validate()?;
        let n = mg.subjects.len();
        let in_range = mg.split.train.iter().chain(&mg.split.val).all(|&i| i < n);
        if !in_range {
            return Err(Error::format(&mpath, format!("group {:?}: split index out of range", mg.spec.name)));
        }
        let mut subjects = Vec::with_capacity(n);
        for ms in &mg.subjects {
            let (ip, lp) = subject_paths(dir, &mg.spec.name, &ms.id);
            let image = dtns::load(&ip)?;
            if image.shape() != [1, 1, m.size, m.size] {
                return Err(Error::format(&ip, format!("image of shape {:?}", image.shape())));
            }
            let lt = dtns::load(&lp)?;
            if lt.shape() != [m.size, m.size] {
                return Err(Error::format(&lp, format!("labels of shape {:?}", lt.shape())));
            }
            let labels = LabelMap::from_tensor(&lt).map_err(|e| Error::format(&lp, e.to_string()))?;
            labels.check_range(4).map_err(|e| Error::format(&lp, e.to_string()))?;
            subjects.push(Subject {
                image,
                labels,
                group: mg.spec.name.clone(),
                id: ms.id.clone(),
                seed: ms.seed,
            });
        }
        groups.push(Group {
            spec: mg.spec,
            subjects,
            split: mg.split,
        });
    }
    Ok(MetaPool {
        size: m.size,
        seed: m.seed,
        groups,
    })
}

/// Training view over some groups of a pool with on-the-fly augmentation.
pub struct PoolSource<'a> {
    pub pool: &'a MetaPool,
    pub groups: Vec<usize>,
    pub flips: bool,
    pub noise_sigma: f64,
}

impl<'a> PoolSource<'a> {
    /// The three training groups.
    pub fn training(pool: &'a MetaPool, flips: bool, noise_sigma: f64) -> Self {
        Self {
            pool,
            groups: vec![0, 1, 2],
            flips,
            noise_sigma,
        }
    }
}

impl BatchSource for PoolSource<'_> {
    fn num_datasets(&self) -> usize {
        self.groups.len()
    }

    fn sample(&self, dataset: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
        let g = self
            .groups
            .get(dataset)
            .and_then(|&g| self.pool.groups.get(g))
            .ok_or_else(|| Error::Config(format!("no dataset {dataset}")))?;
        let train = &g.split.train;
        let picks: Vec<usize> = (0..n).map(|_| train[rng.random_range(0..train.len())]).collect();
        g.batch(&picks)?.augment(rng, self.flips, self.noise_sigma)
    }

    fn validation(&self, dataset: usize) -> Result<Option<Batch>> {
        let g = &self.pool.groups[self.groups[dataset]];
        if g.split.val.is_empty() {
            return Ok(None);
        }
        Ok(Some(g.val_batch()?))
    }
}

/// Mean image intensity inside each tissue, `None` for absent tissues.
/// Accumulates offsets from the first value, so constant regions give their
/// value exactly.
pub fn tissue_means(subject: &Subject) -> [Option<f64>; 3] {
    let mut out = [None; 3];
    for (k, &c) in [CSF, GM, WM].iter().enumerate() {
        let mut vals = subject
            .image
            .data()
            .iter()
            .zip(&subject.labels.data)
            .filter(|(_, &l)| l == c)
            .map(|(v, _)| *v);
        if let Some(first) = vals.next() {
            let (s, n) = vals.fold((0.0, 1usize), |(s, n), v| (s + (v - first), n + 1));
            out[k] = Some(first + s / n as f64);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless(spec: AgeGroupSpec) -> AgeGroupSpec {
        AgeGroupSpec {
            noise_sigma: 0.0,
            warp: 0.0,
            ..spec
        }
    }

    #[test]
    fn noiseless_subject_is_piecewise_constant() {
        let spec = noiseless(AgeGroupSpec::infant_12m());
        let s = generate_subject(&spec, 32, 4, "s").unwrap();
        for (v, &l) in s.image.data().iter().zip(&s.labels.data) {
            let expected = if l == 0 { 0.0 } else { spec.contrast[l as usize - 1] };
            assert_eq!(*v, expected);
        }
        let means = tissue_means(&s);
        for k in 0..3 {
            assert_eq!(means[k].unwrap(), spec.contrast[k]);
        }
    }

    #[test]
    fn same_seed_same_subject_and_prevalence() {
        for spec in AgeGroupSpec::defaults() {
            for seed in 0..10 {
                let a = generate_subject(&spec, 32, seed, "s").unwrap();
                assert_eq!(a, generate_subject(&spec, 32, seed, "s").unwrap());
                assert!(prevalence_ok(&a.labels.data));
                assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn contrast_ordering_differs_between_groups() {
        let a = AgeGroupSpec::infant_12m();
        let b = AgeGroupSpec::infant_6m();
        for seed in 0..5 {
            let sa = tissue_means(&generate_subject(&a, 32, seed, "s").unwrap());
            let sb = tissue_means(&generate_subject(&b, 32, seed, "s").unwrap());
            assert!(sa[1].unwrap() > sa[2].unwrap());
            assert!(sb[1].unwrap() < sb[2].unwrap());
        }
    }

    #[test]
    fn atrophy_enlarges_csf() {
        let base = noiseless(AgeGroupSpec::toddler_24m());
        let atrophied = AgeGroupSpec { atrophy: 3.0, ..base.clone() };
        let h0 = generate_subject(&base, 32, 1, "s").unwrap().labels.histogram(4);
        let h1 = generate_subject(&atrophied, 32, 1, "s").unwrap().labels.histogram(4);
        assert!(h1[1] > h0[1] && h1[2] < h0[2]);
    }

    #[test]
    fn impossible_spec_fails_after_retries() {
        // extreme atrophy on a tiny image leaves no room for GM
        let spec = AgeGroupSpec {
            atrophy: 40.0,
            ..AgeGroupSpec::elderly()
        };
        let err = generate_subject(&spec, 8, 0, "s");
        assert!(err.is_err());
        let spec = AgeGroupSpec {
            contrast: [0.2, 0.5, 0.52],
            ..AgeGroupSpec::infant_12m()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn label_noise_only_touches_boundaries() {
        let clean = noiseless(AgeGroupSpec::infant_12m());
        let noisy = AgeGroupSpec {
            label_noise: 0.5,
            ..clean.clone()
        };
        let a = generate_subject(&clean, 32, 3, "s").unwrap();
        let b = generate_subject(&noisy, 32, 3, "s").unwrap();
        assert_eq!(a.image, b.image);
        let diffs = a.labels.data.iter().zip(&b.labels.data).filter(|(x, y)| x != y).count();
        assert!(diffs > 0);
        for y in 1..31 {
            for x in 1..31 {
                let i = y * 32 + x;
                if a.labels.data[i] != b.labels.data[i] {
                    let nb = [i - 32, i + 32, i - 1, i + 1];
                    assert!(nb.iter().any(|&j| a.labels.data[j] != a.labels.data[i]));
                }
            }
        }
    }

    fn small_specs() -> Vec<AgeGroupSpec> {
        AgeGroupSpec::defaults()
            .into_iter()
            .map(|s| AgeGroupSpec { subjects: 5, ..s })
            .collect()
    }

    #[test]
    fn split_arithmetic() {
        let s = split_indices(20, 3);
        assert_eq!((s.train.len(), s.val.len()), (16, 4));
        assert!(s.train.iter().all(|i| !s.val.contains(i)));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn pool_requires_three_plus_one() {
        let specs = small_specs();
        assert!(build_pool(&specs[..2], 16, 0).is_err());
        let mut dup = specs.clone();
        dup[3].contrast = dup[0].contrast;
        assert!(build_pool(&dup, 16, 0).is_err());
    }

    #[test]
    fn pool_round_trip_and_tamper_detection() {
        let pool = build_pool(&small_specs(), 16, 7).unwrap();
        assert_eq!(pool, build_pool(&pool.specs(), 16, 7).unwrap());
        let dir = tempfile::tempdir().unwrap();
        save_pool(&pool, dir.path()).unwrap();
        let loaded = load_pool(dir.path()).unwrap();
        assert_eq!(loaded, pool);
        for (a, b) in loaded.groups.iter().zip(&pool.groups) {
            for (x, y) in a.subjects.iter().zip(&b.subjects) {
                assert_eq!(x.labels.histogram(4), y.labels.histogram(4));
            }
        }

        let dir2 = tempfile::tempdir().unwrap();
        save_pool(&loaded, dir2.path()).unwrap();
        for entry in walk(dir.path()) {
            let rel = entry.strip_prefix(dir.path()).unwrap();
            assert_eq!(std::fs::read(&entry).unwrap(), std::fs::read(dir2.path().join(rel)).unwrap(), "{rel:?}");
        }

        let victim = dir.path().join("24m-like").join("s002.lbl.dtns");
        let mut bytes = std::fs::read(&victim).unwrap();
        bytes[0] = b'X';
        std::fs::write(&victim, bytes).unwrap();
        let err = load_pool(dir.path()).unwrap_err().to_string();
        assert!(err.contains("s002.lbl.dtns"), "{err}");
    }

    fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
        let mut out = vec![];
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn pool_source_samples_training_split_only() {
        let pool = build_pool(&small_specs(), 16, 1).unwrap();
        let src = PoolSource::training(&pool, false, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let train = pool.groups[1].split.train.clone();
        for _ in 0..10 {
            let b = src.sample(1, 2, &mut rng).unwrap();
            for k in 0..2 {
                let item = b.labels.item(k);
                assert!(train.iter().any(|&i| pool.groups[1].subjects[i].labels.data == item.data));
            }
        }
        assert_eq!(src.validation(0).unwrap().unwrap().len(), pool.groups[0].split.val.len());
    }
}
