//! Multi-seed studies: the regularization and fine-tune-split ablations, and
//! the domain-shift premise check.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use duometa::config::ExperimentConfig;
use duometa::experiment::{evaluate_group, paired_gap, Variant};
use duometa::meta::{meta_train, Algorithm, MetaState};
use duometa::metrics::mean_std;
use duometa::phantoms::{build_pool, PoolSource};
use duometa::segnet::SegNet;
use duometa::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::commands::{eval, finetune, finetune_dir, gendata, metatrain, run_dir, BEST_FILE, FINETUNED_FILE};
use crate::io::{echo_config, write_json, write_text, JsonlWriter};

pub fn parse_variants(s: &str) -> Result<Vec<Variant>> {
    let mut out = Vec::new();
    for c in s.chars().filter(|c| !c.is_whitespace() && *c != ',') {
        let v: Variant = c.to_string().parse()?;
        if !out.contains(&v) {
            out.push(v);
        }
    }
    if out.is_empty() {
        return Err(Error::Config("no variants selected".into()));
    }
    out.sort_by_key(|v| v.letter());
    Ok(out)
}

/// Runs `work(i)` for `0..n` on up to `jobs` threads; results keep index
/// order, so the output does not depend on `jobs`.
pub fn parallel_map<T: Send>(n: usize, jobs: usize, work: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = work(i);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every index visited"))
        .collect()
}

/// Seed-specific copy of the config: training seed `seed`, pool seed offset
/// by it, pool and runs under `out`.
pub fn seed_config(cfg: &ExperimentConfig, out: &Path, seed: u64) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.seed = seed;
    c.pool.seed = cfg.pool.seed.wrapping_add(seed);
    c.pool.path = out.join(format!("pool_seed{seed}")).display().to_string();
    c.out_dir = out.display().to_string();
    c
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub variant: Variant,
    pub best_t: u64,
    pub best_val_loss: f64,
    pub diverged: Option<String>,
    /// Mean tissue Dice of the meta-learned head before any fine-tuning.
    pub zero_shot_dice: f64,
    /// Mean tissue Dice after one-shot fine-tuning of `n` decoder blocks,
    /// indexed by `n`.
    pub dice_by_layers: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub description: String,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub zero_shot_mean: f64,
    /// Seed-mean Dice per number of fine-tuned decoder blocks.
    pub by_layers: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    /// Decoder blocks fine-tuned for the main comparison.
    pub ft_layers: usize,
    pub variants: Vec<VariantSummary>,
    /// Paired seed-mean differences, e.g. ("E-B", 0.01).
    pub gaps: Vec<(String, f64)>,
    pub runs: Vec<RunResult>,
}

impl AblationReport {
    pub fn variant(&self, v: Variant) -> Option<&VariantSummary> {
        self.variants.iter().find(|s| s.variant == v)
    }

    pub fn gap(&self, a: Variant, b: Variant) -> Option<f64> {
        Some(paired_gap(&self.variant(a)?.per_seed, &self.variant(b)?.per_seed))
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "one-shot mean tissue Dice over seeds {:?} (fine-tuning {} decoder block(s))\n",
            self.seeds, self.ft_layers
        );
        s += &format!("{:<3} {:<26} {:>16} {:>10}", "", "variant", "dice", "zero-shot");
        let k = self.variants.first().map_or(0, |v| v.by_layers.len());
        for n in 0..k {
            s += &format!(" {:>8}", format!("ft n={n}"));
        }
        s.push('\n');
        for v in &self.variants {
            s += &format!(
                "{:<3} {:<26} {:>7.4} ± {:<6.4} {:>10.4}",
                v.variant.letter(),
                v.description,
                v.mean,
                v.std,
                v.zero_shot_mean
            );
            for d in &v.by_layers {
                s += &format!(" {d:>8.4}");
            }
            s.push('\n');
        }
        for (name, g) in &self.gaps {
            s += &format!("gap {name}: {g:+.4}\n");
        }
        s
    }
}

fn summarize(cfg: &ExperimentConfig, variants: &[Variant], runs: Vec<RunResult>) -> AblationReport {
    let n = cfg.finetune.n_upsample_layers;
    let summaries: Vec<VariantSummary> = variants
        .iter()
        .map(|&v| {
            let mine: Vec<&RunResult> = runs.iter().filter(|r| r.variant == v).collect();
            let per_seed: Vec<f64> = mine.iter().map(|r| r.dice_by_layers[n]).collect();
            let (mean, std) = mean_std(&per_seed).unwrap_or((f64::NAN, f64::NAN));
            let zs: Vec<f64> = mine.iter().map(|r| r.zero_shot_dice).collect();
            let k = mine.first().map_or(0, |r| r.dice_by_layers.len());
            let by_layers = (0..k)
                .map(|j| mine.iter().map(|r| r.dice_by_layers[j]).sum::<f64>() / mine.len() as f64)
                .collect();
            VariantSummary {
                variant: v,
                description: v.describe().into(),
                per_seed,
                mean,
                std,
                zero_shot_mean: mean_std(&zs).map_or(f64::NAN, |x| x.0),
                by_layers,
            }
        })
        .collect();
    let mut report = AblationReport {
        seeds: cfg.seeds.clone(),
        ft_layers: n,
        variants: summaries,
        gaps: vec![],
        runs,
    };
    use Variant::*;
    for (a, b) in [(E, B), (B, A), (E, A), (C, B), (D, B)] {
        if let Some(g) = report.gap(a, b) {
            report.gaps.push((format!("{}-{}", a.letter(), b.letter()), g));
        }
    }
    report
}

fn run_seed(cfg: &ExperimentConfig, out: &Path, variants: &[Variant], seed: u64) -> Result<Vec<RunResult>> {
    let scfg = seed_config(cfg, out, seed);
    gendata(&scfg, Path::new(&scfg.pool.path), true)?;
    let mut results = Vec::new();
    for &v in variants {
        let t0 = Instant::now();
        let mut vcfg = scfg.clone();
        vcfg.variant = v;
        let rdir = run_dir(&vcfg);
        let summary = metatrain(&vcfg, &rdir, false, None)?;
        let best = rdir.join(BEST_FILE);
        let zero_shot = eval(&vcfg, Some(&best), &rdir.join("zero_shot"), false)?.mean_dice;
        let mut dice = Vec::new();
        for n in 0..vcfg.net.scales {
            let mut fcfg = vcfg.clone();
            fcfg.finetune.n_upsample_layers = n;
            let fdir = finetune_dir(&fcfg);
            finetune(&fcfg, &best, &fdir)?;
            dice.push(eval(&fcfg, Some(&fdir.join(FINETUNED_FILE)), &fdir, false)?.mean_dice);
        }
        eprintln!(
            "seed {seed} variant {}: best val {:.4} at t={}, dice {:.4} ({:.0}s)",
            v.letter(),
            summary.best_val_loss,
            summary.best_t,
            dice[cfg.finetune.n_upsample_layers],
            t0.elapsed().as_secs_f64()
        );
        results.push(RunResult {
            seed,
            variant: v,
            best_t: summary.best_t,
            best_val_loss: summary.best_val_loss,
            diverged: summary.diverged,
            zero_shot_dice: zero_shot,
            dice_by_layers: dice,
        });
    }
    Ok(results)
}

/// gendata → metatrain → finetune (every split) → eval for each variant and
/// seed; writes `results.jsonl`, `report.json` and `report.txt` into `out`.
pub fn run_ablations(cfg: &ExperimentConfig, out: &Path, variants: &[Variant], jobs: usize) -> Result<AblationReport> {
    cfg.validate()?;
    if cfg.seeds.is_empty() {
        return Err(Error::Config("seeds must not be empty".into()));
    }
    crate::io::ensure_dir(out)?;
    echo_config(out, cfg)?;
    let per_seed = parallel_map(cfg.seeds.len(), jobs, |i| run_seed(cfg, out, variants, cfg.seeds[i]))?;
    let runs: Vec<RunResult> = per_seed.into_iter().flatten().collect();
    let mut log = JsonlWriter::create(&out.join("results.jsonl"))?;
    for r in &runs {
        log.write(r)?;
    }
    log.flush()?;
    let report = summarize(cfg, variants, runs);
    write_json(&out.join("report.json"), &report)?;
    write_text(&out.join("report.txt"), &report.render())?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftResult {
    pub seed: u64,
    pub in_group: f64,
    pub shifted: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainShiftReport {
    pub train_group: String,
    pub shifted_group: String,
    pub results: Vec<ShiftResult>,
    pub mean_in_group: f64,
    pub mean_shifted: f64,
    pub mean_drop: f64,
}

impl DomainShiftReport {
    pub fn render(&self) -> String {
        let mut s = format!(
            "trained on {}, tested in-group and on {} (no fine-tuning)\n",
            self.train_group, self.shifted_group
        );
        for r in &self.results {
            s += &format!(
                "seed {:>3}: in-group {:.4}  shifted {:.4}  drop {:+.4}\n",
                r.seed,
                r.in_group,
                r.shifted,
                r.in_group - r.shifted
            );
        }
        s += &format!(
            "mean: in-group {:.4}  shifted {:.4}  drop {:+.4}\n",
            self.mean_in_group, self.mean_shifted, self.mean_drop
        );
        s
    }
}

/// The first training group whose GM/WM ordering is the reverse of group 0's.
pub fn inverted_group(cfg: &ExperimentConfig) -> Result<usize> {
    let c0 = cfg.pool.groups[0].contrast;
    (1..3)
        .find(|&g| {
            let c = cfg.pool.groups[g].contrast;
            (c[1] - c[2]).signum() != (c0[1] - c0[2]).signum()
        })
        .ok_or_else(|| Error::Config("no training group inverts the first group's GM/WM contrast".into()))
}

/// Plain training on group 0 alone, then Dice on group 0's held-out split
/// versus the inverted-contrast group's held-out split.
pub fn domain_shift(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<DomainShiftReport> {
    cfg.validate()?;
    let shifted = inverted_group(cfg)?;
    let net = SegNet::new(cfg.net.clone())?;
    crate::io::ensure_dir(out)?;
    echo_config(out, cfg)?;
    let results = parallel_map(cfg.seeds.len(), jobs, |i| {
        let seed = cfg.seeds[i];
        let pool = build_pool(&cfg.pool.groups, cfg.net.image_size, cfg.pool.seed.wrapping_add(seed))?;
        let source = PoolSource {
            pool: &pool,
            groups: vec![0],
            flips: cfg.augment.flips,
            noise_sigma: cfg.augment.noise_sigma,
        };
        let state = MetaState::new(&net, &cfg.train, seed)?;
        let o = meta_train(&net, &source, &cfg.train, Algorithm::Joint, state, &mut |_| Ok(()))?;
        let (theta, phi) = (&o.best.theta, &o.best.phi);
        let fp = format!("domain-shift seed {seed}");
        Ok(ShiftResult {
            seed,
            in_group: evaluate_group(&net, &pool.groups[0], theta, phi, &fp)?.mean_dice,
            shifted: evaluate_group(&net, &pool.groups[shifted], theta, phi, &fp)?.mean_dice,
        })
    })?;
    let n = results.len() as f64;
    let mean_in_group = results.iter().map(|r| r.in_group).sum::<f64>() / n;
    let mean_shifted = results.iter().map(|r| r.shifted).sum::<f64>() / n;
    let report = DomainShiftReport {
        train_group: cfg.pool.groups[0].name.clone(),
        shifted_group: cfg.pool.groups[shifted].name.clone(),
        results,
        mean_in_group,
        mean_shifted,
        mean_drop: mean_in_group - mean_shifted,
    };
    write_json(&out.join("domain_shift.json"), &report)?;
    write_text(&out.join("domain_shift.txt"), &report.render())?;
    Ok(report)
}
