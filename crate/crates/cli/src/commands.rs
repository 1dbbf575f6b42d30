//! One function per subcommand. Each writes its artifacts plus an echo of
//! the config into its output directory and returns a summary.

use std::path::{Path, PathBuf};
use std::time::Instant;

use duometa::checkpoint::{model_checkpoint, model_parts, restore_state, state_checkpoint, Checkpoint, Header};
use duometa::config::ExperimentConfig;
use duometa::experiment::{adapt, held_out_items, Variant};
use duometa::meta::{meta_train, MetaState, TrainConfig, TrainEvent};
use duometa::metrics::{evaluate, evaluate_predictions, EvalReport};
use duometa::phantoms::{build_pool, load_pool, save_pool, AgeGroupSpec, MetaPool, PoolSource};
use duometa::segnet::SegNet;
use duometa::tensorcore::ParamSet;
use duometa::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::io::{echo_config, file_sha256, sha256_hex, truncate_jsonl, write_json, write_text, JsonlWriter};
use crate::{ablation, gradcheck, Command, EXIT_NUMERICAL, EXIT_OK};

pub const STATE_FILE: &str = "state.ckpt";
pub const BEST_FILE: &str = "best.ckpt";
pub const FINETUNED_FILE: &str = "finetuned.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const VAL_LOG: &str = "val_log.jsonl";
pub const FINETUNE_LOG: &str = "finetune_log.jsonl";

/// `<out_dir>/<variant>/seed<seed>`.
pub fn run_dir(cfg: &ExperimentConfig) -> PathBuf {
    Path::new(&cfg.out_dir)
        .join(cfg.variant.letter().to_string())
        .join(format!("seed{}", cfg.seed))
}

pub fn finetune_dir(cfg: &ExperimentConfig) -> PathBuf {
    run_dir(cfg).join(format!("ft_n{}", cfg.finetune.n_upsample_layers))
}

pub fn dispatch(cmd: &Command, mut cfg: ExperimentConfig) -> Result<i32> {
    match cmd {
        Command::Gendata { out, force, groups } => {
            if let Some(p) = groups {
                let text = std::fs::read_to_string(p).map_err(|e| match e.kind() {
                    std::io::ErrorKind::NotFound => Error::Missing(p.display().to_string()),
                    _ => Error::io(p, e),
                })?;
                cfg.pool.groups = serde_json::from_str::<Vec<AgeGroupSpec>>(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            }
            let out = out.clone().unwrap_or_else(|| PathBuf::from(&cfg.pool.path));
            let s = gendata(&cfg, &out, *force)?;
            println!("pool written to {}", out.display());
            for g in &s.groups {
                println!("  {:<14} {:>3} subjects  train {:>3}  val {:>3}", g.name, g.subjects, g.train, g.val);
            }
            println!("manifest sha256 {}", s.manifest_sha256);
            Ok(EXIT_OK)
        }
        Command::Metatrain {
            out,
            variant,
            hypergrad_mode,
            episodes,
            resume,
            stop_after,
        } => {
            if let Some(v) = variant {
                cfg.variant = *v;
            }
            if let Some(m) = hypergrad_mode {
                cfg.train.hypergrad_mode = *m;
            }
            if let Some(e) = episodes {
                cfg.train.episodes = *e;
            }
            let out = out.clone().unwrap_or_else(|| run_dir(&cfg));
            let t0 = Instant::now();
            let s = metatrain(&cfg, &out, *resume, *stop_after)?;
            println!(
                "variant {} seed {}: {} episodes, best val seg loss {:.5} at t={} (initial {:.5}) in {:.1}s",
                s.variant.letter(),
                s.seed,
                s.episodes_run,
                s.best_val_loss,
                s.best_t,
                s.initial_val,
                t0.elapsed().as_secs_f64()
            );
            if s.stopped {
                println!("stopped at t={}; continue with --resume", s.episodes_run);
            }
            match &s.diverged {
                Some(msg) => {
                    eprintln!("error: training diverged ({msg}); kept {}", out.join(BEST_FILE).display());
                    Ok(EXIT_NUMERICAL)
                }
                None => Ok(EXIT_OK),
            }
        }
        Command::Finetune {
            ckpt,
            out,
            shots,
            ft_layers,
            steps,
            variant,
        } => {
            if let Some(v) = variant {
                cfg.variant = *v;
            }
            if let Some(s) = shots {
                cfg.finetune.shots = *s;
            }
            if let Some(n) = ft_layers {
                cfg.finetune.n_upsample_layers = *n;
            }
            if let Some(s) = steps {
                cfg.finetune.steps = *s;
            }
            let ckpt = ckpt.clone().unwrap_or_else(|| run_dir(&cfg).join(BEST_FILE));
            let out = out.clone().unwrap_or_else(|| finetune_dir(&cfg));
            let s = finetune(&cfg, &ckpt, &out)?;
            println!(
                "fine-tuned {} layer(s) on {:?} for {} steps: loss {:.5} -> {:.5}; wrote {}",
                s.n_upsample_layers,
                s.shots,
                s.steps,
                s.first_loss.unwrap_or(f64::NAN),
                s.last_loss.unwrap_or(f64::NAN),
                out.join(FINETUNED_FILE).display()
            );
            Ok(EXIT_OK)
        }
        Command::Eval {
            ckpt,
            out,
            oracle,
            ft_layers,
            variant,
        } => {
            if let Some(v) = variant {
                cfg.variant = *v;
            }
            if let Some(n) = ft_layers {
                cfg.finetune.n_upsample_layers = *n;
            }
            let ckpt = if *oracle {
                None
            } else {
                Some(ckpt.clone().unwrap_or_else(|| finetune_dir(&cfg).join(FINETUNED_FILE)))
            };
            let out = out.clone().unwrap_or_else(|| finetune_dir(&cfg));
            let r = eval(&cfg, ckpt.as_deref(), &out, *oracle)?;
            print!("{}", r.table());
            Ok(EXIT_OK)
        }
        Command::Gradcheck { out } => {
            let r = gradcheck::run(&cfg)?;
            print!("{}", r.render());
            if let Some(dir) = out {
                echo_config(dir, &cfg)?;
                write_json(&dir.join("gradcheck.json"), &r)?;
            }
            Ok(if r.passed() { EXIT_OK } else { EXIT_NUMERICAL })
        }
        Command::DomainShift { out, jobs } => {
            let out = out.clone().unwrap_or_else(|| Path::new(&cfg.out_dir).join("domain_shift"));
            let r = ablation::domain_shift(&cfg, &out, jobs.unwrap_or(1))?;
            print!("{}", r.render());
            Ok(EXIT_OK)
        }
        Command::RunPaperAblations { out, jobs, variants } => {
            let variants = ablation::parse_variants(variants)?;
            let out = out.clone().unwrap_or_else(|| Path::new(&cfg.out_dir).join("ablations"));
            let r = ablation::run_ablations(&cfg, &out, &variants, *jobs)?;
            print!("{}", r.render());
            Ok(EXIT_OK)
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupSummary {
    pub name: String,
    pub subjects: usize,
    pub train: usize,
    pub val: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GendataSummary {
    pub manifest_sha256: String,
    pub groups: Vec<GroupSummary>,
}

fn dir_is_empty(dir: &Path) -> Result<bool> {
    match std::fs::read_dir(dir) {
        Ok(mut it) => Ok(it.next().is_none()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(true),
        Err(e) => Err(Error::io(dir, e)),
    }
}

pub fn gendata(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<GendataSummary> {
    cfg.validate()?;
    if !dir_is_empty(out)? {
        if !force {
            return Err(Error::Config(format!("{} exists and is not empty (use --force)", out.display())));
        }
        // only ever delete something that looks like a pool
        if !out.join("manifest.json").is_file() {
            return Err(Error::Config(format!(
                "{} is not empty and holds no pool manifest; refusing to replace it",
                out.display()
            )));
        }
        std::fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    let pool = build_pool(&cfg.pool.groups, cfg.net.image_size, cfg.pool.seed)?;
    crate::io::ensure_dir(out)?;
    save_pool(&pool, out)?;
    echo_config(out, cfg)?;
    Ok(GendataSummary {
        manifest_sha256: sha256_hex(pool.manifest_json().as_bytes()),
        groups: pool
            .groups
            .iter()
            .map(|g| GroupSummary {
                name: g.spec.name.clone(),
                subjects: g.subjects.len(),
                train: g.split.train.len(),
                val: g.split.val.len(),
            })
            .collect(),
    })
}

pub fn open_pool(cfg: &ExperimentConfig) -> Result<MetaPool> {
    let pool = load_pool(Path::new(&cfg.pool.path))?;
    if pool.size != cfg.net.image_size {
        return Err(Error::Config(format!(
            "pool images are {0}×{0} but net.image_size is {1}",
            pool.size, cfg.net.image_size
        )));
    }
    Ok(pool)
}

/// Rejects parameter sets whose names or shapes differ from the net's.
pub fn check_compatible(net: &SegNet, theta: &ParamSet, head: &ParamSet) -> Result<()> {
    let (t0, h0) = net.init(0)?;
    for (want, got, what) in [(&t0, theta, "extractor"), (&h0, head, "head")] {
        let same = want.len() == got.len()
            && want
                .iter()
                .zip(got.iter())
                .all(|((a, x), (b, y))| a == b && x.shape() == y.shape());
        if !same {
            return Err(Error::Config(format!("checkpoint {what} does not match the configured network")));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetatrainSummary {
    pub variant: Variant,
    pub seed: u64,
    pub episodes_run: u64,
    pub best_t: u64,
    pub best_val_loss: f64,
    pub initial_val: f64,
    pub diverged: Option<String>,
    /// True when `stop_after` ended the run before the schedule did.
    pub stopped: bool,
}

#[derive(Serialize)]
struct ValRecord {
    t: u64,
    val_loss: f64,
    is_best: bool,
}

/// Trains `cfg.variant` into `out`: `state.ckpt` (resumable), `best.ckpt`
/// (extractor plus head initialization), per-episode and validation logs.
/// `stop_after` ends the run at the first checkpoint with `t ≥ stop_after`
/// without changing the learning-rate schedule, as an interruption would.
pub fn metatrain(cfg: &ExperimentConfig, out: &Path, resume: bool, stop_after: Option<u64>) -> Result<MetatrainSummary> {
    cfg.validate()?;
    let pool = open_pool(cfg)?;
    let net = SegNet::new(cfg.net.clone())?;
    let variant = cfg.variant;
    let tcfg = TrainConfig {
        loss: variant.loss(&cfg.train.loss),
        ..cfg.train.clone()
    };
    let (state, mut log, mut val) = if resume {
        let state = restore_state(&Checkpoint::load(&out.join(STATE_FILE))?)?;
        check_compatible(&net, &state.theta, &state.phi)?;
        if state.seed != cfg.seed {
            return Err(Error::Config(format!(
                "checkpoint was trained with seed {} but the config says {}",
                state.seed, cfg.seed
            )));
        }
        // drop records written after the checkpoint so the logs continue seamlessly
        let t = state.t;
        truncate_jsonl(&out.join(TRAIN_LOG), |v| v["t"].as_u64().is_some_and(|x| x < t))?;
        truncate_jsonl(&out.join(VAL_LOG), |v| v["t"].as_u64().is_some_and(|x| x <= t))?;
        (
            state,
            JsonlWriter::append(&out.join(TRAIN_LOG))?,
            JsonlWriter::append(&out.join(VAL_LOG))?,
        )
    } else {
        (
            MetaState::new(&net, &tcfg, cfg.seed)?,
            JsonlWriter::create(&out.join(TRAIN_LOG))?,
            JsonlWriter::create(&out.join(VAL_LOG))?,
        )
    };
    echo_config(out, cfg)?;
    let source = PoolSource::training(&pool, cfg.augment.flips, cfg.augment.noise_sigma);
    let note = format!("variant {}", variant.letter());
    let mut stopped: Option<MetatrainSummary> = None;
    let mut hook = |e: TrainEvent<'_>| -> Result<()> {
        match e {
            TrainEvent::Episode(trace) => log.write(trace),
            TrainEvent::Checkpoint { state, val_loss, is_best } => {
                log.flush()?;
                val.write(&ValRecord {
                    t: state.t,
                    val_loss,
                    is_best,
                })?;
                val.flush()?;
                state_checkpoint(state)?.save(&out.join(STATE_FILE))?;
                if is_best {
                    let header = Header {
                        t: state.t,
                        seed: state.seed,
                        val_loss: Some(val_loss),
                        note: Some(note.clone()),
                        ..Header::default()
                    };
                    model_checkpoint("model", &state.theta, &state.phi, header).save(&out.join(BEST_FILE))?;
                }
                if stop_after.is_some_and(|s| state.t >= s && state.t < tcfg.episodes) {
                    let best = state.best.as_ref().expect("validated before stopping");
                    stopped = Some(MetatrainSummary {
                        variant,
                        seed: state.seed,
                        episodes_run: state.t,
                        best_t: best.t,
                        best_val_loss: best.val_loss,
                        initial_val: state.initial_val.unwrap_or(f64::NAN),
                        diverged: None,
                        stopped: true,
                    });
                    return Err(Error::Config("stopped".into()));
                }
                Ok(())
            }
        }
    };
    let result = meta_train(&net, &source, &tcfg, variant.algorithm(), state, &mut hook);
    drop(hook);
    log.flush()?;
    val.flush()?;
    if let Some(summary) = stopped {
        write_json(&out.join("summary.json"), &summary)?;
        return Ok(summary);
    }
    let outcome = result?;
    let summary = MetatrainSummary {
        variant,
        seed: cfg.seed,
        episodes_run: outcome.state.t,
        best_t: outcome.best.t,
        best_val_loss: outcome.best.val_loss,
        initial_val: outcome.initial_val,
        diverged: outcome.diverged,
        stopped: false,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub group: String,
    pub shots: Vec<String>,
    pub n_upsample_layers: usize,
    pub steps: usize,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
}

#[derive(Serialize)]
struct StepRecord {
    step: usize,
    loss: f64,
}

/// Adapts the head of `ckpt` on `cfg.finetune.shots` seeded subjects of the
/// unseen group and writes `finetuned.ckpt` into `out`.
pub fn finetune(cfg: &ExperimentConfig, ckpt: &Path, out: &Path) -> Result<FinetuneSummary> {
    cfg.validate()?;
    let (theta, phi) = model_parts(&Checkpoint::load(ckpt)?)?;
    let net = SegNet::new(cfg.net.clone())?;
    check_compatible(&net, &theta, &phi)?;
    let pool = open_pool(cfg)?;
    let group = pool.test_group();
    let (outcome, picked) = adapt(&net, group, &theta, &phi, &cfg.finetune, &cfg.train.loss, cfg.seed)?;
    let shots: Vec<String> = picked.iter().map(|&i| group.subjects[i].id.clone()).collect();
    echo_config(out, cfg)?;
    let mut log = JsonlWriter::create(&out.join(FINETUNE_LOG))?;
    for (step, &loss) in outcome.losses.iter().enumerate() {
        log.write(&StepRecord { step, loss })?;
    }
    log.flush()?;
    let header = Header {
        seed: cfg.seed,
        note: Some(format!("{} shots {}", group.spec.name, shots.join(","))),
        ..Header::default()
    };
    model_checkpoint("finetuned", &theta, &outcome.omega, header).save(&out.join(FINETUNED_FILE))?;
    let summary = FinetuneSummary {
        group: group.spec.name.clone(),
        shots,
        n_upsample_layers: cfg.finetune.n_upsample_layers,
        steps: cfg.finetune.steps,
        first_loss: outcome.losses.first().copied(),
        last_loss: outcome.losses.last().copied(),
    };
    write_json(&out.join("finetune_summary.json"), &summary)?;
    Ok(summary)
}

/// Scores a checkpoint (or, with `oracle`, the references themselves) on
/// the unseen group's held-out split; writes `eval.json` and `eval.txt`.
pub fn eval(cfg: &ExperimentConfig, ckpt: Option<&Path>, out: &Path, oracle: bool) -> Result<EvalReport> {
    cfg.validate()?;
    let pool = open_pool(cfg)?;
    let group = pool.test_group();
    let report = if oracle {
        let items = held_out_items(group);
        let ids: Vec<String> = items.iter().map(|i| i.0.clone()).collect();
        let gts: Vec<_> = items.into_iter().map(|i| i.2).collect();
        evaluate_predictions(&ids, &gts, &gts, cfg.eval.spacing, "oracle")?
    } else {
        let path = ckpt.ok_or_else(|| Error::Config("eval needs a checkpoint or --oracle".into()))?;
        let (theta, head) = model_parts(&Checkpoint::load(path)?)?;
        let net = SegNet::new(cfg.net.clone())?;
        check_compatible(&net, &theta, &head)?;
        let fp = file_sha256(path)?;
        evaluate(&net, &theta, &head, &held_out_items(group), cfg.eval.spacing, &fp)?
    };
    echo_config(out, cfg)?;
    write_text(&out.join("eval.json"), &report.to_json())?;
    write_text(&out.join("eval.txt"), &report.table())?;
    Ok(report)
}
