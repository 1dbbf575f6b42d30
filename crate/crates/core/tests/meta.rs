use duometa::checkpoint::{restore_state, state_checkpoint, Checkpoint};
use duometa::experiment::{adapt, evaluate_group, train_variant, AugmentConfig, Variant};
use duometa::losses::LossWeights;
use duometa::meta::{mean_seg_loss, mil_outer_step, FineTuneConfig, Nesterov, TrainConfig, TrainEvent};
use duometa::phantoms::{build_pool, load_pool, save_pool, AgeGroupSpec, MetaPool};
use duometa::segnet::{NetConfig, SegNet};
use duometa::tensorcore::{ParamSet, Tape, Tensor};

fn tiny() -> SegNet {
    SegNet::new(NetConfig {
        scales: 2,
        base_width: 2,
        image_size: 16,
        ..NetConfig::default()
    })
    .unwrap()
}

fn pool() -> MetaPool {
    build_pool(&AgeGroupSpec::defaults(), 16, 3).unwrap()
}

fn cfg() -> TrainConfig {
    TrainConfig {
        episodes: 4,
        checkpoint_every: 2,
        momentum: 0.9,
        loss: LossWeights::for_scales(2),
        ..TrainConfig::default()
    }
}

/// Perturbs φ so ω* differs from it.
fn nudged(p: &ParamSet, by: f64) -> ParamSet {
    p.map(|_, t| Tensor::new(t.data().iter().enumerate().map(|(i, v)| v + by * ((i % 7) as f64 - 3.0)).collect(), t.shape()).unwrap())
}

#[test]
fn mil_applies_the_gradient_at_omega_star_to_phi() {
    let net = tiny();
    let pool = pool();
    let (theta, phi) = net.init(1).unwrap();
    let omega_star = nudged(&phi, 1e-2);
    let a = pool.train_groups()[0].train_batch().unwrap();
    let b = pool.train_groups()[1].train_batch().unwrap();
    let w = LossWeights::for_scales(2);
    let lr = 0.05;

    // Independent reference: differentiate the seg loss at ω* directly.
    let tape = Tape::new();
    let ws = omega_star.attach(&tape);
    let l = mean_seg_loss(&net, &theta, &ws, &[&a, &b], &w).unwrap();
    let (g, _) = ws.grad(&l, Default::default()).unwrap();
    let expect = phi.map(|name, p| {
        let gi = g.get(name).unwrap();
        Tensor::new(p.data().iter().zip(gi.data()).map(|(x, d)| x - lr * d).collect(), p.shape()).unwrap()
    });

    let (next, _, _) =
        mil_outer_step(&phi, &omega_star, &mut Nesterov::plain(), lr, |wp| mean_seg_loss(&net, &theta, wp, &[&a, &b], &w)).unwrap();
    assert!(next.bit_eq(&expect));
}

#[test]
fn mil_with_a_flat_outer_loss_only_decays() {
    let net = tiny();
    let (_, phi) = net.init(2).unwrap();
    let omega_star = nudged(&phi, 0.1);
    let (lr, wd, mu) = (0.05, 1e-3, 0.9);
    let mut opt = Nesterov::new(mu, wd);
    let (next, g, _) = mil_outer_step(&phi, &omega_star, &mut opt, lr, |wp| {
        let first = wp.iter().next().unwrap().1;
        Ok(first.sum_all()?.scale(0.0)?.shift(1.0)?)
    })
    .unwrap();
    assert_eq!(g.norm(), 0.0);
    // first Nesterov step: d = wd·φ, buf = d, update (1 + μ)·d
    let decay = 1.0 - lr * (1.0 + mu) * wd;
    for ((_, p), (_, q)) in phi.iter().zip(next.iter()) {
        for (x, y) in p.data().iter().zip(q.data()) {
            assert!((x * decay - y).abs() <= 1e-15 * x.abs().max(1.0));
        }
    }
    let mut no_decay = Nesterov::new(mu, 0.0);
    let (same, _, _) = mil_outer_step(&phi, &omega_star, &mut no_decay, lr, |wp| {
        Ok(wp.iter().next().unwrap().1.sum_all()?.scale(0.0)?)
    })
    .unwrap();
    assert!(same.bit_eq(&phi));
}

#[test]
fn training_is_reproducible_and_resumable_through_checkpoints() {
    let net = tiny();
    let pool = pool();
    let c = cfg();
    let full = train_variant(&net, &pool, &c, AugmentConfig::default(), Variant::E, 4, &mut |_| Ok(())).unwrap();
    let again = train_variant(&net, &pool, &c, AugmentConfig::default(), Variant::E, 4, &mut |_| Ok(())).unwrap();
    assert_eq!(full.traces, again.traces);
    assert!(full.state.theta.bit_eq(&again.state.theta));

    // stop at the t = 2 checkpoint (same schedule), round-trip the state
    // through bytes, continue
    let mut saved = None;
    let stopped = train_variant(&net, &pool, &c, AugmentConfig::default(), Variant::E, 4, &mut |ev| match ev {
        TrainEvent::Checkpoint { state, .. } if state.t == 2 => {
            saved = Some(state.clone());
            Err(duometa::Error::Config("stop".into()))
        }
        _ => Ok(()),
    });
    assert!(stopped.is_err());
    let half = saved.unwrap();
    let bytes = state_checkpoint(&half).unwrap().encode().unwrap();
    let state = restore_state(&Checkpoint::decode(&bytes, "mem".as_ref()).unwrap()).unwrap();
    let ec = TrainConfig { loss: Variant::E.loss(&c.loss), ..c.clone() };
    let source = duometa::phantoms::PoolSource::training(&pool, true, 0.0);
    let rest = duometa::meta::meta_train(&net, &source, &ec, Variant::E.algorithm(), state, &mut |_| Ok(())).unwrap();
    assert!(rest.state.theta.bit_eq(&full.state.theta));
    assert!(rest.state.phi.bit_eq(&full.state.phi));
    assert_eq!(rest.traces[..], full.traces[2..]);
    assert_eq!(rest.best.val_loss.to_bits(), full.best.val_loss.to_bits());
}

#[test]
fn variants_differ_only_where_configured() {
    let base = LossWeights::for_scales(3);
    let (a, b, c, d, e) = (
        Variant::A.loss(&base),
        Variant::B.loss(&base),
        Variant::C.loss(&base),
        Variant::D.loss(&base),
        Variant::E.loss(&base),
    );
    assert_eq!((a.beta, a.gamma), (0.0, 0.0));
    assert_eq!((b.beta, b.gamma), (0.0, 0.0));
    assert_eq!((c.beta, c.gamma), (base.beta, 0.0));
    assert_eq!((d.beta, d.gamma), (0.0, base.gamma));
    assert_eq!((e.beta, e.gamma), (base.beta, base.gamma));
    assert_ne!(Variant::A.algorithm(), Variant::B.algorithm());
}

#[test]
fn pool_round_trips_and_one_shot_pipeline_runs() {
    let net = tiny();
    let pool = pool();
    let dir = tempfile::tempdir().unwrap();
    save_pool(&pool, dir.path()).unwrap();
    let back = load_pool(dir.path()).unwrap();
    assert_eq!(back.manifest_json(), pool.manifest_json());
    for (g, h) in pool.train_groups().iter().zip(back.train_groups()) {
        assert_eq!(g.train_batch().unwrap().images.data(), h.train_batch().unwrap().images.data());
    }

    let out = train_variant(&net, &back, &cfg(), AugmentConfig::default(), Variant::B, 0, &mut |_| Ok(())).unwrap();
    let ft = FineTuneConfig {
        n_upsample_layers: 1,
        steps: 3,
        ..FineTuneConfig::default()
    };
    let (o, shots) = adapt(&net, back.test_group(), &out.best.theta, &out.best.phi, &ft, &cfg().loss, 0).unwrap();
    assert_eq!(shots.len(), 1);
    // the frozen part of the head is untouched
    let part = net.partition_head(&out.best.phi, 1).unwrap();
    for name in &part.frozen {
        assert!(o.omega.get(name).unwrap().data() == out.best.phi.get(name).unwrap().data(), "{name}");
    }
    let r = evaluate_group(&net, back.test_group(), &out.best.theta, &o.omega, "t").unwrap();
    assert!(r.mean_dice > 0.0 && r.mean_dice <= 1.0);
    assert_eq!(r.subjects, back.test_group().split.val.len());
}
