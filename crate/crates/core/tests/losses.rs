use duometa::labels::LabelMap;
use duometa::losses::{ce_loss, dice_loss, inter_tissue_loss, intra_tissue_loss, IntraMode, TissueReps};
use duometa::tensorcore::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn labels(rng: &mut ChaCha8Rng, b: usize, s: usize) -> LabelMap {
    LabelMap::new(b, s, s, (0..b * s * s).map(|_| rng.random_range(0..4u8)).collect()).unwrap()
}

fn one_hot_logits(l: &LabelMap, margin: f64) -> Tensor {
    let (b, hw) = (l.batch, l.plane());
    let mut data = vec![0.0; b * 4 * hw];
    for i in 0..b {
        for p in 0..hw {
            data[(i * 4 + l.data[i * hw + p] as usize) * hw + p] = margin;
        }
    }
    Tensor::new(data, &[b, 4, l.height, l.width]).unwrap()
}

fn reps(rows: [Vec<f64>; 3], batch: usize) -> TissueReps {
    let c = rows[0].len() / batch;
    let t = |v: &Vec<f64>| Tensor::from_slice(v, &[batch, c]).unwrap();
    TissueReps {
        reps: vec![[t(&rows[0]), t(&rows[1]), t(&rows[2])]],
        valid: vec![[vec![true; batch], vec![true; batch], vec![true; batch]]],
    }
}

#[test]
fn cross_entropy_of_uniform_logits_is_log_c() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let l = labels(&mut rng, 2, 6);
    for bias in [0.0, 3.5, -7.0] {
        let v = ce_loss(&Tensor::full(&[2, 4, 6, 6], bias), &l).unwrap().item();
        assert!((v - 4f64.ln()).abs() < 1e-9, "{v}");
    }
}

#[test]
fn dice_of_near_perfect_prediction_is_small() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let l = labels(&mut rng, 2, 8);
    let v = dice_loss(&one_hot_logits(&l, 30.0), &l).unwrap().item();
    assert!((0.0..1e-3).contains(&v), "{v}");
    let ce = ce_loss(&one_hot_logits(&l, 30.0), &l).unwrap().item();
    assert!(ce < 1e-9);
}

#[test]
fn orthogonal_tissues_have_zero_inter_loss() {
    let r = reps([vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0], vec![0.0, 3.0, 0.0, 0.0, 0.0, 0.5], vec![0.0, 0.0, 0.7, 4.0, 0.0, 0.0]], 2);
    assert!(inter_tissue_loss(&r).unwrap().item().abs() < 1e-6);
}

#[test]
fn identical_tissues_have_minus_one_intra_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut row = || (0..8).map(|_| rng.random_range(0.1..2.0)).collect::<Vec<f64>>();
    let r = reps([row(), row(), row()], 2);
    for mode in [IntraMode::Batchmean, IntraMode::Positional] {
        let v = intra_tissue_loss(&r, &r, mode).unwrap().item();
        assert!((v + 1.0).abs() < 1e-6, "{mode:?}: {v}");
    }
}

#[test]
fn representation_losses_ignore_positive_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut row = || (0..12).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let a = reps([row(), row(), row()], 3);
    let b = reps([row(), row(), row()], 3);
    let inter = inter_tissue_loss(&a).unwrap().item();
    let intra = intra_tissue_loss(&a, &b, IntraMode::Batchmean).unwrap().item();
    for c in [0.5, 2.0, 10.0, 1e3] {
        let sa = a.scaled(c).unwrap();
        assert!((inter_tissue_loss(&sa).unwrap().item() - inter).abs() < 1e-6, "inter at {c}");
        let v = intra_tissue_loss(&sa, &b.scaled(c).unwrap(), IntraMode::Batchmean).unwrap().item();
        assert!((v - intra).abs() < 1e-6, "intra at {c}");
    }
}

#[test]
fn absent_tissue_contributes_nothing() {
    let mut r = reps([vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]], 1);
    // CSF–GM are parallel (cos 1) but GM is absent.
    r.valid[0][1] = vec![false];
    assert!(inter_tissue_loss(&r).unwrap().item().abs() < 1e-12);
}
