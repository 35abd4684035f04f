use l2l::losses::{dice_fg, fixmatch_partition, fixmatch_select, sup_loss, total_loss, unsup_loss, weighted_bce, LossConfig};
use l2l::probmaps::{BinaryMask, Label, PixelPartition, ProbMap};
use l2l::tensorcore::{Tape, Tensor, Var};
use proptest::prelude::*;

fn pred(tape: &mut Tape, v: &[f64]) -> Var {
    tape.leaf(&Tensor::new(&[1, v.len(), 1], v.to_vec()).unwrap())
}

fn mask(v: &[bool]) -> BinaryMask {
    BinaryMask::new(1, v.len(), v.to_vec()).unwrap()
}

fn bce_oracle(p: &[f64], y: &[bool], ignore: &[bool], w_fg: f64, w_bg: f64) -> f64 {
    let mut s = 0.0;
    let mut n = 0;
    for i in 0..p.len() {
        if ignore[i] {
            continue;
        }
        let q = p[i].clamp(1e-7, 1.0 - 1e-7);
        s += if y[i] { -w_fg * q.ln() } else { -w_bg * (1.0 - q).ln() };
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

#[test]
fn bce_examples() {
    let cfg = LossConfig::default();
    let mut t = Tape::new();
    let p = pred(&mut t, &[0.5]);
    let l = weighted_bce(&mut t, p, &mask(&[true]), &[false], &cfg).unwrap();
    assert!((t.scalar(l) - 1.039721).abs() < 1e-6);

    let l = weighted_bce(&mut t, p, &mask(&[true]), &[true], &cfg).unwrap();
    assert_eq!(t.scalar(l), 0.0);

    let p1 = pred(&mut t, &[1.0]);
    let l = weighted_bce(&mut t, p1, &mask(&[true]), &[false], &cfg).unwrap();
    assert!((t.scalar(l) - 1.5e-7).abs() < 1e-12);
}

#[test]
fn bce_with_unit_weights_is_textbook() {
    let cfg = LossConfig { w_fg: 1.0, w_bg: 1.0, ..LossConfig::default() };
    let mut t = Tape::new();
    let p = pred(&mut t, &[0.9, 0.2]);
    let l = weighted_bce(&mut t, p, &mask(&[true, false]), &[false, false], &cfg).unwrap();
    let want = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
    assert!((t.scalar(l) - want).abs() < 1e-12);
}

#[test]
fn dice_examples() {
    let mut t = Tape::new();
    let ones = pred(&mut t, &[1.0, 1.0, 1.0]);
    let y = mask(&[true, true, true]);
    let l = dice_fg(&mut t, ones, &y, &[true, true, true], 1e-6).unwrap();
    assert!(t.scalar(l).abs() < 1e-6);

    let zeros = pred(&mut t, &[0.0, 0.0, 0.0]);
    let l = dice_fg(&mut t, zeros, &y, &[true, true, true], 1e-6).unwrap();
    assert!((t.scalar(l) - (1.0 - 1e-6 / (3.0 + 1e-6))).abs() < 1e-12);

    let l = dice_fg(&mut t, zeros, &y, &[false, false, false], 1e-6).unwrap();
    assert_eq!(t.scalar(l), 0.0);
}

#[test]
fn unsup_examples() {
    use Label::*;
    let part = PixelPartition::from_labels(1, 4, vec![Fg, Bg, Ignore, Fg], 0.7, 0.2, 0).unwrap();
    let cfg = LossConfig::default();
    let mut t = Tape::new();
    let perfect = pred(&mut t, &[1.0, 0.0, 0.5, 1.0]);
    let l = unsup_loss(&mut t, perfect, &part, &cfg).unwrap();
    assert!(t.scalar(l) < 1e-6);

    let ignored = PixelPartition::from_labels(1, 4, vec![Ignore; 4], 0.7, 0.2, 0).unwrap();
    let l = unsup_loss(&mut t, perfect, &ignored, &cfg).unwrap();
    assert_eq!(t.scalar(l), 0.0);

    let bce_only = LossConfig { alpha_mix: 1.0, ..cfg };
    let p = pred(&mut t, &[0.6, 0.3, 0.5, 0.2]);
    let u = unsup_loss(&mut t, p, &part, &bce_only).unwrap();
    let want = bce_oracle(&[0.6, 0.3, 0.5, 0.2], &[true, false, false, true], &[false, false, true, false], 1.5, 0.5);
    assert!((t.scalar(u) - want).abs() < 1e-12);
}

#[test]
fn total_loss_examples() {
    let cfg = LossConfig::default();
    let mut t = Tape::new();
    let s = t.constant(&[1], vec![0.3]).unwrap();
    let u = t.constant(&[1], vec![0.2]).unwrap();
    let l = total_loss(&mut t, s, u, &cfg).unwrap();
    assert!((t.scalar(l) - 0.5).abs() < 1e-15);
    let sup_only = LossConfig { lambda_u: 0.0, ..cfg };
    let l = total_loss(&mut t, s, u, &sup_only).unwrap();
    assert!((t.scalar(l) - 0.3).abs() < 1e-15);
}

#[test]
fn fixmatch_examples() {
    let pw = ProbMap::new(1, 2, vec![0.71, 0.69]).unwrap();
    let (pseudo, sel) = fixmatch_select(&pw, 0.7, 0.7);
    assert_eq!(pseudo.values(), &[true, false]);
    assert_eq!(sel.values(), &[true, false]);
    let (_, all) = fixmatch_select(&pw, 0.0, 0.7);
    assert_eq!(all.count(), 2);
    let part = fixmatch_partition(&pw, 0.5, 0.7);
    assert_eq!(part.labels(), &[Label::Fg, Label::Bg]);
}

#[test]
fn no_gradient_through_targets() {
    // Targets are plain data, so only the prediction leaf receives gradient.
    let cfg = LossConfig::default();
    let mut t = Tape::new();
    let p = t.leaf(&Tensor::new(&[1, 2, 1], vec![0.3, 0.6]).unwrap().requires_grad(true));
    let l = sup_loss(&mut t, p, &mask(&[true, false]), &cfg).unwrap();
    t.backward(l).unwrap();
    let g = t.grad(p).unwrap();
    assert!((g[0] - (-1.5 / 0.3 / 2.0)).abs() < 1e-12);
    assert!((g[1] - (0.5 / 0.4 / 2.0)).abs() < 1e-12);
}

proptest! {
    #[test]
    fn losses_nonnegative_and_match_oracle(
        v in proptest::collection::vec((0.0f64..=1.0, any::<bool>(), any::<bool>()), 1..30),
    ) {
        let cfg = LossConfig::default();
        let p: Vec<f64> = v.iter().map(|x| x.0).collect();
        let y: Vec<bool> = v.iter().map(|x| x.1).collect();
        let ign: Vec<bool> = v.iter().map(|x| x.2).collect();
        let mut t = Tape::new();
        let pv = pred(&mut t, &p);
        let b = weighted_bce(&mut t, pv, &mask(&y), &ign, &cfg).unwrap();
        prop_assert!(t.scalar(b) >= 0.0);
        prop_assert!((t.scalar(b) - bce_oracle(&p, &y, &ign, 1.5, 0.5)).abs() < 1e-10);
        let region: Vec<bool> = y.iter().zip(&ign).map(|(a, b)| *a && !*b).collect();
        let d = dice_fg(&mut t, pv, &mask(&y), &region, 1e-6).unwrap();
        prop_assert!(t.scalar(d) >= -1e-12);
    }
}
