use l2l::losses::{unsup_loss, LossConfig};
use l2l::probmaps::{partition_pixels, ProbMap};
use l2l::simworld::{make_corpus, Corpus, NoiseMix, WorldConfig};
use l2l::tensorcore::{Tape, Tensor};
use l2l::trainer::{train, track_pseudo_quality, RunConfig, Variant, METRIC_HEADER};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn corpus(seed: u64) -> Corpus {
    make_corpus(4, 8, 4, seed, &WorldConfig::default(), &NoiseMix::default()).unwrap()
}

fn cfg(variant: Variant) -> RunConfig {
    RunConfig { variant, epochs: 3, warmup_epochs: 1, ..RunConfig::default() }
}

fn weights(o: &l2l::trainer::TrainOutcome) -> Vec<f64> {
    o.net.params.iter().flat_map(|(_, t)| t.data().to_vec()).collect()
}

#[test]
fn training_is_deterministic() {
    let c = corpus(1);
    let a = train(&cfg(Variant::L2lFull), &c).unwrap();
    let b = train(&cfg(Variant::L2lFull), &c).unwrap();
    assert_eq!(a.epochs, b.epochs);
    assert_eq!(a.rl_log, b.rl_log);
    assert_eq!(weights(&a), weights(&b));
    assert_eq!(a.epochs.len(), 3);
    assert!(!a.rl_log.is_empty());
}

#[test]
fn supervised_ignores_unlabeled_content() {
    let c = corpus(2);
    let mut other = c.clone();
    for item in &mut other.unlabeled {
        item.prior = ProbMap::filled(item.prior.height(), item.prior.width(), 0.5);
        item.sample.image.iter_mut().for_each(|v| *v = 1.0 - *v);
    }
    let a = train(&cfg(Variant::Supervised), &c).unwrap();
    let b = train(&cfg(Variant::Supervised), &other).unwrap();
    assert_eq!(weights(&a), weights(&b));
    assert!(a.epochs.iter().all(|r| r.unsup_loss.is_none() && r.quality.is_none()));
}

#[test]
fn warmup_epochs_skip_unlabeled_loss() {
    let o = train(&cfg(Variant::FixmatchFixed), &corpus(3)).unwrap();
    assert!(o.epochs[0].unsup_loss.is_none());
    assert!(o.epochs[1].unsup_loss.is_some());
    assert_eq!(track_pseudo_quality(&o.epochs).len(), 3);
    assert!(o.agent.is_none());
}

#[test]
fn every_variant_trains() {
    let c = corpus(4);
    for v in Variant::ALL {
        let o = train(&cfg(v), &c).unwrap();
        assert_eq!(o.agent.is_some(), v.uses_rple(), "{v}");
        assert!((0.0..=1.0).contains(&o.final_eval.mean_iou));
        assert_eq!(o.final_eval.per_sample.len(), 4);
        let rec = o.epochs[2].record();
        assert_eq!(rec.len(), METRIC_HEADER.len());
    }
}

#[test]
fn empty_labeled_split_is_rejected() {
    let mut c = corpus(5);
    c.labeled.clear();
    assert!(train(&cfg(Variant::L2lFull), &c).is_err());
    let mut c = corpus(5);
    c.unlabeled.clear();
    assert!(train(&cfg(Variant::FixmatchFixed), &c).is_err());
    assert!(train(&cfg(Variant::Supervised), &c).is_ok());
}

#[test]
fn unsup_loss_is_flip_equivariant() {
    // Loss in the weak (flipped) frame equals the loss after mapping both the
    // prediction and the partition back to the original frame.
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let (h, w) = (6, 7);
    let pred: Vec<f64> = (0..h * w).map(|_| r.random_range(0.01..0.99)).collect();
    let fused = ProbMap::new(h, w, (0..h * w).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
    let part = partition_pixels(&fused, 0.6, 0.3, 1).unwrap();
    let cfg = LossConfig::default();
    let loss = |p: &[f64], part: &l2l::probmaps::PixelPartition| {
        let mut t = Tape::new();
        let v = t.leaf(&Tensor::new(&[h, w, 1], p.to_vec()).unwrap());
        let l = unsup_loss(&mut t, v, part, &cfg).unwrap();
        t.scalar(l)
    };
    let flipped_pred = ProbMap::new(h, w, pred.clone()).unwrap().flip_horizontal();
    let a = loss(&pred, &part);
    let b = loss(flipped_pred.values(), &part.flip_horizontal());
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn pseudo_targets_receive_no_gradient() {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let (h, w) = (4, 4);
    let fused_t = Tensor::new(&[h, w, 1], (0..16).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
    let mut t = Tape::new();
    let fused = t.leaf(&fused_t.clone().requires_grad(true));
    let pred = t.leaf(&Tensor::new(&[h, w, 1], (0..16).map(|_| r.random_range(0.1..0.9)).collect()).unwrap().requires_grad(true));
    let map = ProbMap::new(h, w, t.value(fused).to_vec()).unwrap();
    let part = partition_pixels(&map, 0.6, 0.3, 0).unwrap();
    let l = unsup_loss(&mut t, pred, &part, &LossConfig::default()).unwrap();
    t.backward(l).unwrap();
    assert!(t.grad(fused).is_none_or(|g| g.iter().all(|v| *v == 0.0)));
    assert!(t.grad(pred).is_some_and(|g| g.iter().any(|v| *v != 0.0)));
}
