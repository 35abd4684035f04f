//! Shared test support: random instances for the finite-difference
//! gradient suite.

#![allow(dead_code)]

use l2l::losses::{self, LossConfig};
use l2l::probmaps::{partition_pixels, BinaryMask, Label, ProbMap};
use l2l::spm::{calibrate, fuse_with_weights, fusion_weights, SpmCoefficients};
use l2l::rple::Mlp;
use l2l::segnet::{Conditioning, ToyNet, ToyNetConfig};
use l2l::sesm::{self, FeatureMap, SemanticField, SesmStage, StageDims};
use l2l::simworld::{gen_sample, WorldConfig};
use l2l::tensorcore::gradcheck::{check_inputs, check_params, GradReport};
use l2l::tensorcore::{ParamId, ParamStore, Tape, Tensor, Var};
use l2l::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values at least `margin` away from zero, for ops with a kink at 0.
pub fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(margin..1.5);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Reduces any tensor to a scalar through a fixed random weighting, so every
/// output entry carries a distinct upstream gradient.
pub fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let mut r = rng(seed);
    let w = rand_tensor(&mut r, &shape, -1.0, 1.0);
    let wv = tape.leaf(&w);
    let p = tape.mul(x, wv)?;
    tape.sum(p)
}

pub struct Suite {
    pub name: &'static str,
    pub report: GradReport,
    pub instances: usize,
}

type OpCase = (&'static str, fn(&mut ChaCha8Rng) -> Vec<Tensor>, fn(&mut Tape, &[Var]) -> Result<Var>);

fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul", |r| vec![rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[4, 2], -1.0, 1.0)], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, 1)
        }),
        ("transpose", |r| vec![rand_tensor(r, &[3, 2], -1.0, 1.0)], |t, v| {
            let y = t.transpose(v[0])?;
            weighted_sum(t, y, 2)
        }),
        ("add", |r| vec![rand_tensor(r, &[5], -1.0, 1.0), rand_tensor(r, &[5], -1.0, 1.0)], |t, v| {
            let y = t.add(v[0], v[1])?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, 3)
        }),
        ("sub", |r| vec![rand_tensor(r, &[5], -1.0, 1.0), rand_tensor(r, &[5], -1.0, 1.0)], |t, v| {
            let y = t.sub(v[0], v[1])?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, 4)
        }),
        ("mul", |r| vec![rand_tensor(r, &[2, 3], -1.0, 1.0), rand_tensor(r, &[2, 3], -1.0, 1.0)], |t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y, 5)
        }),
        ("div", |r| vec![rand_tensor(r, &[4], -1.0, 1.0), rand_tensor(r, &[4], 0.5, 2.0)], |t, v| {
            let y = t.div(v[0], v[1])?;
            weighted_sum(t, y, 6)
        }),
        ("scale_add_scalar", |r| vec![rand_tensor(r, &[4], -1.0, 1.0)], |t, v| {
            let y = t.scale(v[0], -1.7)?;
            let y = t.add_scalar(y, 0.3)?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, 7)
        }),
        ("mul_scalar_var", |r| vec![rand_tensor(r, &[1], -1.0, 1.0), rand_tensor(r, &[2, 2], -1.0, 1.0)], |t, v| {
            let y = t.mul_scalar_var(v[0], v[1])?;
            weighted_sum(t, y, 8)
        }),
        ("add_bias", |r| vec![rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[4], -1.0, 1.0)], |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, 9)
        }),
        ("sigmoid", |r| vec![rand_tensor(r, &[6], -4.0, 4.0)], |t, v| {
            let y = t.sigmoid(v[0])?;
            weighted_sum(t, y, 10)
        }),
        ("relu", |r| vec![rand_away_from_zero(r, &[6], 1e-3)], |t, v| {
            let y = t.relu(v[0])?;
            weighted_sum(t, y, 11)
        }),
        ("log", |r| vec![rand_tensor(r, &[5], 0.2, 3.0)], |t, v| {
            let y = t.log(v[0])?;
            weighted_sum(t, y, 12)
        }),
        ("clamp", |r| {
            // Keep clear of the bounds so the difference quotient stays on one side.
            let n = 6;
            let data = (0..n)
                .map(|_| {
                    let v: f64 = r.random_range(-1.0..1.0);
                    if (v.abs() - 0.5).abs() < 1e-3 {
                        v * 0.9
                    } else {
                        v
                    }
                })
                .collect();
            vec![Tensor::new(&[n], data).unwrap()]
        }, |t, v| {
            let y = t.clamp(v[0], -0.5, 0.5)?;
            weighted_sum(t, y, 13)
        }),
        ("softmax_rows", |r| vec![rand_tensor(r, &[3, 4], -2.0, 2.0)], |t, v| {
            let y = t.softmax_rows(v[0])?;
            weighted_sum(t, y, 14)
        }),
        ("l2_normalize", |r| vec![rand_tensor(r, &[5], -1.0, 1.0)], |t, v| {
            let y = t.l2_normalize(v[0])?;
            weighted_sum(t, y, 15)
        }),
        ("sum_mean", |r| vec![rand_tensor(r, &[2, 3], -1.0, 1.0)], |t, v| {
            let sq = t.mul(v[0], v[0])?;
            let a = t.sum(sq)?;
            let b = t.mean(v[0])?;
            let b = t.mul(b, b)?;
            t.add(a, b)
        }),
        ("reshape", |r| vec![rand_tensor(r, &[2, 6], -1.0, 1.0)], |t, v| {
            let y = t.reshape(v[0], &[3, 4])?;
            let y = t.softmax_rows(y)?;
            weighted_sum(t, y, 16)
        }),
        ("conv2d", |r| vec![rand_tensor(r, &[4, 5, 2], -1.0, 1.0), rand_tensor(r, &[3 * 3 * 2, 3], -1.0, 1.0)], |t, v| {
            let y = t.conv2d(v[0], v[1], 3)?;
            weighted_sum(t, y, 17)
        }),
        ("avg_pool", |r| vec![rand_tensor(r, &[4, 4, 2], -1.0, 1.0)], |t, v| {
            let y = t.avg_pool(v[0], 2)?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, 18)
        }),
        ("upsample", |r| vec![rand_tensor(r, &[2, 2, 3], -1.0, 1.0)], |t, v| {
            let y = t.upsample(v[0], 2)?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, 19)
        }),
        ("concat_last", |r| vec![rand_tensor(r, &[2, 2, 1], -1.0, 1.0), rand_tensor(r, &[2, 2, 3], -1.0, 1.0)], |t, v| {
            let y = t.concat_last(v[0], v[1])?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, 20)
        }),
    ]
}

/// Every differentiable tensor op, `per_op` random instances each.
pub fn tensor_ops(per_op: usize, seed: u64) -> Suite {
    let mut r = rng(seed);
    let mut report = GradReport { max_rel_err: 0.0, checked: 0 };
    let mut instances = 0;
    for (name, gen, f) in op_cases() {
        for _ in 0..per_op {
            let inputs = gen(&mut r);
            let rep = check_inputs(&inputs, f).unwrap_or_else(|e| panic!("{name}: {e}"));
            report = report.merge(rep);
            instances += 1;
        }
    }
    Suite { name: "tensorcore", report, instances }
}

pub fn stage_setup(index: usize, seed: u64) -> (ParamStore, SesmStage) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let dims = StageDims { index, height: 2, width: 2, channels: 3 };
    let st = SesmStage::new(&mut store, "s", dims, 4, &mut r).unwrap();
    // Move gates and mixing away from their initial values so every path
    // carries gradient.
    for id in [st.gate_w, st.gate_b, st.alpha, st.beta] {
        let n = store.get(id).numel();
        let t = rand_tensor(&mut r, store.get(id).shape(), -1.0, 1.0);
        store.get_mut(id).data_mut()[..n].copy_from_slice(t.data());
    }
    (store, st)
}

/// Conditioning of one stage for every stage index, checked with respect to
/// all stage parameters and to the visual and text tokens.
pub fn sesm_blocks(per_stage: usize, seed: u64) -> Suite {
    let mut report = GradReport { max_rel_err: 0.0, checked: 0 };
    let mut instances = 0;
    for index in 1..=4 {
        for k in 0..per_stage {
            let s = seed + (index * 100 + k) as u64;
            let (store, st) = stage_setup(index, s);
            let mut r = rng(s ^ 0xabc);
            let v = rand_tensor(&mut r, &[4, 3], -1.0, 1.0);
            let text = rand_tensor(&mut r, &[2, 4], -1.0, 1.0);
            let prior = ProbMap::new(4, 4, (0..16).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
            let build = |tape: &mut Tape, params: &[Var], v: Var, text: Var| -> Result<Var> {
                let fm = FeatureMap { dims: st.dims, tokens: v };
                let sf = SemanticField { len: 2, tokens: text };
                let g = sesm::align_prior(tape, &prior, &st, params)?;
                let out = sesm::condition(tape, &fm, &sf, &g, &st, params)?;
                weighted_sum(tape, out.tokens, s)
            };
            let rep_p = check_params(&store, None, |tape, params| {
                let vv = tape.leaf(&v);
                let tv = tape.leaf(&text);
                build(tape, params, vv, tv)
            })
            .unwrap();
            let rep_x = check_inputs(&[v.clone(), text.clone()], |tape, xs| {
                let params = store.bind(tape, false);
                build(tape, &params, xs[0], xs[1])
            })
            .unwrap();
            report = report.merge(rep_p).merge(rep_x);
            instances += 1;
        }
    }
    Suite { name: "sesm", report, instances }
}

fn random_partition(r: &mut ChaCha8Rng, n: usize) -> (ProbMap, l2l::probmaps::PixelPartition) {
    let fused = ProbMap::new(n, n, (0..n * n).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
    let part = partition_pixels(&fused, 0.6, 0.3, 0).unwrap();
    (fused, part)
}

/// Weighted BCE, Dice and the mixed unsupervised loss with respect to the
/// prediction.
pub fn loss_fns(instances: usize, seed: u64) -> Suite {
    let mut r = rng(seed);
    let cfg = LossConfig::default();
    let mut report = GradReport { max_rel_err: 0.0, checked: 0 };
    for _ in 0..instances {
        let n = 4;
        let pred = rand_tensor(&mut r, &[n, n, 1], 0.05, 0.95);
        let gt = BinaryMask::new(n, n, (0..n * n).map(|_| r.random_bool(0.4)).collect()).unwrap();
        let ignore: Vec<bool> = (0..n * n).map(|_| r.random_bool(0.3)).collect();
        let (_, part) = random_partition(&mut r, n);
        let pseudo = part.pseudo_mask();
        let region: Vec<bool> = pseudo.values().to_vec();
        let rep = check_inputs(std::slice::from_ref(&pred), |t, v| {
            let a = losses::weighted_bce(t, v[0], &gt, &ignore, &cfg)?;
            let b = losses::dice_fg(t, v[0], &pseudo, &region, cfg.dice_eps)?;
            let c = losses::unsup_loss(t, v[0], &part, &cfg)?;
            let ab = t.add(a, b)?;
            t.add(ab, c)
        })
        .unwrap();
        report = report.merge(rep);
    }
    Suite { name: "losses", report, instances }
}

/// Actor (sigmoid head) and critic (linear head) parameter gradients.
pub fn agent_nets(instances: usize, seed: u64) -> Suite {
    let mut report = GradReport { max_rel_err: 0.0, checked: 0 };
    for k in 0..instances {
        let mut r = rng(seed + k as u64);
        let (sizes, head): (&[usize], bool) = if k % 2 == 0 { (&[6, 8, 8, 2], true) } else { (&[8, 8, 8, 1], false) };
        let mlp = Mlp::new(sizes, head, &mut r);
        let x = rand_tensor(&mut r, &[3, sizes[0]], 0.0, 1.0);
        let rep = check_params(&mlp.params, None, |t, vars| {
            let xv = t.leaf(&x);
            let y = mlp.forward(t, vars, xv)?;
            weighted_sum(t, y, seed)
        })
        .unwrap();
        report = report.merge(rep);
    }
    Suite { name: "actor/critic", report, instances }
}

pub fn small_net(conditioning: Conditioning, seed: u64) -> ToyNet {
    let cfg = ToyNetConfig { image_size: 16, widths: [3, 4, 4, 4], downsample: [2, 2, 2, 1], text_dim: 4, feature_dim: 3, conditioning, ..ToyNetConfig::default() };
    let mut net = ToyNet::new(cfg, seed).unwrap();
    // Non-zero gates so the conditioning path is exercised off its
    // symmetric starting point.
    let mut r = rng(seed ^ 0x51);
    let ids: Vec<ParamId> = net.params.ids().collect();
    for id in ids {
        if net.params.name(id).contains("gate") {
            let t = rand_tensor(&mut r, net.params.get(id).shape(), -0.5, 0.5);
            net.params.get_mut(id).data_mut().copy_from_slice(t.data());
        }
    }
    net
}

/// Supervised BCE of a small full network with a prior, checked on every
/// first-stage weight plus a random sample of the remaining entries.
pub fn full_net(instances: usize, seed: u64) -> Suite {
    let mut report = GradReport { max_rel_err: 0.0, checked: 0 };
    let world = WorldConfig { image_size: 16, max_blobs: 2, min_radius: 1, max_radius: 3, gap: 1, ..WorldConfig::default() };
    for k in 0..instances {
        let conditioning = if k % 2 == 0 { Conditioning::Sesm } else { Conditioning::Plain };
        let net = small_net(conditioning, seed + k as u64);
        let s = gen_sample(seed + 1000 + k as u64, &world).expect("small world sample");
        let mut r = rng(seed + 7 * k as u64);
        let prior = ProbMap::new(16, 16, (0..256).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
        let cfg = LossConfig::default();
        let mut coords = Vec::new();
        for id in net.params.ids() {
            let name = net.params.name(id);
            let n = net.params.get(id).numel();
            if name.starts_with("enc1") {
                coords.extend((0..n).map(|j| (id, j)));
            } else {
                coords.push((id, r.random_range(0..n)));
            }
        }
        let rep = check_params(&net.params, Some(&coords), |t, vars| {
            let out = net.forward_on(t, vars, &s.image, &s.instruction, Some(&prior))?;
            losses::sup_loss(t, out.probs, &s.gt_mask, &cfg)
        })
        .unwrap();
        report = report.merge(rep);
    }
    Suite { name: "full net", report, instances }
}

/// Direct Chebyshev-window search: a pixel is ignored when its raw label is
/// neither side, or when some window neighbour is FG and another is BG.
pub fn brute_partition(p: &ProbMap, tau_fg: f64, tau_bg: f64, r: usize) -> Vec<Label> {
    let (h, w) = (p.height() as isize, p.width() as isize);
    let raw = |y: isize, x: isize| {
        let v = p.get(y as usize, x as usize);
        if v >= tau_fg {
            Label::Fg
        } else if v <= tau_bg {
            Label::Bg
        } else {
            Label::Ignore
        }
    };
    let r = r as isize;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let (mut fg, mut bg) = (false, false);
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy < 0 || xx < 0 || yy >= h || xx >= w {
                        continue;
                    }
                    match raw(yy, xx) {
                        Label::Fg => fg = true,
                        Label::Bg => bg = true,
                        Label::Ignore => {}
                    }
                }
            }
            out.push(if r > 0 && fg && bg { Label::Ignore } else { raw(y, x) });
        }
    }
    out
}

/// Random map with smooth regions, so both thresholds and boundaries occur.
pub fn blobby_map(r: &mut ChaCha8Rng, n: usize) -> ProbMap {
    let centers: Vec<(f64, f64, f64)> =
        (0..3).map(|_| (r.random_range(0.0..n as f64), r.random_range(0.0..n as f64), r.random_range(2.0..8.0))).collect();
    let v = (0..n * n)
        .map(|i| {
            let (y, x) = ((i / n) as f64, (i % n) as f64);
            let s: f64 = centers.iter().map(|(cy, cx, rad)| (-((y - cy).powi(2) + (x - cx).powi(2)) / (rad * rad)).exp()).sum();
            (s.min(1.0) + r.random_range(-0.15..0.15)).clamp(0.0, 1.0)
        })
        .collect();
    ProbMap::new(n, n, v).unwrap()
}

/// Number of maps out of `count` where `partition_pixels` and the oracle
/// disagree on any pixel.
pub fn partition_mismatches(count: usize, n: usize, band: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    let mut bad = 0;
    for k in 0..count {
        let p = if k % 2 == 0 {
            blobby_map(&mut r, n)
        } else {
            ProbMap::new(n, n, (0..n * n).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()
        };
        let tau_bg = r.random_range(0.0..0.5);
        let tau_fg = r.random_range(tau_bg..1.0);
        let got = partition_pixels(&p, tau_fg, tau_bg, band).unwrap();
        if got.labels() != brute_partition(&p, tau_fg, tau_bg, band).as_slice() {
            bad += 1;
        }
    }
    bad
}

/// Worked SPM examples; returns the largest absolute deviation.
pub fn spm_examples_error() -> f64 {
    let c = SpmCoefficients::default();
    let one = |v: f64| ProbMap::filled(1, 1, v);
    let mut worst: f64 = 0.0;
    let lam = fusion_weights(&one(0.5), &one(1.0), &c).unwrap();
    worst = worst.max((lam.values()[0] - 0.65).abs());
    let half = ProbMap::filled(1, 1, 0.5);
    let mid = fuse_with_weights(&one(0.2), &one(0.8), &half, c.epsilon).unwrap();
    worst = worst.max((mid.values()[0] - 0.5).abs());
    let mut r = rng(3);
    let pw = ProbMap::new(4, 4, (0..16).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
    let mut pdv: Vec<f64> = (0..16).map(|_| r.random_range(0.0..1.0)).collect();
    pdv[0] = 1.0;
    pdv[1] = 0.0;
    let pd = ProbMap::new(4, 4, pdv).unwrap();
    let clamp = |v: f64| v.clamp(c.epsilon, 1.0 - c.epsilon);
    let ones = ProbMap::filled(4, 4, 1.0);
    let zeros = ProbMap::filled(4, 4, 0.0);
    let to_pd = fuse_with_weights(&pw, &pd, &ones, c.epsilon).unwrap();
    let to_pw = fuse_with_weights(&pw, &pd, &zeros, c.epsilon).unwrap();
    for i in 0..16 {
        worst = worst.max((to_pd.values()[i] - clamp(pd.values()[i])).abs());
        worst = worst.max((to_pw.values()[i] - clamp(pw.values()[i])).abs());
    }
    worst
}

/// Pixels (out of `n`) where calibration leaves the clamped input interval.
pub fn spm_between_violations(n: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    let c = SpmCoefficients::default();
    let side = 100;
    let mut bad = 0;
    for _ in 0..n.div_ceil(side * side) {
        let draw = |r: &mut ChaCha8Rng| {
            (0..side * side)
                .map(|_| match r.random_range(0..10) {
                    0 => 0.0,
                    1 => 1.0,
                    _ => r.random_range(0.0..=1.0),
                })
                .collect::<Vec<f64>>()
        };
        let pw = ProbMap::new(side, side, draw(&mut r)).unwrap();
        let pd = ProbMap::new(side, side, draw(&mut r)).unwrap();
        let out = calibrate(&pw, &pd, &c).unwrap();
        for ((a, b), o) in pw.values().iter().zip(pd.values()).zip(out.values()) {
            let a = a.clamp(c.epsilon, 1.0 - c.epsilon);
            let b = b.clamp(c.epsilon, 1.0 - c.epsilon);
            let tol = 1e-12;
            if *o < a.min(b) - tol || *o > a.max(b) + tol {
                bad += 1;
            }
        }
    }
    bad
}

/// Stationary bandit with reward `1 - |tau_fg - 0.8| - |tau_bg - 0.15|`;
/// returns the greedy action after `steps` interaction steps.
pub fn ddpg_diagnostic(seed: u64, steps: usize) -> l2l::rple::ThresholdAction {
    use l2l::rple::{RlState, RpleAgent, RpleConfig, Transition};
    let mut agent = RpleAgent::new(RpleConfig::default(), seed).unwrap();
    let s = RlState { mu: 0.3, sigma: 0.2, r_pos: 0.2, r_neg: 0.6, r_ign: 0.2, w_agree: 0.9 };
    for _ in 0..steps {
        let a = agent.act(&s, true).unwrap();
        let r = 1.0 - (a.tau_fg - 0.8).abs() - (a.tau_bg - 0.15).abs();
        agent.store(Transition { s, a, r, next: s });
        agent.update().unwrap();
    }
    agent.greedy(&s).unwrap()
}
