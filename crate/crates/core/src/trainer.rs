//! Closed training loop: supervised warm-up, then weak-view prediction,
//! prior calibration, threshold selection, strong-view consistency loss and
//! agent updates, for the full method and every ablation.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{self, LossConfig};
use crate::metrics::{mean, pseudo_quality};
use crate::probmaps::{iou, partition_pixels, PixelPartition, ProbMap};
use crate::rple::{self, build_state, clip_reward, instructional_gain, quality, stability_penalty, GainMode, QualityMetrics, RlLogRow, RpleAgent, RpleConfig, ThresholdAction, Transition};
use crate::segnet::{Conditioning, ToyNet, ToyNetConfig};
use crate::simworld::{derive_seed, strong_augment, weak_augment, Corpus, SynthSample, UnlabeledItem};
use crate::spm::{calibrate, SpmCoefficients};
use crate::tensorcore::{Sgd, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Supervised,
    FixmatchFixed,
    L2lFull,
    L2lNoSesm,
    L2lNoRple,
    L2lNoSpm,
    FixedTauSweep,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Supervised,
        Variant::FixmatchFixed,
        Variant::L2lFull,
        Variant::L2lNoSesm,
        Variant::L2lNoRple,
        Variant::L2lNoSpm,
        Variant::FixedTauSweep,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Supervised => "supervised",
            Variant::FixmatchFixed => "fixmatch_fixed",
            Variant::L2lFull => "l2l_full",
            Variant::L2lNoSesm => "l2l_no_sesm",
            Variant::L2lNoRple => "l2l_no_rple",
            Variant::L2lNoSpm => "l2l_no_spm",
            Variant::FixedTauSweep => "fixed_tau_sweep",
        }
    }

    pub fn uses_unlabeled(&self) -> bool {
        *self != Variant::Supervised
    }

    pub fn uses_spm(&self) -> bool {
        matches!(self, Variant::L2lFull | Variant::L2lNoSesm | Variant::L2lNoRple | Variant::FixedTauSweep)
    }

    pub fn uses_sesm(&self) -> bool {
        matches!(self, Variant::L2lFull | Variant::L2lNoRple | Variant::L2lNoSpm | Variant::FixedTauSweep)
    }

    pub fn uses_rple(&self) -> bool {
        matches!(self, Variant::L2lFull | Variant::L2lNoSesm | Variant::L2lNoSpm)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub seed: u64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_power: f64,
    /// Samples per labeled batch and per unlabeled batch.
    pub batch: usize,
    /// Chebyshev radius of the boundary ignore band.
    pub band_radius: usize,
    /// Thresholds used when the agent is disabled.
    pub fixed_tau_fg: f64,
    pub fixed_tau_bg: f64,
    pub sweep_taus: Vec<f64>,
    pub eval_threshold: f64,
    /// Probability of hiding the calibrated prior from the strong forward.
    pub prior_dropout: f64,
    /// Keep the SESM mixing scalars at their initial values.
    pub fixed_mixing: bool,
    pub net: ToyNetConfig,
    pub spm: SpmCoefficients,
    pub rple: RpleConfig,
    pub loss: LossConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: Variant::L2lFull,
            seed: 22,
            epochs: 8,
            warmup_epochs: 2,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            lr_power: 0.9,
            batch: 4,
            band_radius: 1,
            fixed_tau_fg: 0.7,
            fixed_tau_bg: 0.2,
            sweep_taus: vec![0.5, 0.6, 0.7, 0.8, 0.9],
            eval_threshold: 0.5,
            prior_dropout: 0.0,
            fixed_mixing: false,
            net: ToyNetConfig::default(),
            spm: SpmCoefficients::default(),
            rple: RpleConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) || self.lr_power < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "lr must be positive, momentum in [0, 1), lr_power and weight_decay non-negative".into(),
            ));
        }
        let fixed = rple::project_action(self.fixed_tau_fg, self.fixed_tau_bg);
        if fixed.tau_fg != self.fixed_tau_fg || fixed.tau_bg != self.fixed_tau_bg {
            return Err(Error::Config("fixed thresholds must satisfy 0 <= tau_bg <= tau_fg - 0.05 <= 1".into()));
        }
        if self.sweep_taus.iter().any(|t| !(0.05..=1.0).contains(t)) {
            return Err(Error::Config("sweep thresholds must lie in [0.05, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.eval_threshold) || !(0.0..=1.0).contains(&self.prior_dropout) {
            return Err(Error::Config("eval_threshold and prior_dropout must lie in [0, 1]".into()));
        }
        self.net.validate()?;
        self.spm.validate()?;
        self.rple.validate()?;
        self.loss.validate()
    }

    /// Network configuration with the conditioning implied by the variant.
    pub fn net_config(&self) -> ToyNetConfig {
        let conditioning = match (self.variant.uses_sesm(), self.fixed_mixing) {
            (false, _) => Conditioning::Plain,
            (true, false) => Conditioning::Sesm,
            (true, true) => Conditioning::SesmFixed,
        };
        ToyNetConfig {
            conditioning,
            ..self.net.clone()
        }
    }
}

/// Per-epoch pseudo-label quality against ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QualityRow {
    pub epoch: usize,
    pub prior_iou_raw: f64,
    pub prior_iou_cal: f64,
    pub sel_acc: f64,
    pub sel_cov: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub mean_iou: f64,
    pub sup_loss: f64,
    pub unsup_loss: Option<f64>,
    pub tau_fg_mean: Option<f64>,
    pub tau_bg_mean: Option<f64>,
    pub quality: Option<QualityRow>,
    pub reward_mean: Option<f64>,
}

pub const METRIC_HEADER: [&str; 12] = [
    "epoch",
    "split",
    "mean_iou",
    "sup_loss",
    "unsup_loss",
    "tau_fg_mean",
    "tau_bg_mean",
    "sel_acc",
    "sel_cov",
    "prior_iou_raw",
    "prior_iou_cal",
    "reward_mean",
];

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

impl EpochRow {
    pub fn record(&self) -> Vec<String> {
        let q = self.quality;
        vec![
            self.epoch.to_string(),
            "test".into(),
            format!("{:.6}", self.mean_iou),
            format!("{:.6}", self.sup_loss),
            opt(self.unsup_loss),
            opt(self.tau_fg_mean),
            opt(self.tau_bg_mean),
            opt(q.map(|q| q.sel_acc)),
            opt(q.map(|q| q.sel_cov)),
            opt(q.map(|q| q.prior_iou_raw)),
            opt(q.map(|q| q.prior_iou_cal)),
            opt(self.reward_mean),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: ToyNet,
    pub agent: Option<RpleAgent>,
    pub epochs: Vec<EpochRow>,
    pub rl_log: Vec<RlLogRow>,
    pub final_eval: EvalResult,
}

pub fn track_pseudo_quality(rows: &[EpochRow]) -> Vec<QualityRow> {
    rows.iter().filter_map(|r| r.quality).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub mean_iou: f64,
    pub per_sample: Vec<f64>,
}

/// Worker count: `L2L_THREADS` if set, else the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("L2L_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `f` over `items` on up to `worker_threads()` scoped threads,
/// preserving order.
pub fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let threads = worker_threads().min(items.len()).max(1);
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| scope.spawn(move || c.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Per-sample IoU of the prediction binarized at `threshold`, with no
/// augmentation and a neutral prior.
pub fn evaluate(net: &ToyNet, test: &[SynthSample], threshold: f64) -> Result<EvalResult> {
    let per_sample = par_map(test, |s| {
        let (p, _) = net.predict(&s.image, &s.instruction, None)?;
        iou(&p.binarize(threshold), &s.gt_mask)
    })?;
    Ok(EvalResult {
        mean_iou: mean(&per_sample).unwrap_or(0.0),
        per_sample,
    })
}

const STREAM_NET: u64 = 1;
const STREAM_AGENT: u64 = 2;
const STREAM_ORDER: u64 = 3;
const STREAM_WEAK: u64 = 4;
const STREAM_STRONG: u64 = 5;
const STREAM_DROPOUT: u64 = 6;
const STREAM_LABELED: u64 = 7;

#[derive(Default)]
struct EpochAcc {
    sup: Vec<f64>,
    unsup: Vec<f64>,
    tau_fg: Vec<f64>,
    tau_bg: Vec<f64>,
    rewards: Vec<f64>,
    raw_iou: Vec<f64>,
    cal_iou: Vec<f64>,
    selected: usize,
    correct: usize,
    pixels: usize,
}

/// Everything the loop derives from one unlabeled sample before the loss.
struct PseudoLabel {
    weak: SynthSample,
    fused: ProbMap,
    part: PixelPartition,
}

struct Loop<'a> {
    cfg: &'a RunConfig,
    net: ToyNet,
    agent: Option<RpleAgent>,
    sgd: Sgd,
    prev_action: ThresholdAction,
    prev_quality: Option<QualityMetrics>,
    rl_log: Vec<RlLogRow>,
    rl_step: u64,
}

impl Loop<'_> {
    fn divergence(&self, epoch: usize, step: usize, e: Error) -> Error {
        match e {
            Error::NonFinite(op) => Error::Divergence {
                epoch,
                step,
                detail: format!("non-finite value produced by {op}"),
            },
            other => other,
        }
    }

    fn sup_step(&mut self, s: &SynthSample, scale: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.net.params.bind(&mut tape, true);
        let out = self.net.forward_on(&mut tape, &vars, &s.image, &s.instruction, None)?;
        let loss = losses::sup_loss(&mut tape, out.probs, &s.gt_mask, &self.cfg.loss)?;
        let scaled = tape.scale(loss, scale)?;
        tape.backward(scaled)?;
        self.net.params.accumulate_grads(&tape, &vars);
        Ok(tape.scalar(loss))
    }

    /// Weak view, calibration and selection for one sample. `learn` turns on
    /// exploration and transition storage.
    fn pseudo_label(&mut self, item: &UnlabeledItem, weak_seed: u64, learn: bool, acc: &mut EpochAcc) -> Result<PseudoLabel> {
        let cfg = self.cfg;
        let (weak, t) = weak_augment(&item.sample, weak_seed);
        let (pw, features) = self.net.predict(&weak.image, &weak.instruction, None)?;
        let pd = t.to_weak(&item.prior);
        let fused = if cfg.variant.uses_spm() {
            calibrate(&pw, &pd, &cfg.spm)?
        } else if cfg.variant == Variant::FixmatchFixed {
            pw.clone()
        } else {
            pd.clone()
        };
        let part = match (&mut self.agent, cfg.variant) {
            (_, Variant::FixmatchFixed) => losses::fixmatch_partition(&pw, cfg.loss.fixed_tau, cfg.loss.fixed_tau),
            (Some(agent), _) => {
                let prev_a = self.prev_action;
                let prev_part = partition_pixels(&fused, prev_a.tau_fg, prev_a.tau_bg, cfg.band_radius)?;
                let s = build_state(&fused, &prev_part, &pw)?;
                let a = agent.act(&s, learn)?;
                let part = partition_pixels(&fused, a.tau_fg, a.tau_bg, cfg.band_radius)?;
                if learn {
                    let cur_q = quality(&features, &pw, &fused, &part, cfg.rple.beta_temp)?;
                    let prev_q = match (cfg.rple.gain_mode, self.prev_quality) {
                        (GainMode::Sequential, Some(q)) => q,
                        _ => quality(&features, &pw, &fused, &prev_part, cfg.rple.beta_temp)?,
                    };
                    let gain = instructional_gain(&prev_q, &cur_q, &prev_a, &a, &cfg.rple);
                    let r = clip_reward(gain, cfg.rple.delta);
                    let next = build_state(&fused, &part, &pw)?;
                    agent.store(Transition { s, a, r, next });
                    self.rl_step += 1;
                    self.rl_log.push(RlLogRow {
                        step: self.rl_step,
                        tau_fg: a.tau_fg,
                        tau_bg: a.tau_bg,
                        m: cur_q.m_sep,
                        k: cur_q.k_cons,
                        c: cur_q.c_cov,
                        p_stab: stability_penalty(&prev_a, &a, cfg.rple.w_stab),
                        r,
                        critic_loss: None,
                    });
                    acc.rewards.push(r);
                    self.prev_quality = Some(cur_q);
                }
                self.prev_action = a;
                part
            }
            (None, _) => partition_pixels(&fused, cfg.fixed_tau_fg, cfg.fixed_tau_bg, cfg.band_radius)?,
        };
        acc.tau_fg.push(part.tau_fg);
        acc.tau_bg.push(part.tau_bg);
        let q = pseudo_quality(&part, &weak.gt_mask)?;
        let sel = part.selected_count();
        acc.selected += sel;
        acc.correct += (q.selected_accuracy * sel as f64).round() as usize;
        acc.pixels += part.labels().len();
        acc.raw_iou.push(iou(&pd.binarize(0.5), &weak.gt_mask)?);
        acc.cal_iou.push(iou(&fused.binarize(0.5), &weak.gt_mask)?);
        Ok(PseudoLabel { weak, fused, part })
    }

    fn unsup_step(&mut self, pl: &PseudoLabel, strong_seed: u64, drop_prior: bool, scale: f64) -> Result<f64> {
        let strong = strong_augment(&pl.weak, strong_seed);
        let prior = (!drop_prior).then_some(&pl.fused);
        let mut tape = Tape::new();
        let vars = self.net.params.bind(&mut tape, true);
        let out = self.net.forward_on(&mut tape, &vars, &strong.image, &strong.instruction, prior)?;
        let loss = losses::unsup_loss(&mut tape, out.probs, &pl.part, &self.cfg.loss)?;
        let scaled = tape.scale(loss, scale)?;
        tape.backward(scaled)?;
        self.net.params.accumulate_grads(&tape, &vars);
        Ok(tape.scalar(loss))
    }
}

/// Trains one run. Deterministic in `cfg` and the corpus.
pub fn train(cfg: &RunConfig, corpus: &Corpus) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.labeled.is_empty() {
        return Err(Error::Config("training needs a non-empty labeled split".into()));
    }
    if cfg.variant.uses_unlabeled() && corpus.unlabeled.is_empty() {
        return Err(Error::Config(format!("variant {} needs unlabeled samples", cfg.variant)));
    }
    let net = ToyNet::new(cfg.net_config(), derive_seed(cfg.seed, STREAM_NET, 0))?;
    let agent = if cfg.variant.uses_rple() {
        Some(RpleAgent::new(cfg.rple, derive_seed(cfg.seed, STREAM_AGENT, 0))?)
    } else {
        None
    };
    let mut lp = Loop {
        cfg,
        net,
        agent,
        sgd: Sgd::new(cfg.lr, cfg.momentum).with_weight_decay(cfg.weight_decay),
        prev_action: ThresholdAction {
            tau_fg: cfg.rple.init_tau_fg,
            tau_bg: cfg.rple.init_tau_bg,
        },
        prev_quality: None,
        rl_log: Vec::new(),
        rl_step: 0,
    };
    let n_lab = corpus.labeled.len();
    let n_unl = corpus.unlabeled.len();
    let steps = n_lab.max(n_unl).div_ceil(cfg.batch);
    let total_iters = (cfg.epochs * steps) as f64;
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut iter = 0usize;
    let mut final_eval = None;

    for epoch in 1..=cfg.epochs {
        let semi = cfg.variant.uses_unlabeled();
        let active = semi && epoch > cfg.warmup_epochs;
        let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_ORDER, epoch as u64));
        let mut lab_order: Vec<usize> = (0..n_lab).collect();
        lab_order.shuffle(&mut order_rng);
        let mut unl_order: Vec<usize> = (0..n_unl).collect();
        unl_order.shuffle(&mut order_rng);
        let mut acc = EpochAcc::default();

        for step in 0..steps {
            let lr = cfg.lr * (1.0 - iter as f64 / total_iters).powf(cfg.lr_power);
            let scale_l = cfg.loss.lambda_l / cfg.batch as f64;
            for j in 0..cfg.batch {
                let pos = step * cfg.batch + j;
                let s = &corpus.labeled[lab_order[pos % n_lab]];
                let key = (epoch as u64) << 32 | pos as u64;
                let (s, _) = weak_augment(s, derive_seed(cfg.seed, STREAM_LABELED, key));
                let l = lp.sup_step(&s, scale_l).map_err(|e| lp.divergence(epoch, step, e))?;
                acc.sup.push(l);
            }
            if semi {
                let lo = step * cfg.batch;
                let hi = (lo + cfg.batch).min(n_unl);
                let scale_u = cfg.loss.lambda_u / (hi.saturating_sub(lo)).max(1) as f64;
                let first_log = lp.rl_log.len();
                for &idx in unl_order.get(lo..hi).unwrap_or(&[]) {
                    let item = &corpus.unlabeled[idx];
                    let key = (epoch as u64) << 32 | item.sample.sample_id;
                    let pl = lp
                        .pseudo_label(item, derive_seed(cfg.seed, STREAM_WEAK, key), active, &mut acc)
                        .map_err(|e| lp.divergence(epoch, step, e))?;
                    if active {
                        let mut drop_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_DROPOUT, key));
                        let drop = drop_rng.random_bool(cfg.prior_dropout);
                        let l = lp
                            .unsup_step(&pl, derive_seed(cfg.seed, STREAM_STRONG, key), drop, scale_u)
                            .map_err(|e| lp.divergence(epoch, step, e))?;
                        acc.unsup.push(l);
                    }
                }
                if active {
                    if let Some(agent) = lp.agent.as_mut() {
                        if let Some(stats) = agent.update()? {
                            if let Some(row) = lp.rl_log[first_log..].last_mut() {
                                row.critic_loss = Some(stats.critic_loss);
                            }
                        }
                    }
                }
            }
            lp.sgd.lr = lr;
            lp.sgd.step(&mut lp.net.params);
            if lp.net.params.iter().any(|(_, t)| t.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    detail: "non-finite weights after optimizer step".into(),
                });
            }
            iter += 1;
        }

        let eval = evaluate(&lp.net, &corpus.test, cfg.eval_threshold)?;
        let quality = semi.then(|| QualityRow {
            epoch,
            prior_iou_raw: mean(&acc.raw_iou).unwrap_or(0.0),
            prior_iou_cal: mean(&acc.cal_iou).unwrap_or(0.0),
            sel_acc: if acc.selected == 0 { 1.0 } else { acc.correct as f64 / acc.selected as f64 },
            sel_cov: acc.selected as f64 / acc.pixels.max(1) as f64,
        });
        rows.push(EpochRow {
            epoch,
            mean_iou: eval.mean_iou,
            sup_loss: mean(&acc.sup).unwrap_or(0.0),
            unsup_loss: mean(&acc.unsup),
            tau_fg_mean: mean(&acc.tau_fg),
            tau_bg_mean: mean(&acc.tau_bg),
            quality,
            reward_mean: mean(&acc.rewards),
        });
        final_eval = Some(eval);
    }
    let final_eval = final_eval.expect("at least one epoch");
    Ok(TrainOutcome {
        net: lp.net,
        agent: lp.agent,
        epochs: rows,
        rl_log: lp.rl_log,
        final_eval,
    })
}
