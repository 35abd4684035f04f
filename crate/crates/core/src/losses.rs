//! Supervised and unsupervised objectives, recorded on a tape so gradients
//! reach the prediction. Pseudo targets enter as constants.

use crate::error::{Error, Result};
use crate::probmaps::{BinaryMask, Label, PixelPartition, ProbMap};
use crate::tensorcore::{Tape, Var};

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_l: f64,
    pub lambda_u: f64,
    /// Weight of BCE against Dice in the unsupervised branch.
    pub alpha_mix: f64,
    pub w_bg: f64,
    pub w_fg: f64,
    pub ignore_label: u8,
    pub dice_eps: f64,
    pub fixed_tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_l: 1.0,
            lambda_u: 1.0,
            alpha_mix: 0.7,
            w_bg: 0.5,
            w_fg: 1.5,
            ignore_label: 255,
            dice_eps: 1e-6,
            fixed_tau: 0.7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha_mix) {
            return Err(Error::Config(format!("alpha_mix {} outside [0, 1]", self.alpha_mix)));
        }
        if !(self.w_bg > 0.0 && self.w_fg > 0.0 && self.dice_eps > 0.0) {
            return Err(Error::Config("class weights and dice_eps must be positive".into()));
        }
        if self.lambda_l < 0.0 || self.lambda_u < 0.0 {
            return Err(Error::Config("branch weights must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.fixed_tau) {
            return Err(Error::Config(format!("fixed_tau {} outside [0, 1]", self.fixed_tau)));
        }
        Ok(())
    }
}

/// Per-pixel target codes: 1 for FG, 0 for BG, `ignore_label` otherwise.
pub fn target_codes(part: &PixelPartition, ignore_label: u8) -> Vec<u8> {
    part.labels()
        .iter()
        .map(|l| match l {
            Label::Fg => 1,
            Label::Bg => 0,
            Label::Ignore => ignore_label,
        })
        .collect()
}

fn check_len(op: &'static str, tape: &Tape, pred: Var, n: usize) -> Result<()> {
    let got: usize = tape.shape(pred).iter().product();
    if got != n {
        return Err(Error::shape(op, format!("prediction has {got} pixels, target {n}")));
    }
    Ok(())
}

/// Class-weighted BCE averaged over non-ignored pixels.
pub fn weighted_bce(tape: &mut Tape, pred: Var, target: &BinaryMask, ignore: &[bool], cfg: &LossConfig) -> Result<Var> {
    let n = target.values().len();
    check_len("weighted_bce", tape, pred, n)?;
    if ignore.len() != n {
        return Err(Error::shape("weighted_bce", "ignore set size mismatch"));
    }
    let kept = ignore.iter().filter(|i| !**i).count();
    if kept == 0 {
        return tape.constant(&[1], vec![0.0]);
    }
    let shape = tape.shape(pred).to_vec();
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    for i in 0..n {
        if ignore[i] {
            continue;
        }
        if target.values()[i] {
            a[i] = -cfg.w_fg / kept as f64;
        } else {
            b[i] = -cfg.w_bg / kept as f64;
        }
    }
    let p = tape.clamp(pred, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let lp = tape.log(p)?;
    let q = tape.scale(p, -1.0)?;
    let q = tape.add_scalar(q, 1.0)?;
    let lq = tape.log(q)?;
    let a = tape.constant(&shape, a)?;
    let b = tape.constant(&shape, b)?;
    let ta = tape.mul(a, lp)?;
    let tb = tape.mul(b, lq)?;
    let t = tape.add(ta, tb)?;
    tape.sum(t)
}

/// Soft Dice loss restricted to `region`.
pub fn dice_fg(tape: &mut Tape, pred: Var, pseudo: &BinaryMask, region: &[bool], eps: f64) -> Result<Var> {
    let n = pseudo.values().len();
    check_len("dice_fg", tape, pred, n)?;
    if region.len() != n {
        return Err(Error::shape("dice_fg", "region size mismatch"));
    }
    if !region.iter().any(|r| *r) {
        return tape.constant(&[1], vec![0.0]);
    }
    let shape = tape.shape(pred).to_vec();
    let m: Vec<f64> = region.iter().map(|&r| f64::from(u8::from(r))).collect();
    let my: Vec<f64> = region
        .iter()
        .zip(pseudo.values())
        .map(|(&r, &y)| f64::from(u8::from(r && y)))
        .collect();
    let sum_y: f64 = my.iter().sum();
    let mv = tape.constant(&shape, m)?;
    let myv = tape.constant(&shape, my)?;
    let inter = tape.mul(pred, myv)?;
    let inter = tape.sum(inter)?;
    let num = tape.scale(inter, 2.0)?;
    let num = tape.add_scalar(num, eps)?;
    let ps = tape.mul(pred, mv)?;
    let ps = tape.sum(ps)?;
    let den = tape.add_scalar(ps, sum_y + eps)?;
    let ratio = tape.div(num, den)?;
    let neg = tape.scale(ratio, -1.0)?;
    tape.add_scalar(neg, 1.0)
}

/// `alpha * BCE + (1 - alpha) * Dice` against the partition's pseudo labels;
/// BCE skips IGNORE pixels, Dice runs over the FG pixels.
pub fn unsup_loss(tape: &mut Tape, pred_strong: Var, part: &PixelPartition, cfg: &LossConfig) -> Result<Var> {
    let codes = target_codes(part, cfg.ignore_label);
    let ignore: Vec<bool> = codes.iter().map(|&c| c == cfg.ignore_label).collect();
    let pseudo = part.pseudo_mask();
    let pos: Vec<bool> = codes.iter().map(|&c| c == 1).collect();
    let bce = weighted_bce(tape, pred_strong, &pseudo, &ignore, cfg)?;
    let dice = dice_fg(tape, pred_strong, &pseudo, &pos, cfg.dice_eps)?;
    let a = tape.scale(bce, cfg.alpha_mix)?;
    let b = tape.scale(dice, 1.0 - cfg.alpha_mix)?;
    tape.add(a, b)
}

/// Supervised loss on a labeled sample: weighted BCE over all pixels.
pub fn sup_loss(tape: &mut Tape, pred: Var, gt: &BinaryMask, cfg: &LossConfig) -> Result<Var> {
    let ignore = vec![false; gt.values().len()];
    weighted_bce(tape, pred, gt, &ignore, cfg)
}

pub fn total_loss(tape: &mut Tape, sup: Var, unsup: Var, cfg: &LossConfig) -> Result<Var> {
    let a = tape.scale(sup, cfg.lambda_l)?;
    let b = tape.scale(unsup, cfg.lambda_u)?;
    tape.add(a, b)
}

/// Fixed-threshold selection: pseudo mask `pw >= fixed_tau`, selection
/// mask `pw >= tau`.
pub fn fixmatch_select(pw: &ProbMap, tau: f64, fixed_tau: f64) -> (BinaryMask, BinaryMask) {
    (pw.binarize(fixed_tau), pw.binarize(tau))
}

/// Partition view of a fixed-threshold selection, so the baseline shares
/// the unsupervised loss.
pub fn fixmatch_partition(pw: &ProbMap, tau: f64, fixed_tau: f64) -> PixelPartition {
    let (pseudo, sel) = fixmatch_select(pw, tau, fixed_tau);
    let labels = pseudo
        .values()
        .iter()
        .zip(sel.values())
        .map(|(&p, &s)| match (s, p) {
            (false, _) => Label::Ignore,
            (true, true) => Label::Fg,
            (true, false) => Label::Bg,
        })
        .collect();
    PixelPartition::from_labels(pw.height(), pw.width(), labels, fixed_tau, tau, 0).expect("dims from map")
}
