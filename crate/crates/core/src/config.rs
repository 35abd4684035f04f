//! Sectioned `key = value` experiment configuration.
//!
//! Every key has a default; a file only lists overrides. Unknown sections or
//! keys are rejected. The canonical text lists every key in a fixed order and
//! its SHA-256 is the config hash stamped on run artifacts.

use std::fmt::Display;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rple::GainMode;
use crate::simworld::{NoiseMix, WorldConfig};
use crate::trainer::{RunConfig, Variant};

/// Seed and split sizes of a generated corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorpusCounts {
    pub seed: u64,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
}

impl Default for CorpusCounts {
    fn default() -> Self {
        Self {
            seed: 22,
            n_labeled: 50,
            n_unlabeled: 1000,
            n_test: 200,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentConfig {
    pub corpus: CorpusCounts,
    pub world: WorldConfig,
    pub noise: NoiseMix,
    pub run: RunConfig,
}

fn parse<T: FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("[{section}] {key}: cannot parse '{value}'")))
}

fn parse_list(section: &str, key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|v| parse(section, key, v.trim()))
        .collect()
}

fn list<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn gain_mode_str(g: GainMode) -> &'static str {
    match g {
        GainMode::Counterfactual => "counterfactual",
        GainMode::Sequential => "sequential",
    }
}

impl ExperimentConfig {
    /// Every `(section, key, value)` in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, &'static str, String)> {
        let c = &self.corpus;
        let w = &self.world;
        let n = &self.noise;
        let r = &self.run;
        let s = &r.spm;
        let a = &r.rple;
        let l = &r.loss;
        let net = &r.net;
        vec![
            ("corpus", "seed", c.seed.to_string()),
            ("corpus", "n_labeled", c.n_labeled.to_string()),
            ("corpus", "n_unlabeled", c.n_unlabeled.to_string()),
            ("corpus", "n_test", c.n_test.to_string()),
            ("world", "image_size", w.image_size.to_string()),
            ("world", "min_blobs", w.min_blobs.to_string()),
            ("world", "max_blobs", w.max_blobs.to_string()),
            ("world", "min_radius", w.min_radius.to_string()),
            ("world", "max_radius", w.max_radius.to_string()),
            ("world", "gap", w.gap.to_string()),
            ("world", "max_attempts", w.max_attempts.to_string()),
            ("world", "pixel_noise", w.pixel_noise.to_string()),
            ("noise", "weights", list(&n.weights)),
            ("noise", "reliability_min", n.reliability_min.to_string()),
            ("noise", "reliability_max", n.reliability_max.to_string()),
            ("noise", "blur_radius", n.blur_radius.to_string()),
            ("noise", "swap_prob", n.swap_prob.to_string()),
            ("train", "variant", r.variant.to_string()),
            ("train", "epochs", r.epochs.to_string()),
            ("train", "warmup_epochs", r.warmup_epochs.to_string()),
            ("train", "lr", r.lr.to_string()),
            ("train", "momentum", r.momentum.to_string()),
            ("train", "weight_decay", r.weight_decay.to_string()),
            ("train", "lr_power", r.lr_power.to_string()),
            ("train", "batch", r.batch.to_string()),
            ("train", "band_radius", r.band_radius.to_string()),
            ("train", "fixed_tau_fg", r.fixed_tau_fg.to_string()),
            ("train", "fixed_tau_bg", r.fixed_tau_bg.to_string()),
            ("train", "sweep_taus", list(&r.sweep_taus)),
            ("train", "eval_threshold", r.eval_threshold.to_string()),
            ("train", "prior_dropout", r.prior_dropout.to_string()),
            ("train", "fixed_mixing", r.fixed_mixing.to_string()),
            ("net", "widths", list(&net.widths)),
            ("net", "downsample", list(&net.downsample)),
            ("net", "text_dim", net.text_dim.to_string()),
            ("net", "feature_dim", net.feature_dim.to_string()),
            ("spm", "lambda0", s.lambda0.to_string()),
            ("spm", "kappa_p", s.kappa_p.to_string()),
            ("spm", "kappa_w", s.kappa_w.to_string()),
            ("spm", "kappa_a", s.kappa_a.to_string()),
            ("spm", "epsilon", s.epsilon.to_string()),
            ("rple", "w_m", a.w_m.to_string()),
            ("rple", "w_k", a.w_k.to_string()),
            ("rple", "w_c", a.w_c.to_string()),
            ("rple", "w_stab", a.w_stab.to_string()),
            ("rple", "delta", a.delta.to_string()),
            ("rple", "gamma", a.gamma.to_string()),
            ("rple", "soft_update", a.soft_update.to_string()),
            ("rple", "actor_lr", a.actor_lr.to_string()),
            ("rple", "critic_lr", a.critic_lr.to_string()),
            ("rple", "explore_noise", a.explore_noise.to_string()),
            ("rple", "beta_temp", a.beta_temp.to_string()),
            ("rple", "hidden", a.hidden.to_string()),
            ("rple", "init_tau_fg", a.init_tau_fg.to_string()),
            ("rple", "init_tau_bg", a.init_tau_bg.to_string()),
            ("rple", "replay_capacity", a.replay_capacity.to_string()),
            ("rple", "batch", a.batch.to_string()),
            ("rple", "gain_mode", gain_mode_str(a.gain_mode).to_string()),
            ("loss", "lambda_l", l.lambda_l.to_string()),
            ("loss", "lambda_u", l.lambda_u.to_string()),
            ("loss", "alpha_mix", l.alpha_mix.to_string()),
            ("loss", "w_bg", l.w_bg.to_string()),
            ("loss", "w_fg", l.w_fg.to_string()),
            ("loss", "dice_eps", l.dice_eps.to_string()),
            ("loss", "fixed_tau", l.fixed_tau.to_string()),
        ]
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let p = |v: &str| -> Result<f64> { parse(section, key, v) };
        let u = |v: &str| -> Result<usize> { parse(section, key, v) };
        let r = &mut self.run;
        match (section, key) {
            ("corpus", "seed") => self.corpus.seed = parse(section, key, value)?,
            ("corpus", "n_labeled") => self.corpus.n_labeled = u(value)?,
            ("corpus", "n_unlabeled") => self.corpus.n_unlabeled = u(value)?,
            ("corpus", "n_test") => self.corpus.n_test = u(value)?,
            ("world", "image_size") => self.world.image_size = u(value)?,
            ("world", "min_blobs") => self.world.min_blobs = u(value)?,
            ("world", "max_blobs") => self.world.max_blobs = u(value)?,
            ("world", "min_radius") => self.world.min_radius = u(value)?,
            ("world", "max_radius") => self.world.max_radius = u(value)?,
            ("world", "gap") => self.world.gap = u(value)?,
            ("world", "max_attempts") => self.world.max_attempts = u(value)?,
            ("world", "pixel_noise") => self.world.pixel_noise = p(value)?,
            ("noise", "weights") => {
                let v = parse_list(section, key, value)?;
                self.noise.weights = v
                    .try_into()
                    .map_err(|_| Error::Config("[noise] weights needs five values".into()))?;
            }
            ("noise", "reliability_min") => self.noise.reliability_min = p(value)?,
            ("noise", "reliability_max") => self.noise.reliability_max = p(value)?,
            ("noise", "blur_radius") => self.noise.blur_radius = u(value)?,
            ("noise", "swap_prob") => self.noise.swap_prob = p(value)?,
            ("train", "variant") => r.variant = value.parse::<Variant>()?,
            ("train", "epochs") => r.epochs = u(value)?,
            ("train", "warmup_epochs") => r.warmup_epochs = u(value)?,
            ("train", "lr") => r.lr = p(value)?,
            ("train", "momentum") => r.momentum = p(value)?,
            ("train", "weight_decay") => r.weight_decay = p(value)?,
            ("train", "lr_power") => r.lr_power = p(value)?,
            ("train", "batch") => r.batch = u(value)?,
            ("train", "band_radius") => r.band_radius = u(value)?,
            ("train", "fixed_tau_fg") => r.fixed_tau_fg = p(value)?,
            ("train", "fixed_tau_bg") => r.fixed_tau_bg = p(value)?,
            ("train", "sweep_taus") => r.sweep_taus = parse_list(section, key, value)?,
            ("train", "eval_threshold") => r.eval_threshold = p(value)?,
            ("train", "prior_dropout") => r.prior_dropout = p(value)?,
            ("train", "fixed_mixing") => r.fixed_mixing = parse(section, key, value)?,
            ("net", "widths") | ("net", "downsample") => {
                let v: Vec<usize> = value
                    .split(',')
                    .map(|x| parse(section, key, x.trim()))
                    .collect::<Result<_>>()?;
                let arr: [usize; 4] = v
                    .try_into()
                    .map_err(|_| Error::Config(format!("[net] {key} needs four values")))?;
                if key == "widths" {
                    r.net.widths = arr;
                } else {
                    r.net.downsample = arr;
                }
            }
            ("net", "text_dim") => r.net.text_dim = u(value)?,
            ("net", "feature_dim") => r.net.feature_dim = u(value)?,
            ("spm", "lambda0") => r.spm.lambda0 = p(value)?,
            ("spm", "kappa_p") => r.spm.kappa_p = p(value)?,
            ("spm", "kappa_w") => r.spm.kappa_w = p(value)?,
            ("spm", "kappa_a") => r.spm.kappa_a = p(value)?,
            ("spm", "epsilon") => r.spm.epsilon = p(value)?,
            ("rple", "w_m") => r.rple.w_m = p(value)?,
            ("rple", "w_k") => r.rple.w_k = p(value)?,
            ("rple", "w_c") => r.rple.w_c = p(value)?,
            ("rple", "w_stab") => r.rple.w_stab = p(value)?,
            ("rple", "delta") => r.rple.delta = p(value)?,
            ("rple", "gamma") => r.rple.gamma = p(value)?,
            ("rple", "soft_update") => r.rple.soft_update = p(value)?,
            ("rple", "actor_lr") => r.rple.actor_lr = p(value)?,
            ("rple", "critic_lr") => r.rple.critic_lr = p(value)?,
            ("rple", "explore_noise") => r.rple.explore_noise = p(value)?,
            ("rple", "beta_temp") => r.rple.beta_temp = p(value)?,
            ("rple", "hidden") => r.rple.hidden = u(value)?,
            ("rple", "init_tau_fg") => r.rple.init_tau_fg = p(value)?,
            ("rple", "init_tau_bg") => r.rple.init_tau_bg = p(value)?,
            ("rple", "replay_capacity") => r.rple.replay_capacity = u(value)?,
            ("rple", "batch") => r.rple.batch = u(value)?,
            ("rple", "gain_mode") => {
                r.rple.gain_mode = match value {
                    "counterfactual" => GainMode::Counterfactual,
                    "sequential" => GainMode::Sequential,
                    other => return Err(Error::Config(format!("[rple] gain_mode: unknown mode '{other}'"))),
                }
            }
            ("loss", "lambda_l") => r.loss.lambda_l = p(value)?,
            ("loss", "lambda_u") => r.loss.lambda_u = p(value)?,
            ("loss", "alpha_mix") => r.loss.alpha_mix = p(value)?,
            ("loss", "w_bg") => r.loss.w_bg = p(value)?,
            ("loss", "w_fg") => r.loss.w_fg = p(value)?,
            ("loss", "dice_eps") => r.loss.dice_eps = p(value)?,
            ("loss", "fixed_tau") => r.loss.fixed_tau = p(value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}' in section [{section}]"))),
        }
        Ok(())
    }

    /// Applies a file's overrides on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section: Option<String> = None;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = Some(name.trim().to_string());
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            let sec = section
                .as_deref()
                .ok_or_else(|| Error::Config(format!("line {}: key outside any section", no + 1)))?;
            self.set(sec, k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.world.image_size != self.run.net.image_size {
            return Err(Error::Config(format!(
                "world image_size {} differs from the network's {}",
                self.world.image_size, self.run.net.image_size
            )));
        }
        if self.noise.weights.iter().any(|w| *w < 0.0) || self.noise.weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("noise weights must be non-negative with a positive sum".into()));
        }
        let probs = [self.noise.reliability_min, self.noise.reliability_max, self.noise.swap_prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || self.noise.reliability_min > self.noise.reliability_max {
            return Err(Error::Config("noise reliability range and swap_prob must lie in [0, 1]".into()));
        }
        if self.world.min_blobs < 2 || self.world.min_blobs > self.world.max_blobs || self.world.min_radius > self.world.max_radius {
            return Err(Error::Config("world needs 2 <= min_blobs <= max_blobs and min_radius <= max_radius".into()));
        }
        self.run.validate()
    }

    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (section, key, value) in self.entries() {
            if section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{section}]\n"));
                current = section;
            }
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
