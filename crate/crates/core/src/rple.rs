//! Reinforced pseudo-label exploration: per-sample thresholds chosen by a
//! DDPG actor and rewarded by the change in pseudo-label quality.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::probmaps::{class_ratios, check_dims, mean_std, Label, PixelPartition, ProbMap};
use crate::segnet::PixelFeatures;
use crate::sesm::uniform;
use crate::spm::agreement;
use crate::tensorcore::{l2_normalize_slice, Adam, ParamId, ParamStore, Tape, Tensor, Var};

pub const STATE_DIM: usize = 6;
pub const ACTION_DIM: usize = 2;
/// Minimum gap kept between the two thresholds.
pub const TAU_GAP: f64 = 0.05;

/// Which "previous" quality the gain compares against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GainMode {
    /// Same sample, previous action.
    Counterfactual,
    /// Previous step's sample and action.
    Sequential,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RpleConfig {
    pub w_m: f64,
    pub w_k: f64,
    pub w_c: f64,
    pub w_stab: f64,
    pub delta: f64,
    pub gamma: f64,
    pub soft_update: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub explore_noise: f64,
    pub beta_temp: f64,
    pub hidden: usize,
    pub init_tau_fg: f64,
    pub init_tau_bg: f64,
    pub replay_capacity: usize,
    pub batch: usize,
    pub gain_mode: GainMode,
}

impl Default for RpleConfig {
    fn default() -> Self {
        Self {
            w_m: 1.0,
            w_k: 0.3,
            w_c: 0.2,
            w_stab: 0.05,
            delta: 0.5,
            gamma: 0.9,
            soft_update: 0.005,
            actor_lr: 1e-4,
            critic_lr: 1e-4,
            explore_noise: 0.01,
            beta_temp: 1.0,
            hidden: 64,
            init_tau_fg: 0.70,
            init_tau_bg: 0.20,
            replay_capacity: 4096,
            batch: 64,
            gain_mode: GainMode::Counterfactual,
        }
    }
}

impl RpleConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.w_m,
            self.w_k,
            self.w_c,
            self.w_stab,
            self.delta,
            self.soft_update,
            self.actor_lr,
            self.critic_lr,
            self.explore_noise,
            self.beta_temp,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("RPLE weights, rates and noise must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma {} outside (0, 1)", self.gamma)));
        }
        if self.soft_update > 1.0 {
            return Err(Error::Config("soft_update must be at most 1".into()));
        }
        if self.hidden == 0 || self.replay_capacity == 0 || self.batch == 0 {
            return Err(Error::Config("hidden, replay_capacity and batch must be positive".into()));
        }
        let a = project_action(self.init_tau_fg, self.init_tau_bg);
        if a.tau_fg != self.init_tau_fg || a.tau_bg != self.init_tau_bg || !(0.0 < self.init_tau_bg) || self.init_tau_fg >= 1.0 {
            return Err(Error::Config("initial thresholds must satisfy 0 < tau_bg <= tau_fg - 0.05 < 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RlState {
    pub mu: f64,
    pub sigma: f64,
    pub r_pos: f64,
    pub r_neg: f64,
    pub r_ign: f64,
    pub w_agree: f64,
}

impl RlState {
    pub fn to_array(&self) -> [f64; STATE_DIM] {
        [self.mu, self.sigma, self.r_pos, self.r_neg, self.r_ign, self.w_agree]
    }
}

pub fn build_state(fused: &ProbMap, part: &PixelPartition, pw: &ProbMap) -> Result<RlState> {
    check_dims("build_state", fused, part)?;
    let (mu, sigma) = mean_std(fused);
    let (r_pos, r_neg, r_ign) = class_ratios(part);
    Ok(RlState {
        mu,
        sigma,
        r_pos,
        r_neg,
        r_ign,
        w_agree: agreement(pw, fused)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdAction {
    pub tau_fg: f64,
    pub tau_bg: f64,
}

/// Orders the raw actor output into a valid threshold pair.
pub fn project_action(raw_fg: f64, raw_bg: f64) -> ThresholdAction {
    let tau_fg = raw_fg.clamp(0.0, 1.0);
    let tau_bg = raw_bg.clamp(0.0, 1.0).min(tau_fg - TAU_GAP).max(0.0);
    ThresholdAction { tau_fg, tau_bg }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QualityMetrics {
    pub m_sep: f64,
    pub k_cons: f64,
    pub c_cov: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean sigmoid margin of each selected pixel toward its own class centroid.
pub fn separability(features: &PixelFeatures, part: &PixelPartition, beta: f64) -> Result<f64> {
    if features.height != part.height() || features.width != part.width() {
        return Err(Error::shape("separability", "features and partition differ in size"));
    }
    let d = features.dim;
    let mut sum_fg = vec![0.0; d];
    let mut sum_bg = vec![0.0; d];
    for (i, l) in part.labels().iter().enumerate() {
        let acc = match l {
            Label::Fg => &mut sum_fg,
            Label::Bg => &mut sum_bg,
            Label::Ignore => continue,
        };
        for (a, v) in acc.iter_mut().zip(features.get(i)) {
            *a += v;
        }
    }
    let c_fg = l2_normalize_slice(&sum_fg);
    let c_bg = l2_normalize_slice(&sum_bg);
    let mut total = 0.0;
    let mut n = 0usize;
    for (i, l) in part.labels().iter().enumerate() {
        let (own, other) = match l {
            Label::Fg => (&c_fg, &c_bg),
            Label::Bg => (&c_bg, &c_fg),
            Label::Ignore => continue,
        };
        let v = features.get(i);
        total += sigmoid(beta * (dot(v, own) - dot(v, other)));
        n += 1;
    }
    Ok(if n == 0 { 0.5 } else { total / n as f64 })
}

/// Mean `1 - |pw - fused|` over selected pixels.
pub fn consistency(pw: &ProbMap, fused: &ProbMap, part: &PixelPartition) -> Result<f64> {
    check_dims("consistency", pw, fused)?;
    check_dims("consistency", pw, part)?;
    let mut total = 0.0;
    let mut n = 0usize;
    for ((a, b), l) in pw.values().iter().zip(fused.values()).zip(part.labels()) {
        if *l != Label::Ignore {
            total += 1.0 - (a - b).abs();
            n += 1;
        }
    }
    Ok(if n == 0 { 0.5 } else { total / n as f64 })
}

pub fn coverage(part: &PixelPartition) -> f64 {
    let (p, n, _) = class_ratios(part);
    p + n
}

pub fn quality(features: &PixelFeatures, pw: &ProbMap, fused: &ProbMap, part: &PixelPartition, beta: f64) -> Result<QualityMetrics> {
    Ok(QualityMetrics {
        m_sep: separability(features, part, beta)?,
        k_cons: consistency(pw, fused, part)?,
        c_cov: coverage(part),
    })
}

pub fn stability_penalty(prev_a: &ThresholdAction, cur_a: &ThresholdAction, w_stab: f64) -> f64 {
    w_stab * ((cur_a.tau_fg - prev_a.tau_fg).abs() + (cur_a.tau_bg - prev_a.tau_bg).abs())
}

pub fn instructional_gain(prev: &QualityMetrics, cur: &QualityMetrics, prev_a: &ThresholdAction, cur_a: &ThresholdAction, cfg: &RpleConfig) -> f64 {
    cfg.w_m * (cur.m_sep - prev.m_sep) + cfg.w_k * (cur.k_cons - prev.k_cons) + cfg.w_c * (cur.c_cov - prev.c_cov)
        - stability_penalty(prev_a, cur_a, cfg.w_stab)
}

pub fn clip_reward(gain: f64, delta: f64) -> f64 {
    gain.clamp(-delta, delta)
}

/// Fully connected ReLU network with a linear or sigmoid head.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub params: ParamStore,
    layers: Vec<(ParamId, ParamId)>,
    sigmoid_head: bool,
}

impl Mlp {
    pub fn new(sizes: &[usize], sigmoid_head: bool, rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let wt = params.add(format!("l{i}.w"), uniform(rng, &[w[0], w[1]], w[0]));
                let b = params.add(format!("l{i}.b"), uniform(rng, &[w[1]], w[0]));
                (wt, b)
            })
            .collect();
        Self {
            params,
            layers,
            sigmoid_head,
        }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = tape.matmul(h, vars[w.0])?;
            h = tape.add_bias(h, vars[b.0])?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h)?;
            } else if self.sigmoid_head {
                h = tape.sigmoid(h)?;
            }
        }
        Ok(h)
    }

    /// Gradient-free evaluation on a batch of rows.
    pub fn eval(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let x = tape.leaf(&Tensor::from_rows(rows)?);
        let y = self.forward(&mut tape, &vars, x)?;
        let cols = *tape.shape(y).last().expect("2-D output");
        Ok(tape.value(y).chunks(cols).map(<[f64]>::to_vec).collect())
    }

    fn last(&self) -> (ParamId, ParamId) {
        *self.layers.last().expect("at least one layer")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub s: RlState,
    pub a: ThresholdAction,
    pub r: f64,
    pub next: RlState,
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            items: Vec::new(),
            head: 0,
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.head] = t;
        }
        self.head = (self.head + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Uniform draw with replacement.
    pub fn sample(&self, rng: &mut impl Rng, n: usize) -> Vec<Transition> {
        (0..n).map(|_| self.items[rng.random_range(0..self.items.len())]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_q: f64,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn state_action_row(s: &RlState, a: &ThresholdAction) -> Vec<f64> {
    let mut row = s.to_array().to_vec();
    row.extend([a.tau_fg, a.tau_bg]);
    row
}

/// DDPG actor-critic with target networks and a replay buffer.
#[derive(Clone, Debug)]
pub struct RpleAgent {
    pub cfg: RpleConfig,
    pub actor: Mlp,
    pub critic: Mlp,
    pub actor_target: Mlp,
    pub critic_target: Mlp,
    actor_opt: Adam,
    critic_opt: Adam,
    pub replay: ReplayBuffer,
    rng: ChaCha8Rng,
    pub updates: u64,
    pub skipped_updates: u64,
}

impl RpleAgent {
    /// The actor's head starts with zero weights and biases at the logits
    /// of the initial thresholds, so the first greedy action is exactly
    /// `(init_tau_fg, init_tau_bg)`.
    pub fn new(cfg: RpleConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = cfg.hidden;
        let mut actor = Mlp::new(&[STATE_DIM, h, h, ACTION_DIM], true, &mut rng);
        let (w, b) = actor.last();
        actor.params.get_mut(w).data_mut().fill(0.0);
        actor
            .params
            .get_mut(b)
            .data_mut()
            .copy_from_slice(&[logit(cfg.init_tau_fg), logit(cfg.init_tau_bg)]);
        let critic = Mlp::new(&[STATE_DIM + ACTION_DIM, h, h, 1], false, &mut rng);
        Ok(Self {
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            actor_opt: Adam::new(cfg.actor_lr),
            critic_opt: Adam::new(cfg.critic_lr),
            replay: ReplayBuffer::new(cfg.replay_capacity),
            rng,
            updates: 0,
            skipped_updates: 0,
            cfg,
        })
    }

    pub fn raw_action(&self, s: &RlState) -> Result<[f64; 2]> {
        let out = self.actor.eval(&[s.to_array().to_vec()])?;
        Ok([out[0][0], out[0][1]])
    }

    pub fn greedy(&self, s: &RlState) -> Result<ThresholdAction> {
        let [a, b] = self.raw_action(s)?;
        Ok(project_action(a, b))
    }

    pub fn act(&mut self, s: &RlState, explore: bool) -> Result<ThresholdAction> {
        let [mut a, mut b] = self.raw_action(s)?;
        if explore {
            let noise = Normal::new(0.0, self.cfg.explore_noise).expect("positive std");
            a += noise.sample(&mut self.rng);
            b += noise.sample(&mut self.rng);
        }
        Ok(project_action(a, b))
    }

    pub fn q_value(&self, s: &RlState, a: &ThresholdAction) -> Result<f64> {
        Ok(self.critic.eval(&[state_action_row(s, a)])?[0][0])
    }

    /// `r + gamma * Q'(s', pi'(s'))` with the target actor's projected action.
    pub fn td_target(&self, r: f64, next: &RlState) -> Result<f64> {
        let raw = self.actor_target.eval(&[next.to_array().to_vec()])?;
        let a = project_action(raw[0][0], raw[0][1]);
        let q = self.critic_target.eval(&[state_action_row(next, &a)])?[0][0];
        Ok(r + self.cfg.gamma * q)
    }

    /// Batched TD targets.
    pub fn td_targets(&self, batch: &[Transition]) -> Result<Vec<f64>> {
        let next: Vec<Vec<f64>> = batch.iter().map(|t| t.next.to_array().to_vec()).collect();
        let raw = self.actor_target.eval(&next)?;
        let rows: Vec<Vec<f64>> = batch
            .iter()
            .zip(&raw)
            .map(|(t, a)| state_action_row(&t.next, &project_action(a[0], a[1])))
            .collect();
        let q = self.critic_target.eval(&rows)?;
        Ok(batch.iter().zip(q).map(|(t, q)| t.r + self.cfg.gamma * q[0]).collect())
    }

    pub fn critic_loss(&self, batch: &[Transition]) -> Result<f64> {
        let ys = self.td_targets(batch)?;
        let rows: Vec<Vec<f64>> = batch.iter().map(|t| state_action_row(&t.s, &t.a)).collect();
        let q = self.critic.eval(&rows)?;
        Ok(ys.iter().zip(q).map(|(y, q)| (y - q[0]).powi(2)).sum::<f64>() / batch.len() as f64)
    }

    /// One optimizer step on the mean squared TD error; returns the loss
    /// before the step.
    pub fn critic_step(&mut self, batch: &[Transition]) -> Result<f64> {
        let ys = self.td_targets(batch)?;
        let rows: Vec<Vec<f64>> = batch.iter().map(|t| state_action_row(&t.s, &t.a)).collect();
        let mut tape = Tape::new();
        let vars = self.critic.params.bind(&mut tape, true);
        let x = tape.leaf(&Tensor::from_rows(&rows)?);
        let q = self.critic.forward(&mut tape, &vars, x)?;
        let y = tape.constant(&[batch.len(), 1], ys)?;
        let d = tape.sub(q, y)?;
        let sq = tape.mul(d, d)?;
        let loss = tape.mean(sq)?;
        tape.backward(loss)?;
        self.critic.params.accumulate_grads(&tape, &vars);
        self.critic_opt.step(&mut self.critic.params);
        Ok(tape.scalar(loss))
    }

    /// One ascent step on `Q(s, pi(s))` through a frozen critic; returns
    /// the mean Q before the step. The unprojected actor output feeds the
    /// critic so the gradient is smooth.
    pub fn actor_step(&mut self, batch: &[Transition]) -> Result<f64> {
        let rows: Vec<Vec<f64>> = batch.iter().map(|t| t.s.to_array().to_vec()).collect();
        let mut tape = Tape::new();
        let avars = self.actor.params.bind(&mut tape, true);
        let cvars = self.critic.params.bind(&mut tape, false);
        let s = tape.leaf(&Tensor::from_rows(&rows)?);
        let a = self.actor.forward(&mut tape, &avars, s)?;
        let sa = tape.concat_last(s, a)?;
        let q = self.critic.forward(&mut tape, &cvars, sa)?;
        let mq = tape.mean(q)?;
        let loss = tape.scale(mq, -1.0)?;
        tape.backward(loss)?;
        self.actor.params.accumulate_grads(&tape, &avars);
        self.actor_opt.step(&mut self.actor.params);
        Ok(tape.scalar(mq))
    }

    pub fn soft_update(&mut self, rho: f64) -> Result<()> {
        self.actor_target.params.soft_update_from(&self.actor.params, rho)?;
        self.critic_target.params.soft_update_from(&self.critic.params, rho)
    }

    pub fn store(&mut self, t: Transition) {
        self.replay.push(t);
    }

    /// Critic step, actor step, then soft target update. Returns `None`
    /// (and counts a skip) while the replay holds fewer than a batch.
    pub fn update(&mut self) -> Result<Option<UpdateStats>> {
        if self.replay.len() < self.cfg.batch.min(self.cfg.replay_capacity) {
            self.skipped_updates += 1;
            return Ok(None);
        }
        let batch = self.replay.sample(&mut self.rng, self.cfg.batch);
        let critic_loss = self.critic_step(&batch)?;
        let actor_q = self.actor_step(&batch)?;
        self.soft_update(self.cfg.soft_update)?;
        self.updates += 1;
        Ok(Some(UpdateStats { critic_loss, actor_q }))
    }

    /// All four networks as named tensors.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (prefix, net) in [
            ("actor", &self.actor),
            ("critic", &self.critic),
            ("actor_target", &self.actor_target),
            ("critic_target", &self.critic_target),
        ] {
            for (name, t) in net.params.iter() {
                out.push((format!("{prefix}.{name}"), t.clone()));
            }
        }
        out
    }

    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        for (prefix, net) in [
            ("actor", &mut self.actor),
            ("critic", &mut self.critic),
            ("actor_target", &mut self.actor_target),
            ("critic_target", &mut self.critic_target),
        ] {
            let p = format!("{prefix}.");
            let sub: Vec<(String, Tensor)> = named
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(&p).map(|s| (s.to_string(), t.clone())))
                .collect();
            net.params.load_named(&sub)?;
        }
        Ok(())
    }
}

/// One row of the per-step agent log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RlLogRow {
    pub step: u64,
    pub tau_fg: f64,
    pub tau_bg: f64,
    pub m: f64,
    pub k: f64,
    pub c: f64,
    pub p_stab: f64,
    pub r: f64,
    /// Empty when no update ran at this step.
    pub critic_loss: Option<f64>,
}

impl RlLogRow {
    pub const HEADER: [&'static str; 9] = ["step", "tau_fg", "tau_bg", "M", "K", "C", "P_stab", "R", "critic_loss"];

    pub fn record(&self) -> Vec<String> {
        vec![
            self.step.to_string(),
            format!("{:.6}", self.tau_fg),
            format!("{:.6}", self.tau_bg),
            format!("{:.6}", self.m),
            format!("{:.6}", self.k),
            format!("{:.6}", self.c),
            format!("{:.6}", self.p_stab),
            format!("{:.6}", self.r),
            self.critic_loss.map_or(String::new(), |v| format!("{v:.6e}")),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_examples() {
        assert_eq!(project_action(0.70, 0.20), ThresholdAction { tau_fg: 0.70, tau_bg: 0.20 });
        let a = project_action(0.50, 0.90);
        assert_eq!(a.tau_fg, 0.50);
        assert!((a.tau_bg - 0.45).abs() < 1e-15);
        assert_eq!(project_action(0.03, 0.90), ThresholdAction { tau_fg: 0.03, tau_bg: 0.0 });
    }

    #[test]
    fn fresh_actor_emits_initial_thresholds() {
        let agent = RpleAgent::new(RpleConfig::default(), 3).unwrap();
        let s = RlState {
            mu: 0.3,
            sigma: 0.2,
            r_pos: 0.1,
            r_neg: 0.7,
            r_ign: 0.2,
            w_agree: 0.9,
        };
        let a = agent.greedy(&s).unwrap();
        assert!((a.tau_fg - 0.70).abs() < 1e-12);
        assert!((a.tau_bg - 0.20).abs() < 1e-12);
    }

    #[test]
    fn replay_wraps() {
        let s = RlState {
            mu: 0.0,
            sigma: 0.0,
            r_pos: 0.0,
            r_neg: 0.0,
            r_ign: 1.0,
            w_agree: 1.0,
        };
        let mut rb = ReplayBuffer::new(2);
        for i in 0..5 {
            rb.push(Transition {
                s,
                a: project_action(0.7, 0.2),
                r: i as f64,
                next: s,
            });
        }
        assert_eq!(rb.len(), 2);
        let mut rs: Vec<f64> = rb.items.iter().map(|t| t.r).collect();
        rs.sort_by(f64::total_cmp);
        assert_eq!(rs, vec![3.0, 4.0]);
    }
}
