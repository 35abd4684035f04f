//! Commands behind the `l2l` binary: corpus generation, training,
//! evaluation, threshold sweeps and the confidence scatter export.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::io;
use crate::probmaps::{confidence_score, ProbMap};
use crate::rple::{RlLogRow, RpleAgent, TAU_GAP};
use crate::segnet::ToyNet;
use crate::simworld::{corpus_from_manifest, make_corpus, parse_manifest, Corpus};
use crate::tensorcore::Tensor;
use crate::trainer::{evaluate, par_map, train, TrainOutcome, Variant, METRIC_HEADER};

fn read_text(path: &Path, what: &str) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {what} {}: {e}", path.display())))
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const CONFIG_FILE: &str = "config.ini";
pub const CHECKPOINT_FILE: &str = "checkpoint.l2lw";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RL_LOG_FILE: &str = "rl_log.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const FIG1_FILE: &str = "fig1.csv";

pub const EVAL_HEADER: [&str; 2] = ["sample_id", "iou"];
pub const SWEEP_HEADER: [&str; 2] = ["tau_fg", "mean_iou"];
pub const FIG1_HEADER: [&str; 3] = ["sample_id", "model_confidence", "prior_confidence"];

/// Loads a config file (or the defaults) and applies the seed override.
pub fn resolve_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(p) = path {
        cfg.apply_text(&read_text(p, "config")?)?;
    }
    if let Some(s) = seed {
        cfg.corpus.seed = s;
        cfg.run.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force` is set.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "{} already exists and is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn map_dir(corpus_dir: &Path) -> PathBuf {
    corpus_dir.join("maps")
}

fn map_path(corpus_dir: &Path, id: u64, kind: &str) -> PathBuf {
    map_dir(corpus_dir).join(format!("{id:06}_{kind}.l2lm"))
}

/// Writes the manifest, the resolved config and every image, mask and
/// prior map of a generated corpus.
pub fn cmd_gen(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<Corpus> {
    let c = cfg.corpus;
    let corpus = make_corpus(c.n_labeled, c.n_unlabeled, c.n_test, c.seed, &cfg.world, &cfg.noise)?;
    prepare_out_dir(out, force)?;
    fs::create_dir_all(map_dir(out))?;
    fs::write(out.join(MANIFEST_FILE), corpus.manifest_text())?;
    fs::write(out.join(CONFIG_FILE), cfg.canonical_text())?;
    let size = cfg.world.image_size;
    let samples = corpus
        .labeled
        .iter()
        .chain(corpus.unlabeled.iter().map(|u| &u.sample))
        .chain(&corpus.test);
    for s in samples {
        let image = ProbMap::new(size, size, s.image.clone())?;
        io::write_map(&map_path(out, s.sample_id, "image"), &image)?;
        io::write_mask(&map_path(out, s.sample_id, "mask"), &s.gt_mask)?;
    }
    for u in &corpus.unlabeled {
        io::write_map(&map_path(out, u.sample.sample_id, "prior"), &u.prior)?;
    }
    Ok(corpus)
}

/// Reads a corpus directory: the stored config, the manifest, and the prior
/// maps on disk, which take precedence over regenerated ones.
pub fn load_corpus(dir: &Path) -> Result<(ExperimentConfig, Corpus)> {
    let cfg = ExperimentConfig::from_text(&read_text(&dir.join(CONFIG_FILE), "corpus config")?)?;
    let manifest = read_text(&dir.join(MANIFEST_FILE), "manifest")?;
    let mut corpus = corpus_from_manifest(parse_manifest(&manifest)?, &cfg.world, &cfg.noise)?;
    for u in &mut corpus.unlabeled {
        u.prior = io::read_map(&map_path(dir, u.sample.sample_id, "prior"))?;
    }
    Ok((cfg, corpus))
}

/// Run config: corpus-side sections from the corpus, training-side sections
/// from `train_cfg`.
pub fn merge_run_config(corpus_cfg: &ExperimentConfig, train_cfg: &ExperimentConfig) -> ExperimentConfig {
    ExperimentConfig {
        corpus: corpus_cfg.corpus,
        world: corpus_cfg.world.clone(),
        noise: corpus_cfg.noise.clone(),
        run: train_cfg.run.clone(),
    }
}

pub fn checkpoint_tensors(out: &TrainOutcome) -> Vec<(String, Tensor)> {
    let mut v: Vec<(String, Tensor)> = out
        .net
        .params
        .iter()
        .map(|(n, t)| (format!("net.{n}"), t.clone()))
        .collect();
    if let Some(agent) = &out.agent {
        v.extend(agent.named_tensors().into_iter().map(|(n, t)| (format!("agent.{n}"), t)));
    }
    v
}

fn sub_tensors(all: &[(String, Tensor)], prefix: &str) -> Vec<(String, Tensor)> {
    all.iter()
        .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
        .collect()
}

/// Rebuilds the network (and the agent, when present) of a run directory.
pub fn load_run(run_dir: &Path) -> Result<(ExperimentConfig, ToyNet, Option<RpleAgent>)> {
    let cfg = ExperimentConfig::from_text(&read_text(&run_dir.join(CONFIG_FILE), "run config")?)?;
    let tensors = io::read_checkpoint(&run_dir.join(CHECKPOINT_FILE))?;
    let mut net = ToyNet::new(cfg.run.net_config(), 0)?;
    net.params.load_named(&sub_tensors(&tensors, "net."))?;
    let agent_tensors = sub_tensors(&tensors, "agent.");
    let agent = if agent_tensors.is_empty() {
        None
    } else {
        let mut a = RpleAgent::new(cfg.run.rple, 0)?;
        a.load_named(&agent_tensors)?;
        Some(a)
    };
    Ok((cfg, net, agent))
}

/// Trains one run and writes its checkpoint, metric log, agent log and
/// per-sample test IoU.
pub fn cmd_train(cfg: &ExperimentConfig, corpus: &Corpus, out: &Path, force: bool) -> Result<TrainOutcome> {
    prepare_out_dir(out, force)?;
    let hash = cfg.hash();
    fs::write(out.join(CONFIG_FILE), cfg.canonical_text())?;
    let outcome = train(&cfg.run, corpus)?;
    io::write_checkpoint(&out.join(CHECKPOINT_FILE), &checkpoint_tensors(&outcome))?;
    let rows: Vec<Vec<String>> = outcome.epochs.iter().map(|r| r.record()).collect();
    io::write_csv(&out.join(METRICS_FILE), &hash, &METRIC_HEADER, &rows)?;
    if outcome.agent.is_some() {
        let rl: Vec<Vec<String>> = outcome.rl_log.iter().map(|r| r.record()).collect();
        io::write_csv(&out.join(RL_LOG_FILE), &hash, &RlLogRow::HEADER, &rl)?;
    }
    write_eval(&out.join(EVAL_FILE), &hash, corpus, &outcome.final_eval.per_sample)?;
    Ok(outcome)
}

fn write_eval(path: &Path, hash: &str, corpus: &Corpus, per_sample: &[f64]) -> Result<()> {
    let rows: Vec<Vec<String>> = corpus
        .test
        .iter()
        .zip(per_sample)
        .map(|(s, v)| vec![s.sample_id.to_string(), format!("{v:.6}")])
        .collect();
    io::write_csv(path, hash, &EVAL_HEADER, &rows)?;
    Ok(())
}

/// Evaluates a run's network on the test split; returns the mean IoU.
pub fn cmd_eval(run_dir: &Path, corpus: &Corpus, out_file: &Path) -> Result<f64> {
    let (cfg, net, _) = load_run(run_dir)?;
    let eval = evaluate(&net, &corpus.test, cfg.run.eval_threshold)?;
    write_eval(out_file, &cfg.hash(), corpus, &eval.per_sample)?;
    Ok(eval.mean_iou)
}

/// Config of the fixed-threshold run at `tau`; the background threshold
/// keeps its configured value unless that would violate the minimum gap.
pub fn sweep_config(cfg: &ExperimentConfig, tau: f64) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.run.variant = Variant::FixedTauSweep;
    c.run.fixed_tau_fg = tau;
    c.run.fixed_tau_bg = c.run.fixed_tau_bg.min(tau - TAU_GAP);
    c
}

/// One fixed-threshold run per sweep value plus one adaptive run.
/// Returns `(label, mean IoU)` rows in CSV order.
pub fn cmd_sweep(cfg: &ExperimentConfig, corpus: &Corpus, out: &Path, force: bool) -> Result<Vec<(String, f64)>> {
    prepare_out_dir(out, force)?;
    let mut rows = Vec::new();
    for &tau in &cfg.run.sweep_taus {
        let o = train(&sweep_config(cfg, tau).run, corpus)?;
        rows.push((format!("{tau}"), o.final_eval.mean_iou));
    }
    let mut c = cfg.clone();
    c.run.variant = Variant::L2lFull;
    let o = train(&c.run, corpus)?;
    rows.push(("adaptive".to_string(), o.final_eval.mean_iou));
    write_sweep(&out.join(SWEEP_FILE), &cfg.hash(), &rows)?;
    Ok(rows)
}

pub fn write_sweep(path: &Path, hash: &str, rows: &[(String, f64)]) -> Result<()> {
    let body: Vec<Vec<String>> = rows.iter().map(|(l, v)| vec![l.clone(), format!("{v:.6}")]).collect();
    io::write_csv(path, hash, &SWEEP_HEADER, &body)?;
    Ok(())
}

/// Per unlabeled sample: confidence of the network's plain prediction and
/// of the stored prior.
pub fn fig1_rows(net: &ToyNet, corpus: &Corpus) -> Result<Vec<(u64, f64, f64)>> {
    par_map(&corpus.unlabeled, |u| {
        let (p, _) = net.predict(&u.sample.image, &u.sample.instruction, None)?;
        Ok((u.sample.sample_id, confidence_score(&p), confidence_score(&u.prior)))
    })
}

pub fn cmd_fig1(run_dir: &Path, corpus: &Corpus, out_file: &Path) -> Result<Vec<(u64, f64, f64)>> {
    let (cfg, net, _) = load_run(run_dir)?;
    let rows = fig1_rows(&net, corpus)?;
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(id, m, p)| vec![id.to_string(), format!("{m:.6}"), format!("{p:.6}")])
        .collect();
    io::write_csv(out_file, &cfg.hash(), &FIG1_HEADER, &body)?;
    Ok(rows)
}

/// Fractions of rows with model confidence above the prior's by more than
/// `gap`, and below it by more than `gap`.
pub fn off_diagonal_fractions(rows: &[(u64, f64, f64)], gap: f64) -> (f64, f64) {
    let n = rows.len().max(1) as f64;
    let above = rows.iter().filter(|(_, m, p)| m - p > gap).count() as f64 / n;
    let below = rows.iter().filter(|(_, m, p)| p - m > gap).count() as f64 / n;
    (above, below)
}
