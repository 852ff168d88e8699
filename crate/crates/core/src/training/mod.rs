//! Per-record Adam training with gradient clipping and early stopping.

mod adam;
mod checkpoint;

pub use adam::{adam_step, clip_grad_norm, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, TensorData, CHECKPOINT_VERSION};

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LoopBundle;
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossReport, LossWeights};
use crate::model::{AttentionMode, Mlsa, Mode, ModelConfig};
use crate::tensor::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub epochs: usize,
    pub seed: u64,
    pub z: usize,
    pub q: usize,
    /// Explicit values win over `desk_scale`.
    pub mpn_layers: Option<usize>,
    pub hidden: Option<usize>,
    pub k_neighbors: usize,
    pub attention: AttentionMode,
    pub bn_eps: f64,
    pub desk_scale: bool,
    pub mode: Mode,
    /// Epochs without improvement before stopping; 0 disables.
    pub patience: usize,
    pub clip_norm: f64,
    pub w_seq: Option<f64>,
    pub huber_delta: f64,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            adam: AdamConfig::default(),
            epochs: 50,
            seed: 0,
            z: m.z,
            q: m.q,
            mpn_layers: None,
            hidden: None,
            k_neighbors: m.k_neighbors,
            attention: m.attention,
            bn_eps: m.bn_eps,
            desk_scale: false,
            mode: Mode::TeacherForced,
            patience: 10,
            clip_norm: 5.0,
            w_seq: None,
            huber_delta: crate::losses::DEFAULT_HUBER_DELTA,
            checkpoint_dir: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{value}' for {key}")))
}

fn parse_opt<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "auto" || value.is_empty() {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl TrainConfig {
    /// Desk-scale defaults.
    pub fn desk() -> Self {
        Self {
            desk_scale: true,
            ..Self::default()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let base = if self.desk_scale {
            ModelConfig::desk_scale()
        } else {
            ModelConfig::default()
        };
        ModelConfig {
            z: self.z,
            q: self.q,
            mpn_layers: self.mpn_layers.unwrap_or(base.mpn_layers),
            hidden: self.hidden.unwrap_or(base.hidden),
            k_neighbors: self.k_neighbors,
            attention: self.attention,
            bn_eps: self.bn_eps,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            w_seq: self.w_seq,
            huber_delta: self.huber_delta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        self.model_config().validate()
    }

    /// Sets one `key=value` entry.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "lr" => self.adam.lr = parse(key, v)?,
            "beta1" => self.adam.beta1 = parse(key, v)?,
            "beta2" => self.adam.beta2 = parse(key, v)?,
            "eps" => self.adam.eps = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "z" => self.z = parse(key, v)?,
            "q" => self.q = parse(key, v)?,
            "mpn_layers" => self.mpn_layers = parse_opt(key, v)?,
            "hidden" => self.hidden = parse_opt(key, v)?,
            "k_neighbors" => self.k_neighbors = parse(key, v)?,
            "attention" => self.attention = v.parse()?,
            "bn_eps" => self.bn_eps = parse(key, v)?,
            "desk_scale" => self.desk_scale = parse(key, v)?,
            "mode" => self.mode = v.parse()?,
            "patience" => self.patience = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "w_seq" => self.w_seq = parse_opt(key, v)?,
            "huber_delta" => self.huber_delta = parse(key, v)?,
            "checkpoint_dir" => self.checkpoint_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` file. Blank lines and `#` comments are
    /// ignored.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Resolved settings in the same `key = value` form.
    pub fn to_kv(&self) -> String {
        let m = self.model_config();
        let opt = |v: Option<f64>| v.map_or("auto".to_string(), |x| x.to_string());
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("lr", self.adam.lr.to_string());
        put("beta1", self.adam.beta1.to_string());
        put("beta2", self.adam.beta2.to_string());
        put("eps", self.adam.eps.to_string());
        put("epochs", self.epochs.to_string());
        put("seed", self.seed.to_string());
        put("z", m.z.to_string());
        put("q", m.q.to_string());
        put("mpn_layers", m.mpn_layers.to_string());
        put("hidden", m.hidden.to_string());
        put("k_neighbors", m.k_neighbors.to_string());
        put("attention", m.attention.to_string());
        put("bn_eps", m.bn_eps.to_string());
        put("desk_scale", self.desk_scale.to_string());
        put("mode", self.mode.to_string());
        put("patience", self.patience.to_string());
        put("clip_norm", self.clip_norm.to_string());
        put("w_seq", opt(self.w_seq));
        put("huber_delta", self.huber_delta.to_string());
        put(
            "checkpoint_dir",
            self.checkpoint_dir
                .as_ref()
                .map_or(String::new(), |p| p.display().to_string()),
        );
        s
    }
}

/// Forward pass plus loss for one bundle, without gradients.
pub fn forward_loss(
    model: &Mlsa,
    bundle: &LoopBundle,
    mode: Mode,
    weights: &LossWeights,
) -> Result<LossReport> {
    let tape = Tape::new();
    let params = model.bind(&tape);
    let trace = model.run_refinement(&tape, &params, bundle, mode)?;
    let (_, report) = total_loss(&tape, &trace, bundle, mode, weights)?;
    Ok(report)
}

/// Forward and backward pass for one bundle; gradients are added to the
/// model's parameter tensors.
pub fn accumulate_gradients(
    model: &mut Mlsa,
    bundle: &LoopBundle,
    mode: Mode,
    weights: &LossWeights,
) -> Result<LossReport> {
    let tape = Tape::new();
    let params = model.bind(&tape);
    let trace = model.run_refinement(&tape, &params, bundle, mode)?;
    let (total, report) = total_loss(&tape, &trace, bundle, mode, weights)?;
    if !report.total.is_finite() {
        return Err(Error::Numerical(format!(
            "record {}: non-finite loss",
            bundle.pdb_id
        )));
    }
    let grads = tape.backward(total)?;
    model.params.accumulate(&grads, &params);
    Ok(report)
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len().max(1) as f64;
    let avg = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    LossReport {
        l_seq: avg(|r| r.l_seq),
        l_d: avg(|r| r.l_d),
        l_beta: avg(|r| r.l_beta),
        l_ca: avg(|r| r.l_ca),
        l_struct: avg(|r| r.l_struct),
        total: avg(|r| r.total),
        per_iteration: Vec::new(),
        torsions_all_masked: reports.iter().all(|r| r.torsions_all_masked),
    }
}

/// Visiting order for `epoch`: a seeded shuffle of `0..n`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch as u64));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// One pass over `data` with one optimizer step per record. Returns the
/// mean report of the pre-update losses.
pub fn train_epoch(
    model: &mut Mlsa,
    opt: &mut AdamState,
    data: &[LoopBundle],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<LossReport> {
    if data.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    let weights = cfg.loss_weights();
    let mut reports = Vec::with_capacity(data.len());
    for i in epoch_order(data.len(), cfg.seed, epoch) {
        model.params.zero_grad();
        let report = accumulate_gradients(model, &data[i], cfg.mode, &weights)?;
        let norm = clip_grad_norm(&mut model.params, cfg.clip_norm);
        if !norm.is_finite() {
            return Err(Error::Numerical(format!(
                "record {}: non-finite gradient",
                data[i].pdb_id
            )));
        }
        adam_step(&mut model.params, opt, &cfg.adam)?;
        reports.push(report);
    }
    model.params.zero_grad();
    Ok(mean_report(&reports))
}

/// Mean total loss over `data`; records are evaluated in parallel.
pub fn mean_loss(
    model: &Mlsa,
    data: &[LoopBundle],
    mode: Mode,
    weights: &LossWeights,
) -> Result<LossReport> {
    let reports = data
        .par_iter()
        .map(|b| forward_loss(model, b, mode, weights))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_report(&reports))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossReport,
    pub val_total: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<EpochLog>,
}

/// Trains for up to `cfg.epochs` epochs. The metric is the mean validation
/// loss, or the training loss when `val` is empty. When `checkpoint_dir`
/// is set, `best.json` and `last.json` are written there.
pub fn fit(
    train: &[LoopBundle],
    val: &[LoopBundle],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<FitOutcome> {
    cfg.validate()?;
    let mut model = Mlsa::new(cfg.model_config(), cfg.seed)?;
    let mut opt = AdamState::for_params(&model.params);
    let weights = cfg.loss_weights();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut since_best = 0;
    let mut history = Vec::new();
    let mut last = Checkpoint::capture(&model, &opt, cfg, 0, None);

    for epoch in 1..=cfg.epochs {
        let train_report = train_epoch(&mut model, &mut opt, train, cfg, epoch)?;
        let val_total = if val.is_empty() {
            None
        } else {
            Some(mean_loss(&model, val, cfg.mode, &weights)?.total)
        };
        let metric = val_total.unwrap_or(train_report.total);
        if !metric.is_finite() {
            return Err(Error::Numerical(format!(
                "epoch {epoch}: non-finite metric"
            )));
        }
        let log = EpochLog {
            epoch,
            train: train_report,
            val_total,
        };
        on_epoch(&log);
        history.push(log);

        last = Checkpoint::capture(&model, &opt, cfg, epoch, Some(metric));
        if best.as_ref().is_none_or(|(m, _)| metric < *m) {
            best = Some((metric, last.clone()));
            since_best = 0;
            if let Some(dir) = &cfg.checkpoint_dir {
                last.save(dir.join("best.json"))?;
            }
        } else {
            since_best += 1;
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            last.save(dir.join("last.json"))?;
        }
        if cfg.patience > 0 && since_best >= cfg.patience {
            break;
        }
    }
    let best = best.map_or_else(|| last.clone(), |(_, c)| c);
    Ok(FitOutcome {
        best,
        last,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.apply_kv(
            "# comment\nlr = 0.01\nz=3\nhidden = auto\ndesk_scale = true\nmode = generative\n",
        )
        .unwrap();
        assert_eq!(cfg.adam.lr, 0.01);
        assert_eq!(cfg.model_config().hidden, 64);
        let mut again = TrainConfig::default();
        again.apply_kv(&cfg.to_kv()).unwrap();
        assert_eq!(again.model_config(), cfg.model_config());
        assert_eq!(again.mode, Mode::Generative);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.apply_kv("learning_rate = 1").is_err());
        assert!(cfg.apply_kv("z").is_err());
        cfg.z = 7;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn shuffle_is_seeded() {
        assert_eq!(epoch_order(10, 3, 1), epoch_order(10, 3, 1));
        assert_ne!(epoch_order(10, 3, 1), epoch_order(10, 3, 2));
    }
}
