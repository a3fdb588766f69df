//! Training configuration and the training loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Granularity, Split};
use crate::emb::EmbeddingTable;
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::metrics;
use crate::model::{
    loss_and_grad, round_to_checkpoint, LossInputs, LossWeights, ModelConfig, Params, DEFAULT_EMBED_DIM,
};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng;
use crate::sampling::{build_manual_batch, build_pair_batch};
use crate::setmatch::AlignConfig;
use crate::store::{FeatureStore, Scorer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub losses: LossWeights,
    pub batch_size: usize,
    pub epochs: usize,
    /// `None` runs enough steps to draw each labeled training segment
    /// once per epoch in expectation.
    pub steps_per_epoch: Option<usize>,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub granularity: Granularity,
    /// Granularity of the validation top-1 used to pick the best epoch.
    pub select_granularity: Granularity,
    pub embed_dim: usize,
    pub hidden: Option<usize>,
    pub sprf: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            losses: LossWeights::only(&[LossKind::VideoManual, LossKind::IntraManual]),
            batch_size: 128,
            epochs: 20,
            steps_per_epoch: None,
            optimizer: AdamWConfig::default(),
            seed: 0,
            granularity: Granularity::Step,
            select_granularity: Granularity::Step,
            embed_dim: DEFAULT_EMBED_DIM,
            hidden: None,
            sprf: true,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid value `{value}` for `{key}`"))),
    }
}

fn optional(value: &str) -> Option<&str> {
    (!matches!(value, "auto" | "none" | "")).then_some(value)
}

impl TrainConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (key, value) = (key.trim(), value.trim());
        match key {
            "losses" => {
                let kinds = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(str::parse)
                    .collect::<Result<Vec<LossKind>>>()?;
                self.losses = LossWeights::only(&kinds);
            }
            "batch_size" | "B" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "steps_per_epoch" => self.steps_per_epoch = optional(value).map(|v| parse(key, v)).transpose()?,
            "lr" => self.optimizer.lr = parse(key, value)?,
            "wd" | "weight_decay" => self.optimizer.weight_decay = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "granularity" => self.granularity = value.parse()?,
            "select_granularity" => self.select_granularity = value.parse()?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "hidden" => self.hidden = optional(value).map(|v| parse(key, v)).transpose()?,
            "sprf" => self.sprf = parse_bool(key, value)?,
            other => {
                if let Some(name) = other.strip_prefix("weight.") {
                    let kind: LossKind = name.parse()?;
                    self.losses.0.insert(kind, parse(key, value)?);
                } else {
                    return Err(Error::Config(format!("unknown setting `{other}`")));
                }
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the defaults. `#` starts a
    /// comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.losses.enabled().next().is_none() {
            return Err(Error::Config("no loss enabled".into()));
        }
        if self.losses.enabled().any(|(_, w)| !w.is_finite()) {
            return Err(Error::Config("loss weights must be finite".into()));
        }
        if self.batch_size == 0 || self.embed_dim == 0 || self.steps_per_epoch == Some(0) || self.hidden == Some(0) {
            return Err(Error::Config(
                "batch_size, embed_dim, steps_per_epoch and hidden must be positive".into(),
            ));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.weight_decay >= 0.0 && o.lr.is_finite() && o.weight_decay.is_finite()) {
            return Err(Error::Config(format!("invalid lr {} or wd {}", o.lr, o.weight_decay)));
        }
        Ok(())
    }

    /// The full configuration in the text format [`TrainConfig::parse_text`]
    /// reads.
    pub fn to_text(&self) -> String {
        let kinds: Vec<&str> = self.losses.enabled().map(|(k, _)| k.name()).collect();
        let mut s = String::new();
        let _ = writeln!(s, "losses = {}", kinds.join(","));
        for (k, w) in self.losses.enabled() {
            if w != 1.0 {
                let _ = writeln!(s, "weight.{} = {w}", k.name());
            }
        }
        let opt = |v: Option<usize>| v.map_or("auto".to_string(), |v| v.to_string());
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "steps_per_epoch = {}", opt(self.steps_per_epoch));
        let _ = writeln!(s, "lr = {:e}", self.optimizer.lr);
        let _ = writeln!(s, "wd = {:e}", self.optimizer.weight_decay);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "granularity = {}", self.granularity);
        let _ = writeln!(s, "select_granularity = {}", self.select_granularity);
        let _ = writeln!(s, "embed_dim = {}", self.embed_dim);
        let _ = writeln!(s, "hidden = {}", opt(self.hidden));
        let _ = writeln!(s, "sprf = {}", self.sprf);
        s
    }

    pub fn model_config(&self, video_raw_dim: usize, diagram_raw_dim: usize) -> ModelConfig {
        ModelConfig {
            video_raw_dim,
            diagram_raw_dim,
            hidden: self.hidden,
            embed_dim: self.embed_dim,
            use_sprf: self.sprf,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    /// Mean over the epoch's steps.
    pub total: f64,
    pub parts: BTreeMap<LossKind, f64>,
    pub val_top1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelConfig,
    /// Parameters of the selected epoch, rounded to checkpoint precision.
    pub params: Params,
    pub best_epoch: usize,
    pub best_val_top1: Option<f64>,
    pub initial_val_top1: Option<f64>,
    pub log: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn log_csv(&self, losses: &LossWeights) -> String {
        let kinds: Vec<LossKind> = losses.enabled().map(|(k, _)| k).collect();
        let mut s = String::from("epoch,total");
        for k in &kinds {
            let _ = write!(s, ",{}", k.name());
        }
        s.push_str(",val_top1\n");
        for e in &self.log {
            let _ = write!(s, "{},{}", e.epoch, e.total);
            for k in &kinds {
                let _ = write!(s, ",{}", e.parts.get(k).copied().unwrap_or(f64::NAN));
            }
            match e.val_top1 {
                Some(v) => {
                    let _ = writeln!(s, ",{v}");
                }
                None => s.push_str(",\n"),
            }
        }
        s
    }
}

/// Step-granularity raw top-1 on a split, or `None` when the split has no
/// labeled segments.
pub fn split_top1(
    store: &FeatureStore<'_>,
    params: &Params,
    split: Split,
    granularity: Granularity,
) -> Result<Option<f64>> {
    if store.dataset.segments_in(split, Some(granularity)).is_empty() {
        return Ok(None);
    }
    let scorer = Scorer { store, params };
    let scored = scorer.score_split(split, granularity, &AlignConfig::default())?;
    let m = metrics::evaluate_granularity(store.dataset, split, granularity, &scored.videos)?;
    Ok(Some(m.top1))
}

/// Trains both projection heads and keeps the epoch with the highest
/// validation top-1 (the last epoch when there is no validation data).
pub fn train(
    ds: &Dataset,
    diagrams: &EmbeddingTable,
    clips: &EmbeddingTable,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = cfg.model_config(clips.dim(), diagrams.dim());
    let store = FeatureStore::new(ds, diagrams, clips, cfg.sprf);
    let mut params = Params::init(&model, rng::mix_str(cfg.seed, "init"));
    let mut opt = AdamW::new(&params, cfg.optimizer);

    let labeled = ds.segments_in(Split::Train, Some(cfg.granularity)).len();
    if labeled == 0 {
        return Err(Error::InvalidDataset(format!(
            "no labeled {} segments in the training split",
            cfg.granularity
        )));
    }
    let steps = cfg.steps_per_epoch.unwrap_or_else(|| labeled.div_ceil(cfg.batch_size));
    let initial_val_top1 = split_top1(&store, &params, Split::Val, cfg.select_granularity)?;
    log::info!(
        "training {} epochs x {steps} steps; initial val top-1 {initial_val_top1:?}",
        cfg.epochs
    );

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, Option<f64>, Params)> = None;
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        let mut parts: BTreeMap<LossKind, f64> = BTreeMap::new();
        for step in 0..steps {
            let batch_seed = rng::mix(rng::mix(cfg.seed, epoch as u64), step as u64);
            let inputs = LossInputs {
                pair: if cfg.losses.needs_pairs() {
                    let b = build_pair_batch(ds, cfg.granularity, cfg.batch_size, rng::mix(batch_seed, 1))?;
                    Some(store.pair_inputs(&b)?)
                } else {
                    None
                },
                manual: if cfg.losses.needs_manuals() {
                    let b = build_manual_batch(ds, cfg.granularity, cfg.batch_size, rng::mix(batch_seed, 2))?;
                    Some(store.manual_inputs(&b)?)
                } else {
                    None
                },
            };
            let (loss, grads) = loss_and_grad(&params, &cfg.losses, &inputs)?;
            if !loss.total.is_finite() || !grads.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss or gradient at epoch {epoch}, step {step}"
                )));
            }
            total += loss.total;
            for (k, v) in loss.parts {
                *parts.entry(k).or_default() += v;
            }
            opt.step(&mut params, &grads);
        }
        let n = steps as f64;
        parts.values_mut().for_each(|v| *v /= n);
        let val_top1 = split_top1(&store, &params, Split::Val, cfg.select_granularity)?;
        log::info!("epoch {epoch}: loss {:.5}, val top-1 {val_top1:?}", total / n);
        log.push(EpochLog {
            epoch,
            steps,
            total: total / n,
            parts,
            val_top1,
        });
        let better = match (&best, val_top1) {
            (None, _) => true,
            (Some((_, Some(b), _)), Some(v)) => v > *b,
            (Some(_), None) => true,
            (Some((_, None, _)), Some(_)) => true,
        };
        if better {
            best = Some((epoch, val_top1, round_to_checkpoint(&params)));
        }
    }
    let (best_epoch, best_val_top1, params) = match best {
        Some(b) => b,
        None => (0, initial_val_top1, round_to_checkpoint(&params)),
    };
    Ok(TrainOutcome {
        model,
        params,
        best_epoch,
        best_val_top1,
        initial_val_top1,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    #[test]
    fn config_round_trip_and_defaults() {
        let cfg = TrainConfig::default();
        let text = cfg.to_text();
        assert!(text.contains("lr = 5e-4"));
        assert!(text.contains("wd = 5e-3"));
        assert!(text.contains("losses = video_manual,intra_manual"));
        assert_eq!(TrainConfig::parse_text(&text).unwrap(), cfg);

        let custom =
            TrainConfig::parse_text("losses = clip # baseline\nB = 16\nepochs=2\nhidden = 32\nsprf = false\n").unwrap();
        assert_eq!(custom.losses, LossWeights::only(&[LossKind::InfoNce]));
        assert_eq!(custom.batch_size, 16);
        assert_eq!(custom.hidden, Some(32));
        assert!(!custom.sprf);
        assert_eq!(TrainConfig::parse_text(&custom.to_text()).unwrap(), custom);
    }

    #[test]
    fn config_errors() {
        assert!(TrainConfig::parse_text("losses =\n").is_err());
        assert!(TrainConfig::parse_text("bogus = 1\n").is_err());
        assert!(TrainConfig::parse_text("lr = -1\n").is_err());
        assert!(TrainConfig::parse_text("epochs\n").is_err());
        assert!(TrainConfig::parse_text("losses = q\n").is_err());
    }

    #[test]
    fn smoke_run_is_deterministic() {
        let d = generate(&SynthConfig {
            n_manuals: 4,
            ..Default::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            embed_dim: 16,
            losses: LossWeights::only(&LossKind::ALL),
            ..Default::default()
        };
        let a = train(&d.dataset, &d.diagrams, &d.clips, &cfg).unwrap();
        let b = train(&d.dataset, &d.diagrams, &d.clips, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 2);
        assert!(a.log.iter().all(|e| e.total.is_finite()));
        let csv = a.log_csv(&cfg.losses);
        assert!(csv.starts_with("epoch,total,infonce,cossim,video_diagram,video_manual,intra_manual,val_top1\n"));
    }
}
