//! Flat run configuration.
//!
//! One `key = value` TOML file holds every tunable of a run. Command-line
//! overrides use the same `key=value` form. Unknown keys are errors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::context::{ContextKind, DEFAULT_CONTEXT_PATCHES, DEFAULT_EMA_LAMBDA};
use crate::data::{SamplerKind, SyntheticShiftSpec};
use crate::error::{Error, Result};
use crate::train::{TrainConfig, TrainMode};
use crate::vit::ViTConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed for initialization, sampling and training. Not part of the hash.
    pub seed: u64,
    pub data_seed: u64,
    pub kind: String,
    pub ema_lambda: f64,
    pub context_patches: usize,

    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,

    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub base_lr: f64,
    pub final_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay_start: f64,
    pub weight_decay_end: f64,
    pub sampler: SamplerKind,
    pub mode: TrainMode,
    pub probe_epochs: usize,
    pub probe_lr: f64,

    pub train_groups: usize,
    pub ood_groups: usize,
    pub images_per_group: usize,
    pub signal_amp: f64,
    pub bias_max: f64,
    pub contrast_gamma: f64,
    pub texture_amp: f64,
    pub texture_rank: usize,
    pub noise_std: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,

    /// Dataset file; empty means generate one from the data keys above.
    pub dataset: String,
    /// Checkpoint to start from (required by probe, sweep, export-context).
    pub checkpoint: String,
    pub output_dir: String,

    /// Comma-separated kinds for `ablate`.
    pub ablation_kinds: String,
    /// Comma-separated seeds for `ablate`.
    pub ablation_seeds: String,
    /// Comma-separated evaluation batch sizes for `sweep`.
    pub sweep_sizes: String,
    pub export_layer: usize,
    pub export_batches_per_group: usize,
    pub export_batch_size: usize,
    pub pca_components: usize,
    pub grad_check_step: f64,
    pub grad_check_tolerance: f64,
    pub grad_check_coords: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let vit = ViTConfig::default();
        let train = TrainConfig::default();
        let spec = SyntheticShiftSpec::default();
        Self {
            seed: 0,
            data_seed: 0,
            kind: "mean_linear_detach".into(),
            ema_lambda: DEFAULT_EMA_LAMBDA,
            context_patches: DEFAULT_CONTEXT_PATCHES,
            image_h: vit.image_h,
            image_w: vit.image_w,
            channels: vit.channels,
            patch: vit.patch,
            dim: vit.dim,
            depth: vit.depth,
            heads: vit.heads,
            mlp_ratio: vit.mlp_ratio,
            num_classes: vit.num_classes,
            epochs: train.epochs,
            batch_size: train.batch_size,
            eval_batch_size: train.eval_batch_size,
            base_lr: train.base_lr,
            final_lr: train.final_lr,
            warmup_epochs: train.warmup_epochs,
            weight_decay_start: train.weight_decay_start,
            weight_decay_end: train.weight_decay_end,
            sampler: train.sampler,
            mode: train.mode,
            probe_epochs: 10,
            probe_lr: 0.05,
            train_groups: spec.train_groups,
            ood_groups: spec.ood_groups,
            images_per_group: spec.images_per_group,
            signal_amp: spec.signal_amp,
            bias_max: spec.bias_max,
            contrast_gamma: spec.contrast_gamma,
            texture_amp: spec.texture_amp,
            texture_rank: spec.texture_rank,
            noise_std: spec.noise_std,
            val_fraction: spec.val_fraction,
            test_fraction: spec.test_fraction,
            dataset: String::new(),
            checkpoint: String::new(),
            output_dir: "runs".into(),
            ablation_kinds: "none,mean,mean_linear,mean_linear_detach,layerwise_mean_linear_detach".into(),
            ablation_seeds: "0,1,2".into(),
            sweep_sizes: "1,8,64".into(),
            export_layer: 0,
            export_batches_per_group: 50,
            export_batch_size: 16,
            pca_components: 2,
            grad_check_step: 1e-4,
            grad_check_tolerance: 1e-4,
            grad_check_coords: 6,
        }
    }
}

impl RunConfig {
    /// Parses a config file's text, then applies `key=value` overrides.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let defaults = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let key = key.trim();
            let value = value.trim();
            // String-valued keys take the text verbatim (so `sweep_sizes=8`
            // stays a list); others take a typed TOML value if one parses.
            let typed = format!("v = {value}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"));
            let wants_string = matches!(defaults.get(key), Some(toml::Value::String(_)));
            let parsed = match typed {
                Some(v) if !wants_string || v.is_str() => v,
                _ => toml::Value::String(value.to_string()),
            };
            table.insert(key.to_string(), parsed);
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.context_kind()?;
        self.vit().validate()?;
        self.train().validate()?;
        self.spec().validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.probe_epochs == 0 || !(self.probe_lr > 0.0) {
            return Err(Error::Config("probe_epochs and probe_lr must be positive".into()));
        }
        for kind in self.ablation_kind_list()? {
            kind.validate()?;
        }
        self.ablation_seed_list()?;
        self.sweep_size_list()?;
        Ok(())
    }

    /// Fully resolved TOML text; every tunable appears.
    pub fn resolved(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    /// SHA-256 of the resolved config with the seed removed, hex encoded.
    pub fn content_hash(&self) -> String {
        let unseeded = RunConfig { seed: 0, ..self.clone() };
        hex::encode(Sha256::digest(unseeded.resolved().as_bytes()))
    }

    pub fn short_hash(&self) -> String {
        self.content_hash()[..12].to_string()
    }

    pub fn context_kind(&self) -> Result<ContextKind> {
        let kind: ContextKind = self.kind.parse()?;
        Ok(kind
            .with_ema_lambda(self.ema_lambda)
            .with_context_patches(self.context_patches))
    }

    pub fn vit(&self) -> ViTConfig {
        ViTConfig {
            image_h: self.image_h,
            image_w: self.image_w,
            channels: self.channels,
            patch: self.patch,
            dim: self.dim,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            num_classes: self.num_classes,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            eval_batch_size: self.eval_batch_size,
            base_lr: self.base_lr,
            final_lr: self.final_lr,
            warmup_epochs: self.warmup_epochs,
            weight_decay_start: self.weight_decay_start,
            weight_decay_end: self.weight_decay_end,
            seed: self.seed,
            sampler: self.sampler,
            mode: self.mode,
        }
    }

    /// Training config for linear probing.
    pub fn probe(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.probe_epochs,
            base_lr: self.probe_lr,
            final_lr: self.probe_lr * 1e-2,
            warmup_epochs: 0,
            weight_decay_start: 0.0,
            weight_decay_end: 0.0,
            mode: TrainMode::Probe,
            ..self.train()
        }
    }

    pub fn spec(&self) -> SyntheticShiftSpec {
        SyntheticShiftSpec {
            num_classes: self.num_classes,
            train_groups: self.train_groups,
            ood_groups: self.ood_groups,
            images_per_group: self.images_per_group,
            image_h: self.image_h,
            image_w: self.image_w,
            channels: self.channels,
            patch: self.patch,
            signal_amp: self.signal_amp,
            bias_max: self.bias_max,
            contrast_gamma: self.contrast_gamma,
            texture_amp: self.texture_amp,
            texture_rank: self.texture_rank,
            noise_std: self.noise_std,
            val_fraction: self.val_fraction,
            test_fraction: self.test_fraction,
        }
    }

    pub fn ablation_kind_list(&self) -> Result<Vec<ContextKind>> {
        split_list(&self.ablation_kinds)
            .map(|k| {
                let kind: ContextKind = k.parse()?;
                Ok(kind.with_ema_lambda(self.ema_lambda).with_context_patches(self.context_patches))
            })
            .collect()
    }

    pub fn ablation_seed_list(&self) -> Result<Vec<u64>> {
        parse_numbers(&self.ablation_seeds, "ablation_seeds")
    }

    pub fn sweep_size_list(&self) -> Result<Vec<usize>> {
        parse_numbers(&self.sweep_sizes, "sweep_sizes")
    }

    pub fn checkpoint_path(&self) -> Option<PathBuf> {
        (!self.checkpoint.is_empty()).then(|| PathBuf::from(&self.checkpoint))
    }
}

fn split_list(s: &str) -> impl Iterator<Item = &str> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty())
}

fn parse_numbers<T: std::str::FromStr>(s: &str, key: &str) -> Result<Vec<T>> {
    let out: Vec<T> = split_list(s)
        .map(|x| x.parse().map_err(|_| Error::Config(format!("{key}: {x:?} is not a number"))))
        .collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(Error::Config(format!("{key} is empty")));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_file() {
        let c = RunConfig::parse("", &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(RunConfig::parse(&c.resolved(), &[]).unwrap(), c);
    }

    #[test]
    fn overrides_are_typed() {
        let c = RunConfig::parse(
            "epochs = 3\n",
            &["kind=none".into(), "base_lr=0.01".into(), "sampler=\"context\"".into(), "epochs=5".into()],
        )
        .unwrap();
        assert_eq!(c.kind, "none");
        assert_eq!(c.base_lr, 0.01);
        assert_eq!(c.sampler, SamplerKind::Context);
        assert_eq!(c.epochs, 5);

        // Text-valued keys keep numeric-looking values as text.
        let c = RunConfig::parse("", &["ablation_seeds=0".into(), "sweep_sizes=8".into(), "kind=\"mean\"".into()]).unwrap();
        assert_eq!(c.ablation_seed_list().unwrap(), vec![0]);
        assert_eq!(c.sweep_size_list().unwrap(), vec![8]);
        assert_eq!(c.kind, "mean");
    }

    #[test]
    fn unknown_and_malformed_keys_rejected() {
        assert!(RunConfig::parse("colour = 3\n", &[]).is_err());
        assert!(RunConfig::parse("epochs = \"ten\"\n", &[]).is_err());
        assert!(RunConfig::parse("epochs = \n", &[]).is_err());
        assert!(RunConfig::parse("", &["bogus=1".into()]).is_err());
        assert!(RunConfig::parse("", &["noequals".into()]).is_err());
        assert!(RunConfig::parse("kind = \"median\"\n", &[]).is_err());
        assert!(RunConfig::parse("warmup_epochs = 40\n", &[]).is_err());
    }

    #[test]
    fn hash_ignores_seed_only() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 9, ..a.clone() };
        let c = RunConfig { epochs: 29, ..a.clone() };
        assert_eq!(a.content_hash(), b.content_hash());
        assert_ne!(a.content_hash(), c.content_hash());
        assert_eq!(a.content_hash().len(), 64);
    }
}
