//! Flat `key = value` pipeline configuration.
//!
//! Blank lines and lines starting with `#` are ignored. A `profile` key picks
//! the base defaults (`paper` when absent); every other key overrides one
//! field. Unknown or repeated keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::{BackboneConfig, INPUT_MULTIPLE};
use crate::error::{Error, Result};
use crate::fqs::FqsConfig;
use crate::head::LossWeights;
use crate::hfe::HfeConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Square input extent expected by the model.
    pub input: usize,
    pub backbone: BackboneConfig,
    /// When off, both frequency streams receive 2x2-averaged level features.
    pub wavelet: bool,
    /// LFHA attention width; 0 means the level's channel count.
    pub attn_dim: usize,
    pub hfe: HfeConfig,
    pub fqs: FqsConfig,
    pub classes: usize,
    pub loss: LossWeights,
    pub step_size: f64,
    pub steps: usize,
    pub clip: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Paper,
    Test,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "test" => Ok(Profile::Test),
            other => Err(Error::Config(format!(
                "unknown profile `{other}` (expected paper or test)"
            ))),
        }
    }
}

impl PipelineConfig {
    pub fn paper() -> Self {
        PipelineConfig {
            seed: 0,
            input: 640,
            backbone: BackboneConfig {
                in_channels: 3,
                stem_channels: 64,
                level_channels: [512, 1024, 2048],
                blocks: 1,
            },
            wavelet: true,
            attn_dim: 0,
            hfe: HfeConfig::default(),
            fqs: FqsConfig::default(),
            classes: 3,
            loss: LossWeights::default(),
            step_size: 1e-4,
            steps: 200,
            clip: 10.0,
        }
    }

    pub fn test() -> Self {
        PipelineConfig {
            seed: 0,
            input: 64,
            backbone: BackboneConfig::default(),
            wavelet: true,
            attn_dim: 0,
            hfe: HfeConfig {
                width: 32,
                repblocks: 1,
                heads: 8,
            },
            fqs: FqsConfig {
                dim: 32,
                heads: 2,
                layers: 2,
                queries: 10,
                points: 2,
                ffn_dim: 64,
            },
            classes: 2,
            loss: LossWeights::default(),
            step_size: 0.05,
            steps: 200,
            clip: 10.0,
        }
    }

    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Paper => Self::paper(),
            Profile::Test => Self::test(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.fqs.validate()?;
        if self.input == 0 || !self.input.is_multiple_of(INPUT_MULTIPLE) {
            return Err(Error::Config(format!(
                "input {} must be a positive multiple of {INPUT_MULTIPLE}",
                self.input
            )));
        }
        if self.hfe.width == 0 || self.hfe.heads == 0 || self.classes == 0 {
            return Err(Error::Config("extents must be positive".into()));
        }
        if !self.backbone.level_channels[2].is_multiple_of(self.hfe.heads) {
            return Err(Error::Config(format!(
                "level-5 width {} is not divisible by {} attention heads",
                self.backbone.level_channels[2], self.hfe.heads
            )));
        }
        if self.backbone.level_channels.iter().any(|c| c % 2 != 0) {
            return Err(Error::Config(
                "level channel counts must be even for the channel swap".into(),
            ));
        }
        let tokens: usize = (0..3)
            .map(|i| (self.input >> (3 + i)).pow(2))
            .sum::<usize>()
            * 2;
        if self.fqs.queries > tokens {
            return Err(Error::Config(format!(
                "{} queries exceed the {tokens} available tokens",
                self.fqs.queries
            )));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0 && self.clip > 0.0) {
            return Err(Error::Config("step size and clip must be positive".into()));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{k}`",
                    no + 1
                )));
            }
        }
        let mut cfg = match entries.remove("profile") {
            Some(p) => Self::profile(p.parse()?),
            None => Self::paper(),
        };
        for (k, v) in &entries {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "input" => self.input = num(key, value)?,
            "stem_channels" => self.backbone.stem_channels = num(key, value)?,
            "level_channels" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| num(key, p.trim()))
                    .collect::<Result<_>>()?;
                self.backbone.level_channels = parts
                    .try_into()
                    .map_err(|_| Error::Config("`level_channels` needs three values".into()))?;
            }
            "backbone_blocks" => self.backbone.blocks = num(key, value)?,
            "wavelet" => {
                self.wavelet = match value {
                    "on" | "true" => true,
                    "off" | "false" => false,
                    _ => {
                        return Err(Error::Config(format!(
                            "`wavelet`: expected on or off, got `{value}`"
                        )))
                    }
                }
            }
            "attn_dim" => self.attn_dim = num(key, value)?,
            "hfe_width" => self.hfe.width = num(key, value)?,
            "repblocks" => self.hfe.repblocks = num(key, value)?,
            "hfe_heads" => self.hfe.heads = num(key, value)?,
            "dim" => self.fqs.dim = num(key, value)?,
            "heads" => self.fqs.heads = num(key, value)?,
            "layers" => self.fqs.layers = num(key, value)?,
            "queries" => self.fqs.queries = num(key, value)?,
            "points" => self.fqs.points = num(key, value)?,
            "ffn_dim" => self.fqs.ffn_dim = num(key, value)?,
            "classes" => self.classes = num(key, value)?,
            "lambda_cls" => self.loss.cls = num(key, value)?,
            "lambda_l1" => self.loss.l1 = num(key, value)?,
            "lambda_giou" => self.loss.giou = num(key, value)?,
            "step_size" => self.step_size = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "clip" => self.clip = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Serializes every field; parsing the result gives back `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let [c3, c4, c5] = self.backbone.level_channels;
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "input = {}", self.input);
        let _ = writeln!(s, "stem_channels = {}", self.backbone.stem_channels);
        let _ = writeln!(s, "level_channels = {c3},{c4},{c5}");
        let _ = writeln!(s, "backbone_blocks = {}", self.backbone.blocks);
        let _ = writeln!(s, "wavelet = {}", if self.wavelet { "on" } else { "off" });
        let _ = writeln!(s, "attn_dim = {}", self.attn_dim);
        let _ = writeln!(s, "hfe_width = {}", self.hfe.width);
        let _ = writeln!(s, "repblocks = {}", self.hfe.repblocks);
        let _ = writeln!(s, "hfe_heads = {}", self.hfe.heads);
        let _ = writeln!(s, "dim = {}", self.fqs.dim);
        let _ = writeln!(s, "heads = {}", self.fqs.heads);
        let _ = writeln!(s, "layers = {}", self.fqs.layers);
        let _ = writeln!(s, "queries = {}", self.fqs.queries);
        let _ = writeln!(s, "points = {}", self.fqs.points);
        let _ = writeln!(s, "ffn_dim = {}", self.fqs.ffn_dim);
        let _ = writeln!(s, "classes = {}", self.classes);
        let _ = writeln!(s, "lambda_cls = {}", self.loss.cls);
        let _ = writeln!(s, "lambda_l1 = {}", self.loss.l1);
        let _ = writeln!(s, "lambda_giou = {}", self.loss.giou);
        let _ = writeln!(s, "step_size = {}", self.step_size);
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "clip = {}", self.clip);
        s
    }

    /// LFHA attention width at a level with `channels` channels.
    pub fn attn_width(&self, channels: usize) -> usize {
        if self.attn_dim == 0 {
            channels
        } else {
            self.attn_dim
        }
    }
}
