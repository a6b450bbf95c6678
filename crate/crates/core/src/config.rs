//! Model and training hyperparameters, presets, and the flat `key = value` file format.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::synthdata::SceneMode;

/// How the decoder sees the encoder output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    /// Every token of R.
    Detailed,
    /// R mean-pooled to a single token.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderMode {
    /// Queries concatenated to R under the decoder mask.
    ConcatAttn,
    /// Queries attend to R as keys and values only.
    CrossAttn,
}

macro_rules! keyword_enum {
    ($t:ty, $what:expr, $($v:path => $s:expr),+) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($v => $s),+ })
            }
        }

        impl FromStr for $t {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($v),)+
                    _ => Err(Error::invalid(format!("unknown {} {s:?}", $what))),
                }
            }
        }
    };
}

keyword_enum!(Conditioning, "conditioning",
    Conditioning::Detailed => "detailed", Conditioning::Global => "global");
keyword_enum!(DecoderMode, "decoder mode",
    DecoderMode::ConcatAttn => "concat_attn", DecoderMode::CrossAttn => "cross_attn");

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub enc_dim: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub dec_dim: usize,
    pub dec_layers: usize,
    pub dec_heads: usize,
    pub mlp_ratio: usize,
    /// Hidden-width ratio of the per-patch transformer in the XYZ tower.
    pub xyz_mlp_ratio: usize,
    pub use_rgb: bool,
    pub conditioning: Conditioning,
    pub decoder_mode: DecoderMode,
    pub n_queries: usize,
    pub tau: f64,
    pub occupancy_threshold: f64,
    /// Half-width of the object-mode query cube.
    pub object_range: f64,
    /// Half-width (x, y) and depth (z) of the scene-mode query box.
    pub scene_range: f64,
    pub color_bins: usize,
}

impl ModelConfig {
    /// CPU-sized preset used throughout the tests.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            enc_dim: 64,
            enc_layers: 2,
            enc_heads: 4,
            dec_dim: 64,
            dec_layers: 2,
            dec_heads: 4,
            mlp_ratio: 4,
            xyz_mlp_ratio: 2,
            use_rgb: true,
            conditioning: Conditioning::Detailed,
            decoder_mode: DecoderMode::ConcatAttn,
            n_queries: 128,
            tau: 0.1,
            occupancy_threshold: 0.1,
            object_range: 3.0,
            scene_range: 6.0,
            color_bins: 256,
        }
    }

    /// ViT-Base encoders and the 8-layer 512-wide decoder.
    pub fn paper() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            enc_dim: 768,
            enc_layers: 12,
            enc_heads: 12,
            dec_dim: 512,
            dec_layers: 8,
            dec_heads: 16,
            n_queries: 550,
            ..Self::desk()
        }
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.patches_per_side().pow(2)
    }

    /// Tokens in R: one per patch plus the global token.
    pub fn n_enc(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("enc_dim", self.enc_dim),
            ("enc_layers", self.enc_layers),
            ("enc_heads", self.enc_heads),
            ("dec_dim", self.dec_dim),
            ("dec_layers", self.dec_layers),
            ("dec_heads", self.dec_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("xyz_mlp_ratio", self.xyz_mlp_ratio),
            ("n_queries", self.n_queries),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{k} must be positive")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::invalid(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.enc_dim % self.enc_heads != 0 || self.dec_dim % self.dec_heads != 0 {
            return Err(Error::invalid("model widths must be divisible by head counts"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid("tau must be positive"));
        }
        if !(self.occupancy_threshold > 0.0 && self.occupancy_threshold < 1.0) {
            return Err(Error::invalid("occupancy_threshold must lie in (0, 1)"));
        }
        if !(self.object_range > 0.0 && self.scene_range > 0.0) {
            return Err(Error::invalid("query ranges must be positive"));
        }
        if self.color_bins != 256 {
            return Err(Error::invalid("color_bins must be 256"));
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("image_size", self.image_size.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("enc_dim", self.enc_dim.to_string()),
            ("enc_layers", self.enc_layers.to_string()),
            ("enc_heads", self.enc_heads.to_string()),
            ("dec_dim", self.dec_dim.to_string()),
            ("dec_layers", self.dec_layers.to_string()),
            ("dec_heads", self.dec_heads.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("xyz_mlp_ratio", self.xyz_mlp_ratio.to_string()),
            ("use_rgb", self.use_rgb.to_string()),
            ("conditioning", self.conditioning.to_string()),
            ("decoder_mode", self.decoder_mode.to_string()),
            ("n_queries", self.n_queries.to_string()),
            ("tau", self.tau.to_string()),
            ("occupancy_threshold", self.occupancy_threshold.to_string()),
            ("object_range", self.object_range.to_string()),
            ("scene_range", self.scene_range.to_string()),
            ("color_bins", self.color_bins.to_string()),
        ]
    }

    /// Names of fields whose values differ, formatted `key: a != b`.
    pub fn diff(&self, other: &ModelConfig) -> Vec<String> {
        self.entries()
            .into_iter()
            .zip(other.entries())
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, b)| format!("{}: {} != {}", a.0, a.1, b.1))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: SceneMode,
    pub lr: f64,
    pub warmup_frac: f64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub scale_aug_min: f64,
    pub scale_aug_max: f64,
    pub rotation_aug: bool,
    /// Per-axis rotation bound in degrees.
    pub rotation_range: f64,
    /// Weight λ of the color loss.
    pub color_weight: f64,
    pub log_interval: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            mode: SceneMode::Object,
            lr: 1e-3,
            warmup_frac: 0.05,
            total_steps: 2000,
            batch_size: 1,
            seed: 0,
            scale_aug_min: 0.8,
            scale_aug_max: 1.2,
            rotation_aug: true,
            rotation_range: 180.0,
            color_weight: 0.1,
            log_interval: 10,
            checkpoint_interval: 0,
        }
    }

    pub fn paper() -> Self {
        Self {
            lr: 1e-4,
            total_steps: 150_000,
            batch_size: 512,
            log_interval: 100,
            checkpoint_interval: 5000,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::invalid("warmup_frac must lie in [0, 1)"));
        }
        if self.total_steps == 0 || self.batch_size == 0 || self.log_interval == 0 {
            return Err(Error::invalid(
                "total_steps, batch_size and log_interval must be positive",
            ));
        }
        if !(self.scale_aug_min > 0.0 && self.scale_aug_max >= self.scale_aug_min) {
            return Err(Error::invalid("scale augmentation range must be positive and ordered"));
        }
        if !(0.0..=180.0).contains(&self.rotation_range) {
            return Err(Error::invalid("rotation_range must lie in [0, 180] degrees"));
        }
        if !(self.color_weight >= 0.0) {
            return Err(Error::invalid("color_weight must be non-negative"));
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("mode", self.mode.to_string()),
            ("lr", self.lr.to_string()),
            ("warmup_frac", self.warmup_frac.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("scale_aug_min", self.scale_aug_min.to_string()),
            ("scale_aug_max", self.scale_aug_max.to_string()),
            ("rotation_aug", self.rotation_aug.to_string()),
            ("rotation_range", self.rotation_range.to_string()),
            ("color_weight", self.color_weight.to_string()),
            ("log_interval", self.log_interval.to_string()),
            ("checkpoint_interval", self.checkpoint_interval.to_string()),
        ]
    }
}

/// Everything a training run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
        }
    }

    pub fn paper() -> Self {
        Self {
            model: ModelConfig::paper(),
            train: TrainConfig::paper(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# model\n");
        for (k, v) in self.model.entries() {
            s += &format!("{k} = {v}\n");
        }
        s += "\n# training\n";
        for (k, v) in self.train.entries() {
            s += &format!("{k} = {v}\n");
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Parses config text; `origin` only labels errors.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut map: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::parse(
                    origin,
                    format!("line {}", ln + 1),
                    "expected `key = value`",
                ));
            };
            let k = k.trim().to_string();
            if map.insert(k.clone(), (ln + 1, v.trim().to_string())).is_some() {
                return Err(Error::parse(origin, k, "duplicate key"));
            }
        }
        let mut r = Reader { map, origin };
        let model = ModelConfig {
            image_size: r.get("image_size")?,
            patch_size: r.get("patch_size")?,
            enc_dim: r.get("enc_dim")?,
            enc_layers: r.get("enc_layers")?,
            enc_heads: r.get("enc_heads")?,
            dec_dim: r.get("dec_dim")?,
            dec_layers: r.get("dec_layers")?,
            dec_heads: r.get("dec_heads")?,
            mlp_ratio: r.get("mlp_ratio")?,
            xyz_mlp_ratio: r.get("xyz_mlp_ratio")?,
            use_rgb: r.get("use_rgb")?,
            conditioning: r.get("conditioning")?,
            decoder_mode: r.get("decoder_mode")?,
            n_queries: r.get("n_queries")?,
            tau: r.get("tau")?,
            occupancy_threshold: r.get("occupancy_threshold")?,
            object_range: r.get("object_range")?,
            scene_range: r.get("scene_range")?,
            color_bins: r.get("color_bins")?,
        };
        let train = TrainConfig {
            mode: r.get("mode")?,
            lr: r.get("lr")?,
            warmup_frac: r.get("warmup_frac")?,
            total_steps: r.get("total_steps")?,
            batch_size: r.get("batch_size")?,
            seed: r.get("seed")?,
            scale_aug_min: r.get("scale_aug_min")?,
            scale_aug_max: r.get("scale_aug_max")?,
            rotation_aug: r.get("rotation_aug")?,
            rotation_range: r.get("rotation_range")?,
            color_weight: r.get("color_weight")?,
            log_interval: r.get("log_interval")?,
            checkpoint_interval: r.get("checkpoint_interval")?,
        };
        if let Some((k, (ln, _))) = r.map.iter().next() {
            return Err(Error::parse(origin, k.clone(), format!("unknown key on line {ln}")));
        }
        let cfg = Self { model, train };
        cfg.validate()
            .map_err(|e| Error::parse(origin, "config", e.to_string()))?;
        Ok(cfg)
    }
}

struct Reader<'a> {
    map: BTreeMap<String, (usize, String)>,
    origin: &'a Path,
}

impl Reader<'_> {
    fn get<T: FromStr>(&mut self, key: &str) -> Result<T> {
        let (ln, v) = self
            .map
            .remove(key)
            .ok_or_else(|| Error::parse(self.origin, key, "missing required key"))?;
        v.parse().map_err(|_| {
            Error::parse(self.origin, key, format!("cannot parse {v:?} on line {ln}"))
        })
    }
}
