//! Flat key=value run configuration.
//!
//! One file format feeds every command: `key = value` lines, `#` comments.
//! Unknown keys are rejected so typos fail loudly. Every run echoes its
//! effective config (plus seed and version) into the output directory before
//! doing any work, and the echo alone is enough to reproduce the run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: cannot parse `{value}`")]
    BadValue { key: String, value: String },
}

/// Everything a pipeline run needs. Defaults are the toy-scale values the
/// acceptance runs use; CLI flags and config files override.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    // world / data
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_edit_train: usize,

    // pixel codec
    pub codec_book: usize,
    pub codec_dim: usize,
    pub codec_patch: usize,
    pub codec_hidden: usize,
    pub codec_steps: usize,
    pub codec_batch: usize,
    pub codec_lr: f64,

    // morph encoder
    pub n_g: usize,
    pub k_m: usize,
    pub k_d: usize,
    pub d_model: usize,
    pub n_q: usize,
    pub n_v: usize,
    pub heads: usize,
    pub prior_mode: PriorMode,
    pub deconfound: bool,

    // language-model core
    pub layers: usize,
    pub max_text: usize,
    pub lora_on: bool,
    pub lora_r: usize,
    pub lora_alpha: f64,
    pub warm_start_steps: usize,

    // visual decoder
    pub dec_layers: usize,

    // training
    pub stage: u8,
    pub steps: usize,
    pub warmup: usize,
    pub lr_max: f64,
    pub batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub lambda_cap: f64,
    pub lambda_gen: f64,
    /// Fraction of stage-1 samples packed image-first (vs text-first).
    pub format_image_first_ratio: f64,
    /// Stage-2 objective mixing: sum both per batch, or alternate batches.
    pub stage2_alternate: bool,
    /// Stage-3 task mixture weights.
    pub w_caption: f64,
    pub w_t2i: f64,
    pub w_edit: f64,
    pub w_qa: f64,

    /// Model variant (main model or one of the ablations).
    pub variant: Variant,
    /// Fraction of training devoted to the generation objective in the
    /// conflict sweep; the remainder is comprehension.
    pub gen_share: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorMode {
    Empirical,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Full model: abstract pre-MLLM tokens, regenerated post-MLLM tokens,
    /// dedicated visual decoder, detached losses.
    Morph,
    /// Pixel tokens on both sides of the language model.
    DetailDetail,
    /// Post-MLLM tokens tied to pre-MLLM tokens by cross-entropy.
    AbstrAbstrVq,
    /// Language model emits pixel tokens directly; no visual decoder.
    WoDecoder,
    /// Intervention term removed from the encoder queries.
    WoDeconfound,
    /// No quantization; visual positions trained by MSE regression.
    Continuous,
}

impl Variant {
    pub fn parse(s: &str) -> Option<Variant> {
        match s {
            "morph" => Some(Variant::Morph),
            "detail-detail" => Some(Variant::DetailDetail),
            "abstr-abstr-vq" => Some(Variant::AbstrAbstrVq),
            "wo-decoder" => Some(Variant::WoDecoder),
            "wo-deconfound" => Some(Variant::WoDeconfound),
            "continuous" => Some(Variant::Continuous),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Morph => "morph",
            Variant::DetailDetail => "detail-detail",
            Variant::AbstrAbstrVq => "abstr-abstr-vq",
            Variant::WoDecoder => "wo-decoder",
            Variant::WoDeconfound => "wo-deconfound",
            Variant::Continuous => "continuous",
        }
    }
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 17,
            n_train: 20_000,
            n_val: 1_000,
            n_test: 1_000,
            n_edit_train: 10_000,

            codec_book: 256,
            codec_dim: 32,
            codec_patch: 4,
            codec_hidden: 64,
            codec_steps: 1_500,
            codec_batch: 32,
            codec_lr: 2e-3,

            n_g: 8,
            k_m: 64,
            k_d: 64,
            d_model: 64,
            n_q: 2,
            n_v: 2,
            heads: 4,
            prior_mode: PriorMode::Empirical,
            deconfound: true,

            layers: 4,
            max_text: 32,
            lora_on: false,
            lora_r: 4,
            lora_alpha: 8.0,
            warm_start_steps: 0,

            dec_layers: 4,

            stage: 1,
            steps: 3_000,
            warmup: 100,
            lr_max: 3e-4,
            batch: 32,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.05,
            lambda_cap: 1.0,
            lambda_gen: 1.0,
            format_image_first_ratio: 0.5,
            stage2_alternate: false,
            w_caption: 0.25,
            w_t2i: 0.2,
            w_edit: 0.45,
            w_qa: 0.1,

            variant: Variant::Morph,
            gen_share: 0.5,
        }
    }
}

macro_rules! config_keys {
    ($($key:literal => $field:ident : $kind:ident),* $(,)?) => {
        impl Config {
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                match key {
                    $($key => { self.$field = parse_field!($kind, key, value)?; Ok(()) })*
                    _ => Err(ConfigError::UnknownKey(key.to_string())),
                }
            }

            /// Flat, sorted view of every key; the echo and the config hash
            /// are both derived from this.
            pub fn to_map(&self) -> BTreeMap<String, String> {
                let mut m = BTreeMap::new();
                $(m.insert($key.to_string(), format_field!($kind, self.$field));)*
                m
            }
        }
    };
}

macro_rules! parse_field {
    (u64, $key:expr, $v:expr) => {
        $v.parse::<u64>().map_err(|_| ConfigError::BadValue { key: $key.into(), value: $v.into() })
    };
    (usize, $key:expr, $v:expr) => {
        $v.parse::<usize>()
            .map_err(|_| ConfigError::BadValue { key: $key.into(), value: $v.into() })
    };
    (u8, $key:expr, $v:expr) => {
        $v.parse::<u8>().map_err(|_| ConfigError::BadValue { key: $key.into(), value: $v.into() })
    };
    (f64, $key:expr, $v:expr) => {
        $v.parse::<f64>().map_err(|_| ConfigError::BadValue { key: $key.into(), value: $v.into() })
    };
    (bool, $key:expr, $v:expr) => {
        match $v {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            _ => Err(ConfigError::BadValue { key: $key.into(), value: $v.into() }),
        }
    };
    (prior, $key:expr, $v:expr) => {
        match $v {
            "empirical" => Ok(PriorMode::Empirical),
            "uniform" => Ok(PriorMode::Uniform),
            _ => Err(ConfigError::BadValue { key: $key.into(), value: $v.into() }),
        }
    };
    (variant, $key:expr, $v:expr) => {
        Variant::parse($v).ok_or_else(|| ConfigError::BadValue { key: $key.into(), value: $v.into() })
    };
}

macro_rules! format_field {
    (prior, $v:expr) => {
        match $v {
            PriorMode::Empirical => "empirical".to_string(),
            PriorMode::Uniform => "uniform".to_string(),
        }
    };
    (variant, $v:expr) => {
        $v.name().to_string()
    };
    ($kind:ident, $v:expr) => {
        $v.to_string()
    };
}

config_keys! {
    "seed" => seed: u64,
    "n_train" => n_train: usize,
    "n_val" => n_val: usize,
    "n_test" => n_test: usize,
    "n_edit_train" => n_edit_train: usize,
    "codec_book" => codec_book: usize,
    "codec_dim" => codec_dim: usize,
    "codec_patch" => codec_patch: usize,
    "codec_hidden" => codec_hidden: usize,
    "codec_steps" => codec_steps: usize,
    "codec_batch" => codec_batch: usize,
    "codec_lr" => codec_lr: f64,
    "n_g" => n_g: usize,
    "k_m" => k_m: usize,
    "k_d" => k_d: usize,
    "d_model" => d_model: usize,
    "n_q" => n_q: usize,
    "n_v" => n_v: usize,
    "heads" => heads: usize,
    "prior_mode" => prior_mode: prior,
    "deconfound" => deconfound: bool,
    "layers" => layers: usize,
    "max_text" => max_text: usize,
    "lora_on" => lora_on: bool,
    "lora_r" => lora_r: usize,
    "lora_alpha" => lora_alpha: f64,
    "warm_start_steps" => warm_start_steps: usize,
    "dec_layers" => dec_layers: usize,
    "stage" => stage: u8,
    "steps" => steps: usize,
    "warmup" => warmup: usize,
    "lr_max" => lr_max: f64,
    "batch" => batch: usize,
    "beta1" => beta1: f64,
    "beta2" => beta2: f64,
    "weight_decay" => weight_decay: f64,
    "lambda_cap" => lambda_cap: f64,
    "lambda_gen" => lambda_gen: f64,
    "format_image_first_ratio" => format_image_first_ratio: f64,
    "stage2_alternate" => stage2_alternate: bool,
    "w_caption" => w_caption: f64,
    "w_t2i" => w_t2i: f64,
    "w_edit" => w_edit: f64,
    "w_qa" => w_qa: f64,
    "variant" => variant: variant,
    "gen_share" => gen_share: f64,
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_overlaid(&text, Config::default())
    }

    pub fn from_str_overlaid(text: &str, mut base: Config) -> Result<Config, ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.to_string() })?;
            base.set(key.trim(), value.trim())?;
        }
        Ok(base)
    }

    pub fn echo(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_map() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Stable hash of the full config; ablation runs compare these (with the
    /// `variant` key masked out) to enforce equal budgets.
    pub fn hash(&self) -> u64 {
        self.hash_excluding(&[])
    }

    pub fn hash_excluding(&self, skip: &[&str]) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (k, v) in self.to_map() {
            if skip.contains(&k.as_str()) {
                continue;
            }
            for b in k.bytes().chain("=".bytes()).chain(v.bytes()).chain("\n".bytes()) {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }

    /// Image geometry is fixed by the synthetic world.
    pub fn image_size(&self) -> usize {
        32
    }

    pub fn pixel_tokens_len(&self) -> usize {
        let n = self.image_size() / self.codec_patch;
        n * n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_echo() {
        let mut cfg = Config::default();
        cfg.set("steps", "123").unwrap();
        cfg.set("variant", "wo-decoder").unwrap();
        cfg.set("prior_mode", "uniform").unwrap();
        let echo = cfg.echo();
        let back = Config::from_str_overlaid(&echo, Config::default()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut cfg = Config::default();
        assert!(matches!(cfg.set("nope", "1"), Err(ConfigError::UnknownKey(_))));
    }

    #[test]
    fn hash_masks_requested_keys() {
        let mut a = Config::default();
        let mut b = Config::default();
        a.set("variant", "morph").unwrap();
        b.set("variant", "detail-detail").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash_excluding(&["variant"]), b.hash_excluding(&["variant"]));
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = Config::from_str_overlaid("# comment\n\nsteps = 7 # trailing\n", Config::default())
            .unwrap();
        assert_eq!(cfg.steps, 7);
    }
}
