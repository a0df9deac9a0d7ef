//! Sectioned `key = value` run configuration.
//!
//! Every key can be overridden from the environment as
//! `FEATBRIDGE_<SECTION>_<KEY>` (upper case), e.g. `FEATBRIDGE_TRAIN_LR`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::aligner::AlignerConfig;
use crate::dit::DitConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pca::TailDropPolicy;
use crate::scene::SceneSpec;
use crate::train::TrainConfig;

pub const ENV_PREFIX: &str = "FEATBRIDGE";

trait Value: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! display_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

display_value!(usize, u64, f64, bool, String);

impl Value for Vec<usize> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{e}")))
            .collect()
    }
    fn render(&self) -> String {
        self.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

macro_rules! sections {
    ($($field:ident : $ty:ident [$name:literal] { $($key:ident : $kt:ty = $default:expr),* $(,)? })*) => {
        $(
            #[derive(Debug, Clone, PartialEq)]
            pub struct $ty {
                $(pub $key: $kt,)*
            }

            impl Default for $ty {
                fn default() -> Self {
                    Self { $($key: $default,)* }
                }
            }
        )*

        #[derive(Debug, Clone, PartialEq, Default)]
        pub struct Config {
            $(pub $field: $ty,)*
        }

        impl Config {
            fn from_entries(mut entries: BTreeMap<(String, String), String>) -> Result<Self> {
                let mut cfg = Config::default();
                $($(
                    if let Some(raw) = entries.remove(&($name.to_string(), stringify!($key).to_string())) {
                        cfg.$field.$key = <$kt as Value>::parse_value(&raw).map_err(|e| {
                            Error::config(format!(
                                "[{}] {} = {raw:?}: {e}", $name, stringify!($key)
                            ))
                        })?;
                    }
                )*)*
                if let Some(((sec, key), _)) = entries.into_iter().next() {
                    return Err(Error::config(format!("unknown key {key} in section [{sec}]")));
                }
                Ok(cfg)
            }

            /// Every `(section, key)` pair the format accepts.
            pub fn keys() -> Vec<(&'static str, &'static str)> {
                vec![$($(($name, stringify!($key)),)*)*]
            }

            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $(
                    out.push_str(&format!("[{}]\n", $name));
                    $(out.push_str(&format!("{} = {}\n", stringify!($key), Value::render(&self.$field.$key)));)*
                    out.push('\n');
                )*
                out
            }
        }
    };
}

sections! {
    data: DataSection ["data"] {
        root: String = String::new(),
        clips: usize = 8,
        frames: usize = 17,
        height: usize = 64,
        width: usize = 64,
        objects: usize = 3,
        seed: u64 = 0,
    }
    vfm: VfmSection ["vfm"] {
        channels: usize = 64,
        scale: usize = 4,
        seed: u64 = 7,
    }
    pca: PcaSection ["pca"] {
        k_max: usize = 32,
        batch: usize = 256,
        seed: u64 = 0,
        whiten: bool = true,
        basis: String = "pca_basis.bin".to_string(),
    }
    aligner: AlignerSection ["aligner"] {
        hidden: usize = 32,
        out_channels: usize = 64,
        temporal_ratio: usize = 4,
        temporal_kernel: usize = 5,
    }
    dit: DitSection ["dit"] {
        depth: usize = 8,
        width: usize = 64,
        heads: usize = 4,
        mlp_ratio: usize = 4,
        head_hidden: usize = 512,
    }
    control: ControlSection ["control"] {
        interval: usize = 2,
    }
    train: TrainSection ["train"] {
        steps: u64 = 2000,
        lr: f64 = 5e-5,
        batch: usize = 1,
        chunk_frames: usize = 17,
        candidates: Vec<usize> = vec![3, 8, 16, 32],
        seed: u64 = 0,
        checkpoint_every: u64 = 500,
        pretrain_steps: u64 = 8000,
        pretrain_lr: f64 = 1e-3,
        out: String = "run".to_string(),
    }
    infer: InferSection ["infer"] {
        k: usize = 8,
        steps: usize = 20,
        seed: u64 = 0,
        chunk_frames: usize = 17,
        checkpoint: String = "run/final.bin".to_string(),
        out: String = "translated".to_string(),
    }
    eval: EvalSection ["eval"] {
        patch: usize = 16,
        pairs: usize = 2000,
        seed: u64 = 0,
        window: usize = 1,
    }
}

/// Splits the text into `(section, key) -> value`, rejecting malformed lines
/// and duplicates.
fn entries(text: &str) -> Result<BTreeMap<(String, String), String>> {
    let mut out = BTreeMap::new();
    let mut section: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            if !Config::keys().iter().any(|(s, _)| *s == name) {
                return Err(Error::config(format!("line {}: unknown section [{name}]", i + 1)));
            }
            section = Some(name.to_string());
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got {line:?}", i + 1)))?;
        let sec = section
            .clone()
            .ok_or_else(|| Error::config(format!("line {}: key outside of any section", i + 1)))?;
        let key = (sec.clone(), k.trim().to_string());
        if out.insert(key, v.trim().to_string()).is_some() {
            return Err(Error::config(format!("line {}: duplicate key {} in [{sec}]", i + 1, k.trim())));
        }
    }
    Ok(out)
}

pub fn env_name(section: &str, key: &str) -> String {
    format!("{ENV_PREFIX}_{}_{}", section.to_uppercase(), key.to_uppercase())
}

impl Config {
    /// Parses without environment overrides.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_env(text, |_| None)
    }

    /// Parses, then applies overrides looked up by [`env_name`].
    pub fn parse_with_env(text: &str, env: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let mut e = entries(text)?;
        for (sec, key) in Self::keys() {
            if let Some(v) = env(&env_name(sec, key)) {
                e.insert((sec.to_string(), key.to_string()), v);
            }
        }
        let cfg = Self::from_entries(e)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_with_env(&text, |k| std::env::var(k).ok())
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.root.is_empty() {
            return Err(Error::config("missing required key root in section [data]"));
        }
        self.model_config()?.validate()?;
        self.policy()?;
        if self.infer.k == 0 || self.infer.k > self.pca.k_max {
            return Err(Error::config(format!(
                "[infer] k = {} is outside the valid range [1, {}]",
                self.infer.k, self.pca.k_max
            )));
        }
        if self.infer.steps == 0 {
            return Err(Error::config("[infer] steps must be >= 1"));
        }
        if self.eval.window == 0 || self.eval.pairs == 0 {
            return Err(Error::config("[eval] window and pairs must be >= 1"));
        }
        Ok(())
    }

    pub fn root(&self) -> PathBuf {
        PathBuf::from(&self.data.root)
    }

    /// Resolves a path relative to the data root unless it is absolute.
    pub fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root().join(p)
        }
    }

    pub fn basis_path(&self) -> PathBuf {
        self.resolve(&self.pca.basis)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            aligner: AlignerConfig {
                scale: self.vfm.scale,
                in_channels: self.pca.k_max,
                hidden: self.aligner.hidden,
                out_channels: self.aligner.out_channels,
                temporal_ratio: self.aligner.temporal_ratio,
                temporal_kernel: self.aligner.temporal_kernel,
            },
            dit: DitConfig {
                depth: self.dit.depth,
                width: self.dit.width,
                heads: self.dit.heads,
                mlp_ratio: self.dit.mlp_ratio,
                head_hidden: self.dit.head_hidden,
            },
            interval: self.control.interval,
        })
    }

    pub fn policy(&self) -> Result<TailDropPolicy> {
        let policy = TailDropPolicy::uniform(self.train.candidates.clone())?;
        if policy.k_max() != self.pca.k_max {
            return Err(Error::config(format!(
                "[train] candidates must end at [pca] k_max = {}",
                self.pca.k_max
            )));
        }
        Ok(policy)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            steps: self.train.steps,
            lr: self.train.lr,
            batch: self.train.batch,
            chunk_frames: self.train.chunk_frames,
            policy: self.policy()?,
            seed: self.train.seed,
            checkpoint_every: self.train.checkpoint_every,
        })
    }

    /// Scene specs for the toy dataset, one per clip.
    pub fn scene_specs(&self) -> Vec<SceneSpec> {
        (0..self.data.clips)
            .map(|i| {
                SceneSpec::new(
                    self.data.seed.wrapping_add(i as u64),
                    self.data.objects,
                    self.data.frames,
                    self.data.height,
                    self.data.width,
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let cfg = Config::parse("[data]\nroot = /tmp/x\n[train]\nlr = 0.0001\n").unwrap();
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!(Config::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_and_missing_keys() {
        let err = Config::parse("[data]\nroot = x\nbogus = 1\n").unwrap_err().to_string();
        assert!(err.contains("bogus") && err.contains("[data]"), "{err}");
        let err = Config::parse("[train]\nlr = 1\n").unwrap_err().to_string();
        assert!(err.contains("root") && err.contains("[data]"), "{err}");
    }

    #[test]
    fn env_override() {
        let cfg = Config::parse_with_env("[data]\nroot = x\n", |k| {
            (k == "FEATBRIDGE_INFER_K").then(|| "16".to_string())
        })
        .unwrap();
        assert_eq!(cfg.infer.k, 16);
    }

    #[test]
    fn k_out_of_range() {
        let err = Config::parse("[data]\nroot = x\n[infer]\nk = 99\n").unwrap_err().to_string();
        assert!(err.contains("[1, 32]"), "{err}");
    }
}
