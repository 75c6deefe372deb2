//! Run configuration as flat dotted keys.
//!
//! Files hold one `key = value` per line; `#` starts a comment. Unknown keys
//! and unparsable values are collected and reported together.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use blg_core::depth::{Convention, DepthKind, DepthSource, Normalization};
use blg_core::trainer::TrainConfig;
use blg_core::{Error, Result};

pub const ENV_OUTPUT_DIR: &str = "BLG_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_ROOT: &str = "blg-out";

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Manifest CSV; takes precedence over synthetic data.
    pub manifest: Option<PathBuf>,
    /// Number of synthetic training pairs when no manifest is given.
    pub synthetic: usize,
    /// Side length of synthetic pairs.
    pub size: usize,
    /// Number of synthetic validation pairs.
    pub val_count: usize,
    pub train_split: String,
    pub val_split: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { manifest: None, synthetic: 16, size: 64, val_count: 4, train_split: "train".into(), val_split: "val".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub depth: DepthSource,
    /// Empty means `$BLG_OUTPUT_DIR/train`, or `blg-out/train`.
    pub output_dir: PathBuf,
}

/// Every key, in file order.
pub const KEYS: &[&str] = &[
    "train.pretrain_epochs",
    "train.refine_epochs",
    "train.batch_size",
    "train.lr",
    "train.beta1",
    "train.beta2",
    "train.seed",
    "train.checkpoint_every",
    "train.steps_per_epoch",
    "train.crop_size",
    "loss.pretrain.l1",
    "loss.pretrain.ssim",
    "loss.pretrain.edgediff",
    "loss.pretrain.backblur",
    "loss.pretrain.foreedge",
    "loss.refine.l1",
    "loss.refine.ssim",
    "loss.refine.vgg",
    "loss.refine.adv",
    "generator.width",
    "generator.enc_blocks",
    "generator.mid_blocks",
    "generator.dec_blocks",
    "generator.ending_init_scale",
    "discriminator.depths",
    "discriminator.base_channels",
    "discriminator.gp_lambda",
    "data.manifest",
    "data.synthetic",
    "data.size",
    "data.val_count",
    "data.train_split",
    "data.val_split",
    "depth.kind",
    "depth.command",
    "depth.normalization",
    "depth.convention",
    "output.dir",
];

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| format!("{v:?}: {e}"))
}

fn parse_list(v: &str) -> std::result::Result<Vec<usize>, String> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse::<usize>(p.trim())).collect()
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_bool_word<T: Copy>(v: &str, options: &[(&str, T)]) -> std::result::Result<T, String> {
    options.iter().find(|(n, _)| *n == v).map(|(_, t)| *t).ok_or_else(|| {
        let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
        format!("{v:?} is not one of {}", names.join(", "))
    })
}

const NORMALIZATIONS: &[(&str, Normalization)] = &[("minmax", Normalization::Minmax), ("fixed_range", Normalization::FixedRange)];
const CONVENTIONS: &[(&str, Convention)] = &[("disparity", Convention::Disparity), ("depth", Convention::Depth)];

pub fn depth_kind_name(kind: &DepthKind) -> &'static str {
    match kind {
        DepthKind::PrecomputedFile => "precomputed_file",
        DepthKind::SyntheticGradient => "synthetic_gradient",
        DepthKind::ExternalCommand { .. } => "external_command",
    }
}

impl RunConfig {
    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let (pw, rw) = (&t.pretrain_weights, &t.refine_weights);
        Some(match key {
            "train.pretrain_epochs" => t.pretrain_epochs.to_string(),
            "train.refine_epochs" => t.refine_epochs.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.lr" => t.lr.to_string(),
            "train.beta1" => t.beta1.to_string(),
            "train.beta2" => t.beta2.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.checkpoint_every" => t.checkpoint_every.to_string(),
            "train.steps_per_epoch" => t.steps_per_epoch.to_string(),
            "train.crop_size" => t.crop_size.to_string(),
            "loss.pretrain.l1" => pw.l1.to_string(),
            "loss.pretrain.ssim" => pw.ssim.to_string(),
            "loss.pretrain.edgediff" => pw.edgediff.to_string(),
            "loss.pretrain.backblur" => pw.backblur.to_string(),
            "loss.pretrain.foreedge" => pw.foreedge.to_string(),
            "loss.refine.l1" => rw.l1.to_string(),
            "loss.refine.ssim" => rw.ssim.to_string(),
            "loss.refine.vgg" => rw.vgg.to_string(),
            "loss.refine.adv" => rw.adv.to_string(),
            "generator.width" => t.generator.width.to_string(),
            "generator.enc_blocks" => list(&t.generator.enc_blocks),
            "generator.mid_blocks" => t.generator.mid_blocks.to_string(),
            "generator.dec_blocks" => list(&t.generator.dec_blocks),
            "generator.ending_init_scale" => t.generator.ending_init_scale.to_string(),
            "discriminator.depths" => list(&t.discriminator.depths),
            "discriminator.base_channels" => t.discriminator.base_channels.to_string(),
            "discriminator.gp_lambda" => t.discriminator.gp_lambda.to_string(),
            "data.manifest" => self.data.manifest.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "data.synthetic" => self.data.synthetic.to_string(),
            "data.size" => self.data.size.to_string(),
            "data.val_count" => self.data.val_count.to_string(),
            "data.train_split" => self.data.train_split.clone(),
            "data.val_split" => self.data.val_split.clone(),
            "depth.kind" => depth_kind_name(&self.depth.kind).to_string(),
            "depth.command" => match &self.depth.kind {
                DepthKind::ExternalCommand { program } => program.display().to_string(),
                _ => String::new(),
            },
            "depth.normalization" => NORMALIZATIONS.iter().find(|(_, n)| *n == self.depth.normalization)?.0.to_string(),
            "depth.convention" => CONVENTIONS.iter().find(|(_, c)| *c == self.depth.convention)?.0.to_string(),
            "output.dir" => self.output_dir.display().to_string(),
            _ => return None,
        })
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let v = v.trim();
        let t = &mut self.train;
        match key {
            "train.pretrain_epochs" => t.pretrain_epochs = parse(v)?,
            "train.refine_epochs" => t.refine_epochs = parse(v)?,
            "train.batch_size" => t.batch_size = parse(v)?,
            "train.lr" => t.lr = parse(v)?,
            "train.beta1" => t.beta1 = parse(v)?,
            "train.beta2" => t.beta2 = parse(v)?,
            "train.seed" => t.seed = parse(v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(v)?,
            "train.steps_per_epoch" => t.steps_per_epoch = parse(v)?,
            "train.crop_size" => t.crop_size = parse(v)?,
            "loss.pretrain.l1" => t.pretrain_weights.l1 = parse(v)?,
            "loss.pretrain.ssim" => t.pretrain_weights.ssim = parse(v)?,
            "loss.pretrain.edgediff" => t.pretrain_weights.edgediff = parse(v)?,
            "loss.pretrain.backblur" => t.pretrain_weights.backblur = parse(v)?,
            "loss.pretrain.foreedge" => t.pretrain_weights.foreedge = parse(v)?,
            "loss.refine.l1" => t.refine_weights.l1 = parse(v)?,
            "loss.refine.ssim" => t.refine_weights.ssim = parse(v)?,
            "loss.refine.vgg" => t.refine_weights.vgg = parse(v)?,
            "loss.refine.adv" => t.refine_weights.adv = parse(v)?,
            "generator.width" => t.generator.width = parse(v)?,
            "generator.enc_blocks" => t.generator.enc_blocks = parse_list(v)?,
            "generator.mid_blocks" => t.generator.mid_blocks = parse(v)?,
            "generator.dec_blocks" => t.generator.dec_blocks = parse_list(v)?,
            "generator.ending_init_scale" => t.generator.ending_init_scale = parse(v)?,
            "discriminator.depths" => t.discriminator.depths = parse_list(v)?,
            "discriminator.base_channels" => t.discriminator.base_channels = parse(v)?,
            "discriminator.gp_lambda" => t.discriminator.gp_lambda = parse(v)?,
            "data.manifest" => self.data.manifest = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.synthetic" => self.data.synthetic = parse(v)?,
            "data.size" => self.data.size = parse(v)?,
            "data.val_count" => self.data.val_count = parse(v)?,
            "data.train_split" => self.data.train_split = v.to_string(),
            "data.val_split" => self.data.val_split = v.to_string(),
            "depth.kind" => {
                let program = match &self.depth.kind {
                    DepthKind::ExternalCommand { program } => program.clone(),
                    _ => PathBuf::new(),
                };
                self.depth.kind = match v {
                    "precomputed_file" => DepthKind::PrecomputedFile,
                    "synthetic_gradient" => DepthKind::SyntheticGradient,
                    "external_command" => DepthKind::ExternalCommand { program },
                    other => {
                        return Err(format!(
                            "{other:?} is not one of precomputed_file, synthetic_gradient, external_command"
                        ))
                    }
                }
            }
            "depth.command" => {
                if !v.is_empty() {
                    self.depth.kind = DepthKind::ExternalCommand { program: PathBuf::from(v) };
                }
            }
            "depth.normalization" => self.depth.normalization = parse_bool_word(v, NORMALIZATIONS)?,
            "depth.convention" => self.depth.convention = parse_bool_word(v, CONVENTIONS)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Applies `key = value` pairs, collecting every failure.
    pub fn apply<'a>(&mut self, entries: impl IntoIterator<Item = (String, &'a str)>) -> Result<()> {
        let mut errors = Vec::new();
        for (key, value) in entries {
            if let Err(e) = self.set(&key, value) {
                errors.push(format!("{key}: {e}"));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("{} bad key(s): {}", errors.len(), errors.join("; "))))
        }
    }

    /// Applies a config file on top of `self`.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::Config(format!("config file {} not found", path.display())));
        }
        let text = std::fs::read_to_string(path)?;
        let (entries, mut errors) = parse_entries(&text);
        if let Err(Error::Config(msg)) = self.apply(entries.iter().map(|(k, v)| (k.clone(), v.as_str()))) {
            errors.push(msg);
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("{}: {}", path.display(), errors.join("; "))))
        }
    }

    /// All keys with their current values, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        KEYS.iter().map(|&k| (k, self.get(k).expect("every listed key is readable"))).collect()
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::from("# Effective configuration; every key is listed.\n");
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn resolved_output_dir(&self) -> PathBuf {
        if self.output_dir.as_os_str().is_empty() {
            output_root().join("train")
        } else {
            self.output_dir.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let DepthKind::ExternalCommand { program } = &self.depth.kind {
            if program.as_os_str().is_empty() {
                return Err(Error::Config("depth.kind external_command needs depth.command".into()));
            }
        }
        if self.data.manifest.is_none() && self.data.synthetic == 0 {
            return Err(Error::Config("no training data: set data.manifest or data.synthetic".into()));
        }
        Ok(())
    }
}

/// Output root: `$BLG_OUTPUT_DIR` or `blg-out`.
pub fn output_root() -> PathBuf {
    std::env::var_os(ENV_OUTPUT_DIR).filter(|v| !v.is_empty()).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

/// Splits file text into entries; malformed lines are reported, not fatal.
fn parse_entries(text: &str) -> (Vec<(String, String)>, Vec<String>) {
    let mut entries = Vec::new();
    let mut errors = Vec::new();
    let mut seen = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) => {
                let k = k.trim().to_string();
                if let Some(prev) = seen.insert(k.clone(), n + 1) {
                    errors.push(format!("line {}: {k} already set on line {prev}", n + 1));
                }
                entries.push((k, v.trim().to_string()));
            }
            None => errors.push(format!("line {}: expected key = value", n + 1)),
        }
    }
    (entries, errors)
}
