use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use blg_core::dataset::{load_manifest, synthesize_pairs, write_manifest, ManifestRecord, SamplePair};
use blg_core::depth::{DepthKind, DepthSource};
use blg_core::generator::{infer_padded, GeneratorParams};
use blg_core::imageio::{load_rgb, save_gray16, save_rgb};
use blg_core::imaging::{psnr, ssim, ImageTensor};
use blg_core::seeding::{derived_seed, STREAM_SYNTH, STREAM_SYNTH_DEPTH};
use blg_core::trainer::{run_training, RunOptions, TrainData};
use blg_core::{parallel, Error, Result};
use log::info;

use crate::config::{output_root, RunConfig};
use crate::{Command, Common, DepthArgs, DepthFlags, EvalArgs, InferArgs, SynthArgs, TrainArgs};

pub fn dispatch(cmd: Command) -> Result<()> {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    match cmd {
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Depth(a) => depth(a),
        Command::Synth(a) => synth(a),
    }
}

fn apply_common(c: &Common) {
    if c.sequential {
        parallel::set_sequential(true);
    }
}

/// Exclusive use of an output directory for the life of the guard.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join("blg.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{} is in use by another run (remove {} if that run is gone)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn depth_overrides(f: &DepthFlags) -> Vec<(String, &str)> {
    [
        ("depth.kind", &f.depth_kind),
        ("depth.command", &f.depth_command),
        ("depth.normalization", &f.depth_normalization),
        ("depth.convention", &f.depth_convention),
    ]
    .into_iter()
    .filter_map(|(k, v)| v.as_deref().map(|v| (k.to_string(), v)))
    .collect()
}

fn depth_source(f: &DepthFlags) -> Result<DepthSource> {
    let mut rc = RunConfig::default();
    rc.apply(depth_overrides(f))?;
    Ok(rc.depth)
}

/// Merges defaults, the config file, `--set` entries and dedicated flags, in
/// that order of increasing precedence.
pub fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut rc = RunConfig::default();
    if let Some(p) = &a.config {
        rc.apply_file(p)?;
    }
    let mut sets = Vec::new();
    let mut errors = Vec::new();
    for s in &a.set {
        match s.split_once('=') {
            Some((k, v)) => sets.push((k.trim().to_string(), v)),
            None => errors.push(format!("--set {s:?} is not KEY=VALUE")),
        }
    }
    if !errors.is_empty() {
        return Err(Error::Config(errors.join("; ")));
    }
    rc.apply(sets)?;

    let text = |v: Option<String>| v;
    let mut flags: Vec<(String, String)> = [
        ("data.manifest", a.manifest.as_ref().map(|p| p.display().to_string())),
        ("data.synthetic", a.synthetic.map(|v| v.to_string())),
        ("data.size", a.size.map(|v| v.to_string())),
        ("data.val_count", a.val_count.map(|v| v.to_string())),
        ("train.batch_size", a.batch_size.map(|v| v.to_string())),
        ("train.lr", a.lr.map(|v| v.to_string())),
        ("generator.width", a.width.map(|v| v.to_string())),
        ("train.crop_size", a.crop.map(|v| v.to_string())),
        ("train.steps_per_epoch", a.steps_per_epoch.map(|v| v.to_string())),
        ("train.checkpoint_every", a.checkpoint_every.map(|v| v.to_string())),
        ("train.seed", a.common.seed.map(|v| v.to_string())),
        ("output.dir", text(a.out.as_ref().map(|p| p.display().to_string()))),
    ]
    .into_iter()
    .filter_map(|(k, v)| v.map(|v| (k.to_string(), v)))
    .collect();
    if let Some(e) = &a.epochs {
        match e.split_once(',') {
            Some((p, r)) => {
                flags.push(("train.pretrain_epochs".into(), p.trim().into()));
                flags.push(("train.refine_epochs".into(), r.trim().into()));
            }
            None => return Err(Error::Config(format!("--epochs {e:?} must be PRETRAIN,REFINE"))),
        }
    }
    if a.no_bokeh_loss {
        for k in ["loss.pretrain.edgediff", "loss.pretrain.backblur", "loss.pretrain.foreedge"] {
            flags.push((k.into(), "0".into()));
        }
    }
    rc.apply(flags.iter().map(|(k, v)| (k.clone(), v.as_str())))?;
    rc.apply(depth_overrides(&a.depth))?;

    if rc.data.manifest.is_none() && rc.train.crop_size > rc.data.size {
        rc.train.crop_size = rc.data.size;
    }
    rc.train.cue = match rc.depth.kind {
        DepthKind::PrecomputedFile => "depth".into(),
        ref k => crate::config::depth_kind_name(k).into(),
    };
    if rc.output_dir.as_os_str().is_empty() {
        rc.output_dir = rc.resolved_output_dir();
    }
    rc.validate()?;
    Ok(rc)
}

/// Synthetic pairs whose cue is replaced per the depth source.
fn synthetic_split(rc: &RunConfig, n: usize, seed: u64) -> Result<Vec<SamplePair>> {
    let dims = (rc.data.size, rc.data.size);
    let mut pairs = synthesize_pairs(n, dims, seed)?;
    if rc.depth.kind == DepthKind::SyntheticGradient {
        for (i, p) in pairs.iter_mut().enumerate() {
            p.mask = blg_core::depth::synthetic_depth(dims, derived_seed(seed, STREAM_SYNTH_DEPTH, i as u64))?;
        }
    }
    Ok(pairs)
}

pub fn load_train_data(rc: &RunConfig) -> Result<TrainData> {
    match &rc.data.manifest {
        Some(path) => {
            let mut m = load_manifest(path)?.with_crop(rc.train.crop_size).with_seed(rc.train.seed);
            m.depth = rc.depth.clone();
            let train = m.load_split(&rc.data.train_split)?;
            let val = if m.split(&rc.data.val_split).is_empty() { Vec::new() } else { m.load_split(&rc.data.val_split)? };
            Ok(TrainData { train, val })
        }
        None => {
            let seed = rc.train.seed;
            Ok(TrainData {
                train: synthetic_split(rc, rc.data.synthetic, seed)?,
                val: synthetic_split(rc, rc.data.val_count, derived_seed(seed, STREAM_SYNTH, u64::MAX))?,
            })
        }
    }
}

fn train(a: TrainArgs) -> Result<()> {
    apply_common(&a.common);
    let rc = resolve_train_config(&a)?;
    let out = rc.output_dir.clone();
    let _lock = DirLock::acquire(&out)?;
    fs::write(out.join("config.cfg"), rc.to_file_string())?;
    let data = load_train_data(&rc)?;
    info!("{} training pairs, {} validation pairs", data.train.len(), data.val.len());
    let opts = RunOptions { resume: a.resume.clone(), max_steps: None };
    let outcome = run_training(&rc.train, &data, &out, &opts)?;
    let last = outcome.validations.last().map(|(_, _, v)| format!(", val psnr {:.3} dB ssim {:.4}", v.psnr, v.ssim));
    println!(
        "trained {} for {} steps; checkpoint {}{}",
        rc.train.arm_name(),
        outcome.state.step,
        outcome.final_checkpoint.display(),
        last.unwrap_or_default()
    );
    Ok(())
}

fn default_output(sub: &str, input: &Path) -> PathBuf {
    let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    output_root().join(sub).join(format!("{stem}.png"))
}

fn ensure_parent(p: &Path) -> Result<()> {
    if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d)?;
    }
    Ok(())
}

fn load_generator(checkpoint: &Path, config: Option<&Path>) -> Result<GeneratorParams> {
    let expected = match config {
        Some(p) => {
            let mut rc = RunConfig::default();
            rc.apply_file(p)?;
            Some(rc.train.generator)
        }
        None => None,
    };
    GeneratorParams::load(checkpoint, expected.as_ref())
}

fn cue_for(source: &DepthSource, image_path: &Path, depth: Option<&Path>, dims: (usize, usize), scratch: &Path, seed: u64) -> Result<blg_core::imaging::SaliencyMask> {
    match depth {
        Some(d) => source.load(d, dims),
        None => source.produce(image_path, dims, scratch, seed),
    }
}

fn infer(a: InferArgs) -> Result<()> {
    apply_common(&a.common);
    let params = load_generator(&a.checkpoint, a.config.as_deref())?;
    let source = depth_source(&a.depth_flags)?;
    let image = load_rgb(&a.input)?;
    let output = a.output.clone().unwrap_or_else(|| default_output("infer", &a.input));
    ensure_parent(&output)?;
    let scratch = output.with_extension("depth.png");
    let cue = cue_for(&source, &a.input, a.depth.as_deref(), image.dims(), &scratch, a.common.seed.unwrap_or(0))?;
    let out = infer_padded(&params, &image, &cue)?;
    save_rgb(&out, &output)?;
    println!("wrote {} ({}x{})", output.display(), out.width(), out.height());
    Ok(())
}

/// Mean of per-sample values; any infinite PSNR makes the mean infinite.
pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    apply_common(&a.common);
    let seed = a.common.seed.unwrap_or(0);
    let pairs = if a.synthetic > 0 {
        synthesize_pairs(a.synthetic, (a.size, a.size), seed)?
    } else {
        let path = a.manifest.as_ref().ok_or_else(|| Error::Config("eval needs --manifest or --synthetic".into()))?;
        let mut m = load_manifest(path)?.with_seed(seed);
        m.depth = depth_source(&a.depth_flags)?;
        m.load_split(&a.split)?
    };
    if pairs.is_empty() {
        return Err(Error::Data(format!("split {} is empty", a.split)));
    }
    let params = match a.predict.as_str() {
        "model" => Some(load_generator(&a.checkpoint, None)?),
        "input" | "target" => None,
        other => return Err(Error::Config(format!("--predict {other:?} is not one of model, input, target"))),
    };
    let report = a.report.clone().unwrap_or_else(|| output_root().join("eval").join("report.csv"));
    ensure_parent(&report)?;
    let mut rows = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let pred: ImageTensor = match (&params, a.predict.as_str()) {
            (Some(g), _) => infer_padded(g, &p.input, &p.mask)?,
            (None, "input") => p.input.clone(),
            _ => p.target.clone(),
        };
        rows.push((p.id.clone(), psnr(&pred, &p.target)?, ssim(&pred, &p.target)?));
    }
    let mut w = csv::Writer::from_path(&report).map_err(|e| Error::Data(format!("{}: {e}", report.display())))?;
    w.write_record(["id", "psnr", "ssim"]).map_err(|e| Error::Data(e.to_string()))?;
    for (id, p, s) in &rows {
        w.write_record([id.as_str(), &fmt_metric(*p), &fmt_metric(*s)]).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    let ps: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let ss: Vec<f64> = rows.iter().map(|r| r.2).collect();
    println!("samples={} psnr={} ssim={} report={}", rows.len(), fmt_metric(mean(&ps)), fmt_metric(mean(&ss)), report.display());
    Ok(())
}

fn depth(a: DepthArgs) -> Result<()> {
    apply_common(&a.common);
    let source = depth_source(&a.depth_flags)?;
    let image = load_rgb(&a.input)?;
    let output = a.output.clone().unwrap_or_else(|| default_output("depth", &a.input));
    ensure_parent(&output)?;
    let scratch = output.with_extension("raw.png");
    let mask = cue_for(&source, &a.input, a.depth.as_deref(), image.dims(), &scratch, a.common.seed.unwrap_or(0))?;
    save_gray16(&mask, &output)?;
    println!("wrote {}", output.display());
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    apply_common(&a.common);
    let seed = a.common.seed.unwrap_or(0);
    let out = a.out.clone().unwrap_or_else(|| output_root().join("synth"));
    let _lock = DirLock::acquire(&out)?;
    let img_dir = out.join("images");
    fs::create_dir_all(&img_dir)?;
    let dims = (a.size, a.size);
    let splits = [
        ("train", synthesize_pairs(a.count, dims, seed)?),
        ("val", synthesize_pairs(a.val_count, dims, derived_seed(seed, STREAM_SYNTH, u64::MAX))?),
    ];
    let mut records = Vec::new();
    for (split, pairs) in &splits {
        for (i, p) in pairs.iter().enumerate() {
            let id = format!("{split}-{i:04}");
            let (inp, tgt, dep) =
                (img_dir.join(format!("{id}_input.png")), img_dir.join(format!("{id}_target.png")), img_dir.join(format!("{id}_depth.png")));
            save_rgb(&p.input, &inp)?;
            save_rgb(&p.target, &tgt)?;
            save_gray16(&p.mask, &dep)?;
            records.push(ManifestRecord { id, input: inp, target: tgt, depth: Some(dep), split: split.to_string() });
        }
    }
    let manifest = out.join("manifest.csv");
    write_manifest(&manifest, &records)?;
    println!("wrote {} pairs and {}", records.len(), manifest.display());
    Ok(())
}
