//! Paired images: manifest loading, deterministic batch sampling and a
//! synthetic pair generator.
//!
//! A manifest is a CSV file with the header `id,input,target,depth,split`.
//! Paths are relative to the manifest's directory; `depth` may be empty, in
//! which case the record gets a synthetic depth field seeded by its id.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::depth::{synthetic_depth, DepthSource};
use crate::error::{Error, Result};
use crate::imageio::load_rgb;
use crate::imaging::{ImageTensor, SaliencyMask};
use crate::seeding::{derived_rng, derived_seed, STREAM_CROP, STREAM_ORDER, STREAM_SYNTH, STREAM_SYNTH_DEPTH};
use crate::tensor::Tensor;

pub const DEFAULT_CROP: usize = 1024;

/// Spatial dims of synthetic pairs must be multiples of this (the default
/// generator's downsampling factor).
pub const SYNTH_STRIDE: usize = 16;

/// Mask level treated as fully in focus by the synthetic generator.
pub const IN_FOCUS: f64 = 0.99;

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub input: ImageTensor,
    pub target: ImageTensor,
    pub mask: SaliencyMask,
}

impl SamplePair {
    pub fn new(id: impl Into<String>, input: ImageTensor, target: ImageTensor, mask: SaliencyMask) -> Result<Self> {
        let id = id.into();
        if input.dims() != target.dims() || input.channels() != 3 || target.channels() != 3 {
            return Err(Error::Shape(format!("pair {id}: input and target must be same-size RGB")));
        }
        if mask.dims() != input.dims() {
            return Err(Error::Shape(format!("pair {id}: mask {:?} vs image {:?}", mask.dims(), input.dims())));
        }
        Ok(Self { id, input, target, mask: mask.foreground_high() })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.input.dims()
    }

    /// The same window of all three arrays.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        Ok(Self {
            id: self.id.clone(),
            input: self.input.crop(top, left, h, w)?,
            target: self.target.crop(top, left, h, w)?,
            mask: self.mask.crop(top, left, h, w)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub input: PathBuf,
    pub target: PathBuf,
    #[serde(default, deserialize_with = "empty_as_none")]
    pub depth: Option<PathBuf>,
    pub split: String,
}

fn empty_as_none<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<PathBuf>, D::Error> {
    let s: Option<String> = Option::deserialize(d)?;
    Ok(s.filter(|s| !s.trim().is_empty()).map(PathBuf::from))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub crop_size: usize,
    pub seed: u64,
    pub depth: DepthSource,
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let root = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| csv_err(path, e))?;
    let mut records = Vec::new();
    for (line, row) in reader.deserialize::<ManifestRecord>().enumerate() {
        let mut r = row.map_err(|e| Error::Data(format!("{} record {}: {e}", path.display(), line + 1)))?;
        for p in [Some(&mut r.input), Some(&mut r.target), r.depth.as_mut()].into_iter().flatten() {
            if p.is_relative() {
                *p = root.join(&*p);
            }
            if !p.exists() {
                return Err(Error::MissingFile(p.clone()));
            }
        }
        records.push(r);
    }
    let manifest = DatasetManifest { records, crop_size: DEFAULT_CROP, seed: 0, depth: DepthSource::default() };
    manifest.validate()?;
    Ok(manifest)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

/// Writes records with paths relative to the manifest's directory when possible.
pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let root = path.parent().unwrap_or(Path::new("."));
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in records {
        let rel = |p: &Path| p.strip_prefix(root).unwrap_or(p).to_path_buf();
        let row = ManifestRecord {
            id: r.id.clone(),
            input: rel(&r.input),
            target: rel(&r.target),
            depth: r.depth.as_deref().map(rel),
            split: r.split.clone(),
        };
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

impl DatasetManifest {
    pub fn with_crop(mut self, crop_size: usize) -> Self {
        self.crop_size = crop_size;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen: HashMap<&str, &str> = HashMap::new();
        for r in &self.records {
            if let Some(prev) = seen.insert(&r.id, &r.split) {
                return Err(Error::Data(if prev == r.split {
                    format!("id {} is listed twice in split {prev}", r.id)
                } else {
                    format!("id {} appears in both {prev} and {} splits", r.id, r.split)
                }));
            }
        }
        if self.crop_size == 0 {
            return Err(Error::Config("crop size must be positive".into()));
        }
        Ok(())
    }

    pub fn split(&self, name: &str) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == name).collect()
    }

    fn load_record(&self, r: &ManifestRecord) -> Result<SamplePair> {
        let input = load_rgb(&r.input)?;
        let target = load_rgb(&r.target)?;
        let mask = match &r.depth {
            Some(p) => self.depth.load(p, input.dims())?,
            None => synthetic_depth(input.dims(), derived_seed(self.seed, STREAM_SYNTH_DEPTH, id_hash(&r.id)))?,
        };
        SamplePair::new(&r.id, input, target, mask)
    }

    /// Full-size pairs of a split, in manifest order.
    pub fn load_split(&self, name: &str) -> Result<Vec<SamplePair>> {
        let recs = self.split(name);
        if recs.is_empty() {
            return Err(Error::Data(format!("split {name} is empty")));
        }
        recs.into_iter().map(|r| self.load_record(r)).collect()
    }

    /// Loads the split and samples from it; see [`sample_batch`].
    pub fn sample_batch(&self, split: &str, batch_size: usize, step: u64) -> Result<Vec<SamplePair>> {
        let pairs = self.load_split(split)?;
        sample_batch(&pairs, self.crop_size, self.seed, batch_size, step)
    }
}

fn id_hash(id: &str) -> u64 {
    // FNV-1a; stable across platforms and releases.
    id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Which split entry fills slot `j` of batch `step`. Sample order is a fresh
/// permutation every pass over the split.
pub fn batch_indices(n: usize, seed: u64, batch_size: usize, step: u64) -> Vec<usize> {
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch_size as u64)
        .map(|j| {
            let global = step * batch_size as u64 + j;
            let (epoch, pos) = (global / n as u64, (global % n as u64) as usize);
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut derived_rng(seed, STREAM_ORDER, epoch));
                cached = Some((epoch, perm));
            }
            cached.as_ref().expect("filled above").1[pos]
        })
        .collect()
}

/// Deterministic in `(seed, step)`: the ids and crop offsets of a batch depend
/// on nothing else.
pub fn sample_batch(pairs: &[SamplePair], crop: usize, seed: u64, batch_size: usize, step: u64) -> Result<Vec<SamplePair>> {
    if pairs.is_empty() {
        return Err(Error::Data("cannot sample from an empty split".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut rng = derived_rng(seed, STREAM_CROP, step);
    batch_indices(pairs.len(), seed, batch_size, step)
        .into_iter()
        .map(|i| {
            let p = &pairs[i];
            let (h, w) = p.dims();
            if crop > h || crop > w {
                return Err(Error::Data(format!("crop {crop} is larger than {}x{} image {}", h, w, p.id)));
            }
            let top = rng.random_range(0..=h - crop);
            let left = rng.random_range(0..=w - crop);
            p.crop(top, left, crop, crop)
        })
        .collect()
}

/// `[N, 4, H, W]` generator inputs, `[N, 3, H, W]` targets and inputs, and
/// `[N, 1, H, W]` masks.
pub struct BatchTensors {
    pub cond: Tensor,
    pub input: Tensor,
    pub target: Tensor,
    pub mask: Tensor,
}

pub fn batch_tensors(batch: &[SamplePair]) -> Result<BatchTensors> {
    let cond: Vec<Tensor> = batch
        .iter()
        .map(|p| crate::generator::assemble_input(&p.input, &p.mask).map(|x| x.to_tensor()))
        .collect::<Result<_>>()?;
    Ok(BatchTensors {
        cond: Tensor::stack(&cond)?,
        input: Tensor::stack(&batch.iter().map(|p| p.input.to_tensor()).collect::<Vec<_>>())?,
        target: Tensor::stack(&batch.iter().map(|p| p.target.to_tensor()).collect::<Vec<_>>())?,
        mask: Tensor::stack(&batch.iter().map(|p| p.mask.to_tensor()).collect::<Vec<_>>())?,
    })
}

// ---------------------------------------------------------------------------
// Synthetic pairs.

/// Separable Gaussian blur of one plane with edge clamping.
pub fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = taps.iter().sum();
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    let d = k as isize - r;
                    let (sy, sx) = if horizontal {
                        (y, (x as isize + d).clamp(0, w as isize - 1) as usize)
                    } else {
                        ((y as isize + d).clamp(0, h as isize - 1) as usize, x)
                    };
                    acc += t * src[sy * w + sx];
                }
                out[y * w + x] = acc / norm;
            }
        }
        out
    };
    pass(&pass(plane, true), false)
}

/// Blur whose strength varies per pixel: `sigma[i]` in `[0, sigma_max]`.
/// Interpolates between a ladder of uniformly blurred copies.
fn variable_blur(plane: &[f64], h: usize, w: usize, sigma: &[f64], sigma_max: f64) -> Vec<f64> {
    const RUNGS: usize = 6;
    let ladder: Vec<Vec<f64>> =
        (0..=RUNGS).map(|k| gaussian_blur(plane, h, w, sigma_max * k as f64 / RUNGS as f64)).collect();
    (0..h * w)
        .map(|i| {
            let pos = (sigma[i] / sigma_max).clamp(0.0, 1.0) * RUNGS as f64;
            let k = (pos.floor() as usize).min(RUNGS - 1);
            let f = pos - k as f64;
            ladder[k][i] * (1.0 - f) + ladder[k + 1][i] * f
        })
        .collect()
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

struct Texture {
    waves: Vec<(f64, f64, f64, [f64; 3])>,
    base: [f64; 3],
}

impl Texture {
    fn random(rng: &mut impl Rng, count: usize, freq: (f64, f64), amp: f64) -> Self {
        let base = std::array::from_fn(|_| rng.random_range(0.25..0.75));
        let waves = (0..count)
            .map(|_| {
                let angle = rng.random_range(0.0..std::f64::consts::PI);
                let f = rng.random_range(freq.0..freq.1) * 2.0 * std::f64::consts::PI;
                let phase = rng.random_range(0.0..2.0 * std::f64::consts::PI);
                let a = std::array::from_fn(|_| rng.random_range(-amp..amp));
                (f * angle.cos(), f * angle.sin(), phase, a)
            })
            .collect();
        Self { waves, base }
    }

    fn at(&self, v: f64, u: f64, c: usize) -> f64 {
        let s: f64 = self.waves.iter().map(|&(fy, fx, p, a)| a[c] * (fy * v + fx * u + p).sin()).sum();
        (self.base[c] + s).clamp(0.0, 1.0)
    }
}

/// Knobs of the synthetic generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSettings {
    /// Background blur at mask 0, as a fraction of the shorter side.
    pub sigma_max_frac: f64,
    /// Width of the alpha falloff outside the ellipse, in ellipse radii.
    pub edge_softness: f64,
    /// Peak amplitude of each background texture wave.
    pub texture_amplitude: f64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self { sigma_max_frac: 1.0 / 16.0, edge_softness: 0.25, texture_amplitude: 0.2 }
    }
}

/// `n` pairs of `dims` (height, width). Each composites a textured ellipse
/// over a textured background; the target blurs the background with
/// `sigma = sigma_max * (1 - mask)` (zero where the mask exceeds
/// [`IN_FOCUS`]), and the mask is the foreground alpha,
/// exactly 1 inside the ellipse.
pub fn synthesize_pairs(n: usize, dims: (usize, usize), seed: u64) -> Result<Vec<SamplePair>> {
    synthesize_pairs_with(n, dims, seed, &SynthSettings::default())
}

pub fn synthesize_pairs_with(n: usize, dims: (usize, usize), seed: u64, settings: &SynthSettings) -> Result<Vec<SamplePair>> {
    let (h, w) = dims;
    if h == 0 || w == 0 || h % SYNTH_STRIDE != 0 || w % SYNTH_STRIDE != 0 {
        return Err(Error::Shape(format!("synthetic dims {h}x{w} must be positive multiples of {SYNTH_STRIDE}")));
    }
    let sigma_max = settings.sigma_max_frac * h.min(w) as f64;
    (0..n).map(|i| synth_one(i, h, w, seed, sigma_max, settings)).collect()
}

fn synth_one(i: usize, h: usize, w: usize, seed: u64, sigma_max: f64, settings: &SynthSettings) -> Result<SamplePair> {
    let soft = settings.edge_softness;
    let mut rng = derived_rng(seed, STREAM_SYNTH, i as u64);
    let bg = Texture::random(&mut rng, 8, (3.0, 12.0), settings.texture_amplitude);
    let fg = Texture::random(&mut rng, 3, (1.0, 4.0), 0.15);
    let (cy, cx) = (rng.random_range(0.35..0.65), rng.random_range(0.35..0.65));
    let (ry, rx) = (rng.random_range(0.15..0.3), rng.random_range(0.15..0.3));
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (st, ct) = theta.sin_cos();

    let coords = |p: usize| ((p / w) as f64 / h as f64, (p % w) as f64 / w as f64);
    let alpha: Vec<f64> = (0..h * w)
        .map(|p| {
            let (v, u) = coords(p);
            let (dy, dx) = (v - cy, u - cx);
            let (a, b) = (dy * ct - dx * st, dy * st + dx * ct);
            let r = ((a / ry).powi(2) + (b / rx).powi(2)).sqrt();
            1.0 - smoothstep(1.0, 1.0 + soft, r)
        })
        .collect();
    // Pixels at or above the in-focus threshold stay sharp in the target.
    let sigma: Vec<f64> = alpha.iter().map(|&a| if a >= IN_FOCUS { 0.0 } else { sigma_max * (1.0 - a) }).collect();

    let mut input = Vec::with_capacity(3 * h * w);
    let mut target = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        let bgp: Vec<f64> = (0..h * w).map(|p| { let (v, u) = coords(p); bg.at(v, u, c) }).collect();
        let blurred = variable_blur(&bgp, h, w, &sigma, sigma_max);
        for p in 0..h * w {
            let (v, u) = coords(p);
            let f = fg.at(v, u, c);
            let a = alpha[p];
            input.push(a * f + (1.0 - a) * bgp[p]);
            target.push(a * f + (1.0 - a) * blurred[p]);
        }
    }
    SamplePair::new(
        format!("synth-{seed}-{i:04}"),
        ImageTensor::new(h, w, 3, input)?,
        ImageTensor::new(h, w, 3, target)?,
        SaliencyMask::new(h, w, alpha)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageio::save_rgb;
    use crate::losses::background_blur_loss;

    fn write_pair(dir: &Path, name: &str, h: usize, w: usize) -> (PathBuf, PathBuf) {
        let img = ImageTensor::from_fn(h, w, 3, |y, x, c| ((y * 7 + x * 3 + c * 11) % 256) as f64 / 255.0).unwrap();
        let (a, b) = (dir.join(format!("{name}_in.png")), dir.join(format!("{name}_gt.png")));
        save_rgb(&img, &a).unwrap();
        save_rgb(&img, &b).unwrap();
        (a, b)
    }

    fn write_csv(path: &Path, rows: &[&str]) {
        std::fs::write(path, format!("id,input,target,depth,split\n{}\n", rows.join("\n"))).unwrap();
    }

    #[test]
    fn manifest_loads_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        for n in ["a", "b", "c"] {
            write_pair(dir.path(), n, 24, 20);
        }
        let m = dir.path().join("m.csv");
        write_csv(&m, &["a,a_in.png,a_gt.png,,train", "b,b_in.png,b_gt.png,,train", "c,c_in.png,c_gt.png,,val"]);
        let man = load_manifest(&m).unwrap();
        assert_eq!(man.records.len(), 3);
        assert_eq!(man.split("train").len(), 2);
        assert_eq!(man.split("val")[0].id, "c");
        assert_eq!(man.crop_size, DEFAULT_CROP);

        write_csv(&m, &["a,a_in.png,a_gt.png,,train", "a,b_in.png,b_gt.png,,val"]);
        let err = load_manifest(&m).unwrap_err();
        assert!(err.to_string().contains("both"), "{err}");

        write_csv(&m, &["a,a_in.png,missing.png,,train"]);
        match load_manifest(&m) {
            Err(Error::MissingFile(p)) => assert!(p.ends_with("missing.png")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn manifest_round_trip_and_crop_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = write_pair(dir.path(), "x", 32, 30);
        let m = dir.path().join("m.csv");
        let rec = ManifestRecord { id: "x".into(), input: a, target: b, depth: None, split: "train".into() };
        write_manifest(&m, std::slice::from_ref(&rec)).unwrap();
        let man = load_manifest(&m).unwrap();
        assert_eq!(man.records, vec![rec]);
        assert!(man.clone().with_crop(16).sample_batch("train", 1, 0).is_ok());
        assert!(matches!(man.clone().with_crop(31).sample_batch("train", 1, 0), Err(Error::Data(_))));
        assert!(man.sample_batch("val", 1, 0).is_err());
    }

    #[test]
    fn sampling_is_pure_in_seed_and_step() {
        let pairs = synthesize_pairs(4, (32, 32), 1).unwrap();
        let ids = |b: &[SamplePair]| b.iter().map(|p| p.id.clone()).collect::<Vec<_>>();
        for step in 0..6 {
            let a = sample_batch(&pairs, 16, 9, 2, step).unwrap();
            let b = sample_batch(&pairs, 16, 9, 2, step).unwrap();
            assert_eq!(a, b);
        }
        let a = sample_batch(&pairs, 16, 9, 2, 0).unwrap();
        let c = sample_batch(&pairs, 16, 10, 2, 0).unwrap();
        assert!(ids(&a) != ids(&c) || a != c);
        // Two consecutive steps cover a 4-sample split exactly once.
        let mut seen: Vec<usize> = (0..2).flat_map(|s| batch_indices(4, 9, 2, s)).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3]);
    }

    #[test]
    fn crops_are_aligned_across_arrays() {
        let pairs = synthesize_pairs(2, (48, 48), 3).unwrap();
        let batch = sample_batch(&pairs, 16, 4, 2, 7).unwrap();
        for b in &batch {
            let src = pairs.iter().find(|p| p.id == b.id).unwrap();
            let hit = (0..=32).flat_map(|t| (0..=32).map(move |l| (t, l))).find(|&(t, l)| src.input.crop(t, l, 16, 16).unwrap() == b.input);
            let (t, l) = hit.expect("crop comes from the source");
            assert_eq!(src.target.crop(t, l, 16, 16).unwrap(), b.target);
            assert_eq!(src.mask.crop(t, l, 16, 16).unwrap(), b.mask);
        }
    }

    #[test]
    fn synthetic_pairs_contract() {
        let pairs = synthesize_pairs(16, (64, 64), 5).unwrap();
        assert_eq!(pairs.len(), 16);
        assert_eq!(pairs, synthesize_pairs(16, (64, 64), 5).unwrap());
        for p in &pairs {
            assert!(p.input.is_unit_range() && p.target.is_unit_range());
            let inner = (0..64 * 64).filter(|&i| p.mask.data()[i] > IN_FOCUS);
            let mut count = 0;
            for i in inner {
                count += 1;
                for c in 0..3 {
                    let (y, x) = (i / 64, i % 64);
                    assert_eq!(p.input.get(y, x, c), p.target.get(y, x, c));
                }
            }
            assert!(count > 0);
            let bi = background_blur_loss(&p.input, &p.mask).unwrap();
            let bt = background_blur_loss(&p.target, &p.mask).unwrap();
            assert!(bi > 0.0 && bt < bi, "{}: {bi} vs {bt}", p.id);
        }
        assert!(synthesize_pairs(1, (40, 64), 0).is_err());
    }

    #[test]
    fn blur_preserves_constants_and_reduces_variation() {
        let flat = vec![0.4; 100];
        assert!(gaussian_blur(&flat, 10, 10, 2.0).iter().all(|v| (v - 0.4).abs() < 1e-12));
        let checker: Vec<f64> = (0..100).map(|i| ((i / 10 + i % 10) % 2) as f64).collect();
        let tv = |p: &[f64]| (0..9).map(|x| (p[x + 1] - p[x]).abs()).sum::<f64>();
        assert!(tv(&gaussian_blur(&checker, 10, 10, 1.0)) < tv(&checker));
    }
}
