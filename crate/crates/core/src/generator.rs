//! NAF-style U-shaped generator.
//!
//! A 3×3 intro convolution lifts the RGB + blur-cue input to `width` channels.
//! Each encoder level runs its NAF blocks and halves the resolution with a
//! 2×2 stride-2 convolution that doubles the channels; after the middle blocks
//! each decoder level upsamples with a bias-free 1×1 convolution plus pixel
//! shuffle, adds the matching encoder skip, and runs its blocks. A 3×3 ending
//! convolution maps back to RGB and the input RGB is added as a global
//! residual.
//!
//! A NAF block has no activation functions. Its only nonlinearities are the
//! simple gate (split the channels in half and multiply the halves) and the
//! simplified channel attention (scale channels by a 1×1 convolution of their
//! global average).

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::Archive;
use crate::error::{Error, Result};
use crate::imaging::{ImageTensor, SaliencyMask};
use crate::kernels::ConvSpec;
use crate::params::{uniform_fan_in, BoundParams, ParamStore};
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub width: usize,
    pub enc_blocks: Vec<usize>,
    pub mid_blocks: usize,
    pub dec_blocks: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Scale applied to the ending convolution's initial weights and bias.
    /// 1 keeps the plain uniform fan-in init; 0 starts at the identity.
    pub ending_init_scale: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::with_width(8)
    }
}

impl GeneratorConfig {
    /// Encoder `[2, 2, 2, 20]`, 2 middle blocks, decoder `[2, 2, 2, 2]`.
    pub fn with_width(width: usize) -> Self {
        Self {
            width,
            enc_blocks: vec![2, 2, 2, 20],
            mid_blocks: 2,
            dec_blocks: vec![2, 2, 2, 2],
            in_channels: 4,
            out_channels: 3,
            ending_init_scale: 1.0,
        }
    }

    pub fn levels(&self) -> usize {
        self.enc_blocks.len()
    }

    /// Spatial dims must be multiples of this.
    pub fn stride(&self) -> usize {
        1 << self.levels()
    }

    pub fn total_blocks(&self) -> usize {
        self.enc_blocks.iter().sum::<usize>() + self.mid_blocks + self.dec_blocks.iter().sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Config("generator width must be positive".into()));
        }
        if self.enc_blocks.len() != self.dec_blocks.len() {
            return Err(Error::Config(format!(
                "encoder has {} levels but decoder has {}",
                self.enc_blocks.len(),
                self.dec_blocks.len()
            )));
        }
        if self.in_channels < self.out_channels || self.out_channels == 0 {
            return Err(Error::Config(format!(
                "need in_channels ({}) >= out_channels ({}) > 0 for the residual",
                self.in_channels, self.out_channels
            )));
        }
        if !(self.ending_init_scale.is_finite() && self.ending_init_scale >= 0.0) {
            return Err(Error::Config("ending_init_scale must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Channel count at encoder level `i`.
    fn channels(&self, level: usize) -> usize {
        self.width << level
    }
}

/// Trainable arrays of a generator plus the configuration that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub config: GeneratorConfig,
    pub seed: u64,
    pub store: ParamStore,
}

impl GeneratorParams {
    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn conv(&mut self, name: &str, cin_per_group: usize, cout: usize, k: usize, bias: bool) {
        let fan_in = cin_per_group * k * k;
        let w = uniform_fan_in([cout, cin_per_group, k, k], fan_in, &mut self.rng);
        self.store.insert(format!("{name}.weight"), w);
        if bias {
            let b = uniform_fan_in([1, cout, 1, 1], fan_in, &mut self.rng);
            self.store.insert(format!("{name}.bias"), b);
        }
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.store.insert(format!("{name}.weight"), Tensor::full([1, c, 1, 1], 1.0));
        self.store.insert(format!("{name}.bias"), Tensor::zeros([1, c, 1, 1]));
    }

    fn block(&mut self, name: &str, c: usize) {
        self.norm(&format!("{name}.norm1"), c);
        self.conv(&format!("{name}.conv1"), c, 2 * c, 1, true);
        self.conv(&format!("{name}.conv2"), 1, 2 * c, 3, true);
        self.conv(&format!("{name}.sca"), c, c, 1, true);
        self.conv(&format!("{name}.conv3"), c, c, 1, true);
        self.norm(&format!("{name}.norm2"), c);
        self.conv(&format!("{name}.conv4"), c, 2 * c, 1, true);
        self.conv(&format!("{name}.conv5"), c, c, 1, true);
        self.store.insert(format!("{name}.beta"), Tensor::zeros([1, c, 1, 1]));
        self.store.insert(format!("{name}.gamma"), Tensor::zeros([1, c, 1, 1]));
    }
}

/// Deterministic initialization from `seed`. Residual scales start at zero so
/// every block is initially the identity.
pub fn build_generator(config: &GeneratorConfig, seed: u64) -> Result<GeneratorParams> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init { store: &mut store, rng: ChaCha8Rng::seed_from_u64(seed) };
    let w = config.width;
    init.conv("intro", config.in_channels, w, 3, true);
    for (level, &n) in config.enc_blocks.iter().enumerate() {
        let c = config.channels(level);
        for j in 0..n {
            init.block(&format!("enc.{level}.{j}"), c);
        }
        init.conv(&format!("down.{level}"), c, 2 * c, 2, true);
    }
    let cm = config.channels(config.levels());
    for j in 0..config.mid_blocks {
        init.block(&format!("mid.{j}"), cm);
    }
    // Decoder level `i` works at encoder level `levels - 1 - i`.
    for (i, &n) in config.dec_blocks.iter().enumerate() {
        let c = config.channels(config.levels() - 1 - i);
        init.conv(&format!("up.{i}"), 2 * c, 4 * c, 1, false);
        for j in 0..n {
            init.block(&format!("dec.{i}.{j}"), c);
        }
    }
    init.conv("ending", w, config.out_channels, 3, true);
    for name in ["ending.weight", "ending.bias"] {
        if let Some(t) = store.get_mut(name) {
            *t = t.scale(config.ending_init_scale);
        }
    }
    Ok(GeneratorParams { config: config.clone(), seed, store })
}

fn conv(g: &mut Graph, p: &BoundParams, name: &str, x: Var, spec: ConvSpec) -> Var {
    let w = p.var(&format!("{name}.weight"));
    let b = p.get(&format!("{name}.bias"));
    g.conv2d(x, w, b, spec)
}

fn layer_norm(g: &mut Graph, p: &BoundParams, name: &str, x: Var) -> Var {
    let n = g.channel_norm(x, NORM_EPS);
    let scaled = g.mul(n, p.var(&format!("{name}.weight")));
    g.add(scaled, p.var(&format!("{name}.bias")))
}

/// One NAF block on a `[N, c, H, W]` activation.
pub fn naf_block(g: &mut Graph, p: &BoundParams, name: &str, x: Var) -> Var {
    let c = g.shape(x)[1];
    let pw = ConvSpec::new(1, 0, 1);

    let h = layer_norm(g, p, &format!("{name}.norm1"), x);
    let h = conv(g, p, &format!("{name}.conv1"), h, pw);
    let h = conv(g, p, &format!("{name}.conv2"), h, ConvSpec::new(1, 1, 2 * c));
    let h = g.simple_gate(h);
    let pooled = g.mean_spatial(h);
    let attn = conv(g, p, &format!("{name}.sca"), pooled, pw);
    let h = g.mul(h, attn);
    let h = conv(g, p, &format!("{name}.conv3"), h, pw);
    let h = g.mul(h, p.var(&format!("{name}.beta")));
    let y = g.add(x, h);

    let h = layer_norm(g, p, &format!("{name}.norm2"), y);
    let h = conv(g, p, &format!("{name}.conv4"), h, pw);
    let h = g.simple_gate(h);
    let h = conv(g, p, &format!("{name}.conv5"), h, pw);
    let h = g.mul(h, p.var(&format!("{name}.gamma")));
    g.add(y, h)
}

/// Activation shapes recorded during a forward pass, for structural checks.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    pub encoder_outputs: Vec<[usize; 4]>,
    pub decoder_inputs: Vec<[usize; 4]>,
}

/// Unclamped training-mode forward pass on a `[N, in_channels, H, W]` batch.
pub fn forward_var(g: &mut Graph, config: &GeneratorConfig, p: &BoundParams, x: Var) -> Var {
    forward_traced(g, config, p, x, &mut ForwardTrace::default())
}

pub fn forward_traced(g: &mut Graph, config: &GeneratorConfig, p: &BoundParams, x: Var, trace: &mut ForwardTrace) -> Var {
    let same = ConvSpec::new(1, 1, 1);
    let mut h = conv(g, p, "intro", x, same);
    let mut skips = Vec::with_capacity(config.levels());
    for (level, &n) in config.enc_blocks.iter().enumerate() {
        for j in 0..n {
            h = naf_block(g, p, &format!("enc.{level}.{j}"), h);
        }
        trace.encoder_outputs.push(g.shape(h));
        skips.push(h);
        h = conv(g, p, &format!("down.{level}"), h, ConvSpec::new(2, 0, 1));
    }
    for j in 0..config.mid_blocks {
        h = naf_block(g, p, &format!("mid.{j}"), h);
    }
    for (i, &n) in config.dec_blocks.iter().enumerate() {
        h = conv(g, p, &format!("up.{i}"), h, ConvSpec::new(1, 0, 1));
        h = g.pixel_shuffle(h, 2);
        trace.decoder_inputs.push(g.shape(h));
        let skip = skips.pop().expect("one skip per level");
        h = g.add(h, skip);
        for j in 0..n {
            h = naf_block(g, p, &format!("dec.{i}.{j}"), h);
        }
    }
    let out = conv(g, p, "ending", h, same);
    let rgb = g.narrow_channels(x, 0, config.out_channels);
    g.add(out, rgb)
}

pub fn check_input_dims(config: &GeneratorConfig, h: usize, w: usize, channels: usize) -> Result<()> {
    if channels != config.in_channels {
        return Err(Error::Shape(format!("generator expects {} input channels, got {channels}", config.in_channels)));
    }
    let s = config.stride();
    if h == 0 || w == 0 || !h.is_multiple_of(s) || !w.is_multiple_of(s) {
        return Err(Error::Shape(format!("input {h}x{w} is not divisible by {s}")));
    }
    Ok(())
}

/// Inference: output clamped to `[0, 1]`.
pub fn generator_forward(params: &GeneratorParams, x: &ImageTensor) -> Result<ImageTensor> {
    check_input_dims(&params.config, x.height(), x.width(), x.channels())?;
    let mut g = Graph::new();
    let bound = params.store.bind(&mut g, false);
    let xv = g.constant(x.to_tensor());
    let y = forward_var(&mut g, &params.config, &bound, xv);
    Ok(ImageTensor::from_tensor(g.value(y), 0)?.clamp_unit())
}

/// `[R, G, B, cue]`.
pub fn assemble_input(image: &ImageTensor, cue: &SaliencyMask) -> Result<ImageTensor> {
    if image.channels() != 3 {
        return Err(Error::Shape(format!("expected an RGB image, got {} channels", image.channels())));
    }
    if image.dims() != cue.dims() {
        return Err(Error::Shape(format!("cue {:?} does not match image {:?}", cue.dims(), image.dims())));
    }
    let cue = cue.clone().foreground_high();
    ImageTensor::from_fn(image.height(), image.width(), 4, |y, x, c| if c < 3 { image.get(y, x, c) } else { cue.get(y, x) })
}

/// Inference on any size: edge-replicates the bottom and right borders up to
/// the generator stride, runs the network and crops back.
pub fn infer_padded(params: &GeneratorParams, image: &ImageTensor, cue: &SaliencyMask) -> Result<ImageTensor> {
    let x = assemble_input(image, cue)?;
    let s = params.config.stride();
    let (h, w) = x.dims();
    let (ph, pw) = (h.div_ceil(s) * s, w.div_ceil(s) * s);
    if (ph, pw) == (h, w) {
        return generator_forward(params, &x);
    }
    let padded = ImageTensor::from_fn(ph, pw, x.channels(), |y, xx, c| x.get(y.min(h - 1), xx.min(w - 1), c))?;
    generator_forward(params, &padded)?.crop(0, 0, h, w)
}

const CHECKPOINT_KIND: &str = "generator";

impl GeneratorParams {
    pub fn to_archive(&self) -> Archive {
        let mut ar = Archive::new(serde_json::json!({
            "kind": CHECKPOINT_KIND,
            "generator": self.config,
            "seed": self.seed,
        }));
        ar.put_store("generator/", &self.store);
        ar
    }

    /// Reads generator weights from an archive written by [`Self::to_archive`]
    /// or by the trainer.
    pub fn from_archive(ar: &Archive) -> Result<Self> {
        let config: GeneratorConfig = serde_json::from_value(ar.meta["generator"].clone())
            .map_err(|e| Error::Checkpoint(format!("archive has no usable generator config: {e}")))?;
        let seed = ar.meta["seed"].as_u64().unwrap_or(0);
        let store = ar.take_store("generator/");
        let reference = build_generator(&config, seed)?;
        if !reference.store.same_layout(&store) {
            return Err(Error::Checkpoint("generator arrays do not match the recorded config".into()));
        }
        Ok(Self { config, seed, store })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    /// Loads and, when `expected` is given, insists the stored config equals it.
    pub fn load(path: &Path, expected: Option<&GeneratorConfig>) -> Result<Self> {
        let params = Self::from_archive(&Archive::load(path)?)?;
        if let Some(exp) = expected {
            if exp != &params.config {
                return Err(Error::Checkpoint(format!(
                    "checkpoint config {:?} does not match requested {:?}",
                    params.config, exp
                )));
            }
        }
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, GradCheck};
    use rand::Rng;

    fn small_config() -> GeneratorConfig {
        GeneratorConfig {
            width: 4,
            enc_blocks: vec![1, 1],
            mid_blocks: 1,
            dec_blocks: vec![1, 1],
            in_channels: 4,
            out_channels: 3,
            ending_init_scale: 1.0,
        }
    }

    /// Replaces zero-initialized residual scales with random values so every
    /// branch is live.
    fn randomize(params: &mut GeneratorParams, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, t) in params.store.iter_mut() {
            if name.ends_with("beta") || name.ends_with("gamma") {
                *t = Tensor::from_fn(t.shape(), |_| rng.random_range(-0.5..0.5));
            }
        }
    }

    fn random_input(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_fn(h, w, 4, |_, _, _| rng.random::<f64>()).unwrap()
    }

    #[test]
    fn naf_block_parameter_formula() {
        // 7c^2 + 33c per block.
        let mut store = ParamStore::new();
        let mut init = Init { store: &mut store, rng: ChaCha8Rng::seed_from_u64(0) };
        init.block("b", 8);
        assert_eq!(store.parameter_count(), 7 * 64 + 33 * 8);
    }

    #[test]
    fn default_preset_has_36_blocks() {
        let c = GeneratorConfig::default();
        assert_eq!(c.width, 8);
        assert_eq!(c.total_blocks(), 36);
        assert_eq!(c.stride(), 16);
    }

    #[test]
    fn parameter_count_is_exact_sum_and_monotone_in_width() {
        let counts: Vec<usize> = [2, 4, 8, 16]
            .iter()
            .map(|&w| build_generator(&GeneratorConfig::with_width(w), 0).unwrap().parameter_count())
            .collect();
        assert!(counts.windows(2).all(|p| p[1] > p[0]));
        let p = build_generator(&GeneratorConfig::with_width(8), 0).unwrap();
        let manual: usize = p.store.iter().map(|(_, t)| t.shape().iter().product::<usize>()).sum();
        assert_eq!(manual, p.parameter_count());
    }

    #[test]
    fn width_presets_match_reference_budgets() {
        for (w, reference) in [(4, 277_000.0), (8, 1_047_000.0), (12, 2_311_000.0)] {
            let n = build_generator(&GeneratorConfig::with_width(w), 0).unwrap().parameter_count() as f64;
            assert!((n - reference).abs() <= 0.1 * reference, "width {w}: {n}");
        }
        // Frozen exact counts of the presets.
        assert_eq!(build_generator(&GeneratorConfig::with_width(8), 0).unwrap().parameter_count(), 1_047_891);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = GeneratorConfig::default();
        c.dec_blocks.pop();
        assert!(matches!(build_generator(&c, 0), Err(Error::Config(_))));
        let c = GeneratorConfig { width: 0, ..GeneratorConfig::default() };
        assert!(build_generator(&c, 0).is_err());
    }

    #[test]
    fn initialization_is_deterministic_per_seed() {
        let c = small_config();
        assert_eq!(build_generator(&c, 5).unwrap(), build_generator(&c, 5).unwrap());
        assert_ne!(build_generator(&c, 5).unwrap().store, build_generator(&c, 6).unwrap().store);
    }

    #[test]
    fn forward_shape_determinism_and_errors() {
        let params = build_generator(&GeneratorConfig::with_width(4), 1).unwrap();
        let x = random_input(64, 64, 2);
        let a = generator_forward(&params, &x).unwrap();
        assert_eq!((a.height(), a.width(), a.channels()), (64, 64, 3));
        assert!(a.is_unit_range());
        let b = generator_forward(&params, &x).unwrap();
        assert_eq!(a, b);
        assert!(generator_forward(&params, &random_input(40, 64, 3)).is_err());
        let rgb = ImageTensor::filled(64, 64, 3, 0.5).unwrap();
        assert!(generator_forward(&params, &rgb).is_err());
    }

    #[test]
    fn u_shape_skips_line_up() {
        let c = GeneratorConfig::with_width(4);
        let params = build_generator(&c, 1).unwrap();
        let mut g = Graph::new();
        let bound = params.store.bind(&mut g, false);
        let x = g.constant(random_input(32, 32, 4).to_tensor());
        let mut trace = ForwardTrace::default();
        forward_traced(&mut g, &c, &bound, x, &mut trace);
        let l = c.levels();
        for i in 0..l {
            assert_eq!(trace.encoder_outputs[i], trace.decoder_inputs[l - 1 - i]);
        }
    }

    #[test]
    fn blocks_use_only_multiplicative_gating() {
        let params = build_generator(&small_config(), 1).unwrap();
        let mut g = Graph::new();
        let bound = params.store.bind(&mut g, false);
        let x = g.constant(Tensor::full([1, 4, 8, 8], 0.3));
        let start = g.len();
        naf_block(&mut g, &bound, "enc.0.0", x);
        let allowed = ["conv", "norm", "pool", "add", "mul", "gate"];
        for op in g.op_names_since(start) {
            assert!(allowed.contains(&op), "unexpected primitive {op} in NAF block");
        }
    }

    #[test]
    fn every_parameter_array_receives_gradient() {
        let c = small_config();
        let mut params = build_generator(&c, 3).unwrap();
        randomize(&mut params, 4);
        let mut g = Graph::new();
        let bound = params.store.bind(&mut g, true);
        let x = g.constant(random_input(16, 16, 5).to_tensor());
        let y = forward_var(&mut g, &c, &bound, x);
        let m = g.mean(y);
        let grads = bound.gradients(&g, &g.backward(m));
        for (name, t) in grads.iter() {
            assert!(t.abs_max() > 0.0, "dead parameter array {name}");
        }
    }

    #[test]
    fn end_to_end_gradient_check() {
        let c = small_config();
        let mut params = build_generator(&c, 7).unwrap();
        randomize(&mut params, 8);
        let x = random_input(16, 16, 9).to_tensor();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let probe = Tensor::from_fn([1, 3, 16, 16], |_| rng.random_range(-1.0..1.0));
        let names: Vec<String> = params.store.names().cloned().collect();
        let flat: Vec<f64> = names.iter().flat_map(|n| params.store.get(n).unwrap().data().to_vec()).collect();
        let unflatten = |v: &Tensor| {
            let mut store = params.store.clone();
            let mut off = 0;
            for n in &names {
                let t = store.get_mut(n).unwrap();
                let len = t.len();
                t.data_mut().copy_from_slice(&v.data()[off..off + len]);
                off += len;
            }
            store
        };
        let eval = |v: &Tensor| {
            let store = unflatten(v);
            let mut g = Graph::new();
            let bound = store.bind(&mut g, true);
            let xv = g.constant(x.clone());
            let y = forward_var(&mut g, &c, &bound, xv);
            let p = g.constant(probe.clone());
            let prod = g.mul(y, p);
            let s = g.sum(prod);
            let grads = bound.gradients(&g, &g.backward(s));
            let flat: Vec<f64> = names.iter().flat_map(|n| grads.get(n).unwrap().data().to_vec()).collect();
            (g.value(s).item(), Tensor::new([1, 1, 1, flat.len()], flat).unwrap())
        };
        let x0 = Tensor::new([1, 1, 1, flat.len()], flat).unwrap();
        let r = check_gradient(&x0, eval, &GradCheck { samples: 20, seed: 11, ..Default::default() });
        assert!(r.passed(1e-2), "{r:?}");
    }

    #[test]
    fn assemble_input_concatenates_cue() {
        let img = ImageTensor::from_fn(8, 8, 3, |y, x, c| ((y + x + c) % 5) as f64 / 5.0).unwrap();
        let cue = SaliencyMask::from_fn(8, 8, |y, _| y as f64 / 7.0).unwrap();
        let x = assemble_input(&img, &cue).unwrap();
        assert_eq!(x.channels(), 4);
        for y in 0..8 {
            for xx in 0..8 {
                assert_eq!(x.get(y, xx, 3), cue.get(y, xx));
                for c in 0..3 {
                    assert_eq!(x.get(y, xx, c), img.get(y, xx, c));
                }
            }
        }
        assert!(assemble_input(&img, &SaliencyMask::filled(8, 7, 0.0).unwrap()).is_err());
    }

    #[test]
    fn padded_inference_keeps_dims() {
        let params = build_generator(&small_config(), 13).unwrap();
        let img = ImageTensor::from_fn(7, 10, 3, |y, x, c| ((y + 2 * x + c) % 9) as f64 / 9.0).unwrap();
        let cue = SaliencyMask::filled(7, 10, 0.5).unwrap();
        let out = infer_padded(&params, &img, &cue).unwrap();
        assert_eq!((out.height(), out.width(), out.channels()), (7, 10, 3));
        assert!(out.is_unit_range());
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.blg");
        let params = build_generator(&small_config(), 12).unwrap();
        params.save(&path).unwrap();
        let back = GeneratorParams::load(&path, Some(&small_config())).unwrap();
        assert_eq!(back, params);
        let other = GeneratorConfig { width: 8, ..small_config() };
        assert!(matches!(GeneratorParams::load(&path, Some(&other)), Err(Error::Checkpoint(_))));
    }
}
