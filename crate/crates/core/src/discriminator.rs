//! Dual patch critics and the gradient-penalty adversarial objective.
//!
//! Each sub-critic is `depth` stride-2 4×4 convolutions (padding 1) with
//! leaky activations, followed by a 3×3 convolution to a single-channel score
//! map. Scores are unbounded. For an `H×W` input the score grid is
//! `floor(H / 2^depth) × floor(W / 2^depth)`.
//!
//! The penalty needs the critic's input gradient as a differentiable function
//! of the critic weights. It is built explicitly on the graph: the backward
//! pass of each convolution is a transposed convolution with the same weight
//! var, and the leaky-activation derivative enters as a constant mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::kernels::ConvSpec;
use crate::params::{uniform_fan_in, BoundParams, ParamStore};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;
const NORM_EPS: f64 = 1e-12;

fn down_spec() -> ConvSpec {
    ConvSpec::new(2, 1, 1)
}

fn head_spec() -> ConvSpec {
    ConvSpec::new(1, 1, 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub depths: Vec<usize>,
    pub base_channels: usize,
    pub gp_lambda: f64,
    pub in_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { depths: vec![3, 5], base_channels: 64, gp_lambda: 1.0, in_channels: 3 }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depths.is_empty() || self.depths.contains(&0) {
            return Err(Error::Config("discriminator depths must be nonempty and each >= 1".into()));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::Config("discriminator channels must be positive".into()));
        }
        if !(self.gp_lambda.is_finite() && self.gp_lambda >= 0.0) {
            return Err(Error::Config("gp_lambda must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn max_depth(&self) -> usize {
        self.depths.iter().copied().max().unwrap_or(0)
    }

    fn layer_channels(&self, layer: usize) -> usize {
        self.base_channels << layer.min(3)
    }

    /// Score grid of sub-critic `k` for an `h×w` input.
    pub fn grid_dims(&self, k: usize, h: usize, w: usize) -> (usize, usize) {
        let d = self.depths[k];
        (h >> d, w >> d)
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let s = 1usize << self.max_depth();
        if h < s || w < s {
            return Err(Error::DimensionTooSmall(format!(
                "critic of depth {} needs at least {s}x{s}, got {h}x{w}",
                self.max_depth()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams {
    pub config: DiscriminatorConfig,
    pub store: ParamStore,
}

fn layer_name(k: usize, i: usize) -> String {
    format!("d{k}.conv{i}")
}

fn head_name(k: usize) -> String {
    format!("d{k}.head")
}

pub fn build_discriminator(config: &DiscriminatorConfig, seed: u64) -> Result<DiscriminatorParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut add = |name: String, cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng| {
        let fan_in = cin * k * k;
        store.insert(format!("{name}.weight"), uniform_fan_in([cout, cin, k, k], fan_in, rng));
        store.insert(format!("{name}.bias"), uniform_fan_in([1, cout, 1, 1], fan_in, rng));
    };
    for (k, &depth) in config.depths.iter().enumerate() {
        let mut cin = config.in_channels;
        for i in 0..depth {
            let cout = config.layer_channels(i);
            add(layer_name(k, i), cin, cout, 4, &mut rng);
            cin = cout;
        }
        add(head_name(k), cin, 1, 3, &mut rng);
    }
    Ok(DiscriminatorParams { config: config.clone(), store })
}

impl DiscriminatorParams {
    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }
}

fn conv(g: &mut Graph, p: &BoundParams, name: &str, x: Var, spec: ConvSpec) -> Var {
    let b = p.get(&format!("{name}.bias"));
    g.conv2d(x, p.var(&format!("{name}.weight")), b, spec)
}

/// Score maps `[N, 1, h_k, w_k]`, one per sub-critic.
pub fn critic_scores_var(g: &mut Graph, config: &DiscriminatorConfig, p: &BoundParams, x: Var) -> Vec<Var> {
    config
        .depths
        .iter()
        .enumerate()
        .map(|(k, &depth)| {
            let mut h = x;
            for i in 0..depth {
                h = conv(g, p, &layer_name(k, i), h, down_spec());
                h = g.leaky_relu(h, LEAKY_SLOPE);
            }
            conv(g, p, &head_name(k), h, head_spec())
        })
        .collect()
}

/// Mean over sub-critics of `-mean(D_k(fake))`.
pub fn generator_adversarial_var(g: &mut Graph, config: &DiscriminatorConfig, p: &BoundParams, fake: Var) -> Var {
    let scores = critic_scores_var(g, config, p, fake);
    let k = scores.len() as f64;
    let mut acc: Option<Var> = None;
    for s in scores {
        let m = g.mean(s);
        acc = Some(match acc {
            Some(a) => g.add(a, m),
            None => m,
        });
    }
    g.scale(acc.expect("at least one critic"), -1.0 / k)
}

/// Gradient of each sample's mean score with respect to that sample, as a var
/// that stays differentiable in the critic weights. `x` must be a constant.
pub fn input_gradient_var(g: &mut Graph, config: &DiscriminatorConfig, p: &BoundParams, k: usize, x: &Tensor) -> Var {
    let depth = config.depths[k];
    // Forward on plain values to record the activation masks.
    let mut inputs = vec![x.clone()];
    let mut masks = Vec::with_capacity(depth);
    for i in 0..depth {
        let name = layer_name(k, i);
        let w = g.value(p.var(&format!("{name}.weight"))).clone();
        let b = g.value(p.var(&format!("{name}.bias"))).clone();
        let z = crate::kernels::conv2d_forward(inputs.last().expect("input"), &w, Some(&b), down_spec());
        masks.push(z.map(|v| if v > 0.0 { 1.0 } else { LEAKY_SLOPE }));
        inputs.push(z.map(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v }));
    }
    let last = inputs.last().expect("input");
    let [n, _, h, w] = last.shape();
    let seed = Tensor::full([n, 1, h, w], 1.0 / (h * w) as f64);
    let mut grad = g.constant(seed);
    grad = g.conv_transpose2d(grad, p.var(&format!("{}.weight", head_name(k))), head_spec(), last.shape());
    for i in (0..depth).rev() {
        let mask = g.constant(masks[i].clone());
        grad = g.mul(grad, mask);
        let w = p.var(&format!("{}.weight", layer_name(k, i)));
        grad = g.conv_transpose2d(grad, w, down_spec(), inputs[i].shape());
    }
    grad
}

/// Per-sample L2 norm `[N, 1, 1, 1]` of a gradient var.
pub fn gradient_norm_var(g: &mut Graph, grad: Var) -> Var {
    let sq = g.square(grad);
    let s = g.sum_per_sample(sq);
    let s = g.add_scalar(s, NORM_EPS);
    g.sqrt(s)
}

/// `mean_n (||grad_n|| - 1)^2`.
pub fn gradient_penalty_var(g: &mut Graph, grad: Var) -> Var {
    let norm = gradient_norm_var(g, grad);
    let dev = g.add_scalar(norm, -1.0);
    let sq = g.square(dev);
    g.mean(sq)
}

/// Per-sample interpolates `eps_n * real + (1 - eps_n) * fake`.
pub fn interpolate(real: &Tensor, fake: &Tensor, eps: &[f64]) -> Tensor {
    let [n, c, h, w] = real.shape();
    assert_eq!(eps.len(), n, "one interpolation weight per sample");
    let per = c * h * w;
    let mut out = fake.clone();
    for (i, (o, r)) in out.data_mut().iter_mut().zip(real.data()).enumerate() {
        let e = eps[i / per];
        *o = e * r + (1.0 - e) * *o;
    }
    out
}

pub fn sample_eps(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

/// Critic objective vars, each averaged over sub-critics.
pub struct CriticLossGraph {
    pub d_loss: Var,
    pub wasserstein: Var,
    pub gp: Var,
    pub fake_score: Var,
    pub real_score: Var,
}

/// `fake` and `real` are data (the generator output is detached here).
pub fn critic_loss_var(
    g: &mut Graph,
    config: &DiscriminatorConfig,
    p: &BoundParams,
    fake: &Tensor,
    real: &Tensor,
    eps: &[f64],
) -> Result<CriticLossGraph> {
    if fake.shape() != real.shape() {
        return Err(Error::Shape(format!("fake {:?} vs real {:?}", fake.shape(), real.shape())));
    }
    let [_, _, h, w] = real.shape();
    config.check_input(h, w)?;
    let xhat = interpolate(real, fake, eps);
    let fv = g.constant(fake.clone());
    let rv = g.constant(real.clone());
    let fs = critic_scores_var(g, config, p, fv);
    let rs = critic_scores_var(g, config, p, rv);
    let k = config.depths.len();
    let mut fake_terms = Vec::with_capacity(k);
    let mut real_terms = Vec::with_capacity(k);
    let mut gps = Vec::with_capacity(k);
    for i in 0..k {
        fake_terms.push(g.mean(fs[i]));
        real_terms.push(g.mean(rs[i]));
        let grad = input_gradient_var(g, config, p, i, &xhat);
        gps.push(gradient_penalty_var(g, grad));
    }
    let avg = |g: &mut Graph, vs: &[Var]| {
        let mut acc = vs[0];
        for &v in &vs[1..] {
            acc = g.add(acc, v);
        }
        g.scale(acc, 1.0 / vs.len() as f64)
    };
    let fake_score = avg(g, &fake_terms);
    let real_score = avg(g, &real_terms);
    let gp = avg(g, &gps);
    let wasserstein = g.sub(fake_score, real_score);
    let penalty = g.scale(gp, config.gp_lambda);
    let d_loss = g.add(wasserstein, penalty);
    Ok(CriticLossGraph { d_loss, wasserstein, gp, fake_score, real_score })
}

/// Score maps for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticScoreMap {
    pub grids: Vec<Tensor>,
    pub means: Vec<f64>,
}

pub fn critic_forward(params: &DiscriminatorParams, img: &ImageTensor) -> Result<CriticScoreMap> {
    if img.channels() != params.config.in_channels {
        return Err(Error::Shape(format!("critic expects {} channels, got {}", params.config.in_channels, img.channels())));
    }
    params.config.check_input(img.height(), img.width())?;
    let mut g = Graph::new();
    let bound = params.store.bind(&mut g, false);
    let x = g.constant(img.to_tensor());
    let grids: Vec<Tensor> = critic_scores_var(&mut g, &params.config, &bound, x).into_iter().map(|v| g.value(v).clone()).collect();
    let means = grids.iter().map(Tensor::mean).collect();
    Ok(CriticScoreMap { grids, means })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdversarialLosses {
    pub g_loss: f64,
    pub d_loss: f64,
    pub gp: f64,
}

/// Evaluates both objectives on a batch of `[N, C, H, W]` images, drawing one
/// interpolation weight per sample from `rng`.
pub fn adversarial_losses(params: &DiscriminatorParams, fake: &Tensor, real: &Tensor, rng: &mut impl Rng) -> Result<AdversarialLosses> {
    let eps = sample_eps(real.shape()[0], rng);
    let mut g = Graph::new();
    let bound = params.store.bind(&mut g, false);
    let critic = critic_loss_var(&mut g, &params.config, &bound, fake, real, &eps)?;
    let fv = g.constant(fake.clone());
    let gl = generator_adversarial_var(&mut g, &params.config, &bound, fv);
    Ok(AdversarialLosses { g_loss: g.value(gl).item(), d_loss: g.value(critic.d_loss).item(), gp: g.value(critic.gp).item() })
}
