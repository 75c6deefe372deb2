//! Image and mask containers plus the filtering primitives shared by the
//! losses and metrics: directional Sobel responses, anisotropic total
//! variation, PSNR and SSIM.
//!
//! The `*_var` functions build differentiable subgraphs on a [`Graph`]; the
//! plain functions evaluate the same subgraphs on concrete images.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::ConvSpec;
use crate::tensor::Tensor;

/// Planar `C×H×W` image. Values are finite; they lie in `[0, 1]` whenever the
/// image crosses a module boundary (see [`ImageTensor::is_unit_range`]).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || !(1..=4).contains(&channels) {
            return Err(Error::Shape(format!("invalid image dims {height}x{width}x{channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite pixel at flat index {i}")));
        }
        Ok(Self { height, width, channels, data })
    }

    /// `f(y, x, c)` for every pixel.
    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn is_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn clamp_unit(&self) -> Self {
        Self { data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(), ..self.clone() }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.height, self.width, self.channels, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn transpose(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.channels {
            for x in 0..self.width {
                for y in 0..self.height {
                    data.push(self.get(y, x, c));
                }
            }
        }
        Self { height: self.width, width: self.height, channels: self.channels, data }
    }

    /// Crop of `h×w` pixels starting at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.height || left + w > self.width {
            return Err(Error::Shape(format!(
                "crop {h}x{w}+{top}+{left} exceeds {}x{} image",
                self.height, self.width
            )));
        }
        Self::from_fn(h, w, self.channels, |y, x, c| self.get(top + y, left + x, c))
    }

    /// `[1, C, H, W]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([1, self.channels, self.height, self.width], self.data.clone()).expect("image tensor shape")
    }

    /// Sample `n` of an NCHW tensor.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Self> {
        let [_, c, h, w] = t.shape();
        Self::new(h, w, c, t.sample(n).into_data())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskOrientation {
    /// 1 = in-focus foreground / near.
    ForegroundHigh,
    /// 1 = background / far (raw depth convention).
    ForegroundLow,
}

/// `H×W` map in `[0, 1]`. Serves as both the blur cue fed to the generator and
/// the loss mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMask {
    height: usize,
    width: usize,
    orientation: MaskOrientation,
    data: Vec<f64>,
}

impl SaliencyMask {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::with_orientation(height, width, data, MaskOrientation::ForegroundHigh)
    }

    pub fn with_orientation(height: usize, width: usize, data: Vec<f64>, orientation: MaskOrientation) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Shape(format!("mask {height}x{width} with {} values", data.len())));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::Data(format!("mask value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, orientation, data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let data = (0..height).flat_map(|y| (0..width).map(move |x| (y, x))).map(|(y, x)| f(y, x)).collect();
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn orientation(&self) -> MaskOrientation {
        self.orientation
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// The same mask with 1 = foreground.
    pub fn foreground_high(self) -> Self {
        match self.orientation {
            MaskOrientation::ForegroundHigh => self,
            MaskOrientation::ForegroundLow => Self {
                data: self.data.iter().map(|v| 1.0 - v).collect(),
                orientation: MaskOrientation::ForegroundHigh,
                ..self
            },
        }
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.height || left + w > self.width {
            return Err(Error::Shape(format!("mask crop {h}x{w}+{top}+{left} out of bounds")));
        }
        let data = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| self.get(top + y, left + x)).collect();
        Self::with_orientation(h, w, data, self.orientation)
    }

    /// `[1, 1, H, W]`, foreground-high.
    pub fn to_tensor(&self) -> Tensor {
        let m = self.clone().foreground_high();
        Tensor::new([1, 1, m.height, m.width], m.data).expect("mask tensor shape")
    }

    pub fn to_image(&self) -> ImageTensor {
        ImageTensor::new(self.height, self.width, 1, self.data.clone()).expect("mask is a valid image")
    }
}

/// Directions of the 3×3 Sobel derivative kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SobelDirection {
    D0,
    D45,
    D90,
    D135,
}

impl SobelDirection {
    pub const ALL: [SobelDirection; 4] = [Self::D0, Self::D45, Self::D90, Self::D135];

    /// Row-major cross-correlation kernel.
    pub fn kernel(self) -> [[f64; 3]; 3] {
        match self {
            Self::D0 => [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]],
            Self::D90 => [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]],
            Self::D45 => [[0.0, 1.0, 2.0], [-1.0, 0.0, 1.0], [-2.0, -1.0, 0.0]],
            Self::D135 => [[2.0, 1.0, 0.0], [1.0, 0.0, -1.0], [0.0, -1.0, -2.0]],
        }
    }

    /// Depthwise weight `[C, 1, 3, 3]`.
    fn weight(self, channels: usize) -> Tensor {
        let k = self.kernel();
        Tensor::from_fn([channels, 1, 3, 3], |[_, _, y, x]| k[y][x])
    }
}

fn require_min_dims(h: usize, w: usize, min: usize, what: &str) -> Result<()> {
    if h < min || w < min {
        return Err(Error::DimensionTooSmall(format!("{what} needs at least {min}x{min}, got {h}x{w}")));
    }
    Ok(())
}

fn require_same_shape(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if (a.height, a.width, a.channels) != (b.height, b.width, b.channels) {
        return Err(Error::Shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.height, a.width, a.channels, b.height, b.width, b.channels
        )));
    }
    Ok(())
}

/// Per-channel Sobel response with edge-clamp padding; output has the input's shape.
pub fn sobel_var(g: &mut Graph, x: Var, direction: SobelDirection) -> Var {
    let c = g.shape(x)[1];
    let padded = g.replicate_pad(x, 1);
    let w = g.constant(direction.weight(c));
    g.conv2d(padded, w, None, ConvSpec::new(1, 0, c))
}

/// Anisotropic total variation summed over batch and channels.
pub fn total_variation_var(g: &mut Graph, x: Var) -> Var {
    let dh = g.diff_h(x);
    let dw = g.diff_w(x);
    let ah = g.abs(dh);
    let aw = g.abs(dw);
    let sh = g.sum(ah);
    let sw = g.sum(aw);
    g.add(sh, sw)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let center = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - center).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Mean SSIM over every valid window position, channel and sample.
pub fn ssim_var(g: &mut Graph, a: Var, b: Var) -> Var {
    let c = g.shape(a)[1];
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let window = g.constant(Tensor::from_fn([c, 1, SSIM_WINDOW, SSIM_WINDOW], |[_, _, y, x]| taps[y] * taps[x]));
    let spec = ConvSpec::new(1, 0, c);
    let blur = |g: &mut Graph, v: Var| g.conv2d(v, window, None, spec);

    let mu_a = blur(g, a);
    let mu_b = blur(g, b);
    let aa = g.square(a);
    let bb = g.square(b);
    let ab = g.mul(a, b);
    let e_aa = blur(g, aa);
    let e_bb = blur(g, bb);
    let e_ab = blur(g, ab);

    let mu_aa = g.square(mu_a);
    let mu_bb = g.square(mu_b);
    let mu_ab = g.mul(mu_a, mu_b);
    let var_a = g.sub(e_aa, mu_aa);
    let var_b = g.sub(e_bb, mu_bb);
    let cov = g.sub(e_ab, mu_ab);

    let l_num = g.scale(mu_ab, 2.0);
    let l_num = g.add_scalar(l_num, SSIM_C1);
    let c_num = g.scale(cov, 2.0);
    let c_num = g.add_scalar(c_num, SSIM_C2);
    let l_den = g.add(mu_aa, mu_bb);
    let l_den = g.add_scalar(l_den, SSIM_C1);
    let c_den = g.add(var_a, var_b);
    let c_den = g.add_scalar(c_den, SSIM_C2);

    let num = g.mul(l_num, c_num);
    let den = g.mul(l_den, c_den);
    let map = g.div(num, den);
    g.mean(map)
}

fn eval_unary(image: &ImageTensor, f: impl FnOnce(&mut Graph, Var) -> Var) -> Tensor {
    let mut g = Graph::new();
    let x = g.constant(image.to_tensor());
    let y = f(&mut g, x);
    g.value(y).clone()
}

pub fn sobel(image: &ImageTensor, direction: SobelDirection) -> Result<ImageTensor> {
    require_min_dims(image.height, image.width, 3, "sobel")?;
    let out = eval_unary(image, |g, x| sobel_var(g, x, direction));
    ImageTensor::from_tensor(&out, 0)
}

pub fn total_variation(image: &ImageTensor) -> Result<f64> {
    require_min_dims(image.height, image.width, 2, "total_variation")?;
    Ok(eval_unary(image, total_variation_var).item())
}

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    require_same_shape(a, b)?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data.len() as f64)
}

/// Peak signal-to-noise ratio in dB with peak 1.0; `f64::INFINITY` for identical images.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let err = mse(a, b)?;
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / err).log10())
}

pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    require_same_shape(a, b)?;
    require_min_dims(a.height, a.width, SSIM_WINDOW, "ssim window")?;
    let mut g = Graph::new();
    let av = g.constant(a.to_tensor());
    let bv = g.constant(b.to_tensor());
    let s = ssim_var(&mut g, av, bv);
    Ok(g.value(s).item())
}
