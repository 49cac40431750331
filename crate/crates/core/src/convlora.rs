//! Low-rank convolution adapters.
//!
//! An adapter wraps a frozen base convolution `W0` (`Cout×Cin×kh×kw`) with a
//! trainable down-projection `W_X` (`rank×Cin×kh×kw`, same stride and
//! padding as the base) followed by a 1×1 up-projection `W_Y`
//! (`Cout×rank×1×1`):
//!
//! ```text
//! h = conv(x, W0) + conv(conv(x, W_X), W_Y)
//! ```
//!
//! Because the up-projection is 1×1 the two paths collapse into a single
//! convolution with `W0[o,i] + Σ_r W_Y[o,r]·W_X[r,i]`, which is what
//! [`ConvLoraAdapter::merge`] produces for deployment.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Standard deviation of the Gaussian used for the down-projection.
pub const INIT_STD: f64 = 0.02;
pub const DEFAULT_RANK: usize = 8;

/// Dense `N×C×H×W` tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor4 {
    pub dims: [usize; 4],
    pub data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("{dims:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self { dims, data: vec![0.0; dims.iter().product()] }
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for n in 0..dims[0] {
            for c in 0..dims[1] {
                for y in 0..dims[2] {
                    for x in 0..dims[3] {
                        data.push(f([n, c, y, x]));
                    }
                }
            }
        }
        Self { dims, data }
    }

    pub fn random_normal<R: Rng + ?Sized>(dims: [usize; 4], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        Self::from_fn(dims, |_| normal.sample(rng))
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: [usize; 4]) -> usize {
        let [_, c, h, w] = self.dims;
        ((i[0] * c + i[1]) * h + i[2]) * w + i[3]
    }

    #[inline]
    pub fn at(&self, i: [usize; 4]) -> f64 {
        self.data[self.index(i)]
    }

    pub fn scale(&self, s: f64) -> Tensor4 {
        Tensor4 { dims: self.dims, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn add(&self, other: &Tensor4) -> Result<Tensor4> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!("add {:?} + {:?}", self.dims, other.dims)));
        }
        Ok(Tensor4 { dims: self.dims, data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect() })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!("compare {:?} vs {:?}", self.dims, other.dims)));
        }
        Ok(self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// `max|a − b| / max|b|` (absolute when `b` is all zero).
    pub fn relative_error(&self, reference: &Tensor4) -> Result<f64> {
        let diff = self.max_abs_diff(reference)?;
        let scale = reference.max_abs();
        Ok(if scale > 0.0 { diff / scale } else { diff })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
    #[serde(default = "one")]
    pub groups: usize,
}

fn one() -> usize {
    1
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Self { stride: 1, padding: 0, groups: 1 }
    }
}

impl Conv2dParams {
    pub fn same(kernel: usize) -> Self {
        Self { stride: 1, padding: kernel / 2, groups: 1 }
    }
}

/// Cross-correlation of `x` (`N×Cin×H×W`) with `w` (`Cout×Cin/groups×kh×kw`),
/// zero padding.
pub fn conv2d(x: &Tensor4, w: &Tensor4, bias: Option<&[f64]>, p: Conv2dParams) -> Result<Tensor4> {
    let [n, cin, h, wd] = x.dims;
    let [cout, cin_g, kh, kw] = w.dims;
    let g = p.groups.max(1);
    if p.stride == 0 || cin % g != 0 || cout % g != 0 || cin / g != cin_g {
        return Err(Error::Shape(format!(
            "conv weight {:?} incompatible with input {:?} (groups {g}, stride {})",
            w.dims, x.dims, p.stride
        )));
    }
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(Error::Shape(format!("bias has {} values for {cout} channels", b.len())));
        }
    }
    if h + 2 * p.padding < kh || wd + 2 * p.padding < kw {
        return Err(Error::Shape(format!("kernel {kh}x{kw} larger than padded input {h}x{wd}")));
    }
    let ho = (h + 2 * p.padding - kh) / p.stride + 1;
    let wo = (wd + 2 * p.padding - kw) / p.stride + 1;
    let cout_g = cout / g;
    let mut out = Tensor4::zeros([n, cout, ho, wo]);
    for b in 0..n {
        for o in 0..cout {
            let group = o / cout_g;
            let bias_v = bias.map_or(0.0, |bv| bv[o]);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias_v;
                    for ci in 0..cin_g {
                        let ic = group * cin_g + ci;
                        for ky in 0..kh {
                            let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at([b, ic, iy as usize, ix as usize]) * w.at([o, ci, ky, kx]);
                            }
                        }
                    }
                    let idx = out.index([b, o, oy, ox]);
                    out.data[idx] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Frozen base convolution plus trainable low-rank factors.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLoraAdapter {
    w0: Tensor4,
    bias: Option<Vec<f64>>,
    w_x: Tensor4,
    w_y: Tensor4,
    params: Conv2dParams,
}

/// Gradients of a scalar loss with respect to the trainable factors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterGrads {
    pub w_x: Tensor4,
    pub w_y: Tensor4,
}

impl ConvLoraAdapter {
    /// Wraps `w0` with a fresh adapter: `W_X ~ N(0, 0.02²)`, `W_Y = 0`.
    /// The rank must be below both channel counts.
    pub fn new<R: Rng + ?Sized>(
        w0: Tensor4,
        bias: Option<Vec<f64>>,
        rank: usize,
        params: Conv2dParams,
        rng: &mut R,
    ) -> Result<Self> {
        let [cout, cin, kh, kw] = w0.dims;
        if rank >= cin.min(cout) {
            return Err(Error::InvalidArgument(format!(
                "rank {rank} must be smaller than min(Cin={cin}, Cout={cout})"
            )));
        }
        let w_x = Tensor4::random_normal([rank, cin, kh, kw], INIT_STD, rng);
        let w_y = Tensor4::zeros([cout, rank, 1, 1]);
        Self::from_parts(w0, bias, w_x, w_y, params)
    }

    /// Assembles an adapter from explicit factors, checking their shapes.
    pub fn from_parts(
        w0: Tensor4,
        bias: Option<Vec<f64>>,
        w_x: Tensor4,
        w_y: Tensor4,
        params: Conv2dParams,
    ) -> Result<Self> {
        let [cout, cin, kh, kw] = w0.dims;
        let rank = w_x.dims[0];
        if rank < 1 {
            return Err(Error::InvalidArgument("adapter rank must be at least 1".into()));
        }
        if params.groups != 1 {
            return Err(Error::InvalidArgument("adapters wrap ungrouped convolutions only".into()));
        }
        if w_x.dims != [rank, cin, kh, kw] {
            return Err(Error::Shape(format!("W_X {:?} does not match base {:?}", w_x.dims, w0.dims)));
        }
        if w_y.dims != [cout, rank, 1, 1] {
            return Err(Error::Shape(format!("W_Y {:?} must be [{cout}, {rank}, 1, 1]", w_y.dims)));
        }
        if bias.as_ref().is_some_and(|b| b.len() != cout) {
            return Err(Error::Shape("bias length must equal Cout".into()));
        }
        Ok(Self { w0, bias, w_x, w_y, params })
    }

    pub fn rank(&self) -> usize {
        self.w_x.dims[0]
    }

    pub fn base(&self) -> &Tensor4 {
        &self.w0
    }

    pub fn down(&self) -> &Tensor4 {
        &self.w_x
    }

    pub fn up(&self) -> &Tensor4 {
        &self.w_y
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn params(&self) -> Conv2dParams {
        self.params
    }

    pub fn down_mut(&mut self) -> &mut Tensor4 {
        &mut self.w_x
    }

    pub fn up_mut(&mut self) -> &mut Tensor4 {
        &mut self.w_y
    }

    /// Output of the frozen base path alone.
    pub fn base_forward(&self, x: &Tensor4) -> Result<Tensor4> {
        conv2d(x, &self.w0, self.bias.as_deref(), self.params)
    }

    /// `conv(x, W0) + conv(conv(x, W_X), W_Y)`.
    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        let base = self.base_forward(x)?;
        let z = conv2d(x, &self.w_x, None, self.params)?;
        let lora = conv2d(&z, &self.w_y, None, Conv2dParams::default())?;
        base.add(&lora)
    }

    /// `W0[o,i] + Σ_r W_Y[o,r] · W_X[r,i]`.
    pub fn merge(&self) -> Tensor4 {
        let [cout, cin, kh, kw] = self.w0.dims;
        let rank = self.rank();
        let mut merged = self.w0.clone();
        for o in 0..cout {
            for r in 0..rank {
                let up = self.w_y.at([o, r, 0, 0]);
                if up == 0.0 {
                    continue;
                }
                for i in 0..cin {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let idx = merged.index([o, i, ky, kx]);
                            merged.data[idx] += up * self.w_x.at([r, i, ky, kx]);
                        }
                    }
                }
            }
        }
        merged
    }

    /// Single convolution with the merged weight.
    pub fn merged_forward(&self, x: &Tensor4) -> Result<Tensor4> {
        conv2d(x, &self.merge(), self.bias.as_deref(), self.params)
    }

    pub fn trainable_param_count(&self) -> usize {
        let [cout, cin, kh, kw] = self.w0.dims;
        trainable_params(cin, cout, kh, kw, self.rank())
    }

    /// Gradients of `L` with respect to `W_X` and `W_Y`, given
    /// `upstream = ∂L/∂h` for the output of [`forward`](Self::forward).
    pub fn backward(&self, x: &Tensor4, upstream: &Tensor4) -> Result<AdapterGrads> {
        let z = conv2d(x, &self.w_x, None, self.params)?;
        let [n, rank, ho, wo] = z.dims;
        let [cout, cin, kh, kw] = self.w0.dims;
        if upstream.dims != [n, cout, ho, wo] {
            return Err(Error::Shape(format!(
                "upstream {:?} does not match output [{n}, {cout}, {ho}, {wo}]",
                upstream.dims
            )));
        }
        let mut g_y = Tensor4::zeros([cout, rank, 1, 1]);
        let mut g_z = Tensor4::zeros(z.dims);
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    for o in 0..cout {
                        let g = upstream.at([b, o, oy, ox]);
                        for r in 0..rank {
                            g_y.data[o * rank + r] += g * z.at([b, r, oy, ox]);
                            let iz = g_z.index([b, r, oy, ox]);
                            g_z.data[iz] += g * self.w_y.at([o, r, 0, 0]);
                        }
                    }
                }
            }
        }
        let [_, _, h, wd] = x.dims;
        let p = self.params;
        let mut g_x = Tensor4::zeros([rank, cin, kh, kw]);
        for b in 0..n {
            for r in 0..rank {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let gz = g_z.at([b, r, oy, ox]);
                        if gz == 0.0 {
                            continue;
                        }
                        for i in 0..cin {
                            for ky in 0..kh {
                                let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    let idx = g_x.index([r, i, ky, kx]);
                                    g_x.data[idx] += gz * x.at([b, i, iy as usize, ix as usize]);
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(AdapterGrads { w_x: g_x, w_y: g_y })
    }

    pub fn to_bundle(&self) -> AdapterBundle {
        AdapterBundle {
            rank: self.rank(),
            params: self.params,
            w0: self.w0.clone(),
            bias: self.bias.clone(),
            w_x: self.w_x.clone(),
            w_y: self.w_y.clone(),
        }
    }
}

/// `rank·Cin·kh·kw + Cout·rank`.
pub fn trainable_params(cin: usize, cout: usize, kh: usize, kw: usize, rank: usize) -> usize {
    rank * cin * kh * kw + cout * rank
}

/// Serialized adapter weights exchanged with the export tooling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterBundle {
    pub rank: usize,
    pub params: Conv2dParams,
    pub w0: Tensor4,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<Vec<f64>>,
    pub w_x: Tensor4,
    pub w_y: Tensor4,
}

impl AdapterBundle {
    pub fn into_adapter(self) -> Result<ConvLoraAdapter> {
        if self.w_x.dims[0] != self.rank {
            return Err(Error::Shape(format!("bundle rank {} disagrees with W_X {:?}", self.rank, self.w_x.dims)));
        }
        for t in [&self.w0, &self.w_x, &self.w_y] {
            Tensor4::new(t.dims, t.data.clone())?;
        }
        ConvLoraAdapter::from_parts(self.w0, self.bias, self.w_x, self.w_y, self.params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_vec(self)?).map_err(|source| Error::Io { path: path.to_path_buf(), source })
    }
}

/// One convolution of a parameter-accounting description.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub groups: usize,
    pub adapter_rank: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamBudget {
    pub total: usize,
    pub trainable: usize,
}

impl ParamBudget {
    pub fn ratio(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }
}

/// Counts weights of a network where only adapter factors train. The total
/// includes the adapter factors.
pub fn param_budget(layers: &[LayerSpec]) -> ParamBudget {
    let mut total = 0;
    let mut trainable = 0;
    for l in layers {
        total += l.c_out * (l.c_in / l.groups.max(1)) * l.kernel * l.kernel;
        if let Some(rank) = l.adapter_rank {
            let t = trainable_params(l.c_in, l.c_out, l.kernel, l.kernel, rank);
            trainable += t;
            total += t;
        }
    }
    ParamBudget { total, trainable }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> Tensor4 {
        Tensor4::new([1, 1, 1, 1], vec![v]).unwrap()
    }

    #[test]
    fn scalar_expansion() {
        let a =
            ConvLoraAdapter::from_parts(scalar(2.0), None, scalar(3.0), scalar(4.0), Conv2dParams::default()).unwrap();
        assert_eq!(a.forward(&scalar(1.0)).unwrap().data, vec![14.0]);
        assert_eq!(a.merge().data, vec![14.0]);
    }

    #[test]
    fn fresh_adapter_is_base_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w0 = Tensor4::random_normal([6, 4, 3, 3], 1.0, &mut rng);
        let a = ConvLoraAdapter::new(w0.clone(), Some(vec![0.5; 6]), 2, Conv2dParams::same(3), &mut rng).unwrap();
        let x = Tensor4::random_normal([2, 4, 5, 5], 1.0, &mut rng);
        assert_eq!(a.forward(&x).unwrap(), a.base_forward(&x).unwrap());
        assert_eq!(a.merge(), w0);
        assert!(a.up().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rank_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w0 = Tensor4::zeros([4, 4, 1, 1]);
        assert!(ConvLoraAdapter::new(w0.clone(), None, 4, Conv2dParams::default(), &mut rng).is_err());
        assert!(ConvLoraAdapter::new(w0.clone(), None, 3, Conv2dParams::default(), &mut rng).is_ok());
        let empty = Tensor4::zeros([0, 4, 1, 1]);
        assert!(ConvLoraAdapter::from_parts(w0, None, empty, Tensor4::zeros([4, 0, 1, 1]), Conv2dParams::default())
            .is_err());
    }

    #[test]
    fn param_count_formula() {
        assert_eq!(trainable_params(64, 64, 3, 3, 8), 5120);
        assert_eq!(trainable_params(64, 64, 3, 3, 0), 0);
    }

    #[test]
    fn conv_known_values() {
        // 3x3 ones kernel over a 3x3 ramp with padding 1: centre = sum of all
        let x = Tensor4::new([1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let w = Tensor4::new([1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let y = conv2d(&x, &w, None, Conv2dParams::same(3)).unwrap();
        assert_eq!(y.dims, [1, 1, 3, 3]);
        assert_eq!(y.at([0, 0, 1, 1]), 45.0);
        assert_eq!(y.at([0, 0, 0, 0]), 1.0 + 2.0 + 4.0 + 5.0);
        let strided = conv2d(&x, &w, Some(&[1.0]), Conv2dParams { stride: 2, padding: 1, groups: 1 }).unwrap();
        assert_eq!(strided.dims, [1, 1, 2, 2]);
        assert_eq!(strided.at([0, 0, 1, 1]), 1.0 + 5.0 + 6.0 + 8.0 + 9.0);
    }

    #[test]
    fn grouped_conv_is_per_channel() {
        let x = Tensor4::new([1, 2, 1, 1], vec![3.0, 5.0]).unwrap();
        let w = Tensor4::new([2, 1, 1, 1], vec![2.0, 10.0]).unwrap();
        let y = conv2d(&x, &w, None, Conv2dParams { stride: 1, padding: 0, groups: 2 }).unwrap();
        assert_eq!(y.data, vec![6.0, 50.0]);
    }

    #[test]
    fn shape_errors() {
        let x = Tensor4::zeros([1, 3, 4, 4]);
        let w = Tensor4::zeros([2, 2, 3, 3]);
        assert!(conv2d(&x, &w, None, Conv2dParams::default()).is_err());
        assert!(Tensor4::new([1, 1, 2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn bundle_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut a = ConvLoraAdapter::new(
            Tensor4::random_normal([4, 3, 3, 3], 1.0, &mut rng),
            None,
            2,
            Conv2dParams::same(3),
            &mut rng,
        )
        .unwrap();
        *a.up_mut() = Tensor4::random_normal([4, 2, 1, 1], 1.0, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapter.json");
        a.to_bundle().save(&path).unwrap();
        let b = AdapterBundle::load(&path).unwrap().into_adapter().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn budget_counts_adapters_as_trainable() {
        let layers = [
            LayerSpec { c_in: 64, c_out: 64, kernel: 3, groups: 1, adapter_rank: None },
            LayerSpec { c_in: 64, c_out: 64, kernel: 3, groups: 1, adapter_rank: Some(8) },
        ];
        let b = param_budget(&layers);
        assert_eq!(b.trainable, 5120);
        assert_eq!(b.total, 2 * 64 * 64 * 9 + 5120);
    }
}
