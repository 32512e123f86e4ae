//! Dense f64 arrays and the small set of array operations the detector is
//! built from.
//!
//! `FeatureMap` is the (height, width, channels) carrier used everywhere in
//! the network; `Matrix` only appears inside the channel self-attention
//! block. All operations here are pure functions over immutable values. The
//! tape in [`graph`] replays the same operations while recording the
//! intermediates backprop needs.

pub mod graph;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Negative-side slope of the leaky ReLU used by the fusion convs.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Rank-3 dense array in row-major (height, width, channel) order.
///
/// Zero-channel maps are allowed; they act as the identity for channel
/// concatenation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(contract(format!(
                "feature map data length {} does not match {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Self { height, width, channels, data })
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

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.idx(y, x, c);
        self.data[i] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Rank-2 dense array, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(contract(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Elementwise nonlinearity applied after a conv layer's affine stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PostOp {
    None,
    LeakyRelu,
    Silu,
    Sigmoid,
}

impl PostOp {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            PostOp::None => x,
            PostOp::LeakyRelu => {
                if x >= 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            PostOp::Silu => x * sigmoid(x),
            PostOp::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative at pre-activation `x`, given the already computed output `y`.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            PostOp::None => 1.0,
            PostOp::LeakyRelu => {
                if x >= 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            PostOp::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            PostOp::Sigmoid => y * (1.0 - y),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Borrowed view of one conv layer's values.
///
/// Weights are laid out `[ky][kx][in][out]`; padding is `(kernel - 1) / 2`
/// so the spatial size is preserved.
#[derive(Debug, Clone, Copy)]
pub struct ConvParams<'a> {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: &'a [f64],
    pub bias: &'a [f64],
    /// Per-output-channel (scale, shift) applied between bias and post-op.
    pub affine: Option<(&'a [f64], &'a [f64])>,
    pub post: PostOp,
}

impl<'a> ConvParams<'a> {
    fn validate(&self, input: &FeatureMap) -> Result<()> {
        if self.kernel != 1 && self.kernel != 3 {
            return Err(contract(format!("unsupported conv kernel {}", self.kernel)));
        }
        if input.channels != self.in_channels {
            return Err(contract(format!(
                "conv expects {} input channels, got {}",
                self.in_channels, input.channels
            )));
        }
        let expect = self.kernel * self.kernel * self.in_channels * self.out_channels;
        if self.weights.len() != expect {
            return Err(contract(format!(
                "conv weight count {} does not match k*k*in*out = {}",
                self.weights.len(),
                expect
            )));
        }
        if self.bias.len() != self.out_channels {
            return Err(contract("conv bias length does not match out channels".to_string()));
        }
        if let Some((s, t)) = self.affine {
            if s.len() != self.out_channels || t.len() != self.out_channels {
                return Err(contract("conv affine length does not match out channels".to_string()));
            }
        }
        Ok(())
    }
}

/// Intermediates saved by [`conv2d_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvSaved {
    /// Cross-correlation sum plus bias, before the affine stage.
    pub linear: FeatureMap,
    /// Input to the post-op (after affine). Equals `linear` when no affine.
    pub pre_post: FeatureMap,
}

/// Padded stride-1 cross-correlation, then per-channel affine, then post-op.
pub fn conv2d(input: &FeatureMap, p: &ConvParams) -> Result<FeatureMap> {
    Ok(conv2d_forward(input, p)?.0)
}

pub fn conv2d_forward(input: &FeatureMap, p: &ConvParams) -> Result<(FeatureMap, ConvSaved)> {
    p.validate(input)?;
    let (h, w, in_ch) = input.shape();
    let k = p.kernel;
    let pad = (k - 1) / 2;
    let out_ch = p.out_channels;
    let mut linear = FeatureMap::zeros(h, w, out_ch);
    // Accumulate rank-1 updates: for each tap and input channel, the weight
    // row over output channels is contiguous.
    for y in 0..h {
        for x in 0..w {
            let obase = linear.idx(y, x, 0);
            linear.data[obase..obase + out_ch].copy_from_slice(p.bias);
            for dy in 0..k {
                let iy = y + dy;
                if iy < pad || iy - pad >= h {
                    continue;
                }
                let iy = iy - pad;
                for dx in 0..k {
                    let ix = x + dx;
                    if ix < pad || ix - pad >= w {
                        continue;
                    }
                    let ix = ix - pad;
                    let ibase = input.idx(iy, ix, 0);
                    let wtap = (dy * k + dx) * in_ch * out_ch;
                    for c in 0..in_ch {
                        let xv = input.data[ibase + c];
                        let wrow = &p.weights[wtap + c * out_ch..wtap + (c + 1) * out_ch];
                        let acc = &mut linear.data[obase..obase + out_ch];
                        for (a, wv) in acc.iter_mut().zip(wrow.iter()) {
                            *a += xv * wv;
                        }
                    }
                }
            }
        }
    }
    let mut pre_post = linear.clone();
    if let Some((scale, shift)) = p.affine {
        for i in 0..pre_post.data.len() {
            let o = i % out_ch;
            pre_post.data[i] = scale[o] * pre_post.data[i] + shift[o];
        }
    }
    let mut out = pre_post.clone();
    for v in out.data.iter_mut() {
        *v = p.post.apply(*v);
    }
    Ok((out, ConvSaved { linear, pre_post }))
}

/// Gradients produced by [`conv2d_backward`].
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: FeatureMap,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// Empty when the layer has no affine stage.
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

pub fn conv2d_backward(
    input: &FeatureMap,
    p: &ConvParams,
    saved: &ConvSaved,
    output: &FeatureMap,
    grad_out: &FeatureMap,
) -> Result<ConvGrads> {
    p.validate(input)?;
    let (h, w, in_ch) = input.shape();
    let k = p.kernel;
    let pad = (k - 1) / 2;
    let out_ch = p.out_channels;
    if grad_out.shape() != (h, w, out_ch) {
        return Err(contract("conv grad shape mismatch".to_string()));
    }

    // Through the post-op.
    let mut d_pre = grad_out.clone();
    for i in 0..d_pre.data.len() {
        d_pre.data[i] *= p.post.derivative(saved.pre_post.data[i], output.data[i]);
    }

    // Through the affine stage.
    let (mut d_scale, mut d_shift) = (Vec::new(), Vec::new());
    let d_linear = if let Some((scale, _)) = p.affine {
        d_scale = vec![0.0; out_ch];
        d_shift = vec![0.0; out_ch];
        let mut d_lin = d_pre.clone();
        for i in 0..d_lin.data.len() {
            let o = i % out_ch;
            d_scale[o] += d_pre.data[i] * saved.linear.data[i];
            d_shift[o] += d_pre.data[i];
            d_lin.data[i] = d_pre.data[i] * scale[o];
        }
        d_lin
    } else {
        d_pre
    };

    let mut d_input = FeatureMap::zeros(h, w, in_ch);
    let mut d_weights = vec![0.0; p.weights.len()];
    let mut d_bias = vec![0.0; out_ch];
    for y in 0..h {
        for x in 0..w {
            for o in 0..out_ch {
                let g = d_linear.at(y, x, o);
                if g == 0.0 {
                    continue;
                }
                d_bias[o] += g;
                for dy in 0..k {
                    let iy = y + dy;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let iy = iy - pad;
                    for dx in 0..k {
                        let ix = x + dx;
                        if ix < pad || ix - pad >= w {
                            continue;
                        }
                        let ix = ix - pad;
                        let wbase = ((dy * k + dx) * in_ch) * out_ch + o;
                        let ibase = input.idx(iy, ix, 0);
                        for c in 0..in_ch {
                            d_weights[wbase + c * out_ch] += g * input.data[ibase + c];
                            d_input.data[ibase + c] += g * p.weights[wbase + c * out_ch];
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads { input: d_input, weights: d_weights, bias: d_bias, scale: d_scale, shift: d_shift })
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(contract(format!(
            "matmul dimension mismatch: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let av = a.at(i, k);
            if av == 0.0 {
                continue;
            }
            for j in 0..b.cols {
                out.data[i * b.cols + j] += av * b.at(k, j);
            }
        }
    }
    Ok(out)
}

/// `a * b^T` without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(contract(format!(
            "matmul_nt dimension mismatch: {}x{} times ({}x{})^T",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        for j in 0..b.rows {
            let mut acc = 0.0;
            for k in 0..a.cols {
                acc += a.at(i, k) * b.at(j, k);
            }
            out.set(i, j, acc);
        }
    }
    Ok(out)
}

/// Row-wise softmax, stabilized by subtracting the row max.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    if m.rows == 0 || m.cols == 0 {
        return Err(contract("softmax on empty matrix".to_string()));
    }
    let mut out = Matrix::zeros(m.rows, m.cols);
    for r in 0..m.rows {
        let row = &m.data[r * m.cols..(r + 1) * m.cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..m.cols {
            let e = (row[c] - max).exp();
            out.data[r * m.cols + c] = e;
            sum += e;
        }
        for c in 0..m.cols {
            out.data[r * m.cols + c] /= sum;
        }
    }
    Ok(out)
}

/// Block-replicates each cell by `factor` along both spatial axes.
pub fn upsample_nearest(input: &FeatureMap, factor: usize) -> Result<FeatureMap> {
    if !matches!(factor, 1 | 2 | 4) {
        return Err(contract(format!("unsupported upsample factor {factor}")));
    }
    let (h, w, c) = input.shape();
    let mut out = FeatureMap::zeros(h * factor, w * factor, c);
    for y in 0..h * factor {
        for x in 0..w * factor {
            let src = input.idx(y / factor, x / factor, 0);
            let dst = out.idx(y, x, 0);
            out.data[dst..dst + c].copy_from_slice(&input.data[src..src + c]);
        }
    }
    Ok(out)
}

/// Non-overlapping mean pooling over `factor`-sized blocks.
///
/// Block sums are reduced pairwise so that pooling an upsampled map
/// recovers the original bit-exactly (the power-of-two partial sums stay
/// representable).
pub fn avg_pool(input: &FeatureMap, factor: usize) -> Result<FeatureMap> {
    if factor == 0 {
        return Err(contract("avg_pool factor must be positive".to_string()));
    }
    let (h, w, c) = input.shape();
    if h % factor != 0 || w % factor != 0 {
        return Err(contract(format!(
            "avg_pool: {h}x{w} not divisible by factor {factor}"
        )));
    }
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = FeatureMap::zeros(h / factor, w / factor, c);
    let mut block = vec![0.0; factor * factor];
    for oy in 0..h / factor {
        for ox in 0..w / factor {
            for ch in 0..c {
                for by in 0..factor {
                    for bx in 0..factor {
                        block[by * factor + bx] = input.at(oy * factor + by, ox * factor + bx, ch);
                    }
                }
                out.set(oy, ox, ch, pairwise_sum(&mut block) * norm);
            }
        }
    }
    Ok(out)
}

fn pairwise_sum(vals: &mut [f64]) -> f64 {
    let mut n = vals.len();
    while n > 1 {
        let half = n / 2;
        for i in 0..half {
            vals[i] = vals[2 * i] + vals[2 * i + 1];
        }
        if n % 2 == 1 {
            vals[half] = vals[n - 1];
            n = half + 1;
        } else {
            n = half;
        }
    }
    vals[0]
}

/// Stacks `a`'s channels before `b`'s. Spatial sizes must agree.
pub fn concat_channels(a: &FeatureMap, b: &FeatureMap) -> Result<FeatureMap> {
    if a.height != b.height || a.width != b.width {
        return Err(contract(format!(
            "concat spatial mismatch: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let c = a.channels + b.channels;
    let mut out = FeatureMap::zeros(a.height, a.width, c);
    for y in 0..a.height {
        for x in 0..a.width {
            let dst = out.idx(y, x, 0);
            let sa = a.idx(y, x, 0);
            let sb = b.idx(y, x, 0);
            out.data[dst..dst + a.channels].copy_from_slice(&a.data[sa..sa + a.channels]);
            out.data[dst + a.channels..dst + c].copy_from_slice(&b.data[sb..sb + b.channels]);
        }
    }
    Ok(out)
}

pub fn add_maps(a: &FeatureMap, b: &FeatureMap) -> Result<FeatureMap> {
    if a.shape() != b.shape() {
        return Err(contract("add shape mismatch".to_string()));
    }
    let mut out = a.clone();
    for (o, v) in out.data.iter_mut().zip(b.data.iter()) {
        *o += v;
    }
    Ok(out)
}

/// Reshapes an H x W x C map to a C x (H*W) matrix: row c holds channel c
/// scanned row-major over space.
pub fn map_to_matrix(m: &FeatureMap) -> Matrix {
    let (h, w, c) = m.shape();
    let mut out = Matrix::zeros(c, h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.data[ch * (h * w) + y * w + x] = m.at(y, x, ch);
            }
        }
    }
    out
}

/// Inverse of [`map_to_matrix`].
pub fn matrix_to_map(m: &Matrix, height: usize, width: usize) -> Result<FeatureMap> {
    if m.cols != height * width {
        return Err(contract(format!(
            "matrix with {} columns cannot reshape to {}x{}",
            m.cols, height, width
        )));
    }
    let c = m.rows;
    let mut out = FeatureMap::zeros(height, width, c);
    for y in 0..height {
        for x in 0..width {
            for ch in 0..c {
                out.set(y, x, ch, m.data[ch * (height * width) + y * width + x]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_map(rng: &mut StdRng, h: usize, w: usize, c: usize) -> FeatureMap {
        let data = (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureMap::from_vec(h, w, c, data).unwrap()
    }

    #[test]
    fn conv_identity_1x1() {
        let mut rng = StdRng::seed_from_u64(1);
        let input = random_map(&mut rng, 5, 3, 2);
        // weights[c][o] = identity
        let weights = vec![1.0, 0.0, 0.0, 1.0];
        let p = ConvParams {
            kernel: 1,
            in_channels: 2,
            out_channels: 2,
            weights: &weights,
            bias: &[0.0, 0.0],
            affine: None,
            post: PostOp::None,
        };
        let out = conv2d(&input, &p).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv_zero_weights_gives_bias() {
        let input = FeatureMap::filled(4, 4, 3, 0.7);
        let weights = vec![0.0; 3 * 3 * 3 * 2];
        let p = ConvParams {
            kernel: 3,
            in_channels: 3,
            out_channels: 2,
            weights: &weights,
            bias: &[1.5, -2.0],
            affine: None,
            post: PostOp::None,
        };
        let out = conv2d(&input, &p).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(out.at(y, x, 0), 1.5);
                assert_eq!(out.at(y, x, 1), -2.0);
            }
        }
    }

    /// Independent nested-loop oracle over the padded window.
    fn conv_oracle(input: &FeatureMap, p: &ConvParams) -> FeatureMap {
        let (h, w, cin) = input.shape();
        let k = p.kernel as isize;
        let pad = (k - 1) / 2;
        let mut out = FeatureMap::zeros(h, w, p.out_channels);
        for y in 0..h as isize {
            for x in 0..w as isize {
                for o in 0..p.out_channels {
                    let mut acc = p.bias[o];
                    for dy in 0..k {
                        for dx in 0..k {
                            let iy = y + dy - pad;
                            let ix = x + dx - pad;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for c in 0..cin {
                                let wv = p.weights
                                    [(((dy * k + dx) as usize * cin) + c) * p.out_channels + o];
                                acc += input.at(iy as usize, ix as usize, c) * wv;
                            }
                        }
                    }
                    if let Some((s, t)) = p.affine {
                        acc = s[o] * acc + t[o];
                    }
                    out.set(y as usize, x as usize, o, p.post.apply(acc));
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let mut rng = StdRng::seed_from_u64(7);
        let input = random_map(&mut rng, 4, 4, 2);
        let weights: Vec<f64> = (0..3 * 3 * 2 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let scale: Vec<f64> = (0..3).map(|_| rng.gen_range(0.5..1.5)).collect();
        let shift: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let p = ConvParams {
            kernel: 3,
            in_channels: 2,
            out_channels: 3,
            weights: &weights,
            bias: &bias,
            affine: Some((&scale, &shift)),
            post: PostOp::LeakyRelu,
        };
        let got = conv2d(&input, &p).unwrap();
        let want = conv_oracle(&input, &p);
        for (g, w) in got.data().iter().zip(want.data().iter()) {
            assert!((g - w).abs() < 1e-9, "{g} vs {w}");
        }
    }

    #[test]
    fn conv_channel_mismatch_errors() {
        let input = FeatureMap::zeros(2, 2, 3);
        let weights = vec![0.0; 4];
        let p = ConvParams {
            kernel: 1,
            in_channels: 2,
            out_channels: 2,
            weights: &weights,
            bias: &[0.0, 0.0],
            affine: None,
            post: PostOp::None,
        };
        assert!(conv2d(&input, &p).is_err());
    }

    #[test]
    fn matmul_hand_cases() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let i = Matrix::identity(2);
        assert_eq!(matmul(&a, &i).unwrap(), a);
        let b = Matrix::from_vec(2, 1, vec![5.0, 6.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[17.0, 39.0]);
        assert!(matmul(&a, &Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut rng = StdRng::seed_from_u64(3);
        let a = Matrix::from_vec(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let b = Matrix::from_vec(2, 4, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut bt = Matrix::zeros(4, 2);
        for r in 0..2 {
            for c in 0..4 {
                bt.set(c, r, b.at(r, c));
            }
        }
        let want = matmul(&a, &bt).unwrap();
        let got = matmul_nt(&a, &b).unwrap();
        for (g, w) in got.data().iter().zip(want.data().iter()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_cases() {
        let m = Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let s = softmax_rows(&m).unwrap();
        assert!((s.at(0, 0) - 0.5).abs() < 1e-12);

        let single = Matrix::from_vec(1, 1, vec![42.0]).unwrap();
        assert!((softmax_rows(&single).unwrap().at(0, 0) - 1.0).abs() < 1e-12);

        let m = Matrix::from_vec(1, 2, vec![2.0f64.ln(), 0.0]).unwrap();
        let s = softmax_rows(&m).unwrap();
        assert!((s.at(0, 0) - 2.0 / 3.0).abs() < 1e-9);
        assert!((s.at(0, 1) - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_shift_invariance_and_row_sums() {
        let mut rng = StdRng::seed_from_u64(11);
        let m = Matrix::from_vec(4, 5, (0..20).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let s = softmax_rows(&m).unwrap();
        let mut shifted = m.clone();
        for r in 0..4 {
            for c in 0..5 {
                shifted.set(r, c, m.at(r, c) + 7.25);
            }
        }
        let s2 = softmax_rows(&shifted).unwrap();
        for r in 0..4 {
            let sum: f64 = (0..5).map(|c| s.at(r, c)).sum();
            assert!((sum - 1.0).abs() < 1e-9);
            for c in 0..5 {
                assert!(s.at(r, c) >= 0.0);
                assert!((s.at(r, c) - s2.at(r, c)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn upsample_cases() {
        let m = FeatureMap::filled(1, 1, 1, 3.5);
        let up = upsample_nearest(&m, 2).unwrap();
        assert_eq!(up.shape(), (2, 2, 1));
        assert!(up.data().iter().all(|&v| v == 3.5));

        let m = FeatureMap::from_vec(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(upsample_nearest(&m, 1).unwrap(), m);
        let up = upsample_nearest(&m, 2).unwrap();
        let want = [1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0];
        assert_eq!(up.data(), &want);
        assert!(upsample_nearest(&m, 3).is_err());
    }

    #[test]
    fn upsample_then_avg_pool_recovers_exactly() {
        let mut rng = StdRng::seed_from_u64(5);
        for &factor in &[1usize, 2, 4] {
            let m = random_map(&mut rng, 3, 2, 4);
            let round = avg_pool(&upsample_nearest(&m, factor).unwrap(), factor).unwrap();
            assert_eq!(round, m);
        }
    }

    #[test]
    fn concat_cases() {
        let a = FeatureMap::from_vec(1, 1, 1, vec![5.0]).unwrap();
        let b = FeatureMap::from_vec(1, 1, 2, vec![7.0, 9.0]).unwrap();
        let ab = concat_channels(&a, &b).unwrap();
        assert_eq!(ab.data(), &[5.0, 7.0, 9.0]);
        let ba = concat_channels(&b, &a).unwrap();
        assert_ne!(ab, ba);

        let empty = FeatureMap::zeros(1, 1, 0);
        assert_eq!(concat_channels(&a, &empty).unwrap(), a);

        let tall = FeatureMap::zeros(2, 1, 1);
        assert!(concat_channels(&a, &tall).is_err());
    }

    #[test]
    fn map_matrix_round_trip() {
        let mut rng = StdRng::seed_from_u64(9);
        let m = random_map(&mut rng, 3, 4, 2);
        let mat = map_to_matrix(&m);
        assert_eq!(mat.rows(), 2);
        assert_eq!(mat.cols(), 12);
        assert_eq!(mat.at(1, 0 * 4 + 2), m.at(0, 2, 1));
        let back = matrix_to_map(&mat, 3, 4).unwrap();
        assert_eq!(back, m);
    }
}
