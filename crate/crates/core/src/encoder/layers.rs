//! Hand-differentiated layers.
//!
//! Each layer caches what its backward pass needs during `forward`; calling
//! `backward` without a cached forward is a state error. Parameter gradients
//! accumulate until `zero_grad`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{dot, gemm, Tensor};

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv3d,
    ChannelAffine,
    Relu,
    Pool,
    Flatten,
    Linear,
    L2Norm,
}

impl LayerKind {
    pub const ALL: [LayerKind; 7] = [
        LayerKind::Conv3d,
        LayerKind::ChannelAffine,
        LayerKind::Relu,
        LayerKind::Pool,
        LayerKind::Flatten,
        LayerKind::Linear,
        LayerKind::L2Norm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv3d => "conv3d",
            LayerKind::ChannelAffine => "channel_affine",
            LayerKind::Relu => "relu",
            LayerKind::Pool => "pool",
            LayerKind::Flatten => "flatten",
            LayerKind::Linear => "linear",
            LayerKind::L2Norm => "l2norm",
        }
    }
}

fn missing_cache(kind: LayerKind) -> Error {
    Error::State(format!("{} backward called before forward", kind.name()))
}

fn mismatch(kind: LayerKind, expected: impl std::fmt::Debug, got: &[usize]) -> Error {
    Error::Structural(format!(
        "{}: expected input {expected:?}, got {got:?}",
        kind.name()
    ))
}

/// 3x3x3 convolution with unit zero padding and per-axis stride.
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub weight: Param,
    pub bias: Param,
    pub stride: [usize; 3],
    cache: Option<ConvCache>,
}

#[derive(Debug, Clone)]
struct ConvCache {
    input: [usize; 5],
    out: [usize; 3],
    cols: Vec<Vec<f64>>,
}

const KSIZE: usize = 3;
const KVOL: usize = KSIZE * KSIZE * KSIZE;

fn conv_out(extent: usize, stride: usize) -> usize {
    (extent + 2 - KSIZE) / stride + 1
}

impl Conv3d {
    pub fn new(in_ch: usize, out_ch: usize, stride: [usize; 3], rng: &mut SeededRng) -> Self {
        let fan_in = (in_ch * KVOL) as f64;
        let weight = Tensor::randn(
            &[out_ch, in_ch, KSIZE, KSIZE, KSIZE],
            (2.0 / fan_in).sqrt(),
            rng,
        );
        Self {
            weight: Param::new(weight),
            bias: Param::new(Tensor::zeros(&[out_ch])),
            stride,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *input {
            [c, t, h, w] if c == self.in_channels() => Ok(vec![
                self.out_channels(),
                conv_out(t, self.stride[0]),
                conv_out(h, self.stride[1]),
                conv_out(w, self.stride[2]),
            ]),
            _ => Err(mismatch(
                LayerKind::Conv3d,
                format!("({}, T, H, W)", self.in_channels()),
                input,
            )),
        }
    }

    fn im2col(&self, x: &[f64], dims: [usize; 4], out: [usize; 3], col: &mut [f64]) {
        let [cin, t, h, w] = dims;
        let [to, ho, wo] = out;
        let [st, sh, sw] = self.stride;
        let p = to * ho * wo;
        col.iter_mut().for_each(|v| *v = 0.0);
        for ci in 0..cin {
            for kt in 0..KSIZE {
                for kh in 0..KSIZE {
                    for kw in 0..KSIZE {
                        let row = ((ci * KSIZE + kt) * KSIZE + kh) * KSIZE + kw;
                        let dst = &mut col[row * p..(row + 1) * p];
                        for ot in 0..to {
                            let it = (ot * st + kt) as isize - 1;
                            if it < 0 || it >= t as isize {
                                continue;
                            }
                            for oh in 0..ho {
                                let ih = (oh * sh + kh) as isize - 1;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let src = ((ci * t + it as usize) * h + ih as usize) * w;
                                let base = (ot * ho + oh) * wo;
                                for ow in 0..wo {
                                    let iw = (ow * sw + kw) as isize - 1;
                                    if iw >= 0 && iw < w as isize {
                                        dst[base + ow] = x[src + iw as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], dims: [usize; 4], out: [usize; 3], dx: &mut [f64]) {
        let [cin, t, h, w] = dims;
        let [to, ho, wo] = out;
        let [st, sh, sw] = self.stride;
        let p = to * ho * wo;
        for ci in 0..cin {
            for kt in 0..KSIZE {
                for kh in 0..KSIZE {
                    for kw in 0..KSIZE {
                        let row = ((ci * KSIZE + kt) * KSIZE + kh) * KSIZE + kw;
                        let src = &col[row * p..(row + 1) * p];
                        for ot in 0..to {
                            let it = (ot * st + kt) as isize - 1;
                            if it < 0 || it >= t as isize {
                                continue;
                            }
                            for oh in 0..ho {
                                let ih = (oh * sh + kh) as isize - 1;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let dst = ((ci * t + it as usize) * h + ih as usize) * w;
                                let base = (ot * ho + oh) * wo;
                                for ow in 0..wo {
                                    let iw = (ow * sw + kw) as isize - 1;
                                    if iw >= 0 && iw < w as isize {
                                        dx[dst + iw as usize] += src[base + ow];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let [b, c, t, h, w] = x
            .dims5()
            .map_err(|_| mismatch(LayerKind::Conv3d, "(B, C, T, H, W)", x.shape()))?;
        let out_sample = self.out_shape(&[c, t, h, w])?;
        let (cout, out) = (out_sample[0], [out_sample[1], out_sample[2], out_sample[3]]);
        let p: usize = out.iter().product();
        let k = c * KVOL;
        let mut y = vec![0.0; b * cout * p];
        let mut cols = Vec::with_capacity(b);
        for (i, y_b) in y.chunks_exact_mut(cout * p).enumerate() {
            let mut col = vec![0.0; k * p];
            self.im2col(x.row(i), [c, t, h, w], out, &mut col);
            gemm(
                cout,
                k,
                p,
                1.0,
                self.weight.value.data(),
                false,
                &col,
                false,
                0.0,
                y_b,
            );
            for (co, chunk) in y_b.chunks_exact_mut(p).enumerate() {
                let bias = self.bias.value.data()[co];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
            cols.push(col);
        }
        self.cache = Some(ConvCache {
            input: [b, c, t, h, w],
            out,
            cols,
        });
        Tensor::new(vec![b, cout, out[0], out[1], out[2]], y)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| missing_cache(LayerKind::Conv3d))?;
        let [b, c, t, h, w] = cache.input;
        let cout = self.out_channels();
        let p: usize = cache.out.iter().product();
        let k = c * KVOL;
        let expected = [b, cout, cache.out[0], cache.out[1], cache.out[2]];
        if grad.shape() != expected {
            return Err(mismatch(LayerKind::Conv3d, expected, grad.shape()));
        }
        let mut dx = vec![0.0; b * c * t * h * w];
        let mut dcol = vec![0.0; k * p];
        for (i, col) in cache.cols.iter().enumerate() {
            let g = grad.row(i);
            gemm(
                cout,
                p,
                k,
                1.0,
                g,
                false,
                col,
                true,
                1.0,
                self.weight.grad.data_mut(),
            );
            for (co, chunk) in g.chunks_exact(p).enumerate() {
                self.bias.grad.data_mut()[co] += chunk.iter().sum::<f64>();
            }
            gemm(
                k,
                cout,
                p,
                1.0,
                self.weight.value.data(),
                true,
                g,
                false,
                0.0,
                &mut dcol,
            );
            let n = c * t * h * w;
            self.col2im(&dcol, [c, t, h, w], cache.out, &mut dx[i * n..(i + 1) * n]);
        }
        Tensor::new(vec![b, c, t, h, w], dx)
    }
}

/// Learnable per-channel `scale * x + bias` on `(B, C, ...)` inputs; stands in
/// for batch normalisation.
#[derive(Debug, Clone)]
pub struct ChannelAffine {
    pub scale: Param,
    pub bias: Param,
    cache: Option<Tensor>,
}

impl ChannelAffine {
    pub fn new(channels: usize) -> Self {
        Self {
            scale: Param::new(Tensor::full(&[channels], 1.0)),
            bias: Param::new(Tensor::zeros(&[channels])),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.value.len()
    }

    fn check(&self, shape: &[usize]) -> Result<()> {
        if shape.len() < 2 || shape[1] != self.channels() {
            return Err(mismatch(
                LayerKind::ChannelAffine,
                format!("(B, {}, ...)", self.channels()),
                shape,
            ));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check(x.shape())?;
        let c = self.channels();
        let inner: usize = x.shape()[2..].iter().product();
        let mut y = x.clone();
        for (j, chunk) in y.data_mut().chunks_exact_mut(inner).enumerate() {
            let (s, b) = (
                self.scale.value.data()[j % c],
                self.bias.value.data()[j % c],
            );
            chunk.iter_mut().for_each(|v| *v = s * *v + b);
        }
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self
            .cache
            .as_ref()
            .ok_or_else(|| missing_cache(LayerKind::ChannelAffine))?;
        if grad.shape() != x.shape() {
            return Err(mismatch(LayerKind::ChannelAffine, x.shape(), grad.shape()));
        }
        let c = self.channels();
        let inner: usize = x.shape()[2..].iter().product();
        let mut dx = grad.clone();
        for (j, (gx, xx)) in dx
            .data_mut()
            .chunks_exact_mut(inner)
            .zip(x.data().chunks_exact(inner))
            .enumerate()
        {
            let ch = j % c;
            self.scale.grad.data_mut()[ch] += dot(gx, xx);
            self.bias.grad.data_mut()[ch] += gx.iter().sum::<f64>();
            let s = self.scale.value.data()[ch];
            gx.iter_mut().for_each(|v| *v *= s);
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    cache: Option<Tensor>,
}

impl Relu {
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.cache = Some(x.clone());
        Ok(x.map(|v| v.max(0.0)))
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self
            .cache
            .as_ref()
            .ok_or_else(|| missing_cache(LayerKind::Relu))?;
        if grad.shape() != x.shape() {
            return Err(mismatch(LayerKind::Relu, x.shape(), grad.shape()));
        }
        let data = grad
            .data()
            .iter()
            .zip(x.data())
            .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
            .collect();
        Tensor::new(grad.shape().to_vec(), data)
    }
}

/// Global spatio-temporal average: `(B, C, T, H, W) -> (B, C, 1, 1, 1)`.
#[derive(Debug, Clone, Default)]
pub struct GlobalPool {
    cache: Option<[usize; 5]>,
}

impl GlobalPool {
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let dims = x
            .dims5()
            .map_err(|_| mismatch(LayerKind::Pool, "(B, C, T, H, W)", x.shape()))?;
        let [b, c, t, h, w] = dims;
        let n = t * h * w;
        let data = x
            .data()
            .chunks_exact(n)
            .map(|chunk| chunk.iter().sum::<f64>() / n as f64)
            .collect();
        self.cache = Some(dims);
        Tensor::new(vec![b, c, 1, 1, 1], data)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let [b, c, t, h, w] = self.cache.ok_or_else(|| missing_cache(LayerKind::Pool))?;
        if grad.shape() != [b, c, 1, 1, 1] {
            return Err(mismatch(LayerKind::Pool, [b, c, 1, 1, 1], grad.shape()));
        }
        let n = t * h * w;
        let mut dx = Vec::with_capacity(b * c * n);
        for &g in grad.data() {
            dx.extend(std::iter::repeat_n(g / n as f64, n));
        }
        Tensor::new(vec![b, c, t, h, w], dx)
    }
}

/// `(B, ...) -> (B, prod(...))`.
#[derive(Debug, Clone, Default)]
pub struct Flatten {
    cache: Option<Vec<usize>>,
}

impl Flatten {
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.rank() < 2 {
            return Err(mismatch(LayerKind::Flatten, "(B, ...)", x.shape()));
        }
        self.cache = Some(x.shape().to_vec());
        x.reshape(&[x.rows(), x.row_len()])
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let shape = self
            .cache
            .as_ref()
            .ok_or_else(|| missing_cache(LayerKind::Flatten))?;
        grad.reshape(shape)
    }
}

/// `y = x W^T + b` with `W` of shape `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    cache: Option<Tensor>,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut SeededRng) -> Self {
        let weight = Tensor::randn(&[output, input], (2.0 / input as f64).sqrt(), rng);
        Self::from_params(weight, Tensor::zeros(&[output]))
    }

    pub fn from_params(weight: Tensor, bias: Tensor) -> Self {
        Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
            cache: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.apply(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    /// Forward without caching.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (b, d) = x
            .dims2()
            .map_err(|_| mismatch(LayerKind::Linear, "(B, in)", x.shape()))?;
        if d != self.in_features() {
            return Err(mismatch(
                LayerKind::Linear,
                format!("(B, {})", self.in_features()),
                x.shape(),
            ));
        }
        let o = self.out_features();
        let mut y = vec![0.0; b * o];
        gemm(
            b,
            d,
            o,
            1.0,
            x.data(),
            false,
            self.weight.value.data(),
            true,
            0.0,
            &mut y,
        );
        for row in y.chunks_exact_mut(o) {
            for (v, bias) in row.iter_mut().zip(self.bias.value.data()) {
                *v += bias;
            }
        }
        Tensor::new(vec![b, o], y)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self
            .cache
            .as_ref()
            .ok_or_else(|| missing_cache(LayerKind::Linear))?;
        let (b, d) = x.dims2()?;
        let o = self.out_features();
        if grad.shape() != [b, o] {
            return Err(mismatch(LayerKind::Linear, [b, o], grad.shape()));
        }
        gemm(
            o,
            b,
            d,
            1.0,
            grad.data(),
            true,
            x.data(),
            false,
            1.0,
            self.weight.grad.data_mut(),
        );
        for row in grad.data().chunks_exact(o) {
            for (gb, g) in self.bias.grad.data_mut().iter_mut().zip(row) {
                *gb += g;
            }
        }
        let mut dx = vec![0.0; b * d];
        gemm(
            b,
            o,
            d,
            1.0,
            grad.data(),
            false,
            self.weight.value.data(),
            false,
            0.0,
            &mut dx,
        );
        Tensor::new(vec![b, d], dx)
    }
}

/// Row-wise projection onto the unit sphere.
#[derive(Debug, Clone, Default)]
pub struct L2Norm {
    cache: Option<(Tensor, Vec<f64>)>,
}

impl L2Norm {
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (b, _) = x
            .dims2()
            .map_err(|_| mismatch(LayerKind::L2Norm, "(B, D)", x.shape()))?;
        let norms: Vec<f64> = (0..b).map(|i| dot(x.row(i), x.row(i)).sqrt()).collect();
        if let Some(i) = norms.iter().position(|n| !(*n > 0.0)) {
            return Err(Error::Degenerate(format!("l2norm: row {i} has zero norm")));
        }
        let mut y = x.clone();
        for (i, n) in norms.iter().enumerate() {
            y.row_mut(i).iter_mut().for_each(|v| *v /= n);
        }
        self.cache = Some((y.clone(), norms));
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let (y, norms) = self
            .cache
            .as_ref()
            .ok_or_else(|| missing_cache(LayerKind::L2Norm))?;
        if grad.shape() != y.shape() {
            return Err(mismatch(LayerKind::L2Norm, y.shape(), grad.shape()));
        }
        let mut dx = grad.clone();
        for (i, n) in norms.iter().enumerate() {
            let yr = y.row(i);
            let proj = dot(yr, grad.row(i));
            for (d, &yv) in dx.row_mut(i).iter_mut().zip(yr) {
                *d = (*d - yv * proj) / n;
            }
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv3d(Conv3d),
    ChannelAffine(ChannelAffine),
    Relu(Relu),
    Pool(GlobalPool),
    Flatten(Flatten),
    Linear(Linear),
    L2Norm(L2Norm),
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv3d(_) => LayerKind::Conv3d,
            Layer::ChannelAffine(_) => LayerKind::ChannelAffine,
            Layer::Relu(_) => LayerKind::Relu,
            Layer::Pool(_) => LayerKind::Pool,
            Layer::Flatten(_) => LayerKind::Flatten,
            Layer::Linear(_) => LayerKind::Linear,
            Layer::L2Norm(_) => LayerKind::L2Norm,
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv3d(l) => l.forward(x),
            Layer::ChannelAffine(l) => l.forward(x),
            Layer::Relu(l) => l.forward(x),
            Layer::Pool(l) => l.forward(x),
            Layer::Flatten(l) => l.forward(x),
            Layer::Linear(l) => l.forward(x),
            Layer::L2Norm(l) => l.forward(x),
        }
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv3d(l) => l.backward(grad),
            Layer::ChannelAffine(l) => l.backward(grad),
            Layer::Relu(l) => l.backward(grad),
            Layer::Pool(l) => l.backward(grad),
            Layer::Flatten(l) => l.backward(grad),
            Layer::Linear(l) => l.backward(grad),
            Layer::L2Norm(l) => l.backward(grad),
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn out_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let kind = self.kind();
        match self {
            Layer::Conv3d(l) => l.out_shape(input),
            Layer::ChannelAffine(l) => {
                if input.first() != Some(&l.channels()) {
                    return Err(mismatch(kind, format!("({}, ...)", l.channels()), input));
                }
                Ok(input.to_vec())
            }
            Layer::Relu(_) => Ok(input.to_vec()),
            Layer::Pool(_) => match *input {
                [c, _, _, _] => Ok(vec![c, 1, 1, 1]),
                _ => Err(mismatch(kind, "(C, T, H, W)", input)),
            },
            Layer::Flatten(_) => Ok(vec![input.iter().product()]),
            Layer::Linear(l) => match *input {
                [d] if d == l.in_features() => Ok(vec![l.out_features()]),
                _ => Err(mismatch(kind, format!("({})", l.in_features()), input)),
            },
            Layer::L2Norm(_) => match *input {
                [_] => Ok(input.to_vec()),
                _ => Err(mismatch(kind, "(D)", input)),
            },
        }
    }

    /// Parameters in checkpoint order: `weight` (or scale) then `bias`.
    pub fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Conv3d(l) => vec![&l.weight, &l.bias],
            Layer::ChannelAffine(l) => vec![&l.scale, &l.bias],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Conv3d(l) => vec![&mut l.weight, &mut l.bias],
            Layer::ChannelAffine(l) => vec![&mut l.scale, &mut l.bias],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            _ => Vec::new(),
        }
    }

    pub fn clear_cache(&mut self) {
        match self {
            Layer::Conv3d(l) => l.cache = None,
            Layer::ChannelAffine(l) => l.cache = None,
            Layer::Relu(l) => l.cache = None,
            Layer::Pool(l) => l.cache = None,
            Layer::Flatten(l) => l.cache = None,
            Layer::Linear(l) => l.cache = None,
            Layer::L2Norm(l) => l.cache = None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar objective `sum(c * layer(x))` and its central-difference input gradient.
    fn check_layer(mut layer: Layer, x: Tensor, seed: u64) {
        let mut rng = SeededRng::new(seed);
        let y = layer.forward(&x).unwrap();
        let c = Tensor::randn(y.shape(), 1.0, &mut rng);
        let dx = layer.backward(&c).unwrap();
        assert_eq!(dx.shape(), x.shape());
        let objective = |l: &mut Layer, x: &Tensor| l.forward(x).unwrap().dot(&c).unwrap();
        let h = 1e-5;
        let mut fd = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            let mut probe = layer.clone();
            fd.data_mut()[i] = (objective(&mut probe, &p) - objective(&mut probe, &m)) / (2.0 * h);
        }
        let err = dx.sub(&fd).unwrap().norm() / dx.norm().max(fd.norm()).max(1e-12);
        assert!(err < 1e-6, "{:?} input grad rel err {err}", layer.kind());

        for pi in 0..layer.params().len() {
            let analytic = layer.params()[pi].grad.clone();
            assert_eq!(analytic.shape(), layer.params()[pi].value.shape());
            let mut fdp = Tensor::zeros(analytic.shape());
            for i in 0..analytic.len() {
                let mut plus = layer.clone();
                plus.params_mut()[pi].value.data_mut()[i] += h;
                let mut minus = layer.clone();
                minus.params_mut()[pi].value.data_mut()[i] -= h;
                fdp.data_mut()[i] =
                    (objective(&mut plus, &x) - objective(&mut minus, &x)) / (2.0 * h);
            }
            let err =
                analytic.sub(&fdp).unwrap().norm() / analytic.norm().max(fdp.norm()).max(1e-12);
            assert!(err < 1e-6, "{:?} param {pi} rel err {err}", layer.kind());
        }
    }

    #[test]
    fn conv3d_gradients() {
        let mut rng = SeededRng::new(1);
        let conv = Conv3d::new(2, 3, [2, 1, 2], &mut rng);
        let mut layer = Layer::Conv3d(conv);
        if let Layer::Conv3d(c) = &mut layer {
            c.bias.value = Tensor::randn(&[3], 0.5, &mut rng);
        }
        check_layer(layer, Tensor::randn(&[2, 2, 4, 3, 5], 1.0, &mut rng), 2);
    }

    #[test]
    fn conv3d_output_extents() {
        let mut rng = SeededRng::new(0);
        let conv = Conv3d::new(3, 8, [1, 2, 2], &mut rng);
        assert_eq!(conv.out_shape(&[3, 8, 16, 16]).unwrap(), vec![8, 8, 8, 8]);
        let conv = Conv3d::new(8, 16, [2, 1, 1], &mut rng);
        assert_eq!(conv.out_shape(&[8, 8, 8, 8]).unwrap(), vec![16, 4, 8, 8]);
        assert!(conv.out_shape(&[3, 8, 8, 8]).is_err());
    }

    #[test]
    fn conv3d_matches_direct_sum() {
        let mut rng = SeededRng::new(5);
        let mut conv = Conv3d::new(2, 2, [1, 2, 1], &mut rng);
        conv.bias.value = Tensor::new(vec![2], vec![0.25, -0.5]).unwrap();
        let x = Tensor::randn(&[1, 2, 3, 4, 3], 1.0, &mut rng);
        let y = conv.forward(&x).unwrap();
        let [_, co, to, ho, wo] = y.dims5().unwrap();
        let [_, ci, t, h, w] = x.dims5().unwrap();
        let wv = conv.weight.value.data();
        for o in 0..co {
            for ot in 0..to {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut s = conv.bias.value.data()[o];
                        for c in 0..ci {
                            for kt in 0..3 {
                                for kh in 0..3 {
                                    for kw in 0..3 {
                                        let (it, ih, iw) = (
                                            ot as isize + kt as isize - 1,
                                            (oh * 2) as isize + kh as isize - 1,
                                            ow as isize + kw as isize - 1,
                                        );
                                        if it < 0 || ih < 0 || iw < 0 {
                                            continue;
                                        }
                                        let (it, ih, iw) = (it as usize, ih as usize, iw as usize);
                                        if it >= t || ih >= h || iw >= w {
                                            continue;
                                        }
                                        s += wv[(((o * ci + c) * 3 + kt) * 3 + kh) * 3 + kw]
                                            * x.data()[((c * t + it) * h + ih) * w + iw];
                                    }
                                }
                            }
                        }
                        let got = y.data()[((o * to + ot) * ho + oh) * wo + ow];
                        assert!((got - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn affine_gradients() {
        let mut rng = SeededRng::new(3);
        let mut a = ChannelAffine::new(3);
        a.scale.value = Tensor::randn(&[3], 1.0, &mut rng);
        a.bias.value = Tensor::randn(&[3], 1.0, &mut rng);
        check_layer(
            Layer::ChannelAffine(a),
            Tensor::randn(&[2, 3, 2, 2, 2], 1.0, &mut rng),
            4,
        );
    }

    #[test]
    fn relu_gradients_away_from_kink() {
        let mut rng = SeededRng::new(5);
        let x =
            Tensor::randn(&[2, 3, 4], 1.0, &mut rng)
                .map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        check_layer(Layer::Relu(Relu::default()), x, 6);
    }

    #[test]
    fn pool_and_flatten_gradients() {
        let mut rng = SeededRng::new(7);
        check_layer(
            Layer::Pool(GlobalPool::default()),
            Tensor::randn(&[2, 3, 2, 3, 2], 1.0, &mut rng),
            8,
        );
        check_layer(
            Layer::Flatten(Flatten::default()),
            Tensor::randn(&[2, 3, 1, 1, 1], 1.0, &mut rng),
            9,
        );
    }

    #[test]
    fn linear_gradients() {
        let mut rng = SeededRng::new(10);
        let mut l = Linear::new(5, 4, &mut rng);
        l.bias.value = Tensor::randn(&[4], 1.0, &mut rng);
        check_layer(Layer::Linear(l), Tensor::randn(&[3, 5], 1.0, &mut rng), 11);
    }

    #[test]
    fn l2norm_gradients_and_tangency() {
        let mut rng = SeededRng::new(12);
        let x = Tensor::randn(&[3, 6], 1.0, &mut rng);
        check_layer(Layer::L2Norm(L2Norm::default()), x.clone(), 13);

        // A gradient pointing along the output direction is annihilated.
        let mut n = L2Norm::default();
        let y = n.forward(&x).unwrap();
        let dx = n.backward(&y.scale(2.5)).unwrap();
        assert!(dx.max_abs() < 1e-9);
    }

    #[test]
    fn backward_before_forward_is_a_state_error() {
        let mut rng = SeededRng::new(0);
        let mut layers = vec![
            Layer::Conv3d(Conv3d::new(1, 1, [1, 1, 1], &mut rng)),
            Layer::ChannelAffine(ChannelAffine::new(1)),
            Layer::Relu(Relu::default()),
            Layer::Pool(GlobalPool::default()),
            Layer::Flatten(Flatten::default()),
            Layer::Linear(Linear::new(1, 1, &mut rng)),
            Layer::L2Norm(L2Norm::default()),
        ];
        for l in &mut layers {
            assert!(matches!(
                l.backward(&Tensor::zeros(&[1, 1])),
                Err(Error::State(_))
            ));
        }
    }

    #[test]
    fn conv_rejects_wrong_channels() {
        let mut rng = SeededRng::new(0);
        let mut conv = Conv3d::new(3, 2, [1, 1, 1], &mut rng);
        let err = conv.forward(&Tensor::zeros(&[1, 2, 2, 2, 2])).unwrap_err();
        assert!(err.to_string().contains("conv3d"));
    }
}
