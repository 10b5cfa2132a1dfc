use serde::{Deserialize, Serialize};

use super::layers::{
    ChannelAffine, Conv3d, Flatten, GlobalPool, L2Norm, Layer, Linear, Param, Relu,
};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub channels: usize,
    /// (time, height, width)
    pub stride: [usize; 3],
}

/// Declarative architecture: conv blocks (conv3d → channel affine → relu),
/// a pooling block, then either a projection head or a bare linear embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub in_channels: usize,
    /// (T, H, W)
    pub input_size: [usize; 3],
    pub blocks: Vec<ConvBlockSpec>,
    pub embed_dim: usize,
    /// Hidden width of the projection head. `None` builds a single linear
    /// embedding with no removable head.
    pub head_hidden: Option<usize>,
    /// Constant subtracted from every input value before block 1.
    #[serde(default)]
    pub input_offset: f64,
}

impl ArchSpec {
    /// Four conv blocks, 8→16→32→64 channels, spatial stride on blocks 1
    /// and 3 and temporal stride on block 2, D = 64, inputs centred at 0.5.
    pub fn video(in_channels: usize, input_size: [usize; 3]) -> Self {
        let block = |channels, stride| ConvBlockSpec { channels, stride };
        Self {
            in_channels,
            input_size,
            blocks: vec![
                block(8, [1, 2, 2]),
                block(16, [2, 1, 1]),
                block(32, [1, 2, 2]),
                block(64, [1, 1, 1]),
            ],
            embed_dim: 64,
            head_hidden: Some(64),
            input_offset: 0.5,
        }
    }

    pub fn backbone_width(&self) -> usize {
        self.blocks.last().map_or(self.in_channels, |b| b.channels)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderStack {
    arch: ArchSpec,
    modality: String,
    layers: Vec<Layer>,
    /// Block `i` spans `layers[block_starts[i] .. block_starts[i + 1]]`.
    block_starts: Vec<usize>,
    /// Per-sample activation shape at each block boundary (`depth + 1` entries).
    boundary_shapes: Vec<Vec<usize>>,
    mixable: Vec<usize>,
    backbone_end: Option<usize>,
    frozen: bool,
}

impl EncoderStack {
    pub fn build(arch: ArchSpec, modality: &str, rng: &mut SeededRng) -> Result<Self> {
        if arch.blocks.is_empty() {
            return Err(Error::Parameter(
                "encoder needs at least one conv block".into(),
            ));
        }
        let mut blocks: Vec<Vec<Layer>> = Vec::new();
        let mut c = arch.in_channels;
        for b in &arch.blocks {
            blocks.push(vec![
                Layer::Conv3d(Conv3d::new(c, b.channels, b.stride, rng)),
                Layer::ChannelAffine(ChannelAffine::new(b.channels)),
                Layer::Relu(Relu::default()),
            ]);
            c = b.channels;
        }
        let mixable = (1..=arch.blocks.len()).collect();
        let backbone_end = match arch.head_hidden {
            Some(hidden) => {
                blocks.push(vec![
                    Layer::Pool(GlobalPool::default()),
                    Layer::Flatten(Flatten::default()),
                ]);
                blocks.push(vec![
                    Layer::Linear(Linear::new(c, hidden, rng)),
                    Layer::Relu(Relu::default()),
                    Layer::Linear(Linear::new(hidden, arch.embed_dim, rng)),
                    Layer::L2Norm(L2Norm::default()),
                ]);
                Some(arch.blocks.len() + 1)
            }
            None => {
                blocks.push(vec![
                    Layer::Pool(GlobalPool::default()),
                    Layer::Flatten(Flatten::default()),
                    Layer::Linear(Linear::new(c, arch.embed_dim, rng)),
                    Layer::L2Norm(L2Norm::default()),
                ]);
                None
            }
        };
        Self::assemble(arch, modality, blocks, mixable, backbone_end)
    }

    fn assemble(
        arch: ArchSpec,
        modality: &str,
        blocks: Vec<Vec<Layer>>,
        mixable: Vec<usize>,
        backbone_end: Option<usize>,
    ) -> Result<Self> {
        let mut block_starts = vec![0];
        let mut layers = Vec::new();
        for b in blocks {
            layers.extend(b);
            block_starts.push(layers.len());
        }
        let mut shape = vec![
            arch.in_channels,
            arch.input_size[0],
            arch.input_size[1],
            arch.input_size[2],
        ];
        let mut boundary_shapes = vec![shape.clone()];
        for w in block_starts.windows(2) {
            for (i, layer) in layers[w[0]..w[1]].iter().enumerate() {
                shape = layer.out_shape(&shape).map_err(|e| {
                    Error::Structural(format!("layer {} ({}): {e}", w[0] + i, layer.kind().name()))
                })?;
            }
            boundary_shapes.push(shape.clone());
        }
        Ok(Self {
            arch,
            modality: modality.to_string(),
            layers,
            block_starts,
            boundary_shapes,
            mixable,
            backbone_end,
            frozen: false,
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn modality(&self) -> &str {
        &self.modality
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Number of blocks; `partial_forward(x, 0, depth())` is the full forward.
    pub fn depth(&self) -> usize {
        self.block_starts.len() - 1
    }

    /// Block boundaries eligible as mixing sites (conv-block outputs; never the input).
    pub fn mixable_layers(&self) -> &[usize] {
        &self.mixable
    }

    /// Boundary after which the projection head starts, if the architecture has one.
    pub fn backbone_end(&self) -> Option<usize> {
        self.backbone_end
    }

    /// Per-sample activation shape at a block boundary.
    pub fn boundary_shape(&self, block: usize) -> Result<&[usize]> {
        self.boundary_shapes
            .get(block)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Parameter(format!("block {block} beyond depth {}", self.depth())))
    }

    pub fn output_dim(&self) -> usize {
        self.arch.embed_dim
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let depth = self.depth();
        self.partial_forward(x, 0, depth)
    }

    /// Applies blocks `from .. to`, caching activations for backward.
    pub fn partial_forward(&mut self, x: &Tensor, from: usize, to: usize) -> Result<Tensor> {
        if from >= to || to > self.depth() {
            return Err(Error::Parameter(format!(
                "invalid block range {from}..{to} for depth {}",
                self.depth()
            )));
        }
        let expected = &self.boundary_shapes[from];
        if x.rank() < 1 || x.shape()[1..] != expected[..] {
            return Err(Error::Structural(format!(
                "{} encoder block {from}: expected (B, {}) input, got {:?}",
                self.modality,
                expected
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(", "),
                x.shape()
            )));
        }
        let (start, end) = (self.block_starts[from], self.block_starts[to]);
        let offset = self.arch.input_offset;
        let mut h = if from == 0 && offset != 0.0 {
            x.map(|v| v - offset)
        } else {
            x.clone()
        };
        for (i, layer) in self.layers[start..end].iter_mut().enumerate() {
            h = layer.forward(&h).map_err(|e| match e {
                Error::Structural(msg) => Error::Structural(format!(
                    "layer {} ({}): {msg}",
                    start + i,
                    layer.kind().name()
                )),
                other => other,
            })?;
        }
        Ok(h)
    }

    /// Backpropagates from the output through blocks `stop .. depth`,
    /// accumulating parameter gradients; returns the gradient at boundary `stop`.
    pub fn backward(&mut self, grad_out: &Tensor, stop: usize) -> Result<Tensor> {
        let depth = self.depth();
        self.backward_range(grad_out, stop, depth)
    }

    /// Backpropagates `grad` (taken at boundary `to`) through blocks `from .. to`.
    pub fn backward_range(&mut self, grad: &Tensor, from: usize, to: usize) -> Result<Tensor> {
        if from >= to || to > self.depth() {
            return Err(Error::Parameter(format!(
                "invalid block range {from}..{to} for depth {}",
                self.depth()
            )));
        }
        let (start, end) = (self.block_starts[from], self.block_starts[to]);
        let mut g = grad.clone();
        for layer in self.layers[start..end].iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn clear_caches(&mut self) {
        self.layers.iter_mut().for_each(Layer::clear_cache);
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    /// Parameters of the blocks before `backbone_end` only.
    pub fn backbone_params_mut(&mut self) -> Result<Vec<&mut Param>> {
        let end = self.head_boundary()?;
        let stop = self.block_starts[end];
        Ok(self.layers[..stop]
            .iter_mut()
            .flat_map(Layer::params_mut)
            .collect())
    }

    pub(crate) fn head_boundary(&self) -> Result<usize> {
        self.backbone_end.ok_or_else(|| {
            Error::Structural(format!(
                "{} encoder has no projection-head boundary to strip",
                self.modality
            ))
        })
    }

    /// `(checkpoint name, parameter)` pairs, named `layer{idx}.{weight|bias}`.
    pub fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (p, name) in layer.params().into_iter().zip(["weight", "bias"]) {
                out.push((format!("layer{i}.{name}"), p));
            }
        }
        out
    }

    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params().into_iter().map(|p| p.value.clone()).collect()
    }

    /// Bitwise comparison of all parameter values against a snapshot.
    pub fn matches_snapshot(&self, snapshot: &[Tensor]) -> bool {
        let params = self.params();
        params.len() == snapshot.len()
            && params
                .iter()
                .zip(snapshot)
                .all(|(p, s)| p.value.bitwise_eq(s))
    }

    /// Sum of squared parameter gradients.
    pub fn grad_sq_norm(&self) -> f64 {
        self.params().iter().map(|p| p.grad.norm().powi(2)).sum()
    }

    /// Exponential moving average toward `query`: `key ← m·key + (1−m)·query`.
    pub fn ema_update(&mut self, query: &EncoderStack, momentum: f64) -> Result<()> {
        let query_params = query.params();
        let mut key_params = self.params_mut();
        ema_update(&mut key_params, &query_params, momentum)
    }

    /// Overwrites this stack's parameters with `other`'s (shapes must agree).
    pub fn copy_params_from(&mut self, other: &EncoderStack) -> Result<()> {
        self.ema_update(other, 0.0)
    }
}

pub fn ema_update(key: &mut [&mut Param], query: &[&Param], momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Parameter(format!(
            "momentum {momentum} outside [0, 1]"
        )));
    }
    if key.len() != query.len() {
        return Err(Error::Structural(format!(
            "ema over {} key params and {} query params",
            key.len(),
            query.len()
        )));
    }
    for (i, (k, q)) in key.iter().zip(query).enumerate() {
        if k.value.shape() != q.value.shape() {
            return Err(Error::Structural(format!(
                "ema param {i}: shapes {:?} and {:?}",
                k.value.shape(),
                q.value.shape()
            )));
        }
    }
    if momentum == 1.0 {
        return Ok(());
    }
    // Written as q + m·(k − q) so that m = 0 copies exactly and k == q is a fixed point.
    for (k, q) in key.iter_mut().zip(query) {
        for (kv, &qv) in k.value.data_mut().iter_mut().zip(q.value.data()) {
            *kv = qv + momentum * (*kv - qv);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_stack(seed: u64) -> EncoderStack {
        EncoderStack::build(
            ArchSpec::video(3, [8, 16, 16]),
            "rgb",
            &mut SeededRng::new(seed),
        )
        .unwrap()
    }

    #[test]
    fn default_shapes() {
        let mut s = default_stack(0);
        assert_eq!(s.depth(), 6);
        assert_eq!(s.mixable_layers(), &[1, 2, 3, 4]);
        assert_eq!(s.backbone_end(), Some(5));
        assert_eq!(s.boundary_shape(2).unwrap(), &[16, 4, 8, 8]);
        assert_eq!(s.boundary_shape(5).unwrap(), &[64]);
        let x = Tensor::randn(&[2, 3, 8, 16, 16], 1.0, &mut SeededRng::new(1));
        assert_eq!(s.forward(&x).unwrap().shape(), &[2, 64]);
        assert_eq!(
            s.partial_forward(&x, 0, 2).unwrap().shape(),
            &[2, 16, 4, 8, 8]
        );
    }

    #[test]
    fn composition_is_bitwise() {
        let mut s = default_stack(2);
        let x = Tensor::randn(&[2, 3, 8, 16, 16], 1.0, &mut SeededRng::new(3));
        let full = s.forward(&x).unwrap();
        for k in 1..s.depth() {
            let h = s.partial_forward(&x, 0, k).unwrap();
            let out = s.partial_forward(&h, k, s.depth()).unwrap();
            assert!(out.bitwise_eq(&full), "k = {k}");
        }
        assert!(s.partial_forward(&x, 0, 6).unwrap().bitwise_eq(&full));
    }

    #[test]
    fn centred_input_gives_zero_pre_normalisation() {
        let mut s = default_stack(4);
        let offset = s.arch.input_offset;
        let x = Tensor::zeros(&[2, 3, 8, 16, 16]).map(|_| offset);
        let h = s.partial_forward(&x, 0, 5).unwrap();
        assert_eq!(h.max_abs(), 0.0);
        // And the l2 head refuses the degenerate row.
        assert!(matches!(s.forward(&x), Err(Error::Degenerate(_))));
    }

    #[test]
    fn structural_errors_name_the_block() {
        let mut s = default_stack(0);
        let err = s.forward(&Tensor::zeros(&[1, 2, 8, 16, 16])).unwrap_err();
        assert!(matches!(err, Error::Structural(ref m) if m.contains("block 0")));
        assert!(matches!(
            s.partial_forward(&Tensor::zeros(&[1, 3, 8, 16, 16]), 2, 2),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            s.partial_forward(&Tensor::zeros(&[1, 3, 8, 16, 16]), 0, 7),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn backward_before_forward_fails() {
        let mut s = default_stack(0);
        assert!(matches!(
            s.backward(&Tensor::zeros(&[1, 64]), 0),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn backward_is_linear_in_upstream_gradient() {
        let mut s = default_stack(5);
        let x = Tensor::randn(&[2, 3, 8, 16, 16], 1.0, &mut SeededRng::new(6));
        let y = s.forward(&x).unwrap();
        let g = Tensor::randn(y.shape(), 1.0, &mut SeededRng::new(7));
        s.zero_grad();
        s.backward(&g, 0).unwrap();
        let once: Vec<Tensor> = s.params().iter().map(|p| p.grad.clone()).collect();
        s.zero_grad();
        s.backward(&g.scale(2.0), 0).unwrap();
        for (a, p) in once.iter().zip(s.params()) {
            for (x, y) in a.data().iter().zip(p.grad.data()) {
                assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn ema_edge_cases() {
        let mut key = default_stack(1);
        let query = default_stack(2);
        let before = key.snapshot();
        key.ema_update(&query, 1.0).unwrap();
        assert!(key.matches_snapshot(&before));
        key.ema_update(&query, 0.0).unwrap();
        assert!(key.matches_snapshot(&query.snapshot()));
        // Fixed point.
        let snap = key.snapshot();
        key.ema_update(&query, 0.37).unwrap();
        assert!(key.matches_snapshot(&snap));
        assert!(key.ema_update(&query, 1.5).is_err());

        let mut k = Param::new(Tensor::zeros(&[3]));
        let q = Param::new(Tensor::full(&[3], 1.0));
        ema_update(&mut [&mut k], &[&q], 0.999).unwrap();
        assert!(k.value.data().iter().all(|v| (v - 0.001).abs() < 1e-15));

        let other = EncoderStack::build(
            ArchSpec::video(2, [8, 16, 16]),
            "flow",
            &mut SeededRng::new(0),
        )
        .unwrap();
        assert!(matches!(
            key.ema_update(&other, 0.5),
            Err(Error::Structural(_))
        ));
    }

    #[test]
    fn headless_arch_cannot_strip_head() {
        let mut arch = ArchSpec::video(3, [8, 16, 16]);
        arch.head_hidden = None;
        let mut s = EncoderStack::build(arch, "rgb", &mut SeededRng::new(0)).unwrap();
        assert_eq!(s.backbone_end(), None);
        assert!(matches!(s.backbone_params_mut(), Err(Error::Structural(_))));
    }
}
