//! Downstream evaluation of pretrained encoders: frozen-feature linear
//! probe, full fine-tuning and nearest-neighbour retrieval.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderStack, Linear, Optimizer, OptimizerKind, Param};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::{argmax_rows, dot, l2_normalize, softmax_cross_entropy, Tensor};

pub const RECALL_KS: [usize; 4] = [1, 5, 10, 20];
const EXTRACT_BATCH: usize = 32;

#[derive(Debug, Clone)]
pub struct FeatureTable {
    /// `(N, D)`.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub clip_ids: Vec<usize>,
}

impl FeatureTable {
    pub fn new(features: Tensor, labels: Vec<usize>, clip_ids: Vec<usize>) -> Result<Self> {
        let (n, _) = features.dims2()?;
        if labels.len() != n || clip_ids.len() != n {
            return Err(Error::Structural(format!(
                "{n} feature rows with {} labels and {} clip ids",
                labels.len(),
                clip_ids.len()
            )));
        }
        Ok(Self {
            features,
            labels,
            clip_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.row_len()
    }
}

fn backbone_forward(enc: &mut EncoderStack, x: &Tensor) -> Result<Tensor> {
    let end = enc.head_boundary()?;
    enc.partial_forward(x, 0, end)
}

/// Backbone output (projection head stripped) for each full-frame clip.
pub fn extract_features(
    enc: &EncoderStack,
    clips: &[Tensor],
    labels: &[usize],
    clip_ids: &[usize],
) -> Result<FeatureTable> {
    let mut enc = enc.clone();
    enc.head_boundary()?;
    if clips.is_empty() {
        return Err(Error::Degenerate("no clips to embed".into()));
    }
    let mut rows = Vec::new();
    for chunk in clips.chunks(EXTRACT_BATCH) {
        let h = backbone_forward(&mut enc, &Tensor::stack(chunk)?)?;
        rows.extend_from_slice(h.data());
    }
    let d = rows.len() / clips.len();
    FeatureTable::new(
        Tensor::new(vec![clips.len(), d], rows)?,
        labels.to_vec(),
        clip_ids.to_vec(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 0.1,
            momentum: 0.9,
            batch_size: 32,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    /// Head learning rate; the backbone uses a tenth of it.
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Global L2 bound on the backbone gradient of each step.
    pub max_grad_norm: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 16,
            max_grad_norm: 1.0,
            seed: 0,
        }
    }
}

/// Per-dimension affine map fitted on training features.
#[derive(Debug, Clone)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Tensor) -> Result<Self> {
        let (n, d) = x.dims2()?;
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v / n as f64;
            }
        }
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m).powi(2) / n as f64;
            }
        }
        let inv_std = var
            .into_iter()
            .map(|v| if v > 1e-16 { 1.0 / v.sqrt() } else { 1.0 })
            .collect();
        Ok(Self { mean, inv_std })
    }

    /// Per-dimension centring with one shared scale (the mean variance).
    pub fn fit_isotropic(x: &Tensor) -> Result<Self> {
        let per_dim = Self::fit(x)?;
        let (n, d) = x.dims2()?;
        let mut var = 0.0;
        for i in 0..n {
            for (v, m) in x.row(i).iter().zip(&per_dim.mean) {
                var += (v - m).powi(2);
            }
        }
        var /= (n * d) as f64;
        let s = if var > 1e-16 { 1.0 / var.sqrt() } else { 1.0 };
        Ok(Self {
            inv_std: vec![s; d],
            mean: per_dim.mean,
        })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (n, d) = x.dims2()?;
        if d != self.mean.len() {
            return Err(Error::Structural(format!(
                "{d}-d features for a {}-d standardizer",
                self.mean.len()
            )));
        }
        let mut out = x.clone();
        for i in 0..n {
            for ((v, m), s) in out.row_mut(i).iter_mut().zip(&self.mean).zip(&self.inv_std) {
                *v = (*v - m) * s;
            }
        }
        Ok(out)
    }

    /// Chain rule through `apply`.
    pub fn backward(&self, grad: &Tensor) -> Result<Tensor> {
        let (n, _) = grad.dims2()?;
        let mut out = grad.clone();
        for i in 0..n {
            for (g, s) in out.row_mut(i).iter_mut().zip(&self.inv_std) {
                *g *= s;
            }
        }
        Ok(out)
    }
}

fn num_classes(train: &[usize], test: &[usize]) -> Result<usize> {
    let first = *train
        .first()
        .ok_or_else(|| Error::Degenerate("empty training set".into()))?;
    if train.iter().all(|&l| l == first) {
        return Err(Error::Degenerate(format!(
            "training labels contain a single class ({first})"
        )));
    }
    Ok(train.iter().chain(test).max().map_or(0, |m| m + 1))
}

fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let pred = argmax_rows(logits)?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

fn head_rng(seed: u64) -> SeededRng {
    SeededRng::new(derive_seed(&[seed, 0x4ead]))
}

fn head_params(head: &mut Linear) -> [&mut Param; 2] {
    [&mut head.weight, &mut head.bias]
}

fn clip_grad_norm(params: &mut [&mut Param], max: f64) {
    let norm = params
        .iter()
        .map(|p| p.grad.norm().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max {
        for p in params.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= max / norm);
        }
    }
}

fn zero(params: &mut [&mut Param]) {
    for p in params.iter_mut() {
        p.grad.fill(0.0);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub train_accuracy: f64,
}

/// Trains a softmax classifier on standardized frozen features.
pub fn linear_probe(
    train: &FeatureTable,
    test: &FeatureTable,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if train.dim() != test.dim() {
        return Err(Error::Structural(format!(
            "train features are {}-d, test features {}-d",
            train.dim(),
            test.dim()
        )));
    }
    let classes = num_classes(&train.labels, &test.labels)?;
    let scaler = Standardizer::fit(&train.features)?;
    let xtr = scaler.apply(&train.features)?;
    let xte = scaler.apply(&test.features)?;
    let mut rng = head_rng(cfg.seed);
    let mut head = Linear::new(train.dim(), classes, &mut rng);
    let mut opt = Optimizer::new(
        OptimizerKind::sgd(cfg.momentum),
        cfg.learning_rate,
        cfg.weight_decay,
    );
    let n = train.len();
    for _ in 0..cfg.epochs {
        let order = rng.permutation(n);
        for idx in order.chunks(cfg.batch_size.max(1)) {
            let xb = xtr.select_rows(idx)?;
            let yb: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let logits = head.forward(&xb)?;
            let (_, g) = softmax_cross_entropy(&logits, &yb)?;
            head.backward(&g)?;
            let mut params = head_params(&mut head);
            opt.step(&mut params)?;
            zero(&mut params);
        }
    }
    Ok(ProbeResult {
        accuracy: accuracy(&head.apply(&xte)?, &test.labels)?,
        train_accuracy: accuracy(&head.apply(&xtr)?, &train.labels)?,
    })
}

/// Labelled clips for fine-tuning.
#[derive(Debug, Clone, Copy)]
pub struct LabeledClips<'a> {
    pub clips: &'a [Tensor],
    pub labels: &'a [usize],
}

#[derive(Debug, Clone)]
pub struct FinetuneResult {
    pub accuracy: f64,
    pub encoder: EncoderStack,
}

fn batched_logits(
    enc: &mut EncoderStack,
    head: &Linear,
    scaler: &Standardizer,
    clips: &[Tensor],
) -> Result<Tensor> {
    let mut rows = Vec::new();
    for chunk in clips.chunks(EXTRACT_BATCH) {
        let h = backbone_forward(enc, &Tensor::stack(chunk)?)?;
        rows.extend_from_slice(head.apply(&scaler.apply(&h)?)?.data());
    }
    let c = head.out_features();
    Tensor::new(vec![clips.len(), c], rows)
}

/// Trains backbone and a fresh linear head jointly. Features are
/// standardized with statistics of the initial encoder, held fixed.
pub fn finetune(
    encoder: &EncoderStack,
    train: LabeledClips<'_>,
    test: LabeledClips<'_>,
    cfg: &FinetuneConfig,
) -> Result<FinetuneResult> {
    let classes = num_classes(train.labels, test.labels)?;
    let mut enc = encoder.clone();
    enc.set_frozen(false);
    let ids: Vec<usize> = (0..train.clips.len()).collect();
    let init = extract_features(&enc, train.clips, train.labels, &ids)?;
    let scaler = Standardizer::fit_isotropic(&init.features)?;
    let mut rng = head_rng(cfg.seed);
    let mut head = Linear::new(init.dim(), classes, &mut rng);
    let mut head_opt = Optimizer::new(OptimizerKind::sgd(cfg.momentum), cfg.learning_rate, 0.0);
    let mut body_opt = Optimizer::new(
        OptimizerKind::sgd(cfg.momentum),
        cfg.learning_rate / 10.0,
        0.0,
    );
    let end = enc.head_boundary()?;
    for _ in 0..cfg.epochs {
        let order = rng.permutation(train.clips.len());
        for idx in order.chunks(cfg.batch_size.max(1)) {
            let xb = Tensor::stack(
                &idx.iter()
                    .map(|&i| train.clips[i].clone())
                    .collect::<Vec<_>>(),
            )?;
            let yb: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            enc.zero_grad();
            let h = enc.partial_forward(&xb, 0, end)?;
            let logits = head.forward(&scaler.apply(&h)?)?;
            let (_, g) = softmax_cross_entropy(&logits, &yb)?;
            let gh = scaler.backward(&head.backward(&g)?)?;
            enc.backward_range(&gh, 0, end)?;
            let mut hp = head_params(&mut head);
            head_opt.step(&mut hp)?;
            zero(&mut hp);
            let mut body = enc.backbone_params_mut()?;
            clip_grad_norm(&mut body, cfg.max_grad_norm);
            body_opt.step(&mut body)?;
        }
        enc.clear_caches();
    }
    enc.zero_grad();
    let logits = batched_logits(&mut enc, &head, &scaler, test.clips)?;
    enc.clear_caches();
    Ok(FinetuneResult {
        accuracy: accuracy(&logits, test.labels)?,
        encoder: enc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// `(k, R@k)` in increasing `k`.
    pub recall: Vec<(usize, f64)>,
}

impl RetrievalReport {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|(kk, _)| *kk == k).map(|(_, r)| *r)
    }

    pub fn is_monotone(&self) -> bool {
        self.recall.windows(2).all(|w| w[0].1 <= w[1].1)
            && self.recall.iter().all(|(_, r)| (0.0..=1.0).contains(r))
    }

    pub fn to_map(&self) -> BTreeMap<String, f64> {
        self.recall
            .iter()
            .map(|(k, r)| (format!("R@{k}"), *r))
            .collect()
    }
}

/// Similarities closer than this are ties; keeps rounding noise from
/// overriding the clip-id tie break.
pub const SIMILARITY_RESOLUTION: f64 = 1e-9;

/// Gallery indices ordered by decreasing cosine similarity to `q`; ties go to the lower clip id.
fn ranking(gallery: &Tensor, gallery_ids: &[usize], q: &[f64]) -> Vec<usize> {
    let keys: Vec<i64> = (0..gallery.rows())
        .map(|j| (dot(gallery.row(j), q) / SIMILARITY_RESOLUTION).round() as i64)
        .collect();
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| {
        keys[b]
            .cmp(&keys[a])
            .then(gallery_ids[a].cmp(&gallery_ids[b]))
    });
    order
}

/// Recall@k: share of queries with a same-class gallery item among the `k` nearest.
pub fn knn_retrieval(
    gallery: &FeatureTable,
    queries: &FeatureTable,
    ks: &[usize],
) -> Result<RetrievalReport> {
    if gallery.is_empty() || queries.is_empty() {
        return Err(Error::Degenerate(
            "retrieval needs a nonempty gallery and query set".into(),
        ));
    }
    if gallery.dim() != queries.dim() {
        return Err(Error::Structural(format!(
            "gallery features are {}-d, queries {}-d",
            gallery.dim(),
            queries.dim()
        )));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > gallery.len()) {
        return Err(Error::Parameter(format!(
            "k = {k} outside 1..={} (gallery size)",
            gallery.len()
        )));
    }
    let g = l2_normalize(&gallery.features)?;
    let q = l2_normalize(&queries.features)?;
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let mut hits = vec![0usize; ks.len()];
    for i in 0..queries.len() {
        let order = ranking(&g, &gallery.clip_ids, q.row(i));
        let first = order
            .iter()
            .position(|&j| gallery.labels[j] == queries.labels[i]);
        if let Some(rank) = first {
            for (h, &k) in hits.iter_mut().zip(&ks) {
                if rank < k {
                    *h += 1;
                }
            }
        }
    }
    let n = queries.len() as f64;
    Ok(RetrievalReport {
        recall: ks
            .into_iter()
            .zip(hits)
            .map(|(k, h)| (k, h as f64 / n))
            .collect(),
    })
}

/// Standard R@{1, 5, 10, 20}, dropping any k larger than the gallery.
pub fn standard_retrieval(
    gallery: &FeatureTable,
    queries: &FeatureTable,
) -> Result<RetrievalReport> {
    let ks: Vec<usize> = RECALL_KS
        .iter()
        .copied()
        .filter(|&k| k <= gallery.len())
        .collect();
    knn_retrieval(gallery, queries, &ks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub linear_probe: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finetune: Option<f64>,
    pub retrieval: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn new(linear_probe: f64, finetune: Option<f64>, retrieval: &RetrievalReport) -> Self {
        Self {
            linear_probe,
            finetune,
            retrieval: retrieval.to_map(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
