//! Contrastive objectives over a momentum key encoder and a FIFO queue of
//! negatives.

use std::collections::VecDeque;

use crate::encoder::EncoderStack;
use crate::error::{Error, Result};
use crate::mixing::check_permutation;
use crate::tensor::{argmax_rows, cross_entropy_rows, dot, gemm, softmax_rows, Tensor};

pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_MOMENTUM: f64 = 0.999;
pub const DEFAULT_QUEUE_CAPACITY: usize = 2048;

const UNIT_TOL: f64 = 1e-6;

/// Fixed-capacity FIFO of unit-norm key embeddings.
#[derive(Debug, Clone)]
pub struct MoCoQueue {
    capacity: usize,
    dim: Option<usize>,
    entries: VecDeque<Vec<f64>>,
}

impl MoCoQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            dim: None,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.dim = None;
    }

    /// Appends the rows of `keys`, evicting the oldest entries beyond capacity.
    pub fn enqueue(&mut self, keys: &Tensor) -> Result<()> {
        let (b, d) = keys.dims2()?;
        if let Some(existing) = self.dim {
            if existing != d {
                return Err(Error::Structural(format!(
                    "queue holds {existing}-d keys, got {d}-d"
                )));
            }
        }
        check_unit_rows(keys, "queue keys")?;
        self.dim = Some(d);
        for i in 0..b {
            if self.capacity == 0 {
                break;
            }
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(keys.row(i).to_vec());
        }
        Ok(())
    }

    /// Entries oldest-first as a `(len, D)` tensor, or `None` when empty.
    pub fn to_tensor(&self) -> Option<Tensor> {
        let d = self.dim?;
        if self.entries.is_empty() {
            return None;
        }
        let data: Vec<f64> = self.entries.iter().flatten().copied().collect();
        Tensor::new(vec![self.entries.len(), d], data).ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.iter().map(Vec::as_slice)
    }
}

/// Momentum key encoder plus its negative queue.
#[derive(Debug, Clone)]
pub struct MoCoState {
    pub key: EncoderStack,
    pub queue: MoCoQueue,
    pub momentum: f64,
}

impl MoCoState {
    /// Key encoder initialised as an exact copy of `query`.
    pub fn new(query: &EncoderStack, capacity: usize, momentum: f64) -> Self {
        let mut key = query.clone();
        key.zero_grad();
        key.clear_caches();
        key.set_frozen(false);
        Self {
            key,
            queue: MoCoQueue::new(capacity),
            momentum,
        }
    }

    pub fn with_key(key: EncoderStack, capacity: usize, momentum: f64) -> Self {
        Self {
            key,
            queue: MoCoQueue::new(capacity),
            momentum,
        }
    }

    pub fn momentum_update(&mut self, query: &EncoderStack) -> Result<()> {
        self.key.ema_update(query, self.momentum)
    }
}

#[derive(Debug, Clone)]
pub struct ContrastiveBatchResult {
    pub loss: f64,
    pub logits: Tensor,
    /// Fraction of rows whose largest logit sits at the positive column.
    pub pretext_accuracy: f64,
    /// Gradient of `loss` w.r.t. the query embeddings; keys and queue are detached.
    pub grad_query: Tensor,
}

fn check_unit_rows(x: &Tensor, what: &str) -> Result<()> {
    let (b, _) = x.dims2()?;
    for i in 0..b {
        let n = dot(x.row(i), x.row(i)).sqrt();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::Degenerate(format!(
                "{what}: row {i} has norm {n}, expected unit norm"
            )));
        }
    }
    Ok(())
}

fn check_inputs(z: &Tensor, z_key: &Tensor, queue: &MoCoQueue, tau: f64) -> Result<(usize, usize)> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let (b, d) = z.dims2()?;
    if z_key.shape() != z.shape() {
        return Err(Error::Structural(format!(
            "query {:?} and key {:?} shapes differ",
            z.shape(),
            z_key.shape()
        )));
    }
    if let Some(qd) = queue.dim() {
        if qd != d && !queue.is_empty() {
            return Err(Error::Structural(format!(
                "queue dim {qd} vs embedding dim {d}"
            )));
        }
    }
    check_unit_rows(z, "query")?;
    check_unit_rows(z_key, "key")?;
    Ok((b, d))
}

/// `(B, D) x (N, D)^T / tau`.
fn similarity(z: &Tensor, keys: &[f64], n: usize, tau: f64) -> Vec<f64> {
    let (b, d) = (z.rows(), z.row_len());
    let mut out = vec![0.0; b * n];
    if n > 0 {
        gemm(
            b,
            d,
            n,
            1.0 / tau,
            z.data(),
            false,
            keys,
            true,
            0.0,
            &mut out,
        );
    }
    out
}

/// InfoNCE: row `i` scores its own key (column 0) against every queue entry.
pub fn info_nce(
    z: &Tensor,
    z_key: &Tensor,
    queue: &MoCoQueue,
    tau: f64,
) -> Result<ContrastiveBatchResult> {
    let (b, d) = check_inputs(z, z_key, queue, tau)?;
    let q = queue.to_tensor();
    let nq = queue.len();
    let q_data: &[f64] = q.as_ref().map_or(&[], |t| t.data());
    let neg = similarity(z, q_data, nq, tau);
    let cols = nq + 1;
    let mut logits = vec![0.0; b * cols];
    for i in 0..b {
        logits[i * cols] = dot(z.row(i), z_key.row(i)) / tau;
        logits[i * cols + 1..(i + 1) * cols].copy_from_slice(&neg[i * nq..(i + 1) * nq]);
    }
    let logits = Tensor::new(vec![b, cols], logits)?;
    let targets = vec![0; b];
    let per_row = cross_entropy_rows(&logits, &targets)?;
    let loss = per_row.iter().sum::<f64>() / b as f64;
    let mut dlogits = softmax_rows(&logits)?;
    for i in 0..b {
        dlogits.row_mut(i)[0] -= 1.0;
    }
    let scale = 1.0 / (b as f64 * tau);
    let mut grad = vec![0.0; b * d];
    if nq > 0 {
        let neg_grad: Vec<f64> = (0..b).flat_map(|i| dlogits.row(i)[1..].to_vec()).collect();
        gemm(
            b, nq, d, scale, &neg_grad, false, q_data, false, 0.0, &mut grad,
        );
    }
    for i in 0..b {
        let w = dlogits.row(i)[0] * scale;
        for (g, &k) in grad[i * d..(i + 1) * d].iter_mut().zip(z_key.row(i)) {
            *g += w * k;
        }
    }
    let hits = argmax_rows(&logits)?.iter().filter(|&&j| j == 0).count();
    Ok(ContrastiveBatchResult {
        loss,
        logits,
        pretext_accuracy: hits as f64 / b as f64,
        grad_query: Tensor::new(vec![b, d], grad)?,
    })
}

/// i-mix loss over columns `[batch keys | queue]`:
/// `mean_i λ_i·CE(row i → i) + (1 − λ_i)·CE(row i → partner[i])`.
///
/// `lambdas` holds either one batch-wide value or one per row.
pub fn imix_loss(
    z_mix: &Tensor,
    z_key: &Tensor,
    queue: &MoCoQueue,
    tau: f64,
    partner: &[usize],
    lambdas: &[f64],
) -> Result<ContrastiveBatchResult> {
    let (b, d) = check_inputs(z_mix, z_key, queue, tau)?;
    check_permutation(partner, b)?;
    let lambda_of = |i: usize| -> f64 {
        if lambdas.len() == 1 {
            lambdas[0]
        } else {
            lambdas[i]
        }
    };
    if lambdas.len() != 1 && lambdas.len() != b {
        return Err(Error::Structural(format!(
            "{} lambdas for batch {b}",
            lambdas.len()
        )));
    }
    if let Some(l) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::Parameter(format!("lambda {l} outside [0, 1]")));
    }
    let nq = queue.len();
    let cols = b + nq;
    let mut keys = Vec::with_capacity(cols * d);
    keys.extend_from_slice(z_key.data());
    for q in queue.iter() {
        keys.extend_from_slice(q);
    }
    let logits = Tensor::new(vec![b, cols], similarity(z_mix, &keys, cols, tau))?;
    let own: Vec<usize> = (0..b).collect();
    let ce_own = cross_entropy_rows(&logits, &own)?;
    let ce_partner = cross_entropy_rows(&logits, partner)?;
    let loss = (0..b)
        .map(|i| {
            let l = lambda_of(i);
            l * ce_own[i] + (1.0 - l) * ce_partner[i]
        })
        .sum::<f64>()
        / b as f64;
    let mut dlogits = softmax_rows(&logits)?;
    for i in 0..b {
        let l = lambda_of(i);
        let row = dlogits.row_mut(i);
        row[i] -= l;
        row[partner[i]] -= 1.0 - l;
    }
    let mut grad = vec![0.0; b * d];
    gemm(
        b,
        cols,
        d,
        1.0 / (b as f64 * tau),
        dlogits.data(),
        false,
        &keys,
        false,
        0.0,
        &mut grad,
    );
    let hits = argmax_rows(&logits)?
        .iter()
        .enumerate()
        .filter(|(i, &j)| *i == j)
        .count();
    Ok(ContrastiveBatchResult {
        loss,
        logits,
        pretext_accuracy: hits as f64 / b as f64,
        grad_query: Tensor::new(vec![b, d], grad)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::tensor::l2_normalize;

    fn unit(b: usize, d: usize, seed: u64) -> Tensor {
        l2_normalize(&Tensor::randn(&[b, d], 1.0, &mut SeededRng::new(seed))).unwrap()
    }

    fn queue_of(n: usize, d: usize, seed: u64, capacity: usize) -> MoCoQueue {
        let mut q = MoCoQueue::new(capacity);
        q.enqueue(&unit(n, d, seed)).unwrap();
        q
    }

    /// Central differences of `f` w.r.t. `z`, renormalisation not applied.
    fn fd_grad(z: &Tensor, f: impl Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-5;
        let mut g = Tensor::zeros(z.shape());
        for i in 0..z.len() {
            let mut p = z.clone();
            p.data_mut()[i] += h;
            let mut m = z.clone();
            m.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        g
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        a.sub(b).unwrap().norm() / a.norm().max(b.norm()).max(1e-12)
    }

    /// Same loss without the unit-norm precondition so finite differences can leave the sphere.
    fn raw_info_nce(z: &Tensor, zk: &Tensor, q: &MoCoQueue, tau: f64) -> f64 {
        let (b, _) = z.dims2().unwrap();
        let mut total = 0.0;
        for i in 0..b {
            let mut logits = vec![dot(z.row(i), zk.row(i)) / tau];
            logits.extend(q.iter().map(|k| dot(z.row(i), k) / tau));
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - logits[0];
        }
        total / b as f64
    }

    fn raw_imix(
        z: &Tensor,
        zk: &Tensor,
        q: &MoCoQueue,
        tau: f64,
        partner: &[usize],
        lam: f64,
    ) -> f64 {
        let (b, _) = z.dims2().unwrap();
        let mut total = 0.0;
        for i in 0..b {
            let mut logits: Vec<f64> = (0..b).map(|j| dot(z.row(i), zk.row(j)) / tau).collect();
            logits.extend(q.iter().map(|k| dot(z.row(i), k) / tau));
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lam * (lse - logits[i]) + (1.0 - lam) * (lse - logits[partner[i]]);
        }
        total / b as f64
    }

    #[test]
    fn identical_pair_empty_queue() {
        let z = unit(4, 8, 1);
        let r = info_nce(&z, &z, &MoCoQueue::new(16), 0.07).unwrap();
        assert_eq!(r.loss, 0.0);
        assert_eq!(r.pretext_accuracy, 1.0);
    }

    #[test]
    fn large_temperature_approaches_uniform() {
        let z = unit(3, 32, 2);
        let zk = unit(3, 32, 3);
        let q = queue_of(2047, 32, 4, 2048);
        let r = info_nce(&z, &zk, &q, 1e9).unwrap();
        assert!((r.loss - 2048f64.ln()).abs() < 1e-6);
        assert!((r.loss - 7.6246).abs() < 1e-4);
    }

    #[test]
    fn info_nce_gradient() {
        let z = unit(3, 5, 5);
        let zk = unit(3, 5, 6);
        let q = queue_of(8, 5, 7, 8);
        let tau = 0.2;
        let r = info_nce(&z, &zk, &q, tau).unwrap();
        let fd = fd_grad(&z, |p| raw_info_nce(p, &zk, &q, tau));
        assert!(rel_err(&r.grad_query, &fd) < 1e-4);
        assert!((r.loss - raw_info_nce(&z, &zk, &q, tau)).abs() < 1e-12);
    }

    #[test]
    fn imix_gradient() {
        let z = unit(4, 6, 8);
        let zk = unit(4, 6, 9);
        let q = queue_of(5, 6, 10, 16);
        let partner = [2, 0, 3, 1];
        let r = imix_loss(&z, &zk, &q, 0.1, &partner, &[0.3]).unwrap();
        let fd = fd_grad(&z, |p| raw_imix(p, &zk, &q, 0.1, &partner, 0.3));
        assert!(rel_err(&r.grad_query, &fd) < 1e-4);
    }

    #[test]
    fn imix_endpoints() {
        let z = unit(3, 4, 11);
        let zk = unit(3, 4, 12);
        let q = queue_of(4, 4, 13, 8);
        let partner = [1, 2, 0];
        let one = imix_loss(&z, &zk, &q, 0.07, &partner, &[1.0]).unwrap();
        let plain = imix_loss(&z, &zk, &q, 0.07, &[0, 1, 2], &[1.0]).unwrap();
        assert_eq!(one.loss.to_bits(), plain.loss.to_bits());
        assert!(one.grad_query.bitwise_eq(&plain.grad_query));

        let zero = imix_loss(&z, &zk, &q, 0.07, &partner, &[0.0]).unwrap();
        let ce = cross_entropy_rows(&zero.logits, &partner).unwrap();
        assert!((zero.loss - ce.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    }

    #[test]
    fn imix_hand_computed_half() {
        // Two 2-D embeddings, partner swaps them, tau = 1.
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let z = Tensor::new(vec![2, 2], vec![1.0, 0.0, s, s]).unwrap();
        let zk = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let r = imix_loss(&z, &zk, &MoCoQueue::new(4), 1.0, &[1, 0], &[0.5]).unwrap();
        // Row 0 logits [0, 1]; row 1 logits [s, s].
        let lse0 = (1.0f64 + 1.0f64.exp()).ln();
        let ce_id = [lse0 - 0.0, 2f64.ln()];
        let ce_perm = [lse0 - 1.0, 2f64.ln()];
        let expected = 0.5 * ((ce_id[0] + ce_id[1]) / 2.0 + (ce_perm[0] + ce_perm[1]) / 2.0);
        assert!((r.loss - expected).abs() < 1e-12);
    }

    #[test]
    fn imix_matches_info_nce_on_shared_columns() {
        let z = unit(1, 8, 14);
        let zk = unit(1, 8, 15);
        let q = queue_of(10, 8, 16, 32);
        let a = info_nce(&z, &zk, &q, 0.07).unwrap();
        let b = imix_loss(&z, &zk, &q, 0.07, &[0], &[1.0]).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
        assert!(rel_err(&a.grad_query, &b.grad_query) < 1e-12);
    }

    #[test]
    fn accuracy_is_temperature_invariant() {
        let z = unit(6, 8, 17);
        let zk = unit(6, 8, 18);
        let q = queue_of(12, 8, 19, 32);
        let a = info_nce(&z, &zk, &q, 0.07).unwrap();
        let b = info_nce(&z, &zk, &q, 0.7).unwrap();
        assert_ne!(a.loss, b.loss);
        assert_eq!(a.pretext_accuracy, b.pretext_accuracy);
    }

    #[test]
    fn gradient_step_pulls_positives_together() {
        let z = unit(5, 16, 20);
        let zk = unit(5, 16, 21);
        let q = queue_of(30, 16, 22, 64);
        let r = info_nce(&z, &zk, &q, 0.07).unwrap();
        let stepped = l2_normalize(&z.sub(&r.grad_query.scale(1e-3)).unwrap()).unwrap();
        for i in 0..5 {
            assert!(dot(stepped.row(i), zk.row(i)) > dot(z.row(i), zk.row(i)));
        }
    }

    #[test]
    fn input_validation() {
        let z = unit(2, 4, 23);
        let q = MoCoQueue::new(4);
        assert!(matches!(
            info_nce(&z, &z, &q, 0.0),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            info_nce(&z.scale(2.0), &z, &q, 0.1),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            imix_loss(&z, &z, &q, 0.1, &[0, 0], &[1.0]),
            Err(Error::Structural(_))
        ));
    }

    #[test]
    fn queue_fifo_and_norms() {
        let mut q = MoCoQueue::new(4);
        let keys = unit(6, 3, 24);
        q.enqueue(&keys).unwrap();
        assert_eq!(q.len(), 4);
        let stored = q.to_tensor().unwrap();
        assert!(stored.bitwise_eq(&keys.select_rows(&[2, 3, 4, 5]).unwrap()));

        let mut q = MoCoQueue::new(10);
        q.enqueue(&unit(3, 3, 25)).unwrap();
        assert_eq!(q.len(), 3);
        for s in 0..20 {
            q.enqueue(&unit(4, 3, 100 + s)).unwrap();
            assert!(q.len() <= 10);
        }
        for row in q.iter() {
            assert!((dot(row, row).sqrt() - 1.0).abs() < 1e-9);
        }
        assert!(matches!(
            q.enqueue(&unit(1, 5, 26)),
            Err(Error::Structural(_))
        ));
    }
}
