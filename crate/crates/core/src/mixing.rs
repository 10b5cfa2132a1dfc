//! Data-mixing operators.
//!
//! Input space (on `(B, C, T, H, W)` clips): mixup, temporal cutmix,
//! spatio-temporal cutmix and VideoMix. Feature space: cross-modal manifold
//! cutmix ([`cmmc_mix`]), which pastes a patch of one modality's hidden
//! activation into a 4-D box of the other's.
//!
//! Every operator pairs sample `i` with sample `partner[i]` of a random
//! permutation and reports `lambda`, the fraction of the primary operand that
//! survives. Mixed labels are `lambda * y_i + (1 - lambda) * y_partner[i]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{beta_sample, SeededRng};
use crate::tensor::Tensor;

/// Where a mixing coefficient comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaSource {
    Beta(f64),
    /// Forces the draw; used by paired-run checks.
    Fixed(f64),
}

impl LambdaSource {
    pub fn draw(self, rng: &mut SeededRng) -> Result<f64> {
        match self {
            LambdaSource::Beta(alpha) => beta_sample(alpha, rng),
            LambdaSource::Fixed(l) if (0.0..=1.0).contains(&l) => Ok(l),
            LambdaSource::Fixed(l) => Err(Error::Parameter(format!("lambda {l} outside [0, 1]"))),
        }
    }
}

/// Axis-aligned box inside a `(C, T, H, W)` sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskBox {
    pub start: [usize; 4],
    pub extent: [usize; 4],
}

impl MaskBox {
    pub fn volume(&self) -> usize {
        self.extent.iter().product()
    }

    pub fn contains(&self, idx: [usize; 4]) -> bool {
        (0..4).all(|d| idx[d] >= self.start[d] && idx[d] < self.start[d] + self.extent[d])
    }
}

/// Geometry of the replaced region of the primary operand.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    /// Requested extents before clipping, per (C, T, H, W).
    pub requested: [usize; 4],
    /// Sampled centre per (C, T, H, W).
    pub center: [usize; 4],
    /// The clipped box actually replaced.
    pub region: MaskBox,
    pub total_volume: usize,
    pub zero_volume: usize,
}

#[derive(Debug, Clone)]
pub struct MixOutcome {
    pub mixed: Tensor,
    /// Batch-level retained fraction (the mean of `sample_lambdas`).
    pub lambda: f64,
    /// Per-sample retained fraction; all equal for the cutmix family.
    pub sample_lambdas: Vec<f64>,
    pub partner: Vec<usize>,
    pub mask: Option<MaskSpec>,
}

impl MixOutcome {
    pub fn identity(x: &Tensor) -> Self {
        let b = x.rows();
        Self {
            mixed: x.clone(),
            lambda: 1.0,
            sample_lambdas: vec![1.0; b],
            partner: (0..b).collect(),
            mask: None,
        }
    }

    pub fn mask_box(&self) -> Option<MaskBox> {
        self.mask.as_ref().map(|m| m.region)
    }

    /// Gradient w.r.t. the primary operand given the gradient w.r.t.
    /// `mixed`, for box-replacement mixes: the replaced box carries partner
    /// values and receives none.
    pub fn primary_grad(&self, grad_mixed: &Tensor) -> Result<Tensor> {
        if grad_mixed.shape() != self.mixed.shape() {
            return Err(Error::Structural(format!(
                "gradient shape {:?} vs mixed {:?}",
                grad_mixed.shape(),
                self.mixed.shape()
            )));
        }
        let mut g = grad_mixed.clone();
        if let Some(spec) = &self.mask {
            if spec.zero_volume > 0 {
                let region = spec.region;
                let zeros = Tensor::zeros(&[
                    1,
                    region.extent[0],
                    region.extent[1],
                    region.extent[2],
                    region.extent[3],
                ]);
                for i in 0..g.rows() {
                    let s = region.start;
                    g.copy_region(
                        &[i, s[0], s[1], s[2], s[3]],
                        &zeros,
                        &[0; 5],
                        &[
                            1,
                            region.extent[0],
                            region.extent[1],
                            region.extent[2],
                            region.extent[3],
                        ],
                    )?;
                }
            }
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Operator {
    None,
    Mixup,
    TemporalCutmix,
    StCutmix,
    VideoMix,
}

impl Operator {
    pub const ALL: [Operator; 5] = [
        Operator::None,
        Operator::Mixup,
        Operator::TemporalCutmix,
        Operator::StCutmix,
        Operator::VideoMix,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Operator::None => "none",
            Operator::Mixup => "mixup",
            Operator::TemporalCutmix => "t_cutmix",
            Operator::StCutmix => "st_cutmix",
            Operator::VideoMix => "videomix",
        }
    }

    pub fn apply(
        self,
        x: &Tensor,
        lambda: LambdaSource,
        rng: &mut SeededRng,
    ) -> Result<MixOutcome> {
        match self {
            Operator::None => Ok(MixOutcome::identity(x)),
            Operator::Mixup => mixup_batch_with(x, lambda, rng),
            Operator::TemporalCutmix => temporal_cutmix_with(x, lambda, rng),
            Operator::StCutmix => st_cutmix_with(x, lambda, rng),
            Operator::VideoMix => videomix_with(x, lambda, rng),
        }
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl TryFrom<String> for Operator {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Operator> for String {
    fn from(op: Operator) -> Self {
        op.name().to_string()
    }
}

impl FromStr for Operator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "nomix" | "moco" => Ok(Operator::None),
            "mixup" => Ok(Operator::Mixup),
            "t_cutmix" | "tcutmix" | "temporal_cutmix" => Ok(Operator::TemporalCutmix),
            "st_cutmix" | "stcutmix" => Ok(Operator::StCutmix),
            "videomix" => Ok(Operator::VideoMix),
            other => Err(Error::Config(format!("unknown mixing operator '{other}'"))),
        }
    }
}

fn check_batch(x: &Tensor) -> Result<[usize; 5]> {
    let dims = x.dims5()?;
    if dims[0] < 2 {
        return Err(Error::Parameter(format!(
            "mixing needs a batch of at least 2, got {}",
            dims[0]
        )));
    }
    Ok(dims)
}

/// Rounds half away from zero and clamps into `[0, extent]`.
fn round_extent(v: f64, extent: usize) -> usize {
    (v.round().max(0.0) as usize).min(extent)
}

/// Interval of length `len` centred on `center`, clipped to `[0, extent)`.
/// Returns `(start, clipped_len)`.
fn clip_interval(center: usize, len: usize, extent: usize) -> (usize, usize) {
    let lo = center as isize - (len / 2) as isize;
    let hi = lo + len as isize;
    let lo = lo.clamp(0, extent as isize) as usize;
    let hi = hi.clamp(0, extent as isize) as usize;
    (lo, hi - lo)
}

fn retained(total: usize, zero: usize) -> f64 {
    (total - zero) as f64 / total as f64
}

/// Per-sample convex combination `l_i * x_i + (1 - l_i) * x_partner[i]`.
pub fn mixup_explicit(x: &Tensor, partner: &[usize], lambdas: &[f64]) -> Result<MixOutcome> {
    let b = x.rows();
    check_permutation(partner, b)?;
    if lambdas.len() != b {
        return Err(Error::Structural(format!(
            "{} lambdas for batch {b}",
            lambdas.len()
        )));
    }
    let mut mixed = x.clone();
    for i in 0..b {
        let l = lambdas[i];
        if l == 1.0 {
            continue;
        }
        let other = x.row(partner[i]);
        for (m, (&a, &o)) in mixed.row_mut(i).iter_mut().zip(x.row(i).iter().zip(other)) {
            *m = l * a + (1.0 - l) * o;
        }
    }
    Ok(MixOutcome {
        mixed,
        lambda: lambdas.iter().sum::<f64>() / b as f64,
        sample_lambdas: lambdas.to_vec(),
        partner: partner.to_vec(),
        mask: None,
    })
}

pub fn mixup_batch(x: &Tensor, alpha: f64, rng: &mut SeededRng) -> Result<MixOutcome> {
    mixup_batch_with(x, LambdaSource::Beta(alpha), rng)
}

pub fn mixup_batch_with(
    x: &Tensor,
    lambda: LambdaSource,
    rng: &mut SeededRng,
) -> Result<MixOutcome> {
    if x.rows() < 2 {
        return Err(Error::Parameter(format!(
            "mixing needs a batch of at least 2, got {}",
            x.rows()
        )));
    }
    let b = x.rows();
    let partner = rng.permutation(b);
    let lambdas = (0..b)
        .map(|_| lambda.draw(rng))
        .collect::<Result<Vec<_>>>()?;
    mixup_explicit(x, &partner, &lambdas)
}

/// Replaces the `(c, t, h, w)` box of every sample `i` with the same box of
/// `source[partner[i]]`.
pub fn paste_box(
    primary: &Tensor,
    source: &Tensor,
    partner: &[usize],
    region: MaskBox,
    source_start: [usize; 4],
) -> Result<Tensor> {
    let b = primary.rows();
    check_permutation(partner, b)?;
    if source.rows() != b {
        return Err(Error::Structural(format!(
            "batch sizes {b} and {} differ",
            source.rows()
        )));
    }
    let mut mixed = primary.clone();
    if region.volume() == 0 {
        return Ok(mixed);
    }
    let e = region.extent;
    let (d, s) = (region.start, source_start);
    for (i, &p) in partner.iter().enumerate().take(b) {
        mixed.copy_region(
            &[i, d[0], d[1], d[2], d[3]],
            source,
            &[p, s[0], s[1], s[2], s[3]],
            &[1, e[0], e[1], e[2], e[3]],
        )?;
    }
    Ok(mixed)
}

/// Same-modality box cutmix with an explicit region; lambda is the retained volume fraction.
pub fn cutmix_explicit(x: &Tensor, partner: &[usize], region: MaskBox) -> Result<MixOutcome> {
    let [b, c, t, h, w] = x.dims5()?;
    let mixed = paste_box(x, x, partner, region, region.start)?;
    let total = c * t * h * w;
    let zero = region.volume();
    let lambda = retained(total, zero);
    let center = [0, 1, 2, 3].map(|d| region.start[d] + region.extent[d] / 2);
    Ok(MixOutcome {
        mixed,
        lambda,
        sample_lambdas: vec![lambda; b],
        partner: partner.to_vec(),
        mask: Some(MaskSpec {
            requested: region.extent,
            center,
            region,
            total_volume: total,
            zero_volume: zero,
        }),
    })
}

pub fn temporal_cutmix(x: &Tensor, alpha: f64, rng: &mut SeededRng) -> Result<MixOutcome> {
    temporal_cutmix_with(x, LambdaSource::Beta(alpha), rng)
}

/// Replaces a contiguous run of `round((1 - lambda) T)` whole frames.
pub fn temporal_cutmix_with(
    x: &Tensor,
    lambda: LambdaSource,
    rng: &mut SeededRng,
) -> Result<MixOutcome> {
    let [b, c, t, h, w] = check_batch(x)?;
    let partner = rng.permutation(b);
    let lam = lambda.draw(rng)?;
    let len = round_extent((1.0 - lam) * t as f64, t);
    let start = rng.below(t - len + 1);
    let region = MaskBox {
        start: [0, start, 0, 0],
        extent: [c, len, h, w],
    };
    let mut out = cutmix_explicit(x, &partner, region)?;
    if let Some(m) = out.mask.as_mut() {
        m.requested = [c, len, h, w];
    }
    Ok(out)
}

pub fn st_cutmix(x: &Tensor, alpha: f64, rng: &mut SeededRng) -> Result<MixOutcome> {
    st_cutmix_with(x, LambdaSource::Beta(alpha), rng)
}

/// Cuboid over (T, H, W) with volume fraction `1 - lambda` (cube-root side
/// scaling), random centre, clipped at the borders; all channels.
pub fn st_cutmix_with(x: &Tensor, lambda: LambdaSource, rng: &mut SeededRng) -> Result<MixOutcome> {
    let [b, c, t, h, w] = check_batch(x)?;
    let partner = rng.permutation(b);
    let lam = lambda.draw(rng)?;
    let side = (1.0 - lam).cbrt();
    let req = [
        c,
        round_extent(t as f64 * side, t),
        round_extent(h as f64 * side, h),
        round_extent(w as f64 * side, w),
    ];
    let center = [c / 2, rng.below(t), rng.below(h), rng.below(w)];
    let (t0, tl) = clip_interval(center[1], req[1], t);
    let (h0, hl) = clip_interval(center[2], req[2], h);
    let (w0, wl) = clip_interval(center[3], req[3], w);
    let region = MaskBox {
        start: [0, t0, h0, w0],
        extent: [c, tl, hl, wl],
    };
    let mut out = cutmix_explicit(x, &partner, region)?;
    if let Some(m) = out.mask.as_mut() {
        m.requested = req;
        m.center = center;
    }
    Ok(out)
}

pub fn videomix(x: &Tensor, alpha: f64, rng: &mut SeededRng) -> Result<MixOutcome> {
    videomix_with(x, LambdaSource::Beta(alpha), rng)
}

/// Spatial box with area fraction `1 - lambda`, identical across all frames
/// and channels.
pub fn videomix_with(x: &Tensor, lambda: LambdaSource, rng: &mut SeededRng) -> Result<MixOutcome> {
    let [b, c, t, h, w] = check_batch(x)?;
    let partner = rng.permutation(b);
    let lam = lambda.draw(rng)?;
    let side = (1.0 - lam).sqrt();
    let req = [
        c,
        t,
        round_extent(h as f64 * side, h),
        round_extent(w as f64 * side, w),
    ];
    let center = [c / 2, t / 2, rng.below(h), rng.below(w)];
    let (h0, hl) = clip_interval(center[2], req[2], h);
    let (w0, wl) = clip_interval(center[3], req[3], w);
    let region = MaskBox {
        start: [0, 0, h0, w0],
        extent: [c, t, hl, wl],
    };
    let mut out = cutmix_explicit(x, &partner, region)?;
    if let Some(m) = out.mask.as_mut() {
        m.requested = req;
        m.center = center;
    }
    Ok(out)
}

/// Explicit placement for [`cmmc_mix`]: where the patch lands in `g1` and
/// where it is read from in `g2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CmmcPlacement {
    pub dest: MaskBox,
    pub source_start: [usize; 4],
}

/// Cross-modal manifold cutmix between hidden activations
/// `g1: (B, c1, t1, h1, w1)` and `g2: (B, c2, t2, h2, w2)`.
///
/// 1. A spatial crop of `g2` with side scaling `sqrt(1 - l_s)` (full time
///    and channel extent) at a uniform centre, clipped.
/// 2. A destination box in `g1` with extents
///    `(min(c2, c1), min(t2, t1), min(h_s, h1), min(w_s, w1))` at a uniform
///    4-D centre, clipped to `g1`.
/// 3. The source is re-cropped (centred) to the clipped destination
///    extents and pasted from `g2[partner[i]]` into `g1[i]`.
///
/// `lambda` is the retained volume fraction of `g1`. An empty destination
/// box yields the identity with `lambda = 1`.
pub fn cmmc_mix(g1: &Tensor, g2: &Tensor, alpha: f64, rng: &mut SeededRng) -> Result<MixOutcome> {
    cmmc_mix_with(g1, g2, LambdaSource::Beta(alpha), rng)
}

pub fn cmmc_mix_with(
    g1: &Tensor,
    g2: &Tensor,
    lambda: LambdaSource,
    rng: &mut SeededRng,
) -> Result<MixOutcome> {
    let [b, c1, t1, h1, w1] = g1.dims5()?;
    let [b2, c2, t2, h2, w2] = g2.dims5()?;
    if b < 2 {
        return Err(Error::Parameter(format!(
            "mixing needs a batch of at least 2, got {b}"
        )));
    }
    if b != b2 {
        return Err(Error::Structural(format!(
            "batch sizes {b} and {b2} differ"
        )));
    }
    let partner = rng.permutation(b);
    let lam_s = lambda.draw(rng)?;
    let side = (1.0 - lam_s).sqrt();

    let src_req = [
        round_extent(h2 as f64 * side, h2),
        round_extent(w2 as f64 * side, w2),
    ];
    let src_center = [rng.below(h2), rng.below(w2)];
    let (sh0, shl) = clip_interval(src_center[0], src_req[0], h2);
    let (sw0, swl) = clip_interval(src_center[1], src_req[1], w2);

    let requested = [c2.min(c1), t2.min(t1), shl.min(h1), swl.min(w1)];
    let center = [rng.below(c1), rng.below(t1), rng.below(h1), rng.below(w1)];
    let dims1 = [c1, t1, h1, w1];
    let mut start = [0; 4];
    let mut extent = [0; 4];
    for d in 0..4 {
        (start[d], extent[d]) = clip_interval(center[d], requested[d], dims1[d]);
    }
    let dest = MaskBox { start, extent };
    let source_extent = [c2, t2, shl, swl];
    let source_origin = [0, 0, sh0, sw0];
    let source_start = [0, 1, 2, 3]
        .map(|d| source_origin[d] + (source_extent[d] - extent[d].min(source_extent[d])) / 2);

    let mut out = cmmc_explicit(g1, g2, &partner, CmmcPlacement { dest, source_start })?;
    if let Some(m) = out.mask.as_mut() {
        m.requested = requested;
        m.center = center;
    }
    Ok(out)
}

/// [`cmmc_mix`] with partner and placement fixed by the caller.
pub fn cmmc_explicit(
    g1: &Tensor,
    g2: &Tensor,
    partner: &[usize],
    placement: CmmcPlacement,
) -> Result<MixOutcome> {
    let [b, c1, t1, h1, w1] = g1.dims5()?;
    let [_, c2, t2, h2, w2] = g2.dims5()?;
    let dest = placement.dest;
    let (dims1, dims2) = ([c1, t1, h1, w1], [c2, t2, h2, w2]);
    for d in 0..4 {
        if dest.start[d] + dest.extent[d] > dims1[d]
            || placement.source_start[d] + dest.extent[d] > dims2[d]
        {
            return Err(Error::Index(format!(
                "cmmc box out of bounds on axis {d}: {:?} into {dims1:?} from {:?} of {dims2:?}",
                dest, placement.source_start
            )));
        }
    }
    let total = c1 * t1 * h1 * w1;
    let zero = dest.volume();
    let mixed = paste_box(g1, g2, partner, dest, placement.source_start)?;
    let lambda = retained(total, zero);
    Ok(MixOutcome {
        mixed,
        lambda,
        sample_lambdas: vec![lambda; b],
        partner: partner.to_vec(),
        mask: Some(MaskSpec {
            requested: dest.extent,
            center: [0, 1, 2, 3].map(|d| dest.start[d] + dest.extent[d] / 2),
            region: dest,
            total_volume: total,
            zero_volume: zero,
        }),
    })
}

/// Draws mixing sites `k` (from `eligible1`) and `l >= k` (from `eligible2`).
pub fn sample_layer_pair(
    eligible1: &[usize],
    eligible2: &[usize],
    rng: &mut SeededRng,
) -> Result<(usize, usize)> {
    if eligible1.is_empty() || eligible2.is_empty() {
        return Err(Error::Structural("empty eligible layer set".into()));
    }
    const MAX_TRIES: usize = 64;
    for _ in 0..MAX_TRIES {
        let k = eligible1[rng.below(eligible1.len())];
        let feasible: Vec<usize> = eligible2.iter().copied().filter(|&l| l >= k).collect();
        if feasible.is_empty() {
            continue;
        }
        let l = feasible[rng.below(feasible.len())];
        return Ok((k, l));
    }
    Err(Error::Structural(format!(
        "no feasible layer pair with k <= l for sets {eligible1:?} and {eligible2:?}"
    )))
}

pub fn check_permutation(p: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if p.len() != n {
        return Err(Error::Structural(format!(
            "partner of length {} for batch {n}",
            p.len()
        )));
    }
    for &i in p {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(Error::Structural(format!(
                "partner {p:?} is not a permutation"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn video(seed: u64, dims: [usize; 5]) -> Tensor {
        Tensor::randn(&dims, 1.0, &mut SeededRng::new(seed))
    }

    /// Counts, per sample, the elements of `a` and `b` that differ.
    fn diff_counts(a: &Tensor, b: &Tensor) -> Vec<usize> {
        (0..a.rows())
            .map(|i| {
                a.row(i)
                    .iter()
                    .zip(b.row(i))
                    .filter(|(x, y)| x != y)
                    .count()
            })
            .collect()
    }

    #[test]
    fn mixup_hand_arithmetic() {
        let x = Tensor::new(vec![2, 1], vec![1.0, 5.0]).unwrap();
        let out = mixup_explicit(&x, &[1, 0], &[0.3, 0.3]).unwrap();
        assert!((out.mixed.data()[0] - 3.8).abs() < 1e-12);
        assert!((out.mixed.data()[1] - 2.2).abs() < 1e-12);
        assert!((out.lambda - 0.3).abs() < 1e-15);
    }

    #[test]
    fn mixup_degenerate_lambdas() {
        let x = video(1, [4, 3, 2, 4, 4]);
        let mut rng = SeededRng::new(2);
        let same = mixup_batch_with(&x, LambdaSource::Fixed(1.0), &mut rng).unwrap();
        assert!(same.mixed.bitwise_eq(&x));
        let swap = mixup_batch_with(&x, LambdaSource::Fixed(0.0), &mut rng).unwrap();
        assert!(swap
            .mixed
            .bitwise_eq(&x.select_rows(&swap.partner).unwrap()));
        assert!(matches!(
            mixup_batch(&video(0, [1, 1, 1, 1, 1]), 1.0, &mut rng),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn temporal_cutmix_counts() {
        let x = video(3, [2, 3, 8, 4, 4]);
        let region = MaskBox {
            start: [0, 5, 0, 0],
            extent: [3, 2, 4, 4],
        };
        let out = cutmix_explicit(&x, &[1, 0], region).unwrap();
        assert_eq!(out.lambda, 0.75);
        assert_eq!(diff_counts(&out.mixed, &x), vec![2 * 3 * 4 * 4; 2]);

        let mut rng = SeededRng::new(4);
        let id = temporal_cutmix_with(&x, LambdaSource::Fixed(1.0), &mut rng).unwrap();
        assert!(id.mixed.bitwise_eq(&x));
        assert_eq!(id.lambda, 1.0);
        let full = temporal_cutmix_with(&x, LambdaSource::Fixed(0.0), &mut rng).unwrap();
        assert_eq!(full.lambda, 0.0);
        assert!(full
            .mixed
            .bitwise_eq(&x.select_rows(&full.partner).unwrap()));
    }

    #[test]
    fn temporal_cutmix_replaces_whole_frames() {
        let x = video(5, [4, 3, 8, 4, 4]);
        let mut rng = SeededRng::new(6);
        for _ in 0..50 {
            let out = temporal_cutmix(&x, 1.0, &mut rng).unwrap();
            let r = out.mask_box().unwrap();
            assert_eq!((r.extent[0], r.extent[2], r.extent[3]), (3, 4, 4));
            assert_eq!(out.lambda, 1.0 - r.extent[1] as f64 / 8.0);
        }
    }

    #[test]
    fn st_cutmix_degenerate_boxes() {
        let x = video(7, [2, 2, 4, 4, 4]);
        let mut rng = SeededRng::new(8);
        let id = st_cutmix_with(&x, LambdaSource::Fixed(1.0), &mut rng).unwrap();
        assert!(id.mixed.bitwise_eq(&x));
        assert_eq!(id.lambda, 1.0);
        let whole = MaskBox {
            start: [0; 4],
            extent: [2, 4, 4, 4],
        };
        let out = cutmix_explicit(&x, &[1, 0], whole).unwrap();
        assert_eq!(out.lambda, 0.0);
    }

    #[test]
    fn videomix_area_and_frame_consistency() {
        let x = video(9, [2, 3, 4, 16, 16]);
        let region = MaskBox {
            start: [0, 0, 3, 8],
            extent: [3, 4, 8, 8],
        };
        let out = cutmix_explicit(&x, &[1, 0], region).unwrap();
        assert_eq!(out.lambda, 0.75);

        let mut rng = SeededRng::new(10);
        for _ in 0..30 {
            let out = videomix(&x, 1.0, &mut rng).unwrap();
            // Every frame and channel differs at the same spatial positions.
            let [_, c, t, h, w] = x.dims5().unwrap();
            for i in 0..2 {
                if out.partner[i] == i {
                    continue;
                }
                let pattern = |ci: usize, ti: usize| -> Vec<bool> {
                    (0..h * w)
                        .map(|p| {
                            let idx = ((ci * t + ti) * h * w) + p;
                            out.mixed.row(i)[idx] != x.row(i)[idx]
                        })
                        .collect()
                };
                let first = pattern(0, 0);
                for ci in 0..c {
                    for ti in 0..t {
                        assert_eq!(pattern(ci, ti), first);
                    }
                }
            }
            let id = videomix_with(&x, LambdaSource::Fixed(1.0), &mut rng).unwrap();
            assert!(id.mixed.bitwise_eq(&x));
        }
    }

    #[test]
    fn cmmc_volume_arithmetic() {
        let g1 = Tensor::full(&[2, 4, 4, 4, 4], 1.0);
        let g2 = Tensor::zeros(&[2, 8, 2, 2, 2]);
        let placement = CmmcPlacement {
            dest: MaskBox {
                start: [1, 2, 0, 2],
                extent: [2, 2, 2, 2],
            },
            source_start: [3, 0, 0, 0],
        };
        let out = cmmc_explicit(&g1, &g2, &[1, 0], placement).unwrap();
        assert_eq!(out.lambda, 1.0 - 16.0 / 256.0);
        assert_eq!(out.lambda, 0.9375);
        assert_eq!(out.mixed.mean(), out.lambda);
    }

    #[test]
    fn cmmc_empty_box_is_identity() {
        let mut rng = SeededRng::new(11);
        let g1 = video(12, [3, 4, 4, 8, 8]);
        let g2 = video(13, [3, 8, 2, 4, 4]);
        let out = cmmc_mix_with(&g1, &g2, LambdaSource::Fixed(1.0), &mut rng).unwrap();
        assert!(out.mixed.bitwise_eq(&g1));
        assert_eq!(out.lambda, 1.0);
        assert_eq!(out.mask.unwrap().zero_volume, 0);
    }

    #[test]
    fn cmmc_writes_only_inside_box_and_from_partner_patch() {
        let mut rng = SeededRng::new(14);
        let g1 = video(15, [4, 8, 8, 8, 8]);
        let g2 = video(16, [4, 16, 4, 8, 8]);
        for _ in 0..40 {
            let out = cmmc_mix(&g1, &g2, 1.0, &mut rng).unwrap();
            let r = out.mask_box().unwrap();
            let [_, c, t, h, w] = g1.dims5().unwrap();
            for i in 0..4 {
                let src_row = g2.row(out.partner[i]);
                for ci in 0..c {
                    for ti in 0..t {
                        for hi in 0..h {
                            for wi in 0..w {
                                let idx = ((ci * t + ti) * h + hi) * w + wi;
                                let v = out.mixed.row(i)[idx];
                                if r.contains([ci, ti, hi, wi]) {
                                    assert!(src_row.contains(&v));
                                } else {
                                    assert_eq!(v.to_bits(), g1.row(i)[idx].to_bits());
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn primary_grad_zeroes_box() {
        let g1 = Tensor::full(&[2, 2, 2, 2, 2], 1.0);
        let g2 = Tensor::zeros(&[2, 2, 2, 2, 2]);
        let placement = CmmcPlacement {
            dest: MaskBox {
                start: [0, 1, 0, 1],
                extent: [2, 1, 2, 1],
            },
            source_start: [0; 4],
        };
        let out = cmmc_explicit(&g1, &g2, &[0, 1], placement).unwrap();
        let g = out
            .primary_grad(&Tensor::full(&[2, 2, 2, 2, 2], 1.0))
            .unwrap();
        assert!(g.bitwise_eq(&out.mixed));
    }

    #[test]
    fn layer_pairs() {
        let mut rng = SeededRng::new(17);
        let set = [1, 2, 3, 4];
        let mut counts = [0usize; 5];
        let n = 100_000;
        for _ in 0..n {
            let (k, l) = sample_layer_pair(&set, &set, &mut rng).unwrap();
            assert!(k <= l && k >= 1);
            if k == 4 {
                assert_eq!(l, 4);
            }
            counts[k] += 1;
        }
        for (k, &c) in counts.iter().enumerate().skip(1) {
            let f = c as f64 / n as f64;
            assert!((f - 0.25).abs() < 0.03 * 0.25, "k = {k}: {f}");
        }
        assert!(matches!(
            sample_layer_pair(&[3], &[1, 2], &mut rng),
            Err(Error::Structural(_))
        ));
        assert!(sample_layer_pair(&[], &[1], &mut rng).is_err());
    }

    #[test]
    fn operators_are_deterministic() {
        let x = video(18, [4, 3, 4, 8, 8]);
        for op in Operator::ALL {
            let a = op
                .apply(&x, LambdaSource::Beta(1.0), &mut SeededRng::new(5))
                .unwrap();
            let b = op
                .apply(&x, LambdaSource::Beta(1.0), &mut SeededRng::new(5))
                .unwrap();
            assert!(a.mixed.bitwise_eq(&b.mixed));
            assert_eq!(a.partner, b.partner);
            assert_eq!(a.lambda.to_bits(), b.lambda.to_bits());
        }
    }

    proptest! {
        #[test]
        fn cutmix_lambda_is_retained_fraction(seed in 0u64..2000, op in 0usize..3) {
            // Constant, everywhere-different operands: the number of changed
            // elements is exactly the replaced volume.
            let b = 3;
            let mut x = Tensor::zeros(&[b, 2, 4, 6, 6]);
            for i in 0..b {
                x.row_mut(i).iter_mut().for_each(|v| *v = i as f64 + 1.0);
            }
            let mut rng = SeededRng::new(seed);
            let out = match op {
                0 => temporal_cutmix(&x, 1.0, &mut rng),
                1 => st_cutmix(&x, 1.0, &mut rng),
                _ => videomix(&x, 1.0, &mut rng),
            }.unwrap();
            prop_assert_eq!(out.mixed.shape(), x.shape());
            prop_assert!(out.lambda >= 0.0 && out.lambda <= 1.0);
            check_permutation(&out.partner, b).unwrap();
            let n = x.row_len();
            for (i, changed) in diff_counts(&out.mixed, &x).into_iter().enumerate() {
                if out.partner[i] != i {
                    prop_assert_eq!(out.lambda, (n - changed) as f64 / n as f64);
                }
            }
        }

        #[test]
        fn cmmc_constant_operands(seed in 0u64..2000, k in 1usize..=4, l_off in 0usize..=3) {
            // Shapes mimic the default encoder's block outputs.
            let shapes = [[8, 8, 8, 8], [16, 4, 8, 8], [32, 4, 4, 4], [64, 4, 4, 4]];
            let l = (k + l_off).min(4);
            let s1 = shapes[k - 1];
            let s2 = shapes[l - 1];
            let g1 = Tensor::full(&[2, s1[0], s1[1], s1[2], s1[3]], 1.0);
            let g2 = Tensor::zeros(&[2, s2[0], s2[1], s2[2], s2[3]]);
            let out = cmmc_mix(&g1, &g2, 1.0, &mut SeededRng::new(seed)).unwrap();
            prop_assert_eq!(out.mixed.mean(), out.lambda);
            let zeros = out.mixed.row(0).iter().filter(|&&v| v == 0.0).count();
            let total = out.mixed.row_len();
            prop_assert_eq!(out.lambda, (total - zeros) as f64 / total as f64);
        }
    }
}
