//! Finite-difference verification of every hand-written backward pass.

use serde::Serialize;

use crate::config::GradcheckConfig;
use crate::contrastive::{imix_loss, info_nce, MoCoQueue};
use crate::encoder::layers::{
    ChannelAffine, Conv3d, Flatten, GlobalPool, L2Norm, Layer, Linear, Relu,
};
use crate::encoder::{ArchSpec, EncoderStack, LayerKind};
use crate::error::Result;
use crate::mixing::LambdaSource;
use crate::rng::SeededRng;
use crate::tensor::{l2_normalize, Tensor};
use crate::trainer::cmmc_step;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentResult {
    pub component: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub components: Vec<ComponentResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.components
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.component.as_str())
            .collect()
    }
}

/// `||a - n|| / max(||a||, ||n||)`, zero when both vanish.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn central(h: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    Ok((f(h)? - f(-h)?) / (2.0 * h))
}

/// Inputs bounded away from zero so ReLU kinks stay outside the stencil.
fn kink_free(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let mut x = Tensor::randn(shape, 1.0, rng);
    x.data_mut().iter_mut().for_each(|v| {
        if v.abs() < 0.1 {
            *v = if *v < 0.0 { -0.1 } else { 0.1 } + *v;
        }
    });
    x
}

/// Checks `d(sum(w * layer(x)))` w.r.t. the input and every parameter.
fn check_layer(mut layer: Layer, x: &Tensor, h: f64, rng: &mut SeededRng) -> Result<f64> {
    let y = layer.forward(x)?;
    let w = Tensor::randn(y.shape(), 1.0, rng);
    let dx = layer.backward(&w)?;
    let objective = |l: &mut Layer, x: &Tensor| -> Result<f64> { l.forward(x)?.dot(&w) };

    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        numeric.push(central(h, |d| {
            let mut xp = x.clone();
            xp.data_mut()[i] += d;
            objective(&mut layer.clone(), &xp)
        })?);
    }
    let mut worst = rel_error(dx.data(), &numeric);

    let n_params = layer.params().len();
    for p in 0..n_params {
        let analytic = layer.params()[p].grad.data().to_vec();
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..analytic.len() {
            numeric.push(central(h, |d| {
                let mut probe = layer.clone();
                probe.params_mut()[p].value.data_mut()[i] += d;
                objective(&mut probe, x)
            })?);
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn layer_case(kind: LayerKind, rng: &mut SeededRng) -> (Layer, Tensor) {
    match kind {
        LayerKind::Conv3d => (
            Layer::Conv3d(Conv3d::new(2, 3, [1, 2, 2], rng)),
            Tensor::randn(&[2, 2, 3, 5, 4], 1.0, rng),
        ),
        LayerKind::ChannelAffine => {
            let mut l = ChannelAffine::new(3);
            l.scale.value = Tensor::randn(&[3], 1.0, rng);
            l.bias.value = Tensor::randn(&[3], 1.0, rng);
            (
                Layer::ChannelAffine(l),
                Tensor::randn(&[2, 3, 2, 3, 3], 1.0, rng),
            )
        }
        LayerKind::Relu => (
            Layer::Relu(Relu::default()),
            kink_free(&[2, 3, 2, 3, 3], rng),
        ),
        LayerKind::Pool => (
            Layer::Pool(GlobalPool::default()),
            Tensor::randn(&[2, 3, 2, 3, 3], 1.0, rng),
        ),
        LayerKind::Flatten => (
            Layer::Flatten(Flatten::default()),
            Tensor::randn(&[2, 3, 1, 1, 1], 1.0, rng),
        ),
        LayerKind::Linear => {
            let mut l = Linear::new(5, 4, rng);
            l.bias.value = Tensor::randn(&[4], 1.0, rng);
            (Layer::Linear(l), Tensor::randn(&[3, 5], 1.0, rng))
        }
        LayerKind::L2Norm => (
            Layer::L2Norm(L2Norm::default()),
            Tensor::randn(&[3, 6], 1.0, rng),
        ),
    }
}

/// Loss of `loss_fn(l2norm(u))` and its gradient w.r.t. the unnormalised `u`.
fn normalized_loss(
    u: &Tensor,
    loss_fn: &dyn Fn(&Tensor) -> Result<(f64, Tensor)>,
) -> Result<(f64, Tensor)> {
    let mut norm = L2Norm::default();
    let z = norm.forward(u)?;
    let (loss, gz) = loss_fn(&z)?;
    Ok((loss, norm.backward(&gz)?))
}

fn check_loss(
    u: &Tensor,
    h: f64,
    loss_fn: &dyn Fn(&Tensor) -> Result<(f64, Tensor)>,
) -> Result<f64> {
    let (_, analytic) = normalized_loss(u, loss_fn)?;
    let mut numeric = Vec::with_capacity(u.len());
    for i in 0..u.len() {
        numeric.push(central(h, |d| {
            let mut up = u.clone();
            up.data_mut()[i] += d;
            Ok(normalized_loss(&up, loss_fn)?.0)
        })?);
    }
    Ok(rel_error(analytic.data(), &numeric))
}

fn unit(shape: &[usize], rng: &mut SeededRng) -> Result<Tensor> {
    l2_normalize(&Tensor::randn(shape, 1.0, rng))
}

/// Gradient of the full cmmc pass into the trained encoder: mixing sites
/// `(2, 2)`, `lambda = 0.5`, identical box placement on every evaluation.
/// Covers all block-1 parameters plus a sample of the rest.
pub fn check_cmmc_path(cfg: &GradcheckConfig) -> Result<f64> {
    let mut rng = SeededRng::new(cfg.seed).fork(&[0xc44c]);
    let size = [4, 8, 8];
    let mut f1 = EncoderStack::build(ArchSpec::video(3, size), "rgb", &mut rng)?;
    let mut f2 = EncoderStack::build(ArchSpec::video(2, size), "motion", &mut rng)?;
    f2.set_frozen(true);
    let b = 3;
    let x1 = Tensor::uniform(&[b, 3, 4, 8, 8], 0.0, 1.0, &mut rng);
    let x2 = Tensor::uniform(&[b, 2, 4, 8, 8], 0.0, 1.0, &mut rng);
    let z_key = unit(&[b, f1.output_dim()], &mut rng)?;
    let mut queue = MoCoQueue::new(8);
    queue.enqueue(&unit(&[4, f1.output_dim()], &mut rng)?)?;
    let tau = 0.2;
    let mix_rng = rng.fork(&[1]);

    let mut run = |f1: &mut EncoderStack| -> Result<f64> {
        let out = cmmc_step(
            f1,
            &mut f2,
            &x1,
            &x2,
            &z_key,
            &queue,
            tau,
            (2, 2),
            LambdaSource::Fixed(0.5),
            &mut mix_rng.clone(),
        )?;
        f1.clear_caches();
        Ok(out.loss)
    };

    f1.zero_grad();
    run(&mut f1)?;
    let analytic: Vec<Vec<f64>> = f1.params().iter().map(|p| p.grad.data().to_vec()).collect();

    // Every coordinate of block 1 (conv + affine), a fixed sample elsewhere.
    let block1 = 4;
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (p, g) in analytic.iter().enumerate() {
        if p < block1 {
            coords.extend((0..g.len()).map(|i| (p, i)));
        } else {
            coords.extend((0..16).map(|_| (p, rng.below(g.len()))));
        }
    }
    let mut a = Vec::with_capacity(coords.len());
    let mut n = Vec::with_capacity(coords.len());
    for &(p, i) in &coords {
        a.push(analytic[p][i]);
        n.push(central(cfg.step, |d| {
            let mut probe = f1.clone();
            probe.params_mut()[p].value.data_mut()[i] += d;
            run(&mut probe)
        })?);
    }
    Ok(rel_error(&a, &n))
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = SeededRng::new(cfg.seed);
    let h = cfg.step;
    let mut results: Vec<(String, f64)> = Vec::new();
    for kind in LayerKind::ALL {
        let (layer, x) = layer_case(kind, &mut rng);
        results.push((
            kind.name().to_string(),
            check_layer(layer, &x, h, &mut rng)?,
        ));
    }

    let (b, d) = (3, 5);
    let u = Tensor::randn(&[b, d], 1.0, &mut rng);
    let z_key = unit(&[b, d], &mut rng)?;
    let mut queue = MoCoQueue::new(8);
    queue.enqueue(&unit(&[8, d], &mut rng)?)?;
    let tau = 0.2;
    let nce = |z: &Tensor| info_nce(z, &z_key, &queue, tau).map(|r| (r.loss, r.grad_query));
    results.push(("info_nce".into(), check_loss(&u, h, &nce)?));
    let partner = [2, 0, 1];
    let imix = |z: &Tensor| {
        imix_loss(z, &z_key, &queue, tau, &partner, &[0.3]).map(|r| (r.loss, r.grad_query))
    };
    results.push(("imix_loss".into(), check_loss(&u, h, &imix)?));

    results.push(("cmmc_path".into(), check_cmmc_path(cfg)?));

    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        components: results
            .into_iter()
            .map(|(component, err)| ComponentResult {
                passed: err < cfg.tolerance,
                component,
                max_rel_error: err,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_run_passes() {
        let report = run_gradcheck(&GradcheckConfig::default()).unwrap();
        assert!(report.components.len() >= 10);
        for c in &report.components {
            assert!(c.passed, "{} rel error {}", c.component, c.max_rel_error);
        }
    }

    #[test]
    fn tiny_tolerance_names_failures() {
        let report = run_gradcheck(&GradcheckConfig {
            tolerance: 1e-12,
            ..GradcheckConfig::default()
        })
        .unwrap();
        assert!(!report.passed());
        assert!(report.failures().contains(&"conv3d"));
    }

    #[test]
    fn rel_error_basics() {
        assert_eq!(rel_error(&[0.0], &[0.0]), 0.0);
        assert!((rel_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    }
}
