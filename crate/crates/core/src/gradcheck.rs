//! Central-difference verification of analytic gradients.
//!
//! Both the analytic gradient and the perturbed evaluations run in double
//! precision through the same generic op kernels the model uses in `f32`.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, point: Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let x = g.leaf(point);
    let out = f(&mut g, x)?;
    g.value(out).item()
}

/// Checks every coordinate of `point`.
pub fn finite_diff_gradcheck<F>(f: F, point: &Tensor<f64>, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    finite_diff_gradcheck_at(f, point, step, &coords)
}

/// Checks only the listed coordinates of `point`.
pub fn finite_diff_gradcheck_at<F>(
    f: F,
    point: &Tensor<f64>,
    step: f64,
    coords: &[usize],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("gradcheck step must be > 0, got {step}")));
    }
    if let Some(i) = point.first_non_finite() {
        return Err(Error::NonFinite {
            context: "gradcheck evaluation point".into(),
            index: i,
        });
    }

    let mut g = Graph::new();
    let x = g.leaf(point.clone());
    let out = f(&mut g, x)?;
    let grads = g.backward(out)?;
    let full = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape()));
    if let Some(i) = full.first_non_finite() {
        return Err(Error::NonFinite {
            context: "analytic gradient".into(),
            index: i,
        });
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: coords.first().copied().unwrap_or(0),
        analytic: Vec::with_capacity(coords.len()),
        numeric: Vec::with_capacity(coords.len()),
    };
    for &i in coords {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let (fp, fm) = (evaluate(&f, plus)?, evaluate(&f, minus)?);
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                context: "perturbed function value".into(),
                index: i,
            });
        }
        let numeric = (fp - fm) / (2.0 * step);
        let analytic = full.data()[i];
        let err = relative_error(analytic, numeric);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_index = i;
        }
        report.analytic.push(analytic);
        report.numeric.push(numeric);
    }
    Ok(report)
}

/// One checked tensor of a composed model check.
#[derive(Clone, Debug)]
pub struct NamedReport {
    pub name: String,
    pub report: GradCheckReport,
    /// Bias of a convolution feeding a normalization layer. Its true
    /// gradient is zero, so only the absolute size of the analytic value is
    /// meaningful.
    pub inert: bool,
}

/// Largest analytic gradient magnitude accepted for an inert tensor.
pub const INERT_TOLERANCE: f64 = 1e-10;

impl NamedReport {
    /// Worst relative error over the non-inert tensors.
    pub fn max_rel_err(reports: &[NamedReport]) -> f64 {
        reports
            .iter()
            .filter(|r| !r.inert)
            .map(|r| r.report.max_rel_err)
            .fold(0.0, f64::max)
    }

    /// Largest analytic magnitude over the inert tensors.
    pub fn max_inert(reports: &[NamedReport]) -> f64 {
        reports
            .iter()
            .filter(|r| r.inert)
            .flat_map(|r| r.report.analytic.iter().map(|a| a.abs()))
            .fold(0.0, f64::max)
    }
}

fn spread_coords(len: usize, count: usize) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    (0..count).map(|i| i * (len - 1) / (count - 1).max(1)).collect()
}

/// Finite-difference check of the segmentation loss through the residual
/// processing module and the segmentation network, in train mode with a
/// fixed dropout draw. Checks the incoming residual and a spread of
/// coordinates of every residual-processing and segmentation parameter
/// tensor, on a reduced model built from `seed`.
pub fn model_gradcheck(seed: u64, coords_per_tensor: usize) -> Result<Vec<NamedReport>> {
    use crate::loss::Reduction;
    use crate::model::{LayerKind, Mcrcnn, ModelConfig, Stage};
    use crate::ops::Mode;
    use crate::rng::Rng;

    let cfg = ModelConfig {
        rpm_dilations: vec![1, 2, 4, 8],
        ..ModelConfig::reduced(4, 3, 2)
    };
    let mut rng = Rng::new(seed);
    let model = Mcrcnn::build(cfg, &mut rng)?;
    let (h, w) = (9, 8);
    let frame = Tensor::<f64>::from_fn([1, 3, h, w], |_| rng.uniform());
    let residual = Tensor::<f64>::from_fn([1, 3, h, w], |_| rng.normal() * 0.3);
    let target = Tensor::<f64>::from_fn([1, 1, h, w], |_| if rng.uniform() < 0.3 { 1.0 } else { 0.0 });
    let include = Tensor::<f64>::from_fn([1, 1, h, w], |_| if rng.uniform() < 0.1 { 0.0 } else { 1.0 });
    let dropout_seed = rng.next_u64();

    // `leaf` replaces parameter `slot` (or the residual when `None`).
    let run = |g: &mut Graph<f64>, leaf: NodeId, slot: Option<usize>| -> Result<NodeId> {
        let mut p: Vec<NodeId> = model.params().iter().map(|q| g.input(q.value().cast())).collect();
        let r = match slot {
            Some(i) => {
                p[i] = leaf;
                g.input(residual.clone())
            }
            None => leaf,
        };
        let f = g.input(frame.clone());
        let mut drop_rng = Rng::new(dropout_seed);
        let refined = model.rpm_forward(g, &p, r, Mode::Train, &mut drop_rng)?;
        let prob = model.scnn_forward(g, &p, f, refined, Mode::Train)?;
        g.segmentation_loss(prob, target.clone(), Some(include.clone()), Reduction::Sum)
    };

    let plan = model.plan();
    let inert: Vec<String> = plan
        .windows(2)
        .filter(|w| {
            matches!(w[0].kind, LayerKind::Conv { .. })
                && matches!(w[1].kind, LayerKind::BatchNorm { .. } | LayerKind::InstanceNorm { .. })
        })
        .map(|w| format!("{}.bias", w[0].name))
        .collect();

    let mut out = vec![NamedReport {
        inert: false,
        name: "residual input".into(),
        report: finite_diff_gradcheck_at(
            |g, x| run(g, x, None),
            &residual,
            DEFAULT_STEP,
            &spread_coords(residual.len(), coords_per_tensor),
        )?,
    }];
    let mut ids = model.stage_params(Stage::Rpm);
    ids.extend(model.stage_params(Stage::Scnn));
    for id in ids {
        let p = model.params().get(id);
        let point: Tensor<f64> = p.value().cast();
        let report = finite_diff_gradcheck_at(
            |g, x| run(g, x, Some(id.index())),
            &point,
            DEFAULT_STEP,
            &spread_coords(point.len(), coords_per_tensor),
        )?;
        out.push(NamedReport {
            inert: inert.iter().any(|n| n == p.name()),
            name: p.name().to_string(),
            report,
        });
    }
    Ok(out)
}
