//! The three-stage network.
//!
//! * Background network: `conv(C→W)+ReLU`, `bcnn_deep_layers` ×
//!   `conv(W→W)` with batch norm before the ReLU of every
//!   `norm_interval`-th layer, then a linear `conv(W→C)` producing the
//!   residual map. The approximated background is `f − residual`.
//! * Residual processing: spatial dropout, one dilated `conv(C→rpm_width)`
//!   with ReLU per rate, channel concat, `1×1` fusion to one map, same-size
//!   average pooling, and min-max normalization to `[0, 1]`.
//! * Segmentation network: `conv(C→W)+ReLU`, `scnn_deep_layers` ×
//!   `conv(W→W)` with instance norm at the same interval, concat with the
//!   refined residual (`W+1` maps), and a sigmoid `conv(W+1→1)`.
//!
//! All convolutions are same-padded, so every stage preserves `H × W`.

mod checkpoint;
mod config;
mod count;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint,
    inspect_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointSummary, Phase,
    TrainingMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::ModelConfig;
pub use count::{count_parameters, LayerCount, ParamCount};

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::graph::{Eager, Exec};
use crate::ops::{Activation, Mode, RunningStats};
use crate::param::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Bcnn,
    Rpm,
    Scnn,
}

impl Stage {
    pub fn prefix(self) -> &'static str {
        match self {
            Stage::Bcnn => "bcnn",
            Stage::Rpm => "rpm",
            Stage::Scnn => "scnn",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        cin: usize,
        cout: usize,
        kernel: usize,
        dilation: usize,
    },
    BatchNorm {
        channels: usize,
    },
    InstanceNorm {
        channels: usize,
    },
}

/// One parameterized layer, in parameter-creation order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub stage: Stage,
    pub name: String,
    pub kind: LayerKind,
}

fn conv_spec(stage: Stage, name: String, cin: usize, cout: usize, kernel: usize, dilation: usize) -> LayerSpec {
    LayerSpec {
        stage,
        name,
        kind: LayerKind::Conv {
            cin,
            cout,
            kernel,
            dilation,
        },
    }
}

/// Every parameterized layer the configuration implies.
pub fn layer_plan(cfg: &ModelConfig) -> Vec<LayerSpec> {
    let (c, w, k) = (cfg.input_channels, cfg.backbone_width, cfg.kernel_size);
    let mut plan = Vec::new();

    plan.push(conv_spec(Stage::Bcnn, "bcnn.conv00".into(), c, w, k, 1));
    for i in 1..=cfg.bcnn_deep_layers {
        plan.push(conv_spec(Stage::Bcnn, format!("bcnn.conv{i:02}"), w, w, k, 1));
        if i % cfg.norm_interval == 0 {
            plan.push(LayerSpec {
                stage: Stage::Bcnn,
                name: format!("bcnn.bn{i:02}"),
                kind: LayerKind::BatchNorm { channels: w },
            });
        }
    }
    let tail = cfg.bcnn_deep_layers + 1;
    plan.push(conv_spec(Stage::Bcnn, format!("bcnn.conv{tail:02}"), w, c, k, 1));

    for (j, &d) in cfg.rpm_dilations.iter().enumerate() {
        plan.push(conv_spec(Stage::Rpm, format!("rpm.branch{j}"), c, cfg.rpm_width, k, d));
    }
    let fused = cfg.rpm_width * cfg.rpm_dilations.len();
    plan.push(conv_spec(Stage::Rpm, "rpm.fuse".into(), fused, 1, 1, 1));

    plan.push(conv_spec(Stage::Scnn, "scnn.conv00".into(), c, w, k, 1));
    for i in 1..=cfg.scnn_deep_layers {
        plan.push(conv_spec(Stage::Scnn, format!("scnn.conv{i:02}"), w, w, k, 1));
        if i % cfg.norm_interval == 0 {
            plan.push(LayerSpec {
                stage: Stage::Scnn,
                name: format!("scnn.in{i:02}"),
                kind: LayerKind::InstanceNorm { channels: w },
            });
        }
    }
    plan.push(conv_spec(Stage::Scnn, "scnn.out".into(), w + 1, 1, k, 1));
    plan
}

#[derive(Clone, Copy, Debug)]
struct ConvRef {
    weight: ParamId,
    bias: ParamId,
    dilation: usize,
}

#[derive(Clone, Copy, Debug)]
enum NormRef {
    /// Index into the model's running statistics.
    Batch {
        gamma: ParamId,
        beta: ParamId,
        running: usize,
    },
    Instance {
        gamma: ParamId,
        beta: ParamId,
    },
}

#[derive(Clone, Copy, Debug)]
struct Block {
    conv: ConvRef,
    norm: Option<NormRef>,
    activation: Activation,
}

/// Network outputs for one input batch.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub residual: Tensor,
    pub background: Tensor,
    pub refined: Tensor,
    pub probability: Tensor,
}

#[derive(Clone, Debug)]
pub struct Mcrcnn {
    config: ModelConfig,
    seed: u64,
    plan: Vec<LayerSpec>,
    params: ParamStore,
    running_names: Vec<String>,
    running: Vec<RunningStats>,
    bcnn: Vec<Block>,
    rpm_branches: Vec<ConvRef>,
    rpm_fuse: ConvRef,
    scnn: Vec<Block>,
    scnn_out: ConvRef,
}

/// `b = f − residual`.
pub fn approx_background(f: &Tensor, residual: &Tensor) -> Result<Tensor> {
    f.expect_shape(residual.shape(), "approx_background")?;
    f.sub(residual)
}

impl Mcrcnn {
    /// Builds the network with fan-in Gaussian weights
    /// (`std = √(2/(Cin·K²))`), zero biases, unit gamma and zero beta.
    pub fn build(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let plan = layer_plan(&config);
        let mut params = ParamStore::new();
        let mut convs: HashMap<String, ConvRef> = HashMap::new();
        let mut norms: HashMap<String, NormRef> = HashMap::new();
        let mut running_names = Vec::new();
        let mut running = Vec::new();

        for spec in &plan {
            match spec.kind {
                LayerKind::Conv {
                    cin,
                    cout,
                    kernel,
                    dilation,
                } => {
                    let std = (2.0 / (cin * kernel * kernel) as f64).sqrt();
                    let w = Tensor::from_fn([cout, cin, kernel, kernel], |_| (rng.normal() * std) as f32);
                    let weight = params.add(format!("{}.weight", spec.name), w, true)?;
                    let bias = params.add(format!("{}.bias", spec.name), Tensor::zeros(Shape::channels(cout)), true)?;
                    convs.insert(spec.name.clone(), ConvRef { weight, bias, dilation });
                }
                LayerKind::BatchNorm { channels } | LayerKind::InstanceNorm { channels } => {
                    let gamma = params.add(format!("{}.gamma", spec.name), Tensor::full(Shape::channels(channels), 1.0), true)?;
                    let beta = params.add(format!("{}.beta", spec.name), Tensor::zeros(Shape::channels(channels)), true)?;
                    let r = if matches!(spec.kind, LayerKind::BatchNorm { .. }) {
                        running_names.push(spec.name.clone());
                        running.push(RunningStats::new(channels));
                        NormRef::Batch {
                            gamma,
                            beta,
                            running: running.len() - 1,
                        }
                    } else {
                        NormRef::Instance { gamma, beta }
                    };
                    norms.insert(spec.name.clone(), r);
                }
            }
        }

        let block = |stage: &str, i: usize, norm_tag: &str, activation| Block {
            conv: convs[&format!("{stage}.conv{i:02}")],
            norm: norms.get(&format!("{stage}.{norm_tag}{i:02}")).copied(),
            activation,
        };
        let mut bcnn: Vec<Block> = (0..=config.bcnn_deep_layers)
            .map(|i| block("bcnn", i, "bn", Activation::Relu))
            .collect();
        bcnn.push(block("bcnn", config.bcnn_deep_layers + 1, "bn", Activation::Linear));
        let scnn = (0..=config.scnn_deep_layers)
            .map(|i| block("scnn", i, "in", Activation::Relu))
            .collect();
        let rpm_branches = (0..config.rpm_dilations.len())
            .map(|j| convs[&format!("rpm.branch{j}")])
            .collect();

        Ok(Mcrcnn {
            seed: rng.seed(),
            rpm_fuse: convs["rpm.fuse"],
            scnn_out: convs["scnn.out"],
            config,
            plan,
            params,
            running_names,
            running,
            bcnn,
            rpm_branches,
            scnn,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Seed of the generator the weights were initialized from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn plan(&self) -> &[LayerSpec] {
        &self.plan
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Batch-norm running statistics with their layer names.
    pub fn running_stats(&self) -> impl Iterator<Item = (&str, &RunningStats)> {
        self.running_names.iter().map(String::as_str).zip(&self.running)
    }

    pub fn running_stats_mut(&mut self, name: &str) -> Option<&mut RunningStats> {
        let i = self.running_names.iter().position(|n| n == name)?;
        Some(&mut self.running[i])
    }

    /// Marks every parameter of `stage` (non-)trainable.
    pub fn set_stage_trainable(&mut self, stage: Stage, trainable: bool) {
        self.params.set_trainable_prefix(&format!("{}.", stage.prefix()), trainable);
    }

    /// Ids of all parameters belonging to `stage`.
    pub fn stage_params(&self, stage: Stage) -> Vec<ParamId> {
        let prefix = format!("{}.", stage.prefix());
        self.params
            .ids()
            .filter(|&id| self.params.get(id).name().starts_with(&prefix))
            .collect()
    }

    fn conv<T: crate::Scalar, E: Exec<T>>(ex: &mut E, p: &[E::Value], c: &ConvRef, x: E::Value) -> Result<E::Value> {
        ex.conv2d(x, &p[c.weight.0], &p[c.bias.0], c.dilation)
    }

    fn run_blocks<T: crate::Scalar, E: Exec<T>>(
        &self,
        blocks: &[Block],
        running: &mut [RunningStats],
        ex: &mut E,
        p: &[E::Value],
        mut x: E::Value,
        mode: Mode,
    ) -> Result<E::Value> {
        for b in blocks {
            x = Self::conv(ex, p, &b.conv, x)?;
            x = match b.norm {
                None => x,
                Some(NormRef::Batch { gamma, beta, running: r }) => ex.batch_norm(
                    x,
                    &p[gamma.0],
                    &p[beta.0],
                    &mut running[r],
                    mode,
                    self.config.bn_momentum,
                    self.config.norm_epsilon,
                )?,
                Some(NormRef::Instance { gamma, beta }) => {
                    ex.instance_norm(x, &p[gamma.0], &p[beta.0], self.config.norm_epsilon)?
                }
            };
            x = ex.activation(x, b.activation);
        }
        Ok(x)
    }

    fn check_input<T: crate::Scalar, E: Exec<T>>(&self, ex: &E, f: &E::Value, what: &'static str) -> Result<()> {
        let s = ex.shape(f);
        if s.c != self.config.input_channels {
            return Err(Error::ShapeMismatch {
                op: what,
                left: s,
                right: Shape::new(s.n, self.config.input_channels, s.h, s.w),
            });
        }
        Ok(())
    }

    /// Residual map `BCNN(f)`, shape `[N, C, H, W]`, linear output.
    ///
    /// `p` holds the bound parameter values indexed by `ParamId`. Train mode
    /// updates the batch-norm running statistics.
    pub fn bcnn_forward<T: crate::Scalar, E: Exec<T>>(
        &mut self,
        ex: &mut E,
        p: &[E::Value],
        f: E::Value,
        mode: Mode,
    ) -> Result<E::Value> {
        self.check_input(ex, &f, "bcnn_forward (input vs expected channels)")?;
        let mut running = std::mem::take(&mut self.running);
        let out = self.run_blocks(&self.bcnn, &mut running, ex, p, f, mode);
        self.running = running;
        out
    }

    /// Refined residual `R'` in `[0, 1]`, shape `[N, 1, H, W]`.
    pub fn rpm_forward<T: crate::Scalar, E: Exec<T>>(
        &self,
        ex: &mut E,
        p: &[E::Value],
        residual: E::Value,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<E::Value> {
        let x = ex.spatial_dropout(residual, self.config.rpm_dropout_rate, mode, rng)?;
        let mut fused: Option<E::Value> = None;
        for c in &self.rpm_branches {
            let y = Self::conv(ex, p, c, x.clone())?;
            let y = ex.activation(y, Activation::Relu);
            fused = Some(match fused {
                None => y,
                Some(acc) => ex.concat_channels(acc, y)?,
            });
        }
        let fused = fused.expect("at least one dilation");
        let map = Self::conv(ex, p, &self.rpm_fuse, fused)?;
        let smooth = ex.avg_pool_same(map, self.config.pool_window)?;
        Ok(ex.minmax_normalize(smooth))
    }

    /// Foreground probability map, shape `[N, 1, H, W]`, values in `(0, 1)`.
    pub fn scnn_forward<T: crate::Scalar, E: Exec<T>>(
        &self,
        ex: &mut E,
        p: &[E::Value],
        f: E::Value,
        refined: E::Value,
        mode: Mode,
    ) -> Result<E::Value> {
        self.check_input(ex, &f, "scnn_forward (input vs expected channels)")?;
        let rs = ex.shape(&refined);
        if rs.c != 1 {
            return Err(Error::ShapeMismatch {
                op: "scnn_forward (refined residual must have one channel)",
                left: rs,
                right: Shape::new(rs.n, 1, rs.h, rs.w),
            });
        }
        let features = self.run_blocks(&self.scnn, &mut [], ex, p, f, mode)?;
        let joined = ex.concat_channels(features, refined)?;
        let logits = Self::conv(ex, p, &self.scnn_out, joined)?;
        Ok(ex.activation(logits, Activation::Sigmoid))
    }

    /// Full inference pass (infer mode throughout).
    pub fn predict(&self, f: &Tensor) -> Result<Prediction> {
        let mut ex = Eager;
        let p = Eager::bind::<f32>(&self.params);
        let mut running = self.running.clone();
        self.check_input(&ex, f, "predict (input vs expected channels)")?;
        let residual = self.run_blocks(&self.bcnn, &mut running, &mut ex, &p, f.clone(), Mode::Infer)?;
        let background = approx_background(f, &residual)?;
        let mut rng = Rng::new(0);
        let refined = self.rpm_forward(&mut ex, &p, residual.clone(), Mode::Infer, &mut rng)?;
        let probability = self.scnn_forward(&mut ex, &p, f.clone(), refined.clone(), Mode::Infer)?;
        Ok(Prediction {
            residual,
            background,
            refined,
            probability,
        })
    }

    /// Residual map in infer mode without recording a graph.
    pub fn residual(&self, f: &Tensor) -> Result<Tensor> {
        let mut ex = Eager;
        let p = Eager::bind::<f32>(&self.params);
        let mut running = self.running.clone();
        self.check_input(&ex, f, "residual (input vs expected channels)")?;
        self.run_blocks(&self.bcnn, &mut running, &mut ex, &p, f.clone(), Mode::Infer)
    }

    pub(crate) fn running_slice(&self) -> &[RunningStats] {
        &self.running
    }

    pub(crate) fn running_names(&self) -> &[String] {
        &self.running_names
    }

    pub(crate) fn set_running(&mut self, i: usize, stats: RunningStats) {
        self.running[i] = stats;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    fn small() -> Mcrcnn {
        Mcrcnn::build(ModelConfig::reduced(8, 3, 2), &mut Rng::new(1)).unwrap()
    }

    #[test]
    fn default_structure() {
        let plan = layer_plan(&ModelConfig::default());
        let bcnn_convs = plan
            .iter()
            .filter(|s| s.stage == Stage::Bcnn && matches!(s.kind, LayerKind::Conv { .. }))
            .count();
        assert_eq!(bcnn_convs, 17);
        let scnn_convs = plan
            .iter()
            .filter(|s| s.stage == Stage::Scnn && matches!(s.kind, LayerKind::Conv { .. }))
            .count();
        assert_eq!(scnn_convs, 16);
        let out = plan.iter().find(|s| s.name == "scnn.out").unwrap();
        assert!(matches!(out.kind, LayerKind::Conv { cin: 65, cout: 1, .. }));
        let bns: Vec<_> = plan
            .iter()
            .filter(|s| matches!(s.kind, LayerKind::BatchNorm { .. }))
            .map(|s| s.name.as_str())
            .collect();
        assert_eq!(bns, ["bcnn.bn03", "bcnn.bn06", "bcnn.bn09", "bcnn.bn12", "bcnn.bn15"]);
        let ins = plan
            .iter()
            .filter(|s| matches!(s.kind, LayerKind::InstanceNorm { .. }))
            .count();
        assert_eq!(ins, 4);
    }

    #[test]
    fn reduced_model_runs_end_to_end() {
        let mut m = small();
        let f = Tensor::from_fn([1, 3, 32, 32], |[_, c, y, x]| ((c + y * x) % 7) as f32 / 7.0);
        let mut g = Graph::<f32>::new();
        let p = g.bind(m.params());
        let fin = g.input(f.clone());
        let r = m.bcnn_forward(&mut g, &p, fin, Mode::Train).unwrap();
        assert_eq!(g.value(r).shape(), Shape::new(1, 3, 32, 32));
        let pred = m.predict(&f).unwrap();
        assert_eq!(pred.refined.shape(), Shape::new(1, 1, 32, 32));
        assert_eq!(pred.probability.shape(), Shape::new(1, 1, 32, 32));
        assert!(pred.probability.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let (lo, hi) = pred.refined.min_max();
        assert!(lo >= 0.0 && hi <= 1.0);
    }

    #[test]
    fn infer_before_any_training_step_is_rejected() {
        let m = small();
        let f = Tensor::zeros([1, 3, 8, 8]);
        assert!(matches!(m.predict(&f), Err(Error::UninitializedRunningStats(_))));
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let mut m = small();
        let mut g = Graph::<f32>::new();
        let p = g.bind(m.params());
        let f = g.input(Tensor::zeros([1, 1, 8, 8]));
        assert!(m.bcnn_forward(&mut g, &p, f, Mode::Train).is_err());
    }

    #[test]
    fn approx_background_identities() {
        let f = Tensor::from_fn([1, 3, 4, 4], |[_, c, y, x]| (c * 16 + y * 4 + x) as f32 / 48.0);
        assert!(approx_background(&f, &Tensor::zeros(f.shape())).unwrap().bitwise_eq(&f));
        assert!(approx_background(&f, &f).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(approx_background(&f, &Tensor::zeros([1, 3, 4, 5])).is_err());
    }
}
