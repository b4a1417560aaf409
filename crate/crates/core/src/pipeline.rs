//! Dual-stream occupancy model, training loop, evaluation and ablation variants.
//!
//! Each modality runs through its own conv encoder and its own height-sliced
//! fusion block; the two refined volumes are concatenated and decoded into
//! per-voxel class probabilities.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionVariant, DEFAULT_REDUCTION};
use crate::error::{Error, Result};
use crate::losses::{self, LossBreakdown, LossConfig};
use crate::metrics::{argmax_labels, Confusion, MetricsReport};
use crate::params::ModuleParams;
use crate::synth::{self, SceneConfig, SceneSample};
use crate::tape::{Tape, Var};
use crate::tensor::{stack_batch, OccupancyGrid, VoxelTensor};
use crate::vsf::{self, HeightPartition, PartitionSpec, VsfMode, VsfSpec};

pub const CONV_KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub channels: usize,
    pub reduction: usize,
    pub partition: PartitionSpec,
    pub vsf_mode: VsfMode,
    pub attention: AttentionVariant,
    /// Conv layers per modality encoder.
    pub encoder_depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            reduction: DEFAULT_REDUCTION,
            partition: PartitionSpec::Default,
            vsf_mode: VsfMode::Full,
            attention: AttentionVariant::HeightResolved,
            encoder_depth: 2,
        }
    }
}

impl ModelConfig {
    pub fn vsf_spec(&self) -> VsfSpec {
        VsfSpec { channels: self.channels, reduction: self.reduction, attention: self.attention, mode: self.vsf_mode }
    }

    pub fn validate(&self, z: usize) -> Result<HeightPartition> {
        if self.channels == 0 || self.encoder_depth == 0 {
            return Err(Error::Config("model channels and encoder_depth must be positive".into()));
        }
        crate::attention::check_reduction(self.channels, self.reduction)?;
        self.partition.build(z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `learning_rate` to zero over `steps`.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub lr_schedule: LrSchedule,
    /// Evaluate every this many steps (0: only after the last step).
    pub eval_every: usize,
    pub n_train: usize,
    pub n_val: usize,
    /// One run per seed; a seed fixes both initial weights and the data streams.
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 1,
            learning_rate: 0.01,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            lr_schedule: LrSchedule::Cosine,
            eval_every: 0,
            n_train: 16,
            n_val: 8,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let t = step as f64 / self.steps.max(1) as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.n_train == 0 || self.n_val == 0 {
            return Err(Error::Config("batch_size, n_train and n_val must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds list is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub num_classes: usize,
    pub cam_channels: usize,
    pub lidar_channels: usize,
    pub partition: HeightPartition,
    pub params: ModuleParams,
}

const STREAMS: [&str; 2] = ["cam", "lidar"];

impl Model {
    pub fn new(config: &ModelConfig, scene: &SceneConfig, seed: u64) -> Result<Self> {
        scene.validate()?;
        let partition = config.validate(scene.grid[2])?;
        let c = config.channels;
        let mut params = ModuleParams::new(seed);
        for (stream, c_in) in STREAMS.iter().zip([scene.cam_channels, scene.lidar_channels]) {
            for layer in 0..config.encoder_depth {
                let fan = if layer == 0 { c_in } else { c };
                params.init_conv3d(&format!("enc_{stream}.{layer}"), c, fan, CONV_KERNEL)?;
            }
            vsf::init_vsf(&mut params, &format!("vsf_{stream}"), &config.vsf_spec(), partition.len())?;
        }
        params.init_conv3d("head.0", c, 2 * c, CONV_KERNEL)?;
        params.init_conv3d("head.1", scene.num_classes(), c, 1)?;
        Ok(Self {
            config: config.clone(),
            num_classes: scene.num_classes(),
            cam_channels: scene.cam_channels,
            lidar_channels: scene.lidar_channels,
            partition,
            params,
        })
    }

    fn conv(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let w = tape.param(&self.params, &format!("{prefix}.weight"))?;
        let b = tape.param(&self.params, &format!("{prefix}.bias"))?;
        tape.conv3d(x, w, b)
    }

    /// Records the forward pass and returns `[B, K, X, Y, Z]` probabilities.
    pub fn forward(&self, tape: &mut Tape, cam: Var, lidar: Var) -> Result<Var> {
        let spec = self.config.vsf_spec();
        let mut refined = Vec::with_capacity(2);
        for (stream, input) in STREAMS.iter().zip([cam, lidar]) {
            let mut h = input;
            for layer in 0..self.config.encoder_depth {
                h = self.conv(tape, h, &format!("enc_{stream}.{layer}"))?;
                h = tape.relu(h);
            }
            refined.push(vsf::vsf(tape, h, &self.params, &format!("vsf_{stream}"), &spec, &self.partition)?);
        }
        let cat = tape.concat_channels(refined[0], refined[1])?;
        let h = self.conv(tape, cat, "head.0")?;
        let h = tape.relu(h);
        let logits = self.conv(tape, h, "head.1")?;
        tape.softmax_channels(logits)
    }

    pub fn predict(&self, cam: &VoxelTensor, lidar: &VoxelTensor) -> Result<VoxelTensor> {
        let mut tape = Tape::new();
        let c = tape.constant(cam);
        let l = tape.constant(lidar);
        let p = self.forward(&mut tape, c, l)?;
        tape.to_voxel(p)
    }

    /// Checkpoint metadata sufficient to rebuild the model around stored weights.
    pub fn metadata(&self, scene: &SceneConfig) -> serde_json::Value {
        serde_json::json!({ "model": self.config, "scene": scene })
    }

    pub fn from_checkpoint(params: ModuleParams, metadata: &serde_json::Value) -> Result<(Self, SceneConfig)> {
        let bad = |e: serde_json::Error| Error::Format(format!("checkpoint metadata: {e}"));
        let config: ModelConfig = serde_json::from_value(metadata["model"].clone()).map_err(bad)?;
        let scene: SceneConfig = serde_json::from_value(metadata["scene"].clone()).map_err(bad)?;
        let mut model = Model::new(&config, &scene, params.rng_seed)?;
        let expected: Vec<&str> = model.params.names().collect();
        let got: Vec<&str> = params.names().collect();
        if expected != got {
            return Err(Error::Format(format!("checkpoint parameters {got:?} do not match model {expected:?}")));
        }
        for (name, p) in params.iter() {
            if model.params.get(name)?.shape != p.shape {
                return Err(Error::shape("checkpoint", &model.params.get(name)?.shape, &p.shape));
            }
        }
        model.params = params;
        Ok((model, scene))
    }
}

/// Optimiser with per-parameter state keyed like the parameters.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    momentum: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, momentum: f64, params: &ModuleParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
        Self { kind, lr, momentum, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn apply(&mut self, params: &mut ModuleParams) {
        self.step += 1;
        let t = self.step as i32;
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            match self.kind {
                OptimizerKind::Sgd => {
                    for (x, g) in p.values.iter_mut().zip(&p.grad) {
                        *x -= self.lr * g;
                    }
                }
                OptimizerKind::Momentum => {
                    for ((x, g), mi) in p.values.iter_mut().zip(&p.grad).zip(m.iter_mut()) {
                        *mi = self.momentum * *mi + g;
                        *x -= self.lr * *mi;
                    }
                }
                OptimizerKind::Adam => {
                    let c1 = 1.0 - ADAM_BETA1.powi(t);
                    let c2 = 1.0 - ADAM_BETA2.powi(t);
                    for (((x, g), mi), vi) in p.values.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
                        *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
                        *x -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

/// Loss of one batch plus gradients written into `model.params`.
pub fn loss_and_grad(
    model: &mut Model,
    batch: &[&SceneSample],
    loss_cfg: &LossConfig,
    alpha: &[f64],
) -> Result<LossBreakdown> {
    let cam = stack_batch(&batch.iter().map(|s| &s.feat_cam).collect::<Vec<_>>())?;
    let lidar = stack_batch(&batch.iter().map(|s| &s.feat_lidar).collect::<Vec<_>>())?;
    let gt = OccupancyGrid::stack(&batch.iter().map(|s| &s.gt).collect::<Vec<_>>())?;
    let mut tape = Tape::new();
    let c = tape.constant(&cam);
    let l = tape.constant(&lidar);
    let probs = model.forward(&mut tape, c, l)?;
    let (loss, breakdown) = losses::total_loss_on_tape(&mut tape, probs, &gt, loss_cfg, alpha)?;
    model.params.zero_grads();
    if breakdown.total.is_finite() {
        tape.backward(loss)?;
        tape.accumulate_param_grads(&mut model.params)?;
    }
    Ok(breakdown)
}

pub fn evaluate(model: &Model, samples: &[SceneSample]) -> Result<MetricsReport> {
    let mut conf = Confusion::new(model.num_classes);
    for s in samples {
        let probs = model.predict(&s.feat_cam, &s.feat_lidar)?;
        conf.add(&argmax_labels(&probs)?, &s.gt)?;
    }
    Ok(conf.report())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub miou: Option<f64>,
    pub geo_iou: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub losses: Vec<TracePoint>,
    pub evals: Vec<EvalPoint>,
    pub report: MetricsReport,
    pub seed: u64,
}

/// Number of trailing steps averaged into [`TrainOutcome::loss_final`].
pub const FINAL_LOSS_WINDOW: usize = 10;

impl TrainOutcome {
    pub fn loss_initial(&self) -> Option<f64> {
        self.losses.first().map(|t| t.loss.total)
    }

    pub fn loss_final(&self) -> Option<f64> {
        let n = self.losses.len().min(FINAL_LOSS_WINDOW);
        (n > 0).then(|| self.losses[self.losses.len() - n..].iter().map(|t| t.loss.total).sum::<f64>() / n as f64)
    }
}

/// Train and validation scenes for one seed.
pub fn load_data(scene: &SceneConfig, train: &TrainConfig, seed: u64) -> Result<(Vec<SceneSample>, Vec<SceneSample>)> {
    let (tr, va) = synth::dataset(scene, train.n_train, train.n_val, seed)?;
    Ok((tr.iter().collect::<Result<_>>()?, va.iter().collect::<Result<_>>()?))
}

/// Trains a fresh model for `seed` on prepared data.
pub fn train_on(
    model_cfg: &ModelConfig,
    scene: &SceneConfig,
    train: &TrainConfig,
    loss_cfg: &LossConfig,
    seed: u64,
    train_set: &[SceneSample],
    val_set: &[SceneSample],
) -> Result<TrainOutcome> {
    train.validate()?;
    loss_cfg.validate()?;
    let mut model = Model::new(model_cfg, scene, seed)?;
    let k = model.num_classes;
    let alpha =
        losses::class_weights(&train_set.iter().map(|s| &s.gt).collect::<Vec<_>>(), k, loss_cfg.class_weighting)?;
    let mut opt = Optimizer::new(train.optimizer, train.learning_rate, train.momentum, &model.params);
    let mut losses_trace = Vec::with_capacity(train.steps);
    let mut evals = Vec::new();
    for step in 0..train.steps {
        let batch: Vec<&SceneSample> =
            (0..train.batch_size).map(|j| &train_set[(step * train.batch_size + j) % train_set.len()]).collect();
        let loss = loss_and_grad(&mut model, &batch, loss_cfg, &alpha)?;
        if !loss.total.is_finite() {
            return Err(Error::Divergence { step });
        }
        losses_trace.push(TracePoint { step, loss });
        opt.lr = train.lr_at(step);
        opt.apply(&mut model.params);
        // clamped losses can stay finite after the weights overflow
        if model.params.iter().any(|(_, p)| p.values.iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence { step });
        }
        if train.eval_every > 0 && (step + 1) % train.eval_every == 0 && step + 1 < train.steps {
            let r = evaluate(&model, val_set)?;
            evals.push(EvalPoint { step: step + 1, miou: r.miou, geo_iou: r.geo_iou });
        }
    }
    let report = evaluate(&model, val_set)?;
    evals.push(EvalPoint { step: train.steps, miou: report.miou, geo_iou: report.geo_iou });
    Ok(TrainOutcome { model, losses: losses_trace, evals, report, seed })
}

pub fn train(
    model_cfg: &ModelConfig,
    scene: &SceneConfig,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let (tr, va) = load_data(scene, train_cfg, seed)?;
    train_on(model_cfg, scene, train_cfg, loss_cfg, seed, &tr, &va)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Slices,
    Strategy,
    Attention,
    Fusion,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slices" => Ok(Suite::Slices),
            "strategy" => Ok(Suite::Strategy),
            "attention" => Ok(Suite::Attention),
            "fusion" => Ok(Suite::Fusion),
            other => Err(Error::Config(format!(
                "unknown ablation suite '{other}' (expected slices, strategy, attention or fusion)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub model: ModelConfig,
}

pub fn suite_variants(suite: Suite, base: &ModelConfig) -> Vec<Variant> {
    let with = |name: &str, f: &dyn Fn(&mut ModelConfig)| {
        let mut m = base.clone();
        f(&mut m);
        Variant { name: name.to_string(), model: m }
    };
    match suite {
        Suite::Slices => [VsfMode::None, VsfMode::LocalOnly, VsfMode::GlobalOnly, VsfMode::Full]
            .into_iter()
            .map(|mode| with(mode.name(), &|m| m.vsf_mode = mode))
            .collect(),
        Suite::Strategy => vec![
            with("uniform-8", &|m| {
                m.vsf_mode = VsfMode::Full;
                m.partition = PartitionSpec::Uniform { slices: 8 };
            }),
            with("uniform-4", &|m| {
                m.vsf_mode = VsfMode::Full;
                m.partition = PartitionSpec::Uniform { slices: 4 };
            }),
            with("default-6", &|m| {
                m.vsf_mode = VsfMode::Full;
                m.partition = PartitionSpec::Default;
            }),
        ],
        Suite::Attention => [AttentionVariant::Global, AttentionVariant::HeightResolved]
            .into_iter()
            .map(|a| with(&a.to_string(), &|m| m.attention = a))
            .collect(),
        Suite::Fusion => [VsfMode::ConcatFusion, VsfMode::Full]
            .into_iter()
            .map(|mode| with(mode.name(), &|m| m.vsf_mode = mode))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub miou: Option<f64>,
    pub geo_iou: f64,
    pub loss_final: Option<f64>,
}

pub fn ablation_row(variant: &str, outcome: &TrainOutcome) -> AblationRow {
    AblationRow {
        variant: variant.to_string(),
        seed: outcome.seed,
        miou: outcome.report.miou,
        geo_iou: outcome.report.geo_iou,
        loss_final: outcome.loss_final(),
    }
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,seed,miou,geo_iou,loss_final\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{}\n",
            r.variant,
            r.seed,
            opt_cell(r.miou),
            r.geo_iou,
            opt_cell(r.loss_final)
        ));
    }
    out
}

/// Mean mIoU per variant, in first-appearance order.
pub fn variant_means(rows: &[AblationRow]) -> Vec<(String, f64)> {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.variant.as_str()) {
            names.push(&r.variant);
        }
    }
    names
        .into_iter()
        .map(|n| {
            let vals: Vec<f64> = rows.iter().filter(|r| r.variant == n).map(|r| r.miou.unwrap_or(0.0)).collect();
            (n.to_string(), vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect()
}

/// Runs every variant of `suite` for every seed, sequentially.
pub fn ablate(
    suite: Suite,
    base: &ModelConfig,
    scene: &SceneConfig,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<Vec<AblationRow>> {
    let variants = suite_variants(suite, base);
    let mut rows = Vec::new();
    for &seed in &train_cfg.seeds {
        let (tr, va) = load_data(scene, train_cfg, seed)?;
        for v in &variants {
            let out = train_on(&v.model, scene, train_cfg, loss_cfg, seed, &tr, &va)?;
            rows.push(ablation_row(&v.name, &out));
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_scene() -> SceneConfig {
        SceneConfig { cam_channels: 4, lidar_channels: 4, ..SceneConfig::scaled_to(6, 6) }
    }

    fn tiny_model(mode: VsfMode) -> ModelConfig {
        ModelConfig { channels: 4, reduction: 2, vsf_mode: mode, ..ModelConfig::default() }
    }

    #[test]
    fn forward_gives_distributions() {
        let scene = tiny_scene();
        let m = Model::new(&tiny_model(VsfMode::Full), &scene, 1).unwrap();
        let s = synth::generate(&scene, 2).unwrap();
        let p = m.predict(&s.feat_cam, &s.feat_lidar).unwrap();
        assert_eq!(p.dims(), [1, 7, 6, 6, 16]);
        let vol = 6 * 6 * 16;
        for v in 0..vol {
            let sum: f64 = (0..7).map(|c| p.data()[c * vol + v]).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_steps_keep_initial_params() {
        let scene = tiny_scene();
        let cfg = TrainConfig { steps: 0, n_train: 1, n_val: 1, ..TrainConfig::default() };
        let out = train(&tiny_model(VsfMode::Full), &scene, &cfg, &LossConfig::default(), 3).unwrap();
        assert_eq!(out.model.params, Model::new(&tiny_model(VsfMode::Full), &scene, 3).unwrap().params);
        assert!(out.loss_final().is_none());
        let miou = out.report.miou.unwrap();
        assert!((0.0..=1.0).contains(&miou));
    }

    #[test]
    fn variants_share_common_initial_weights() {
        let scene = tiny_scene();
        let ms: Vec<Model> = suite_variants(Suite::Slices, &tiny_model(VsfMode::Full))
            .iter()
            .map(|v| Model::new(&v.model, &scene, 5).unwrap())
            .collect();
        for a in &ms {
            for b in &ms {
                for (name, p) in a.params.iter() {
                    if b.params.contains(name) {
                        assert_eq!(p, b.params.get(name).unwrap(), "{name}");
                    }
                }
            }
        }
        assert!(ms[0].params.len() < ms[3].params.len());
    }

    #[test]
    fn suite_sizes() {
        let base = ModelConfig::default();
        assert_eq!(suite_variants(Suite::Slices, &base).len(), 4);
        let names: Vec<String> = suite_variants(Suite::Strategy, &base).into_iter().map(|v| v.name).collect();
        assert_eq!(names, ["uniform-8", "uniform-4", "default-6"]);
        assert_eq!(suite_variants(Suite::Attention, &base).len(), 2);
        assert_eq!(suite_variants(Suite::Fusion, &base).len(), 2);
        assert!("bogus".parse::<Suite>().is_err());
    }

    #[test]
    fn optimizers_move_against_gradient() {
        let mut p = ModuleParams::new(0);
        p.insert("w", crate::params::Param::new(vec![2], vec![1.0, -1.0]).unwrap()).unwrap();
        for kind in [OptimizerKind::Sgd, OptimizerKind::Momentum, OptimizerKind::Adam] {
            let mut q = p.clone();
            q.get_mut("w").unwrap().grad = vec![0.5, -0.5];
            Optimizer::new(kind, 0.1, 0.9, &q).apply(&mut q);
            let w = &q.get("w").unwrap().values;
            assert!(w[0] < 1.0 && w[1] > -1.0, "{kind:?}: {w:?}");
        }
    }

    #[test]
    fn checkpoint_metadata_rebuilds_model() {
        let scene = tiny_scene();
        let m = Model::new(&tiny_model(VsfMode::GlobalOnly), &scene, 8).unwrap();
        let (back, sc) = Model::from_checkpoint(m.params.clone(), &m.metadata(&scene)).unwrap();
        assert_eq!(back, m);
        assert_eq!(sc, scene);
        let other = Model::new(&tiny_model(VsfMode::Full), &scene, 8).unwrap();
        assert!(Model::from_checkpoint(other.params, &m.metadata(&scene)).is_err());
    }
}
