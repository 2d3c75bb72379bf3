//! Residual graph-convolution network over skeleton sequences.
//!
//! ```text
//! input [B, 2, T, V]
//!   -> batch norm
//!   -> blocks (basic / bottleneck), each spatial graph conv + temporal conv
//!   -> global average pool -> linear -> L2 normalise   (embedding)
//!   -> linear                                           (class logits)
//! ```
//!
//! The spatial graph convolution sums one branch per scale `k = 0..=K`:
//! `Σ_k Op_k X Θ_k`, where `Op_k` is the normalised hop-extracted adjacency
//! `D_k^-1/2 Ã_k D_k^-1/2` or, for ablation, the polynomial `Â^k`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::PoseSequence;
use crate::graph::{self, HopAdjacencySet, Matrix, SkeletonGraph};
use crate::nnkernel::{BatchStats, NormMode, ParamStore, Tape, Tensor, Var};
use crate::{rng, Error, Result};

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    HopExtracted,
    Polynomial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default = "default_temporal_kernel")]
    pub temporal_kernel: usize,
    #[serde(default = "one")]
    pub temporal_stride: usize,
    #[serde(default = "yes")]
    pub residual: bool,
    #[serde(default = "default_reduction")]
    pub bottleneck_reduction: usize,
}

fn default_temporal_kernel() -> usize {
    9
}
fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn default_reduction() -> usize {
    4
}

impl BlockSpec {
    pub fn basic(in_channels: usize, out_channels: usize, residual: bool) -> Self {
        Self {
            kind: BlockKind::Basic,
            in_channels,
            out_channels,
            temporal_kernel: 9,
            temporal_stride: 1,
            residual,
            bottleneck_reduction: 1,
        }
    }

    pub fn bottleneck(in_channels: usize, out_channels: usize, stride: usize, reduction: usize) -> Self {
        Self {
            kind: BlockKind::Bottleneck,
            in_channels,
            out_channels,
            temporal_kernel: 9,
            temporal_stride: stride,
            residual: true,
            bottleneck_reduction: reduction,
        }
    }

    fn needs_projection(&self) -> bool {
        self.in_channels != self.out_channels || self.temporal_stride != 1
    }

    fn inner_channels(&self) -> usize {
        self.out_channels / self.bottleneck_reduction
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Largest hop scale `K`.
    pub max_scale: usize,
    pub input_channels: usize,
    pub num_frames: usize,
    pub num_vertices: usize,
    pub blocks: Vec<BlockSpec>,
    pub embedding_dim: usize,
    pub aggregation_mode: AggregationMode,
    /// Width of the classification readout; 0 means "set from the training
    /// subjects".
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            max_scale: 3,
            input_channels: 2,
            num_frames: 60,
            num_vertices: 17,
            blocks: vec![
                BlockSpec::basic(2, 64, false),
                BlockSpec::basic(64, 64, true),
                BlockSpec::bottleneck(64, 128, 2, 4),
                BlockSpec::bottleneck(128, 256, 2, 4),
            ],
            embedding_dim: 128,
            aggregation_mode: AggregationMode::HopExtracted,
            num_classes: 0,
        }
    }
}

impl ModelConfig {
    /// A small network for desk-scale experiments and tests.
    pub fn tiny() -> Self {
        Self {
            blocks: vec![
                BlockSpec::basic(2, 16, false),
                BlockSpec::basic(16, 16, true),
                BlockSpec::bottleneck(16, 32, 2, 2),
            ],
            embedding_dim: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.max_scale < 1 {
            return bad("max_scale must be at least 1".into());
        }
        if self.blocks.is_empty() {
            return bad("at least one block is required".into());
        }
        if self.input_channels == 0 || self.num_frames == 0 || self.num_vertices == 0 || self.embedding_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        let mut channels = self.input_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.in_channels != channels {
                return bad(format!(
                    "block {i} expects {} input channels but receives {channels}",
                    b.in_channels
                ));
            }
            if b.out_channels == 0 || b.temporal_stride == 0 {
                return bad(format!("block {i}: channels and stride must be positive"));
            }
            if b.temporal_kernel % 2 == 0 {
                return bad(format!("block {i}: temporal kernel must be odd"));
            }
            if b.kind == BlockKind::Bottleneck
                && (b.bottleneck_reduction == 0 || b.out_channels % b.bottleneck_reduction != 0)
            {
                return bad(format!(
                    "block {i}: reduction {} must divide {} output channels",
                    b.bottleneck_reduction, b.out_channels
                ));
            }
            channels = b.out_channels;
        }
        Ok(())
    }

    /// Channels entering the pooling layer.
    pub fn final_channels(&self) -> usize {
        self.blocks.last().map_or(self.input_channels, |b| b.out_channels)
    }
}

/// Aggregation operators `[Op_0, ..., Op_K]` for a graph.
pub fn aggregation_operators(graph: &SkeletonGraph, max_scale: usize, mode: AggregationMode) -> Vec<Matrix> {
    match mode {
        AggregationMode::HopExtracted => HopAdjacencySet::new(graph, max_scale).normalized(),
        AggregationMode::Polynomial => {
            let a = graph::normalized_adjacency(graph);
            let mut ops = vec![Matrix::identity(graph.num_vertices())];
            for k in 1..=max_scale {
                ops.push(ops[k - 1].matmul(&a));
            }
            ops
        }
    }
}

fn matrix_tensor(m: &Matrix) -> Tensor {
    Tensor::new(vec![m.size(), m.size()], m.as_slice().to_vec()).expect("square matrix")
}

/// `Σ_k Op_k · x · Θ_k`, identically for every frame. No activation.
/// `thetas[k]` has shape `[C_out, C_in, 1, 1]`.
pub fn spatial_gcn(tape: &mut Tape, x: Var, operators: &[Var], thetas: &[Var]) -> Result<Var> {
    if operators.len() != thetas.len() || operators.is_empty() {
        return Err(Error::shape(
            "spatial_gcn",
            format!("{} operators but {} weight matrices", operators.len(), thetas.len()),
        ));
    }
    let mut acc: Option<Var> = None;
    for (&op, &theta) in operators.iter().zip(thetas) {
        let mixed = tape.vertex_mix(op, x)?;
        let branch = tape.temporal_conv(mixed, theta, 1)?;
        acc = Some(match acc {
            None => branch,
            Some(a) => tape.add(a, branch)?,
        });
    }
    Ok(acc.expect("non-empty"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct ForwardOutput {
    /// Unit-norm embeddings `[B, D]`.
    pub embedding: Var,
    /// Class logits `[B, num_classes]`, when the readout exists.
    pub logits: Option<Var>,
    /// Batch statistics per batch-norm layer prefix (train mode only).
    pub stats: Vec<(String, BatchStats)>,
}

/// The network: a config plus its fixed aggregation operators.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    operators: Vec<Tensor>,
}

struct Ctx<'a> {
    params: &'a ParamStore,
    mode: Mode,
    operators: Vec<Var>,
    stats: Vec<(String, BatchStats)>,
}

impl Model {
    pub fn new(config: ModelConfig, graph: &SkeletonGraph) -> Result<Self> {
        config.validate()?;
        if graph.num_vertices() != config.num_vertices {
            return Err(Error::Config(format!(
                "graph has {} vertices, model expects {}",
                graph.num_vertices(),
                config.num_vertices
            )));
        }
        let operators = aggregation_operators(graph, config.max_scale, config.aggregation_mode)
            .iter()
            .map(matrix_tensor)
            .collect();
        Ok(Self { config, operators })
    }

    /// Model on the COCO skeleton.
    pub fn coco(config: ModelConfig) -> Result<Self> {
        Self::new(config, &SkeletonGraph::coco())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Deterministic initialisation from `seed`.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut r = rng::derived(seed, &[0x1417]);
        let mut p = ParamStore::new();
        let cfg = &self.config;
        let kaiming = |r: &mut rng::Rng, shape: &[usize], fan_in: usize, gain: f64| {
            let bound = gain * (6.0 / fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| r.random_range(-bound..bound))
        };
        add_bn(&mut p, "input_bn", cfg.input_channels);
        let scales = cfg.max_scale + 1;
        let branch_gain = 1.0 / (scales as f64).sqrt();
        let gcn = |p: &mut ParamStore, r: &mut rng::Rng, prefix: &str, cin: usize, cout: usize| {
            for k in 0..scales {
                p.insert(format!("{prefix}.gcn.theta.k{k}"), kaiming(r, &[cout, cin, 1, 1], cin, branch_gain));
            }
            add_bn(p, &format!("{prefix}.gcn_bn"), cout);
        };
        for (i, b) in cfg.blocks.iter().enumerate() {
            let prefix = format!("block{i}");
            let t = b.temporal_kernel;
            match b.kind {
                BlockKind::Basic => {
                    gcn(&mut p, &mut r, &prefix, b.in_channels, b.out_channels);
                    let c = b.out_channels;
                    p.insert(format!("{prefix}.tcn.weight"), kaiming(&mut r, &[c, c, t, 1], c * t, 1.0));
                    add_bn(&mut p, &format!("{prefix}.tcn_bn"), c);
                }
                BlockKind::Bottleneck => {
                    let inner = b.inner_channels();
                    p.insert(
                        format!("{prefix}.reduce.weight"),
                        kaiming(&mut r, &[inner, b.in_channels, 1, 1], b.in_channels, 1.0),
                    );
                    add_bn(&mut p, &format!("{prefix}.reduce_bn"), inner);
                    gcn(&mut p, &mut r, &prefix, inner, inner);
                    p.insert(format!("{prefix}.tcn.weight"), kaiming(&mut r, &[inner, inner, t, 1], inner * t, 1.0));
                    add_bn(&mut p, &format!("{prefix}.tcn_bn"), inner);
                    p.insert(
                        format!("{prefix}.expand.weight"),
                        kaiming(&mut r, &[b.out_channels, inner, 1, 1], inner, 1.0),
                    );
                    add_bn(&mut p, &format!("{prefix}.expand_bn"), b.out_channels);
                }
            }
            if b.residual && b.needs_projection() {
                p.insert(
                    format!("{prefix}.residual.weight"),
                    kaiming(&mut r, &[b.out_channels, b.in_channels, 1, 1], b.in_channels, 1.0),
                );
                add_bn(&mut p, &format!("{prefix}.residual_bn"), b.out_channels);
            }
        }
        let c = cfg.final_channels();
        let d = cfg.embedding_dim;
        let lin = |r: &mut rng::Rng, shape: &[usize], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| r.random_range(-bound..bound))
        };
        p.insert("embed.weight", lin(&mut r, &[d, c], c));
        p.insert("embed.bias", lin(&mut r, &[d], c));
        if cfg.num_classes > 0 {
            p.insert("classifier.weight", lin(&mut r, &[cfg.num_classes, d], d));
            p.insert("classifier.bias", lin(&mut r, &[cfg.num_classes], d));
        }
        p
    }

    /// Runs the network on `input [B, C, T, V]`.
    pub fn forward(&self, tape: &mut Tape, params: &ParamStore, input: Var, mode: Mode) -> Result<ForwardOutput> {
        let shape = tape.value(input).shape().to_vec();
        let cfg = &self.config;
        if shape.len() != 4 || shape[1] != cfg.input_channels || shape[3] != cfg.num_vertices {
            return Err(Error::shape(
                "model forward",
                format!(
                    "input {shape:?}, expected [B, {}, T, {}]",
                    cfg.input_channels, cfg.num_vertices
                ),
            ));
        }
        let operators = self.operators.iter().map(|t| tape.constant(t.clone())).collect();
        let mut ctx = Ctx {
            params,
            mode,
            operators,
            stats: Vec::new(),
        };
        let mut x = ctx.bn(tape, "input_bn", input)?;
        for (i, spec) in cfg.blocks.iter().enumerate() {
            x = block(tape, &mut ctx, &format!("block{i}"), spec, x)?;
        }
        let pooled = tape.global_avg_pool(x)?;
        let w = tape.param(params, "embed.weight")?;
        let b = tape.param(params, "embed.bias")?;
        let raw = tape.linear(pooled, w, b)?;
        let embedding = tape.l2_normalize(raw)?;
        let logits = if params.get("classifier.weight").is_some() {
            let w = tape.param(params, "classifier.weight")?;
            let b = tape.param(params, "classifier.bias")?;
            Some(tape.linear(embedding, w, b)?)
        } else {
            None
        };
        Ok(ForwardOutput {
            embedding,
            logits,
            stats: ctx.stats,
        })
    }

    /// Eval-mode embeddings for a batch of equal-length sequences.
    pub fn embed(&self, params: &ParamStore, batch: Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(batch);
        let out = self.forward(&mut tape, params, x, Mode::Eval)?;
        Ok(tape.value(out.embedding).clone())
    }
}

/// Blends train-mode batch statistics into the running buffers.
pub fn update_running_stats(params: &mut ParamStore, stats: &[(String, BatchStats)], momentum: f64) {
    for (prefix, s) in stats {
        let unbias = if s.count > 1 {
            s.count as f64 / (s.count - 1) as f64
        } else {
            1.0
        };
        if let Some(m) = params.buffer_mut(&format!("{prefix}.running_mean")) {
            for (r, b) in m.data_mut().iter_mut().zip(&s.mean) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
        if let Some(v) = params.buffer_mut(&format!("{prefix}.running_var")) {
            for (r, b) in v.data_mut().iter_mut().zip(&s.var) {
                *r = (1.0 - momentum) * *r + momentum * b * unbias;
            }
        }
    }
}

fn add_bn(p: &mut ParamStore, prefix: &str, c: usize) {
    p.insert(format!("{prefix}.gamma"), Tensor::filled(&[c], 1.0));
    p.insert(format!("{prefix}.beta"), Tensor::zeros(&[c]));
    p.insert_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[c]));
    p.insert_buffer(format!("{prefix}.running_var"), Tensor::filled(&[c], 1.0));
}

impl Ctx<'_> {
    fn bn(&mut self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let gamma = tape.param(self.params, &format!("{prefix}.gamma"))?;
        let beta = tape.param(self.params, &format!("{prefix}.beta"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm(x, gamma, beta, NormMode::Train)?;
                self.stats.push((prefix.to_string(), stats.expect("train mode")));
                Ok(y)
            }
            Mode::Eval => {
                let buf = |name: &str| {
                    self.params
                        .buffer(&format!("{prefix}.{name}"))
                        .ok_or_else(|| Error::Config(format!("missing buffer {prefix}.{name}")))
                };
                let (mean, var) = (buf("running_mean")?, buf("running_var")?);
                let mode = NormMode::Eval {
                    mean: mean.data(),
                    var: var.data(),
                };
                Ok(tape.batch_norm(x, gamma, beta, mode)?.0)
            }
        }
    }

    fn gcn(&mut self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let thetas = (0..self.operators.len())
            .map(|k| tape.param(self.params, &format!("{prefix}.gcn.theta.k{k}")))
            .collect::<Result<Vec<_>>>()?;
        spatial_gcn(tape, x, &self.operators, &thetas)
    }

    fn conv_bn(&mut self, tape: &mut Tape, prefix: &str, layer: &str, x: Var, stride: usize) -> Result<Var> {
        let w = tape.param(self.params, &format!("{prefix}.{layer}.weight"))?;
        let y = tape.temporal_conv(x, w, stride)?;
        self.bn(tape, &format!("{prefix}.{layer}_bn"), y)
    }
}

/// Block output before the final ReLU, and the residual branch if any.
fn block_preactivation(
    tape: &mut Tape,
    ctx: &mut Ctx<'_>,
    prefix: &str,
    spec: &BlockSpec,
    x: Var,
) -> Result<(Var, Option<Var>)> {
    let main = match spec.kind {
        BlockKind::Basic => {
            let g = ctx.gcn(tape, prefix, x)?;
            let g = ctx.bn(tape, &format!("{prefix}.gcn_bn"), g)?;
            let g = tape.relu(g)?;
            ctx.conv_bn(tape, prefix, "tcn", g, spec.temporal_stride)?
        }
        BlockKind::Bottleneck => {
            let h = ctx.conv_bn(tape, prefix, "reduce", x, 1)?;
            let h = tape.relu(h)?;
            let h = ctx.gcn(tape, prefix, h)?;
            let h = ctx.bn(tape, &format!("{prefix}.gcn_bn"), h)?;
            let h = tape.relu(h)?;
            let h = ctx.conv_bn(tape, prefix, "tcn", h, spec.temporal_stride)?;
            let h = tape.relu(h)?;
            ctx.conv_bn(tape, prefix, "expand", h, 1)?
        }
    };
    if !spec.residual {
        return Ok((main, None));
    }
    let res = if spec.needs_projection() {
        ctx.conv_bn(tape, prefix, "residual", x, spec.temporal_stride)?
    } else {
        x
    };
    Ok((tape.add(main, res)?, Some(res)))
}

fn block(tape: &mut Tape, ctx: &mut Ctx<'_>, prefix: &str, spec: &BlockSpec, x: Var) -> Result<Var> {
    let (pre, _) = block_preactivation(tape, ctx, prefix, spec, x)?;
    tape.relu(pre)
}

/// Stacks equal-length sequences into `[B, 2, T, V]` (x and y channels).
pub fn batch_tensor(seqs: &[&PoseSequence]) -> Result<Tensor> {
    let b = seqs.len();
    let t = seqs.first().map_or(0, |s| s.len());
    if b == 0 || t == 0 {
        return Err(Error::shape("batch_tensor", "empty batch"));
    }
    if let Some(s) = seqs.iter().find(|s| s.len() != t) {
        return Err(Error::shape(
            "batch_tensor",
            format!("{} has {} frames, expected {t}", s.label(), s.len()),
        ));
    }
    let v = graph::COCO_NUM_JOINTS;
    let mut data = vec![0.0; b * 2 * t * v];
    for (bi, s) in seqs.iter().enumerate() {
        for (ti, f) in s.frames.iter().enumerate() {
            for (j, k) in f.keypoints.iter().enumerate() {
                data[((bi * 2) * t + ti) * v + j] = k.x;
                data[((bi * 2 + 1) * t + ti) * v + j] = k.y;
            }
        }
    }
    Tensor::new(vec![b, 2, t, v], data)
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// Runs one block in isolation and returns (pre-activation, residual,
    /// output) values.
    pub fn run_block(
        model: &Model,
        params: &ParamStore,
        index: usize,
        input: Tensor,
        mode: Mode,
    ) -> (Tensor, Option<Tensor>, Tensor) {
        let mut tape = Tape::new();
        let x = tape.constant(input);
        let operators = model.operators.iter().map(|t| tape.constant(t.clone())).collect();
        let mut ctx = Ctx {
            params,
            mode,
            operators,
            stats: Vec::new(),
        };
        let spec = &model.config.blocks[index];
        let prefix = format!("block{index}");
        let (pre, res) = block_preactivation(&mut tape, &mut ctx, &prefix, spec, x).unwrap();
        let out = tape.relu(pre).unwrap();
        (
            tape.value(pre).clone(),
            res.map(|r| tape.value(r).clone()),
            tape.value(out).clone(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::run_block;
    use super::*;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            num_frames: 8,
            blocks: vec![
                BlockSpec {
                    temporal_kernel: 3,
                    ..BlockSpec::basic(2, 4, false)
                },
                BlockSpec {
                    temporal_kernel: 3,
                    ..BlockSpec::basic(4, 6, true)
                },
                BlockSpec {
                    temporal_kernel: 3,
                    ..BlockSpec::bottleneck(6, 8, 2, 2)
                },
            ],
            embedding_dim: 5,
            num_classes: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        let mut c = ModelConfig::tiny();
        c.blocks[1].in_channels = 7;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.blocks[2].bottleneck_reduction = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.blocks[0].temporal_kernel = 4;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.max_scale = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let c = small_config();
        let text = serde_json::to_string(&c).unwrap();
        assert!(text.contains("\"hop_extracted\""));
        let back: ModelConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn default_parameter_count_is_stable() {
        let model = Model::coco(ModelConfig::default()).unwrap();
        let p = model.init_params(0);
        assert_eq!(p.num_scalars(), DEFAULT_PARAM_COUNT);
        assert_eq!(p, model.init_params(0));
        assert_ne!(p, model.init_params(1));
    }

    // Frozen from a hand count of ModelConfig::default() (see test below).
    const DEFAULT_PARAM_COUNT: usize = 264_388;

    #[test]
    fn default_parameter_count_by_hand() {
        let bn = |c: usize| 2 * c;
        let scales = 4;
        let basic = |cin: usize, cout: usize, proj: bool| {
            scales * cin * cout + bn(cout) + cout * cout * 9 + bn(cout) + if proj { cin * cout + bn(cout) } else { 0 }
        };
        let bottleneck = |cin: usize, cout: usize, red: usize| {
            let i = cout / red;
            cin * i + bn(i) + scales * i * i + bn(i) + i * i * 9 + bn(i) + i * cout + bn(cout) + cin * cout + bn(cout)
        };
        let total = bn(2)
            + basic(2, 64, false)
            + basic(64, 64, false)
            + bottleneck(64, 128, 4)
            + bottleneck(128, 256, 4)
            + 256 * 128
            + 128;
        assert_eq!(total, DEFAULT_PARAM_COUNT);
    }

    #[test]
    fn spatial_gcn_identity_case() {
        let x = random(&[2, 3, 4, 17], 1);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let op = tape.constant(matrix_tensor(&Matrix::identity(17)));
        let eye = Tensor::from_fn(&[3, 3, 1, 1], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let th = tape.constant(eye);
        let y = spatial_gcn(&mut tape, xv, &[op], &[th]).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn spatial_gcn_matches_dense_products() {
        // one frame, K = 1: out_f = Σ_k Op_k X Θ_k with X as [V, C_in]
        let g = SkeletonGraph::coco();
        let ops = aggregation_operators(&g, 1, AggregationMode::HopExtracted);
        let (cin, cout) = (3, 2);
        let x = random(&[1, cin, 1, 17], 2);
        let thetas: Vec<Tensor> = (0..2).map(|k| random(&[cout, cin, 1, 1], 10 + k)).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let opv: Vec<Var> = ops.iter().map(|m| tape.constant(matrix_tensor(m))).collect();
        let thv: Vec<Var> = thetas.iter().map(|t| tape.constant(t.clone())).collect();
        let y = spatial_gcn(&mut tape, xv, &opv, &thv).unwrap();
        let got = tape.value(y);
        for i in 0..17 {
            for o in 0..cout {
                let mut expect = 0.0;
                for (m, th) in ops.iter().zip(&thetas) {
                    for j in 0..17 {
                        for c in 0..cin {
                            expect += m.get(i, j) * x.data()[c * 17 + j] * th.data()[o * cin + c];
                        }
                    }
                }
                assert!((got.data()[o * 17 + i] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn hop_and_polynomial_agree_at_scale_one() {
        let g = SkeletonGraph::coco();
        let hop = aggregation_operators(&g, 1, AggregationMode::HopExtracted);
        let poly = aggregation_operators(&g, 1, AggregationMode::Polynomial);
        for (a, b) in hop.iter().zip(&poly) {
            assert!(a.max_abs_diff(b) < 1e-15);
        }
    }

    #[test]
    fn block_shapes() {
        let model = Model::coco(small_config()).unwrap();
        let p = model.init_params(3);
        let x = random(&[2, 2, 8, 17], 4);
        let (_, _, y0) = run_block(&model, &p, 0, x, Mode::Train);
        assert_eq!(y0.shape(), &[2, 4, 8, 17]);
        let (_, _, y1) = run_block(&model, &p, 1, y0, Mode::Train);
        assert_eq!(y1.shape(), &[2, 6, 8, 17]);
        let (_, _, y2) = run_block(&model, &p, 2, y1, Mode::Train);
        assert_eq!(y2.shape(), &[2, 8, 4, 17]);
    }

    #[test]
    fn bottleneck_reduction_one_keeps_shape() {
        let mut cfg = small_config();
        cfg.blocks[2].bottleneck_reduction = 1;
        let model = Model::coco(cfg).unwrap();
        let p = model.init_params(3);
        let (_, _, y) = run_block(&model, &p, 2, random(&[1, 6, 8, 17], 5), Mode::Eval);
        assert_eq!(y.shape(), &[1, 8, 4, 17]);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let model = Model::coco(small_config()).unwrap();
        let p = model.init_params(3);
        let (_, _, y) = run_block(&model, &p, 0, Tensor::zeros(&[1, 2, 8, 17]), Mode::Eval);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_adds_projected_input() {
        let mut on = small_config();
        on.blocks[1].residual = true;
        let mut off = on.clone();
        off.blocks[1].residual = false;
        let model_on = Model::coco(on).unwrap();
        let model_off = Model::coco(off).unwrap();
        let p = model_on.init_params(8);
        let x = random(&[2, 4, 8, 17], 6);
        let (pre_on, res, _) = run_block(&model_on, &p, 1, x.clone(), Mode::Eval);
        let (pre_off, none, _) = run_block(&model_off, &p, 1, x, Mode::Eval);
        assert!(none.is_none());
        let res = res.unwrap();
        for ((a, b), r) in pre_on.data().iter().zip(pre_off.data()).zip(res.data()) {
            assert!((a - b - r).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_contracts() {
        let model = Model::coco(small_config()).unwrap();
        let p = model.init_params(3);
        let x = random(&[3, 2, 8, 17], 7);
        let emb = model.embed(&p, x.clone()).unwrap();
        assert_eq!(emb.shape(), &[3, 5]);
        for row in emb.data().chunks(5) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        // permuted batch in eval mode permutes the rows
        let perm = [2usize, 0, 1];
        let plane = 2 * 8 * 17;
        let mut permuted = Vec::new();
        for &i in &perm {
            permuted.extend_from_slice(&x.data()[i * plane..(i + 1) * plane]);
        }
        let emb_p = model.embed(&p, Tensor::new(vec![3, 2, 8, 17], permuted).unwrap()).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(emb_p.row(k), emb.row(i));
        }
        // duplicate sample
        let mut dup = x.data()[..plane].to_vec();
        dup.extend_from_slice(&x.data()[..plane]);
        let e = model.embed(&p, Tensor::new(vec![2, 2, 8, 17], dup).unwrap()).unwrap();
        assert_eq!(e.row(0), e.row(1));

        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = model.forward(&mut tape, &p, xv, Mode::Train).unwrap();
        assert_eq!(tape.value(out.logits.unwrap()).shape(), &[3, 3]);
        assert!(!out.stats.is_empty());
    }

    #[test]
    fn forward_rejects_bad_input() {
        let model = Model::coco(small_config()).unwrap();
        let p = model.init_params(3);
        assert!(matches!(
            model.embed(&p, Tensor::zeros(&[1, 3, 8, 17])),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn running_stats_update() {
        let model = Model::coco(small_config()).unwrap();
        let mut p = model.init_params(3);
        let stats = vec![(
            "input_bn".to_string(),
            BatchStats {
                mean: vec![1.0, 2.0],
                var: vec![3.0, 3.0],
                count: 4,
            },
        )];
        update_running_stats(&mut p, &stats, 0.5);
        assert_eq!(p.buffer("input_bn.running_mean").unwrap().data(), &[0.5, 1.0]);
        assert_eq!(p.buffer("input_bn.running_var").unwrap().data(), &[2.5, 2.5]);
    }
}
