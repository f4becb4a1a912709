//! Message-passing operators and their building blocks: MLPs with optional
//! batch normalization, the sum-aggregation GIN layer, a direction-aware
//! relational layer, and the non-trainable `A x` propagation.
//!
//! All forwards run on a [`Tape`] so the same code path serves training,
//! evaluation, and gradient checking. Parameters are plain matrices bound
//! onto a tape per forward pass.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{DiffError, SparseMatrix, Tape, TensorId};
use crate::seeding::SeededRng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    Gin,
    Relational,
    FixedAx,
}

/// Architecture of one message-passing stack.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GnnConfig {
    pub operator: OperatorKind,
    /// Number of stacked layers (T).
    pub num_layers: usize,
    pub in_dim: usize,
    pub hidden_dim: usize,
    /// Output width of the final projection when `jumping_knowledge` is set;
    /// otherwise the last layer's width.
    pub out_dim: usize,
    /// Depth of the per-layer MLPs (GIN only).
    pub mlp_depth: usize,
    /// Batch normalization after each MLP layer.
    pub use_norm: bool,
    /// Concatenate all layer outputs and project with a bias-free linear map.
    pub jumping_knowledge: bool,
    pub dropout: f64,
}

impl GnnConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.operator == OperatorKind::FixedAx {
            if self.num_layers != 1 {
                return Err("fixed_ax requires num_layers = 1".into());
            }
            if self.jumping_knowledge {
                return Err("fixed_ax has no trainable projection".into());
            }
        }
        if self.num_layers == 0 {
            return Err("num_layers must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    /// Width of the produced node embeddings.
    pub fn output_dim(&self) -> usize {
        match self.operator {
            OperatorKind::FixedAx => self.in_dim,
            _ if self.jumping_knowledge => self.out_dim,
            _ => self.hidden_dim,
        }
    }
}

// ---------------------------------------------------------------------------
// Parameter containers
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct LinearParams {
    /// `[in_dim x out_dim]`; applied as `y = x W (+ b)`.
    pub weight: Array2<f64>,
    pub bias: Option<Array2<f64>>,
}

impl LinearParams {
    fn glorot(in_dim: usize, out_dim: usize, bias: bool, rng: &mut SeededRng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = Array2::from_shape_fn((in_dim, out_dim), |_| rng.random_range(-limit..limit));
        Self { weight, bias: bias.then(|| Array2::zeros((1, out_dim))) }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormParams {
    pub gamma: Array2<f64>,
    pub beta: Array2<f64>,
    pub running_mean: Array2<f64>,
    pub running_var: Array2<f64>,
}

impl BatchNormParams {
    fn new(dim: usize) -> Self {
        Self {
            gamma: Array2::ones((1, dim)),
            beta: Array2::zeros((1, dim)),
            running_mean: Array2::zeros((1, dim)),
            running_var: Array2::ones((1, dim)),
        }
    }

    /// Fold one batch statistic into the running estimates.
    pub fn update_running(&mut self, mean: &Array2<f64>, var_unbiased: &Array2<f64>) {
        self.running_mean = &self.running_mean * (1.0 - BN_MOMENTUM) + mean * BN_MOMENTUM;
        self.running_var = &self.running_var * (1.0 - BN_MOMENTUM) + var_unbiased * BN_MOMENTUM;
    }
}

#[derive(Clone, Debug)]
pub struct MlpLayer {
    pub lin: LinearParams,
    pub norm: Option<BatchNormParams>,
    /// Rectify (before normalization) when set; the final layer of a
    /// scalar-head MLP stays linear.
    pub activation: bool,
}

/// A stack of linear layers with optional per-layer rectifier and batch norm.
#[derive(Clone, Debug)]
pub struct MlpParams {
    pub layers: Vec<MlpLayer>,
    pub dropout: f64,
}

impl MlpParams {
    /// MLP whose every layer is Linear -> ReLU -> (BatchNorm); used inside
    /// GIN layers where the output feeds further message passing.
    pub fn hidden_stack(
        in_dim: usize,
        hidden: usize,
        depth: usize,
        use_norm: bool,
        rng: &mut SeededRng,
    ) -> Self {
        let mut layers = Vec::new();
        let mut d = in_dim;
        for _ in 0..depth {
            layers.push(MlpLayer {
                lin: LinearParams::glorot(d, hidden, true, rng),
                norm: use_norm.then(|| BatchNormParams::new(hidden)),
                activation: true,
            });
            d = hidden;
        }
        Self { layers, dropout: 0.0 }
    }

    /// MLP with `depth - 1` hidden layers and a linear output head.
    pub fn with_linear_head(
        in_dim: usize,
        hidden: usize,
        depth: usize,
        out_dim: usize,
        use_norm: bool,
        rng: &mut SeededRng,
    ) -> Self {
        assert!(depth >= 1);
        let mut layers = Vec::new();
        let mut d = in_dim;
        for _ in 0..depth - 1 {
            layers.push(MlpLayer {
                lin: LinearParams::glorot(d, hidden, true, rng),
                norm: use_norm.then(|| BatchNormParams::new(hidden)),
                activation: true,
            });
            d = hidden;
        }
        layers.push(MlpLayer {
            lin: LinearParams::glorot(d, out_dim, true, rng),
            norm: None,
            activation: false,
        });
        Self { layers, dropout: 0.0 }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].lin.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().lin.weight.ncols()
    }
}

#[derive(Clone, Debug)]
pub struct GinLayerParams {
    /// Trainable self-loop weight; the layer mixes `(1 + epsilon) h_i` with
    /// the sum of in-neighbor features.
    pub epsilon: Array2<f64>,
    pub mlp: MlpParams,
}

#[derive(Clone, Debug)]
pub struct RelationalLayerParams {
    pub self_weight: Array2<f64>,
    pub in_weight: Array2<f64>,
    pub out_weight: Array2<f64>,
}

#[derive(Clone, Debug)]
pub enum GnnLayerParams {
    Gin(GinLayerParams),
    Relational(RelationalLayerParams),
    FixedAx,
}

/// Parameters of a full message-passing stack, including the optional
/// jumping-knowledge projection.
#[derive(Clone, Debug)]
pub struct GnnParams {
    pub config: GnnConfig,
    pub layers: Vec<GnnLayerParams>,
    pub jk: Option<LinearParams>,
}

impl GnnParams {
    pub fn init(config: &GnnConfig, rng: &mut SeededRng) -> Self {
        config.validate().expect("invalid gnn config");
        let mut layers = Vec::new();
        let mut d = config.in_dim;
        for _ in 0..config.num_layers {
            match config.operator {
                OperatorKind::Gin => {
                    layers.push(GnnLayerParams::Gin(GinLayerParams {
                        epsilon: Array2::zeros((1, 1)),
                        mlp: MlpParams::hidden_stack(d, config.hidden_dim, config.mlp_depth, config.use_norm, rng),
                    }));
                    d = config.hidden_dim;
                }
                OperatorKind::Relational => {
                    layers.push(GnnLayerParams::Relational(RelationalLayerParams {
                        self_weight: LinearParams::glorot(d, config.hidden_dim, false, rng).weight,
                        in_weight: LinearParams::glorot(d, config.hidden_dim, false, rng).weight,
                        out_weight: LinearParams::glorot(d, config.hidden_dim, false, rng).weight,
                    }));
                    d = config.hidden_dim;
                }
                OperatorKind::FixedAx => layers.push(GnnLayerParams::FixedAx),
            }
        }
        let jk = (config.jumping_knowledge && config.operator != OperatorKind::FixedAx).then(|| {
            LinearParams::glorot(config.num_layers * config.hidden_dim, config.out_dim, false, rng)
        });
        Self { config: config.clone(), layers, jk }
    }
}

// ---------------------------------------------------------------------------
// Canonical parameter traversal
// ---------------------------------------------------------------------------
//
// Flat parameter lists (optimizer state, checkpoints, gradient extraction)
// all rely on one traversal order; `named`, `named_mut`, `bn_sites_mut`, and
// the `bound_ids` functions below must stay in sync with `bind`.

impl MlpParams {
    pub fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<f64>)>) {
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), &l.lin.weight));
            if let Some(b) = &l.lin.bias {
                out.push((format!("{prefix}.{i}.bias"), b));
            }
            if let Some(n) = &l.norm {
                out.push((format!("{prefix}.{i}.norm.gamma"), &n.gamma));
                out.push((format!("{prefix}.{i}.norm.beta"), &n.beta));
            }
        }
    }

    pub fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Array2<f64>)>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), &mut l.lin.weight));
            if let Some(b) = &mut l.lin.bias {
                out.push((format!("{prefix}.{i}.bias"), b));
            }
            if let Some(n) = &mut l.norm {
                out.push((format!("{prefix}.{i}.norm.gamma"), &mut n.gamma));
                out.push((format!("{prefix}.{i}.norm.beta"), &mut n.beta));
            }
        }
    }

    pub fn bn_sites_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut BatchNormParams)>,
    ) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            if let Some(n) = &mut l.norm {
                out.push((format!("{prefix}.{i}.norm"), n));
            }
        }
    }

    pub fn bn_buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<f64>)>) {
        for (i, l) in self.layers.iter().enumerate() {
            if let Some(n) = &l.norm {
                out.push((format!("{prefix}.{i}.norm.running_mean"), &n.running_mean));
                out.push((format!("{prefix}.{i}.norm.running_var"), &n.running_var));
            }
        }
    }

    pub fn bn_buffers_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Array2<f64>)>,
    ) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            if let Some(n) = &mut l.norm {
                out.push((format!("{prefix}.{i}.norm.running_mean"), &mut n.running_mean));
                out.push((format!("{prefix}.{i}.norm.running_var"), &mut n.running_var));
            }
        }
    }
}

impl GnnParams {
    pub fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<f64>)>) {
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                GnnLayerParams::Gin(g) => {
                    out.push((format!("{prefix}.{i}.epsilon"), &g.epsilon));
                    g.mlp.named(&format!("{prefix}.{i}.mlp"), out);
                }
                GnnLayerParams::Relational(r) => {
                    out.push((format!("{prefix}.{i}.self_weight"), &r.self_weight));
                    out.push((format!("{prefix}.{i}.in_weight"), &r.in_weight));
                    out.push((format!("{prefix}.{i}.out_weight"), &r.out_weight));
                }
                GnnLayerParams::FixedAx => {}
            }
        }
        if let Some(jk) = &self.jk {
            out.push((format!("{prefix}.jk.weight"), &jk.weight));
        }
    }

    pub fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Array2<f64>)>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            match l {
                GnnLayerParams::Gin(g) => {
                    out.push((format!("{prefix}.{i}.epsilon"), &mut g.epsilon));
                    g.mlp.named_mut(&format!("{prefix}.{i}.mlp"), out);
                }
                GnnLayerParams::Relational(r) => {
                    out.push((format!("{prefix}.{i}.self_weight"), &mut r.self_weight));
                    out.push((format!("{prefix}.{i}.in_weight"), &mut r.in_weight));
                    out.push((format!("{prefix}.{i}.out_weight"), &mut r.out_weight));
                }
                GnnLayerParams::FixedAx => {}
            }
        }
        if let Some(jk) = &mut self.jk {
            out.push((format!("{prefix}.jk.weight"), &mut jk.weight));
        }
    }

    pub fn bn_sites_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut BatchNormParams)>,
    ) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            if let GnnLayerParams::Gin(g) = l {
                g.mlp.bn_sites_mut(&format!("{prefix}.{i}.mlp"), out);
            }
        }
    }

    pub fn bn_buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<f64>)>) {
        for (i, l) in self.layers.iter().enumerate() {
            if let GnnLayerParams::Gin(g) = l {
                g.mlp.bn_buffers(&format!("{prefix}.{i}.mlp"), out);
            }
        }
    }

    pub fn bn_buffers_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Array2<f64>)>,
    ) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            if let GnnLayerParams::Gin(g) = l {
                g.mlp.bn_buffers_mut(&format!("{prefix}.{i}.mlp"), out);
            }
        }
    }
}

/// Tensor ids of a bound MLP in canonical traversal order.
pub fn mlp_bound_ids(mlp: &BoundMlp, out: &mut Vec<TensorId>) {
    for l in &mlp.layers {
        out.push(l.lin.weight);
        if let Some(b) = l.lin.bias {
            out.push(b);
        }
        if let Some(n) = &l.norm {
            out.push(n.gamma);
            out.push(n.beta);
        }
    }
}

/// Tensor ids of a bound stack in canonical traversal order.
pub fn gnn_bound_ids(gnn: &BoundGnn, out: &mut Vec<TensorId>) {
    for l in &gnn.layers {
        match l {
            BoundGnnLayer::Gin { epsilon, mlp } => {
                out.push(*epsilon);
                mlp_bound_ids(mlp, out);
            }
            BoundGnnLayer::Relational { self_weight, in_weight, out_weight } => {
                out.push(*self_weight);
                out.push(*in_weight);
                out.push(*out_weight);
            }
            BoundGnnLayer::FixedAx => {}
        }
    }
    if let Some(jk) = &gnn.jk {
        out.push(jk.weight);
    }
}

// ---------------------------------------------------------------------------
// Forward context and parameter binding
// ---------------------------------------------------------------------------

/// Per-forward mode switches. Training mode uses batch statistics and live
/// dropout; eval mode uses running statistics and no dropout.
pub struct FwdCtx<'a> {
    pub training: bool,
    pub rng: Option<&'a mut SeededRng>,
}

impl<'a> FwdCtx<'a> {
    pub fn eval() -> Self {
        Self { training: false, rng: None }
    }

    pub fn train(rng: &'a mut SeededRng) -> Self {
        Self { training: true, rng: Some(rng) }
    }
}

#[derive(Clone)]
pub struct BoundLinear {
    pub weight: TensorId,
    pub bias: Option<TensorId>,
}

#[derive(Clone)]
pub struct BoundBatchNorm {
    pub gamma: TensorId,
    pub beta: TensorId,
    pub running_mean: Array2<f64>,
    pub running_var: Array2<f64>,
    pub key: String,
}

#[derive(Clone)]
pub struct BoundMlpLayer {
    pub lin: BoundLinear,
    pub norm: Option<BoundBatchNorm>,
    pub activation: bool,
}

#[derive(Clone)]
pub struct BoundMlp {
    pub layers: Vec<BoundMlpLayer>,
    pub dropout: f64,
}

#[derive(Clone)]
pub enum BoundGnnLayer {
    Gin { epsilon: TensorId, mlp: BoundMlp },
    Relational { self_weight: TensorId, in_weight: TensorId, out_weight: TensorId },
    FixedAx,
}

#[derive(Clone)]
pub struct BoundGnn {
    pub config: GnnConfig,
    pub layers: Vec<BoundGnnLayer>,
    pub jk: Option<BoundLinear>,
}

/// Register a parameter on a tape as a differentiable leaf, or as a constant
/// when `trainable` is false (detaching it from the gradient sweep).
fn bind_tensor(tape: &mut Tape, value: &Array2<f64>, trainable: bool) -> TensorId {
    if trainable {
        tape.param(value.clone())
    } else {
        tape.constant(value.clone())
    }
}

impl LinearParams {
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundLinear {
        BoundLinear {
            weight: bind_tensor(tape, &self.weight, trainable),
            bias: self.bias.as_ref().map(|b| bind_tensor(tape, b, trainable)),
        }
    }
}

impl MlpParams {
    pub fn bind(&self, tape: &mut Tape, key: &str, trainable: bool) -> BoundMlp {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| BoundMlpLayer {
                lin: l.lin.bind(tape, trainable),
                norm: l.norm.as_ref().map(|n| BoundBatchNorm {
                    gamma: bind_tensor(tape, &n.gamma, trainable),
                    beta: bind_tensor(tape, &n.beta, trainable),
                    running_mean: n.running_mean.clone(),
                    running_var: n.running_var.clone(),
                    key: format!("{key}.{i}.norm"),
                }),
                activation: l.activation,
            })
            .collect();
        BoundMlp { layers, dropout: self.dropout }
    }
}

impl GnnParams {
    pub fn bind(&self, tape: &mut Tape, key: &str, trainable: bool) -> BoundGnn {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| match l {
                GnnLayerParams::Gin(g) => BoundGnnLayer::Gin {
                    epsilon: bind_tensor(tape, &g.epsilon, trainable),
                    mlp: g.mlp.bind(tape, &format!("{key}.{i}.mlp"), trainable),
                },
                GnnLayerParams::Relational(r) => BoundGnnLayer::Relational {
                    self_weight: bind_tensor(tape, &r.self_weight, trainable),
                    in_weight: bind_tensor(tape, &r.in_weight, trainable),
                    out_weight: bind_tensor(tape, &r.out_weight, trainable),
                },
                GnnLayerParams::FixedAx => BoundGnnLayer::FixedAx,
            })
            .collect();
        BoundGnn {
            config: self.config.clone(),
            layers,
            jk: self.jk.as_ref().map(|j| j.bind(tape, trainable)),
        }
    }
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

pub fn linear_forward(tape: &mut Tape, lin: &BoundLinear, x: TensorId) -> Result<TensorId, DiffError> {
    let y = tape.matmul(x, lin.weight)?;
    match lin.bias {
        Some(b) => tape.add_row_broadcast(y, b),
        None => Ok(y),
    }
}

pub fn mlp_forward(
    tape: &mut Tape,
    mlp: &BoundMlp,
    mut x: TensorId,
    ctx: &mut FwdCtx,
) -> Result<TensorId, DiffError> {
    for layer in &mlp.layers {
        x = linear_forward(tape, &layer.lin, x)?;
        if layer.activation {
            x = tape.relu(x)?;
        }
        if let Some(norm) = &layer.norm {
            x = if ctx.training {
                tape.batch_norm_train(x, norm.gamma, norm.beta, BN_EPS, &norm.key)?
            } else {
                tape.batch_norm_eval(x, norm.gamma, norm.beta, BN_EPS, &norm.running_mean, &norm.running_var)?
            };
        }
        if mlp.dropout > 0.0 && ctx.training {
            let mask = sample_dropout_mask(tape.shape(x), mlp.dropout, ctx);
            x = tape.dropout(x, mask)?;
        }
    }
    Ok(x)
}

fn sample_dropout_mask(shape: (usize, usize), p: f64, ctx: &mut FwdCtx) -> Arc<Array2<f64>> {
    let rng = ctx.rng.as_mut().expect("training forward requires an rng");
    let keep = 1.0 - p;
    Arc::new(Array2::from_shape_fn(shape, |_| {
        if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }
    }))
}

/// One GIN layer: `MLP((1 + epsilon) h_i + sum of in-neighbor features)`.
pub fn gin_forward(
    tape: &mut Tape,
    epsilon: TensorId,
    mlp: &BoundMlp,
    h: TensorId,
    adj: &Arc<SparseMatrix>,
    ctx: &mut FwdCtx,
) -> Result<TensorId, DiffError> {
    let one = tape.scalar(1.0);
    let one_plus_eps = tape.add(one, epsilon)?;
    let self_term = tape.mul_scalar(h, one_plus_eps)?;
    let agg = tape.sparse_matmul(adj, h, false)?;
    let mixed = tape.add(self_term, agg)?;
    mlp_forward(tape, mlp, mixed, ctx)
}

/// One direction-aware layer:
/// `relu(W1 h_i + sum_{j->i} W2 h_j + sum_{i->j} W3 h_j)`.
pub fn relational_forward(
    tape: &mut Tape,
    self_weight: TensorId,
    in_weight: TensorId,
    out_weight: TensorId,
    h: TensorId,
    adj: &Arc<SparseMatrix>,
) -> Result<TensorId, DiffError> {
    let self_term = tape.matmul(h, self_weight)?;
    let in_agg = tape.sparse_matmul(adj, h, false)?;
    let in_term = tape.matmul(in_agg, in_weight)?;
    let out_agg = tape.sparse_matmul(adj, h, true)?;
    let out_term = tape.matmul(out_agg, out_weight)?;
    let s = tape.add(self_term, in_term)?;
    let s = tape.add(s, out_term)?;
    tape.relu(s)
}

/// The non-trainable propagation `A x`.
pub fn fixed_ax_forward(
    tape: &mut Tape,
    x: TensorId,
    adj: &Arc<SparseMatrix>,
) -> Result<TensorId, DiffError> {
    tape.sparse_matmul(adj, x, false)
}

/// Full stack: T layers, optional between-layer dropout, and the optional
/// jumping-knowledge concatenation `h_i = W [h^(1) | ... | h^(T)]`.
pub fn gnn_forward(
    tape: &mut Tape,
    gnn: &BoundGnn,
    x: TensorId,
    adj: &Arc<SparseMatrix>,
    ctx: &mut FwdCtx,
) -> Result<TensorId, DiffError> {
    let mut h = x;
    let mut per_layer = Vec::with_capacity(gnn.layers.len());
    for layer in &gnn.layers {
        h = match layer {
            BoundGnnLayer::Gin { epsilon, mlp } => gin_forward(tape, *epsilon, mlp, h, adj, ctx)?,
            BoundGnnLayer::Relational { self_weight, in_weight, out_weight } => {
                let out = relational_forward(tape, *self_weight, *in_weight, *out_weight, h, adj)?;
                if gnn.config.dropout > 0.0 && ctx.training {
                    let mask = sample_dropout_mask(tape.shape(out), gnn.config.dropout, ctx);
                    tape.dropout(out, mask)?
                } else {
                    out
                }
            }
            BoundGnnLayer::FixedAx => fixed_ax_forward(tape, h, adj)?,
        };
        per_layer.push(h);
    }
    match &gnn.jk {
        Some(jk) => {
            let cat = tape.concat_cols(&per_layer)?;
            linear_forward(tape, jk, cat)
        }
        None => Ok(h),
    }
}

/// Eval-mode convenience: run a stack over plain matrices outside any
/// training loop.
pub fn gnn_eval(
    params: &GnnParams,
    x: &Array2<f64>,
    adj: &Arc<SparseMatrix>,
) -> Result<Array2<f64>, DiffError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, "gnn", false);
    let xid = tape.constant(x.clone());
    let out = gnn_forward(&mut tape, &bound, xid, adj, &mut FwdCtx::eval())?;
    Ok(tape.value(out).clone())
}
