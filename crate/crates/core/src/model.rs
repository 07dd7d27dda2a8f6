//! Node embedding model: graph-convolutional structural encoder, GRU
//! temporal encoder over per-edge history, and their fused output.
//!
//! All vectors are rows. One GCN layer computes
//! `H' = act(A_hat . H . W)` with optional per-row layer normalization
//! (learnable gain/bias) before the activation and an optional residual
//! connection after it. The GRU follows the standard reset/update/candidate
//! gating; edges are processed as a batch, and a node's temporal state is
//! the mean of the final states of its incident edges (either direction),
//! zero for isolated nodes. The fused embedding concatenates the two blocks
//! column-wise.
//!
//! Forward passes always run on a [`Tape`], so training and inference share
//! one code path and identical inputs give bitwise-identical embeddings.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::graph::{normalize_adjacency, ServiceGraph, EDGE_FEATURE_DIM, NODE_FEATURE_DIM};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor2;
use crate::Result;

/// Activation applied after each graph-convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of graph-convolution layers; at least 1.
    pub gcn_layers: usize,
    /// Width of the structural embedding.
    pub hidden_dim: usize,
    pub activation: Activation,
    /// Add the layer input back after the activation.
    pub use_residual: bool,
    /// Row-normalize pre-activations with learnable gain/bias.
    pub use_layer_norm: bool,
    /// Width of the temporal embedding.
    pub gru_hidden: usize,
    /// Length of the per-edge history sequences; mirrors the windowing
    /// configuration.
    pub history_len: usize,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            gcn_layers: 2,
            hidden_dim: 32,
            activation: Activation::Relu,
            use_residual: true,
            use_layer_norm: true,
            gru_hidden: 16,
            history_len: 3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gcn_layers", self.gcn_layers),
            ("hidden_dim", self.hidden_dim),
            ("gru_hidden", self.gru_hidden),
            ("history_len", self.history_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{} must be at least 1", name)));
            }
        }
        Ok(())
    }

    /// Width of the fused embedding.
    pub fn embedding_dim(&self) -> usize {
        self.hidden_dim + self.gru_hidden
    }
}

/// GRU gate parameters. `w_*` map edge features (rows of width `d_e`) and
/// `u_*` map the hidden state; biases are single rows.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub w_reset: Tensor2,
    pub w_update: Tensor2,
    pub w_cand: Tensor2,
    pub u_reset: Tensor2,
    pub u_update: Tensor2,
    pub u_cand: Tensor2,
    pub b_reset: Tensor2,
    pub b_update: Tensor2,
    pub b_cand: Tensor2,
}

/// All learnable tensors.
///
/// `ln_gain` / `ln_bias` are empty unless the configuration enables layer
/// normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub input_proj: Tensor2,
    pub gcn_w: Vec<Tensor2>,
    pub ln_gain: Vec<Tensor2>,
    pub ln_bias: Vec<Tensor2>,
    pub gru: GruParams,
}

/// Glorot-uniform sample: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2 {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor2::from_fn(rows, cols, |_, _| rng.gen_range(-a..a))
}

impl ModelParams {
    /// Seeded initialization. Tensors are drawn in the fixed order of
    /// [`ModelParams::named`], so a seed pins every parameter bitwise.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (h, g) = (cfg.hidden_dim, cfg.gru_hidden);
        let input_proj = glorot(&mut rng, NODE_FEATURE_DIM, h);
        let gcn_w = (0..cfg.gcn_layers).map(|_| glorot(&mut rng, h, h)).collect();
        let (mut ln_gain, mut ln_bias) = (Vec::new(), Vec::new());
        if cfg.use_layer_norm {
            for _ in 0..cfg.gcn_layers {
                ln_gain.push(glorot(&mut rng, 1, h));
                ln_bias.push(glorot(&mut rng, 1, h));
            }
        }
        let gru = GruParams {
            w_reset: glorot(&mut rng, EDGE_FEATURE_DIM, g),
            w_update: glorot(&mut rng, EDGE_FEATURE_DIM, g),
            w_cand: glorot(&mut rng, EDGE_FEATURE_DIM, g),
            u_reset: glorot(&mut rng, g, g),
            u_update: glorot(&mut rng, g, g),
            u_cand: glorot(&mut rng, g, g),
            b_reset: glorot(&mut rng, 1, g),
            b_update: glorot(&mut rng, 1, g),
            b_cand: glorot(&mut rng, 1, g),
        };
        Ok(Self {
            input_proj,
            gcn_w,
            ln_gain,
            ln_bias,
            gru,
        })
    }

    /// Every tensor with its stable name, in initialization order.
    pub fn named(&self) -> Vec<(String, &Tensor2)> {
        let mut out: Vec<(String, &Tensor2)> = vec![("input_proj".into(), &self.input_proj)];
        for (l, w) in self.gcn_w.iter().enumerate() {
            out.push((format!("gcn_w.{}", l), w));
        }
        for l in 0..self.ln_gain.len() {
            out.push((format!("ln_gain.{}", l), &self.ln_gain[l]));
            out.push((format!("ln_bias.{}", l), &self.ln_bias[l]));
        }
        let g = &self.gru;
        for (name, t) in [
            ("gru.w_reset", &g.w_reset),
            ("gru.w_update", &g.w_update),
            ("gru.w_cand", &g.w_cand),
            ("gru.u_reset", &g.u_reset),
            ("gru.u_update", &g.u_update),
            ("gru.u_cand", &g.u_cand),
            ("gru.b_reset", &g.b_reset),
            ("gru.b_update", &g.b_update),
            ("gru.b_cand", &g.b_cand),
        ] {
            out.push((name.into(), t));
        }
        out
    }

    /// Mutable access in the same order as [`ModelParams::named`].
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor2)> {
        let mut out: Vec<(String, &mut Tensor2)> =
            vec![("input_proj".into(), &mut self.input_proj)];
        for (l, w) in self.gcn_w.iter_mut().enumerate() {
            out.push((format!("gcn_w.{}", l), w));
        }
        for (l, (gain, bias)) in self.ln_gain.iter_mut().zip(self.ln_bias.iter_mut()).enumerate() {
            out.push((format!("ln_gain.{}", l), gain));
            out.push((format!("ln_bias.{}", l), bias));
        }
        let g = &mut self.gru;
        for (name, t) in [
            ("gru.w_reset", &mut g.w_reset),
            ("gru.w_update", &mut g.w_update),
            ("gru.w_cand", &mut g.w_cand),
            ("gru.u_reset", &mut g.u_reset),
            ("gru.u_update", &mut g.u_update),
            ("gru.u_cand", &mut g.u_cand),
            ("gru.b_reset", &mut g.b_reset),
            ("gru.b_update", &mut g.b_update),
            ("gru.b_cand", &mut g.b_cand),
        ] {
            out.push((name.into(), t));
        }
        out
    }

    /// Check tensor shapes against a configuration.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.validate()?;
        let (h, g) = (cfg.hidden_dim, cfg.gru_hidden);
        let d_in = self.input_proj.rows();
        let mut expect = vec![("input_proj".to_string(), (d_in, h))];
        if self.gcn_w.len() != cfg.gcn_layers {
            return Err(Error::ShapeMismatch {
                op: "model_params",
                detail: format!("{} gcn layers, config says {}", self.gcn_w.len(), cfg.gcn_layers),
            });
        }
        let want_ln = if cfg.use_layer_norm { cfg.gcn_layers } else { 0 };
        if self.ln_gain.len() != want_ln || self.ln_bias.len() != want_ln {
            return Err(Error::ShapeMismatch {
                op: "model_params",
                detail: format!(
                    "{} gain / {} bias rows, config wants {}",
                    self.ln_gain.len(),
                    self.ln_bias.len(),
                    want_ln
                ),
            });
        }
        for l in 0..cfg.gcn_layers {
            expect.push((format!("gcn_w.{}", l), (h, h)));
        }
        for l in 0..want_ln {
            expect.push((format!("ln_gain.{}", l), (1, h)));
            expect.push((format!("ln_bias.{}", l), (1, h)));
        }
        let d_e = self.gru.w_reset.rows();
        for name in ["gru.w_reset", "gru.w_update", "gru.w_cand"] {
            expect.push((name.into(), (d_e, g)));
        }
        for name in ["gru.u_reset", "gru.u_update", "gru.u_cand"] {
            expect.push((name.into(), (g, g)));
        }
        for name in ["gru.b_reset", "gru.b_update", "gru.b_cand"] {
            expect.push((name.into(), (1, g)));
        }
        let named = self.named();
        for ((name, tensor), (ename, eshape)) in named.iter().zip(&expect) {
            debug_assert_eq!(name, ename);
            if tensor.shape() != *eshape {
                return Err(Error::ShapeMismatch {
                    op: "model_params",
                    detail: format!("{} is {:?}, want {:?}", name, tensor.shape(), eshape),
                });
            }
        }
        Ok(())
    }
}

/// True for tensors that participate in L2 weight decay: projection and gate
/// matrices, but not biases or normalization gains.
pub fn is_weight_matrix(name: &str) -> bool {
    name == "input_proj"
        || name.starts_with("gcn_w.")
        || name.starts_with("gru.w_")
        || name.starts_with("gru.u_")
}

// --- persistence -----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TensorDoc {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// On-disk form of a model: configuration plus a name-keyed tensor map.
#[derive(Serialize, Deserialize)]
pub struct ModelDoc {
    pub config: ModelConfig,
    tensors: BTreeMap<String, TensorDoc>,
}

impl ModelDoc {
    pub fn pack(config: &ModelConfig, params: &ModelParams) -> Self {
        let tensors = params
            .named()
            .into_iter()
            .map(|(name, t)| {
                (
                    name,
                    TensorDoc {
                        rows: t.rows(),
                        cols: t.cols(),
                        data: t.data().to_vec(),
                    },
                )
            })
            .collect();
        Self {
            config: config.clone(),
            tensors,
        }
    }

    /// Rebuild and shape-check the parameters.
    pub fn unpack(&self) -> Result<(ModelConfig, ModelParams)> {
        let cfg = self.config.clone();
        cfg.validate()?;
        let take = |name: String| -> Result<Tensor2> {
            let doc = self.tensors.get(&name).ok_or_else(|| Error::ShapeMismatch {
                op: "model_doc",
                detail: format!("missing tensor {}", name),
            })?;
            Tensor2::from_vec(doc.rows, doc.cols, doc.data.clone())
        };
        let input_proj = take("input_proj".into())?;
        let gcn_w = (0..cfg.gcn_layers)
            .map(|l| take(format!("gcn_w.{}", l)))
            .collect::<Result<_>>()?;
        let (mut ln_gain, mut ln_bias) = (Vec::new(), Vec::new());
        if cfg.use_layer_norm {
            for l in 0..cfg.gcn_layers {
                ln_gain.push(take(format!("ln_gain.{}", l))?);
                ln_bias.push(take(format!("ln_bias.{}", l))?);
            }
        }
        let gru = GruParams {
            w_reset: take("gru.w_reset".into())?,
            w_update: take("gru.w_update".into())?,
            w_cand: take("gru.w_cand".into())?,
            u_reset: take("gru.u_reset".into())?,
            u_update: take("gru.u_update".into())?,
            u_cand: take("gru.u_cand".into())?,
            b_reset: take("gru.b_reset".into())?,
            b_update: take("gru.b_update".into())?,
            b_cand: take("gru.b_cand".into())?,
        };
        let params = ModelParams {
            input_proj,
            gcn_w,
            ln_gain,
            ln_bias,
            gru,
        };
        params.validate(&cfg)?;
        Ok((cfg, params))
    }
}

// --- forward pass ----------------------------------------------------------

/// Tape handles of every staged parameter, aligned with
/// [`ModelParams::named`] by [`ParamNodes::ordered`].
pub struct ParamNodes {
    pub input_proj: NodeId,
    pub gcn_w: Vec<NodeId>,
    pub ln_gain: Vec<NodeId>,
    pub ln_bias: Vec<NodeId>,
    pub gru: GruNodes,
}

pub struct GruNodes {
    pub w_reset: NodeId,
    pub w_update: NodeId,
    pub w_cand: NodeId,
    pub u_reset: NodeId,
    pub u_update: NodeId,
    pub u_cand: NodeId,
    pub b_reset: NodeId,
    pub b_update: NodeId,
    pub b_cand: NodeId,
}

impl ParamNodes {
    /// `(name, node)` pairs in the same order as [`ModelParams::named`].
    pub fn ordered(&self) -> Vec<(String, NodeId)> {
        let mut out: Vec<(String, NodeId)> = vec![("input_proj".into(), self.input_proj)];
        for (l, id) in self.gcn_w.iter().enumerate() {
            out.push((format!("gcn_w.{}", l), *id));
        }
        for (l, (gain, bias)) in self.ln_gain.iter().zip(&self.ln_bias).enumerate() {
            out.push((format!("ln_gain.{}", l), *gain));
            out.push((format!("ln_bias.{}", l), *bias));
        }
        let g = &self.gru;
        for (name, id) in [
            ("gru.w_reset", g.w_reset),
            ("gru.w_update", g.w_update),
            ("gru.w_cand", g.w_cand),
            ("gru.u_reset", g.u_reset),
            ("gru.u_update", g.u_update),
            ("gru.u_cand", g.u_cand),
            ("gru.b_reset", g.b_reset),
            ("gru.b_update", g.b_update),
            ("gru.b_cand", g.b_cand),
        ] {
            out.push((name.into(), id));
        }
        out
    }
}

/// Register every parameter tensor as a tape leaf.
pub fn stage_params(tape: &mut Tape, params: &ModelParams) -> Result<ParamNodes> {
    let input_proj = tape.leaf(params.input_proj.clone())?;
    let gcn_w = params
        .gcn_w
        .iter()
        .map(|w| tape.leaf(w.clone()))
        .collect::<Result<_>>()?;
    let ln_gain = params
        .ln_gain
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<_>>()?;
    let ln_bias = params
        .ln_bias
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<_>>()?;
    let g = &params.gru;
    let gru = GruNodes {
        w_reset: tape.leaf(g.w_reset.clone())?,
        w_update: tape.leaf(g.w_update.clone())?,
        w_cand: tape.leaf(g.w_cand.clone())?,
        u_reset: tape.leaf(g.u_reset.clone())?,
        u_update: tape.leaf(g.u_update.clone())?,
        u_cand: tape.leaf(g.u_cand.clone())?,
        b_reset: tape.leaf(g.b_reset.clone())?,
        b_update: tape.leaf(g.b_update.clone())?,
        b_cand: tape.leaf(g.b_cand.clone())?,
    };
    Ok(ParamNodes {
        input_proj,
        gcn_w,
        ln_gain,
        ln_bias,
        gru,
    })
}

/// Handles of the intermediate and fused embeddings of one window.
pub struct ForwardNodes {
    pub h_struct: NodeId,
    pub h_temp: NodeId,
    pub u: NodeId,
}

/// Build the structural encoder on the tape: projection, then
/// `gcn_layers` rounds of propagate → (normalize) → activate → (residual).
fn build_gcn(
    tape: &mut Tape,
    a_hat: NodeId,
    x: NodeId,
    nodes: &ParamNodes,
    cfg: &ModelConfig,
) -> Result<NodeId> {
    let n = tape.value(x).rows();
    let d_in = tape.value(x).cols();
    let proj_rows = tape.value(nodes.input_proj).rows();
    if d_in != proj_rows {
        return Err(Error::ShapeMismatch {
            op: "gcn_forward",
            detail: format!("node features have {} columns, input projection expects {}", d_in, proj_rows),
        });
    }
    let ones_n = tape.leaf(Tensor2::from_fn(n, 1, |_, _| 1.0))?;
    let mut h = tape.matmul(x, nodes.input_proj)?;
    for l in 0..cfg.gcn_layers {
        let prop = tape.matmul(a_hat, h)?;
        let mut z = tape.matmul(prop, nodes.gcn_w[l])?;
        if cfg.use_layer_norm {
            let normed = tape.layer_norm_row(z)?;
            let gain = tape.matmul(ones_n, nodes.ln_gain[l])?;
            let bias = tape.matmul(ones_n, nodes.ln_bias[l])?;
            let scaled = tape.hadamard(normed, gain)?;
            z = tape.add(scaled, bias)?;
        }
        let act = match cfg.activation {
            Activation::Relu => tape.relu(z)?,
            Activation::Tanh => tape.tanh(z)?,
        };
        h = if cfg.use_residual { tape.add(act, h)? } else { act };
    }
    Ok(h)
}

/// Build the temporal encoder on the tape. Edges run through the GRU as a
/// batch (one row per edge, histories step in lockstep); node states average
/// the final states of incident edges.
fn build_temporal(
    tape: &mut Tape,
    edge_series: &BTreeMap<(usize, usize), Vec<Vec<f64>>>,
    n: usize,
    nodes: &ParamNodes,
    cfg: &ModelConfig,
) -> Result<NodeId> {
    let d_e = tape.value(nodes.gru.w_reset).rows();
    let g_dim = tape.value(nodes.gru.w_reset).cols();
    let edges: Vec<(usize, usize)> = edge_series.keys().copied().collect();
    let e = edges.len();
    for seq in edge_series.values() {
        if seq.len() != cfg.history_len {
            return Err(Error::RaggedEdgeHistory {
                expected: cfg.history_len,
                got: seq.len(),
            });
        }
        if let Some(v) = seq.iter().find(|v| v.len() != d_e) {
            return Err(Error::ShapeMismatch {
                op: "encode_temporal",
                detail: format!("edge vector of width {}, GRU expects {}", v.len(), d_e),
            });
        }
    }

    let ones_e1 = tape.leaf(Tensor2::from_fn(e, 1, |_, _| 1.0))?;
    let ones_eg = tape.leaf(Tensor2::from_fn(e, g_dim, |_, _| 1.0))?;
    let mut h = tape.leaf(Tensor2::zeros(e, g_dim))?;
    for t in 0..cfg.history_len {
        let z = tape.leaf(Tensor2::from_fn(e, d_e, |r, c| edge_series[&edges[r]][t][c]))?;
        h = gru_step_on_tape(tape, z, h, ones_e1, ones_eg, &nodes.gru)?;
    }

    // Mean over incident edges: node i's row of the incidence matrix puts
    // 1/|inc(i)| on each edge touching i; a self-loop counts once.
    let mut inc: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (col, &(i, j)) in edges.iter().enumerate() {
        inc[i].push(col);
        if j != i {
            inc[j].push(col);
        }
    }
    let mut m = Tensor2::zeros(n, e);
    for (i, cols) in inc.iter().enumerate() {
        if cols.is_empty() {
            continue;
        }
        let w = 1.0 / cols.len() as f64;
        for &c in cols {
            m[(i, c)] = w;
        }
    }
    let m_inc = tape.leaf(m)?;
    tape.matmul(m_inc, h)
}

/// One batched GRU step on the tape. `ones_e1`/`ones_eg` broadcast the bias
/// rows and form `1 - update`.
fn gru_step_on_tape(
    tape: &mut Tape,
    z: NodeId,
    h_prev: NodeId,
    ones_e1: NodeId,
    ones_eg: NodeId,
    gru: &GruNodes,
) -> Result<NodeId> {
    let gate = |tape: &mut Tape, w: NodeId, u: NodeId, b: NodeId, hh: NodeId| -> Result<NodeId> {
        let zw = tape.matmul(z, w)?;
        let hu = tape.matmul(hh, u)?;
        let bb = tape.matmul(ones_e1, b)?;
        let s = tape.add(zw, hu)?;
        tape.add(s, bb)
    };
    let r_pre = gate(tape, gru.w_reset, gru.u_reset, gru.b_reset, h_prev)?;
    let r = tape.sigmoid(r_pre)?;
    let g_pre = gate(tape, gru.w_update, gru.u_update, gru.b_update, h_prev)?;
    let g = tape.sigmoid(g_pre)?;
    let rh = tape.hadamard(r, h_prev)?;
    let cand_pre = gate(tape, gru.w_cand, gru.u_cand, gru.b_cand, rh)?;
    let cand = tape.tanh(cand_pre)?;
    let keep = tape.hadamard(g, h_prev)?;
    let one_minus_g = tape.sub(ones_eg, g)?;
    let new = tape.hadamard(one_minus_g, cand)?;
    tape.add(new, keep)
}

/// Build the full forward pass for one window on an existing tape.
pub fn build_forward(
    tape: &mut Tape,
    graph: &ServiceGraph,
    nodes: &ParamNodes,
    cfg: &ModelConfig,
) -> Result<ForwardNodes> {
    let a_hat = tape.leaf(normalize_adjacency(graph.a())?)?;
    let x = tape.leaf(graph.x().clone())?;
    let h_struct = build_gcn(tape, a_hat, x, nodes, cfg)?;
    let h_temp = build_temporal(tape, graph.edge_series(), graph.node_count(), nodes, cfg)?;
    let u = tape.concat_cols(h_struct, h_temp)?;
    Ok(ForwardNodes { h_struct, h_temp, u })
}

/// Structural, temporal and fused embeddings of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeEmbeddings {
    pub h_struct: Tensor2,
    pub h_temp: Tensor2,
    pub u: Tensor2,
}

/// Inference-mode forward pass: runs [`build_forward`] on a throwaway tape
/// and returns the embedding values.
pub fn forward(graph: &ServiceGraph, params: &ModelParams, cfg: &ModelConfig) -> Result<NodeEmbeddings> {
    params.validate(cfg)?;
    let mut tape = Tape::new();
    let nodes = stage_params(&mut tape, params)?;
    let fwd = build_forward(&mut tape, graph, &nodes, cfg)?;
    Ok(NodeEmbeddings {
        h_struct: tape.value(fwd.h_struct).clone(),
        h_temp: tape.value(fwd.h_temp).clone(),
        u: tape.value(fwd.u).clone(),
    })
}

/// Structural encoder alone, as plain values. `a_hat` must come from
/// [`normalize_adjacency`].
pub fn gcn_forward(
    a_hat: &Tensor2,
    x: &Tensor2,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Tensor2> {
    let mut tape = Tape::new();
    let nodes = stage_params(&mut tape, params)?;
    let a = tape.leaf(a_hat.clone())?;
    let xn = tape.leaf(x.clone())?;
    let h = build_gcn(&mut tape, a, xn, &nodes, cfg)?;
    Ok(tape.value(h).clone())
}

/// Temporal encoder alone, as plain values.
pub fn encode_temporal(
    edge_series: &BTreeMap<(usize, usize), Vec<Vec<f64>>>,
    n: usize,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Tensor2> {
    let mut tape = Tape::new();
    let nodes = stage_params(&mut tape, params)?;
    let h = build_temporal(&mut tape, edge_series, n, &nodes, cfg)?;
    Ok(tape.value(h).clone())
}

/// One GRU step on a single row: `z` is `1 x d_e`, `h_prev` is `1 x g`.
///
/// ```text
/// r = sigmoid(z W_r + h U_r + b_r)
/// g = sigmoid(z W_g + h U_g + b_g)
/// c = tanh(z W_c + (r ⊙ h) U_c + b_c)
/// h' = (1 - g) ⊙ c + g ⊙ h
/// ```
pub fn gru_step(z: &Tensor2, h_prev: &Tensor2, gru: &GruParams) -> Result<Tensor2> {
    let d_e = gru.w_reset.rows();
    let g_dim = gru.w_reset.cols();
    if z.shape() != (1, d_e) || h_prev.shape() != (1, g_dim) {
        return Err(Error::ShapeMismatch {
            op: "gru_step",
            detail: format!(
                "z {:?} h {:?}, expected 1x{} and 1x{}",
                z.shape(),
                h_prev.shape(),
                d_e,
                g_dim
            ),
        });
    }
    let sig = |t: Tensor2| t.map(|v| 1.0 / (1.0 + (-v).exp()));
    let pre = |w: &Tensor2, u: &Tensor2, b: &Tensor2, hh: &Tensor2| {
        let mut s = z.matmul(w);
        s.add_scaled(&hh.matmul(u), 1.0);
        s.add_scaled(b, 1.0);
        s
    };
    let r = sig(pre(&gru.w_reset, &gru.u_reset, &gru.b_reset, h_prev));
    let g = sig(pre(&gru.w_update, &gru.u_update, &gru.b_update, h_prev));
    let rh = r.zip_map(h_prev, |a, b| a * b);
    let cand = pre(&gru.w_cand, &gru.u_cand, &gru.b_cand, &rh).map(f64::tanh);
    let out = Tensor2::from_fn(1, g_dim, |_, c| {
        (1.0 - g[(0, c)]) * cand[(0, c)] + g[(0, c)] * h_prev[(0, c)]
    });
    if !out.is_finite() {
        return Err(Error::NonFinite { op: "gru_step" });
    }
    Ok(out)
}

/// Column-concatenate the structural and temporal blocks. Slicing the result
/// at `h_struct.cols()` recovers both inputs losslessly.
pub fn fuse(h_struct: &Tensor2, h_temp: &Tensor2) -> Result<Tensor2> {
    if h_struct.rows() != h_temp.rows() {
        return Err(Error::ShapeMismatch {
            op: "fuse",
            detail: format!("{} rows vs {} rows", h_struct.rows(), h_temp.rows()),
        });
    }
    let (n, ca, cb) = (h_struct.rows(), h_struct.cols(), h_temp.cols());
    Ok(Tensor2::from_fn(n, ca + cb, |r, c| {
        if c < ca {
            h_struct[(r, c)]
        } else {
            h_temp[(r, c - ca)]
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap as Map;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            gcn_layers: 2,
            hidden_dim: 5,
            gru_hidden: 3,
            history_len: 2,
            seed: 11,
            ..ModelConfig::default()
        }
    }

    fn zero_gru(d_e: usize, g: usize) -> GruParams {
        GruParams {
            w_reset: Tensor2::zeros(d_e, g),
            w_update: Tensor2::zeros(d_e, g),
            w_cand: Tensor2::zeros(d_e, g),
            u_reset: Tensor2::zeros(g, g),
            u_update: Tensor2::zeros(g, g),
            u_cand: Tensor2::zeros(g, g),
            b_reset: Tensor2::zeros(1, g),
            b_update: Tensor2::zeros(1, g),
            b_cand: Tensor2::zeros(1, g),
        }
    }

    fn random_gru(seed: u64, d_e: usize, g: usize) -> GruParams {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |r: usize, c: usize| Tensor2::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
        GruParams {
            w_reset: t(d_e, g),
            w_update: t(d_e, g),
            w_cand: t(d_e, g),
            u_reset: t(g, g),
            u_update: t(g, g),
            u_cand: t(g, g),
            b_reset: t(1, g),
            b_update: t(1, g),
            b_cand: t(1, g),
        }
    }

    /// Scalar per-element GRU step, used as an independent oracle. The
    /// candidate needs the full reset vector, so gates come first.
    fn gru_step_scalar(z: &[f64], h: &[f64], p: &GruParams) -> Vec<f64> {
        let g_dim = p.w_reset.cols();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut out = vec![0.0; g_dim];
        let mut r = vec![0.0; g_dim];
        let mut g = vec![0.0; g_dim];
        for k in 0..g_dim {
            let mut r_pre = p.b_reset[(0, k)];
            let mut g_pre = p.b_update[(0, k)];
            for (i, zi) in z.iter().enumerate() {
                r_pre += zi * p.w_reset[(i, k)];
                g_pre += zi * p.w_update[(i, k)];
            }
            for (j, hj) in h.iter().enumerate() {
                r_pre += hj * p.u_reset[(j, k)];
                g_pre += hj * p.u_update[(j, k)];
            }
            r[k] = sig(r_pre);
            g[k] = sig(g_pre);
        }
        for k in 0..g_dim {
            let mut c_pre = p.b_cand[(0, k)];
            for (i, zi) in z.iter().enumerate() {
                c_pre += zi * p.w_cand[(i, k)];
            }
            for j in 0..h.len() {
                c_pre += (r[j] * h[j]) * p.u_cand[(j, k)];
            }
            let cand = c_pre.tanh();
            out[k] = (1.0 - g[k]) * cand + g[k] * h[k];
        }
        out
    }

    #[test]
    fn gru_step_all_zero_inputs_and_params_gives_zero_state() {
        let p = zero_gru(4, 3);
        let h = gru_step(&Tensor2::zeros(1, 4), &Tensor2::zeros(1, 3), &p).unwrap();
        assert_eq!(h.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn saturated_update_gate_is_identity_on_state() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let mut p = random_gru(rng.gen(), 4, 3);
            // sigmoid(1000) == 1.0 exactly in f64, so h' == h bitwise.
            p.b_update = Tensor2::from_fn(1, 3, |_, _| 1000.0);
            p.w_update = Tensor2::zeros(4, 3);
            p.u_update = Tensor2::zeros(3, 3);
            let z = Tensor2::from_fn(1, 4, |_, _| rng.gen_range(-3.0..3.0));
            let h = Tensor2::from_fn(1, 3, |_, _| rng.gen_range(-3.0..3.0));
            let out = gru_step(&z, &h, &p).unwrap();
            assert_eq!(out, h);
        }
    }

    #[test]
    fn gru_step_matches_scalar_oracle() {
        use rand::{Rng, SeedableRng};
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
            let p = random_gru(seed, 4, 3);
            let z = Tensor2::from_fn(1, 4, |_, _| rng.gen_range(-2.0..2.0));
            let h = Tensor2::from_fn(1, 3, |_, _| rng.gen_range(-2.0..2.0));
            let fast = gru_step(&z, &h, &p).unwrap();
            let slow = gru_step_scalar(z.data(), h.data(), &p);
            for (a, b) in fast.data().iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
            }
        }
    }

    #[test]
    fn gcn_forward_matches_matrix_power_oracle() {
        // With residual and normalization off, identity-like weights and a
        // non-negative input (so relu never clips), the stack collapses to
        // A_hat^L . X . P.
        use rand::{Rng, SeedableRng};
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 5;
            let layers = rng.gen_range(1..4usize);
            let cfg = ModelConfig {
                gcn_layers: layers,
                hidden_dim: NODE_FEATURE_DIM,
                use_residual: false,
                use_layer_norm: false,
                activation: Activation::Relu,
                gru_hidden: 2,
                history_len: 1,
                seed,
            };
            let eye = Tensor2::from_fn(NODE_FEATURE_DIM, NODE_FEATURE_DIM, |r, c| {
                if r == c {
                    1.0
                } else {
                    0.0
                }
            });
            let params = ModelParams {
                input_proj: eye.clone(),
                gcn_w: vec![eye.clone(); layers],
                ln_gain: vec![],
                ln_bias: vec![],
                gru: zero_gru(EDGE_FEATURE_DIM, 2),
            };
            let raw = Tensor2::from_fn(n, n, |_, _| if rng.gen_bool(0.4) { 1.0 } else { 0.0 });
            let a_hat = normalize_adjacency(&raw).unwrap();
            let x = Tensor2::from_fn(n, NODE_FEATURE_DIM, |_, _| rng.gen_range(0.0..2.0));

            let got = gcn_forward(&a_hat, &x, &params, &cfg).unwrap();

            // Oracle: explicit matrix power, built independently.
            let mut power = Tensor2::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 });
            for _ in 0..layers {
                power = power.matmul(&a_hat);
            }
            let want = power.matmul(&x);
            let diff = got.zip_map(&want, |a, b| a - b).max_abs();
            assert!(diff <= 1e-10, "seed {}: diff {}", seed, diff);
        }
    }

    #[test]
    fn temporal_rows_are_mean_of_incident_edge_states() {
        // Single zero-history edge 0 -> 1 in a 3-node graph: both endpoints
        // carry the state after one zero-input step, node 2 stays zero.
        let cfg = ModelConfig {
            gcn_layers: 1,
            hidden_dim: 4,
            gru_hidden: 3,
            history_len: 1,
            seed: 3,
            ..ModelConfig::default()
        };
        let params = ModelParams::init(&cfg).unwrap();
        let mut series = Map::new();
        series.insert((0usize, 1usize), vec![vec![0.0; EDGE_FEATURE_DIM]]);
        let h_temp = encode_temporal(&series, 3, &params, &cfg).unwrap();

        let state = gru_step(
            &Tensor2::zeros(1, EDGE_FEATURE_DIM),
            &Tensor2::zeros(1, cfg.gru_hidden),
            &params.gru,
        )
        .unwrap();
        for c in 0..cfg.gru_hidden {
            assert!((h_temp[(0, c)] - state[(0, c)]).abs() <= 1e-12);
            assert!((h_temp[(1, c)] - state[(0, c)]).abs() <= 1e-12);
            assert_eq!(h_temp[(2, c)], 0.0);
        }
    }

    #[test]
    fn batched_gru_agrees_with_single_row_steps() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let cfg = ModelConfig {
            history_len: 3,
            gru_hidden: 4,
            ..tiny_cfg()
        };
        let params = ModelParams::init(&cfg).unwrap();
        let mut series = Map::new();
        let seqs: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|_| {
                (0..3)
                    .map(|_| (0..EDGE_FEATURE_DIM).map(|_| rng.gen_range(-1.5..1.5)).collect())
                    .collect()
            })
            .collect();
        series.insert((0usize, 1usize), seqs[0].clone());
        series.insert((1usize, 2usize), seqs[1].clone());
        series.insert((2usize, 2usize), seqs[2].clone());
        let h_temp = encode_temporal(&series, 4, &params, &cfg).unwrap();

        // Edge 2 is the self-loop (2, 2): node 3 is isolated.
        let roll = |seq: &Vec<Vec<f64>>| {
            let mut h = Tensor2::zeros(1, cfg.gru_hidden);
            for v in seq {
                let z = Tensor2::from_vec(1, EDGE_FEATURE_DIM, v.clone()).unwrap();
                h = gru_step(&z, &h, &params.gru).unwrap();
            }
            h
        };
        let states: Vec<Tensor2> = seqs.iter().map(roll).collect();
        // Node 1 touches edge 0 only; node 2 touches edges 0 and 1; node 3
        // (index 2) touches edges 1 and its self-loop 2.
        for c in 0..cfg.gru_hidden {
            assert!((h_temp[(0, c)] - states[0][(0, c)]).abs() < 1e-12);
            let want1 = 0.5 * (states[0][(0, c)] + states[1][(0, c)]);
            assert!((h_temp[(1, c)] - want1).abs() < 1e-12);
            let want2 = 0.5 * (states[1][(0, c)] + states[2][(0, c)]);
            assert!((h_temp[(2, c)] - want2).abs() < 1e-12);
            assert_eq!(h_temp[(3, c)], 0.0);
        }
    }

    fn graph_for(
        services: &[&str],
        edges: &[(usize, usize)],
        cfg: &ModelConfig,
        seed: u64,
    ) -> ServiceGraph {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = services.len();
        let mut a = Tensor2::zeros(n, n);
        let mut series = Map::new();
        for &(i, j) in edges {
            a[(i, j)] = rng.gen_range(1..4) as f64;
            series.insert(
                (i, j),
                (0..cfg.history_len)
                    .map(|_| (0..EDGE_FEATURE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect(),
            );
        }
        let x = Tensor2::from_fn(n, NODE_FEATURE_DIM, |_, _| rng.gen_range(-1.0..1.0));
        ServiceGraph::new(
            0,
            services.iter().map(|s| s.to_string()).collect(),
            x,
            a,
            series,
        )
        .unwrap()
    }

    #[test]
    fn forward_produces_fused_embeddings_of_expected_shape() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg).unwrap();
        let g = graph_for(&["a", "b", "c"], &[(0, 1), (1, 2)], &cfg, 1);
        let emb = forward(&g, &params, &cfg).unwrap();
        assert_eq!(emb.h_struct.shape(), (3, cfg.hidden_dim));
        assert_eq!(emb.h_temp.shape(), (3, cfg.gru_hidden));
        assert_eq!(emb.u.shape(), (3, cfg.embedding_dim()));
        // Fusion is a plain column concatenation: rebuilding it from the
        // blocks reproduces the fused output exactly.
        let fused = fuse(&emb.h_struct, &emb.h_temp).unwrap();
        assert_eq!(fused, emb.u);
    }

    #[test]
    fn forward_on_empty_graph_yields_empty_embeddings() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg).unwrap();
        let g = ServiceGraph::new(0, vec![], Tensor2::zeros(0, NODE_FEATURE_DIM), Tensor2::zeros(0, 0), Map::new()).unwrap();
        let emb = forward(&g, &params, &cfg).unwrap();
        assert_eq!(emb.u.shape(), (0, cfg.embedding_dim()));
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg).unwrap();
        let g = graph_for(&["a", "b", "c", "d"], &[(0, 1), (1, 2), (0, 3)], &cfg, 2);
        let e1 = forward(&g, &params, &cfg).unwrap();
        let e2 = forward(&g, &params, &cfg).unwrap();
        assert_eq!(e1.u, e2.u);
    }

    #[test]
    fn renaming_services_permutes_embedding_rows() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg).unwrap();
        let g1 = graph_for(&["a", "b", "c"], &[(0, 1), (1, 2), (2, 0)], &cfg, 9);

        // Rename a->z so the sorted order becomes b, c, z: permutation
        // old->new is 0->2, 1->0, 2->1.
        let perm = [2usize, 0, 1];
        let services2 = vec!["b".to_string(), "c".to_string(), "z".to_string()];
        let inv = |new: usize| perm.iter().position(|&p| p == new).unwrap();
        let x2 = Tensor2::from_fn(3, NODE_FEATURE_DIM, |r, c| g1.x()[(inv(r), c)]);
        let a2 = Tensor2::from_fn(3, 3, |r, c| g1.a()[(inv(r), inv(c))]);
        let series2: Map<(usize, usize), Vec<Vec<f64>>> = g1
            .edge_series()
            .iter()
            .map(|(&(i, j), v)| ((perm[i], perm[j]), v.clone()))
            .collect();
        let g2 = ServiceGraph::new(0, services2, x2, a2, series2).unwrap();

        let e1 = forward(&g1, &params, &cfg).unwrap();
        let e2 = forward(&g2, &params, &cfg).unwrap();
        for old in 0..3 {
            for c in 0..cfg.embedding_dim() {
                let diff = (e1.u[(old, c)] - e2.u[(perm[old], c)]).abs();
                assert!(diff <= 1e-12, "row {} col {}: {}", old, c, diff);
            }
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = tiny_cfg();
        let p1 = ModelParams::init(&cfg).unwrap();
        let p2 = ModelParams::init(&cfg).unwrap();
        assert_eq!(p1, p2);
        let other = ModelParams::init(&ModelConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(p1, other);
    }

    #[test]
    fn model_doc_round_trips_bit_exactly() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg).unwrap();
        let doc = ModelDoc::pack(&cfg, &params);
        let json = crate::jsonfmt::to_string(&doc).unwrap();
        let back: ModelDoc = serde_json::from_str(&json).unwrap();
        let (cfg2, params2) = back.unpack().unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(params, params2);
    }

    #[test]
    fn unpack_rejects_inconsistent_shapes() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg).unwrap();
        let mut doc = ModelDoc::pack(&cfg, &params);
        doc.config.hidden_dim += 1;
        assert!(matches!(
            doc.unpack(),
            Err(Error::ShapeMismatch { op: "model_params", .. })
        ));
    }

    #[test]
    fn ragged_history_is_rejected() {
        let cfg = tiny_cfg(); // history_len 2
        let params = ModelParams::init(&cfg).unwrap();
        let mut series = Map::new();
        series.insert((0usize, 1usize), vec![vec![0.0; EDGE_FEATURE_DIM]]); // length 1
        assert!(matches!(
            encode_temporal(&series, 2, &params, &cfg),
            Err(Error::RaggedEdgeHistory { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn feature_width_mismatch_names_both_dims() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg).unwrap();
        let a_hat = normalize_adjacency(&Tensor2::zeros(2, 2)).unwrap();
        let x = Tensor2::zeros(2, NODE_FEATURE_DIM + 1);
        let err = gcn_forward(&a_hat, &x, &params, &cfg).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('7') && msg.contains('6'), "{}", msg);
    }

    #[test]
    fn full_forward_gradients_pass_finite_difference_check() {
        use crate::gradcheck;
        let cfg = ModelConfig {
            gcn_layers: 2,
            hidden_dim: 4,
            gru_hidden: 3,
            history_len: 2,
            seed: 21,
            ..ModelConfig::default()
        };
        let params = ModelParams::init(&cfg).unwrap();
        let g = graph_for(&["a", "b", "c"], &[(0, 1), (1, 2)], &cfg, 4);
        let leaves: Vec<Tensor2> = params.named().into_iter().map(|(_, t)| t.clone()).collect();
        let worst = gradcheck::check_gradients(&leaves, 1e-5, |tape, ids| {
            let nodes = restage(ids);
            let fwd = build_forward(tape, &g, &nodes, &cfg)?;
            tape.sum_sq(fwd.u)
        })
        .unwrap();
        assert!(worst <= 1e-4, "worst rel err {}", worst);
    }

    /// Rebuild a ParamNodes view over already-registered leaves, in
    /// `ModelParams::named` order (2 layers with layer norm, as in the
    /// gradient test config).
    fn restage(ids: &[NodeId]) -> ParamNodes {
        ParamNodes {
            input_proj: ids[0],
            gcn_w: vec![ids[1], ids[2]],
            ln_gain: vec![ids[3], ids[5]],
            ln_bias: vec![ids[4], ids[6]],
            gru: GruNodes {
                w_reset: ids[7],
                w_update: ids[8],
                w_cand: ids[9],
                u_reset: ids[10],
                u_update: ids[11],
                u_cand: ids[12],
                b_reset: ids[13],
                b_update: ids[14],
                b_cand: ids[15],
            },
        }
    }
}
