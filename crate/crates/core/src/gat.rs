//! Residual graph-attention network over a magnification graph.
//!
//! Per layer, node embeddings are linearly transformed, attention logits are
//! scored per directed arc from both endpoint embeddings plus their position
//! difference, normalized by a softmax over each destination's incoming
//! arcs, and the attended messages are summed and passed through ReLU. The
//! three trailing slots of each attention vector weight the position
//! difference, which is how node positions condition the attention.
//!
//! A GCN aggregator (symmetric degree normalization, no attention) is
//! available as a configuration alternative.

use crate::autodiff::{Tape, TapeTensor};
use crate::error::{Error, Result};
use crate::graph::MagnificationGraph;
use crate::plasticity::glorot;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Default negative slope of the LeakyReLU applied to attention logits.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    Gat,
    Gcn,
}

/// Network hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatConfig {
    /// Node embedding input width; the graph supplies [c1, c2, c3, m].
    pub input_dim: usize,
    pub hidden: usize,
    /// Layer count D; must be at least 2*(levels-1)+1 so a message can
    /// traverse all magnification levels.
    pub layers: usize,
    /// Attention heads; head outputs are averaged, not concatenated.
    pub heads: usize,
    pub dropout: f64,
    pub aggregator: Aggregator,
}

impl Default for GatConfig {
    fn default() -> Self {
        Self {
            input_dim: 4,
            hidden: 32,
            layers: 6,
            heads: 1,
            dropout: 0.1,
            aggregator: Aggregator::Gat,
        }
    }
}

impl GatConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.layers == 0 || self.heads == 0 {
            return Err(Error::InvalidArgument {
                what: "GatConfig",
                detail: "dims, layers and heads must be positive".into(),
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument {
                what: "GatConfig",
                detail: format!("dropout {} outside [0, 1)", self.dropout),
            });
        }
        Ok(())
    }

    /// Minimum depth for a graph with `levels` magnification levels.
    pub fn required_depth(levels: usize) -> usize {
        2 * (levels - 1) + 1
    }

    pub fn check_depth(&self, levels: usize) -> Result<()> {
        let need = Self::required_depth(levels);
        if self.layers < need {
            return Err(Error::InvalidArgument {
                what: "GatConfig",
                detail: format!(
                    "{} layers cannot span {levels} levels; need at least {need}",
                    self.layers
                ),
            });
        }
        Ok(())
    }
}

/// One layer's parameters. The attention vector holds `heads` rows of
/// `2*out_dim + 3` weights: destination embedding, source embedding, and
/// the (dst - src) position difference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatLayerParams {
    pub in_dim: usize,
    pub out_dim: usize,
    /// in_dim x out_dim.
    pub w: Vec<f64>,
    /// heads x (2*out_dim + 3).
    pub a: Vec<f64>,
    /// out_dim bias, added before the activation.
    pub b: Vec<f64>,
}

/// Full model: D attention layers plus a scalar sigmoid output head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatModel {
    pub config: GatConfig,
    pub layers: Vec<GatLayerParams>,
    /// hidden x 1.
    pub head_w: Vec<f64>,
    pub head_b: f64,
}

impl GatModel {
    /// Glorot-uniform weights and attention vectors, zero biases,
    /// deterministic per seed.
    pub fn init(config: GatConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let in_dim = if l == 0 { config.input_dim } else { config.hidden };
            let out_dim = config.hidden;
            let a_len = 2 * out_dim + 3;
            layers.push(GatLayerParams {
                in_dim,
                out_dim,
                w: glorot(&mut rng, in_dim, out_dim, in_dim * out_dim),
                a: glorot(&mut rng, a_len, 1, config.heads * a_len),
                b: vec![0.0; out_dim],
            });
        }
        let head_w = glorot(&mut rng, config.hidden, 1, config.hidden);
        Ok(Self {
            config,
            layers,
            head_w,
            head_b: 0.0,
        })
    }

    /// Copy all parameters onto a tape. Attention vectors are laid out as a
    /// `(2*out_dim + 3) x heads` matrix so each head's vector is a column.
    pub fn to_tape(&self, tape: &mut Tape) -> Result<TapeModel> {
        let heads = self.config.heads;
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let a_len = 2 * layer.out_dim + 3;
            let mut a_t = vec![0.0; heads * a_len];
            for head in 0..heads {
                for k in 0..a_len {
                    a_t[k * heads + head] = layer.a[head * a_len + k];
                }
            }
            layers.push(TapeLayer {
                w: tape.leaf(layer.in_dim, layer.out_dim, &layer.w)?,
                a: tape.leaf(a_len, heads, &a_t)?,
                b: tape.leaf(1, layer.out_dim, &layer.b)?,
            });
        }
        Ok(TapeModel {
            layers,
            head_w: tape.leaf(self.config.hidden, 1, &self.head_w)?,
            head_b: tape.scalar(self.head_b),
        })
    }
}

/// Tape handles for a [`GatModel`]'s parameters.
#[derive(Debug, Clone)]
pub struct TapeModel {
    pub layers: Vec<TapeLayer>,
    pub head_w: TapeTensor,
    pub head_b: TapeTensor,
}

#[derive(Debug, Clone, Copy)]
pub struct TapeLayer {
    pub w: TapeTensor,
    pub a: TapeTensor,
    pub b: TapeTensor,
}

impl TapeModel {
    /// Every parameter tensor in a fixed order matching
    /// [`crate::train::collect_model_params`].
    pub fn tensors(&self) -> Vec<TapeTensor> {
        let mut out = Vec::with_capacity(self.layers.len() * 3 + 2);
        for l in &self.layers {
            out.push(l.w);
            out.push(l.a);
            out.push(l.b);
        }
        out.push(self.head_w);
        out.push(self.head_b);
        out
    }
}

/// Directed-arc view of a graph for the attention layers: parallel arrays
/// of source ids, destination ids (non-decreasing), and for the GCN path
/// the symmetric normalization coefficient per arc.
#[derive(Debug, Clone)]
pub struct ArcView {
    pub src: Vec<u32>,
    pub dst: Vec<u32>,
    pub num_nodes: usize,
    /// 1 / (sqrt|N(src)| * sqrt|N(dst)|), degrees counted on the self-arc
    /// view.
    pub gcn_coef: Vec<f64>,
}

impl ArcView {
    pub fn from_graph(graph: &MagnificationGraph) -> Self {
        Self::from_arcs(graph.arcs(), graph.node_count())
    }

    /// Build from explicit (src, dst) arcs; arcs must be sorted by
    /// destination so each destination's incoming arcs are contiguous.
    pub fn from_arcs(arcs: &[(u32, u32)], num_nodes: usize) -> Self {
        let mut degree = vec![0usize; num_nodes];
        for &(_, d) in arcs {
            degree[d as usize] += 1;
        }
        let src: Vec<u32> = arcs.iter().map(|&(s, _)| s).collect();
        let dst: Vec<u32> = arcs.iter().map(|&(_, d)| d).collect();
        let gcn_coef = arcs
            .iter()
            .map(|&(s, d)| {
                1.0 / ((degree[s as usize] as f64).sqrt() * (degree[d as usize] as f64).sqrt())
            })
            .collect();
        Self {
            src,
            dst,
            num_nodes,
            gcn_coef,
        }
    }

    pub fn num_arcs(&self) -> usize {
        self.src.len()
    }
}

/// Per-layer attention coefficients for every directed arc. For each
/// destination node and layer the incoming coefficients sum to 1. Heads are
/// averaged into a single coefficient per arc.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AttentionRecords {
    /// (src, dst) per arc, sorted by destination.
    pub arcs: Vec<(u32, u32)>,
    /// One coefficient vector per layer, aligned with `arcs`.
    pub per_layer: Vec<Vec<f64>>,
}

/// Un-normalized attention logit for one arc: the hand-checkable scalar
/// version of what the layers compute in bulk.
///
/// `a` must have length `2 * z.len() + 3`; its trailing three slots weight
/// `pos_i - pos_j`.
pub fn attention_logits(
    z_i: &[f64],
    z_j: &[f64],
    pos_i: [f64; 3],
    pos_j: [f64; 3],
    a: &[f64],
    slope: f64,
) -> Result<f64> {
    if z_i.len() != z_j.len() || a.len() != 2 * z_i.len() + 3 {
        return Err(Error::ShapeMismatch {
            op: "attention_logits",
            detail: format!(
                "z_i {}, z_j {}, a {} (want 2*{}+3)",
                z_i.len(),
                z_j.len(),
                a.len(),
                z_i.len()
            ),
        });
    }
    let f = z_i.len();
    let mut s = 0.0;
    for (k, &z) in z_i.iter().enumerate() {
        s += a[k] * z;
    }
    for (k, &z) in z_j.iter().enumerate() {
        s += a[f + k] * z;
    }
    for k in 0..3 {
        s += a[2 * f + k] * (pos_i[k] - pos_j[k]);
    }
    Ok(if s > 0.0 { s } else { slope * s })
}

/// One attention layer on the tape.
///
/// `h` is N x F node embeddings, `positions` N x 3. Returns the N x out_dim
/// activations and the head-averaged attention coefficients per arc.
pub fn gat_layer_forward(
    tape: &mut Tape,
    layer: &TapeLayer,
    arcs: &ArcView,
    h: TapeTensor,
    positions: TapeTensor,
) -> Result<(TapeTensor, Vec<f64>)> {
    let n = arcs.num_nodes;
    if h.rows() != n || positions.rows() != n || positions.cols() != 3 {
        return Err(Error::ShapeMismatch {
            op: "gat_layer_forward",
            detail: format!(
                "h {}x{}, positions {}x{} for {n} nodes",
                h.rows(),
                h.cols(),
                positions.rows(),
                positions.cols()
            ),
        });
    }
    let heads = layer.a.cols();
    let out_dim = layer.w.cols();
    let z = tape.matmul(h, layer.w)?;
    let z_dst = tape.gather_rows(z, arcs.dst.clone())?;
    let z_src = tape.gather_rows(z, arcs.src.clone())?;
    let p_dst = tape.gather_rows(positions, arcs.dst.clone())?;
    let p_src = tape.gather_rows(positions, arcs.src.clone())?;
    let dp = tape.sub(p_dst, p_src)?;
    // [z_dst || z_src || (pos_dst - pos_src)] per arc
    let cat = tape.concat_cols(&[z_dst, z_src, dp])?;

    let mut summed = None;
    let mut alpha_mean = vec![0.0; arcs.num_arcs()];
    for head in 0..heads {
        let a_col = tape.select_columns(layer.a, head, 1)?;
        let logits = tape.matmul(cat, a_col)?;
        let logits = tape.leaky_relu(logits, LEAKY_SLOPE);
        let alpha = tape.segmented_softmax(logits, arcs.dst.clone())?;
        for (dst, v) in alpha_mean.iter_mut().zip(tape.values(alpha)) {
            *dst += v / heads as f64;
        }
        let weighted = tape.mul(z_src, alpha)?;
        let agg = tape.segmented_sum(weighted, arcs.dst.clone(), n)?;
        summed = Some(match summed {
            None => agg,
            Some(s) => tape.add(s, agg)?,
        });
    }
    let mut agg = summed.expect("heads >= 1");
    if heads > 1 {
        agg = tape.mul_scalar(agg, 1.0 / heads as f64);
    }
    let agg = tape.add(agg, layer.b)?;
    let out = tape.relu(agg);
    debug_assert_eq!(out.cols(), out_dim);
    Ok((out, alpha_mean))
}

/// Turn a 1 x n row into an n x 1 column (gather of single columns).
fn transpose_row(tape: &mut Tape, row: TapeTensor) -> Result<TapeTensor> {
    let parts: Result<Vec<TapeTensor>> = (0..row.cols())
        .map(|j| tape.select_columns(row, j, 1))
        .collect();
    tape.concat_rows(&parts?)
}

/// One GCN layer on the tape: out = ReLU(b + sum over incoming arcs of
/// coef * (h W)), coef the symmetric degree normalization.
pub fn gcn_layer_forward(
    tape: &mut Tape,
    layer: &TapeLayer,
    arcs: &ArcView,
    h: TapeTensor,
) -> Result<TapeTensor> {
    let n = arcs.num_nodes;
    if h.rows() != n {
        return Err(Error::ShapeMismatch {
            op: "gcn_layer_forward",
            detail: format!("h {}x{} for {n} nodes", h.rows(), h.cols()),
        });
    }
    let z = tape.matmul(h, layer.w)?;
    let z_src = tape.gather_rows(z, arcs.src.clone())?;
    let coef = tape.leaf(arcs.num_arcs(), 1, &arcs.gcn_coef)?;
    let scaled = tape.mul(z_src, coef)?;
    let agg = tape.segmented_sum(scaled, arcs.dst.clone(), n)?;
    let agg = tape.add(agg, layer.b)?;
    Ok(tape.relu(agg))
}

/// Residual stack output: per-node probabilities plus attention records.
pub struct ForwardResult {
    /// N x 1 sigmoid probabilities on the tape.
    pub probabilities: TapeTensor,
    pub attention: AttentionRecords,
}

/// Run the full residual network on a tape.
///
/// The first layer replaces the embedding (it changes the width); every
/// later layer adds its (optionally dropped-out) output to its input.
/// Dropout masks are drawn from `rng` when `TrainMode::Train`; evaluation
/// applies none.
pub fn forward_on_tape(
    tape: &mut Tape,
    model: &TapeModel,
    config: &GatConfig,
    arcs: &ArcView,
    features: TapeTensor,
    positions: TapeTensor,
    mode: TrainMode,
    rng: &mut ChaCha8Rng,
) -> Result<ForwardResult> {
    if features.cols() != config.input_dim {
        return Err(Error::ShapeMismatch {
            op: "network_forward",
            detail: format!(
                "feature width {} vs model input {}",
                features.cols(),
                config.input_dim
            ),
        });
    }
    let mut records = AttentionRecords {
        arcs: arcs
            .src
            .iter()
            .zip(&arcs.dst)
            .map(|(&s, &d)| (s, d))
            .collect(),
        per_layer: Vec::new(),
    };
    let rate = match mode {
        TrainMode::Train => config.dropout,
        TrainMode::Eval => 0.0,
    };
    let mut h = features;
    for (l, layer) in model.layers.iter().enumerate() {
        let out = match config.aggregator {
            Aggregator::Gat => {
                let (out, alpha) = gat_layer_forward(tape, layer, arcs, h, positions)?;
                records.per_layer.push(alpha);
                out
            }
            Aggregator::Gcn => gcn_layer_forward(tape, layer, arcs, h)?,
        };
        let out = tape.dropout(out, rate, rng)?;
        h = if l == 0 || h.cols() != out.cols() {
            out
        } else {
            tape.add(h, out)?
        };
    }
    let logits = tape.matmul(h, model.head_w)?;
    let logits = tape.add_scalar(logits, tape.value_scalar(model.head_b));
    // keep the bias differentiable: add as broadcast tensor instead
    let _ = logits;
    let bias_row = model.head_b;
    let logits = tape.matmul(h, model.head_w)?;
    let bias = broadcast_scalar(tape, bias_row, logits.rows())?;
    let logits = tape.add(logits, bias)?;
    let probabilities = tape.sigmoid(logits);
    Ok(ForwardResult {
        probabilities,
        attention: records,
    })
}

/// Replicate a 1x1 scalar tensor into an n x 1 column on the tape.
fn broadcast_scalar(tape: &mut Tape, s: TapeTensor, n: usize) -> Result<TapeTensor> {
    let rows = vec![0u32; n];
    tape.gather_rows(s, rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Train,
    Eval,
}

/// Convenience wrapper: run the network over a graph's current features and
/// positions on a fresh tape and return plain values.
///
/// Deterministic given `seed` and `mode`. Fails when the model is too
/// shallow for the graph's level count.
pub fn network_forward(
    graph: &MagnificationGraph,
    model: &GatModel,
    mode: TrainMode,
    seed: u64,
) -> Result<(Vec<f64>, AttentionRecords)> {
    model.config.check_depth(graph.levels())?;
    let mut tape = Tape::new();
    let tape_model = model.to_tape(&mut tape)?;
    let arcs = ArcView::from_graph(graph);
    let n = graph.node_count();
    let features = tape.leaf(n, 4, &graph.input_features())?;
    let positions = tape.leaf(n, 3, &graph.positions())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let result = forward_on_tape(
        &mut tape,
        &tape_model,
        &model.config,
        &arcs,
        features,
        positions,
        mode,
        &mut rng,
    )?;
    Ok((
        tape.values(result.probabilities).to_vec(),
        result.attention,
    ))
}
