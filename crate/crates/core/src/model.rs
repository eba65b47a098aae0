//! GraphMAGE node classifier and its GraphSAGE / ResGCN comparators.
//!
//! All variants share one parameter layout:
//!
//! * an affine embedding `input_dim → width` producing `h⁰`,
//! * per layer an MLP `2·width → width → width` (affine, relu, dropout,
//!   affine) applied to `concat(self, AGG(h^{l−1}))`,
//! * an affine head `width → 1` producing one logit per node.
//!
//! The variants differ only in the self term of the concatenation and in
//! whether an identity residual is added after each layer:
//!
//! | variant | self term | residual |
//! |---------|-----------|----------|
//! | `graphmage` | `h⁰` | no |
//! | `graphsage` | `h^{l−1}` | no |
//! | `resgcn-over-mage` | `h⁰` | `h^l += h^{l−1}` |
//! | `resgcn-over-sage` | `h^{l−1}` | `h^l += h^{l−1}` |

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geo::SpatialGraph;
use crate::tensor::{SparseRows, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    GraphMage,
    GraphSage,
    ResGcnOverMage,
    ResGcnOverSage,
}

impl Variant {
    /// Whether the concatenated self term is the embedding `h⁰`.
    pub fn uses_initial_embedding(self) -> bool {
        matches!(self, Variant::GraphMage | Variant::ResGcnOverMage)
    }

    pub fn has_residual(self) -> bool {
        matches!(self, Variant::ResGcnOverMage | Variant::ResGcnOverSage)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::GraphMage => "graphmage",
            Variant::GraphSage => "graphsage",
            Variant::ResGcnOverMage => "resgcn-over-mage",
            Variant::ResGcnOverSage => "resgcn-over-sage",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "graphmage" => Ok(Variant::GraphMage),
            "graphsage" => Ok(Variant::GraphSage),
            "resgcn-over-mage" => Ok(Variant::ResGcnOverMage),
            "resgcn-over-sage" => Ok(Variant::ResGcnOverSage),
            other => Err(Error::Param(format!("unknown model variant {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Aggregator {
    Mean,
    /// Weights proportional to `1/distance`, normalized per node.
    InverseDistance,
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregator::Mean => "mean",
            Aggregator::InverseDistance => "inverse-distance",
        })
    }
}

impl FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregator::Mean),
            "inverse-distance" => Ok(Aggregator::InverseDistance),
            other => Err(Error::Param(format!("unknown aggregator {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub num_layers: usize,
    pub width: usize,
    pub dropout_p: f64,
    pub aggregator: Aggregator,
    pub input_dim: usize,
}

impl ModelConfig {
    /// Four layers of width 128 with dropout 0.2 and mean aggregation.
    pub fn graphmage(input_dim: usize) -> Self {
        Self {
            variant: Variant::GraphMage,
            num_layers: 4,
            width: 128,
            dropout_p: 0.2,
            aggregator: Aggregator::Mean,
            input_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Param("num_layers must be at least 1".into()));
        }
        if self.width == 0 || self.input_dim == 0 {
            return Err(Error::Param("width and input_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Param(format!(
                "dropout {} not in [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    /// `in × out`, applied as `x · W`.
    pub weight: Tensor,
    /// `1 × out`.
    pub bias: Tensor,
}

impl Affine {
    fn glorot<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weight: Tensor::matrix(fan_in, fan_out, w).expect("sized"),
            bias: Tensor::zeros(vec![1, fan_out]),
        }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![fan_in, fan_out]),
            bias: Tensor::zeros(vec![1, fan_out]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub first: Affine,
    pub second: Affine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters {
    pub embed: Affine,
    pub layers: Vec<Mlp>,
    pub head: Affine,
}

impl ModelParameters {
    /// Glorot-uniform weights, zero biases; deterministic per seed.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = config.width;
        let embed = Affine::glorot(config.input_dim, w, &mut rng);
        let layers = (0..config.num_layers)
            .map(|_| Mlp {
                first: Affine::glorot(2 * w, w, &mut rng),
                second: Affine::glorot(w, w, &mut rng),
            })
            .collect();
        let head = Affine::glorot(w, 1, &mut rng);
        Ok(Self {
            embed,
            layers,
            head,
        })
    }

    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let w = config.width;
        Self {
            embed: Affine::zeros(config.input_dim, w),
            layers: (0..config.num_layers)
                .map(|_| Mlp {
                    first: Affine::zeros(2 * w, w),
                    second: Affine::zeros(w, w),
                })
                .collect(),
            head: Affine::zeros(w, 1),
        }
    }

    /// Canonical tensor names, matching the order of [`Self::tensors`].
    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["embed.weight".to_string(), "embed.bias".to_string()];
        for l in 1..=self.layers.len() {
            for part in ["w1", "b1", "w2", "b2"] {
                names.push(format!("layer{l}.{part}"));
            }
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut t = vec![&self.embed.weight, &self.embed.bias];
        for m in &self.layers {
            t.extend([
                &m.first.weight,
                &m.first.bias,
                &m.second.weight,
                &m.second.bias,
            ]);
        }
        t.push(&self.head.weight);
        t.push(&self.head.bias);
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = vec![&mut self.embed.weight, &mut self.embed.bias];
        for m in &mut self.layers {
            t.extend([
                &mut m.first.weight,
                &mut m.first.bias,
                &mut m.second.weight,
                &mut m.second.bias,
            ]);
        }
        t.push(&mut self.head.weight);
        t.push(&mut self.head.bias);
        t
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Checks every tensor shape against `config`.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expected = Self::zeros(config);
        if self.layers.len() != expected.layers.len() {
            return Err(Error::Shape(format!(
                "parameters have {} layers, config wants {}",
                self.layers.len(),
                expected.layers.len()
            )));
        }
        for ((name, got), want) in self
            .names()
            .iter()
            .zip(self.tensors())
            .zip(expected.tensors())
        {
            if got.shape() != want.shape() {
                return Err(Error::Shape(format!(
                    "{name}: shape {:?}, config wants {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        Ok(())
    }

    /// Records every tensor on `tape` as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> Result<ParamVars> {
        let all = self
            .tensors()
            .into_iter()
            .map(|t| tape.param(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(ParamVars { all })
    }
}

/// Tape handles for a registered [`ModelParameters`], in canonical order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub all: Vec<Var>,
}

impl ParamVars {
    fn embed(&self) -> (Var, Var) {
        (self.all[0], self.all[1])
    }

    fn layer(&self, l: usize) -> [Var; 4] {
        let b = 2 + 4 * l;
        [
            self.all[b],
            self.all[b + 1],
            self.all[b + 2],
            self.all[b + 3],
        ]
    }

    fn head(&self) -> (Var, Var) {
        let n = self.all.len();
        (self.all[n - 2], self.all[n - 1])
    }

    /// Gradients after `backward`, zero-filled where none reached.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.all
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec()))
            })
            .collect()
    }
}

/// Aggregation weights for a graph: mean or normalized inverse distance
/// over in-neighbors. Nodes without in-neighbors get an empty row, so
/// their aggregate is the zero vector.
pub fn neighbor_weights(graph: &SpatialGraph, aggregator: Aggregator) -> Result<Arc<SparseRows>> {
    let rows = (0..graph.num_nodes())
        .map(|v| {
            let nbrs = graph.in_neighbors(v);
            if nbrs.is_empty() {
                return Ok(Vec::new());
            }
            match aggregator {
                Aggregator::Mean => {
                    let w = 1.0 / nbrs.len() as f64;
                    Ok(nbrs.iter().map(|n| (n.source, w)).collect())
                }
                Aggregator::InverseDistance => {
                    if nbrs.iter().any(|n| n.distance_km == 0.0) {
                        return Err(Error::Data(format!(
                            "zero-distance edge into {}",
                            graph.node_ids()[v]
                        )));
                    }
                    let total: f64 = nbrs.iter().map(|n| 1.0 / n.distance_km).sum();
                    Ok(nbrs
                        .iter()
                        .map(|n| (n.source, (1.0 / n.distance_km) / total))
                        .collect())
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Arc::new(SparseRows::new(graph.num_nodes(), rows)?))
}

/// `AGG(h_u, u ∈ N(v))` for every node, outside any tape.
pub fn aggregate_neighbors(
    embeddings: &Tensor,
    graph: &SpatialGraph,
    aggregator: Aggregator,
) -> Result<Tensor> {
    if embeddings.rows() != graph.num_nodes() {
        return Err(Error::Shape(format!(
            "{} embedding rows for {} nodes",
            embeddings.rows(),
            graph.num_nodes()
        )));
    }
    let w = neighbor_weights(graph, aggregator)?;
    let mut tape = Tape::new();
    let h = tape.constant(embeddings.clone())?;
    let a = tape.aggregate(h, &w)?;
    Ok(tape.value(a).clone())
}

/// Tape handles produced by a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `num_nodes × 1`.
    pub logits: Var,
    /// `h⁰ … h^L`, each `num_nodes × width`.
    pub embeddings: Vec<Var>,
}

fn affine(tape: &mut Tape, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// Forward pass of any variant on an existing tape.
#[allow(clippy::too_many_arguments)]
pub fn forward_on_tape<R: Rng + ?Sized>(
    tape: &mut Tape,
    params: &ParamVars,
    config: &ModelConfig,
    features: Var,
    weights: &Arc<SparseRows>,
    training: bool,
    rng: &mut R,
) -> Result<ForwardOutput> {
    let (n, d) = tape.value(features).dims2()?;
    if d != config.input_dim {
        return Err(Error::Shape(format!(
            "features have {d} columns, model expects {}",
            config.input_dim
        )));
    }
    if weights.num_rows() != n {
        return Err(Error::Shape(format!(
            "graph has {} nodes, features have {n} rows",
            weights.num_rows()
        )));
    }
    let h0 = affine(tape, features, params.embed())?;
    let mut embeddings = vec![h0];
    let mut prev = h0;
    for l in 0..config.num_layers {
        let [w1, b1, w2, b2] = params.layer(l);
        let agg = tape.aggregate(prev, weights)?;
        let own = if config.variant.uses_initial_embedding() {
            h0
        } else {
            prev
        };
        let joined = tape.concat(own, agg)?;
        let hidden = affine(tape, joined, (w1, b1))?;
        let hidden = tape.relu(hidden)?;
        let hidden = tape.dropout(hidden, config.dropout_p, training, rng)?;
        let mut out = affine(tape, hidden, (w2, b2))?;
        if config.variant.has_residual() {
            out = tape.add(out, prev)?;
        }
        embeddings.push(out);
        prev = out;
    }
    let logits = affine(tape, prev, params.head())?;
    Ok(ForwardOutput { logits, embeddings })
}

/// Values of a forward pass run on a private tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub embeddings: Vec<Tensor>,
}

impl Prediction {
    pub fn probabilities(&self) -> Vec<f64> {
        self.logits
            .iter()
            .map(|&z| crate::tensor::sigmoid(z))
            .collect()
    }
}

fn run_forward<R: Rng + ?Sized>(
    expected: &[Variant],
    features: &Tensor,
    graph: &SpatialGraph,
    params: &ModelParameters,
    config: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<Prediction> {
    if !expected.contains(&config.variant) {
        return Err(Error::Param(format!(
            "config variant {} not handled here (expects {:?})",
            config.variant, expected
        )));
    }
    params.check_shapes(config)?;
    let weights = neighbor_weights(graph, config.aggregator)?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape)?;
    let x = tape.constant(features.clone())?;
    let out = forward_on_tape(&mut tape, &vars, config, x, &weights, training, rng)?;
    Ok(Prediction {
        logits: tape.value(out.logits).values().to_vec(),
        embeddings: out
            .embeddings
            .iter()
            .map(|&v| tape.value(v).clone())
            .collect(),
    })
}

/// `h^l_v = MLP_l(concat(h⁰_v, AGG(h^{l−1}_u)))`.
pub fn graphmage_forward<R: Rng + ?Sized>(
    features: &Tensor,
    graph: &SpatialGraph,
    params: &ModelParameters,
    config: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<Prediction> {
    run_forward(
        &[Variant::GraphMage],
        features,
        graph,
        params,
        config,
        training,
        rng,
    )
}

/// `h^l_v = MLP_l(concat(h^{l−1}_v, AGG(h^{l−1}_u)))`.
pub fn graphsage_forward<R: Rng + ?Sized>(
    features: &Tensor,
    graph: &SpatialGraph,
    params: &ModelParameters,
    config: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<Prediction> {
    run_forward(
        &[Variant::GraphSage],
        features,
        graph,
        params,
        config,
        training,
        rng,
    )
}

/// Base layer of the matching variant plus `h^l += h^{l−1}`.
pub fn resgcn_forward<R: Rng + ?Sized>(
    features: &Tensor,
    graph: &SpatialGraph,
    params: &ModelParameters,
    config: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<Prediction> {
    run_forward(
        &[Variant::ResGcnOverMage, Variant::ResGcnOverSage],
        features,
        graph,
        params,
        config,
        training,
        rng,
    )
}

/// Any variant, evaluation mode.
pub fn predict(
    features: &Tensor,
    graph: &SpatialGraph,
    params: &ModelParameters,
    config: &ModelConfig,
) -> Result<Prediction> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    run_forward(
        &[
            Variant::GraphMage,
            Variant::GraphSage,
            Variant::ResGcnOverMage,
            Variant::ResGcnOverSage,
        ],
        features,
        graph,
        params,
        config,
        false,
        &mut rng,
    )
}

/// Root-mean pairwise spread of embedding rows:
/// `sqrt(Σ_{i,j} ‖h_i − h_j‖² / (2·n²·d))`, which equals the square root of
/// the mean per-column variance.
pub fn embedding_dispersion(h: &Tensor) -> f64 {
    let (n, d) = match h.dims2() {
        Ok(x) if x.0 > 0 && x.1 > 0 => x,
        _ => return 0.0,
    };
    let mut total = 0.0;
    for j in 0..d {
        let mean = (0..n).map(|i| h.get(i, j)).sum::<f64>() / n as f64;
        total += (0..n).map(|i| (h.get(i, j) - mean).powi(2)).sum::<f64>() / n as f64;
    }
    (total / d as f64).sqrt()
}

/// Number of input-to-output paths of each length through the layer
/// wiring; `counts[j]` is the number of paths crossing `j` MLPs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PathCensus {
    pub counts: Vec<u64>,
}

impl PathCensus {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Path lengths as a sorted multiset.
    pub fn lengths(&self) -> Vec<usize> {
        self.counts
            .iter()
            .enumerate()
            .flat_map(|(len, &c)| std::iter::repeat_n(len, c as usize))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Edge {
    /// Enters layer `l` through its MLP from representation `src`.
    Mlp(usize),
    /// Identity residual from `src`.
    Identity(usize),
}

/// Inputs feeding representation `h^l`. The embedding skip `h⁰` and the
/// aggregated `h^{l−1}` coincide at `l = 1`, so they are deduplicated.
fn layer_inputs(variant: Variant, l: usize) -> Vec<Edge> {
    let mut edges = vec![Edge::Mlp(l - 1)];
    if variant.uses_initial_embedding() {
        edges.push(Edge::Mlp(0));
    }
    if variant.has_residual() {
        edges.push(Edge::Identity(l - 1));
    }
    edges.sort();
    edges.dedup();
    edges
}

/// Path-length census from `h⁰` to the head, by dynamic programming over
/// the layer wiring. A path entering layer `l` through the `h⁰` skip and
/// continuing to the output crosses `L − l + 1` MLPs.
pub fn count_input_output_paths(config: &ModelConfig) -> PathCensus {
    let depth = config.num_layers;
    let mut counts: Vec<Vec<u64>> = vec![vec![0; depth + 1]; depth + 1];
    counts[0][0] = 1;
    for l in 1..=depth {
        for edge in layer_inputs(config.variant, l) {
            let (src, step) = match edge {
                Edge::Mlp(s) => (s, 1),
                Edge::Identity(s) => (s, 0),
            };
            for len in 0..=depth {
                let c = counts[src][len];
                if c > 0 {
                    counts[l][len + step] += c;
                }
            }
        }
    }
    PathCensus {
        counts: counts.swap_remove(depth),
    }
}
