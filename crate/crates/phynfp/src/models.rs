//! Flux-prediction models on the tape engine.
//!
//! The river layer updates embeddings by the discretized momentum balance,
//! `h' = h - dt * (h (D1 h W1) + g (D2 h W2))`, and the traffic layer by the
//! discretized mass balance, `h' = h - dt * (h (D1 v W1) + v (D1 h W2))`.
//! `D1` and `D2` are upwind difference operators whose per-edge spacing and
//! elevation drop come from small learnable networks over the edge features,
//! so gradients flow through the operator coefficients as well as the
//! embeddings. A degree-normalized GCN on the same stack serves as the
//! direction-insensitive baseline.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffops::DiffStructure;
use crate::error::{Error, Result};
use crate::graph::DirectedGraph;
use crate::tensorad::{read_blob, write_blob, SparseMatrix, Tape, Tensor, Var};

/// Hidden width of the edge-feature networks producing dx and dz.
const PHI_HIDDEN: usize = 6;
/// Floor added to softplus output so dx stays strictly positive.
const DX_FLOOR: f64 = 1e-3;
/// Starting value of the learnable step size.
const DELTA_T_INIT: f64 = 0.7;
const G_HAT_INIT: f64 = 0.5;
/// Initial output bias of the spacing network. Starting dx near
/// softplus(2) keeps the initial transport weights 1/dx below one half,
/// inside the layer's contraction region at the initial step size.
const PHI1_BIAS_INIT: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    River,
    Traffic,
    Gcn,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::River => "river",
            Variant::Traffic => "traffic",
            Variant::Gcn => "gcn",
        };
        f.write_str(s)
    }
}

/// Architecture and data-shape description of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Message-passing layers L.
    pub layers: usize,
    /// Embedding width d.
    pub hidden: usize,
    /// Observation window W.
    pub window: usize,
    /// Prediction horizon n.
    pub horizon: usize,
    pub seed: u64,
    /// Variables per node in the input series.
    pub input_vars: usize,
    /// Edge feature width q.
    pub edge_width: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.window == 0 || self.horizon == 0 {
            return Err(Error::Value(
                "layers, hidden, window and horizon must all be at least 1".into(),
            ));
        }
        if self.input_vars == 0 {
            return Err(Error::Value("input_vars must be at least 1".into()));
        }
        Ok(())
    }
}

/// Operator structure and constants a model needs for one topology.
#[derive(Clone)]
pub struct GraphContext {
    pub structure: Arc<DiffStructure>,
    /// `[E, q]` edge feature matrix.
    pub edge_features: Tensor,
    /// Row-stochastic incoming adjacency with self-loops.
    pub gcn_matrix: Arc<SparseMatrix>,
    pub num_nodes: usize,
}

impl GraphContext {
    pub fn new(g: &DirectedGraph) -> Self {
        let n = g.num_nodes();
        let q = g.feature_width();
        let mut feats = Vec::with_capacity(g.num_edges() * q);
        for row in g.edge_features() {
            feats.extend_from_slice(row);
        }
        let mut entries = Vec::new();
        for i in 0..n {
            let ups = g.upstream_neighbors(i).expect("valid node");
            let norm = 1.0 / (ups.len() + 1) as f64;
            entries.push((i, i, norm));
            for &(j, _) in ups {
                entries.push((i, j, norm));
            }
        }
        entries.sort_unstable_by_key(|&(r, c, _)| (r, c));
        Self {
            structure: DiffStructure::from_graph(g),
            edge_features: Tensor::new(vec![g.num_edges(), q], feats)
                .expect("edge feature matrix"),
            gcn_matrix: Arc::new(
                SparseMatrix::new(n, n, entries).expect("normalized adjacency"),
            ),
            num_nodes: n,
        }
    }
}

/// An upwind operator bound to a tape: fixed row structure plus per-edge
/// weights that may carry gradients.
pub struct TapeOperator<'t> {
    pub structure: Arc<DiffStructure>,
    pub weights: Var<'t>,
}

impl<'t> TapeOperator<'t> {
    pub fn apply(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        tape.edge_diff(&self.structure, self.weights, x)
    }
}

/// Learnable pieces of the river update.
pub struct RiverLayerVars<'t> {
    pub w1: Var<'t>,
    pub w2: Var<'t>,
    pub delta_t: Var<'t>,
    pub g_hat: Var<'t>,
}

/// Learnable pieces of the traffic update.
pub struct TrafficLayerVars<'t> {
    pub w1: Var<'t>,
    pub w2: Var<'t>,
    pub delta_t: Var<'t>,
}

/// `h' = h - dt * (h (D1 h W1) + g (D2 h W2))`.
pub fn river_layer<'t>(
    h: Var<'t>,
    d1: &TapeOperator<'t>,
    d2: &TapeOperator<'t>,
    params: &RiverLayerVars<'t>,
    tape: &'t Tape,
) -> Result<Var<'t>> {
    let transport = h.mul(d1.apply(tape, h)?.matmul(params.w1)?)?;
    let elevation = d2.apply(tape, h)?.matmul(params.w2)?.scale(params.g_hat)?;
    h.sub(transport.add(elevation)?.scale(params.delta_t)?)
}

/// `h' = h - dt * (h (D1 v W1) + v (D1 h W2))`; `v` is not updated.
pub fn traffic_layer<'t>(
    h: Var<'t>,
    v: Var<'t>,
    d1: &TapeOperator<'t>,
    params: &TrafficLayerVars<'t>,
    tape: &'t Tape,
) -> Result<Var<'t>> {
    let by_velocity = h.mul(d1.apply(tape, v)?.matmul(params.w1)?)?;
    let by_density = v.mul(d1.apply(tape, h)?.matmul(params.w2)?)?;
    h.sub(by_velocity.add(by_density)?.scale(params.delta_t)?)
}

/// `h' = relu(A_norm h W)`.
pub fn gcn_layer<'t>(
    h: Var<'t>,
    a_norm: &Arc<SparseMatrix>,
    w: Var<'t>,
    tape: &'t Tape,
) -> Result<Var<'t>> {
    tape.sparse_apply(a_norm, h)?.matmul(w)?.relu()
}

/// Weights of one edge-feature network `q -> hidden -> 1` plus output bias.
pub struct PhiVars<'t> {
    pub a: Var<'t>,
    pub b: Var<'t>,
    pub bias: Var<'t>,
}

fn phi_eval<'t>(edge_features: Var<'t>, phi: &PhiVars<'t>) -> Result<Var<'t>> {
    edge_features
        .matmul(phi.a)?
        .tanh()?
        .matmul(phi.b)?
        .add_scalar(phi.bias)
}

/// Assemble the learnable operators: `dx = softplus(phi1(e)) + floor` and
/// `dz = phi2(e)`, so `D1` carries `1/dx` and `D2` carries `dz/dx` per edge.
pub fn build_operators<'t>(
    structure: &Arc<DiffStructure>,
    edge_features: Var<'t>,
    phi1: &PhiVars<'t>,
    phi2: &PhiVars<'t>,
) -> Result<(TapeOperator<'t>, TapeOperator<'t>)> {
    let dx = phi_eval(edge_features, phi1)?
        .softplus()?
        .add_const(DX_FLOOR)?;
    let inv_dx = dx.recip()?;
    let dz = phi_eval(edge_features, phi2)?;
    Ok((
        TapeOperator {
            structure: Arc::clone(structure),
            weights: inv_dx,
        },
        TapeOperator {
            structure: Arc::clone(structure),
            weights: dz.mul(inv_dx)?,
        },
    ))
}

/// A model: configuration plus named parameter tensors.
#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    params: Vec<(String, Tensor)>,
}

/// Handles to one model's parameters bound onto a tape.
pub struct BoundParams<'t> {
    vars: Vec<(String, Var<'t>)>,
}

impl<'t> BoundParams<'t> {
    pub fn get(&self, name: &str) -> Var<'t> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("model has no parameter '{name}'"))
    }

    pub fn vars(&self) -> &[(String, Var<'t>)] {
        &self.vars
    }
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::matrix(rows, cols, data).expect("glorot tensor")
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.hidden;
        let wp = cfg.window * cfg.input_vars;
        let q = cfg.edge_width;
        let mut params: Vec<(String, Tensor)> = Vec::new();
        let mut mat = |params: &mut Vec<(String, Tensor)>, name: &str, r: usize, c: usize| {
            params.push((name.to_string(), glorot(&mut rng, r, c)));
        };
        match cfg.variant {
            Variant::River => {
                mat(&mut params, "embed", wp, d);
                mat(&mut params, "w1", d, d);
                mat(&mut params, "w2", d, d);
                params.push(("delta_t".into(), Tensor::scalar(DELTA_T_INIT)));
                params.push(("g_hat".into(), Tensor::scalar(G_HAT_INIT)));
                mat(&mut params, "phi1_a", q, PHI_HIDDEN);
                mat(&mut params, "phi1_b", PHI_HIDDEN, 1);
                params.push(("phi1_bias".into(), Tensor::scalar(PHI1_BIAS_INIT)));
                mat(&mut params, "phi2_a", q, PHI_HIDDEN);
                mat(&mut params, "phi2_b", PHI_HIDDEN, 1);
                params.push(("phi2_bias".into(), Tensor::scalar(0.0)));
            }
            Variant::Traffic => {
                mat(&mut params, "embed_h_a", wp, d);
                mat(&mut params, "embed_h_b", d, d);
                mat(&mut params, "embed_v_a", wp, d);
                mat(&mut params, "embed_v_b", d, d);
                mat(&mut params, "w1", d, d);
                mat(&mut params, "w2", d, d);
                params.push(("delta_t".into(), Tensor::scalar(DELTA_T_INIT)));
                mat(&mut params, "phi1_a", q, PHI_HIDDEN);
                mat(&mut params, "phi1_b", PHI_HIDDEN, 1);
                params.push(("phi1_bias".into(), Tensor::scalar(PHI1_BIAS_INIT)));
            }
            Variant::Gcn => {
                mat(&mut params, "embed", wp, d);
                for l in 0..cfg.layers {
                    mat(&mut params, &format!("gcn_w{l}"), d, d);
                }
            }
        }
        mat(&mut params, "readout_w", d, 1);
        params.push(("readout_b".into(), Tensor::scalar(0.0)));
        Ok(Self { cfg, params })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn set_params(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "{} tensors for {} parameters",
                tensors.len(),
                self.params.len()
            )));
        }
        for ((_, dst), src) in self.params.iter_mut().zip(tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::Shape(format!(
                    "parameter {:?} replaced by {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            *dst = src;
        }
        Ok(())
    }

    /// Learned step size, when the variant has one.
    pub fn delta_t(&self) -> Option<f64> {
        self.param("delta_t").map(|t| t.data()[0])
    }

    /// Put every parameter on a tape, as trainable or frozen leaves.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundParams<'t> {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|(n, t)| (n.clone(), tape.leaf(t.clone(), trainable)))
                .collect(),
        }
    }

    /// Embedding of a flattened window `[n, W*p]` (and the velocity
    /// embedding for the traffic variant).
    fn embed<'t>(
        &self,
        bound: &BoundParams<'t>,
        window: Var<'t>,
    ) -> Result<(Var<'t>, Option<Var<'t>>)> {
        match self.cfg.variant {
            Variant::River | Variant::Gcn => Ok((window.matmul(bound.get("embed"))?, None)),
            Variant::Traffic => {
                let h = window
                    .matmul(bound.get("embed_h_a"))?
                    .tanh()?
                    .matmul(bound.get("embed_h_b"))?;
                let v = window
                    .matmul(bound.get("embed_v_a"))?
                    .tanh()?
                    .matmul(bound.get("embed_v_b"))?;
                Ok((h, Some(v)))
            }
        }
    }

    /// Forward pass on an existing tape, returning per-layer embeddings
    /// `h^0..h^L` and the `[n, 1]` readout.
    pub fn forward_on_tape<'t>(
        &self,
        tape: &'t Tape,
        bound: &BoundParams<'t>,
        ctx: &GraphContext,
        window: &Tensor,
    ) -> Result<(Vec<Var<'t>>, Var<'t>)> {
        let expected = [ctx.num_nodes, self.cfg.window * self.cfg.input_vars];
        if window.shape() != expected {
            return Err(Error::Shape(format!(
                "window of shape {:?}, expected {expected:?}",
                window.shape()
            )));
        }
        let x = tape.constant(window.clone());
        let (mut h, v) = self.embed(bound, x)?;
        let mut per_layer = vec![h];

        match self.cfg.variant {
            Variant::River => {
                let edge_feats = tape.constant(ctx.edge_features.clone());
                let phi1 = PhiVars {
                    a: bound.get("phi1_a"),
                    b: bound.get("phi1_b"),
                    bias: bound.get("phi1_bias"),
                };
                let phi2 = PhiVars {
                    a: bound.get("phi2_a"),
                    b: bound.get("phi2_b"),
                    bias: bound.get("phi2_bias"),
                };
                let (d1, d2) = build_operators(&ctx.structure, edge_feats, &phi1, &phi2)?;
                let layer_params = RiverLayerVars {
                    w1: bound.get("w1"),
                    w2: bound.get("w2"),
                    delta_t: bound.get("delta_t"),
                    g_hat: bound.get("g_hat"),
                };
                for _ in 0..self.cfg.layers {
                    h = river_layer(h, &d1, &d2, &layer_params, tape)?;
                    per_layer.push(h);
                }
            }
            Variant::Traffic => {
                let v = v.expect("traffic embedding produces v");
                let edge_feats = tape.constant(ctx.edge_features.clone());
                let phi1 = PhiVars {
                    a: bound.get("phi1_a"),
                    b: bound.get("phi1_b"),
                    bias: bound.get("phi1_bias"),
                };
                let dx = phi_eval(edge_feats, &phi1)?.softplus()?.add_const(DX_FLOOR)?;
                let d1 = TapeOperator {
                    structure: Arc::clone(&ctx.structure),
                    weights: dx.recip()?,
                };
                let layer_params = TrafficLayerVars {
                    w1: bound.get("w1"),
                    w2: bound.get("w2"),
                    delta_t: bound.get("delta_t"),
                };
                for _ in 0..self.cfg.layers {
                    h = traffic_layer(h, v, &d1, &layer_params, tape)?;
                    per_layer.push(h);
                }
            }
            Variant::Gcn => {
                for l in 0..self.cfg.layers {
                    h = gcn_layer(h, &ctx.gcn_matrix, bound.get(&format!("gcn_w{l}")), tape)?;
                    per_layer.push(h);
                }
            }
        }

        let y = h
            .matmul(bound.get("readout_w"))?
            .add_scalar(bound.get("readout_b"))?;
        Ok((per_layer, y))
    }

    /// Predictions for one window, one value per node.
    pub fn predict(&self, ctx: &GraphContext, window: &Tensor) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let (_, y) = self.forward_on_tape(&tape, &bound, ctx, window)?;
        Ok(y.value().data().to_vec())
    }

    /// Intermediate embeddings `h^0..h^L` for smoothing diagnostics.
    pub fn layer_embeddings(&self, ctx: &GraphContext, window: &Tensor) -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let (layers, _) = self.forward_on_tape(&tape, &bound, ctx, window)?;
        Ok(layers.iter().map(Var::value).collect())
    }
}

/// One parameter's entry in a checkpoint manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub model: ModelConfig,
    pub delta_t_final: Option<f64>,
    pub params: Vec<ParamEntry>,
    /// Caller-defined payload: normalizer statistics, split ranges, hashes.
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Write `manifest.json` plus one little-endian f64 blob per parameter.
pub fn save_checkpoint(dir: &std::path::Path, model: &Model, extra: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (name, tensor) in model.params() {
        let file = format!("{name}.bin");
        write_blob(&dir.join(&file), tensor)?;
        entries.push(ParamEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            file,
        });
    }
    let manifest = CheckpointManifest {
        model: model.cfg().clone(),
        delta_t_final: model.delta_t(),
        params: entries,
        extra,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &std::path::Path) -> Result<(Model, CheckpointManifest)> {
    let manifest: CheckpointManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut model = Model::new(manifest.model.clone())?;
    let mut tensors = Vec::new();
    for (entry, (name, _)) in manifest.params.iter().zip(model.params()) {
        if &entry.name != name {
            return Err(Error::Schema(format!(
                "checkpoint parameter '{}' does not match model parameter '{name}'",
                entry.name
            )));
        }
        tensors.push(read_blob(&dir.join(&entry.file), entry.shape.clone())?);
    }
    model.set_params(tensors)?;
    Ok((model, manifest))
}
