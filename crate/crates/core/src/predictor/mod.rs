//! The interaction predictor: object motion under every reference system,
//! pushed through DCT, residual graph convolutions over the reference nodes
//! and the inverse DCT, then mapped back to the world from the chosen node.

pub mod dct;
pub mod train;

use std::path::Path;

use candle_core::{Tensor, Var};
use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use crate::body::BodyProxy;
use crate::corrector::InteractionModel;
use crate::error::{Error, Result};
use crate::frames::{build_st_graph, AnchorTracks, OrientationMode, StGraph};
use crate::geometry::{ContactMode, ReferenceChoice};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::{device, Linear, ParamStore};
use crate::types::{HoiSequence, ObjectPose, Split, OBJECT_FEATURES};
use dct::DctBasis;

pub const CHECKPOINT_KIND: &str = "predictor";

/// Which reference system supervises training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferencePolicy {
    /// The contact-selected system of each clip.
    #[default]
    Selected,
    /// Always the ground system.
    Ground,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub dct_bases: usize,
    pub blocks: usize,
    pub width: usize,
    pub orientation: OrientationMode,
    pub contact: ContactMode,
    pub reference: ReferencePolicy,
    /// Per-frame contact threshold for picking the training reference and
    /// the contact-loss pairs.
    pub eps_contact: f64,
    /// Object points checked against the body in the penetration loss.
    pub penetration_points: usize,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            dct_bases: 10,
            blocks: 4,
            width: 64,
            orientation: OrientationMode::TranslationOnly,
            contact: ContactMode::Marker,
            reference: ReferencePolicy::Selected,
            eps_contact: 0.05,
            penetration_points: 64,
            seed: 0,
        }
    }
}

/// A predictor trainable by gradient descent.
pub trait TrainablePredictor {
    /// `padded: (B, H+F, nodes, 9)`, the past graph with its last frame
    /// repeated; returns the full `(B, H+F, nodes, 9)` prediction.
    fn forward(&self, padded: &Tensor, past: usize) -> Result<Tensor>;

    fn vars(&self) -> Vec<Var>;
}

#[derive(Debug, Clone)]
struct GraphBlock {
    adjacency: Tensor,
    linear: Linear,
}

impl GraphBlock {
    fn new(ps: &mut ParamStore, name: &str, nodes: usize, width: usize) -> Result<Self> {
        let n = nodes as f64;
        let adj: Vec<f64> = (0..nodes * nodes)
            .map(|i| if i / nodes == i % nodes { 0.5 + 0.5 / n } else { 0.5 / n })
            .collect();
        Ok(Self {
            adjacency: ps.from_values(&format!("{name}.adjacency"), &[nodes, nodes], adj)?,
            linear: Linear::new(ps, &format!("{name}.linear"), width, width)?,
        })
    }

    /// `h + tanh(A · (h W + b))` over `(B, nodes, width)`.
    fn forward(&self, h: &Tensor) -> Result<Tensor> {
        let mixed = self.adjacency.broadcast_matmul(&self.linear.forward(h)?)?;
        Ok((h + mixed.tanh()?)?)
    }
}

pub struct StgnnModel {
    config: PredictorConfig,
    nodes: usize,
    split: Split,
    store: ParamStore,
    basis: DctBasis,
    forward_dct: Tensor,
    inverse_dct: Tensor,
    node_embedding: Tensor,
    input: Linear,
    blocks: Vec<GraphBlock>,
    output: Linear,
}

impl StgnnModel {
    /// Fresh model with a zero output layer, so it starts as a last-frame
    /// hold in every reference system.
    pub fn new(config: PredictorConfig, nodes: usize, split: Split) -> Result<Self> {
        let basis = DctBasis::new(config.dct_bases, split.total())?;
        if config.width == 0 {
            return Err(Error::Config("predictor width must be positive".into()));
        }
        let coeffs = config.dct_bases * OBJECT_FEATURES;
        let mut ps = ParamStore::new(config.seed);
        let node_embedding = ps.normal("node_embedding", &[nodes, config.width], 0.1)?;
        let input = Linear::new(&mut ps, "input", coeffs, config.width)?;
        let blocks = (0..config.blocks)
            .map(|i| GraphBlock::new(&mut ps, &format!("block.{i}"), nodes, config.width))
            .collect::<Result<Vec<_>>>()?;
        let output = Linear::zeros(&mut ps, "output", config.width, coeffs)?;
        let forward_dct = basis.tensor()?;
        let inverse_dct = forward_dct.t()?.contiguous()?;
        Ok(Self {
            config,
            nodes,
            split,
            store: ps,
            basis,
            forward_dct,
            inverse_dct,
            node_embedding,
            input,
            blocks,
            output,
        })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn basis(&self) -> &DctBasis {
        &self.basis
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    /// Full `H + F` prediction for a past graph.
    pub fn predict_graph(&self, past: &StGraph) -> Result<StGraph> {
        if past.nodes() != self.nodes {
            return Err(Error::shape("graph nodes", self.nodes, past.nodes()));
        }
        if past.frames() != self.split.past {
            return Err(Error::shape("past graph frames", self.split.past, past.frames()));
        }
        let padded = pad_last_frame(&past.features, self.split.total());
        let t = Tensor::from_vec(padded.iter().copied().collect(), (1, self.split.total(), self.nodes, OBJECT_FEATURES), &device())?;
        let out = TrainablePredictor::forward(self, &t, self.split.past)?;
        let values = out.flatten_all()?.to_vec1::<f64>()?;
        let features = Array3::from_shape_vec((self.split.total(), self.nodes, OBJECT_FEATURES), values)
            .map_err(|e| Error::InvalidValue(e.to_string()))?;
        Ok(StGraph { features })
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: serde_json::Value) -> Result<()> {
        let header = serde_json::json!({
            "config": self.config,
            "nodes": self.nodes,
            "split": self.split,
            "extra": extra,
        });
        Checkpoint::from_store(CHECKPOINT_KIND, header, &self.store).save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, serde_json::Value)> {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind(CHECKPOINT_KIND)?;
        let bad = |what: &str, e: String| Error::parse(format!("checkpoint header {what}"), e);
        let config: PredictorConfig = serde_json::from_value(ck.header["config"].clone()).map_err(|e| bad("config", e.to_string()))?;
        let split: Split = serde_json::from_value(ck.header["split"].clone()).map_err(|e| bad("split", e.to_string()))?;
        let nodes = ck.header["nodes"].as_u64().ok_or_else(|| bad("nodes", "missing".into()))? as usize;
        let model = Self::new(config, nodes, split)?;
        model.store.load(&ck.tensors)?;
        Ok((model, ck.header["extra"].clone()))
    }
}

impl TrainablePredictor for StgnnModel {
    fn forward(&self, padded: &Tensor, past: usize) -> Result<Tensor> {
        let (b, frames, nodes, feat) = padded.dims4()?;
        if frames != self.split.total() || nodes != self.nodes || feat != OBJECT_FEATURES || past == 0 || past > frames {
            return Err(Error::shape(
                "predictor input (B, H+F, nodes, 9)",
                format!("(_, {}, {}, 9)", self.split.total(), self.nodes),
                format!("{:?}", padded.dims()),
            ));
        }
        let m = self.config.dct_bases;
        let last = padded.narrow(1, past - 1, 1)?;
        let centered = padded.broadcast_sub(&last)?.reshape((b, frames, nodes * feat))?;
        let coeffs = self
            .forward_dct
            .broadcast_matmul(&centered)?
            .reshape((b, m, nodes, feat))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, nodes, m * feat))?;
        let mut h = self.input.forward(&coeffs)?.broadcast_add(&self.node_embedding)?;
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        let delta = self
            .output
            .forward(&h)?
            .reshape((b, nodes, m, feat))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, m, nodes * feat))?;
        let residual = self.inverse_dct.broadcast_matmul(&delta)?.reshape((b, frames, nodes, feat))?;
        Ok((padded + residual)?)
    }

    fn vars(&self) -> Vec<Var> {
        self.store.vars()
    }
}

/// Repeats the last frame of `(H, nodes, D)` up to `total` frames.
pub fn pad_last_frame(past: &Array3<f64>, total: usize) -> Array3<f64> {
    let (h, nodes, d) = past.dim();
    let mut out = Array3::zeros((total, nodes, d));
    out.slice_mut(s![..h, .., ..]).assign(past);
    for f in h..total {
        out.slice_mut(s![f, .., ..]).assign(&past.slice(s![h - 1, .., ..]));
    }
    out
}

/// Future frames of the predicted graph.
pub fn predict_relative(graph: &StGraph, model: &StgnnModel) -> Result<StGraph> {
    let full = model.predict_graph(graph)?;
    Ok(StGraph {
        features: full.features.slice(s![model.split.past.., .., ..]).to_owned(),
    })
}

/// `x̂ = P(x̃, s)`: the object's future under reference `s`, mapped back to
/// the world along `x̃`'s own marker (or joint) tracks. Human motion and past
/// object motion are copied from `x̃`.
pub fn interaction_predict(x_tilde: &HoiSequence, s: ReferenceChoice, model: &StgnnModel, body: &BodyProxy) -> Result<HoiSequence> {
    let split = model.split;
    if x_tilde.split != split {
        return Err(Error::shape("sequence split", format!("{split:?}"), format!("{:?}", x_tilde.split)));
    }
    let points = model.config.contact.point_count(body);
    if let ReferenceChoice::Point(j) = s {
        if j >= points {
            return Err(Error::Index {
                index: j as i64,
                valid: format!("-1..{points}"),
            });
        }
    }
    let h = split.past;
    let graph = build_st_graph(&x_tilde.human[..h], &x_tilde.object[..h], body, model.config.contact, model.config.orientation)?;
    let predicted = model.predict_graph(&graph)?;
    let relative = predicted.node_poses(s.node())?;
    let anchors = AnchorTracks::compute(&x_tilde.human, body, model.config.contact);
    let world = anchors.to_world(&relative, s, model.config.orientation)?;
    let mut object: Vec<ObjectPose> = x_tilde.object[..h].to_vec();
    object.extend_from_slice(&world[h..]);
    HoiSequence::new(x_tilde.human.clone(), object, x_tilde.fps, split)
}

/// The trained predictor as the correction step's `x̂` source.
pub struct InteractionPredictor<'a> {
    pub model: &'a StgnnModel,
    pub body: &'a BodyProxy,
}

impl InteractionModel for InteractionPredictor<'_> {
    fn predict(&self, x_tilde: &HoiSequence, s: ReferenceChoice) -> Result<HoiSequence> {
        interaction_predict(x_tilde, s, self.model, self.body)
    }
}
