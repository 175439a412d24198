//! Strategy assembly: one `Model` covers the full fusion pipeline and every
//! single-model ablation behind a common forward interface, so metrics across
//! strategies are directly comparable.
//!
//! Full pipeline per frame: per-stream LSTM encoders build the vertex set,
//! the bidirectional GRU backbone builds the context, the similarity-KNN
//! topology plus one graph-convolution step refine the vertices, refined
//! similarities give the task adjacency, cross-attention produces directed
//! multi-dimensional edges unified with the adjacency, and the
//! edge-conditioned convolution (with batch-normalized outputs) yields the
//! fused node features consumed by per-target readout heads.
//!
//! The scalar-edge ablation (`gnn_od_edge`) is the same wiring with edge
//! features replaced by ones, so the unified edge (i,j) is exactly the
//! adjacency weight; the full model configured with `attention_bypass` and
//! d_e = 1 must match it to the bit given the same seed.

use crate::baselines;
use crate::config::RunConfig;
use crate::ctx::Ctx;
use crate::data::{FeatureBundle, StreamKind, StreamWidths, Target, STREAM_ORDER};
use crate::edges::{edge_features, unify, EdgeGcn, EdgePipeline, GcnFrame};
use crate::encoders::{encode_streams, vertex_frame, BiGruBackbone, EncodedStreams, LstmStack};
use crate::error::{Error, Result};
use crate::graph::{base_adjacency, knn_topology, task_adjacency, RuleKind, TtfLayer};
use crate::head::RegressorHead;
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::NodeId;
use crate::tensor::Tensor;

/// Fusion strategy: the full pipeline, its two module ablations, and the
/// baselines of the comparison table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StrategyKind {
    /// Mean of the five vertex vectors.
    Ave,
    /// Concatenation followed by one affine map.
    Fc,
    /// Scalar-edge graph convolution, then stitching to width 5K.
    GnnSt,
    /// Task-specific topology with scalar edges (adjacency weights only).
    GnnOdEdge,
    /// Five per-stream models; predictions averaged.
    BaselineAve,
    /// One stream's encoder and head.
    SingleFeature(StreamKind),
    /// Topology + vertex refinement only; edge learning skipped.
    TtfOnly,
    /// Edge learning on raw vertices with the complete base adjacency.
    AmefOnly,
    /// The full pipeline.
    TtfAmef,
}

impl StrategyKind {
    pub fn name(self) -> String {
        match self {
            StrategyKind::Ave => "ave".into(),
            StrategyKind::Fc => "fc".into(),
            StrategyKind::GnnSt => "gnn_st".into(),
            StrategyKind::GnnOdEdge => "gnn_od_edge".into(),
            StrategyKind::BaselineAve => "baseline_ave".into(),
            StrategyKind::SingleFeature(s) => format!("single_{}", s.name()),
            StrategyKind::TtfOnly => "ttf_only".into(),
            StrategyKind::AmefOnly => "amef_only".into(),
            StrategyKind::TtfAmef => "ttf_amef".into(),
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        if let Some(stream) = name.strip_prefix("single_") {
            return Ok(StrategyKind::SingleFeature(StreamKind::parse(stream)?));
        }
        match name {
            "ave" => Ok(StrategyKind::Ave),
            "fc" => Ok(StrategyKind::Fc),
            "gnn_st" => Ok(StrategyKind::GnnSt),
            "gnn_od_edge" => Ok(StrategyKind::GnnOdEdge),
            "baseline_ave" => Ok(StrategyKind::BaselineAve),
            "ttf_only" => Ok(StrategyKind::TtfOnly),
            "amef_only" => Ok(StrategyKind::AmefOnly),
            "ttf_amef" => Ok(StrategyKind::TtfAmef),
            other => Err(Error::config(format!("unknown strategy kind: {other}"))),
        }
    }

    fn uses_graph_conv(self) -> bool {
        matches!(
            self,
            StrategyKind::GnnOdEdge | StrategyKind::AmefOnly | StrategyKind::TtfAmef
        )
    }

    fn uses_ttf(self) -> bool {
        matches!(
            self,
            StrategyKind::GnnOdEdge | StrategyKind::TtfOnly | StrategyKind::TtfAmef
        )
    }
}

#[derive(Clone, Debug)]
pub struct ModelDims {
    pub a: usize,
    pub k: usize,
    pub d_e: usize,
    pub d_k: usize,
    pub k_nn: usize,
    pub encoder_hidden: [usize; 2],
    pub head_hidden: [usize; 2],
    /// Encoder input widths, aligned with the model's stream list.
    pub widths: Vec<usize>,
}

/// One trainable pipeline (any strategy except the prediction ensemble).
pub struct Model {
    pub kind: StrategyKind,
    pub dims: ModelDims,
    pub targets: Vec<Target>,
    pub store: ParamStore,
    pub avvr_context_tokens: bool,
    pub attention_bypass: bool,
    /// Streams consumed, in canonical order (one entry for single-feature).
    pub streams: Vec<StreamKind>,
    encoders: Vec<LstmStack>,
    backbone: Option<BiGruBackbone>,
    ttf: Option<TtfLayer>,
    edge_pipe: Option<EdgePipeline>,
    edge_gcn: Option<EdgeGcn>,
    st_w: Option<ParamId>,
    heads: Vec<RegressorHead>,
    base_mask: Tensor,
}

/// Forward results for a batch: per target, per utterance.
pub struct BatchForward {
    /// N x 1 predictions.
    pub preds: Vec<Vec<NodeId>>,
    /// Fused per-frame features feeding each target's regressor.
    pub fused: Vec<Vec<NodeId>>,
}

impl Model {
    /// Deterministic construction from the run config and manifest widths.
    /// Parameter creation order is fixed, so a seed fully determines the
    /// initial store.
    pub fn build(cfg: &RunConfig, widths: &StreamWidths) -> Result<Model> {
        cfg.validate()?;
        let kind = cfg.strategy_kind();
        if kind == StrategyKind::BaselineAve {
            return Err(Error::usage(
                "baseline_ave is an ensemble of single-feature models; build those instead",
            ));
        }
        Self::build_kind(cfg, widths, kind, cfg.seed)
    }

    pub fn build_kind(
        cfg: &RunConfig,
        widths: &StreamWidths,
        kind: StrategyKind,
        seed: u64,
    ) -> Result<Model> {
        let streams: Vec<StreamKind> = match kind {
            StrategyKind::SingleFeature(s) => vec![s],
            _ => STREAM_ORDER.to_vec(),
        };
        let a = streams.len();
        let k = cfg.k;
        // The scalar-edge ablation is the bypassed pipeline with d_e = 1.
        let (d_e, bypass) = match kind {
            StrategyKind::GnnOdEdge => (1, true),
            _ => (cfg.d_e(), cfg.attention_bypass),
        };
        let dims = ModelDims {
            a,
            k,
            d_e,
            d_k: cfg.d_k(),
            k_nn: cfg.k_nn,
            encoder_hidden: cfg.encoder_hidden,
            head_hidden: cfg.head_hidden,
            widths: streams.iter().map(|&s| widths.get(s)).collect(),
        };
        let rule = match &cfg.rule_mask {
            Some(mask) => RuleKind::Custom(mask.clone()),
            None => RuleKind::Complete,
        };
        let base_mask = base_adjacency(&rule, a)?;
        if a > 1 && dims.k_nn > a - 1 {
            return Err(Error::config(format!(
                "k_nn {} exceeds node count - 1 ({})",
                dims.k_nn,
                a - 1
            )));
        }

        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed).split(0);

        let encoders: Vec<LstmStack> = streams
            .iter()
            .zip(&dims.widths)
            .map(|(s, &w)| {
                LstmStack::init(&mut store, &format!("enc/{}", s.name()), w, dims.encoder_hidden, k, &mut rng)
            })
            .collect();

        let needs_context = kind.uses_graph_conv() && !bypass;
        let backbone = needs_context.then(|| BiGruBackbone::init(&mut store, "backbone", k, &mut rng));
        let ttf = kind.uses_ttf().then(|| TtfLayer::init(&mut store, "ttf", k, &mut rng));
        let edge_pipe = needs_context.then(|| {
            EdgePipeline::init(
                &mut store,
                "edge",
                k,
                dims.d_k,
                d_e,
                cfg.avvr_context_tokens,
                &mut rng,
            )
        });
        let edge_gcn = kind
            .uses_graph_conv()
            .then(|| EdgeGcn::init(&mut store, "gcn", a, k, d_e, cfg.bn_momentum, &mut rng));
        let st_w = matches!(kind, StrategyKind::GnnSt).then(|| {
            let bound = 1.0 / (k as f64).sqrt();
            store.add("st/w", Tensor::rand_uniform(&[k, k], bound, &mut rng))
        });

        // Readout input width and whether the head owns a fusion affine.
        let (head_in, fuse) = match kind {
            StrategyKind::Ave => (k, None),
            StrategyKind::GnnSt => (a * k, None),
            _ => (k, Some(a * k)),
        };
        let _ = head_in;
        let heads = cfg
            .target_list()
            .iter()
            .map(|t| {
                RegressorHead::init(
                    &mut store,
                    &format!("head/{}", t.name()),
                    fuse,
                    if fuse.is_some() { k } else { head_in },
                    dims.head_hidden,
                    &mut rng,
                )
            })
            .collect();

        Ok(Model {
            kind,
            dims,
            targets: cfg.target_list(),
            store,
            avvr_context_tokens: cfg.avvr_context_tokens,
            attention_bypass: bypass,
            streams,
            encoders,
            backbone,
            ttf,
            edge_pipe,
            edge_gcn,
            st_w,
            heads,
            base_mask,
        })
    }

    fn bundle_streams<'a>(&self, bundle: &'a FeatureBundle) -> Vec<&'a Tensor> {
        self.streams.iter().map(|&s| bundle.stream(s)).collect()
    }

    fn encode_bundle(&self, c: &mut Ctx, bundle: &FeatureBundle) -> Result<EncodedStreams> {
        let streams = self.bundle_streams(bundle);
        encode_streams(c, &streams, &self.encoders)
    }

    /// Graph stage of one frame for the convolutional strategies.
    fn graph_frame(&self, c: &mut Ctx, v: NodeId) -> Result<GcnFrame> {
        let (vertices, adj) = if let Some(ttf) = &self.ttf {
            let topo = knn_topology(c, v, self.dims.k_nn, &self.base_mask)?;
            let refined = ttf.refine(c, v, topo.weights)?;
            let task = task_adjacency(c, refined, self.dims.k_nn, &self.base_mask)?;
            (refined, task.weights)
        } else {
            // Raw vertices with the uniform base adjacency.
            let base = c.constant(self.base_mask.clone());
            (v, base)
        };
        let edges = match &self.edge_pipe {
            Some(pipe) => {
                let backbone = self.backbone.as_ref().expect("context requires the backbone");
                let context = backbone.global_context(c, v)?;
                edge_features(c, vertices, context, pipe)?
            }
            None => {
                let a = self.dims.a;
                c.constant(Tensor::filled(&[a * a, self.dims.d_e], 1.0))
            }
        };
        let (unified, flat) = unify(c, edges, adj)?;
        Ok(GcnFrame {
            vertices,
            edges: unified,
            adj_flat: flat,
        })
    }

    /// Per-utterance head inputs (N x W). Convolutional strategies batch all
    /// frames of all utterances through the edge GCN so batch normalization
    /// sees the whole batch.
    fn head_inputs(&self, c: &mut Ctx, bundles: &[&FeatureBundle]) -> Result<Vec<NodeId>> {
        let encoded: Vec<EncodedStreams> = bundles
            .iter()
            .map(|b| self.encode_bundle(c, b))
            .collect::<Result<_>>()?;

        match self.kind {
            StrategyKind::SingleFeature(_) => Ok(encoded.iter().map(|e| e.per_stream[0]).collect()),
            StrategyKind::Ave => encoded
                .iter()
                .map(|e| {
                    let mut acc = e.per_stream[0];
                    for &s in &e.per_stream[1..] {
                        acc = c.tape.add(acc, s)?;
                    }
                    Ok(c.tape.scale(acc, 1.0 / e.per_stream.len() as f64))
                })
                .collect(),
            StrategyKind::Fc => encoded
                .iter()
                .map(|e| c.tape.concat_cols(&e.per_stream))
                .collect(),
            StrategyKind::GnnSt => {
                let w = self.st_w.expect("stitching strategy has its weight");
                let wn = c.param(w);
                let base = c.constant(self.base_mask.clone());
                encoded
                    .iter()
                    .map(|e| {
                        let frames: Vec<NodeId> = (0..e.n)
                            .map(|t| {
                                let v = vertex_frame(c, e, t)?;
                                baselines::fuse_gnn_st(c, v, wn, base)
                            })
                            .collect::<Result<_>>()?;
                        c.tape.concat_rows(&frames)
                    })
                    .collect()
            }
            StrategyKind::TtfOnly => encoded
                .iter()
                .map(|e| {
                    let ttf = self.ttf.as_ref().expect("refinement strategy has its layer");
                    let frames: Vec<NodeId> = (0..e.n)
                        .map(|t| {
                            let v = vertex_frame(c, e, t)?;
                            let topo = knn_topology(c, v, self.dims.k_nn, &self.base_mask)?;
                            let refined = ttf.refine(c, v, topo.weights)?;
                            let numel = c.value(refined).numel();
                            c.tape.reshape(refined, &[1, numel])
                        })
                        .collect::<Result<_>>()?;
                    c.tape.concat_rows(&frames)
                })
                .collect(),
            StrategyKind::GnnOdEdge | StrategyKind::AmefOnly | StrategyKind::TtfAmef => {
                let gcn = self.edge_gcn.as_ref().expect("convolutional strategy has its layer");
                let mut frames = Vec::new();
                let mut frames_per_utt = Vec::with_capacity(encoded.len());
                for e in &encoded {
                    frames_per_utt.push(e.n);
                    for t in 0..e.n {
                        let v = vertex_frame(c, e, t)?;
                        frames.push(self.graph_frame(c, v)?);
                    }
                }
                let (nodes, _edges) = gcn.forward_batch(c, &frames)?;
                let mut out = Vec::with_capacity(encoded.len());
                let mut off = 0;
                let width = self.dims.a * self.dims.k;
                for &n in &frames_per_utt {
                    let rows: Vec<NodeId> = (0..n)
                        .map(|t| c.tape.reshape(nodes[off + t], &[1, width]))
                        .collect::<Result<_>>()?;
                    out.push(c.tape.concat_rows(&rows)?);
                    off += n;
                }
                Ok(out)
            }
            StrategyKind::BaselineAve => Err(Error::usage("ensemble strategies have no single forward")),
        }
    }

    /// Forward pass over a batch of utterances; one tape for everything.
    pub fn forward_batch(&self, c: &mut Ctx, bundles: &[&FeatureBundle]) -> Result<BatchForward> {
        let inputs = self.head_inputs(c, bundles)?;
        let mut preds = Vec::with_capacity(self.heads.len());
        let mut fused_all = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let mut per_utt = Vec::with_capacity(inputs.len());
            let mut fused_utt = Vec::with_capacity(inputs.len());
            for &input in &inputs {
                let fused = head.fuse_sequence(c, input)?;
                per_utt.push(head.predict_sequence(c, fused)?);
                fused_utt.push(fused);
            }
            preds.push(per_utt);
            fused_all.push(fused_utt);
        }
        Ok(BatchForward {
            preds,
            fused: fused_all,
        })
    }

    /// Evaluation-mode per-frame predictions for one utterance and target.
    pub fn predict(&self, bundle: &FeatureBundle, target: Target) -> Result<Vec<f64>> {
        let ti = self
            .targets
            .iter()
            .position(|&t| t == target)
            .ok_or_else(|| Error::usage(format!("model has no head for {}", target.name())))?;
        let mut c = Ctx::eval(&self.store);
        let out = self.forward_batch(&mut c, &[bundle])?;
        Ok(c.value(out.preds[ti][0]).data().to_vec())
    }

    /// Evaluation-mode fused per-frame features (the first target's head).
    pub fn fused_features(&self, bundle: &FeatureBundle) -> Result<Tensor> {
        let mut c = Ctx::eval(&self.store);
        let out = self.forward_batch(&mut c, &[bundle])?;
        Ok(c.value(out.fused[0][0]).clone())
    }

    /// The adjacency weights the convolution would use for one frame,
    /// evaluated outside training (introspection for tests and debugging).
    pub fn debug_frame_adjacency(&self, bundle: &FeatureBundle, frame: usize) -> Result<Tensor> {
        if !self.kind.uses_graph_conv() {
            return Err(Error::usage("strategy has no graph convolution"));
        }
        let mut c = Ctx::eval(&self.store);
        let enc = self.encode_bundle(&mut c, bundle)?;
        if frame >= enc.n {
            return Err(Error::usage(format!("frame {frame} out of {}", enc.n)));
        }
        let v = vertex_frame(&mut c, &enc, frame)?;
        let gf = self.graph_frame(&mut c, v)?;
        let a = self.dims.a;
        let flat = c.value(gf.adj_flat).data().to_vec();
        Tensor::new(vec![a, a], flat)
    }
}
