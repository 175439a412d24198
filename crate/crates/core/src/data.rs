//! Corpus synthesis, file formats, and loading.
//!
//! A synthetic corpus mimics the shape of the real task: five width-
//! heterogeneous per-frame feature streams and three continuous labels in
//! [-1, 1]. The generative model plants cross-stream structure so that no
//! single stream suffices and fixed (unlearned) mixing underperforms:
//!
//! * a shared smooth latent walk u(t) (3 dims) is linearly embedded into
//!   every stream, and the label base is W u(t);
//! * each stream carries one private latent; the labels add an interaction
//!   term with an additive part carried by the egemaps/mfcc pair and a
//!   product part switched between that pair and the boaw_e/boaw_m pair by
//!   a regime latent carried only by the deep_spectrum stream:
//!     lambda * ((v_a + v_b)/2
//!               + product_factor (r(t) v_a v_b + (1 - r(t)) w_a w_b)),
//!   so which pairwise relation matters changes smoothly over time;
//! * label-irrelevant nuisance walks pollute the three non-interaction-pair
//!   streams, and streams carry fixed heterogeneous scales;
//! * i.i.d. noise is added to every stream entry.
//!
//! A probe-gap oracle (ridge regressions on a column subsample) runs at
//! generation time and is recorded in the manifest: reading both interaction
//! streams must beat the best single stream.
//!
//! File formats (bit-exact round trip):
//! * stream/label files: first line is the column count, then one line per
//!   frame with space-separated values in shortest round-trip notation;
//! * the manifest is a single JSON file with a schema version.

use crate::error::{Error, Result};
use crate::head;
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Number of feature nodes in the fusion graph.
pub const NODE_COUNT: usize = 5;

/// The five feature streams in canonical node order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum StreamKind {
    Egemaps,
    Mfcc,
    BoawE,
    BoawM,
    DeepSpectrum,
}

pub const STREAM_ORDER: [StreamKind; NODE_COUNT] = [
    StreamKind::Egemaps,
    StreamKind::Mfcc,
    StreamKind::BoawE,
    StreamKind::BoawM,
    StreamKind::DeepSpectrum,
];

impl StreamKind {
    pub fn name(self) -> &'static str {
        match self {
            StreamKind::Egemaps => "egemaps",
            StreamKind::Mfcc => "mfcc",
            StreamKind::BoawE => "boaw_e",
            StreamKind::BoawM => "boaw_m",
            StreamKind::DeepSpectrum => "deep_spectrum",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        STREAM_ORDER
            .iter()
            .copied()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::config(format!("unknown stream name: {name}")))
    }

    pub fn index(self) -> usize {
        STREAM_ORDER.iter().position(|&s| s == self).expect("canonical order")
    }
}

/// The three regression targets, indexing label columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Target {
    Arousal,
    Valence,
    Liking,
}

pub const TARGETS: [Target; 3] = [Target::Arousal, Target::Valence, Target::Liking];

impl Target {
    pub fn name(self) -> &'static str {
        match self {
            Target::Arousal => "arousal",
            Target::Valence => "valence",
            Target::Liking => "liking",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        TARGETS
            .iter()
            .copied()
            .find(|t| t.name() == name)
            .ok_or_else(|| Error::config(format!("unknown target: {name}")))
    }

    pub fn index(self) -> usize {
        TARGETS.iter().position(|&t| t == self).expect("target order")
    }
}

/// Per-stream feature widths, declared in the manifest.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StreamWidths {
    #[serde(default = "default_w_egemaps")]
    pub egemaps: usize,
    #[serde(default = "default_w_mfcc")]
    pub mfcc: usize,
    #[serde(default = "default_w_boaw")]
    pub boaw_e: usize,
    #[serde(default = "default_w_boaw")]
    pub boaw_m: usize,
    #[serde(default = "default_w_ds")]
    pub deep_spectrum: usize,
}

fn default_w_egemaps() -> usize {
    88
}
fn default_w_mfcc() -> usize {
    13
}
fn default_w_boaw() -> usize {
    100
}
fn default_w_ds() -> usize {
    4096
}

impl Default for StreamWidths {
    fn default() -> Self {
        StreamWidths {
            egemaps: 88,
            mfcc: 13,
            boaw_e: 100,
            boaw_m: 100,
            deep_spectrum: 4096,
        }
    }
}

impl StreamWidths {
    pub fn get(&self, s: StreamKind) -> usize {
        match s {
            StreamKind::Egemaps => self.egemaps,
            StreamKind::Mfcc => self.mfcc,
            StreamKind::BoawE => self.boaw_e,
            StreamKind::BoawM => self.boaw_m,
            StreamKind::DeepSpectrum => self.deep_spectrum,
        }
    }

    pub fn as_map(&self) -> BTreeMap<String, usize> {
        STREAM_ORDER
            .iter()
            .map(|&s| (s.name().to_string(), self.get(s)))
            .collect()
    }
}

/// Generation parameters for a synthetic corpus.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SignalSpec {
    #[serde(default = "default_n_train")]
    pub n_train_utterances: usize,
    #[serde(default = "default_n_devel")]
    pub n_devel_utterances: usize,
    #[serde(default = "default_frames")]
    pub frames_per_utterance: usize,
    /// Standard deviation of the i.i.d. noise added to every stream entry.
    #[serde(default = "default_noise")]
    pub noise_level: f64,
    /// Interaction strength lambda; 0 removes the planted interaction.
    #[serde(default = "default_lambda")]
    pub interaction_strength: f64,
    /// Amplitude of label-irrelevant latent walks embedded into the three
    /// non-interaction streams (uneven stream quality: a learned fusion can
    /// suppress the polluted coordinates, a fixed mean cannot).
    #[serde(default = "default_nuisance")]
    pub nuisance_level: f64,
    /// Relative weight of the multiplicative part of the interaction term:
    /// the labels carry lambda * ((v_a + v_b)/2 + product_factor * v_a v_b),
    /// so part of the planted signal is a genuine pairwise relation.
    #[serde(default = "default_product")]
    pub product_factor: f64,
    /// Fixed per-stream multiplicative scales (canonical order); feature
    /// streams in the wild differ by orders of magnitude.
    #[serde(default = "default_scales")]
    pub stream_scales: [f64; NODE_COUNT],
    #[serde(default)]
    pub widths: StreamWidths,
    #[serde(default = "default_cultures")]
    pub cultures: Vec<String>,
}

fn default_n_train() -> usize {
    64
}
fn default_n_devel() -> usize {
    16
}
fn default_frames() -> usize {
    40
}
fn default_noise() -> f64 {
    0.3
}
fn default_lambda() -> f64 {
    0.7
}
fn default_nuisance() -> f64 {
    1.2
}
fn default_product() -> f64 {
    2.0
}
fn default_scales() -> [f64; NODE_COUNT] {
    [1.0, 1.0, 2.0, 2.0, 3.0]
}
fn default_cultures() -> Vec<String> {
    vec!["DE".to_string(), "HU".to_string()]
}

impl Default for SignalSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are valid")
    }
}

impl SignalSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train_utterances == 0 || self.n_devel_utterances == 0 {
            return Err(Error::config("corpus needs at least one utterance per split"));
        }
        if self.frames_per_utterance < 2 {
            return Err(Error::config("frames_per_utterance must be at least 2"));
        }
        if self.noise_level < 0.0 {
            return Err(Error::config("noise_level must be nonnegative"));
        }
        if self.interaction_strength < 0.0 {
            return Err(Error::config("interaction_strength must be nonnegative"));
        }
        if self.nuisance_level < 0.0 {
            return Err(Error::config("nuisance_level must be nonnegative"));
        }
        if self.stream_scales.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config("stream_scales must be positive"));
        }
        if self.cultures.is_empty() {
            return Err(Error::config("at least one culture is required"));
        }
        for s in STREAM_ORDER {
            if self.widths.get(s) == 0 {
                return Err(Error::config(format!("stream {} has zero width", s.name())));
            }
        }
        Ok(())
    }
}

/// One utterance: five frame-aligned streams plus labels.
#[derive(Clone, Debug)]
pub struct FeatureBundle {
    pub utterance_id: String,
    pub culture: String,
    /// Streams in canonical node order.
    pub streams: Vec<Tensor>,
    /// N x 3 labels in [-1, 1], columns (arousal, valence, liking).
    pub labels: Tensor,
}

impl FeatureBundle {
    /// Build from named streams in any order; the bundle stores them in
    /// canonical node order.
    pub fn from_named(
        utterance_id: impl Into<String>,
        culture: impl Into<String>,
        named: Vec<(String, Tensor)>,
        labels: Tensor,
    ) -> Result<Self> {
        let mut slots: Vec<Option<Tensor>> = vec![None; NODE_COUNT];
        for (name, t) in named {
            let kind = StreamKind::parse(&name)?;
            if slots[kind.index()].is_some() {
                return Err(Error::data(format!("duplicate stream {name}")));
            }
            slots[kind.index()] = Some(t);
        }
        let streams: Vec<Tensor> = slots
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                s.ok_or_else(|| Error::data(format!("missing stream {}", STREAM_ORDER[i].name())))
            })
            .collect::<Result<_>>()?;
        let bundle = FeatureBundle {
            utterance_id: utterance_id.into(),
            culture: culture.into(),
            streams,
            labels,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn n_frames(&self) -> usize {
        self.labels.rows()
    }

    pub fn stream(&self, s: StreamKind) -> &Tensor {
        &self.streams[s.index()]
    }

    /// Label column for one target.
    pub fn label_column(&self, t: Target) -> Vec<f64> {
        (0..self.n_frames()).map(|r| self.labels.at2(r, t.index())).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_frames();
        if n < 1 {
            return Err(Error::data(format!("{}: no frames", self.utterance_id)));
        }
        if self.labels.cols() != 3 {
            return Err(Error::data(format!(
                "{}: labels have {} columns, expected 3",
                self.utterance_id,
                self.labels.cols()
            )));
        }
        if self.labels.data().iter().any(|v| v.abs() > 1.0) {
            return Err(Error::data(format!(
                "{}: label outside [-1, 1]",
                self.utterance_id
            )));
        }
        for (s, t) in STREAM_ORDER.iter().zip(&self.streams) {
            if t.rows() != n {
                return Err(Error::data(format!(
                    "{}: stream {} has {} frames, labels have {n}",
                    self.utterance_id,
                    s.name(),
                    t.rows()
                )));
            }
        }
        Ok(())
    }
}

/// Ridge-probe CCC scores recorded at generation time, one entry per target.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Devel CCC of a per-stream ridge probe.
    pub single_ccc: BTreeMap<String, Vec<f64>>,
    /// Devel CCC of the probe over both interaction streams.
    pub pair_ccc: Vec<f64>,
    /// pair - best single, per target.
    pub gap: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub culture: String,
    /// "train" or "devel".
    pub split: String,
    /// Stream name -> file path relative to the manifest.
    pub streams: BTreeMap<String, String>,
    pub labels: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub spec: SignalSpec,
    pub widths: BTreeMap<String, usize>,
    pub interaction_pair: [String; 2],
    #[serde(default)]
    pub probe_report: Option<ProbeReport>,
    pub utterances: Vec<UtteranceRecord>,
}

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// A manifest together with its loaded bundles (aligned by index).
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub bundles: Vec<FeatureBundle>,
}

impl Corpus {
    pub fn bundle(&self, id: &str) -> Option<&FeatureBundle> {
        self.bundles.iter().find(|b| b.utterance_id == id)
    }
}

// ── Synthesis ───────────────────────────────────────────────────────────

struct LatentWalk {
    state: Vec<f64>,
    rho: f64,
    step: f64,
}

impl LatentWalk {
    fn new(dims: usize, rho: f64, stationary_std: f64, rng: &mut Rng) -> Self {
        let step = stationary_std * (1.0 - rho * rho).sqrt();
        let state = (0..dims)
            .map(|_| (stationary_std * rng.normal()).clamp(-1.0, 1.0))
            .collect();
        LatentWalk { state, rho, step }
    }

    fn advance(&mut self, rng: &mut Rng) -> &[f64] {
        for v in &mut self.state {
            *v = (self.rho * *v + self.step * rng.normal()).clamp(-1.0, 1.0);
        }
        &self.state
    }
}

const LATENT_DIMS: usize = 3;
const WALK_RHO: f64 = 0.92;
const WALK_STD: f64 = 0.45;
/// Per-target weights on the shared latents; each row has 1-norm 0.9, which
/// keeps the interaction-free label inside [-1, 1] (lambda = 0 never clips),
/// and the rows are linearly independent so the three targets differ.
const LABEL_WEIGHTS: [[f64; LATENT_DIMS]; 3] = [
    [0.45, -0.30, 0.15],
    [-0.15, 0.45, -0.30],
    [0.30, -0.15, 0.45],
];

/// Fixed embedding maps shared across the corpus: shared latents into every
/// stream, private latents into the interaction pair.
const NUISANCE_DIMS: usize = 2;

struct Embeddings {
    shared: Vec<Vec<f64>>,   // per stream: LATENT_DIMS x width
    private: Vec<Vec<f64>>,  // per stream: width (one private latent each)
    nuisance: Vec<Vec<f64>>, // per non-interaction stream: NUISANCE_DIMS x width
    label_w: [[f64; LATENT_DIMS]; 3],
}

fn make_embeddings(spec: &SignalSpec, rng: &mut Rng) -> Embeddings {
    let mut shared = Vec::with_capacity(NODE_COUNT);
    for s in STREAM_ORDER {
        let w = spec.widths.get(s);
        let mut m = Vec::with_capacity(LATENT_DIMS * w);
        for _ in 0..LATENT_DIMS * w {
            m.push(0.5 * rng.normal());
        }
        shared.push(m);
    }
    let mut private = Vec::with_capacity(NODE_COUNT);
    for s in STREAM_ORDER {
        let w = spec.widths.get(s);
        private.push((0..w).map(|_| 0.5 * rng.normal()).collect());
    }
    let mut nuisance = Vec::with_capacity(3);
    for s in [StreamKind::BoawE, StreamKind::BoawM, StreamKind::DeepSpectrum] {
        let w = spec.widths.get(s);
        nuisance.push((0..NUISANCE_DIMS * w).map(|_| 0.5 * rng.normal()).collect());
    }
    Embeddings {
        shared,
        private,
        nuisance,
        label_w: LABEL_WEIGHTS,
    }
}

/// Synthesize the corpus in memory. Deterministic per seed.
pub fn synth_corpus(spec: &SignalSpec, seed: u64) -> Result<(Vec<FeatureBundle>, Vec<UtteranceRecord>)> {
    spec.validate()?;
    let root = Rng::new(seed);
    let emb = make_embeddings(spec, &mut root.split(1));

    let mut bundles = Vec::new();
    let mut records = Vec::new();
    let splits = [
        ("train", spec.n_train_utterances),
        ("devel", spec.n_devel_utterances),
    ];
    for (split, count) in splits {
        for idx in 0..count {
            let culture = &spec.cultures[idx % spec.cultures.len()];
            let id = format!("{}_{split}_{idx:04}", culture.to_lowercase());
            let salt = (split == "devel") as u64 * 1_000_000 + idx as u64 + 2;
            let mut rng = root.split(salt);
            let bundle = synth_utterance(spec, &emb, &id, culture, &mut rng)?;
            let mut stream_files = BTreeMap::new();
            for s in STREAM_ORDER {
                stream_files.insert(s.name().to_string(), format!("{id}_{}.txt", s.name()));
            }
            records.push(UtteranceRecord {
                id: id.clone(),
                culture: culture.clone(),
                split: split.to_string(),
                streams: stream_files,
                labels: format!("{id}_labels.txt"),
            });
            bundles.push(bundle);
        }
    }
    Ok((bundles, records))
}

fn synth_utterance(
    spec: &SignalSpec,
    emb: &Embeddings,
    id: &str,
    culture: &str,
    rng: &mut Rng,
) -> Result<FeatureBundle> {
    let n = spec.frames_per_utterance;
    let lambda = spec.interaction_strength;
    let mut shared_walk = LatentWalk::new(LATENT_DIMS, WALK_RHO, WALK_STD, rng);
    // One private latent per stream: the interaction-pair members carry
    // (v_a, v_b) and (w_a, w_b); the fifth gates which pair matters.
    let mut private_walk = LatentWalk::new(NODE_COUNT, WALK_RHO, WALK_STD, rng);
    let mut nuisance_walk = LatentWalk::new(3 * NUISANCE_DIMS, WALK_RHO, WALK_STD, rng);

    let mut stream_data: Vec<Vec<f64>> = STREAM_ORDER
        .iter()
        .map(|&s| Vec::with_capacity(n * spec.widths.get(s)))
        .collect();
    let mut labels = Vec::with_capacity(n * 3);

    for _ in 0..n {
        let u = shared_walk.advance(rng).to_vec();
        let v = private_walk.advance(rng).to_vec();
        let nuis = nuisance_walk.advance(rng).to_vec();

        for (si, s) in STREAM_ORDER.iter().enumerate() {
            let w = spec.widths.get(*s);
            let m = &emb.shared[si];
            for col in 0..w {
                let mut val = 0.0;
                for (d, &ud) in u.iter().enumerate() {
                    val += ud * m[d * w + col];
                }
                val += v[si] * emb.private[si][col];
                if si >= 2 && spec.nuisance_level > 0.0 {
                    let dn = &emb.nuisance[si - 2];
                    for d in 0..NUISANCE_DIMS {
                        let nv = nuis[(si - 2) * NUISANCE_DIMS + d];
                        val += spec.nuisance_level * nv * dn[d * w + col];
                    }
                }
                if spec.noise_level > 0.0 {
                    val += spec.noise_level * rng.normal();
                }
                stream_data[si].push(val * spec.stream_scales[si]);
            }
        }
        let regime = 0.5 * (1.0 + v[4]);
        let products = regime * v[0] * v[1] + (1.0 - regime) * v[2] * v[3];
        let interaction = lambda * ((v[0] + v[1]) / 2.0 + spec.product_factor * products);
        for t in 0..3 {
            let base: f64 = (0..LATENT_DIMS).map(|m| emb.label_w[t][m] * u[m]).sum();
            labels.push((base + interaction).clamp(-1.0, 1.0));
        }
    }

    let streams: Vec<Tensor> = STREAM_ORDER
        .iter()
        .zip(stream_data)
        .map(|(s, d)| Tensor::new(vec![n, spec.widths.get(*s)], d))
        .collect::<Result<_>>()?;
    Ok(FeatureBundle {
        utterance_id: id.to_string(),
        culture: culture.to_string(),
        streams,
        labels: Tensor::new(vec![n, 3], labels)?,
    })
}

// ── Probes ──────────────────────────────────────────────────────────────

/// Columns used per stream by the probe oracle; keeps the normal equations
/// tractable for the 4096-wide stream while retaining the low-rank signal.
pub const PROBE_MAX_COLS: usize = 160;

fn probe_columns(width: usize, rng: &mut Rng) -> Vec<usize> {
    if width <= PROBE_MAX_COLS {
        return (0..width).collect();
    }
    let mut all: Vec<usize> = (0..width).collect();
    rng.shuffle(&mut all);
    let mut cols = all[..PROBE_MAX_COLS].to_vec();
    cols.sort_unstable();
    cols
}

/// Gaussian elimination with partial pivoting.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| a[x][col].abs().partial_cmp(&a[y][col].abs()).expect("finite"))
            .expect("nonempty");
        if a[pivot][col].abs() < 1e-12 {
            return Err(Error::data("probe system is singular"));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Ok(x)
}

/// Ridge normal equations; a bias column is appended by the row gatherer.
fn ridge_fit(rows: &[Vec<f64>], y: &[f64], alpha: f64) -> Result<Vec<f64>> {
    let d = rows[0].len();
    let mut xtx = vec![vec![0.0; d]; d];
    let mut xty = vec![0.0; d];
    for (row, &yi) in rows.iter().zip(y) {
        for i in 0..d {
            let ri = row[i];
            if ri == 0.0 {
                continue;
            }
            for j in i..d {
                xtx[i][j] += ri * row[j];
            }
            xty[i] += ri * yi;
        }
    }
    for i in 0..d {
        for j in 0..i {
            xtx[i][j] = xtx[j][i];
        }
        xtx[i][i] += alpha;
    }
    solve_linear(xtx, xty)
}

fn gather_rows(bundles: &[&FeatureBundle], streams: &[(StreamKind, &[usize])]) -> Vec<Vec<f64>> {
    let mut rows = Vec::new();
    for b in bundles {
        for t in 0..b.n_frames() {
            let mut row = Vec::new();
            for (s, cols) in streams {
                let sr = b.stream(*s).row_slice(t);
                row.extend(cols.iter().map(|&cix| sr[cix]));
            }
            row.push(1.0); // bias
            rows.push(row);
        }
    }
    rows
}

fn gather_labels(bundles: &[&FeatureBundle], target: Target) -> Vec<f64> {
    bundles.iter().flat_map(|b| b.label_column(target)).collect()
}

fn probe_ccc(
    train: &[&FeatureBundle],
    devel: &[&FeatureBundle],
    streams: &[(StreamKind, &[usize])],
) -> Result<Vec<f64>> {
    let xtr = gather_rows(train, streams);
    let xdv = gather_rows(devel, streams);
    let alpha = 1e-3 * xtr.len() as f64;
    let mut out = Vec::with_capacity(3);
    for t in TARGETS {
        let ytr = gather_labels(train, t);
        let w = ridge_fit(&xtr, &ytr, alpha)?;
        let pred: Vec<f64> = xdv
            .iter()
            .map(|row| row.iter().zip(&w).map(|(a, b)| a * b).sum())
            .collect();
        let ydv = gather_labels(devel, t);
        out.push(head::ccc(&pred, &ydv)?.ccc);
    }
    Ok(out)
}

/// Ridge-probe decodability of each single stream and of the interaction
/// pair, evaluated as devel CCC per target.
pub fn linear_probe_report(
    train: &[&FeatureBundle],
    devel: &[&FeatureBundle],
    widths: &StreamWidths,
    seed: u64,
) -> Result<ProbeReport> {
    if train.is_empty() || devel.is_empty() {
        return Err(Error::data("probe needs nonempty train and devel sets"));
    }
    let mut col_rng = Rng::new(seed).split(77);
    let cols: Vec<Vec<usize>> = STREAM_ORDER
        .iter()
        .map(|&s| probe_columns(widths.get(s), &mut col_rng))
        .collect();

    let mut single_ccc = BTreeMap::new();
    for s in STREAM_ORDER {
        let spec: Vec<(StreamKind, &[usize])> = vec![(s, &cols[s.index()])];
        single_ccc.insert(s.name().to_string(), probe_ccc(train, devel, &spec)?);
    }
    let pair_spec: Vec<(StreamKind, &[usize])> = vec![
        (StreamKind::Egemaps, &cols[StreamKind::Egemaps.index()]),
        (StreamKind::Mfcc, &cols[StreamKind::Mfcc.index()]),
    ];
    let pair_ccc = probe_ccc(train, devel, &pair_spec)?;
    let gap: Vec<f64> = (0..3)
        .map(|t| {
            let best = single_ccc
                .values()
                .map(|v| v[t])
                .fold(f64::NEG_INFINITY, f64::max);
            pair_ccc[t] - best
        })
        .collect();
    Ok(ProbeReport {
        single_ccc,
        pair_ccc,
        gap,
    })
}

// ── Files ───────────────────────────────────────────────────────────────

fn format_matrix(t: &Tensor) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{}", t.cols());
    for r in 0..t.rows() {
        let row = t.row_slice(r);
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            let _ = write!(s, "{v}");
        }
        s.push('\n');
    }
    s
}

fn parse_matrix(text: &str, path: &str, expect_cols: Option<usize>) -> Result<Tensor> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::data(format!("{path}: empty file")))?;
    let cols: usize = header
        .trim()
        .parse()
        .map_err(|_| Error::data(format!("{path}: line 1: bad column count {header:?}")))?;
    if let Some(want) = expect_cols {
        if cols != want {
            return Err(Error::data(format!(
                "{path}: declares {cols} columns, manifest expects {want}"
            )));
        }
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut count = 0;
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| {
                Error::data(format!("{path}: line {}: bad value {tok:?}", lineno + 2))
            })?;
            if !v.is_finite() {
                return Err(Error::data(format!(
                    "{path}: line {}: non-finite value {tok}",
                    lineno + 2
                )));
            }
            data.push(v);
            count += 1;
        }
        if count != cols {
            return Err(Error::data(format!(
                "{path}: line {}: {count} values, expected {cols}",
                lineno + 2
            )));
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::data(format!("{path}: no frames")));
    }
    Tensor::new(vec![rows, cols], data)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Generate a corpus on disk: stream/label files plus `manifest.json`.
/// Returns the manifest with the probe report filled in.
pub fn generate_corpus(spec: &SignalSpec, seed: u64, out_dir: &Path) -> Result<CorpusManifest> {
    let (bundles, records) = synth_corpus(spec, seed)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    for (b, rec) in bundles.iter().zip(&records) {
        for s in STREAM_ORDER {
            let path = out_dir.join(&rec.streams[s.name()]);
            write_file(&path, &format_matrix(b.stream(s)))?;
        }
        write_file(&out_dir.join(&rec.labels), &format_matrix(&b.labels))?;
    }

    let train: Vec<&FeatureBundle> = bundles
        .iter()
        .zip(&records)
        .filter(|(_, r)| r.split == "train")
        .map(|(b, _)| b)
        .collect();
    let devel: Vec<&FeatureBundle> = bundles
        .iter()
        .zip(&records)
        .filter(|(_, r)| r.split == "devel")
        .map(|(b, _)| b)
        .collect();
    let probe = linear_probe_report(&train, &devel, &spec.widths, seed)?;

    let manifest = CorpusManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        seed,
        spec: spec.clone(),
        widths: spec.widths.as_map(),
        interaction_pair: ["egemaps".to_string(), "mfcc".to_string()],
        probe_report: Some(probe),
        utterances: records,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::data(format!("manifest serialization: {e}")))?;
    write_file(&out_dir.join("manifest.json"), &json)?;
    Ok(manifest)
}

pub fn load_manifest(path: &Path) -> Result<CorpusManifest> {
    let text = read_file(path)?;
    let m: CorpusManifest =
        serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    if m.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::data(format!(
            "{}: manifest schema {} unsupported (expected {MANIFEST_SCHEMA_VERSION})",
            path.display(),
            m.schema_version
        )));
    }
    for rec in &m.utterances {
        for name in rec.streams.keys() {
            StreamKind::parse(name)?;
        }
        if rec.split != "train" && rec.split != "devel" {
            return Err(Error::data(format!(
                "{}: utterance {} has unknown split {:?}",
                path.display(),
                rec.id,
                rec.split
            )));
        }
    }
    Ok(m)
}

/// Load one utterance's streams and labels, validating widths and frame
/// counts against the manifest.
pub fn load_bundle(manifest: &CorpusManifest, dir: &Path, utterance_id: &str) -> Result<FeatureBundle> {
    let rec = manifest
        .utterances
        .iter()
        .find(|r| r.id == utterance_id)
        .ok_or_else(|| Error::data(format!("unknown utterance id {utterance_id}")))?;
    let mut named = Vec::with_capacity(NODE_COUNT);
    for s in STREAM_ORDER {
        let rel = rec.streams.get(s.name()).ok_or_else(|| {
            Error::data(format!(
                "{utterance_id}: stream {} missing from manifest",
                s.name()
            ))
        })?;
        let width = *manifest
            .widths
            .get(s.name())
            .ok_or_else(|| Error::config(format!("manifest lacks width for {}", s.name())))?;
        let path = dir.join(rel);
        let t = parse_matrix(&read_file(&path)?, &path.display().to_string(), Some(width))?;
        named.push((s.name().to_string(), t));
    }
    let lpath = dir.join(&rec.labels);
    let labels = parse_matrix(&read_file(&lpath)?, &lpath.display().to_string(), Some(3))?;
    FeatureBundle::from_named(rec.id.clone(), rec.culture.clone(), named, labels)
}

/// Load every utterance of a manifest.
pub fn load_corpus(manifest_path: &Path) -> Result<Corpus> {
    let manifest = load_manifest(manifest_path)?;
    let dir = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let bundles = manifest
        .utterances
        .iter()
        .map(|r| load_bundle(&manifest, &dir, &r.id))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus { manifest, bundles })
}

/// Filter by culture tag then by declared split.
pub fn split<'a>(
    manifest: &'a CorpusManifest,
    cultures: &[String],
) -> Result<(Vec<&'a UtteranceRecord>, Vec<&'a UtteranceRecord>)> {
    if cultures.is_empty() {
        return Err(Error::usage("split: culture selection is empty"));
    }
    let keep: Vec<&UtteranceRecord> = manifest
        .utterances
        .iter()
        .filter(|r| cultures.iter().any(|c| c == &r.culture))
        .collect();
    if keep.is_empty() {
        return Err(Error::data(format!(
            "no utterances for cultures {cultures:?}"
        )));
    }
    let train = keep.iter().copied().filter(|r| r.split == "train").collect();
    let devel = keep.iter().copied().filter(|r| r.split == "devel").collect();
    Ok((train, devel))
}

#[cfg(test)]
mod tests;
