//! Evaluation harness: reference/test protocol splits, EER and DET
//! computation, multi-run averaging, cost-parameter grid search and
//! a-posteriori user-dependent normalization.
//!
//! Pairwise dissimilarities are computed once, in parallel, and cached
//! keyed by image pair, classifier and parameter hash; systems and runs
//! share the cache, and it can be persisted so a grid search never
//! re-extracts graphs.

use std::collections::{HashMap, HashSet};
use std::io::Write as _;
use std::path::Path;
use std::sync::RwLock;

use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{DatasetError, SignatureDataset};
use crate::embed::Network;
use crate::ged::{compare_graphs, CostParams};
use crate::graph::{GraphExtractionParams, KeypointGraph};
use crate::raster::{GrayImage, RasterError};
use crate::scoring::{
    fusion_stats, mcs_score, user_delta, verification_score, FusionStats, ScoringError,
    UserTemplate,
};

#[derive(Error, Debug)]
pub enum EvalError {
    #[error("user {user} has {genuine} genuine signatures, protocol needs more than {required}")]
    InsufficientGenuines {
        user: String,
        genuine: usize,
        required: usize,
    },
    #[error("score list is empty")]
    EmptyScoreList,
    #[error("user {0} has a degenerate (non-positive) EER threshold")]
    DegenerateUser(String),
    #[error("system needs a trained model")]
    MissingModel,
    #[error("invalid protocol: {0}")]
    InvalidProtocol(String),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForgeryMode {
    Skilled,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefSelection {
    /// The first `reference_count` genuine signatures.
    FirstK,
    /// Seeded random subsets, identical across the systems compared.
    RandomSeeded,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Protocol {
    pub reference_count: usize,
    pub forgery_mode: ForgeryMode,
    pub reference_selection: RefSelection,
    pub runs: usize,
    pub seed: u64,
}

impl Protocol {
    pub fn new(reference_count: usize, forgery_mode: ForgeryMode) -> Self {
        Self {
            reference_count,
            forgery_mode,
            reference_selection: RefSelection::FirstK,
            runs: 1,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<(), EvalError> {
        if self.reference_count < 2 {
            return Err(EvalError::InvalidProtocol(
                "reference_count must be at least 2".into(),
            ));
        }
        if self.runs == 0 {
            return Err(EvalError::InvalidProtocol("runs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum System {
    Ged,
    Neural,
    Mcs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ImageKind {
    Genuine,
    Forgery,
}

/// Stable identity of one image in a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ImageKey {
    pub user: usize,
    pub kind: ImageKind,
    pub index: usize,
}

/// Per-user reference/test assignment for one run.
#[derive(Debug, Clone)]
pub struct UserSplit {
    pub user: usize,
    pub references: Vec<ImageKey>,
    pub genuine_tests: Vec<ImageKey>,
    pub forgery_tests: Vec<ImageKey>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Counts {
    pub references: usize,
    pub genuine_tests: usize,
    pub forgeries: usize,
}

/// Deterministic split of a dataset under a protocol. `run` selects the
/// reference draw when the selection is seeded-random; the draw depends
/// only on (seed, run, user order), never on the system evaluated.
pub fn split_protocol(
    dataset: &SignatureDataset,
    protocol: &Protocol,
    run: usize,
) -> Result<Vec<UserSplit>, EvalError> {
    use rand::SeedableRng;
    protocol.validate()?;
    for user in &dataset.users {
        if user.genuine.len() <= protocol.reference_count {
            return Err(EvalError::InsufficientGenuines {
                user: user.id.clone(),
                genuine: user.genuine.len(),
                required: protocol.reference_count,
            });
        }
    }

    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(
        protocol.seed ^ (run as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
    );

    let mut splits = Vec::with_capacity(dataset.users.len());
    for (ui, user) in dataset.users.iter().enumerate() {
        let n = user.genuine.len();
        let mut ref_indices: Vec<usize> = match protocol.reference_selection {
            RefSelection::FirstK => (0..protocol.reference_count).collect(),
            RefSelection::RandomSeeded => {
                rand::seq::index::sample(&mut rng, n, protocol.reference_count).into_vec()
            }
        };
        ref_indices.sort_unstable();
        let ref_set: HashSet<usize> = ref_indices.iter().copied().collect();

        let references = ref_indices
            .iter()
            .map(|&i| ImageKey {
                user: ui,
                kind: ImageKind::Genuine,
                index: i,
            })
            .collect();
        let genuine_tests = (0..n)
            .filter(|i| !ref_set.contains(i))
            .map(|i| ImageKey {
                user: ui,
                kind: ImageKind::Genuine,
                index: i,
            })
            .collect();
        let forgery_tests = match protocol.forgery_mode {
            ForgeryMode::Skilled => (0..user.skilled_forgeries.len())
                .map(|i| ImageKey {
                    user: ui,
                    kind: ImageKind::Forgery,
                    index: i,
                })
                .collect(),
            ForgeryMode::Random => (0..dataset.users.len())
                .filter(|&vi| vi != ui)
                .map(|vi| ImageKey {
                    user: vi,
                    kind: ImageKind::Genuine,
                    index: 0,
                })
                .collect(),
        };
        splits.push(UserSplit {
            user: ui,
            references,
            genuine_tests,
            forgery_tests,
        });
    }
    Ok(splits)
}

pub fn split_counts(splits: &[UserSplit]) -> Counts {
    Counts {
        references: splits.iter().map(|s| s.references.len()).sum(),
        genuine_tests: splits.iter().map(|s| s.genuine_tests.len()).sum(),
        forgeries: splits.iter().map(|s| s.forgery_tests.len()).sum(),
    }
}

/// One operating point of the threshold sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetCurve {
    pub points: Vec<DetPoint>,
}

/// Equal error rate of two score lists (dissimilarities: small means
/// genuine). Thresholds sweep the union of observed scores; a signature is
/// accepted when its score is strictly below the threshold, so
/// `FAR = |forgery < t| / |forgery|` and `FRR = |genuine >= t| / |genuine|`.
/// When no swept threshold has FAR = FRR exactly, the crossing is linearly
/// interpolated between the two adjacent operating points.
///
/// Returns `(eer, threshold, det)`.
pub fn compute_eer(
    genuine: &[f64],
    forgery: &[f64],
) -> Result<(f64, f64, DetCurve), EvalError> {
    if genuine.is_empty() || forgery.is_empty() {
        return Err(EvalError::EmptyScoreList);
    }
    let mut genuine_sorted = genuine.to_vec();
    let mut forgery_sorted = forgery.to_vec();
    genuine_sorted.sort_by(|a, b| a.partial_cmp(b).expect("scores must not be NaN"));
    forgery_sorted.sort_by(|a, b| a.partial_cmp(b).expect("scores must not be NaN"));

    let mut thresholds: Vec<f64> = genuine_sorted
        .iter()
        .chain(&forgery_sorted)
        .copied()
        .collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    // sentinel above the maximum so the sweep reaches (FAR 1, FRR 0)
    let max = *thresholds.last().unwrap();
    thresholds.push(if max.abs() < 1.0 { max + 1.0 } else { max + max.abs() });

    let (ng, nf) = (genuine_sorted.len() as f64, forgery_sorted.len() as f64);
    let points: Vec<DetPoint> = thresholds
        .iter()
        .map(|&t| {
            let accepted_forgeries = forgery_sorted.partition_point(|&s| s < t);
            let accepted_genuine = genuine_sorted.partition_point(|&s| s < t);
            DetPoint {
                threshold: t,
                far: accepted_forgeries as f64 / nf,
                frr: (genuine_sorted.len() - accepted_genuine) as f64 / ng,
            }
        })
        .collect();

    // FAR - FRR starts at -1 and ends at +1; find the sign change
    let mut eer = f64::NAN;
    let mut threshold = f64::NAN;
    for i in 0..points.len() {
        let d = points[i].far - points[i].frr;
        if d == 0.0 {
            eer = points[i].far;
            threshold = points[i].threshold;
            break;
        }
        if d > 0.0 {
            let prev = points[i - 1];
            let cur = points[i];
            let d0 = prev.far - prev.frr;
            let t = d0 / (d0 - d);
            eer = prev.far + t * (cur.far - prev.far);
            threshold = prev.threshold + t * (cur.threshold - prev.threshold);
            break;
        }
    }
    debug_assert!(eer.is_finite(), "sweep always crosses");
    Ok((eer, threshold, DetCurve { points }))
}

/// Scores of one user, used by the a-posteriori normalization.
#[derive(Debug, Clone)]
pub struct UserScores {
    pub user: String,
    pub genuine: Vec<f64>,
    pub forgeries: Vec<f64>,
}

/// A-posteriori user-dependent normalization: each user's scores are
/// divided by that user's own EER threshold, aligning every user's EER
/// operating point at 1.0. Thresholds are epsilon-floored; a user whose
/// threshold is not positive is rejected as degenerate.
pub fn aposteriori_user_norm(scores: &[UserScores]) -> Result<Vec<UserScores>, EvalError> {
    let mut out = Vec::with_capacity(scores.len());
    for user in scores {
        if user.genuine.is_empty() || user.forgeries.is_empty() {
            return Err(EvalError::EmptyScoreList);
        }
        let (_, threshold, _) = compute_eer(&user.genuine, &user.forgeries)?;
        if threshold <= 0.0 {
            return Err(EvalError::DegenerateUser(user.user.clone()));
        }
        let theta = threshold.max(1e-12);
        out.push(UserScores {
            user: user.user.clone(),
            genuine: user.genuine.iter().map(|s| s / theta).collect(),
            forgeries: user.forgeries.iter().map(|s| s / theta).collect(),
        });
    }
    Ok(out)
}

/// Pooled EER over several users' score lists.
pub fn pooled_eer(scores: &[UserScores]) -> Result<f64, EvalError> {
    let genuine: Vec<f64> = scores.iter().flat_map(|u| u.genuine.clone()).collect();
    let forgeries: Vec<f64> = scores.iter().flat_map(|u| u.forgeries.clone()).collect();
    Ok(compute_eer(&genuine, &forgeries)?.0)
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    /// Mean EER over the runs.
    pub eer: f64,
    /// EER threshold of the first run.
    pub threshold: f64,
    /// DET curve of the first run.
    pub det: DetCurve,
    pub per_run_eers: Vec<f64>,
    /// Counts of one run (identical across runs).
    pub counts: Counts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct PairKey {
    a: ImageKey,
    b: ImageKey,
    classifier: u8, // 0 = ged, 1 = neural
    param_hash: u64,
}

impl PairKey {
    fn canonical(a: ImageKey, b: ImageKey, classifier: u8, param_hash: u64) -> Self {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        Self {
            a,
            b,
            classifier,
            param_hash,
        }
    }
}

fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn ged_param_hash(cost: &CostParams, extraction: &GraphExtractionParams) -> u64 {
    let mut bytes = Vec::with_capacity(24);
    bytes.extend_from_slice(&cost.c_node.to_le_bytes());
    bytes.extend_from_slice(&cost.c_edge.to_le_bytes());
    bytes.extend_from_slice(&extraction.sampling_interval.to_le_bytes());
    fnv1a(bytes)
}

fn neural_param_hash(model: &Network) -> u64 {
    let mut bytes = Vec::with_capacity(model.param_count() * 8 + 16);
    let (h, w) = model.input_size();
    bytes.extend_from_slice(&(h as u64).to_le_bytes());
    bytes.extend_from_slice(&(w as u64).to_le_bytes());
    for p in model.params() {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    fnv1a(bytes)
}

/// Pairwise score store: concurrent readers, serialized writers.
#[derive(Debug, Default)]
struct ScoreCache {
    map: RwLock<HashMap<PairKey, f64>>,
}

impl ScoreCache {
    fn get(&self, key: &PairKey) -> Option<f64> {
        self.map.read().expect("cache lock").get(key).copied()
    }

    fn insert_all(&self, entries: Vec<(PairKey, f64)>) {
        let mut map = self.map.write().expect("cache lock");
        for (k, v) in entries {
            map.insert(k, v);
        }
    }
}

/// Evaluation pipeline over one dataset: owns the graph, embedding and
/// pairwise-score caches shared by all systems, runs and grid cells.
pub struct Evaluator<'a> {
    dataset: &'a SignatureDataset,
    extraction: GraphExtractionParams,
    model: Option<&'a Network>,
    neural_hash: u64,
    graphs: HashMap<ImageKey, KeypointGraph>,
    embeddings: HashMap<ImageKey, Vec<f64>>,
    cache: ScoreCache,
}

impl<'a> Evaluator<'a> {
    pub fn new(
        dataset: &'a SignatureDataset,
        extraction: GraphExtractionParams,
        model: Option<&'a Network>,
    ) -> Self {
        Self {
            dataset,
            extraction,
            model,
            neural_hash: model.map(neural_param_hash).unwrap_or(0),
            graphs: HashMap::new(),
            embeddings: HashMap::new(),
            cache: ScoreCache::default(),
        }
    }

    fn key_path(&self, key: ImageKey) -> &std::path::Path {
        let user = &self.dataset.users[key.user];
        match key.kind {
            ImageKind::Genuine => &user.genuine[key.index],
            ImageKind::Forgery => &user.skilled_forgeries[key.index],
        }
    }

    fn load_image(&self, key: ImageKey) -> Result<GrayImage, EvalError> {
        Ok(GrayImage::load_png(self.key_path(key))?)
    }

    fn ensure_graphs(&mut self, keys: &HashSet<ImageKey>) -> Result<(), EvalError> {
        let missing: Vec<ImageKey> = {
            let mut m: Vec<ImageKey> =
                keys.iter().filter(|k| !self.graphs.contains_key(k)).copied().collect();
            m.sort_unstable();
            m
        };
        if missing.is_empty() {
            return Ok(());
        }
        let extraction = self.extraction;
        let computed: Result<Vec<(ImageKey, KeypointGraph)>, EvalError> = missing
            .par_iter()
            .map(|&key| {
                let img = self.load_image(key)?;
                Ok((key, crate::ged::graph_of_image(&img, &extraction)))
            })
            .collect();
        for (key, graph) in computed? {
            self.graphs.insert(key, graph);
        }
        Ok(())
    }

    fn ensure_embeddings(&mut self, keys: &HashSet<ImageKey>) -> Result<(), EvalError> {
        let model = self.model.ok_or(EvalError::MissingModel)?;
        let missing: Vec<ImageKey> = {
            let mut m: Vec<ImageKey> = keys
                .iter()
                .filter(|k| !self.embeddings.contains_key(k))
                .copied()
                .collect();
            m.sort_unstable();
            m
        };
        if missing.is_empty() {
            return Ok(());
        }
        let computed: Result<Vec<(ImageKey, Vec<f64>)>, EvalError> = missing
            .par_iter()
            .map(|&key| {
                let img = self.load_image(key)?;
                Ok((key, model.embed(&img)))
            })
            .collect();
        for (key, embedding) in computed? {
            self.embeddings.insert(key, embedding);
        }
        Ok(())
    }

    fn ensure_ged_scores(
        &mut self,
        pairs: &HashSet<(ImageKey, ImageKey)>,
        cost: &CostParams,
    ) -> Result<(), EvalError> {
        let hash = ged_param_hash(cost, &self.extraction);
        let keys: HashSet<ImageKey> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
        self.ensure_graphs(&keys)?;
        let mut missing: Vec<PairKey> = pairs
            .iter()
            .map(|&(a, b)| PairKey::canonical(a, b, 0, hash))
            .filter(|k| self.cache.get(k).is_none())
            .collect();
        missing.sort_unstable_by_key(|k| (k.a, k.b));
        missing.dedup();
        let graphs = &self.graphs;
        let cost = *cost;
        let computed: Vec<(PairKey, f64)> = missing
            .par_iter()
            .map(|&key| {
                let result = compare_graphs(&graphs[&key.a], &graphs[&key.b], &cost);
                (key, result.normalized)
            })
            .collect();
        self.cache.insert_all(computed);
        Ok(())
    }

    fn ensure_neural_scores(
        &mut self,
        pairs: &HashSet<(ImageKey, ImageKey)>,
    ) -> Result<(), EvalError> {
        let hash = self.neural_hash;
        let keys: HashSet<ImageKey> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
        self.ensure_embeddings(&keys)?;
        let mut missing: Vec<PairKey> = pairs
            .iter()
            .map(|&(a, b)| PairKey::canonical(a, b, 1, hash))
            .filter(|k| self.cache.get(k).is_none())
            .collect();
        missing.sort_unstable_by_key(|k| (k.a, k.b));
        missing.dedup();
        let embeddings = &self.embeddings;
        let computed: Vec<(PairKey, f64)> = missing
            .par_iter()
            .map(|&key| {
                let d = crate::embed::euclidean(&embeddings[&key.a], &embeddings[&key.b]);
                (key, d)
            })
            .collect();
        self.cache.insert_all(computed);
        Ok(())
    }

    fn ged_score(&self, a: ImageKey, b: ImageKey, cost: &CostParams) -> f64 {
        let key = PairKey::canonical(a, b, 0, ged_param_hash(cost, &self.extraction));
        self.cache.get(&key).expect("ged pair ensured")
    }

    fn neural_score(&self, a: ImageKey, b: ImageKey) -> f64 {
        let key = PairKey::canonical(a, b, 1, self.neural_hash);
        self.cache.get(&key).expect("neural pair ensured")
    }

    fn pairs_for_run(&self, splits: &[UserSplit], include_fusion: bool) -> HashSet<(ImageKey, ImageKey)> {
        let mut pairs = HashSet::new();
        for split in splits {
            for (i, &r) in split.references.iter().enumerate() {
                for &s in &split.references[i + 1..] {
                    pairs.insert((r, s));
                }
                for &t in split.genuine_tests.iter().chain(&split.forgery_tests) {
                    pairs.insert((r, t));
                }
            }
        }
        if include_fusion {
            // cross-user reference pairs for the z-score population
            let all_refs: Vec<ImageKey> =
                splits.iter().flat_map(|s| s.references.iter().copied()).collect();
            for (i, &r) in all_refs.iter().enumerate() {
                for &s in &all_refs[i + 1..] {
                    if r.user != s.user {
                        pairs.insert((r, s));
                    }
                }
            }
        }
        pairs
    }

    fn templates_for_run(
        &self,
        splits: &[UserSplit],
        cost: &CostParams,
        with_ged: bool,
        with_neural: bool,
    ) -> Result<(Vec<UserTemplate>, Vec<ImageKey>), EvalError> {
        let mut templates = Vec::with_capacity(splits.len());
        let mut flat_refs = Vec::new();
        for split in splits {
            let n = split.references.len();
            let table_of = |f: &dyn Fn(ImageKey, ImageKey) -> f64| -> Vec<Vec<f64>> {
                (0..n)
                    .map(|i| {
                        (0..n)
                            .map(|j| {
                                if i == j {
                                    0.0
                                } else {
                                    f(split.references[i], split.references[j])
                                }
                            })
                            .collect()
                    })
                    .collect()
            };
            let delta_ged = if with_ged {
                user_delta(&table_of(&|a, b| self.ged_score(a, b, cost)))?
            } else {
                1.0
            };
            let delta_neural = if with_neural {
                user_delta(&table_of(&|a, b| self.neural_score(a, b)))?
            } else {
                1.0
            };
            let base = flat_refs.len();
            flat_refs.extend(split.references.iter().copied());
            templates.push(UserTemplate {
                user: self.dataset.users[split.user].id.clone(),
                references: (base..base + n).collect(),
                delta_ged,
                delta_neural,
            });
        }
        Ok((templates, flat_refs))
    }

    fn test_score(
        &self,
        split: &UserSplit,
        template: &UserTemplate,
        stats: Option<&FusionStats>,
        test: ImageKey,
        system: System,
        cost: &CostParams,
    ) -> Result<f64, EvalError> {
        let ged_raw: Vec<f64> = split
            .references
            .iter()
            .map(|&r| self.ged_score(r, test, cost))
            .collect();
        Ok(match system {
            System::Ged => verification_score(&ged_raw, template.delta_ged)?,
            System::Neural => {
                let nn_raw: Vec<f64> = split
                    .references
                    .iter()
                    .map(|&r| self.neural_score(r, test))
                    .collect();
                verification_score(&nn_raw, template.delta_neural)?
            }
            System::Mcs => {
                let stats = stats.expect("fusion stats computed for mcs");
                let nn_raw: Vec<f64> = split
                    .references
                    .iter()
                    .map(|&r| self.neural_score(r, test))
                    .collect();
                let ged_hat: Vec<f64> =
                    ged_raw.iter().map(|d| d / template.delta_ged).collect();
                let nn_hat: Vec<f64> =
                    nn_raw.iter().map(|d| d / template.delta_neural).collect();
                mcs_score(&ged_hat, &nn_hat, stats)?
            }
        })
    }

    fn run_once(
        &mut self,
        protocol: &Protocol,
        system: System,
        cost: &CostParams,
        run: usize,
    ) -> Result<(Vec<UserScores>, Counts), EvalError> {
        if system != System::Ged && self.model.is_none() {
            return Err(EvalError::MissingModel);
        }
        let splits = split_protocol(self.dataset, protocol, run)?;
        let with_ged = system != System::Neural;
        let with_neural = system != System::Ged;
        let with_fusion = system == System::Mcs;
        let pairs = self.pairs_for_run(&splits, with_fusion);
        if with_ged {
            self.ensure_ged_scores(&pairs, cost)?;
        }
        if with_neural {
            self.ensure_neural_scores(&pairs)?;
        }

        let (templates, flat_refs) =
            self.templates_for_run(&splits, cost, with_ged, with_neural)?;
        let stats = if with_fusion {
            Some(fusion_stats(
                &templates,
                |a, b| self.ged_score(flat_refs[a], flat_refs[b], cost),
                |a, b| self.neural_score(flat_refs[a], flat_refs[b]),
            )?)
        } else {
            None
        };

        let mut user_scores = Vec::with_capacity(splits.len());
        for (split, template) in splits.iter().zip(&templates) {
            let mut genuine = Vec::with_capacity(split.genuine_tests.len());
            for &t in &split.genuine_tests {
                genuine.push(self.test_score(split, template, stats.as_ref(), t, system, cost)?);
            }
            let mut forgeries = Vec::with_capacity(split.forgery_tests.len());
            for &t in &split.forgery_tests {
                forgeries.push(self.test_score(split, template, stats.as_ref(), t, system, cost)?);
            }
            user_scores.push(UserScores {
                user: template.user.clone(),
                genuine,
                forgeries,
            });
        }
        Ok((user_scores, split_counts(&splits)))
    }

    /// Evaluate one system under a protocol. With `runs > 1` the EER is the
    /// mean of the per-run EERs; the DET curve and threshold reported are
    /// those of the first run.
    pub fn run_protocol(
        &mut self,
        protocol: &Protocol,
        system: System,
        cost: &CostParams,
    ) -> Result<EvalResult, EvalError> {
        self.run_protocol_with_options(protocol, system, cost, false)
    }

    /// Like [`Evaluator::run_protocol`], optionally applying the
    /// a-posteriori user-dependent normalization to each run's scores
    /// before the pooled EER is computed.
    pub fn run_protocol_with_options(
        &mut self,
        protocol: &Protocol,
        system: System,
        cost: &CostParams,
        aposteriori_norm: bool,
    ) -> Result<EvalResult, EvalError> {
        protocol.validate()?;
        let mut per_run_eers = Vec::with_capacity(protocol.runs);
        let mut first: Option<(f64, DetCurve, Counts)> = None;
        for run in 0..protocol.runs {
            let (user_scores, counts) = self.run_once(protocol, system, cost, run)?;
            let user_scores = if aposteriori_norm {
                aposteriori_user_norm(&user_scores)?
            } else {
                user_scores
            };
            let genuine: Vec<f64> =
                user_scores.iter().flat_map(|u| u.genuine.iter().copied()).collect();
            let forgery: Vec<f64> = user_scores
                .iter()
                .flat_map(|u| u.forgeries.iter().copied())
                .collect();
            let (eer, threshold, det) = compute_eer(&genuine, &forgery)?;
            per_run_eers.push(eer);
            if first.is_none() {
                first = Some((threshold, det, counts));
            }
        }
        let (threshold, det, counts) = first.expect("at least one run");
        Ok(EvalResult {
            eer: per_run_eers.iter().sum::<f64>() / per_run_eers.len() as f64,
            threshold,
            det,
            per_run_eers,
            counts,
        })
    }

    /// Per-test score dump of the first run (all systems whose inputs are
    /// available).
    pub fn score_rows(
        &mut self,
        protocol: &Protocol,
        cost: &CostParams,
    ) -> Result<Vec<ScoreRow>, EvalError> {
        protocol.validate()?;
        let splits = split_protocol(self.dataset, protocol, 0)?;
        let with_neural = self.model.is_some();
        let pairs = self.pairs_for_run(&splits, with_neural);
        self.ensure_ged_scores(&pairs, cost)?;
        if with_neural {
            self.ensure_neural_scores(&pairs)?;
        }
        let (templates, flat_refs) =
            self.templates_for_run(&splits, cost, true, with_neural)?;
        let stats = if with_neural {
            Some(fusion_stats(
                &templates,
                |a, b| self.ged_score(flat_refs[a], flat_refs[b], cost),
                |a, b| self.neural_score(flat_refs[a], flat_refs[b]),
            )?)
        } else {
            None
        };

        let mut rows = Vec::new();
        for (split, template) in splits.iter().zip(&templates) {
            let tests = split
                .genuine_tests
                .iter()
                .map(|&t| (t, "genuine"))
                .chain(split.forgery_tests.iter().map(|&t| {
                    (
                        t,
                        match protocol.forgery_mode {
                            ForgeryMode::Skilled => "skilled",
                            ForgeryMode::Random => "random",
                        },
                    )
                }));
            for (t, label) in tests {
                let ged_raw: Vec<f64> = split
                    .references
                    .iter()
                    .map(|&r| self.ged_score(r, t, cost))
                    .collect();
                let d_ged = ged_raw.iter().fold(f64::INFINITY, |a, &b| a.min(b));
                let score_ged = verification_score(&ged_raw, template.delta_ged)?;
                let (d_neural, score_neural, score_mcs) = if with_neural {
                    let nn_raw: Vec<f64> = split
                        .references
                        .iter()
                        .map(|&r| self.neural_score(r, t))
                        .collect();
                    let d_nn = nn_raw.iter().fold(f64::INFINITY, |a, &b| a.min(b));
                    let s_nn = verification_score(&nn_raw, template.delta_neural)?;
                    let ged_hat: Vec<f64> =
                        ged_raw.iter().map(|d| d / template.delta_ged).collect();
                    let nn_hat: Vec<f64> =
                        nn_raw.iter().map(|d| d / template.delta_neural).collect();
                    let s_mcs = mcs_score(&ged_hat, &nn_hat, stats.as_ref().unwrap())?;
                    (Some(d_nn), Some(s_nn), Some(s_mcs))
                } else {
                    (None, None, None)
                };
                let signature_id = match (t.kind, t.user == split.user) {
                    (ImageKind::Genuine, true) => format!("genuine/{:02}", t.index + 1),
                    (ImageKind::Forgery, _) => format!("forgery/{:02}", t.index + 1),
                    (ImageKind::Genuine, false) => format!(
                        "rf/{}/{:02}",
                        self.dataset.users[t.user].id,
                        t.index + 1
                    ),
                };
                rows.push(ScoreRow {
                    user_id: template.user.clone(),
                    signature_id,
                    label: label.to_string(),
                    d_ged,
                    d_neural,
                    score_ged,
                    score_neural,
                    score_mcs,
                });
            }
        }
        Ok(rows)
    }

    /// Grid search over cost parameters with the random-forgery protocol
    /// and the GED system. Ties break toward smaller `c_node`, then smaller
    /// `c_edge`. Keypoint graphs are extracted once and shared by all
    /// cells.
    pub fn grid_search(
        &mut self,
        grid: &GridSpec,
        protocol: &Protocol,
    ) -> Result<GridSearchResult, EvalError> {
        let mut rf_protocol = *protocol;
        rf_protocol.forgery_mode = ForgeryMode::Random;
        let mut c_nodes = grid.c_node.clone();
        let mut c_edges = grid.c_edge.clone();
        c_nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());
        c_edges.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if c_nodes.is_empty() || c_edges.is_empty() {
            return Err(EvalError::InvalidProtocol("empty grid".into()));
        }

        let mut cells = Vec::with_capacity(c_nodes.len() * c_edges.len());
        let mut best: Option<GridCell> = None;
        for &c_node in &c_nodes {
            for &c_edge in &c_edges {
                let cost = CostParams::new(c_node, c_edge);
                let result = self.run_protocol(&rf_protocol, System::Ged, &cost)?;
                let cell = GridCell {
                    c_node,
                    c_edge,
                    eer: result.eer,
                };
                if best.as_ref().is_none_or(|b| cell.eer < b.eer) {
                    best = Some(cell);
                }
                cells.push(cell);
            }
        }
        Ok(GridSearchResult {
            cells,
            best: best.expect("grid is non-empty"),
        })
    }

    /// Persist the pairwise score cache.
    pub fn save_cache(&self, path: &Path) -> Result<(), EvalError> {
        let map = self.cache.map.read().expect("cache lock");
        let mut entries: Vec<(&PairKey, &f64)> = map.iter().collect();
        entries.sort_by_key(|(k, _)| (k.classifier, k.param_hash, k.a, k.b));
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (k, v) in entries {
            let fmt_key = |key: ImageKey| {
                format!(
                    "{}\t{}\t{}",
                    self.dataset.users[key.user].id,
                    match key.kind {
                        ImageKind::Genuine => "g",
                        ImageKind::Forgery => "f",
                    },
                    key.index
                )
            };
            writeln!(
                out,
                "{}\t{:016x}\t{}\t{}\t{:016x}",
                k.classifier,
                k.param_hash,
                fmt_key(k.a),
                fmt_key(k.b),
                v.to_bits()
            )?;
        }
        Ok(())
    }

    /// Load a previously saved score cache. Entries for users unknown to
    /// this dataset are ignored.
    pub fn load_cache(&mut self, path: &Path) -> Result<usize, EvalError> {
        let text = std::fs::read_to_string(path)?;
        let user_index: HashMap<&str, usize> = self
            .dataset
            .users
            .iter()
            .enumerate()
            .map(|(i, u)| (u.id.as_str(), i))
            .collect();
        let mut entries = Vec::new();
        for line in text.lines() {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 9 {
                continue;
            }
            let parse_key = |user: &str, kind: &str, index: &str| -> Option<ImageKey> {
                Some(ImageKey {
                    user: *user_index.get(user)?,
                    kind: match kind {
                        "g" => ImageKind::Genuine,
                        "f" => ImageKind::Forgery,
                        _ => return None,
                    },
                    index: index.parse().ok()?,
                })
            };
            let entry = (|| {
                let classifier: u8 = fields[0].parse().ok()?;
                let param_hash = u64::from_str_radix(fields[1], 16).ok()?;
                let a = parse_key(fields[2], fields[3], fields[4])?;
                let b = parse_key(fields[5], fields[6], fields[7])?;
                let bits = u64::from_str_radix(fields[8], 16).ok()?;
                Some((
                    PairKey::canonical(a, b, classifier, param_hash),
                    f64::from_bits(bits),
                ))
            })();
            if let Some(e) = entry {
                entries.push(e);
            }
        }
        let n = entries.len();
        self.cache.insert_all(entries);
        Ok(n)
    }
}

/// Grid of cost-parameter candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub c_node: Vec<f64>,
    pub c_edge: Vec<f64>,
}

impl GridSpec {
    /// The standard validation grid: {10, 15, ..., 60} on both axes.
    pub fn standard() -> Self {
        let values: Vec<f64> = (0..11).map(|i| 10.0 + 5.0 * i as f64).collect();
        Self {
            c_node: values.clone(),
            c_edge: values,
        }
    }

    /// Parse a grid file: two non-comment lines of whitespace-separated
    /// values, `c_node` candidates first, `c_edge` candidates second.
    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let parse_line = |line: Option<&str>| -> Result<Vec<f64>, EvalError> {
            let line = line.ok_or_else(|| {
                EvalError::InvalidProtocol("grid file needs two value lines".into())
            })?;
            line.split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>().map_err(|e| {
                        EvalError::InvalidProtocol(format!("bad grid value {tok}: {e}"))
                    })
                })
                .collect()
        };
        let c_node = parse_line(lines.next())?;
        let c_edge = parse_line(lines.next())?;
        if c_node.is_empty() || c_edge.is_empty() {
            return Err(EvalError::InvalidProtocol("empty grid axis".into()));
        }
        Ok(Self { c_node, c_edge })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridCell {
    pub c_node: f64,
    pub c_edge: f64,
    pub eer: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearchResult {
    /// All evaluated cells, in evaluation order (ascending c_node, then
    /// ascending c_edge).
    pub cells: Vec<GridCell>,
    pub best: GridCell,
}

/// One line of `scores.csv`.
#[derive(Debug, Clone)]
pub struct ScoreRow {
    pub user_id: String,
    pub signature_id: String,
    pub label: String,
    pub d_ged: f64,
    pub d_neural: Option<f64>,
    pub score_ged: f64,
    pub score_neural: Option<f64>,
    pub score_mcs: Option<f64>,
}

pub fn write_det_csv(path: &Path, det: &DetCurve) -> std::io::Result<()> {
    let mut out = String::from("threshold,far,frr\n");
    for p in &det.points {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.far, p.frr));
    }
    std::fs::write(path, out)
}

pub fn write_scores_csv(path: &Path, rows: &[ScoreRow]) -> std::io::Result<()> {
    let mut out =
        String::from("user_id,signature_id,label,d_ged,d_neural,score_ged,score_neural,score_mcs\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.user_id,
            r.signature_id,
            r.label,
            r.d_ged,
            opt(r.d_neural),
            r.score_ged,
            opt(r.score_neural),
            opt(r.score_mcs)
        ));
    }
    std::fs::write(path, out)
}

pub fn write_grid_csv(path: &Path, result: &GridSearchResult) -> std::io::Result<()> {
    let mut out = String::from("c_node,c_edge,eer\n");
    for c in &result.cells {
        out.push_str(&format!("{},{},{}\n", c.c_node, c.c_edge, c.eer));
    }
    std::fs::write(path, out)
}

pub fn write_eer_json(
    path: &Path,
    result: &EvalResult,
    system: &str,
    protocol_name: &str,
) -> std::io::Result<()> {
    let json = serde_json::json!({
        "system": system,
        "protocol": protocol_name,
        "eer": result.eer,
        "threshold": result.threshold,
        "runs": result.per_run_eers.len(),
        "per_run_eers": result.per_run_eers,
        "counts": {
            "references": result.counts.references,
            "genuine_tests": result.counts.genuine_tests,
            "forgeries": result.counts.forgeries,
        },
    });
    std::fs::write(path, serde_json::to_string_pretty(&json).expect("valid json"))
}
