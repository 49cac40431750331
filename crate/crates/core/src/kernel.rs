//! Erosion kernel-size selection.
//!
//! Candidate sizes are the odd integers `3, 5, …, 2·n_k + 1`. For a map and a
//! reference mask, every candidate is applied, the resulting refined mask is
//! scored by IoU against the reference, and the best-scoring size (smallest
//! on ties) is the training target for a learned predictor, which is in turn
//! fitted with a Huber loss. The same exhaustive sweep doubles as the oracle
//! selector; a cheap area-based heuristic covers inference without a
//! reference.

use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::imgproc::{find_contours, BinaryMask};
use crate::{Error, Result};

/// Default candidate count (sizes 3..=31).
pub const DEFAULT_CANDIDATES: usize = 15;
/// Kernel returned for empty maps.
pub const EMPTY_MAP_KERNEL: usize = 3;
/// Huber threshold used for kernel-size regression.
pub const HUBER_DELTA: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelCandidates {
    values: Vec<usize>,
}

impl KernelCandidates {
    pub fn values(&self) -> &[usize] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn min(&self) -> usize {
        self.values[0]
    }

    pub fn max(&self) -> usize {
        *self.values.last().expect("non-empty by construction")
    }

    pub fn contains(&self, k: usize) -> bool {
        self.values.binary_search(&k).is_ok()
    }

    /// Nearest candidate to `v`, ties resolved upwards.
    pub fn nearest(&self, v: f64) -> usize {
        let mut best = self.values[0];
        for &k in &self.values {
            if (k as f64 - v).abs() <= (best as f64 - v).abs() {
                best = k;
            }
        }
        best
    }
}

impl Default for KernelCandidates {
    fn default() -> Self {
        candidate_set(DEFAULT_CANDIDATES).expect("default count is valid")
    }
}

/// The odd sizes `3, 5, …, 2·n_k + 1`.
pub fn candidate_set(n_k: usize) -> Result<KernelCandidates> {
    if n_k < 1 {
        return Err(Error::InvalidArgument("candidate count must be at least 1".into()));
    }
    if 2 * n_k + 1 > crate::imgproc::MAX_KERNEL_SIZE {
        return Err(Error::InvalidArgument(format!("candidate count {n_k} exceeds the largest supported kernel")));
    }
    Ok(KernelCandidates { values: (1..=n_k).map(|n| 2 * n + 1).collect() })
}

/// What the per-candidate IoU scores were measured against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreReference {
    GroundTruth,
    InputMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelScoreSet {
    pub scores: Vec<f64>,
    pub reference: ScoreReference,
}

/// IoU of two masks; two empty masks score 1.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &q) in a.data().iter().zip(b.data()) {
        inter += (p & q) as usize;
        union += (p | q) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Scores every candidate: `S[n] = IoU(refine_fn(map, K[n]), reference)`.
pub fn score_kernels(
    mut refine_fn: impl FnMut(&BinaryMask, usize) -> Result<BinaryMask>,
    map: &BinaryMask,
    reference: &BinaryMask,
    reference_kind: ScoreReference,
    candidates: &KernelCandidates,
) -> Result<KernelScoreSet> {
    let scores = candidates
        .values()
        .iter()
        .map(|&k| {
            let refined = refine_fn(map, k).map_err(|e| Error::Kernel { kernel: k, source: Box::new(e) })?;
            mask_iou(&refined, reference).map_err(|e| Error::Kernel { kernel: k, source: Box::new(e) })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(KernelScoreSet { scores, reference: reference_kind })
}

/// Candidate at the first maximal score.
pub fn training_target(scores: &KernelScoreSet, candidates: &KernelCandidates) -> Result<usize> {
    if scores.scores.is_empty() || scores.scores.len() != candidates.len() {
        return Err(Error::InvalidArgument(format!(
            "score set of length {} does not match {} candidates",
            scores.scores.len(),
            candidates.len()
        )));
    }
    let mut best = 0;
    for (i, &s) in scores.scores.iter().enumerate() {
        if s > scores.scores[best] {
            best = i;
        }
    }
    Ok(candidates.values()[best])
}

/// Huber loss between the target size and a prediction.
pub fn huber_loss(target: f64, predicted: f64, delta: f64) -> f64 {
    assert!(delta > 0.0, "huber delta must be positive");
    let r = (target - predicted).abs();
    if r <= delta {
        0.5 * r * r
    } else {
        delta * r - 0.5 * delta * delta
    }
}

/// Refines with a map eroded by the given kernel size.
pub type ProbeFn<'a> = dyn FnMut(&BinaryMask, usize) -> Result<BinaryMask> + 'a;

/// Inputs available to a selector for one map.
pub struct SelectionRequest<'a> {
    /// The map about to be eroded (before erosion).
    pub map: &'a BinaryMask,
    /// Refined mask produced when the map is eroded with a given size.
    pub probe: Option<&'a mut ProbeFn<'a>>,
    /// Mask the probe results are scored against.
    pub reference: Option<(&'a BinaryMask, ScoreReference)>,
}

impl<'a> SelectionRequest<'a> {
    pub fn new(map: &'a BinaryMask) -> Self {
        Self { map, probe: None, reference: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelChoice {
    pub kernel: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scores: Option<KernelScoreSet>,
}

impl KernelChoice {
    pub fn plain(kernel: usize) -> Self {
        Self { kernel, scores: None }
    }
}

pub trait KernelSelector: Send + Sync {
    fn mode(&self) -> KernelMode;

    /// Whether [`select`](Self::select) needs a probe and a reference.
    fn needs_probe(&self) -> bool {
        false
    }

    fn candidates(&self) -> &KernelCandidates;

    fn select(&self, request: SelectionRequest<'_>) -> Result<KernelChoice>;
}

/// Chooses the kernel for `request.map`, returning the minimum size for an
/// empty map and checking the selector's answer is a valid candidate.
pub fn auto_kernel_size(request: SelectionRequest<'_>, selector: &dyn KernelSelector) -> Result<KernelChoice> {
    if request.map.is_empty() {
        return Ok(KernelChoice::plain(EMPTY_MAP_KERNEL));
    }
    let choice = selector.select(request)?;
    let k = choice.kernel;
    let c = selector.candidates();
    if k % 2 == 0 || k < c.min() || k > c.max() {
        return Err(Error::backend(
            "kernel-selection",
            format!("selector returned kernel {k} outside {}..={}", c.min(), c.max()),
        ));
    }
    Ok(choice)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum KernelMode {
    Fixed(usize),
    Oracle,
    Heuristic,
    Learned(PathBuf),
}

impl fmt::Display for KernelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelMode::Fixed(k) => write!(f, "fixed:{k}"),
            KernelMode::Oracle => f.write_str("oracle"),
            KernelMode::Heuristic => f.write_str("heuristic"),
            KernelMode::Learned(p) => write!(f, "learned:{}", p.display()),
        }
    }
}

impl FromStr for KernelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some(("fixed", k)) => {
                k.parse().map(KernelMode::Fixed).map_err(|_| Error::Config(format!("bad fixed kernel size '{k}'")))
            }
            Some(("learned", p)) if !p.is_empty() => Ok(KernelMode::Learned(PathBuf::from(p))),
            None if s == "oracle" => Ok(KernelMode::Oracle),
            None if s == "heuristic" => Ok(KernelMode::Heuristic),
            _ => Err(Error::Config(format!(
                "unknown kernel mode '{s}' (expected fixed:K, oracle, heuristic or learned:PATH)"
            ))),
        }
    }
}

impl From<KernelMode> for String {
    fn from(m: KernelMode) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for KernelMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

pub struct FixedSelector {
    kernel: usize,
    candidates: KernelCandidates,
}

impl FixedSelector {
    pub fn new(kernel: usize, candidates: KernelCandidates) -> Result<Self> {
        if !candidates.contains(kernel) {
            return Err(Error::Config(format!(
                "fixed kernel {kernel} must be odd and within {}..={}",
                candidates.min(),
                candidates.max()
            )));
        }
        Ok(Self { kernel, candidates })
    }
}

impl KernelSelector for FixedSelector {
    fn mode(&self) -> KernelMode {
        KernelMode::Fixed(self.kernel)
    }

    fn candidates(&self) -> &KernelCandidates {
        &self.candidates
    }

    fn select(&self, _request: SelectionRequest<'_>) -> Result<KernelChoice> {
        Ok(KernelChoice::plain(self.kernel))
    }
}

/// Exhaustive sweep over the candidates against a reference mask.
#[derive(Default)]
pub struct OracleSelector {
    candidates: KernelCandidates,
}

impl OracleSelector {
    pub fn new(candidates: KernelCandidates) -> Self {
        Self { candidates }
    }
}

impl KernelSelector for OracleSelector {
    fn mode(&self) -> KernelMode {
        KernelMode::Oracle
    }

    fn needs_probe(&self) -> bool {
        true
    }

    fn candidates(&self) -> &KernelCandidates {
        &self.candidates
    }

    fn select(&self, request: SelectionRequest<'_>) -> Result<KernelChoice> {
        let (Some(probe), Some((reference, kind))) = (request.probe, request.reference) else {
            return Err(Error::Config("oracle kernel selection needs a probe and a reference mask".into()));
        };
        let scores = score_kernels(|m, k| probe(m, k), request.map, reference, kind, &self.candidates)?;
        let kernel = training_target(&scores, &self.candidates)?;
        Ok(KernelChoice { kernel, scores: Some(scores) })
    }
}

/// `k` = odd size nearest to `round(0.5·sqrt(mean region area))`, ties up,
/// clamped to the candidate range.
#[derive(Default)]
pub struct HeuristicSelector {
    candidates: KernelCandidates,
}

impl HeuristicSelector {
    pub fn new(candidates: KernelCandidates) -> Self {
        Self { candidates }
    }

    pub fn kernel_for(&self, map: &BinaryMask) -> usize {
        let regions = find_contours(map);
        if regions.is_empty() {
            return EMPTY_MAP_KERNEL;
        }
        let mean_area = regions.iter().map(|r| r.area()).sum::<usize>() as f64 / regions.len() as f64;
        let v = (0.5 * mean_area.sqrt()).round() as usize;
        let odd = if v.is_multiple_of(2) { v + 1 } else { v };
        odd.clamp(self.candidates.min(), self.candidates.max())
    }
}

impl KernelSelector for HeuristicSelector {
    fn mode(&self) -> KernelMode {
        KernelMode::Heuristic
    }

    fn candidates(&self) -> &KernelCandidates {
        &self.candidates
    }

    fn select(&self, request: SelectionRequest<'_>) -> Result<KernelChoice> {
        Ok(KernelChoice::plain(self.kernel_for(request.map)))
    }
}

/// One row of the offline training-target export.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingRow {
    pub fixture_id: String,
    pub target: usize,
    pub scores: Vec<f64>,
}

/// Writes rows as CSV: `fixture_id,target,s_3,…,s_{2n+1}`.
pub fn write_training_csv<W: Write>(writer: W, candidates: &KernelCandidates, rows: &[TrainingRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    let mut header = vec!["fixture_id".to_string(), "target".to_string()];
    header.extend(candidates.values().iter().map(|k| format!("s_{k}")));
    out.write_record(&header)?;
    for row in rows {
        if row.scores.len() != candidates.len() {
            return Err(Error::InvalidArgument(format!(
                "row '{}' has {} scores for {} candidates",
                row.fixture_id,
                row.scores.len(),
                candidates.len()
            )));
        }
        let mut record = vec![row.fixture_id.clone(), row.target.to_string()];
        record.extend(row.scores.iter().map(|s| format!("{s:.6}")));
        out.write_record(&record)?;
    }
    out.flush().map_err(|e| Error::Io { path: PathBuf::from("<csv>"), source: e })?;
    Ok(())
}
