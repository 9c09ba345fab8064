//! Detection and mitigation algorithms the trigger is evaluated against:
//! STRIP entropy probing, the spectral signature defense (SSD), activation
//! clustering (AC), plus the spatial-smoothing and input-transform sweeps
//! and confusion-matrix scoring of any detector against the ground truth.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ImageTensor, LabeledDataset};
use crate::imageops;
use crate::metrics::{self, balanced_accuracy, prediction_entropy};
use crate::nn::{evaluate, Mlp, Mode, NnError};
use crate::poison::PoisonPlan;

#[derive(Debug, Error)]
pub enum DefenseError {
    #[error("empty overlay pool")]
    EmptyPool,
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("degenerate covariance: all feature vectors are identical")]
    DegenerateCovariance,
    #[error("class {class} has {got} samples, fewer than {need} clusters")]
    FewerSamplesThanClusters { class: usize, got: usize, need: usize },
    #[error("flag vector length {flags} does not match dataset size {n}")]
    LengthMismatch { flags: usize, n: usize },
    #[error("ground truth has no {0} samples")]
    OneSidedGroundTruth(&'static str),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Image(#[from] crate::imageops::ImageOpError),
    #[error(transparent)]
    Metric(#[from] crate::metrics::MetricError),
}

// ---------------------------------------------------------------------------
// STRIP
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StripConfig {
    pub num_overlays: usize,
    pub blend_weight: f64,
}

impl Default for StripConfig {
    fn default() -> Self {
        StripConfig {
            num_overlays: 100,
            blend_weight: 0.5,
        }
    }
}

impl StripConfig {
    pub fn validate(&self) -> Result<(), DefenseError> {
        if self.num_overlays == 0 {
            return Err(DefenseError::BadConfig("num_overlays must be >= 1".into()));
        }
        if !(self.blend_weight > 0.0 && self.blend_weight < 1.0) {
            return Err(DefenseError::BadConfig(format!(
                "blend weight {} outside (0, 1)",
                self.blend_weight
            )));
        }
        Ok(())
    }
}

/// Superimposes `N` pool images onto the sample and returns the mean Shannon
/// entropy of the model's predictions over the blends. Low entropy on most
/// overlays is STRIP's signature of a trigger-dominated input.
pub fn strip_entropy(
    model: &Mlp,
    sample: &ImageTensor,
    pool: &LabeledDataset,
    config: &StripConfig,
    rng: &mut ChaCha20Rng,
) -> Result<f64, DefenseError> {
    config.validate()?;
    if pool.is_empty() {
        return Err(DefenseError::EmptyPool);
    }
    let mut blends = Vec::with_capacity(config.num_overlays);
    for _ in 0..config.num_overlays {
        let overlay = &pool.images[rng.gen_range(0..pool.len())];
        blends.push(imageops::blend(sample, overlay, config.blend_weight)?);
    }
    let probs = model.forward_images(&blends, Mode::Eval, None)?;
    let rows: Vec<Vec<f64>> = probs.rows().into_iter().map(|r| r.to_vec()).collect();
    Ok(prediction_entropy(&rows)?)
}

// ---------------------------------------------------------------------------
// Spectral signature defense
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SsdReport {
    /// Per-sample correlations with the top covariance eigenvector.
    pub scores: Vec<f64>,
    /// Samples with |score| above this quantile threshold are flagged.
    pub threshold: f64,
    pub flags: Vec<bool>,
    pub top_eigvec: Vec<f64>,
}

const POWER_ITER_TOL: f64 = 1e-8;
const POWER_ITER_MAX: usize = 1000;
const POWER_ITER_SEED: u64 = 0x5555_aaaa;

/// Top eigenvector of the symmetric matrix `c` by seeded power iteration.
/// Returns None when `c` is (numerically) zero.
fn power_iteration(c: &Array2<f64>, seed: u64) -> Option<Array1<f64>> {
    let d = c.nrows();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut v: Array1<f64> = Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0));
    let norm = v.dot(&v).sqrt();
    if norm == 0.0 {
        return None;
    }
    v /= norm;
    for _ in 0..POWER_ITER_MAX {
        let mut next = c.dot(&v);
        let norm = next.dot(&next).sqrt();
        if norm < 1e-14 {
            return None;
        }
        next /= norm;
        // fix the sign so convergence is measurable
        if next.dot(&v) < 0.0 {
            next = -next;
        }
        let delta = (&next - &v).mapv(|x| x * x).sum().sqrt();
        v = next;
        if delta <= POWER_ITER_TOL {
            break;
        }
    }
    Some(v)
}

/// Sample covariance (divisor n - 1) of row-vector features.
fn covariance(features: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let n = features.nrows() as f64;
    let mu = features.mean_axis(Axis(0)).expect("non-empty");
    let centered = features - &mu.view().insert_axis(Axis(0));
    let cov = centered.t().dot(&centered) / (n - 1.0).max(1.0);
    (cov, mu)
}

/// Centers the features, finds the top covariance eigenvector, scores each
/// sample by its correlation with it, and flags the samples whose |score|
/// exceeds the (1 - 1.5 epsilon) quantile.
pub fn ssd_detect(features: &Array2<f64>, epsilon: f64) -> Result<SsdReport, DefenseError> {
    let n = features.nrows();
    if n < 2 {
        return Err(DefenseError::TooFewSamples { need: 2, got: n });
    }
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(DefenseError::BadConfig(format!("epsilon {epsilon} outside (0, 0.5)")));
    }
    let (cov, mu) = covariance(features);
    if cov.iter().all(|&v| v.abs() < 1e-24) {
        return Err(DefenseError::DegenerateCovariance);
    }
    let v = power_iteration(&cov, POWER_ITER_SEED).ok_or(DefenseError::DegenerateCovariance)?;

    let centered = features - &mu.view().insert_axis(Axis(0));
    let scores: Vec<f64> = centered.rows().into_iter().map(|r| r.dot(&v)).collect();

    let mut abs_sorted: Vec<f64> = scores.iter().map(|s| s.abs()).collect();
    abs_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = 1.0 - 1.5 * epsilon;
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n) - 1;
    let threshold = abs_sorted[rank];
    let flags: Vec<bool> = scores.iter().map(|s| s.abs() > threshold).collect();
    Ok(SsdReport {
        scores,
        threshold,
        flags,
        top_eigvec: v.to_vec(),
    })
}

// ---------------------------------------------------------------------------
// Activation clustering
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AcAnalysis {
    /// The cluster with the fewest members is flagged as poisoned.
    Smaller,
    /// The smaller cluster is flagged only when its fraction is below the
    /// threshold.
    RelativeSize { threshold: f64 },
    /// A cluster is flagged when its median activation lies closer to
    /// another class's median than to its own class's median.
    Distance,
    /// The smaller cluster is flagged when the mean silhouette score of the
    /// two-way split exceeds the threshold.
    Silhouette { threshold: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AcConfig {
    pub pca_dims: usize,
    pub analysis: AcAnalysis,
    pub kmeans_restarts: usize,
    pub seed: u64,
}

impl Default for AcConfig {
    fn default() -> Self {
        AcConfig {
            pca_dims: 10,
            analysis: AcAnalysis::Smaller,
            kmeans_restarts: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AcClassDiagnostics {
    pub class: usize,
    pub cluster_sizes: [usize; 2],
    pub mean_silhouette: f64,
    /// The cluster (0 or 1) flagged as poisoned, if any.
    pub flagged_cluster: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct AcReport {
    /// Per-sample poisoned flags, aligned with the input features.
    pub flags: Vec<bool>,
    pub diagnostics: Vec<AcClassDiagnostics>,
}

/// Top `dims` principal directions via power iteration with deflation;
/// returns the projected features. Stops early if the residual covariance
/// vanishes (rank-deficient data).
fn pca_project(features: &Array2<f64>, dims: usize) -> Array2<f64> {
    let (mut cov, mu) = covariance(features);
    let centered = features - &mu.view().insert_axis(Axis(0));
    let dims = dims.min(features.ncols());
    let mut components: Vec<Array1<f64>> = Vec::with_capacity(dims);
    for k in 0..dims {
        match power_iteration(&cov, POWER_ITER_SEED ^ k as u64) {
            Some(v) => {
                let lambda = v.dot(&cov.dot(&v));
                // deflate: cov <- cov - lambda v v^T
                let outer = v
                    .view()
                    .insert_axis(Axis(1))
                    .dot(&v.view().insert_axis(Axis(0)));
                cov = cov - outer * lambda;
                components.push(v);
            }
            None => break,
        }
    }
    let mut out = Array2::zeros((features.nrows(), components.len().max(1)));
    for (j, v) in components.iter().enumerate() {
        for (i, row) in centered.rows().into_iter().enumerate() {
            out[[i, j]] = row.dot(v);
        }
    }
    out
}

struct KmeansResult {
    assignment: Vec<usize>,
    inertia: f64,
}

fn kmeans_two(points: &Array2<f64>, restarts: usize, rng: &mut ChaCha20Rng) -> KmeansResult {
    let n = points.nrows();
    let mut best: Option<KmeansResult> = None;
    for _ in 0..restarts.max(1) {
        // k-means++ seeding for k = 2
        let first = rng.gen_range(0..n);
        let d2: Vec<f64> = (0..n)
            .map(|i| {
                let diff = &points.row(i) - &points.row(first);
                diff.dot(&diff)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let second = if total <= 0.0 {
            (first + 1) % n
        } else {
            let mut pick = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if pick < w {
                    chosen = i;
                    break;
                }
                pick -= w;
            }
            chosen
        };
        let mut centers = [points.row(first).to_owned(), points.row(second).to_owned()];

        let mut assignment = vec![0usize; n];
        let mut inertia = f64::INFINITY;
        for _ in 0..100 {
            let mut new_inertia = 0.0;
            for i in 0..n {
                let mut best_c = 0;
                let mut best_d = f64::INFINITY;
                for (c, center) in centers.iter().enumerate() {
                    let diff = &points.row(i) - center;
                    let d = diff.dot(&diff);
                    if d < best_d {
                        best_d = d;
                        best_c = c;
                    }
                }
                assignment[i] = best_c;
                new_inertia += best_d;
            }
            // recompute centers; keep an empty cluster's center in place
            for c in 0..2 {
                let members: Vec<usize> = (0..n).filter(|&i| assignment[i] == c).collect();
                if !members.is_empty() {
                    let mut mean = Array1::zeros(points.ncols());
                    for &i in &members {
                        mean = mean + points.row(i);
                    }
                    centers[c] = mean / members.len() as f64;
                }
            }
            let rel = if inertia.is_finite() && inertia > 0.0 {
                (inertia - new_inertia).abs() / inertia
            } else if inertia == 0.0 {
                0.0
            } else {
                1.0
            };
            inertia = new_inertia;
            if rel <= 1e-6 {
                break;
            }
        }
        if best.as_ref().map_or(true, |b| inertia < b.inertia) {
            best = Some(KmeansResult { assignment, inertia });
        }
    }
    best.expect("at least one restart")
}

fn euclidean(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let diff = a - b;
    diff.dot(&diff).sqrt()
}

/// Mean silhouette score of a two-way split (singleton clusters score 0).
fn mean_silhouette(points: &Array2<f64>, assignment: &[usize]) -> f64 {
    let n = points.nrows();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        let own: Vec<usize> = (0..n).filter(|&j| j != i && assignment[j] == assignment[i]).collect();
        let other: Vec<usize> = (0..n).filter(|&j| assignment[j] != assignment[i]).collect();
        if own.is_empty() || other.is_empty() {
            continue; // silhouette defined as 0 for singletons
        }
        let pi = points.row(i).to_owned();
        let a: f64 = own
            .iter()
            .map(|&j| euclidean(&pi, &points.row(j).to_owned()))
            .sum::<f64>()
            / own.len() as f64;
        let b: f64 = other
            .iter()
            .map(|&j| euclidean(&pi, &points.row(j).to_owned()))
            .sum::<f64>()
            / other.len() as f64;
        total += (b - a) / a.max(b);
    }
    total / n as f64
}

/// Component-wise median of the selected feature rows.
fn median_vector(features: &Array2<f64>, rows: &[usize]) -> Array1<f64> {
    let d = features.ncols();
    let mut out = Array1::zeros(d);
    let mut col: Vec<f64> = Vec::with_capacity(rows.len());
    for j in 0..d {
        col.clear();
        col.extend(rows.iter().map(|&i| features[[i, j]]));
        col.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let m = col.len();
        out[j] = if m % 2 == 1 {
            col[m / 2]
        } else {
            (col[m / 2 - 1] + col[m / 2]) / 2.0
        };
    }
    out
}

/// Per class: PCA reduction, two-way k-means, then the configured analysis
/// decides which cluster (if any) is flagged as poisoned.
pub fn ac_detect(
    features: &Array2<f64>,
    labels: &[usize],
    num_classes: usize,
    config: &AcConfig,
) -> Result<AcReport, DefenseError> {
    if features.nrows() != labels.len() {
        return Err(DefenseError::LengthMismatch {
            flags: labels.len(),
            n: features.nrows(),
        });
    }
    if config.pca_dims < 2 {
        return Err(DefenseError::BadConfig(format!("pca_dims {} < 2", config.pca_dims)));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for (class, members) in by_class.iter().enumerate() {
        if !members.is_empty() && members.len() < 2 {
            return Err(DefenseError::FewerSamplesThanClusters {
                class,
                got: members.len(),
                need: 2,
            });
        }
    }

    // class medians in the full feature space, for the distance analysis
    let class_medians: Vec<Option<Array1<f64>>> = by_class
        .iter()
        .map(|members| (!members.is_empty()).then(|| median_vector(features, members)))
        .collect();

    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut flags = vec![false; labels.len()];
    let mut diagnostics = Vec::new();

    for (class, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let mut class_feats = Array2::zeros((members.len(), features.ncols()));
        for (r, &i) in members.iter().enumerate() {
            class_feats.row_mut(r).assign(&features.row(i));
        }
        let projected = pca_project(&class_feats, config.pca_dims);
        let km = kmeans_two(&projected, config.kmeans_restarts, &mut rng);
        let sizes = [
            km.assignment.iter().filter(|&&a| a == 0).count(),
            km.assignment.iter().filter(|&&a| a == 1).count(),
        ];
        let smaller = if sizes[1] < sizes[0] { 1 } else { 0 };
        let sil = mean_silhouette(&projected, &km.assignment);

        let flagged_cluster: Option<usize> = match config.analysis {
            AcAnalysis::Smaller => Some(smaller),
            AcAnalysis::RelativeSize { threshold } => {
                let frac = sizes[smaller] as f64 / members.len() as f64;
                (frac < threshold).then_some(smaller)
            }
            AcAnalysis::Silhouette { threshold } => (sil > threshold).then_some(smaller),
            AcAnalysis::Distance => {
                // flag every cluster whose median sits closer to a foreign
                // class median than to its own; record the smaller one in
                // the diagnostics when both qualify
                let mut flagged = None;
                for c in 0..2 {
                    let rows: Vec<usize> = members
                        .iter()
                        .enumerate()
                        .filter(|(r, _)| km.assignment[*r] == c)
                        .map(|(_, &i)| i)
                        .collect();
                    if rows.is_empty() {
                        continue;
                    }
                    let cm = median_vector(features, &rows);
                    let own = class_medians[class].as_ref().expect("class non-empty");
                    let d_own = euclidean(&cm, own);
                    let d_other = class_medians
                        .iter()
                        .enumerate()
                        .filter(|(k, m)| *k != class && m.is_some())
                        .map(|(_, m)| euclidean(&cm, m.as_ref().unwrap()))
                        .fold(f64::INFINITY, f64::min);
                    if d_other < d_own {
                        for (r, &i) in members.iter().enumerate() {
                            if km.assignment[r] == c {
                                flags[i] = true;
                            }
                        }
                        if flagged.is_none() || c == smaller {
                            flagged = Some(c);
                        }
                    }
                }
                flagged
            }
        };
        if !matches!(config.analysis, AcAnalysis::Distance) {
            if let Some(fc) = flagged_cluster {
                for (r, &i) in members.iter().enumerate() {
                    if km.assignment[r] == fc {
                        flags[i] = true;
                    }
                }
            }
        }
        diagnostics.push(AcClassDiagnostics {
            class,
            cluster_sizes: sizes,
            mean_silhouette: sil,
            flagged_cluster,
        });
    }
    Ok(AcReport { flags, diagnostics })
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub functionality: f64,
    pub asr: f64,
}

fn eval_pair(
    model: &Mlp,
    clean: &LabeledDataset,
    poisoned: &LabeledDataset,
    target_class: usize,
) -> Result<(f64, f64), DefenseError> {
    let (functionality, _) = evaluate(model, clean)?;
    let (_, preds) = evaluate(model, poisoned)?;
    let asr = metrics::attack_success_rate(&preds, target_class)?;
    Ok((functionality, asr))
}

fn map_dataset(
    ds: &LabeledDataset,
    mut f: impl FnMut(&ImageTensor) -> Result<ImageTensor, DefenseError>,
) -> Result<LabeledDataset, DefenseError> {
    let images = ds.images.iter().map(&mut f).collect::<Result<Vec<_>, _>>()?;
    Ok(LabeledDataset {
        images,
        labels: ds.labels.clone(),
        num_classes: ds.num_classes,
    })
}

/// Median-smooths both test sets at each window size and reports
/// (functionality, attack success rate) per window.
pub fn smoothing_sweep(
    model: &Mlp,
    clean_test: &LabeledDataset,
    poisoned_test: &LabeledDataset,
    target_class: usize,
    windows: &[usize],
) -> Result<Vec<SweepRow>, DefenseError> {
    let mut rows = Vec::with_capacity(windows.len());
    for &w in windows {
        let clean = map_dataset(clean_test, |img| Ok(imageops::median_smooth(img, w)?))?;
        let poisoned = map_dataset(poisoned_test, |img| Ok(imageops::median_smooth(img, w)?))?;
        let (functionality, asr) = eval_pair(model, &clean, &poisoned, target_class)?;
        rows.push(SweepRow {
            label: format!("window={w}"),
            functionality,
            asr,
        });
    }
    Ok(rows)
}

/// Evaluates both test sets under {none, random pad-2 crop, random rotation
/// within ±5°, horizontal flip}, each transform seeded.
pub fn transform_sweep(
    model: &Mlp,
    clean_test: &LabeledDataset,
    poisoned_test: &LabeledDataset,
    target_class: usize,
    seed: u64,
) -> Result<Vec<SweepRow>, DefenseError> {
    let mut rows = Vec::with_capacity(4);

    let (f0, a0) = eval_pair(model, clean_test, poisoned_test, target_class)?;
    rows.push(SweepRow {
        label: "none".into(),
        functionality: f0,
        asr: a0,
    });

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let clean = map_dataset(clean_test, |img| Ok(imageops::random_crop(img, 2, &mut rng)))?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let poisoned = map_dataset(poisoned_test, |img| Ok(imageops::random_crop(img, 2, &mut rng)))?;
    let (f, a) = eval_pair(model, &clean, &poisoned, target_class)?;
    rows.push(SweepRow {
        label: "crop".into(),
        functionality: f,
        asr: a,
    });

    let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_add(1));
    let clean = map_dataset(clean_test, |img| {
        Ok(imageops::rotate(img, rng.gen_range(-5.0..=5.0)))
    })?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_add(1));
    let poisoned = map_dataset(poisoned_test, |img| {
        Ok(imageops::rotate(img, rng.gen_range(-5.0..=5.0)))
    })?;
    let (f, a) = eval_pair(model, &clean, &poisoned, target_class)?;
    rows.push(SweepRow {
        label: "rotate".into(),
        functionality: f,
        asr: a,
    });

    let clean = map_dataset(clean_test, |img| Ok(imageops::horizontal_flip(img)))?;
    let poisoned = map_dataset(poisoned_test, |img| Ok(imageops::horizontal_flip(img)))?;
    let (f, a) = eval_pair(model, &clean, &poisoned, target_class)?;
    rows.push(SweepRow {
        label: "hflip".into(),
        functionality: f,
        asr: a,
    });

    Ok(rows)
}

// ---------------------------------------------------------------------------
// Detector scoring
// ---------------------------------------------------------------------------

/// Confusion-matrix rates of per-sample poisoned flags against the ground
/// truth plan: (true positive rate, true negative rate, balanced accuracy).
pub fn detector_baccuracy(flags: &[bool], plan: &PoisonPlan) -> Result<(f64, f64, f64), DefenseError> {
    let n = flags.len();
    if let Some(&max) = plan.poisoned_indices.last() {
        if max >= n {
            return Err(DefenseError::LengthMismatch { flags: n, n: max + 1 });
        }
    }
    let mut tp = 0usize;
    let mut fn_ = 0usize;
    let mut tn = 0usize;
    let mut fp = 0usize;
    for (i, &flag) in flags.iter().enumerate() {
        match (plan.contains(i), flag) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
        }
    }
    if tp + fn_ == 0 {
        return Err(DefenseError::OneSidedGroundTruth("poisoned"));
    }
    if tn + fp == 0 {
        return Err(DefenseError::OneSidedGroundTruth("clean"));
    }
    let tpr = tp as f64 / (tp + fn_) as f64;
    let tnr = tn as f64 / (tn + fp) as f64;
    let bacc = balanced_accuracy(tpr, tnr)?;
    Ok((tpr, tnr, bacc))
}

/// Best balanced accuracy any single threshold on a scalar score achieves at
/// separating the two populations, trying both flag directions. Used to
/// grade STRIP's entropy statistic without committing to a threshold.
pub fn best_threshold_bacc(clean_scores: &[f64], poisoned_scores: &[f64]) -> Result<f64, DefenseError> {
    if clean_scores.is_empty() || poisoned_scores.is_empty() {
        return Err(DefenseError::TooFewSamples {
            need: 1,
            got: clean_scores.len().min(poisoned_scores.len()),
        });
    }
    let mut candidates: Vec<f64> = clean_scores.iter().chain(poisoned_scores).cloned().collect();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();
    let nc = clean_scores.len() as f64;
    let np = poisoned_scores.len() as f64;
    let mut best = 0.5f64;
    for &t in &candidates {
        // direction A: "poisoned" means score <= t
        let tpr = poisoned_scores.iter().filter(|&&s| s <= t).count() as f64 / np;
        let tnr = clean_scores.iter().filter(|&&s| s > t).count() as f64 / nc;
        best = best.max((tpr + tnr) / 2.0);
        // direction B: "poisoned" means score > t
        best = best.max(((1.0 - tpr) + (1.0 - tnr)) / 2.0);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::synthetic_digits;
    use crate::nn::{build_mlp, Layer};
    use crate::poison::make_plan;

    fn uniform_model(input_dim: usize, classes: usize) -> Mlp {
        let mut m = build_mlp(input_dim, (4, 4), classes, 0.2, 0.0, 0).unwrap();
        for layer in &mut m.layers {
            if let Layer::Dense { weights, biases } = layer {
                weights.fill(0.0);
                biases.fill(0.0);
            }
        }
        m
    }

    #[test]
    fn strip_uniform_model_gives_log2_k() {
        let ds = synthetic_digits(20, 1);
        let model = uniform_model(784, 10);
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let cfg = StripConfig { num_overlays: 16, blend_weight: 0.5 };
        let h = strip_entropy(&model, &ds.images[0], &ds, &cfg, &mut rng).unwrap();
        assert!((h - 10f64.log2()).abs() < 1e-9);
    }

    #[test]
    fn strip_one_hot_model_gives_zero() {
        let ds = synthetic_digits(20, 1);
        let mut model = uniform_model(784, 10);
        // a huge fixed logit on class 3 makes every output one-hot
        if let Layer::Dense { biases, .. } = &mut model.layers[6] {
            biases[3] = 800.0;
        }
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let cfg = StripConfig { num_overlays: 16, blend_weight: 0.5 };
        let h = strip_entropy(&model, &ds.images[0], &ds, &cfg, &mut rng).unwrap();
        assert_eq!(h, 0.0);
    }

    #[test]
    fn strip_is_deterministic_and_validates() {
        let ds = synthetic_digits(10, 3);
        let model = uniform_model(784, 10);
        let cfg = StripConfig { num_overlays: 8, blend_weight: 0.5 };
        let a = strip_entropy(&model, &ds.images[1], &ds, &cfg, &mut ChaCha20Rng::seed_from_u64(5)).unwrap();
        let b = strip_entropy(&model, &ds.images[1], &ds, &cfg, &mut ChaCha20Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);

        let empty = LabeledDataset::new(vec![], vec![], 10).unwrap();
        assert!(matches!(
            strip_entropy(&model, &ds.images[0], &empty, &cfg, &mut ChaCha20Rng::seed_from_u64(0)),
            Err(DefenseError::EmptyPool)
        ));
        let bad = StripConfig { num_overlays: 0, blend_weight: 0.5 };
        assert!(strip_entropy(&model, &ds.images[0], &ds, &bad, &mut ChaCha20Rng::seed_from_u64(0)).is_err());
    }

    /// 90/10 antipodal clusters along e1: SSD must flag the minority.
    #[test]
    fn ssd_flags_minority_cluster() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let n = 500;
        let d = 8;
        let mut feats = Array2::zeros((n, d));
        for i in 0..n {
            let center = if i < 450 { -1.0 } else { 9.0 };
            feats[[i, 0]] = center + rng.gen_range(-0.1..0.1);
            for j in 1..d {
                feats[[i, j]] = rng.gen_range(-0.1..0.1);
            }
        }
        let report = ssd_detect(&feats, 0.1).unwrap();
        let minority_flagged = (450..n).filter(|&i| report.flags[i]).count();
        assert!(minority_flagged >= 45, "only {minority_flagged}/50 flagged");
    }

    #[test]
    fn ssd_eigvec_is_unit_and_satisfies_eigen_equation() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let feats = Array2::from_shape_fn((200, 6), |(_, j)| rng.gen_range(-1.0..1.0) * (j + 1) as f64);
        let report = ssd_detect(&feats, 0.1).unwrap();
        let v = Array1::from_vec(report.top_eigvec.clone());
        assert!((v.dot(&v).sqrt() - 1.0).abs() < 1e-8);
        let (cov, _) = covariance(&feats);
        let cv = cov.dot(&v);
        let lambda = v.dot(&cv);
        let resid = (&cv - &(&v * lambda)).mapv(|x| x * x).sum().sqrt();
        assert!(resid <= 1e-6 * lambda, "residual {resid}, lambda {lambda}");
    }

    #[test]
    fn ssd_scores_invariant_to_translation() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let feats = Array2::from_shape_fn((100, 5), |_| rng.gen_range(-2.0..2.0));
        let shifted = &feats + 42.0;
        let a = ssd_detect(&feats, 0.2).unwrap();
        let b = ssd_detect(&shifted, 0.2).unwrap();
        for (x, y) in a.scores.iter().zip(&b.scores) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    /// Isotropic blob: ~1.5 epsilon of samples flagged, bACC ~ 0.5 against a
    /// random ground truth.
    #[test]
    fn ssd_isotropic_null() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let n = 2000;
        let feats = Array2::from_shape_fn((n, 10), |_| {
            // sum of uniforms as a cheap approximate gaussian
            (0..12).map(|_| rng.gen::<f64>()).sum::<f64>() - 6.0
        });
        let eps = 0.1;
        let report = ssd_detect(&feats, eps).unwrap();
        let frac = report.flags.iter().filter(|&&f| f).count() as f64 / n as f64;
        assert!((frac - 1.5 * eps).abs() < 0.02, "flagged fraction {frac}");

        let plan = make_plan(n, 0.05, 0, 99).unwrap();
        let (_, _, bacc) = detector_baccuracy(&report.flags, &plan).unwrap();
        assert!((bacc - 0.5).abs() < 0.05, "null bacc {bacc}");
    }

    #[test]
    fn ssd_rejects_degenerate_and_bad_epsilon() {
        let feats = Array2::from_elem((10, 4), 3.25);
        assert!(matches!(ssd_detect(&feats, 0.1), Err(DefenseError::DegenerateCovariance)));
        let ok = Array2::from_shape_fn((10, 4), |(i, j)| (i * 4 + j) as f64);
        assert!(ssd_detect(&ok, 0.0).is_err());
        assert!(ssd_detect(&ok, 0.5).is_err());
        let one = Array2::zeros((1, 4));
        assert!(matches!(ssd_detect(&one, 0.1), Err(DefenseError::TooFewSamples { .. })));
    }

    fn two_cluster_features(n_big: usize, n_small: usize, gap: f64, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let n = n_big + n_small;
        let mut feats = Array2::zeros((n, 6));
        for i in 0..n {
            let center = if i < n_big { 0.0 } else { gap };
            feats[[i, 0]] = center + rng.gen_range(-0.2..0.2);
            for j in 1..6 {
                feats[[i, j]] = rng.gen_range(-0.2..0.2);
            }
        }
        (feats, vec![0; n])
    }

    #[test]
    fn ac_smaller_flags_minority_exactly() {
        let (feats, labels) = two_cluster_features(80, 20, 10.0, 21);
        let cfg = AcConfig { analysis: AcAnalysis::Smaller, ..Default::default() };
        let report = ac_detect(&feats, &labels, 1, &cfg).unwrap();
        for i in 0..80 {
            assert!(!report.flags[i], "majority sample {i} flagged");
        }
        for i in 80..100 {
            assert!(report.flags[i], "minority sample {i} missed");
        }
        let flagged = report.flags.iter().filter(|&&f| f).count();
        assert!(flagged <= 50, "smaller analysis must flag at most half");
    }

    #[test]
    fn ac_relative_size_spares_even_split() {
        // one tight blob: k-means splits it roughly in half, and a ~50%
        // fraction is above the 0.35 threshold, so nothing is flagged
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let feats = Array2::from_shape_fn((100, 4), |_| rng.gen_range(-1.0..1.0));
        let labels = vec![0usize; 100];
        let cfg = AcConfig {
            analysis: AcAnalysis::RelativeSize { threshold: 0.35 },
            ..Default::default()
        };
        let report = ac_detect(&feats, &labels, 1, &cfg).unwrap();
        let diag = &report.diagnostics[0];
        let smaller_frac = diag.cluster_sizes.iter().cloned().min().unwrap() as f64 / 100.0;
        assert!(smaller_frac >= 0.35, "blob split unexpectedly uneven: {smaller_frac}");
        assert!(report.flags.iter().all(|&f| !f));
    }

    #[test]
    fn ac_relative_size_flags_uneven_split() {
        let (feats, labels) = two_cluster_features(80, 20, 10.0, 22);
        let cfg = AcConfig {
            analysis: AcAnalysis::RelativeSize { threshold: 0.35 },
            ..Default::default()
        };
        let report = ac_detect(&feats, &labels, 1, &cfg).unwrap();
        assert_eq!(report.flags.iter().filter(|&&f| f).count(), 20);
    }

    #[test]
    fn silhouette_four_point_arithmetic() {
        // 1-D points 0, 1 vs 10, 11: a = 1, b = 10.5 for the outer points
        // and 9.5 for the inner, giving mean s = ((10.5-1)/10.5 + (9.5-1)/9.5)
        // averaged over symmetric pairs
        let pts = Array2::from_shape_vec((4, 1), vec![0.0, 1.0, 10.0, 11.0]).unwrap();
        let assignment = vec![0, 0, 1, 1];
        let s = mean_silhouette(&pts, &assignment);
        let outer = (10.5 - 1.0) / 10.5;
        let inner = (9.5 - 1.0) / 9.5;
        let expected = (outer + inner) / 2.0;
        assert!((s - expected).abs() < 1e-12, "{s} vs {expected}");
        assert!(s > 0.10);
    }

    #[test]
    fn ac_silhouette_flags_separated_clusters() {
        let (feats, labels) = two_cluster_features(80, 20, 10.0, 23);
        let cfg = AcConfig {
            analysis: AcAnalysis::Silhouette { threshold: 0.10 },
            ..Default::default()
        };
        let report = ac_detect(&feats, &labels, 1, &cfg).unwrap();
        assert!(report.diagnostics[0].mean_silhouette > 0.10);
        assert_eq!(report.flags.iter().filter(|&&f| f).count(), 20);
    }

    #[test]
    fn ac_distance_flags_cluster_near_foreign_median() {
        // class 0: 40 points near 0 plus 10 points near 5; class 1: 30 points
        // near 5. The stray class-0 cluster sits on class 1's median.
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..40 {
            rows.push([rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)]);
            labels.push(0usize);
        }
        for _ in 0..10 {
            rows.push([5.0 + rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)]);
            labels.push(0);
        }
        for _ in 0..30 {
            rows.push([5.0 + rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)]);
            labels.push(1);
        }
        let feats = Array2::from_shape_fn((rows.len(), 2), |(i, j)| rows[i][j]);
        let cfg = AcConfig { analysis: AcAnalysis::Distance, ..Default::default() };
        let report = ac_detect(&feats, &labels, 2, &cfg).unwrap();
        for i in 40..50 {
            assert!(report.flags[i], "stray sample {i} not flagged");
        }
        for i in 0..40 {
            assert!(!report.flags[i], "core class-0 sample {i} flagged");
        }
    }

    #[test]
    fn ac_rejects_undersized_class_and_bad_config() {
        let feats = Array2::zeros((3, 4));
        let labels = vec![0, 0, 1];
        let cfg = AcConfig::default();
        assert!(matches!(
            ac_detect(&feats, &labels, 2, &cfg),
            Err(DefenseError::FewerSamplesThanClusters { class: 1, .. })
        ));
        let bad = AcConfig { pca_dims: 1, ..Default::default() };
        assert!(ac_detect(&feats, &vec![0, 0, 0], 1, &bad).is_err());
    }

    #[test]
    fn detector_baccuracy_trivial_cases() {
        let plan = make_plan(100, 0.05, 0, 7).unwrap();
        let perfect: Vec<bool> = (0..100).map(|i| plan.contains(i)).collect();
        assert_eq!(detector_baccuracy(&perfect, &plan).unwrap(), (1.0, 1.0, 1.0));

        let all_clean = vec![false; 100];
        assert_eq!(detector_baccuracy(&all_clean, &plan).unwrap(), (0.0, 1.0, 0.5));

        let all_poisoned = vec![true; 100];
        assert_eq!(detector_baccuracy(&all_poisoned, &plan).unwrap(), (1.0, 0.0, 0.5));

        let empty_plan = make_plan(100, 0.0, 0, 7).unwrap();
        assert!(detector_baccuracy(&all_clean, &empty_plan).is_err());
    }

    #[test]
    fn detector_baccuracy_null_is_half() {
        let mut rng = ChaCha20Rng::seed_from_u64(44);
        let plan = make_plan(5000, 0.05, 0, 9).unwrap();
        let flags: Vec<bool> = (0..5000).map(|_| rng.gen_bool(0.3)).collect();
        let (_, _, bacc) = detector_baccuracy(&flags, &plan).unwrap();
        assert!((bacc - 0.5).abs() < 0.03, "null bacc {bacc}");
    }

    #[test]
    fn best_threshold_bacc_separable_and_identical() {
        let clean = vec![1.0, 1.1, 1.2];
        let poisoned = vec![0.1, 0.2, 0.3];
        assert_eq!(best_threshold_bacc(&clean, &poisoned).unwrap(), 1.0);
        // identical distributions cannot beat chance
        let same = vec![0.5, 0.5, 0.5];
        let b = best_threshold_bacc(&same, &same).unwrap();
        assert!((b - 0.5).abs() < 1e-12);
        assert!(best_threshold_bacc(&[], &same).is_err());
    }

    #[test]
    fn best_threshold_bacc_handles_reversed_direction() {
        // poisoned scores HIGHER than clean: direction B must find it
        let clean = vec![0.1, 0.2, 0.3];
        let poisoned = vec![1.0, 1.1, 1.2];
        assert_eq!(best_threshold_bacc(&clean, &poisoned).unwrap(), 1.0);
    }

    #[test]
    fn smoothing_window_one_equals_no_defense() {
        let ds = synthetic_digits(30, 2);
        let norm = crate::data::compute_norm_stats(&ds).unwrap();
        let model = build_mlp(784, (16, 8), 10, 0.2, 0.0, 3).unwrap();
        let cfg = crate::nn::TrainConfig {
            learning_rate: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 10,
            batch_size: 16,
            seed: 5,
            normalization: norm,
            augment: None,
        };
        let trained = crate::nn::train(&model, &ds, &cfg).unwrap().0;
        let rows = smoothing_sweep(&trained, &ds, &ds, 0, &[1, 2]).unwrap();
        let (f0, a0) = eval_pair(&trained, &ds, &ds, 0).unwrap();
        assert_eq!(rows[0].functionality, f0);
        assert_eq!(rows[0].asr, a0);
        assert_eq!(rows.len(), 2);
    }

    #[test]
    fn transform_sweep_has_four_seeded_rows() {
        let ds = synthetic_digits(20, 4);
        let model = uniform_model(784, 10);
        let a = transform_sweep(&model, &ds, &ds, 0, 9).unwrap();
        let b = transform_sweep(&model, &ds, &ds, 0, 9).unwrap();
        assert_eq!(a.len(), 4);
        let labels: Vec<&str> = a.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, vec!["none", "crop", "rotate", "hflip"]);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.functionality, y.functionality);
            assert_eq!(x.asr, y.asr);
        }
    }
}
