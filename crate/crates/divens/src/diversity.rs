//! Ensemble diversity, the adaptive diversity regularizer, and the
//! prediction-space analysis mode.
//!
//! The regularizer has two parts. The *entropy* term rewards an uncertain
//! ensemble mean; the *diversity* term rewards members whose non-maximal
//! predictions — each member's probability vector with the true-class entry
//! removed, L2-normalized — span a large volume. Diversity is the
//! determinant of the Gram matrix of those normalized vectors: 1 when they
//! are mutually orthogonal, 0 when any two are parallel.
//!
//! Alongside the training objective this module houses an analysis mode
//! that optimizes the objective directly over the probability vectors (no
//! network), which is how the crate verifies the closed-form structure of
//! the optima: entropy alone equalizes member confidences at a value
//! solving a scalar stationarity equation; diversity alone collapses
//! members to one-hots; together they select confidence-matched members
//! with orthogonal, partition-structured support.

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{Ensemble, MemberVars};
use crate::rng;
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

/// Default ridge added to the Gram matrix before the determinant, keeping
/// `ln ED` finite when member predictions become parallel.
pub const DET_OFFSET: f64 = 1e-12;

/// Columns with L2 norm below this are treated as all-zero and replaced by
/// the uniform direction.
pub const ZERO_COLUMN_NORM: f64 = 1e-12;

/// Simplex membership tolerance for prediction vectors.
const SIMPLEX_TOL: f64 = 1e-9;

/// Floor used when taking logs of probabilities host-side.
const LN_FLOOR: f64 = 1e-300;

fn default_det_offset() -> f64 {
    DET_OFFSET
}

/// The two regularizer coefficients plus the determinant ridge.
///
/// Deserialized values are not revalidated automatically; callers that
/// accept external JSON run [`AdpConfig::validated`] first.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdpConfig {
    /// Weight on the entropy of the ensemble mean.
    pub alpha: f64,
    /// Weight on the log-determinant diversity term.
    pub beta: f64,
    /// Ridge added to the Gram matrix; must lie in `(0, 1e-6]`.
    #[serde(default = "default_det_offset")]
    pub det_offset: f64,
}

impl AdpConfig {
    /// Coefficients with the default determinant ridge.
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        AdpConfig {
            alpha,
            beta,
            det_offset: DET_OFFSET,
        }
        .validated()
    }

    /// Plain ensemble cross-entropy training: both coefficients zero.
    pub fn baseline() -> Self {
        AdpConfig {
            alpha: 0.0,
            beta: 0.0,
            det_offset: DET_OFFSET,
        }
    }

    /// Replaces the determinant ridge.
    pub fn with_det_offset(mut self, det_offset: f64) -> Result<Self> {
        self.det_offset = det_offset;
        self.validated()
    }

    /// Checks the coefficient and ridge ranges, returning `self` on success.
    pub fn validated(self) -> Result<Self> {
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "regularizer coefficients must be >= 0, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        if !(self.det_offset > 0.0 && self.det_offset <= 1e-6) {
            return Err(Error::InvalidArgument(format!(
                "det_offset must lie in (0, 1e-6], got {}",
                self.det_offset
            )));
        }
        Ok(self)
    }
}

/// K probability vectors over L classes plus the index they share as the
/// "correct" class.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    preds: Vec<Vec<f64>>,
    y: usize,
}

impl PredictionSet {
    /// Validates that every vector lives on the simplex (entries in
    /// `[0, 1]`, sum within 1e-9 of 1) and that `y` indexes a class.
    pub fn new(preds: Vec<Vec<f64>>, y: usize) -> Result<Self> {
        if preds.is_empty() {
            return Err(Error::Empty("prediction set"));
        }
        let l = preds[0].len();
        if y >= l {
            return Err(Error::LabelOutOfRange { label: y, classes: l });
        }
        for (k, p) in preds.iter().enumerate() {
            if p.len() != l {
                return Err(Error::ShapeMismatch {
                    op: "prediction_set",
                    details: format!("member {k} has {} classes, member 0 has {l}", p.len()),
                });
            }
            let mut sum = 0.0;
            for &v in p {
                if !(0.0..=1.0 + SIMPLEX_TOL).contains(&v) {
                    return Err(Error::Numeric(format!(
                        "member {k} has probability {v} outside [0, 1]"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::Numeric(format!(
                    "member {k} probabilities sum to {sum}, not 1"
                )));
            }
        }
        Ok(PredictionSet { preds, y })
    }

    /// Member probability vectors, in order.
    pub fn members(&self) -> &[Vec<f64>] {
        &self.preds
    }

    /// The shared correct-class index.
    pub fn label(&self) -> usize {
        self.y
    }

    /// Number of members.
    pub fn k(&self) -> usize {
        self.preds.len()
    }

    /// Number of classes.
    pub fn classes(&self) -> usize {
        self.preds[0].len()
    }

    /// Unweighted mean of the member vectors.
    pub fn ensemble_mean(&self) -> Vec<f64> {
        let l = self.classes();
        let mut mean = vec![0.0; l];
        for p in &self.preds {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v;
            }
        }
        let inv = 1.0 / self.k() as f64;
        for m in &mut mean {
            *m *= inv;
        }
        mean
    }
}

/// The `(L-1) x K` matrix of L2-normalized non-maximal predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct NonMaxMatrix {
    m: Tensor,
    y: usize,
}

impl NonMaxMatrix {
    /// The matrix itself; column `k` belongs to member `k`.
    pub fn matrix(&self) -> &Tensor {
        &self.m
    }

    /// The class index that was removed from every member.
    pub fn removed_index(&self) -> usize {
        self.y
    }

    /// Number of members (columns).
    pub fn k(&self) -> usize {
        self.m.cols()
    }
}

/// Shannon entropy `-sum p ln p` in nats, with `0 ln 0 = 0`.
pub fn shannon_entropy(p: &[f64]) -> Result<f64> {
    let mut h = 0.0;
    for &v in p {
        if v < 0.0 {
            return Err(Error::Numeric(format!(
                "entropy of a vector with negative entry {v}"
            )));
        }
        if v > 0.0 {
            h -= v * v.ln();
        }
    }
    Ok(h)
}

/// Builds the normalized non-maximal matrix from a prediction set.
///
/// Each member's vector loses its entry at the shared label (order
/// preserved) and is scaled to unit L2 norm. A residual that is numerically
/// all-zero — the member predicted the label with probability one — is
/// replaced by the uniform direction `1/sqrt(L-1)`.
pub fn nonmax_matrix(preds: &PredictionSet) -> Result<NonMaxMatrix> {
    let (k, l, y) = (preds.k(), preds.classes(), preds.label());
    if l < 2 {
        return Err(Error::InvalidArgument(
            "non-maximal matrix needs at least 2 classes".into(),
        ));
    }
    let rows = l - 1;
    let mut m = Tensor::zeros(rows, k);
    for (col, p) in preds.members().iter().enumerate() {
        let residual: Vec<f64> = p
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != y)
            .map(|(_, &v)| v)
            .collect();
        let norm = residual.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < ZERO_COLUMN_NORM {
            let u = 1.0 / (rows as f64).sqrt();
            for i in 0..rows {
                m.set(i, col, u);
            }
        } else {
            for (i, v) in residual.iter().enumerate() {
                m.set(i, col, v / norm);
            }
        }
    }
    Ok(NonMaxMatrix { m, y })
}

/// Ensemble diversity: `det(M^T M + det_offset I)` for the normalized
/// non-maximal matrix `M`.
///
/// With more members than non-maximal classes the Gram matrix is rank
/// deficient by construction, so that case is rejected outright.
pub fn ensemble_diversity(nonmax: &NonMaxMatrix, det_offset: f64) -> Result<f64> {
    let (rows, k) = (nonmax.m.rows(), nonmax.m.cols());
    if k > rows {
        return Err(Error::InvalidArgument(format!(
            "diversity of {k} members over {} classes is structurally zero: \
             {k} vectors in a {rows}-dimensional space cannot be independent",
            rows + 1
        )));
    }
    if !(0.0..=1e-6).contains(&det_offset) {
        return Err(Error::InvalidArgument(format!(
            "det_offset must lie in [0, 1e-6], got {det_offset}"
        )));
    }
    let mut gram = vec![0.0; k * k];
    for a in 0..k {
        for b in 0..k {
            let mut dot = 0.0;
            for i in 0..rows {
                dot += nonmax.m.at(i, a) * nonmax.m.at(i, b);
            }
            gram[a * k + b] = dot + if a == b { det_offset } else { 0.0 };
        }
    }
    linalg::det(&gram, k)
}

/// The regularizer value `alpha * H(mean) + beta * ln ED` for one
/// prediction set.
pub fn adp_regularizer(preds: &PredictionSet, cfg: &AdpConfig) -> Result<f64> {
    let mut value = 0.0;
    if cfg.alpha != 0.0 {
        value += cfg.alpha * shannon_entropy(&preds.ensemble_mean())?;
    }
    if cfg.beta != 0.0 {
        let nm = nonmax_matrix(preds)?;
        let ed = ensemble_diversity(&nm, cfg.det_offset)?;
        value += cfg.beta * ed.max(LN_FLOOR).ln();
    }
    Ok(value)
}

/// Diversity of prediction vectors measured as mutual information:
/// `H(mean) - mean(H(member))`. Always in `[0, ln K]`.
pub fn jsd_diversity(preds: &PredictionSet) -> Result<f64> {
    let h_mean = shannon_entropy(&preds.ensemble_mean())?;
    let mut h_sum = 0.0;
    for p in preds.members() {
        h_sum += shannon_entropy(p)?;
    }
    Ok(h_mean - h_sum / preds.k() as f64)
}

/// The prediction-space training objective for a single example:
/// `sum_k -ln F^k_y  -  regularizer`.
pub fn prediction_objective(preds: &PredictionSet, cfg: &AdpConfig) -> Result<f64> {
    let y = preds.label();
    let mut ece = 0.0;
    for p in preds.members() {
        ece -= p[y].max(LN_FLOOR).ln();
    }
    Ok(ece - adp_regularizer(preds, cfg)?)
}

/// Solves the stationarity condition of the entropy-only (`beta = 0`)
/// objective for the coefficient `alpha` that makes a given ensemble
/// confidence optimal:
/// `alpha = K / (f ln(f (L-1) / (1-f)))` for `f` in `(1/L, 1)`.
pub fn solve_alpha(k: usize, l: usize, f_en_y: f64) -> Result<f64> {
    if k == 0 || l < 2 {
        return Err(Error::InvalidArgument(format!(
            "need k >= 1 and l >= 2, got k={k} l={l}"
        )));
    }
    let lo = 1.0 / l as f64;
    if !(f_en_y > lo && f_en_y < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "ensemble confidence must lie in (1/{l}, 1), got {f_en_y}"
        )));
    }
    let log_term = (f_en_y * (l as f64 - 1.0) / (1.0 - f_en_y)).ln();
    Ok(k as f64 / (f_en_y * log_term))
}

/// Residual of the confidence stationarity condition
/// `1/f = (alpha/K) ln(f (L-1) / (1-f))`; zero exactly at the optimum.
pub fn confidence_residual(k: usize, l: usize, alpha: f64, f: f64) -> f64 {
    1.0 / f - (alpha / k as f64) * (f * (l as f64 - 1.0) / (1.0 - f)).ln()
}

/// Inverts [`solve_alpha`]: finds the optimal ensemble confidence for a
/// given `alpha` by bisecting the monotone residual over `(1/L, 1)`.
pub fn solve_confidence(k: usize, l: usize, alpha: f64) -> Result<f64> {
    if k == 0 || l < 2 {
        return Err(Error::InvalidArgument(format!(
            "need k >= 1 and l >= 2, got k={k} l={l}"
        )));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "confidence equation has no root for alpha <= 0, got {alpha}"
        )));
    }
    let mut lo = 1.0 / l as f64 + 1e-9;
    let mut hi = 1.0 - 1e-9;
    // The residual decreases monotonically from ~L at the left endpoint to
    // -inf at the right, so plain bisection converges unconditionally.
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if confidence_residual(k, l, alpha, mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Splits the non-label classes into `K` equal, contiguous index sets —
/// the canonical partition fed to [`partition_solution`].
pub fn default_partition(k: usize, l: usize, y: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 || l < 2 || y >= l {
        return Err(Error::InvalidArgument(format!(
            "invalid partition request k={k} l={l} y={y}"
        )));
    }
    if (l - 1) % k != 0 {
        return Err(Error::InvalidArgument(format!(
            "{k} members cannot evenly split {} non-label classes",
            l - 1
        )));
    }
    let size = (l - 1) / k;
    let others: Vec<usize> = (0..l).filter(|&j| j != y).collect();
    Ok(others.chunks(size).map(|c| c.to_vec()).collect())
}

/// The closed-form joint optimum when `K` divides `L-1`: every member puts
/// `f_en_y` on the label and spreads the remainder uniformly over its own
/// block `s_k` of the partition, so supports are disjoint and diversity is
/// exactly 1.
pub fn partition_solution(
    k: usize,
    l: usize,
    y: usize,
    f_en_y: f64,
    partition: &[Vec<usize>],
) -> Result<PredictionSet> {
    if !(0.0..=1.0).contains(&f_en_y) {
        return Err(Error::InvalidArgument(format!(
            "ensemble confidence must lie in [0, 1], got {f_en_y}"
        )));
    }
    if partition.len() != k || (l - 1) % k != 0 {
        return Err(Error::InvalidArgument(format!(
            "expected {k} blocks evenly covering {} classes",
            l - 1
        )));
    }
    let size = (l - 1) / k;
    let mut seen = vec![false; l];
    seen[y] = true;
    for block in partition {
        if block.len() != size {
            return Err(Error::InvalidArgument(format!(
                "partition block has {} indices, expected {size}",
                block.len()
            )));
        }
        for &j in block {
            if j >= l || seen[j] {
                return Err(Error::InvalidArgument(format!(
                    "partition index {j} is out of range, repeated, or the label"
                )));
            }
            seen[j] = true;
        }
    }
    let fill = k as f64 * (1.0 - f_en_y) / (l as f64 - 1.0);
    let preds = partition
        .iter()
        .map(|block| {
            let mut p = vec![0.0; l];
            p[y] = f_en_y;
            for &j in block {
                p[j] = fill;
            }
            p
        })
        .collect();
    PredictionSet::new(preds, y)
}

/// Which regularizer the prediction-space optimizer should apply.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TheoryRegularizer {
    /// The entropy + log-determinant regularizer.
    Adp(AdpConfig),
    /// The mutual-information alternative, weighted by `lambda`.
    Jsd {
        /// Weight on the mutual-information term.
        lambda: f64,
    },
}

/// Knobs for [`optimize_prediction_space`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryOptions {
    /// Projected-gradient steps.
    pub steps: usize,
    /// Step size before projection.
    pub step_size: f64,
    /// L2 clip on the gradient of the smooth terms (cross-entropy and
    /// entropy/mutual-information parts).
    pub clip_smooth: f64,
    /// L2 clip on the gradient of the log-determinant term, whose
    /// magnitude diverges near one-hot corners.
    pub clip_diversity: f64,
    /// Record the objective every this many steps (0 records only the
    /// endpoints).
    pub record_every: usize,
}

impl Default for TheoryOptions {
    fn default() -> Self {
        TheoryOptions {
            steps: 20_000,
            step_size: 0.05,
            clip_smooth: 10.0,
            clip_diversity: 0.2,
            record_every: 1_000,
        }
    }
}

/// Optimization trace returned by [`optimize_prediction_space`].
#[derive(Debug, Clone)]
pub struct TheoryTrace {
    /// The random simplex start.
    pub initial: PredictionSet,
    /// The final iterate.
    pub solution: PredictionSet,
    /// `(step, objective)` samples, always including first and last.
    pub objectives: Vec<(usize, f64)>,
}

/// Euclidean projection of a vector onto the probability simplex.
pub fn project_to_simplex(v: &mut [f64]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::Empty("simplex projection"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(
            "simplex projection of a non-finite vector".into(),
        ));
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite values compare"));
    let mut cumulative = 0.0;
    let mut tau = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let candidate = (cumulative - 1.0) / (j as f64 + 1.0);
        if u - candidate > 0.0 {
            tau = candidate;
        }
    }
    for x in v.iter_mut() {
        *x = (*x - tau).max(0.0);
    }
    Ok(())
}

/// Clips `g` (flattened) to L2 norm at most `limit`.
fn clip_norm(g: &mut [f64], limit: f64) {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > limit {
        let s = limit / norm;
        for v in g {
            *v *= s;
        }
    }
}

/// Minimizes the per-example objective directly over the `K` probability
/// vectors with projected gradient descent.
///
/// Initialization draws each member from a flat Dirichlet via normalized
/// exponentials. Each step splits the gradient into a smooth part
/// (cross-entropy plus the entropy or mutual-information term) and the
/// stiff log-determinant part, clips the two parts separately — the
/// determinant's gradient blows up like the reciprocal of the residual
/// norm near one-hot corners and would otherwise drown the rest — then
/// projects every member back onto the simplex with a `1e-9` floor.
pub fn optimize_prediction_space(
    k: usize,
    l: usize,
    y: usize,
    reg: &TheoryRegularizer,
    opts: &TheoryOptions,
    seed: u64,
) -> Result<TheoryTrace> {
    if k == 0 || l < 2 {
        return Err(Error::InvalidArgument(format!(
            "need k >= 1 and l >= 2, got k={k} l={l}"
        )));
    }
    if y >= l {
        return Err(Error::LabelOutOfRange { label: y, classes: l });
    }
    if opts.steps == 0 {
        return Err(Error::InvalidArgument("need at least 1 step".into()));
    }
    if let TheoryRegularizer::Adp(cfg) = reg {
        cfg.validated()?;
        if cfg.beta != 0.0 && k > l - 1 {
            return Err(Error::InvalidArgument(format!(
                "diversity term undefined for {k} members over {l} classes"
            )));
        }
    }

    // Flat-Dirichlet start: normalized exponential draws per member.
    let mut f = Tensor::zeros(k, l);
    for member in 0..k {
        let mut r = rng::stream(seed, "theory-init", member as u64);
        let draws: Vec<f64> = (0..l).map(|_| rng::exponential(&mut r)).collect();
        let total: f64 = draws.iter().sum();
        for (j, d) in draws.iter().enumerate() {
            f.set(member, j, d / total);
        }
    }
    let initial = tensor_to_predictions(&f, y)?;

    let mut objectives = Vec::new();
    let labels = vec![y; k];
    for step in 0..opts.steps {
        // Stage the current iterate and build both objective parts.
        let mut graph = Graph::new();
        let fv = graph.leaf(f.clone(), true);

        // Cross-entropy: sum_k -ln F^k_y.
        let fy = graph.select_cols(fv, &labels)?;
        let lfy = graph.ln(fy);
        let ssum = graph.sum_all(lfy);
        let mut smooth = graph.scale(ssum, -1.0);

        let mut stiff: Option<Var> = None;
        match reg {
            TheoryRegularizer::Adp(cfg) => {
                if cfg.alpha != 0.0 {
                    let h = mean_entropy_node(&mut graph, fv, k)?;
                    let weighted = graph.scale(h, cfg.alpha);
                    smooth = graph.sub(smooth, weighted)?;
                }
                if cfg.beta != 0.0 {
                    let ln_ed = log_diversity_node(&mut graph, fv, y, cfg.det_offset)?;
                    stiff = Some(graph.scale(ln_ed, -cfg.beta));
                }
            }
            TheoryRegularizer::Jsd { lambda } => {
                let h_mean = mean_entropy_node(&mut graph, fv, k)?;
                // Mean member entropy: -(1/K) sum of x ln x over all entries.
                let xl = graph.xlogx(fv);
                let total = graph.sum_all(xl);
                let h_members = graph.scale(total, -1.0 / k as f64);
                let jsd = graph.sub(h_mean, h_members)?;
                let weighted = graph.scale(jsd, *lambda);
                smooth = graph.sub(smooth, weighted)?;
            }
        }

        let mut g_smooth = graph
            .backward(smooth)?
            .get(fv)
            .expect("leaf is tracked")
            .clone();
        clip_norm(g_smooth.data_mut(), opts.clip_smooth);
        let mut last_objective = graph.value(smooth).scalar_value()?;
        if let Some(s) = stiff {
            let mut g_stiff = graph.backward(s)?.get(fv).expect("leaf is tracked").clone();
            clip_norm(g_stiff.data_mut(), opts.clip_diversity);
            for (a, b) in g_smooth.data_mut().iter_mut().zip(g_stiff.data()) {
                *a += b;
            }
            last_objective += graph.value(s).scalar_value()?;
        }

        let record = step == 0
            || (opts.record_every > 0 && step % opts.record_every == 0)
            || step + 1 == opts.steps;
        if record {
            objectives.push((step, last_objective));
        }

        // Descend, project, floor, renormalize.
        for member in 0..k {
            let row: Vec<f64> = (0..l)
                .map(|j| f.at(member, j) - opts.step_size * g_smooth.at(member, j))
                .collect();
            let mut projected = row;
            project_to_simplex(&mut projected)?;
            let mut total = 0.0;
            for p in &mut projected {
                *p = p.max(1e-9);
                total += *p;
            }
            for (j, p) in projected.iter().enumerate() {
                f.set(member, j, p / total);
            }
        }
    }

    let solution = tensor_to_predictions(&f, y)?;
    Ok(TheoryTrace {
        initial,
        solution,
        objectives,
    })
}

/// Entropy of the ensemble mean as a graph node.
fn mean_entropy_node(graph: &mut Graph, fv: Var, k: usize) -> Result<Var> {
    let col_sums = graph.sum_rows(fv);
    let mean = graph.scale(col_sums, 1.0 / k as f64);
    let xl = graph.xlogx(mean);
    let s = graph.sum_all(xl);
    Ok(graph.scale(s, -1.0))
}

/// `ln det(Gram + offset I)` of the normalized non-maximal rows of a
/// `[K, L]` prediction matrix, as a graph node. Members whose non-maximal
/// residual is numerically zero enter as the constant uniform direction
/// (no gradient flows through the substitute).
pub(crate) fn log_diversity_node(
    graph: &mut Graph,
    predictions: Var,
    y: usize,
    det_offset: f64,
) -> Result<Var> {
    let k = graph.value(predictions).rows();
    let l = graph.value(predictions).cols();
    let residuals = graph.remove_col(predictions, y)?;
    let mut unit_rows = Vec::with_capacity(k);
    for member in 0..k {
        let row = graph.row(residuals, member)?;
        let norm_value: f64 = graph
            .value(row)
            .data()
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if norm_value < ZERO_COLUMN_NORM {
            let u = 1.0 / ((l - 1) as f64).sqrt();
            unit_rows.push(graph.constant(Tensor::filled(1, l - 1, u)));
        } else {
            let norm = graph.l2_norm_rows(row);
            unit_rows.push(graph.div_cols(row, norm)?);
        }
    }
    let u = graph.concat_rows(&unit_rows)?;
    let ut = graph.transpose(u);
    let gram = graph.matmul(u, ut)?;
    let ridge = graph.constant(Tensor::scaled_identity(k, det_offset));
    let gram_ridged = graph.add(gram, ridge)?;
    let det = graph.det(gram_ridged)?;
    Ok(graph.ln(det))
}

fn tensor_to_predictions(f: &Tensor, y: usize) -> Result<PredictionSet> {
    let preds = (0..f.rows()).map(|i| f.row_slice(i).to_vec()).collect();
    PredictionSet::new(preds, y)
}

/// Builds the full training objective on `graph` for a labeled batch:
/// the batch mean of `sum_k CE^k - regularizer`. Returns the scalar loss
/// node; member parameters must already be staged in `member_vars`.
pub fn stage_objective(
    graph: &mut Graph,
    ens: &Ensemble,
    member_vars: &[MemberVars],
    x: Var,
    labels: &[usize],
    cfg: &AdpConfig,
) -> Result<Var> {
    cfg.validated()?;
    let n = graph.value(x).rows();
    let l = ens.config().num_classes;
    let k = ens.len();
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "stage_objective",
            details: format!("{} labels for {n} examples", labels.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= l) {
        return Err(Error::LabelOutOfRange { label: bad, classes: l });
    }
    if n == 0 {
        return Err(Error::Empty("objective batch"));
    }
    if cfg.beta != 0.0 && k > l - 1 {
        return Err(Error::InvalidArgument(format!(
            "diversity term undefined for {k} members over {l} classes"
        )));
    }

    let probs: Vec<Var> = member_vars
        .iter()
        .map(|vars| ens.forward_probs(graph, vars, x))
        .collect::<Result<_>>()?;

    // Ensemble cross-entropy per example: sum over members of -ln F^k_y.
    let mut per_example: Option<Var> = None;
    for &p in &probs {
        let py = graph.select_cols(p, labels)?;
        let lp = graph.ln(py);
        let ce = graph.scale(lp, -1.0);
        per_example = Some(match per_example {
            Some(acc) => graph.add(acc, ce)?,
            None => ce,
        });
    }
    let mut per_example = per_example.expect("ensemble is non-empty");

    if cfg.alpha != 0.0 {
        // Entropy of the ensemble mean, one value per example.
        let mut sum = probs[0];
        for &p in &probs[1..] {
            sum = graph.add(sum, p)?;
        }
        let mean = graph.scale(sum, 1.0 / k as f64);
        let xl = graph.xlogx(mean);
        // Row sums of x ln x are already -H, so adding alpha times them
        // subtracts alpha * H from the objective.
        let row_sums = graph.sum_cols(xl);
        let weighted = graph.scale(row_sums, cfg.alpha);
        per_example = graph.add(per_example, weighted)?;
    }

    if cfg.beta != 0.0 {
        // Per-example log-diversity, assembled into an [n, 1] column.
        let mut lned_rows = Vec::with_capacity(n);
        for i in 0..n {
            let member_rows: Vec<Var> = probs
                .iter()
                .map(|&p| graph.row(p, i))
                .collect::<Result<_>>()?;
            let stacked = graph.concat_rows(&member_rows)?;
            let ln_ed = log_diversity_node(graph, stacked, labels[i], cfg.det_offset)?;
            lned_rows.push(ln_ed);
        }
        let lned = graph.concat_rows(&lned_rows)?;
        let weighted = graph.scale(lned, -cfg.beta);
        per_example = graph.add(per_example, weighted)?;
    }

    let total = graph.sum_all(per_example);
    Ok(graph.scale(total, 1.0 / n as f64))
}

/// Result of one named structural check run over several seeds.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SuiteCheck {
    /// Stable identifier, e.g. `"one-hot-collapse"`.
    pub name: &'static str,
    /// True when every seed satisfied the check.
    pub passed: bool,
    /// Seeds that satisfied the check.
    pub seeds_passed: usize,
    /// Seeds attempted.
    pub seeds_total: usize,
    /// Human-readable per-seed metrics.
    pub detail: String,
}

const SUITE_SEEDS: u64 = 5;

/// Diversity-only optimum: with no entropy term each member collapses onto
/// the correct class. Checks `F^k_y > 0.99` for every member, per seed.
pub fn check_one_hot_collapse(base_seed: u64, opts: &TheoryOptions) -> Result<SuiteCheck> {
    let cfg = AdpConfig::new(0.0, 0.5)?;
    let reg = TheoryRegularizer::Adp(cfg);
    let y = 0;
    let mut passed = 0;
    let mut detail = String::new();
    for i in 0..SUITE_SEEDS {
        let trace = optimize_prediction_space(2, 4, y, &reg, opts, base_seed + i)?;
        let worst = trace
            .solution
            .members()
            .iter()
            .map(|p| p[y])
            .fold(f64::INFINITY, f64::min);
        let ok = worst > 0.99;
        if ok {
            passed += 1;
        }
        detail.push_str(&format!(
            "seed {}: min member confidence {:.6} {}; ",
            base_seed + i,
            worst,
            if ok { "ok" } else { "FAIL" }
        ));
    }
    Ok(SuiteCheck {
        name: "one-hot-collapse",
        passed: passed == SUITE_SEEDS,
        seeds_passed: passed as usize,
        seeds_total: SUITE_SEEDS as usize,
        detail,
    })
}

/// Entropy-only optimum: member confidences equalize at the root of the
/// stationarity condition. Checks the spread of `F^k_y` (< 1e-2) and the
/// residual of the condition at the ensemble confidence (< 0.05).
pub fn check_confidence_optimum(base_seed: u64, opts: &TheoryOptions) -> Result<SuiteCheck> {
    let (k, l, y, alpha) = (3usize, 10usize, 0usize, 2.0);
    let cfg = AdpConfig::new(alpha, 0.0)?;
    let reg = TheoryRegularizer::Adp(cfg);
    let mut passed = 0;
    let mut detail = String::new();
    for i in 0..SUITE_SEEDS {
        let trace = optimize_prediction_space(k, l, y, &reg, opts, base_seed + i)?;
        let confidences: Vec<f64> = trace.solution.members().iter().map(|p| p[y]).collect();
        let hi = confidences.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = confidences.iter().cloned().fold(f64::INFINITY, f64::min);
        let spread = hi - lo;
        let f_en = trace.solution.ensemble_mean()[y];
        let residual = confidence_residual(k, l, alpha, f_en).abs();
        let ok = spread < 1e-2 && residual < 0.05;
        if ok {
            passed += 1;
        }
        detail.push_str(&format!(
            "seed {}: spread {:.2e}, residual {:.3e} {}; ",
            base_seed + i,
            spread,
            residual,
            if ok { "ok" } else { "FAIL" }
        ));
    }
    Ok(SuiteCheck {
        name: "confidence-optimum",
        passed: passed == SUITE_SEEDS,
        seeds_passed: passed as usize,
        seeds_total: SUITE_SEEDS as usize,
        detail,
    })
}

/// Joint optimum: members agree on the correct class and split the
/// remaining mass over disjoint supports. Checks near-orthogonal
/// non-maximal columns (|dot| < 0.05), diversity > 0.9, and nonzero
/// residual entries within 0.02 of `K (1 - F_en_y) / (L - 1)`.
pub fn check_orthogonal_partition(base_seed: u64, opts: &TheoryOptions) -> Result<SuiteCheck> {
    let (k, l, y) = (3usize, 10usize, 0usize);
    let cfg = AdpConfig::new(2.0, 0.5)?;
    let reg = TheoryRegularizer::Adp(cfg);
    let mut passed = 0;
    let mut detail = String::new();
    for i in 0..SUITE_SEEDS {
        let trace = optimize_prediction_space(k, l, y, &reg, opts, base_seed + i)?;
        let nm = nonmax_matrix(&trace.solution)?;
        let m = nm.matrix();
        let mut max_dot = 0.0f64;
        for a in 0..k {
            for b in (a + 1)..k {
                let mut dot = 0.0;
                for r in 0..m.rows() {
                    dot += m.at(r, a) * m.at(r, b);
                }
                max_dot = max_dot.max(dot.abs());
            }
        }
        let ed = ensemble_diversity(&nm, cfg.det_offset)?;
        let f_en = trace.solution.ensemble_mean()[y];
        let fill = k as f64 * (1.0 - f_en) / (l as f64 - 1.0);
        let mut max_dev = 0.0f64;
        for p in trace.solution.members() {
            for (j, &v) in p.iter().enumerate() {
                if j != y && v > fill / 2.0 {
                    max_dev = max_dev.max((v - fill).abs());
                }
            }
        }
        let ok = max_dot < 0.05 && ed > 0.9 && max_dev < 0.02;
        if ok {
            passed += 1;
        }
        detail.push_str(&format!(
            "seed {}: max |dot| {:.2e}, diversity {:.4}, fill deviation {:.2e} {}; ",
            base_seed + i,
            max_dot,
            ed,
            max_dev,
            if ok { "ok" } else { "FAIL" }
        ));
    }
    Ok(SuiteCheck {
        name: "orthogonal-partition",
        passed: passed == SUITE_SEEDS,
        seeds_passed: passed as usize,
        seeds_total: SUITE_SEEDS as usize,
        detail,
    })
}

/// Mutual-information regularizer: the objective has no interior optimum,
/// so the optimizer must push some coordinate to the boundary. Checks that
/// the smallest coordinate drops below 1e-4, per seed.
pub fn check_boundary_escape(base_seed: u64, opts: &TheoryOptions) -> Result<SuiteCheck> {
    let reg = TheoryRegularizer::Jsd { lambda: 2.0 };
    let mut passed = 0;
    let mut detail = String::new();
    for i in 0..SUITE_SEEDS {
        let trace = optimize_prediction_space(2, 3, 0, &reg, opts, base_seed + i)?;
        let smallest = trace
            .solution
            .members()
            .iter()
            .flat_map(|p| p.iter().copied())
            .fold(f64::INFINITY, f64::min);
        let ok = smallest < 1e-4;
        if ok {
            passed += 1;
        }
        detail.push_str(&format!(
            "seed {}: min coordinate {:.2e} {}; ",
            base_seed + i,
            smallest,
            if ok { "ok" } else { "FAIL" }
        ));
    }
    Ok(SuiteCheck {
        name: "jsd-boundary",
        passed: passed == SUITE_SEEDS,
        seeds_passed: passed as usize,
        seeds_total: SUITE_SEEDS as usize,
        detail,
    })
}

/// Runs all four structural checks with shared options.
pub fn run_theory_suite(base_seed: u64, opts: &TheoryOptions) -> Result<Vec<SuiteCheck>> {
    Ok(vec![
        check_one_hot_collapse(base_seed, opts)?,
        check_confidence_optimum(base_seed, opts)?,
        check_orthogonal_partition(base_seed, opts)?,
        check_boundary_escape(base_seed, opts)?,
    ])
}

/// Value of the training objective on a labeled batch.
pub fn adp_objective(ens: &Ensemble, x: &Tensor, labels: &[usize], cfg: &AdpConfig) -> Result<f64> {
    let mut graph = Graph::new();
    let xv = graph.constant(x.clone());
    let vars: Vec<MemberVars> = (0..ens.len())
        .map(|k| ens.stage_member(&mut graph, k, false))
        .collect();
    let loss = stage_objective(&mut graph, ens, &vars, xv, labels, cfg)?;
    graph.value(loss).scalar_value()
}

/// Per-member parameter gradients of the training objective.
///
/// `active[k]` controls whether member `k` receives gradients; inactive
/// members still contribute predictions to the mean and the diversity
/// term. Returns the objective value and, for each active member, a
/// gradient container shaped exactly like its parameters.
#[allow(clippy::type_complexity)]
pub fn adp_gradients(
    ens: &Ensemble,
    x: &Tensor,
    labels: &[usize],
    cfg: &AdpConfig,
    active: &[bool],
) -> Result<(f64, Vec<Option<crate::model::ModelParams>>)> {
    if active.len() != ens.len() {
        return Err(Error::ShapeMismatch {
            op: "adp_gradients",
            details: format!("{} active flags for {} members", active.len(), ens.len()),
        });
    }
    let mut graph = Graph::new();
    let xv = graph.constant(x.clone());
    let vars: Vec<MemberVars> = (0..ens.len())
        .map(|k| ens.stage_member(&mut graph, k, active[k]))
        .collect();
    let loss = stage_objective(&mut graph, ens, &vars, xv, labels, cfg)?;
    let value = graph.value(loss).scalar_value()?;
    let grads = graph.backward(loss)?;
    let mut out = Vec::with_capacity(ens.len());
    for (k, member_vars) in vars.iter().enumerate() {
        if !active[k] {
            out.push(None);
            continue;
        }
        let layers = member_vars
            .weights
            .iter()
            .zip(&member_vars.biases)
            .map(|(&w, &b)| {
                let dw = grads
                    .get(w)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(graph.value(w).rows(), graph.value(w).cols()));
                let db = grads
                    .get(b)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(graph.value(b).rows(), graph.value(b).cols()));
                crate::model::Layer { weight: dw, bias: db }
            })
            .collect();
        out.push(Some(crate::model::ModelParams { layers }));
    }
    Ok((value, out))
}
