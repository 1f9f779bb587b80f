//! Numerical harness for the closed-form risk-reduction argument: a linear
//! graph convolution under an orthogonal feature shift, repaired by a blended
//! low-rank intervention `(1 - alpha) x + alpha U V x`.
//!
//! The expected squared logit deviation `d(alpha)` is computed two ways, a
//! quadratic assembled from trace coefficients, and a brute-force per-row
//! evaluation over the instance, and the harness verifies that the
//! coefficient minimizer strictly reduces both the deviation and the actual
//! l1 prediction risk.
//!
//! A note on the trace form: the deviation factorizes exactly at sample level
//! as `tr(S^T W W^T S Sigma_u)` with `Sigma_u` the empirical covariance of
//! the *aggregated* features (rows of `A X`). Aggregation and the
//! feature-space shift commute, so absorbing the graph Gram matrix into the
//! covariance keeps the quadratic coefficient structure intact while making
//! every identity exact for the instance at hand.

use std::fmt::Write as _;

use thiserror::Error;

use crate::graph::{normalize, Graph, NormalizedAdjacency};
use crate::kernel::{haar_orthogonal, softmax_rows, sym_eigen, DenseMatrix, KernelError, RngKey};

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error(
        "could not construct a valid instance after {attempts} attempts \
         (repair never beat the raw shift)"
    )]
    ConstructionFailed { attempts: usize },

    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// One concrete instantiation of the shifted-SGC setting.
pub struct TheoryInstance {
    pub norm_adj: NormalizedAdjacency,
    /// Centered bounded features, n x d.
    pub features: DenseMatrix,
    /// Model / label weights, d x C.
    pub weights: DenseMatrix,
    /// Orthogonal shift, d x d.
    pub shift: DenseMatrix,
    /// Repair factors: `repair_u` is d x m, `repair_v` is m x d.
    pub repair_u: DenseMatrix,
    pub repair_v: DenseMatrix,
    /// Empirical covariance of the raw features, d x d.
    pub sigma_x: DenseMatrix,
    /// Empirical covariance of the aggregated features (rows of A X).
    pub sigma_u: DenseMatrix,
    /// Precomputed `A X`.
    pub aggregated: DenseMatrix,
    /// Soft labels `softmax(A X W)`.
    pub labels: DenseMatrix,
    pub alpha_grid: Vec<f64>,
    /// Instances rejected before this one was accepted.
    pub resamples: usize,
}

impl TheoryInstance {
    /// Residual corruption `C = Q - I`.
    pub fn corruption(&self) -> DenseMatrix {
        let d = self.shift.rows();
        self.shift.sub(&DenseMatrix::identity(d)).expect("square")
    }

    /// Residual repair `D = U V Q - I`.
    pub fn repair_residual(&self) -> DenseMatrix {
        let d = self.shift.rows();
        self.repair_u
            .matmul(&self.repair_v)
            .and_then(|uv| uv.matmul(&self.shift))
            .and_then(|uvq| uvq.sub(&DenseMatrix::identity(d)))
            .expect("square chain")
    }

    /// Blend `T_alpha = (1 - alpha) Q + alpha U V Q`, so logits are
    /// `A X T_alpha^T W`.
    pub fn blend(&self, alpha: f64) -> DenseMatrix {
        let uvq = self
            .repair_u
            .matmul(&self.repair_v)
            .and_then(|uv| uv.matmul(&self.shift))
            .expect("square chain");
        self.shift.scale(1.0 - alpha).add(&uvq.scale(alpha)).expect("square")
    }
}

/// Coefficients of the quadratic deviation `d(alpha) = gamma_w (a a^2 + b a + c)`.
#[derive(Debug, Clone)]
pub struct QuadraticRisk {
    pub e: f64,
    pub f: f64,
    pub g: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// `tr(W W^T)`.
    pub gamma_w: f64,
    pub alpha_star: f64,
    /// False when the quadratic has no interior minimum and the endpoint
    /// comparison decided `alpha_star`.
    pub interior_minimum: bool,
}

impl QuadraticRisk {
    pub fn d(&self, alpha: f64) -> f64 {
        self.gamma_w * (self.a * alpha * alpha + self.b * alpha + self.c)
    }
}

const MAX_RESAMPLES: usize = 32;

/// Construct a random valid instance: Erdos-Renyi graph, centered bounded
/// features, Haar shift, and a rank-m repair aimed at the top feature
/// directions, blended with noise scaled by `1 - repair_quality`. Instances
/// are resampled until the repair demonstrably beats the raw shift, both on
/// raw feature residuals and in the prediction-relevant (aggregated,
/// W-weighted) metric; construction fails loudly if that never happens.
pub fn build_instance(
    n: usize,
    d: usize,
    classes: usize,
    m: usize,
    repair_quality: f64,
    key: RngKey,
) -> Result<TheoryInstance, TheoryError> {
    if m == 0 || m > d {
        return Err(TheoryError::InvalidParam(format!("need 0 < m <= d, got m={m}, d={d}")));
    }
    if !(0.0..=1.0).contains(&repair_quality) {
        return Err(TheoryError::InvalidParam(format!(
            "repair_quality must lie in [0, 1], got {repair_quality}"
        )));
    }
    if classes < 2 {
        return Err(TheoryError::InvalidParam("need at least two classes".into()));
    }
    if n < 2 {
        return Err(TheoryError::InvalidParam("need at least two nodes".into()));
    }

    // Graph: Erdos-Renyi with expected degree ~8.
    let p_edge = (8.0 / (n - 1) as f64).min(1.0);
    let mut edge_stream = key.child(0).stream();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if edge_stream.bernoulli(p_edge) {
                edges.push((i, j));
            }
        }
    }
    let adj = Graph::adjacency_from_edges(n, &edges)?;
    let norm_adj = normalize(&adj);

    // Bounded zero-mean features: uniform on [-sqrt(3), sqrt(3)] (unit
    // variance), then exactly column-centered.
    let mut feat_stream = key.child(1).stream();
    let half_width = 3.0f64.sqrt();
    let mut features =
        DenseMatrix::filled(n, d, |_, _| feat_stream.uniform_in(-half_width, half_width));
    for j in 0..d {
        let mean: f64 = (0..n).map(|i| features.get(i, j)).sum::<f64>() / n as f64;
        for i in 0..n {
            let v = features.get(i, j) - mean;
            features.set(i, j, v);
        }
    }

    let mut w_stream = key.child(2).stream();
    let weights = DenseMatrix::filled(d, classes, |_, _| w_stream.normal());

    let aggregated = norm_adj.csr().matmul_dense(&features)?;
    let labels = softmax_rows(&aggregated.matmul(&weights)?);
    let sigma_x = features.transpose().matmul(&features)?.scale(1.0 / n as f64);
    let sigma_u = aggregated.transpose().matmul(&aggregated)?.scale(1.0 / n as f64);

    // Top-m feature directions carry the repair subspace.
    let (_, eigvecs) = sym_eigen(&sigma_x);
    let top_m = DenseMatrix::filled(m, d, |i, j| eigvecs.get(i, j));

    for attempt in 0..MAX_RESAMPLES {
        let shift_key = key.child(100 + attempt as u64);
        let mut shift_stream = shift_key.stream();
        let shift = haar_orthogonal(d, &mut shift_stream);
        match try_repair(
            &features,
            &aggregated,
            &weights,
            &shift,
            &top_m,
            repair_quality,
            shift_key.child(1),
        )? {
            Some((repair_u, repair_v)) => {
                return Ok(TheoryInstance {
                    norm_adj,
                    features,
                    weights,
                    shift,
                    repair_u,
                    repair_v,
                    sigma_x,
                    sigma_u,
                    aggregated,
                    labels,
                    alpha_grid: (0..=10).map(|i| i as f64 / 10.0).collect(),
                    resamples: attempt,
                });
            }
            None => continue,
        }
    }
    Err(TheoryError::ConstructionFailed { attempts: MAX_RESAMPLES })
}

/// Build the repair factors for a given shift and check instance validity:
/// a non-degenerate shift whose repair beats it on raw residuals and in the
/// prediction-relevant metric.
fn try_repair(
    features: &DenseMatrix,
    aggregated: &DenseMatrix,
    weights: &DenseMatrix,
    shift: &DenseMatrix,
    top_m: &DenseMatrix,
    repair_quality: f64,
    noise_key: RngKey,
) -> Result<Option<(DenseMatrix, DenseMatrix)>, TheoryError> {
    let d = shift.rows();
    let eye = DenseMatrix::identity(d);
    let corruption = shift.sub(&eye)?;
    if corruption.frob_norm() < 1e-6 {
        // No shift to repair; the effectiveness premise cannot strictly hold.
        return Ok(None);
    }

    // Ideal rank-m repair: U V = P_m^T P_m Q^T, the inverse rotation on the
    // top feature subspace. Noise shrinks with repair quality.
    let mut noise_stream = noise_key.stream();
    let noise_scale = (1.0 - repair_quality) / (d as f64).sqrt();
    let m = top_m.rows();
    let u0 = top_m.transpose();
    let v0 = top_m.matmul(&shift.transpose())?;
    let repair_u = u0.add(&DenseMatrix::filled(d, m, |_, _| noise_scale * noise_stream.normal()))?;
    let repair_v = v0.add(&DenseMatrix::filled(m, d, |_, _| noise_scale * noise_stream.normal()))?;

    let repair_residual = repair_u
        .matmul(&repair_v)?
        .matmul(shift)?
        .sub(&eye)?;

    // Raw effectiveness: mean ||D x||^2 < mean ||C x||^2 over feature rows.
    let raw_d = features.matmul(&repair_residual.transpose())?.frob_norm();
    let raw_c = features.matmul(&corruption.transpose())?.frob_norm();
    if raw_d >= raw_c {
        return Ok(None);
    }
    // Prediction-relevant effectiveness: the same comparison after
    // aggregation and output weighting.
    let pred_d = aggregated.matmul(&repair_residual.transpose())?.matmul(weights)?.frob_norm();
    let pred_c = aggregated.matmul(&corruption.transpose())?.matmul(weights)?.frob_norm();
    if pred_d >= pred_c {
        return Ok(None);
    }
    Ok(Some((repair_u, repair_v)))
}

/// Assemble the quadratic deviation coefficients from d x d traces.
pub fn trace_coefficients(inst: &TheoryInstance) -> QuadraticRisk {
    let corruption = inst.corruption();
    let repair = inst.repair_residual();
    let w_gram = inst.weights.matmul(&inst.weights.transpose()).expect("W W^T");
    let gamma_w = w_gram.trace();

    let cross = |left: &DenseMatrix, right: &DenseMatrix| -> f64 {
        // tr(L^T WW^T R Sigma_u) / gamma_w
        left.transpose()
            .matmul(&w_gram)
            .and_then(|lw| lw.matmul(right))
            .and_then(|lwr| lwr.matmul(&inst.sigma_u))
            .expect("square chain")
            .trace()
            / gamma_w
    };

    let e = cross(&corruption, &corruption);
    let f = cross(&corruption, &repair) + cross(&repair, &corruption);
    let g = cross(&repair, &repair);
    let a = e - f + g;
    let b = f - 2.0 * e;
    let c = e;

    let (alpha_star, interior_minimum) = if a > 0.0 {
        ((-b / (2.0 * a)).clamp(0.0, 1.0), true)
    } else {
        // No interior minimum: compare the endpoints d(0) = c, d(1) = g.
        (if g < c { 1.0 } else { 0.0 }, false)
    };

    QuadraticRisk { e, f, g, a, b, c, gamma_w, alpha_star, interior_minimum }
}

/// The trace form evaluated directly at `S_alpha = (1-alpha) C + alpha D`;
/// an independent route to the same quantity as [`QuadraticRisk::d`].
pub fn trace_d(inst: &TheoryInstance, alpha: f64) -> f64 {
    let s = inst
        .corruption()
        .scale(1.0 - alpha)
        .add(&inst.repair_residual().scale(alpha))
        .expect("square");
    let w_gram = inst.weights.matmul(&inst.weights.transpose()).expect("W W^T");
    s.transpose()
        .matmul(&w_gram)
        .and_then(|sw| sw.matmul(&s))
        .and_then(|sws| sws.matmul(&inst.sigma_u))
        .expect("square chain")
        .trace()
}

/// Brute-force per-node deviation: the mean squared logit error
/// `(1/N) ||A X S_alpha^T W||_F^2` computed row by row.
pub fn brute_force_d(inst: &TheoryInstance, alpha: f64) -> f64 {
    let s = inst
        .corruption()
        .scale(1.0 - alpha)
        .add(&inst.repair_residual().scale(alpha))
        .expect("square");
    let deviation = inst
        .aggregated
        .matmul(&s.transpose())
        .and_then(|m| m.matmul(&inst.weights))
        .expect("chain");
    let mut total = 0.0;
    for i in 0..deviation.rows() {
        total += deviation.row(i).iter().map(|v| v * v).sum::<f64>();
    }
    total / deviation.rows() as f64
}

/// Mean l1 distance between shifted-and-repaired predictions and the soft
/// labels, over all nodes.
pub fn empirical_risk(inst: &TheoryInstance, alpha: f64) -> f64 {
    let blend = inst.blend(alpha);
    let logits = inst
        .aggregated
        .matmul(&blend.transpose())
        .and_then(|m| m.matmul(&inst.weights))
        .expect("chain");
    let pred = softmax_rows(&logits);
    let n = pred.rows();
    let mut total = 0.0;
    for i in 0..n {
        total += pred
            .row(i)
            .iter()
            .zip(inst.labels.row(i))
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
    }
    total / n as f64
}

/// Empirical softmax Lipschitz estimate: the largest observed ratio of l1
/// prediction change to l2 logit change across nodes and grid points.
pub fn lipschitz_estimate(inst: &TheoryInstance) -> f64 {
    let clean_logits = inst.aggregated.matmul(&inst.weights).expect("chain");
    let mut worst: f64 = 0.0;
    for &alpha in &inst.alpha_grid {
        let blend = inst.blend(alpha);
        let logits = inst
            .aggregated
            .matmul(&blend.transpose())
            .and_then(|m| m.matmul(&inst.weights))
            .expect("chain");
        let pred = softmax_rows(&logits);
        for i in 0..logits.rows() {
            let dz: f64 = logits
                .row(i)
                .iter()
                .zip(clean_logits.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if dz < 1e-12 {
                continue;
            }
            let dy: f64 = pred
                .row(i)
                .iter()
                .zip(inst.labels.row(i))
                .map(|(a, b)| (a - b).abs())
                .sum();
            worst = worst.max(dy / dz);
        }
    }
    worst
}

/// Outcome of all checks on one instance.
#[derive(Debug, Clone)]
pub struct TheoremReport {
    pub quadratic: QuadraticRisk,
    pub d0: f64,
    pub d_star: f64,
    pub d1: f64,
    pub risk0: f64,
    pub risk_star: f64,
    /// d(1) < d(0): unconditional under the effectiveness premise.
    pub endpoint_reduced: bool,
    /// d(alpha*) < d(0).
    pub deviation_reduced: bool,
    /// Risk(alpha*) < Risk(0): the headline inequality.
    pub risk_reduced: bool,
    /// Worst relative gap between the quadratic and the brute-force route
    /// over the alpha grid.
    pub max_rel_gap: f64,
    /// Risk(alpha) <= L * sqrt(d(alpha)) held at every grid point.
    pub lipschitz_bound_held: bool,
    pub resamples: usize,
}

impl TheoremReport {
    pub fn passed(&self) -> bool {
        self.endpoint_reduced && self.deviation_reduced && self.risk_reduced
    }
}

/// Run every check on one instance.
pub fn verify_theorem(inst: &TheoryInstance) -> TheoremReport {
    let quadratic = trace_coefficients(inst);
    let d0 = quadratic.d(0.0);
    let d1 = quadratic.d(1.0);
    let d_star = quadratic.d(quadratic.alpha_star);
    let risk0 = empirical_risk(inst, 0.0);
    let risk_star = empirical_risk(inst, quadratic.alpha_star);

    let mut max_rel_gap: f64 = 0.0;
    for &alpha in &inst.alpha_grid {
        let quad = quadratic.d(alpha);
        let brute = brute_force_d(inst, alpha);
        let gap = (quad - brute).abs() / brute.abs().max(1e-12);
        max_rel_gap = max_rel_gap.max(gap);
    }

    let lhat = lipschitz_estimate(inst);
    let lipschitz_bound_held = inst
        .alpha_grid
        .iter()
        .all(|&alpha| empirical_risk(inst, alpha) <= lhat * brute_force_d(inst, alpha).sqrt() + 1e-12);

    TheoremReport {
        d0,
        d_star,
        d1,
        risk0,
        risk_star,
        endpoint_reduced: d1 < d0,
        deviation_reduced: d_star < d0,
        risk_reduced: risk_star < risk0,
        max_rel_gap,
        lipschitz_bound_held,
        resamples: inst.resamples,
        quadratic,
    }
}

/// One CSV row per trial.
#[derive(Debug, Clone)]
pub struct TrialRow {
    pub seed: u64,
    pub report: TheoremReport,
}

pub fn trial_csv_header() -> &'static str {
    "seed,e,f,g,a,b,c,alpha_star,d0,d_star,d1,risk0,risk_star,mc_rel_gap,endpoint_ok,deviation_ok,risk_ok,lipschitz_ok,resamples,passed"
}

impl TrialRow {
    pub fn to_csv(&self) -> String {
        let r = &self.report;
        let q = &r.quadratic;
        let mut line = String::new();
        let _ = write!(
            line,
            "{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.6},{:.12e},{:.12e},{:.12e},{:.8},{:.8},{:.3e},{},{},{},{},{},{}",
            self.seed,
            q.e,
            q.f,
            q.g,
            q.a,
            q.b,
            q.c,
            q.alpha_star,
            r.d0,
            r.d_star,
            r.d1,
            r.risk0,
            r.risk_star,
            r.max_rel_gap,
            r.endpoint_reduced,
            r.deviation_reduced,
            r.risk_reduced,
            r.lipschitz_bound_held,
            r.resamples,
            r.passed(),
        );
        line
    }
}

pub struct TrialParams {
    pub n: usize,
    pub d: usize,
    pub classes: usize,
    pub m: usize,
    pub repair_quality: f64,
}

impl Default for TrialParams {
    fn default() -> Self {
        TrialParams { n: 200, d: 16, classes: 4, m: 8, repair_quality: 0.9 }
    }
}

/// Run `trials` independent instances seeded `seed0, seed0+1, ...`.
pub fn run_trials(
    trials: usize,
    params: &TrialParams,
    seed0: u64,
) -> Result<Vec<TrialRow>, TheoryError> {
    let mut rows = Vec::with_capacity(trials);
    for t in 0..trials {
        let seed = seed0 + t as u64;
        let inst = build_instance(
            params.n,
            params.d,
            params.classes,
            params.m,
            params.repair_quality,
            RngKey::new(seed),
        )?;
        rows.push(TrialRow { seed, report: verify_theorem(&inst) });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_instance(seed: u64) -> TheoryInstance {
        build_instance(80, 8, 3, 4, 0.9, RngKey::new(seed)).unwrap()
    }

    #[test]
    fn perfect_full_rank_repair_collapses_everything() {
        let inst = build_instance(60, 6, 3, 6, 1.0, RngKey::new(1)).unwrap();
        // U V = Q^T exactly: D = 0 up to roundoff.
        assert!(inst.repair_residual().frob_norm() < 1e-9);
        let q = trace_coefficients(&inst);
        assert!(q.g.abs() < 1e-16, "G = {}", q.g);
        assert!(q.f.abs() < 1e-12, "F = {}", q.f);
        assert!((q.alpha_star - 1.0).abs() < 1e-9);
        assert!(q.d(1.0).abs() < 1e-12);
        assert!(empirical_risk(&inst, 1.0) < 1e-9);
        let rep = verify_theorem(&inst);
        assert!(rep.passed());
        assert!(rep.risk_star < 1e-9 && rep.risk0 > 1e-3);
    }

    #[test]
    fn identity_shift_is_rejected() {
        let inst = small_instance(2);
        let eye = DenseMatrix::identity(8);
        let out = try_repair(
            &inst.features,
            &inst.aggregated,
            &inst.weights,
            &eye,
            &DenseMatrix::filled(4, 8, |i, j| if i == j { 1.0 } else { 0.0 }),
            1.0,
            RngKey::new(3),
        )
        .unwrap();
        assert!(out.is_none());
    }

    #[test]
    fn quadratic_matches_direct_trace_evaluation() {
        let inst = small_instance(4);
        let q = trace_coefficients(&inst);
        for &alpha in &inst.alpha_grid {
            let via_coeffs = q.d(alpha);
            let via_trace = trace_d(&inst, alpha);
            let rel = (via_coeffs - via_trace).abs() / via_trace.abs().max(1e-12);
            assert!(rel < 1e-9, "alpha {alpha}: {via_coeffs} vs {via_trace}");
        }
    }

    #[test]
    fn endpoint_identities_hold_exactly() {
        let inst = small_instance(5);
        let q = trace_coefficients(&inst);
        // d(0) = gamma_w * c = gamma_w * E; d(1) = gamma_w * G.
        assert!((q.d(0.0) - q.gamma_w * q.e).abs() < 1e-12 * q.d(0.0).abs().max(1.0));
        assert!((q.d(1.0) - q.gamma_w * q.g).abs() < 1e-12 * q.d(0.0).abs().max(1.0));
        assert!((q.a - (q.e - q.f + q.g)).abs() < 1e-15);
        assert!((q.b - (q.f - 2.0 * q.e)).abs() < 1e-15);
        assert!((q.c - q.e).abs() < 1e-15);
    }

    #[test]
    fn brute_force_agrees_with_quadratic() {
        let inst = small_instance(6);
        let q = trace_coefficients(&inst);
        for &alpha in &inst.alpha_grid {
            let brute = brute_force_d(&inst, alpha);
            let rel = (q.d(alpha) - brute).abs() / brute.abs().max(1e-12);
            assert!(rel < 0.02, "alpha {alpha}: rel gap {rel}");
        }
    }

    #[test]
    fn risk_is_continuous_in_alpha() {
        let inst = small_instance(7);
        for &alpha in &[0.0, 0.25, 0.5, 0.75, 0.9] {
            let delta = 1e-4;
            let jump = (empirical_risk(&inst, alpha + delta) - empirical_risk(&inst, alpha)).abs();
            assert!(jump < 1e-2, "alpha {alpha}: jump {jump}");
        }
    }

    #[test]
    fn centered_features_have_tiny_column_means() {
        let inst = small_instance(8);
        let n = inst.features.rows() as f64;
        for j in 0..inst.features.cols() {
            let mean: f64 =
                (0..inst.features.rows()).map(|i| inst.features.get(i, j)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn small_trial_batch_passes() {
        let params = TrialParams { n: 80, d: 8, classes: 3, m: 4, repair_quality: 0.9 };
        let rows = run_trials(10, &params, 1000).unwrap();
        let passed = rows.iter().filter(|r| r.report.passed()).count();
        assert!(passed >= 9, "only {passed}/10 passed");
        for r in &rows {
            assert!(r.report.endpoint_reduced, "seed {}", r.seed);
            assert!(r.report.lipschitz_bound_held, "seed {}", r.seed);
        }
    }

    #[test]
    fn invalid_params_are_rejected() {
        assert!(build_instance(50, 8, 3, 0, 0.9, RngKey::new(0)).is_err());
        assert!(build_instance(50, 8, 3, 9, 0.9, RngKey::new(0)).is_err());
        assert!(build_instance(50, 8, 3, 4, 1.5, RngKey::new(0)).is_err());
    }
}
