//! Lifted linear model, Riccati terminal weight, condensed tracking QP, a
//! box-constrained QP solver and the receding-horizon loop.
//!
//! The controller works in the model's (standardized) units. Physical input
//! boxes and references are mapped through the dataset [`Scaler`].

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diff::ParamVector;
use crate::error::{Error, Result};
use crate::meta::proximal_descent;
use crate::nssm::{encode_history, NssmObjective, NssmParams, WindowBatch};
use crate::plants::{PlantParams, Scaler, TrajectoryDataset};

/// Lifted pair `s_{k+1} = A s_k + B u_{k+1}` with `s = [z; ŷ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    n_z: usize,
    n_y: usize,
}

impl CompactModel {
    pub fn n_z(&self) -> usize {
        self.n_z
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn n_s(&self) -> usize {
        self.n_z + self.n_y
    }

    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }

    /// `S` picking the output block of `s`.
    pub fn selector(&self) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.n_y, self.n_s());
        for i in 0..self.n_y {
            s[(i, self.n_z + i)] = 1.0;
        }
        s
    }

    pub fn output(&self, s: &DVector<f64>) -> DVector<f64> {
        s.rows(self.n_z, self.n_y).into_owned()
    }

    pub fn step(&self, s: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * s + &self.b * u
    }

    /// `[z; C_z z]`.
    pub fn initial_state(&self, z: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let mut s = DVector::zeros(self.n_s());
        s.rows_mut(0, self.n_z).copy_from(z);
        s.rows_mut(self.n_z, self.n_y).copy_from(y);
        s
    }
}

pub fn lift(params: &NssmParams) -> CompactModel {
    let (az, bz, cz) = (params.a_z(), params.b_z(), params.c_z());
    let (n_z, n_y, n_u) = (az.nrows(), cz.nrows(), bz.ncols());
    let n_s = n_z + n_y;
    let mut a = DMatrix::zeros(n_s, n_s);
    a.view_mut((0, 0), (n_z, n_z)).copy_from(&az);
    a.view_mut((n_z, 0), (n_y, n_z)).copy_from(&(&cz * &az));
    let mut b = DMatrix::zeros(n_s, n_u);
    b.view_mut((0, 0), (n_z, n_u)).copy_from(&bz);
    b.view_mut((n_z, 0), (n_y, n_u)).copy_from(&(&cz * &bz));
    CompactModel { a, b, n_z, n_y }
}

/// Relative change below which the Riccati map no longer moves `P` in floating point.
pub const DARE_ROUNDOFF: f64 = 1e-12;

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

fn riccati_map(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let pb = p * b;
    let s = r + b.transpose() * &pb;
    let chol = s
        .cholesky()
        .ok_or_else(|| Error::Config("R + BᵀPB is not positive definite".into()))?;
    let k = chol.solve(&pb.transpose());
    let inner = p - &pb * k;
    let mut next = a.transpose() * inner * a + q;
    next = (&next + next.transpose()) * 0.5;
    Ok(next)
}

/// Max-norm residual of the Riccati equation at `p`.
pub fn dare_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<f64> {
    Ok(max_abs(&(riccati_map(a, b, q, r, p)? - p)))
}

/// Fixed-point Riccati iteration from `P_0 = Q_s`. Stops once the
/// per-iteration change (max norm) is below `tol`, or below the roundoff
/// floor `DARE_ROUNDOFF · max|P|` for very large solutions.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q_s: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || q_s.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols()) {
        return Err(Error::Shape("DARE matrices have inconsistent sizes".into()));
    }
    let mut p = q_s.clone();
    let mut change = f64::INFINITY;
    for _ in 0..max_iters {
        let next = riccati_map(a, b, q_s, r, &p)?;
        change = max_abs(&(&next - &p));
        p = next;
        if !change.is_finite() {
            break;
        }
        if change <= tol.max(DARE_ROUNDOFF * max_abs(&p)) {
            return Ok(p);
        }
    }
    Err(Error::DareNotConverged {
        iterations: max_iters,
        change,
    })
}

/// Output reference, one row per sample. Reads past the end hold the last row.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    n_y: usize,
    rows: Vec<f64>,
}

impl Reference {
    pub fn new(n_y: usize, rows: Vec<f64>) -> Result<Self> {
        if n_y == 0 || rows.is_empty() || !rows.len().is_multiple_of(n_y) {
            return Err(Error::Shape(format!("reference needs a nonempty multiple of {n_y} values")));
        }
        Ok(Reference { n_y, rows })
    }

    pub fn constant(value: &[f64], len: usize) -> Self {
        Reference {
            n_y: value.len(),
            rows: value.repeat(len.max(1)),
        }
    }

    /// `radius·(cos(ω₀ t dt), sin(ω₀ t dt))`; negative `angular_speed` runs clockwise.
    pub fn circle(radius: f64, angular_speed: f64, dt: f64, len: usize) -> Self {
        let rows = (0..len.max(1))
            .flat_map(|t| {
                let phase = angular_speed * t as f64 * dt;
                [radius * phase.cos(), radius * phase.sin()]
            })
            .collect();
        Reference { n_y: 2, rows }
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.n_y
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn at(&self, t: usize) -> &[f64] {
        let k = t.min(self.len() - 1);
        &self.rows[k * self.n_y..(k + 1) * self.n_y]
    }

    /// Rows `start..start+n`, `[step][channel]`.
    pub fn window(&self, start: usize, n: usize) -> Vec<f64> {
        (start..start + n).flat_map(|t| self.at(t).to_vec()).collect()
    }
}

/// Tracking MPC settings: weights act on standardized signals, the input box
/// is given in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcSpec {
    pub horizon: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub qp_iters: usize,
    pub qp_tol: f64,
    pub dare_tol: f64,
    pub dare_max_iters: usize,
}

/// Serializable scalar form of [`MpcSpec`] with diagonal weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon: usize,
    pub output_weight: Vec<f64>,
    pub input_weight: Vec<f64>,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub qp_iters: usize,
    pub qp_tol: f64,
    pub dare_tol: f64,
    pub dare_max_iters: usize,
}

impl MpcConfig {
    /// `N = 20`, `Q = I`, `R = 0.1 I` and the plant's physical box.
    pub fn for_plant(plant: &PlantParams) -> Self {
        let kind = plant.kind();
        let (u_min, u_max) = plant.input_box();
        MpcConfig {
            horizon: 20,
            output_weight: vec![1.0; kind.n_y()],
            input_weight: vec![0.1; kind.n_u()],
            u_min,
            u_max,
            qp_iters: 500,
            qp_tol: 1e-8,
            dare_tol: 1e-9,
            dare_max_iters: 10_000,
        }
    }

    pub fn spec(&self) -> Result<MpcSpec> {
        let spec = MpcSpec {
            horizon: self.horizon,
            q: DMatrix::from_diagonal(&DVector::from_column_slice(&self.output_weight)),
            r: DMatrix::from_diagonal(&DVector::from_column_slice(&self.input_weight)),
            u_min: self.u_min.clone(),
            u_max: self.u_max.clone(),
            qp_iters: self.qp_iters,
            qp_tol: self.qp_tol,
            dare_tol: self.dare_tol,
            dare_max_iters: self.dare_max_iters,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl MpcSpec {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("MPC horizon must be at least 1".into()));
        }
        let sym = |m: &DMatrix<f64>| m.is_square() && max_abs(&(m - m.transpose())) <= 1e-12;
        if !sym(&self.q) || !sym(&self.r) {
            return Err(Error::Config("MPC weights must be symmetric".into()));
        }
        if self.q.clone().symmetric_eigenvalues().min() < -1e-12 {
            return Err(Error::Config("output weight Q must be positive semidefinite".into()));
        }
        if self.r.clone().cholesky().is_none() {
            return Err(Error::Config("input weight R must be positive definite".into()));
        }
        if self.u_min.len() != self.r.nrows()
            || self.u_max.len() != self.r.nrows()
            || self.u_min.iter().zip(&self.u_max).any(|(lo, hi)| !(lo < hi))
        {
            return Err(Error::Config("input box must satisfy u_min < u_max per channel".into()));
        }
        if self.qp_iters == 0 || !(self.qp_tol > 0.0) || !(self.dare_tol > 0.0) {
            return Err(Error::Config("solver iteration counts and tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// `½ UᵀHU + fᵀU` subject to `lower ≤ U ≤ upper`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxQp {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

/// Terminal output weight: the output block of the Riccati solution for
/// `Q_s = SᵀQS`. Returns the weight and whether the Riccati iteration failed
/// (in which case `Q` itself is used).
pub fn terminal_weight(model: &CompactModel, q: &DMatrix<f64>, r: &DMatrix<f64>, tol: f64, max_iters: usize) -> Result<(DMatrix<f64>, bool)> {
    let sel = model.selector();
    let q_s = sel.transpose() * q * &sel;
    match solve_dare(&model.a, &model.b, &q_s, r, tol, max_iters) {
        Ok(p_s) => Ok((&sel * p_s * sel.transpose(), false)),
        Err(Error::DareNotConverged { iterations, change }) => {
            log::warn!("Riccati iteration stalled after {iterations} iterations (change {change:e}); using Q as terminal weight");
            Ok((q.clone(), true))
        }
        Err(e) => Err(e),
    }
}

/// Horizon-dependent matrices of the condensed problem. Independent of the
/// current state, previous input and reference, so they are built once per
/// model.
#[derive(Debug, Clone)]
pub struct PredictionMatrices {
    horizon: usize,
    n_u: usize,
    n_y: usize,
    /// Stacked `S A^k`, k = 1..N.
    phi: DMatrix<f64>,
    /// `2 ΓᵀW`.
    gtw2: DMatrix<f64>,
    /// `2 DᵀR̄` restricted to its first block column.
    anchor: DMatrix<f64>,
    hessian: DMatrix<f64>,
    lipschitz: f64,
    pub terminal: DMatrix<f64>,
    pub dare_fallback: bool,
}

impl PredictionMatrices {
    pub fn new(model: &CompactModel, spec: &MpcSpec) -> Result<Self> {
        let (terminal, dare_fallback) = terminal_weight(model, &spec.q, &spec.r, spec.dare_tol, spec.dare_max_iters)?;
        Self::with_terminal(model, spec, terminal, dare_fallback)
    }

    fn with_terminal(model: &CompactModel, spec: &MpcSpec, terminal: DMatrix<f64>, dare_fallback: bool) -> Result<Self> {
        spec.validate()?;
        let (n, m, p, n_s) = (spec.horizon, model.n_y(), model.n_u(), model.n_s());
        if spec.q.nrows() != m || spec.r.nrows() != p {
            return Err(Error::Shape(format!(
                "weights are {}x{} / {}x{} but the model has {m} outputs and {p} inputs",
                spec.q.nrows(),
                spec.q.ncols(),
                spec.r.nrows(),
                spec.r.ncols()
            )));
        }
        let sel = model.selector();
        // S A^j for j = 0..N
        let mut sa = Vec::with_capacity(n + 1);
        sa.push(sel.clone());
        for j in 0..n {
            let next = &sa[j] * &model.a;
            sa.push(next);
        }
        let mut phi = DMatrix::zeros(n * m, n_s);
        let mut gamma = DMatrix::zeros(n * m, n * p);
        for k in 1..=n {
            phi.view_mut(((k - 1) * m, 0), (m, n_s)).copy_from(&sa[k]);
            for j in 0..k {
                gamma
                    .view_mut(((k - 1) * m, j * p), (m, p))
                    .copy_from(&(&sa[k - 1 - j] * &model.b));
            }
        }
        let mut w = DMatrix::zeros(n * m, n * m);
        for k in 0..n {
            let block = if k + 1 == n { &terminal } else { &spec.q };
            w.view_mut((k * m, k * m), (m, m)).copy_from(block);
        }
        let mut rbar = DMatrix::zeros(n * p, n * p);
        let mut d = DMatrix::identity(n * p, n * p);
        for k in 0..n {
            rbar.view_mut((k * p, k * p), (p, p)).copy_from(&spec.r);
            if k > 0 {
                for i in 0..p {
                    d[(k * p + i, (k - 1) * p + i)] = -1.0;
                }
            }
        }
        let gtw2 = gamma.transpose() * &w * 2.0;
        let dtr2 = d.transpose() * &rbar * 2.0;
        let mut hessian = &gtw2 * &gamma + &dtr2 * &d;
        hessian = (&hessian + hessian.transpose()) * 0.5;
        let anchor = dtr2.columns(0, p).into_owned();
        let lipschitz = lipschitz_bound(&hessian);
        Ok(PredictionMatrices {
            horizon: n,
            n_u: p,
            n_y: m,
            phi,
            gtw2,
            anchor,
            hessian,
            lipschitz,
            terminal,
            dare_fallback,
        })
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    /// Linear term for state `s0`, previous input and reference rows `t+1..t+N`.
    pub fn linear_term(&self, s0: &DVector<f64>, u_prev: &[f64], reference: &[f64]) -> Result<DVector<f64>> {
        if u_prev.len() != self.n_u || reference.len() != self.horizon * self.n_y || s0.len() != self.phi.ncols() {
            return Err(Error::Shape("state, previous input or reference window has the wrong size".into()));
        }
        let free = &self.phi * s0 - DVector::from_column_slice(reference);
        Ok(&self.gtw2 * free - &self.anchor * DVector::from_column_slice(u_prev))
    }
}

/// Largest-eigenvalue estimate: power iteration with a 10% margin, capped by
/// the Gershgorin bound.
fn lipschitz_bound(h: &DMatrix<f64>) -> f64 {
    let n = h.nrows();
    let gershgorin = (0..n)
        .map(|i| h.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.1 * i as f64);
    v /= v.norm();
    let mut est = 0.0;
    for _ in 0..100 {
        let hv = h * &v;
        let nrm = hv.norm();
        if nrm == 0.0 {
            break;
        }
        est = v.dot(&hv);
        v = hv / nrm;
    }
    let bound = (1.1 * est).min(gershgorin);
    if bound > 0.0 {
        bound
    } else {
        gershgorin.max(f64::MIN_POSITIVE)
    }
}

/// Condensed QP for one MPC step. `reference` holds rows `t+1..t+N`.
pub fn build_qp(
    model: &CompactModel,
    s0: &DVector<f64>,
    u_prev: &[f64],
    spec: &MpcSpec,
    reference: &[f64],
) -> Result<BoxQp> {
    let pm = PredictionMatrices::new(model, spec)?;
    let n = spec.horizon;
    Ok(BoxQp {
        hessian: pm.hessian.clone(),
        linear: pm.linear_term(s0, u_prev, reference)?,
        lower: DVector::from_iterator(n * spec.u_min.len(), spec.u_min.iter().copied().cycle().take(n * spec.u_min.len())),
        upper: DVector::from_iterator(n * spec.u_max.len(), spec.u_max.iter().copied().cycle().take(n * spec.u_max.len())),
    })
}

/// Direct evaluation of the tracking cost of plan `u` by simulating the
/// lifted model.
pub fn tracking_cost(
    model: &CompactModel,
    s0: &DVector<f64>,
    u_prev: &[f64],
    spec: &MpcSpec,
    terminal: &DMatrix<f64>,
    reference: &[f64],
    u: &[f64],
) -> f64 {
    let (n, m, p) = (spec.horizon, model.n_y(), model.n_u());
    let mut s = s0.clone();
    let mut prev = DVector::from_column_slice(u_prev);
    let mut cost = 0.0;
    for k in 0..n {
        let uk = DVector::from_column_slice(&u[k * p..(k + 1) * p]);
        let du = &uk - &prev;
        cost += (du.transpose() * &spec.r * &du)[(0, 0)];
        s = model.step(&s, &uk);
        let err = model.output(&s) - DVector::from_column_slice(&reference[k * m..(k + 1) * m]);
        let weight = if k + 1 == n { terminal } else { &spec.q };
        cost += (err.transpose() * weight * &err)[(0, 0)];
        prev = uk;
    }
    cost
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub u: DVector<f64>,
    pub iterations: usize,
    pub projected_gradient_norm: f64,
}

fn project(x: &mut DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lower[i], upper[i]);
    }
}

/// Gradient with components that point out of an active bound zeroed.
pub fn projected_gradient(g: &DVector<f64>, x: &DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(g.len(), |i, _| {
        if (x[i] <= lower[i] && g[i] > 0.0) || (x[i] >= upper[i] && g[i] < 0.0) {
            0.0
        } else {
            g[i]
        }
    })
}

/// Accelerated projected gradient with adaptive restart.
pub fn solve_qp_box(qp: &BoxQp, iters: usize, tol: f64, warm_start: Option<&DVector<f64>>) -> QpSolution {
    solve_qp_box_with_step(qp, lipschitz_bound(&qp.hessian), iters, tol, warm_start)
}

fn solve_qp_box_with_step(qp: &BoxQp, lipschitz: f64, iters: usize, tol: f64, warm_start: Option<&DVector<f64>>) -> QpSolution {
    let (h, f) = (&qp.hessian, &qp.linear);
    let mut x = match warm_start {
        Some(w) if w.len() == f.len() => w.clone(),
        _ => DVector::zeros(f.len()),
    };
    project(&mut x, &qp.lower, &qp.upper);
    let step = 1.0 / lipschitz;
    let mut y = x.clone();
    let mut t = 1.0_f64;
    let mut pg_norm = projected_gradient(&(h * &x + f), &x, &qp.lower, &qp.upper).norm();
    let mut it = 0;
    while it < iters && pg_norm > tol {
        it += 1;
        let g = h * &y + f;
        let mut next = &y - g * step;
        project(&mut next, &qp.lower, &qp.upper);
        let grad_next = h * &next + f;
        pg_norm = projected_gradient(&grad_next, &next, &qp.lower, &qp.upper).norm();
        if (&y - &next).dot(&(&next - &x)) > 0.0 {
            t = 1.0;
            y = next.clone();
        } else {
            let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            y = &next + (&next - &x) * ((t - 1.0) / t_next);
            t = t_next;
        }
        x = next;
    }
    QpSolution {
        u: x,
        iterations: it,
        projected_gradient_norm: pg_norm,
    }
}

/// MPC on a fixed NSSM: caches the lifted model and condensed matrices.
#[derive(Debug, Clone)]
pub struct TrackingController {
    params: NssmParams,
    scaler: Scaler,
    model: CompactModel,
    prediction: PredictionMatrices,
    spec: MpcSpec,
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl TrackingController {
    pub fn new(params: &NssmParams, scaler: &Scaler, spec: &MpcSpec) -> Result<Self> {
        let cfg = params.config();
        if scaler.n_u() != cfg.n_u || scaler.n_y() != cfg.n_y {
            return Err(Error::Shape("scaler and model channel counts differ".into()));
        }
        let model = lift(params);
        let prediction = PredictionMatrices::new(&model, spec)?;
        let lo = scaler.scale_u(&spec.u_min);
        let hi = scaler.scale_u(&spec.u_max);
        let n = spec.horizon;
        Ok(TrackingController {
            params: params.clone(),
            scaler: scaler.clone(),
            model,
            prediction,
            spec: spec.clone(),
            lower: DVector::from_iterator(n * lo.len(), lo.iter().copied().cycle().take(n * lo.len())),
            upper: DVector::from_iterator(n * hi.len(), hi.iter().copied().cycle().take(n * hi.len())),
        })
    }

    pub fn dare_fallback(&self) -> bool {
        self.prediction.dare_fallback
    }

    pub fn spec(&self) -> &MpcSpec {
        &self.spec
    }

    /// Plans from a physical-unit history (`[step][channel]`, oldest first,
    /// exactly H rows). Returns the full plan in standardized units.
    pub fn plan(
        &self,
        history_u: &[f64],
        history_y: &[f64],
        u_prev: &[f64],
        reference: &[f64],
        warm_start: Option<&DVector<f64>>,
    ) -> Result<QpSolution> {
        let cfg = self.params.config();
        if history_u.len() < cfg.history * cfg.n_u || history_y.len() < cfg.history * cfg.n_y {
            return Err(Error::DatasetTooShort {
                needed: cfg.history,
                available: (history_u.len() / cfg.n_u).min(history_y.len() / cfg.n_y),
            });
        }
        let hu = self.scaler.scale_u(&history_u[history_u.len() - cfg.history * cfg.n_u..]);
        let hy = self.scaler.scale_y(&history_y[history_y.len() - cfg.history * cfg.n_y..]);
        let z = encode_history(&self.params, &hu, &hy)?;
        let y_last = DVector::from_column_slice(&hy[hy.len() - cfg.n_y..]);
        let s0 = self.model.initial_state(&z, &y_last);
        let f = self
            .prediction
            .linear_term(&s0, &self.scaler.scale_u(u_prev), &self.scaler.scale_y(reference))?;
        let qp = BoxQp {
            hessian: self.prediction.hessian.clone(),
            linear: f,
            lower: self.lower.clone(),
            upper: self.upper.clone(),
        };
        Ok(solve_qp_box_with_step(
            &qp,
            self.prediction.lipschitz,
            self.spec.qp_iters,
            self.spec.qp_tol,
            warm_start,
        ))
    }

    /// First planned input in physical units, clipped to the box.
    pub fn first_input(&self, plan: &QpSolution) -> Vec<f64> {
        let p = self.model.n_u();
        let u = self.scaler.unscale_u(&plan.u.as_slice()[..p]);
        u.iter()
            .enumerate()
            .map(|(i, v)| v.clamp(self.spec.u_min[i], self.spec.u_max[i]))
            .collect()
    }
}

/// One receding-horizon input for the given history and reference rows
/// `t+1..t+N` (physical units).
pub fn mpc_action(
    params: &NssmParams,
    scaler: &Scaler,
    history_u: &[f64],
    history_y: &[f64],
    u_prev: &[f64],
    spec: &MpcSpec,
    reference: &[f64],
) -> Result<Vec<f64>> {
    let ctl = TrackingController::new(params, scaler, spec)?;
    let plan = ctl.plan(history_u, history_y, u_prev, reference, None)?;
    Ok(ctl.first_input(&plan))
}

/// Noise and safety settings of a closed-loop episode.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpisodeOptions {
    /// Std of the zero-mean Gaussian added to each applied input.
    pub explore_std: f64,
    /// Std of the Gaussian added to each measured output, in standardized units.
    pub measurement_std: f64,
    /// When set, the episode ends early (without error) as soon as an output
    /// leaves `±abort_bound` or the simulator diverges; the offending step is
    /// not recorded.
    pub abort_bound: Option<f64>,
}

/// Closed-loop traces in physical units, `[step][channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub n_u: usize,
    pub n_y: usize,
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub reference: Vec<f64>,
    /// `‖y_t − ȳ_t‖` per step.
    pub err: Vec<f64>,
    /// Applied inputs outside the box (always zero by construction).
    pub constraint_violations: usize,
    pub dare_fallback: bool,
    /// Ended early on the safety bound.
    pub aborted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub mean_err: f64,
    pub final_err: f64,
    pub constraint_violations: usize,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.err.len()
    }

    pub fn is_empty(&self) -> bool {
        self.err.is_empty()
    }

    pub fn summary(&self) -> EpisodeSummary {
        let n = self.err.len();
        EpisodeSummary {
            mean_err: if n == 0 { 0.0 } else { self.err.iter().sum::<f64>() / n as f64 },
            final_err: self.err.last().copied().unwrap_or(0.0),
            constraint_violations: self.constraint_violations,
        }
    }

    /// The applied inputs and measured outputs as a single-segment dataset.
    pub fn dataset(&self, plant: Option<PlantParams>) -> Result<TrajectoryDataset> {
        TrajectoryDataset::from_samples(self.n_u, self.n_y, self.u.clone(), self.y.clone(), plant)
    }
}

/// Receding-horizon loop on the true plant starting from state `x0`.
///
/// Before the first step the encoder history is padded with the initial
/// measurement and zero input. At each step the latent state is re-encoded
/// from the measured history, the first planned input (plus exploration
/// noise, clipped to the box) is applied and the new output is measured.
pub fn run_episode<R: Rng + ?Sized>(
    controller: &TrackingController,
    plant: &PlantParams,
    x0: &[f64],
    reference: &Reference,
    episode_len: usize,
    noise: EpisodeOptions,
    rng: &mut R,
) -> Result<Episode> {
    let cfg = controller.params.config().clone();
    let (n_u, n_y, h) = (cfg.n_u, cfg.n_y, cfg.history);
    if reference.n_y() != n_y {
        return Err(Error::Shape("reference width differs from the model output".into()));
    }
    if !(noise.explore_std >= 0.0 && noise.measurement_std >= 0.0) {
        return Err(Error::Config("noise levels must be non-negative".into()));
    }
    let explore = Normal::new(0.0, noise.explore_std).expect("valid std");
    let meas = Normal::new(0.0, noise.measurement_std).expect("valid std");
    let spec = controller.spec();
    let y_scale = &controller.scaler.y_scale;
    let measure = |x: &[f64], rng: &mut R| -> Vec<f64> {
        let mut y = plant.observe(x);
        if noise.measurement_std > 0.0 {
            y.iter_mut().zip(y_scale).for_each(|(v, s)| *v += s * meas.sample(rng));
        }
        y
    };

    let mut x = x0.to_vec();
    let y0 = measure(&x, rng);
    let mut hist_u = vec![0.0; h * n_u];
    let mut hist_y: Vec<f64> = y0.repeat(h);
    let mut u_prev = vec![0.0; n_u];
    let mut warm: Option<DVector<f64>> = None;
    let mut ep = Episode {
        n_u,
        n_y,
        u: Vec::with_capacity(episode_len * n_u),
        y: Vec::with_capacity(episode_len * n_y),
        reference: Vec::with_capacity(episode_len * n_y),
        err: Vec::with_capacity(episode_len),
        constraint_violations: 0,
        dare_fallback: controller.dare_fallback(),
        aborted: false,
    };
    for t in 0..episode_len {
        let plan = controller.plan(&hist_u, &hist_y, &u_prev, &reference.window(t, spec.horizon), warm.as_ref())?;
        let mut u = controller.first_input(&plan);
        if noise.explore_std > 0.0 {
            for (i, v) in u.iter_mut().enumerate() {
                *v = (*v + explore.sample(rng)).clamp(spec.u_min[i], spec.u_max[i]);
            }
        }
        if u.iter().enumerate().any(|(i, v)| *v < spec.u_min[i] || *v > spec.u_max[i]) {
            ep.constraint_violations += 1;
        }
        // shifted plan as the next warm start
        let mut shifted = plan.u.clone();
        let total = shifted.len();
        shifted.as_mut_slice().copy_within(n_u..total, 0);
        warm = Some(shifted);

        x = match plant.step(&x, &u) {
            Ok(next) => next,
            Err(Error::PlantBlowUp { .. }) if noise.abort_bound.is_some() => {
                ep.aborted = true;
                break;
            }
            Err(Error::PlantBlowUp { .. }) => return Err(Error::PlantBlowUp { step: t }),
            Err(e) => return Err(e),
        };
        let y_true = plant.observe(&x);
        if let Some(bound) = noise.abort_bound {
            if y_true.iter().any(|v| v.abs() > bound) {
                ep.aborted = true;
                break;
            }
        }
        let y = if noise.measurement_std > 0.0 { measure(&x, rng) } else { y_true.clone() };
        let target = reference.at(t);
        let err = y_true
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();

        ep.u.extend_from_slice(&u);
        ep.y.extend_from_slice(&y);
        ep.reference.extend_from_slice(target);
        ep.err.push(err);
        hist_u.drain(..n_u);
        hist_u.extend_from_slice(&u);
        hist_y.drain(..n_y);
        hist_y.extend_from_slice(&y);
        u_prev = u;
    }
    Ok(ep)
}

/// Noise-free receding-horizon tracking of `reference` on the true plant.
pub fn receding_horizon_track(
    params: &NssmParams,
    scaler: &Scaler,
    plant: &PlantParams,
    spec: &MpcSpec,
    reference: &Reference,
    x0: &[f64],
    episode_len: usize,
) -> Result<Episode> {
    let ctl = TrackingController::new(params, scaler, spec)?;
    let mut rng = crate::seed::rng_for(0, &[]);
    run_episode(&ctl, plant, x0, reference, episode_len, EpisodeOptions::default(), &mut rng)
}

/// Proximal few-step adaptation of the meta-trained weights to target windows.
pub fn meta_inference(omega_inf: &NssmParams, target: &WindowBatch, gamma: f64, lr: f64, steps: usize) -> Result<NssmParams> {
    if steps == 0 {
        return Ok(omega_inf.clone());
    }
    let obj = NssmObjective::new(omega_inf.config().clone(), target)?;
    let (w, _): (ParamVector, _) = proximal_descent(&obj, omega_inf.weights(), gamma, lr, steps, &[])?;
    omega_inf.with_weights(w)
}
