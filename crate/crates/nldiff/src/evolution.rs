//! Time integration of the masked nonlocal equation `u_t = Lu - X_H (J*u)`,
//! the Picard fixed-point form, a dense matrix-exponential oracle, and the
//! order/contraction/comparison harnesses.

use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{NldError, Result};
use crate::expm::expm;
use crate::kernel::{assemble_dense, convolve_into, DiscreteKernel};
use crate::lattice::{integrate, weighted_mass, DomainMask, Field, NeumaierSum, NodeClass};

/// RK4 stability bound for |eigenvalues| <= 2 (the masked generator has
/// ||A|| <= 2 because ||K|| <= 1).
pub const RK4_DT_BOUND: f64 = 2.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integrator {
    /// Classical 4-stage Runge-Kutta on the masked generator (default).
    Rk4,
    /// Exponential-Euler step `u <- e^{-dt} u + (1 - e^{-dt}) J*u`; preserves
    /// nonnegativity and pointwise order exactly.
    ExpEuler,
}

impl Integrator {
    pub fn parse(s: &str) -> Result<Integrator> {
        match s {
            "rk4" => Ok(Integrator::Rk4),
            "expeuler" => Ok(Integrator::ExpEuler),
            other => Err(NldError::Config(format!(
                "unknown evolution.integrator `{other}` (expected rk4 or expeuler)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Integrator::Rk4 => "rk4",
            Integrator::ExpEuler => "expeuler",
        }
    }
}

/// Evolving state: the field, its clock, and shared geometry/kernel handles.
#[derive(Debug, Clone)]
pub struct SimState {
    pub u: Field,
    pub time: f64,
    pub step_count: usize,
    pub mask: Arc<DomainMask>,
    pub kernel: Arc<DiscreteKernel>,
}

impl SimState {
    pub fn new(u0: Field, mask: &Arc<DomainMask>, kernel: &Arc<DiscreteKernel>) -> SimState {
        let mut u = u0;
        mask.zero_holes(&mut u);
        SimState {
            u,
            time: 0.0,
            step_count: 0,
            mask: Arc::clone(mask),
            kernel: Arc::clone(kernel),
        }
    }
}

/// Scratch buffers reused across steps.
struct Stepper {
    conv: Field,
    k1: Field,
    k2: Field,
    k3: Field,
    stage: Field,
}

impl Stepper {
    fn new(grid: &Arc<crate::lattice::Grid>) -> Stepper {
        Stepper {
            conv: Field::zeros(grid),
            k1: Field::zeros(grid),
            k2: Field::zeros(grid),
            k3: Field::zeros(grid),
            stage: Field::zeros(grid),
        }
    }
}

/// `out = mask o (J*u - u)`: the masked generator, zero on hole nodes.
fn apply_masked_generator(
    dk: &DiscreteKernel,
    mask: &DomainMask,
    u: &Field,
    conv: &mut Field,
    out: &mut Field,
) -> Result<()> {
    convolve_into(dk, u, conv)?;
    for i in 0..u.values.len() {
        out.values[i] = if mask.class[i] == NodeClass::Hole {
            0.0
        } else {
            conv.values[i] - u.values[i]
        };
    }
    Ok(())
}

fn step_expeuler_with(state: &mut SimState, dt: f64, scratch: &mut Stepper) -> Result<()> {
    if !(dt > 0.0) {
        return Err(NldError::Config(format!("dt must be positive (got {dt})")));
    }
    let a = (-dt).exp();
    let b = 1.0 - a;
    convolve_into(&state.kernel, &state.u, &mut scratch.conv)?;
    // a*u + b*Ku termwise: monotone in u and exactly nonnegative for
    // nonnegative input.
    for i in 0..state.u.values.len() {
        state.u.values[i] = if state.mask.class[i] == NodeClass::Hole {
            0.0
        } else {
            a * state.u.values[i] + b * scratch.conv.values[i]
        };
    }
    state.time += dt;
    state.step_count += 1;
    Ok(())
}

fn step_rk4_impl(state: &mut SimState, dt: f64, s: &mut Stepper, k4: &mut Field) -> Result<()> {
    if !(dt > 0.0 && dt <= RK4_DT_BOUND) {
        return Err(NldError::Config(format!(
            "rk4 dt must lie in (0, {RK4_DT_BOUND}] (got {dt})"
        )));
    }
    let mask = Arc::clone(&state.mask);
    let dk = Arc::clone(&state.kernel);
    let n = state.u.values.len();

    apply_masked_generator(&dk, &mask, &state.u, &mut s.conv, &mut s.k1)?;
    for i in 0..n {
        s.stage.values[i] = state.u.values[i] + 0.5 * dt * s.k1.values[i];
    }
    apply_masked_generator(&dk, &mask, &s.stage, &mut s.conv, &mut s.k2)?;
    for i in 0..n {
        s.stage.values[i] = state.u.values[i] + 0.5 * dt * s.k2.values[i];
    }
    apply_masked_generator(&dk, &mask, &s.stage, &mut s.conv, &mut s.k3)?;
    for i in 0..n {
        s.stage.values[i] = state.u.values[i] + dt * s.k3.values[i];
    }
    apply_masked_generator(&dk, &mask, &s.stage, &mut s.conv, k4)?;
    let w = dt / 6.0;
    for i in 0..n {
        let incr =
            w * (s.k1.values[i] + 2.0 * s.k2.values[i] + 2.0 * s.k3.values[i] + k4.values[i]);
        state.u.values[i] = if mask.class[i] == NodeClass::Hole {
            0.0
        } else {
            state.u.values[i] + incr
        };
    }
    state.time += dt;
    state.step_count += 1;
    Ok(())
}

/// One exponential-Euler step (left-endpoint discretization of the
/// exponential integral form). Positivity-preserving and order-preserving
/// exactly.
pub fn step_exponential_euler(state: &mut SimState, dt: f64) -> Result<()> {
    let grid = state.u.grid.clone();
    let mut scratch = Stepper::new(&grid);
    step_expeuler_with(state, dt, &mut scratch)
}

/// One classical RK4 step on the masked generator.
pub fn step_rk4(state: &mut SimState, dt: f64) -> Result<()> {
    let grid = state.u.grid.clone();
    let mut scratch = Stepper::new(&grid);
    let mut k4 = Field::zeros(&grid);
    step_rk4_impl(state, dt, &mut scratch, &mut k4)
}

/// Exact semigroup `e^{tA} u0` of the semi-discrete system via the dense
/// matrix exponential. Oracle only; capped at `cap` nodes.
pub fn exact_oracle(
    u0: &Field,
    dk: &DiscreteKernel,
    mask: &DomainMask,
    t: f64,
    cap: usize,
) -> Result<Field> {
    if t < 0.0 {
        return Err(NldError::Domain(format!(
            "oracle time must be >= 0 (got {t})"
        )));
    }
    let a = assemble_dense(dk, mask, cap)?;
    let e = expm(&a.scale(t));
    let v = DVector::from_column_slice(&u0.values);
    let out = e * v;
    let mut f = Field::zeros(&u0.grid);
    f.values.copy_from_slice(out.as_slice());
    f.time_tag = Some(t);
    Ok(f)
}

/// Result of the Picard fixed-point iteration on the integral form.
#[derive(Debug, Clone)]
pub struct PicardResult {
    /// Final iterate sampled at `j * t0 / substeps`, j = 0..=substeps.
    pub trajectory: Vec<Field>,
    /// Successive-difference norms `max_j || U^{m+1}(t_j) - U^m(t_j) ||_L1`.
    pub diffs: Vec<f64>,
}

/// Iterate the integral-form operator from the constant-in-time initial
/// guess, discretizing the time integral with the trapezoid rule.
pub fn picard_iterate(
    u0: &Field,
    dk: &DiscreteKernel,
    mask: &DomainMask,
    t0: f64,
    iterations: usize,
    substeps: usize,
) -> Result<PicardResult> {
    if !(t0 > 0.0 && t0 < 0.5) {
        return Err(NldError::Domain(format!(
            "the fixed-point operator is a contraction only for horizons below 1/2 (got {t0})"
        )));
    }
    if substeps == 0 {
        return Err(NldError::Config("picard substeps must be >= 1".into()));
    }
    let grid = &u0.grid;
    let m = substeps;
    let dt = t0 / m as f64;
    let vol = grid.cell_volume();

    let mut base = u0.clone();
    mask.zero_holes(&mut base);

    let mut current: Vec<Field> = vec![base.clone(); m + 1];
    let mut diffs = Vec::with_capacity(iterations);
    let mut conv = Field::zeros(grid);
    let mut gen: Vec<Field> = vec![Field::zeros(grid); m + 1];

    for _ in 0..iterations {
        // W_j = (K - I) U(t_j); the mask enters through the clamp to zero
        // on H applied to each new iterate.
        for j in 0..=m {
            convolve_into(dk, &current[j], &mut conv)?;
            for i in 0..gen[j].values.len() {
                gen[j].values[i] = conv.values[i] - current[j].values[i];
            }
        }
        let mut next: Vec<Field> = Vec::with_capacity(m + 1);
        let mut running = Field::zeros(grid); // cumulative trapezoid of W
        next.push(base.clone());
        for j in 1..=m {
            for i in 0..running.values.len() {
                running.values[i] += 0.5 * dt * (gen[j - 1].values[i] + gen[j].values[i]);
            }
            let mut f = Field::zeros(grid);
            for i in 0..f.values.len() {
                f.values[i] = base.values[i] + running.values[i];
            }
            mask.zero_holes(&mut f);
            f.time_tag = Some(j as f64 * dt);
            next.push(f);
        }
        // Successive-difference norm: max over time of the discrete L1.
        let mut worst = 0.0f64;
        for j in 0..=m {
            let mut s = NeumaierSum::new();
            for (a, b) in next[j].values.iter().zip(&current[j].values) {
                s.add((a - b).abs());
            }
            worst = worst.max(s.value() * vol);
        }
        diffs.push(worst);
        current = next;
    }
    Ok(PicardResult {
        trajectory: current,
        diffs,
    })
}

/// One row of the metrics record.
#[derive(Debug, Clone, Copy)]
pub struct MetricsRow {
    pub t: f64,
    pub mass: f64,
    pub weighted_mass: Option<f64>,
    pub sup_u: f64,
    pub min_u: f64,
    pub pad_mass: f64,
}

/// Time-indexed record of integral quantities; `t` strictly increasing.
#[derive(Debug, Clone, Default)]
pub struct MetricsSeries {
    pub rows: Vec<MetricsRow>,
}

impl MetricsSeries {
    fn record(&mut self, state: &SimState, phi: Option<&Field>) -> Result<()> {
        let wm = match phi {
            Some(p) => Some(weighted_mass(&state.u, p)?),
            None => None,
        };
        self.rows.push(MetricsRow {
            t: state.time,
            mass: integrate(&state.u),
            weighted_mass: wm,
            sup_u: state.u.max(),
            min_u: state.u.min(),
            pad_mass: state.mask.pad_mass(&state.u),
        });
        Ok(())
    }
}

/// Everything `run` needs beyond the state itself.
pub struct RunSetup<'a> {
    pub integrator: Integrator,
    pub dt: f64,
    pub tmax: f64,
    /// Geometric spacing of metric records (t_{k+1} = ratio * t_k).
    pub metric_ratio: f64,
    /// Times at which the field is snapshotted (should be multiples of dt).
    pub snapshot_times: &'a [f64],
    /// Stationary profile for the conserved weighted mass, when available.
    pub phi: Option<&'a Field>,
}

impl Default for RunSetup<'_> {
    fn default() -> Self {
        RunSetup {
            integrator: Integrator::Rk4,
            dt: 0.25,
            tmax: 100.0,
            metric_ratio: 2f64.powf(0.25),
            snapshot_times: &[],
            phi: None,
        }
    }
}

/// Advance the state to `tmax`, recording metrics on a geometric-in-t
/// schedule and snapshotting at the requested times.
pub fn run(mut state: SimState, setup: &RunSetup) -> Result<(SimState, MetricsSeries, Vec<Field>)> {
    if state.u.min() < 0.0 {
        return Err(NldError::Data("initial data must be nonnegative".into()));
    }
    if !state.u.all_finite() {
        return Err(NldError::Data("initial data must be finite".into()));
    }
    let grid = state.u.grid.clone();
    let mut scratch = Stepper::new(&grid);
    let mut k4 = Field::zeros(&grid);
    let mut metrics = MetricsSeries::default();
    let mut snapshots = Vec::new();
    metrics.record(&state, setup.phi)?;

    let mut snap_times: Vec<f64> = setup.snapshot_times.to_vec();
    snap_times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut snap_idx = 0usize;
    while snap_idx < snap_times.len() && snap_times[snap_idx] <= 0.0 {
        let mut f = state.u.clone();
        f.time_tag = Some(state.time);
        snapshots.push(f);
        snap_idx += 1;
    }

    let mut next_metric = setup.dt;
    let eps = 1e-9 * setup.dt;
    while state.time < setup.tmax - eps {
        match setup.integrator {
            Integrator::Rk4 => step_rk4_impl(&mut state, setup.dt, &mut scratch, &mut k4)?,
            Integrator::ExpEuler => step_expeuler_with(&mut state, setup.dt, &mut scratch)?,
        }
        if !state.u.values.iter().all(|v| v.is_finite()) {
            return Err(NldError::Numerical(format!(
                "NaN/Inf detected at t = {:.6}; aborted after step {} (snapshots written so \
                 far remain the last good state)",
                state.time, state.step_count
            )));
        }
        if state.time >= next_metric - eps || state.time >= setup.tmax - eps {
            metrics.record(&state, setup.phi)?;
            while next_metric <= state.time + eps {
                next_metric *= setup.metric_ratio;
            }
        }
        if snap_idx < snap_times.len() && state.time >= snap_times[snap_idx] - 0.5 * setup.dt {
            let mut f = state.u.clone();
            f.time_tag = Some(state.time);
            snapshots.push(f);
            snap_idx += 1;
        }
    }
    Ok((state, metrics, snapshots))
}

/// Co-evolve two states and record `Int (u_a - u_b)_+` after every step.
/// The discrete analogue of the T-contraction property says the series is
/// nonincreasing.
pub fn check_tcontraction(
    u0_a: &Field,
    u0_b: &Field,
    dk: &Arc<DiscreteKernel>,
    mask: &Arc<DomainMask>,
    integrator: Integrator,
    dt: f64,
    steps: usize,
) -> Result<Vec<f64>> {
    u0_a.same_grid(u0_b)?;
    let grid = u0_a.grid.clone();
    let mut a = SimState::new(u0_a.clone(), mask, dk);
    let mut b = SimState::new(u0_b.clone(), mask, dk);
    let mut sa = Stepper::new(&grid);
    let mut sb = Stepper::new(&grid);
    let mut k4 = Field::zeros(&grid);
    let vol = grid.cell_volume();
    let pos_part = |x: &SimState, y: &SimState| -> f64 {
        let mut s = NeumaierSum::new();
        for (p, q) in x.u.values.iter().zip(&y.u.values) {
            s.add((p - q).max(0.0));
        }
        s.value() * vol
    };
    let mut series = Vec::with_capacity(steps + 1);
    series.push(pos_part(&a, &b));
    for _ in 0..steps {
        match integrator {
            Integrator::Rk4 => {
                step_rk4_impl(&mut a, dt, &mut sa, &mut k4)?;
                step_rk4_impl(&mut b, dt, &mut sb, &mut k4)?;
            }
            Integrator::ExpEuler => {
                step_expeuler_with(&mut a, dt, &mut sa)?;
                step_expeuler_with(&mut b, dt, &mut sb)?;
            }
        }
        series.push(pos_part(&a, &b));
    }
    Ok(series)
}

/// Co-evolve an ordered pair and report whether the pointwise order held
/// after every step (exactly for exponential-Euler, within 1e-12 * sup for
/// RK4).
pub fn check_comparison(
    sub0: &Field,
    super0: &Field,
    dk: &Arc<DiscreteKernel>,
    mask: &Arc<DomainMask>,
    integrator: Integrator,
    dt: f64,
    steps: usize,
) -> Result<Vec<bool>> {
    sub0.same_grid(super0)?;
    for (a, b) in sub0.values.iter().zip(&super0.values) {
        if a > b {
            return Err(NldError::Data(
                "check_comparison requires sub0 <= super0 everywhere".into(),
            ));
        }
    }
    let grid = sub0.grid.clone();
    let tol = match integrator {
        Integrator::ExpEuler => 0.0,
        Integrator::Rk4 => 1e-12 * super0.sup_norm().max(1.0),
    };
    let mut lo = SimState::new(sub0.clone(), mask, dk);
    let mut hi = SimState::new(super0.clone(), mask, dk);
    let mut sl = Stepper::new(&grid);
    let mut sh = Stepper::new(&grid);
    let mut k4 = Field::zeros(&grid);
    let mut ok = Vec::with_capacity(steps);
    for _ in 0..steps {
        match integrator {
            Integrator::Rk4 => {
                step_rk4_impl(&mut lo, dt, &mut sl, &mut k4)?;
                step_rk4_impl(&mut hi, dt, &mut sh, &mut k4)?;
            }
            Integrator::ExpEuler => {
                step_expeuler_with(&mut lo, dt, &mut sl)?;
                step_expeuler_with(&mut hi, dt, &mut sh)?;
            }
        }
        ok.push(
            lo.u.values
                .iter()
                .zip(&hi.u.values)
                .all(|(a, b)| *a <= b + tol),
        );
    }
    Ok(ok)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{discretize, make_kernel, KernelFamily, ORACLE_NODE_CAP};
    use crate::lattice::Grid;
    use rand::{Rng, SeedableRng};

    /// Small oracle-scale setup: an 8^3 grid with a one-node hole.
    fn oracle_setup() -> (Arc<Grid>, Arc<DiscreteKernel>, Arc<DomainMask>) {
        let grid = Arc::new(Grid::custom(3, 8, 1.0).unwrap());
        // h = 2/7 ~ 0.2857; kernel radius 0.6 keeps h < r/2.
        let spec = make_kernel(KernelFamily::SmoothBump, 0.6, 3).unwrap();
        let dk = Arc::new(discretize(&spec, &grid).unwrap());
        let hole_center = [grid.axis_coord(4), grid.axis_coord(4), grid.axis_coord(4)];
        let mask = Arc::new(DomainMask::from_classes(&grid, |x| {
            let d2: f64 = x
                .iter()
                .zip(&hole_center)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d2 < 0.01 {
                NodeClass::Hole
            } else {
                NodeClass::Exterior
            }
        }));
        assert_eq!(mask.count(NodeClass::Hole), 1);
        (grid, dk, mask)
    }

    fn bump_u0(grid: &Arc<Grid>, mask: &DomainMask) -> Field {
        let mut f = Field::from_fn(grid, |x| {
            let r2: f64 = x.iter().map(|v| (v + 0.35) * (v + 0.35)).sum();
            (-8.0 * r2).exp()
        });
        mask.zero_holes(&mut f);
        f
    }

    #[test]
    fn expeuler_keeps_constants_without_holes() {
        let grid = Arc::new(Grid::custom(3, 15, 1.6).unwrap());
        let spec = make_kernel(KernelFamily::SmoothBump, 0.5, 3).unwrap();
        let dk = Arc::new(discretize(&spec, &grid).unwrap());
        let mask = Arc::new(DomainMask::from_classes(&grid, |_| NodeClass::Exterior));
        let mut st = SimState::new(Field::constant(&grid, 0.8), &mask, &dk);
        let steps = 3;
        for _ in 0..steps {
            step_exponential_euler(&mut st, 0.25).unwrap();
        }
        // The constant survives wherever the boundary deficit has not
        // propagated: reach * steps layers in from the faces.
        let quiet = dk.reach() * steps;
        let p = grid.points_per_axis();
        assert!(2 * quiet < p, "test geometry too small");
        for i in quiet..p - quiet {
            let v = st.u.values[grid.flatten(&[i, 7, 7])];
            assert!(
                (v - 0.8).abs() <= steps as f64 * 4.0 * f64::EPSILON,
                "drifted to {v}"
            );
        }
    }

    #[test]
    fn expeuler_positivity_exact() {
        let (grid, dk, mask) = oracle_setup();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut u0 = Field::zeros(&grid);
        for v in u0.values.iter_mut() {
            *v = rng.gen::<f64>();
        }
        mask.zero_holes(&mut u0);
        let mut st = SimState::new(u0, &mask, &dk);
        for _ in 0..60 {
            step_exponential_euler(&mut st, 0.3).unwrap();
            assert!(st.u.min() >= 0.0, "negative value after step");
        }
    }

    #[test]
    fn zero_data_stays_zero() {
        let (grid, dk, mask) = oracle_setup();
        let mut st = SimState::new(Field::zeros(&grid), &mask, &dk);
        for _ in 0..10 {
            step_rk4(&mut st, 0.25).unwrap();
        }
        assert_eq!(st.u.sup_norm(), 0.0);
    }

    #[test]
    fn rk4_rejects_unstable_dt() {
        let (grid, dk, mask) = oracle_setup();
        let mut st = SimState::new(Field::zeros(&grid), &mask, &dk);
        assert!(matches!(step_rk4(&mut st, 3.0), Err(NldError::Config(_))));
    }

    fn sup_err_vs_oracle(integrator: Integrator, dt: f64, t: f64) -> f64 {
        let (grid, dk, mask) = oracle_setup();
        let u0 = bump_u0(&grid, &mask);
        let exact = exact_oracle(&u0, &dk, &mask, t, ORACLE_NODE_CAP).unwrap();
        let mut st = SimState::new(u0, &mask, &dk);
        let steps = (t / dt).round() as usize;
        let mut scratch = Stepper::new(&grid);
        let mut k4 = Field::zeros(&grid);
        for _ in 0..steps {
            match integrator {
                Integrator::Rk4 => step_rk4_impl(&mut st, dt, &mut scratch, &mut k4).unwrap(),
                Integrator::ExpEuler => step_expeuler_with(&mut st, dt, &mut scratch).unwrap(),
            }
        }
        let mut worst = 0.0f64;
        for (a, b) in st.u.values.iter().zip(&exact.values) {
            worst = worst.max((a - b).abs());
        }
        worst / exact.sup_norm()
    }

    #[test]
    fn expeuler_first_order_against_oracle() {
        let e1 = sup_err_vs_oracle(Integrator::ExpEuler, 0.05, 1.0);
        let e2 = sup_err_vs_oracle(Integrator::ExpEuler, 0.025, 1.0);
        let ratio = e1 / e2;
        assert!(
            (1.6..=2.4).contains(&ratio),
            "first-order ratio {ratio} (errors {e1:.3e}, {e2:.3e})"
        );
    }

    #[test]
    fn rk4_fourth_order_against_oracle() {
        let e1 = sup_err_vs_oracle(Integrator::Rk4, 0.2, 1.0);
        let e2 = sup_err_vs_oracle(Integrator::Rk4, 0.1, 1.0);
        let ratio = e1 / e2;
        assert!(
            (12.0..=20.0).contains(&ratio),
            "fourth-order ratio {ratio} (errors {e1:.3e}, {e2:.3e})"
        );
    }

    #[test]
    fn oracle_identity_and_semigroup() {
        let (grid, dk, mask) = oracle_setup();
        let u0 = bump_u0(&grid, &mask);
        let id = exact_oracle(&u0, &dk, &mask, 0.0, ORACLE_NODE_CAP).unwrap();
        for (a, b) in id.values.iter().zip(&u0.values) {
            assert!((a - b).abs() < 1e-13);
        }
        let s = exact_oracle(&u0, &dk, &mask, 0.6, ORACLE_NODE_CAP).unwrap();
        let st = exact_oracle(&s, &dk, &mask, 0.9, ORACLE_NODE_CAP).unwrap();
        let direct = exact_oracle(&u0, &dk, &mask, 1.5, ORACLE_NODE_CAP).unwrap();
        let mut worst = 0.0f64;
        for (a, b) in st.values.iter().zip(&direct.values) {
            worst = worst.max((a - b).abs());
        }
        assert!(worst < 1e-11, "semigroup violation {worst}");
    }

    #[test]
    fn rk4_conserves_mass_without_holes() {
        let grid = Arc::new(Grid::custom(3, 23, 2.5).unwrap());
        let spec = make_kernel(KernelFamily::SmoothBump, 0.5, 3).unwrap();
        let dk = Arc::new(discretize(&spec, &grid).unwrap());
        let mask = Arc::new(DomainMask::from_classes(&grid, |_| NodeClass::Exterior));
        // Compactly supported data far from the box edge.
        let u0 = Field::from_fn(&grid, |x| {
            let r2: f64 = x.iter().map(|v| v * v).sum();
            if r2 < 0.25 {
                (1.0 - 4.0 * r2).powi(2)
            } else {
                0.0
            }
        });
        let m0 = integrate(&u0);
        let mut st = SimState::new(u0, &mask, &dk);
        for _ in 0..4 {
            step_rk4(&mut st, 0.25).unwrap();
        }
        let m1 = integrate(&st.u);
        assert!(
            (m1 - m0).abs() / m0 <= 1e-12,
            "mass drift {} over unit time",
            (m1 - m0).abs() / m0
        );
    }

    #[test]
    fn picard_contracts_and_matches_oracle() {
        let (grid, dk, mask) = oracle_setup();
        let u0 = bump_u0(&grid, &mask);
        let t0 = 0.25;
        let res = picard_iterate(&u0, &dk, &mask, t0, 30, 128).unwrap();
        for w in res.diffs.windows(2) {
            if w[0] > 1e-12 {
                let ratio = w[1] / w[0];
                assert!(
                    ratio <= 2.0 * t0 + 0.05,
                    "contraction ratio {ratio} exceeds {}",
                    2.0 * t0 + 0.05
                );
            }
        }
        let exact = exact_oracle(&u0, &dk, &mask, t0, ORACLE_NODE_CAP).unwrap();
        let last = res.trajectory.last().unwrap();
        let mut worst = 0.0f64;
        for (a, b) in last.values.iter().zip(&exact.values) {
            worst = worst.max((a - b).abs());
        }
        assert!(
            worst / exact.sup_norm() < 1e-6,
            "picard fixed point off by {worst:.3e}"
        );
    }

    #[test]
    fn picard_zero_data() {
        let (grid, dk, mask) = oracle_setup();
        let res = picard_iterate(&Field::zeros(&grid), &dk, &mask, 0.25, 5, 16).unwrap();
        assert!(res.diffs.iter().all(|&d| d == 0.0));
        assert!(res.trajectory.iter().all(|f| f.sup_norm() == 0.0));
    }

    #[test]
    fn picard_rejects_long_horizon() {
        let (grid, dk, mask) = oracle_setup();
        assert!(matches!(
            picard_iterate(&Field::zeros(&grid), &dk, &mask, 0.6, 1, 4),
            Err(NldError::Domain(_))
        ));
    }

    #[test]
    fn tcontraction_cases() {
        let (grid, dk, mask) = oracle_setup();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut a = Field::zeros(&grid);
        let mut b = Field::zeros(&grid);
        for i in 0..a.values.len() {
            a.values[i] = rng.gen::<f64>();
            b.values[i] = rng.gen::<f64>();
        }
        mask.zero_holes(&mut a);
        mask.zero_holes(&mut b);
        // Equal data: identically zero.
        let eq = check_tcontraction(&a, &a, &dk, &mask, Integrator::ExpEuler, 0.25, 20).unwrap();
        assert!(eq.iter().all(|&v| v == 0.0));
        // Ordered data: positive part stays zero.
        let mut hi = a.clone();
        for v in hi.values.iter_mut() {
            *v += 0.5;
        }
        mask.zero_holes(&mut hi);
        let ord = check_tcontraction(&a, &hi, &dk, &mask, Integrator::ExpEuler, 0.25, 20).unwrap();
        assert!(ord.iter().all(|&v| v == 0.0));
        // Unordered pair: nonincreasing within the roundoff allowance.
        let series =
            check_tcontraction(&a, &b, &dk, &mask, Integrator::ExpEuler, 0.25, 100).unwrap();
        let tol = 1e-12 * grid.node_count() as f64;
        for w in series.windows(2) {
            assert!(w[1] <= w[0] + tol, "increase {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn comparison_cases() {
        let (grid, dk, mask) = oracle_setup();
        let bump = bump_u0(&grid, &mask);
        // Zero below anything nonnegative.
        let ok = check_comparison(
            &Field::zeros(&grid),
            &bump,
            &dk,
            &mask,
            Integrator::ExpEuler,
            0.25,
            40,
        )
        .unwrap();
        assert!(ok.iter().all(|&b| b));
        // A compact bump below the constant that dominates it.
        let c = Field::constant(&grid, 1.0);
        let ok = check_comparison(&bump, &c, &dk, &mask, Integrator::ExpEuler, 0.25, 40).unwrap();
        assert!(ok.iter().all(|&b| b));
        // Holes absorb, so the solution lies below the hole-free run.
        let free = Arc::new(DomainMask::from_classes(&grid, |_| NodeClass::Exterior));
        let mut lo = SimState::new(bump.clone(), &mask, &dk);
        let mut hi = SimState::new(bump.clone(), &free, &dk);
        for _ in 0..40 {
            step_exponential_euler(&mut lo, 0.25).unwrap();
            step_exponential_euler(&mut hi, 0.25).unwrap();
            for (a, b) in lo.u.values.iter().zip(&hi.u.values) {
                assert!(a <= b);
            }
        }
    }

    #[test]
    fn run_records_monotone_mass_with_holes() {
        let (grid, dk, mask) = oracle_setup();
        let u0 = bump_u0(&grid, &mask);
        let sup0 = u0.max();
        let st = SimState::new(u0, &mask, &dk);
        let (_, metrics, snaps) = run(
            st,
            &RunSetup {
                integrator: Integrator::Rk4,
                dt: 0.25,
                tmax: 10.0,
                snapshot_times: &[5.0],
                ..RunSetup::default()
            },
        )
        .unwrap();
        assert_eq!(snaps.len(), 1);
        for w in metrics.rows.windows(2) {
            assert!(w[1].t > w[0].t);
            assert!(w[1].mass <= w[0].mass + 1e-12);
        }
        for row in &metrics.rows {
            assert!(row.sup_u <= sup0 * (1.0 + 1e-12));
        }
    }

    #[test]
    fn run_rejects_negative_data() {
        let (grid, dk, mask) = oracle_setup();
        let st = SimState::new(Field::constant(&grid, -1.0), &mask, &dk);
        assert!(matches!(
            run(st, &RunSetup::default()),
            Err(NldError::Data(_))
        ));
    }
}
