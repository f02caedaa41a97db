//! Adaptive Dormand–Prince 5(4) integrator with PI step-size control.

use crate::error::{GeoError, Result};

/// Right-hand side of `y' = f(t, y)`.
pub trait OdeSystem {
    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<()>;

    /// Components are grouped for the error norm: the step is accepted only
    /// if every group passes on its own. Defaults to a single group.
    fn group_size(&self, dim: usize) -> usize {
        dim
    }

    /// Called on every accepted state, e.g. to pull it back onto a manifold.
    /// Returns true if the state was modified.
    fn project(&self, _y: &mut [f64]) -> bool {
        false
    }
}

/// Adapts a closure `(t, y, dy)` into an [`OdeSystem`].
pub struct FnSystem<F>(pub F);

impl<F> OdeSystem for FnSystem<F>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        (self.0)(t, y, dy);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Smallest step allowed before giving up.
    pub min_step: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions {
            rtol: 1e-5,
            atol: 1e-7,
            min_step: 1e-10,
            max_steps: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdeSolution {
    pub y: Vec<f64>,
    pub steps: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
}

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Difference between the 5th- and 4th-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const PI_BETA: f64 = 0.04;
const PI_ALPHA: f64 = 0.2 - 0.75 * PI_BETA;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;

fn group_norm(v: &[f64], y0: &[f64], y1: &[f64], opts: &OdeOptions, group: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for ((vg, ag), bg) in v.chunks(group).zip(y0.chunks(group)).zip(y1.chunks(group)) {
        let mut s = 0.0;
        for ((e, a), b) in vg.iter().zip(ag).zip(bg) {
            let sc = opts.atol + opts.rtol * a.abs().max(b.abs());
            s += (e / sc).powi(2);
        }
        worst = worst.max((s / vg.len() as f64).sqrt());
    }
    worst
}

/// Many independent systems of equal dimension whose right-hand sides are
/// cheaper to evaluate together. Each lane keeps its own time and step size.
pub trait BatchSystem {
    /// State dimension of one lane.
    fn dim(&self) -> usize;

    /// Evaluates lane `lanes[j]` at time `ts[j]` with state
    /// `ys[j·dim .. (j+1)·dim]`, writing into the same slice of `dys`.
    fn rhs_batch(&self, lanes: &[usize], ts: &[f64], ys: &[f64], dys: &mut [f64]) -> Result<()>;

    /// Called on every accepted lane state; see [`OdeSystem::project`].
    fn project(&self, _y: &mut [f64]) -> bool {
        false
    }
}

struct Single<'a, S: ?Sized>(&'a S, usize);

impl<S: OdeSystem + ?Sized> BatchSystem for Single<'_, S> {
    fn dim(&self) -> usize {
        self.1
    }

    fn rhs_batch(&self, _lanes: &[usize], ts: &[f64], ys: &[f64], dys: &mut [f64]) -> Result<()> {
        self.0.rhs(ts[0], ys, dys)
    }

    fn project(&self, y: &mut [f64]) -> bool {
        self.0.project(y)
    }
}

/// Integrates from `t0` to `t1` (either direction).
pub fn rk45_solve<S: OdeSystem + ?Sized>(sys: &S, t0: f64, t1: f64, y0: &[f64], opts: &OdeOptions) -> Result<OdeSolution> {
    let n = y0.len();
    if n == 0 || t0 == t1 {
        return Ok(OdeSolution {
            y: y0.to_vec(),
            steps: 0,
            rejected: 0,
            rhs_evals: 0,
        });
    }
    let group = sys.group_size(n).clamp(1, n);
    solve_lanes(&Single(sys, n), group, t0, t1, y0, opts, 1).remove(0)
}

/// Integrates every lane of `y0` (concatenated lane states) from `t0` to
/// `t1`, keeping up to `window` lanes in flight. Each lane follows exactly
/// the step sequence of a solo solve; a failing lane does not affect the
/// others.
pub fn rk45_solve_batch<S: BatchSystem + ?Sized>(
    sys: &S,
    t0: f64,
    t1: f64,
    y0: &[f64],
    opts: &OdeOptions,
    window: usize,
) -> Vec<Result<OdeSolution>> {
    let m = sys.dim();
    if m == 0 || !y0.len().is_multiple_of(m) {
        return vec![Err(GeoError::Input(format!("state length {} is not a multiple of lane size {m}", y0.len())))];
    }
    if t0 == t1 {
        return y0
            .chunks(m)
            .map(|y| {
                Ok(OdeSolution {
                    y: y.to_vec(),
                    steps: 0,
                    rejected: 0,
                    rhs_evals: 0,
                })
            })
            .collect();
    }
    solve_lanes(sys, m, t0, t1, y0, opts, window.max(1))
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phase {
    /// Needs `f(t0, y0)`.
    Start,
    /// Needs `f` at a trial point `h0` ahead, to size the first step.
    Probe(f64),
    /// Needs stage `s` of the current step.
    Stage(usize),
    /// Needs `f` at a freshly projected state.
    Reproject,
}

struct Lane {
    id: usize,
    phase: Phase,
    t: f64,
    h: f64,
    y: Vec<f64>,
    tmp: Vec<f64>,
    k: [Vec<f64>; 7],
    err_old: f64,
    last_rejected: bool,
    last: bool,
    sol: OdeSolution,
}

/// Fixed data of one solve.
struct Ctx<'a> {
    t1: f64,
    dir: f64,
    span: f64,
    group: usize,
    opts: &'a OdeOptions,
}

impl Lane {
    fn new(id: usize, y0: &[f64], t0: f64) -> Lane {
        let m = y0.len();
        Lane {
            id,
            phase: Phase::Start,
            t: t0,
            h: 0.0,
            y: y0.to_vec(),
            tmp: y0.to_vec(),
            k: std::array::from_fn(|_| vec![0.0; m]),
            err_old: 1e-4,
            last_rejected: false,
            last: false,
            sol: OdeSolution {
                y: Vec::new(),
                steps: 0,
                rejected: 0,
                rhs_evals: 0,
            },
        }
    }

    fn stiff(&self) -> GeoError {
        GeoError::Stiffness {
            t: self.t,
            step: self.h,
            accepted: self.sol.steps,
            rejected: self.sol.rejected,
        }
    }

    fn slot(&self) -> usize {
        match self.phase {
            Phase::Start | Phase::Reproject => 0,
            Phase::Probe(_) => 1,
            Phase::Stage(s) => s,
        }
    }

    /// Fills `tmp` with the state to evaluate and returns its time.
    fn request(&mut self, dir: f64) -> f64 {
        match self.phase {
            Phase::Start | Phase::Reproject => {
                self.tmp.copy_from_slice(&self.y);
                self.t
            }
            Phase::Probe(h0) => {
                for (q, v) in self.tmp.iter_mut().enumerate() {
                    *v = self.y[q] + dir * h0 * self.k[0][q];
                }
                self.t + dir * h0
            }
            Phase::Stage(s) => {
                let hs = dir * self.h;
                for q in 0..self.y.len() {
                    let mut acc = self.y[q];
                    for j in 0..s {
                        let a = A[s][j];
                        if a != 0.0 {
                            acc += hs * a * self.k[j][q];
                        }
                    }
                    self.tmp[q] = acc;
                }
                self.t + C[s] * hs
            }
        }
    }

    fn k0_finite(&self) -> Result<()> {
        if self.k[0].iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(GeoError::Numeric(format!("non-finite derivative at t = {}", self.t)))
        }
    }

    /// Prepares the next step; `Ok(true)` once the lane has reached `t1`.
    fn begin_step(&mut self, cx: &Ctx) -> Result<bool> {
        let remaining = (cx.t1 - self.t) * cx.dir;
        if remaining <= 0.0 {
            return Ok(true);
        }
        if self.sol.steps + self.sol.rejected >= cx.opts.max_steps {
            return Err(self.stiff());
        }
        // land exactly on t1 without leaving a sliver step
        self.last = false;
        if self.h >= remaining * (1.0 - 1e-12) {
            self.h = remaining;
            self.last = true;
        }
        if self.h < cx.opts.min_step {
            return Err(self.stiff());
        }
        self.phase = Phase::Stage(1);
        Ok(false)
    }

    /// Consumes the evaluation just stored in `k[slot]`; `Ok(true)` once done.
    fn advance<S: BatchSystem + ?Sized>(&mut self, sys: &S, cx: &Ctx) -> Result<bool> {
        self.sol.rhs_evals += 1;
        let m = self.y.len();
        match self.phase {
            Phase::Start => {
                self.k0_finite()?;
                // initial step: scale of y against the first derivative and its change
                let d0 = rms(&self.y, &self.y, &self.y, cx.opts);
                let d1 = rms(&self.k[0], &self.y, &self.y, cx.opts);
                let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
                self.phase = Phase::Probe(h0.min(cx.span));
                Ok(false)
            }
            Phase::Probe(h0) => {
                let d1 = rms(&self.k[0], &self.y, &self.y, cx.opts);
                for q in 0..m {
                    self.tmp[q] = self.k[1][q] - self.k[0][q];
                }
                let d2 = rms(&self.tmp, &self.y, &self.y, cx.opts) / h0;
                let h1 = if d1.max(d2) <= 1e-15 {
                    (h0 * 1e-3).max(1e-6)
                } else {
                    (0.01 / d1.max(d2)).powf(0.2)
                };
                self.h = (100.0 * h0).min(h1).min(cx.span);
                self.begin_step(cx)
            }
            Phase::Stage(s) if s < 6 => {
                self.phase = Phase::Stage(s + 1);
                Ok(false)
            }
            Phase::Stage(_) => {
                let hs = cx.dir * self.h;
                let err: Vec<f64> = (0..m).map(|q| hs * (0..7).map(|s| E[s] * self.k[s][q]).sum::<f64>()).collect();
                let en = group_norm(&err, &self.y, &self.tmp, cx.opts, cx.group);
                if !en.is_finite() {
                    // blow-up inside the trial step: shrink hard and retry
                    self.sol.rejected += 1;
                    self.h *= FAC_MIN;
                    self.last_rejected = true;
                } else if en <= 1.0 {
                    self.t = if self.last { cx.t1 } else { self.t + hs };
                    std::mem::swap(&mut self.y, &mut self.tmp);
                    self.sol.steps += 1;
                    let mut fac = SAFETY * en.max(1e-10).powf(-PI_ALPHA) * self.err_old.powf(PI_BETA);
                    fac = fac.clamp(FAC_MIN, FAC_MAX);
                    if self.last_rejected {
                        fac = fac.min(1.0);
                    }
                    self.h *= fac;
                    self.err_old = en.max(1e-4);
                    self.last_rejected = false;
                    if sys.project(&mut self.y) {
                        self.phase = Phase::Reproject;
                        return Ok(false);
                    }
                    let (first, rest) = self.k.split_at_mut(1);
                    first[0].copy_from_slice(&rest[5]);
                    self.k0_finite()?;
                } else {
                    self.sol.rejected += 1;
                    self.h *= (SAFETY * en.powf(-0.2)).max(FAC_MIN);
                    self.last_rejected = true;
                }
                self.begin_step(cx)
            }
            Phase::Reproject => {
                self.k0_finite()?;
                self.begin_step(cx)
            }
        }
    }
}

fn rms(v: &[f64], y0: &[f64], y1: &[f64], opts: &OdeOptions) -> f64 {
    group_norm(v, y0, y1, opts, v.len())
}

/// Evaluates the pending requests of `lanes[sel]`. If the batch fails, the
/// lanes are retried one by one and the failing ones get their error.
fn eval_lanes<S: BatchSystem + ?Sized>(sys: &S, lanes: &mut [Lane], sel: &[usize], dir: f64) -> Vec<(usize, Result<()>)> {
    let m = sys.dim();
    let mut ids = Vec::with_capacity(sel.len());
    let mut ts = Vec::with_capacity(sel.len());
    let mut ys = Vec::with_capacity(sel.len() * m);
    for &i in sel {
        ts.push(lanes[i].request(dir));
        ids.push(lanes[i].id);
        ys.extend_from_slice(&lanes[i].tmp);
    }
    let mut dys = vec![0.0; ys.len()];
    match sys.rhs_batch(&ids, &ts, &ys, &mut dys) {
        Ok(()) => sel
            .iter()
            .enumerate()
            .map(|(j, &i)| {
                let slot = lanes[i].slot();
                lanes[i].k[slot].copy_from_slice(&dys[j * m..(j + 1) * m]);
                (i, Ok(()))
            })
            .collect(),
        Err(e) if sel.len() == 1 => vec![(sel[0], Err(e))],
        Err(_) => sel.iter().flat_map(|&i| eval_lanes(sys, lanes, &[i], dir)).collect(),
    }
}

fn solve_lanes<S: BatchSystem + ?Sized>(
    sys: &S,
    group: usize,
    t0: f64,
    t1: f64,
    y0: &[f64],
    opts: &OdeOptions,
    window: usize,
) -> Vec<Result<OdeSolution>> {
    let m = sys.dim();
    let cx = Ctx {
        t1,
        dir: (t1 - t0).signum(),
        span: (t1 - t0).abs(),
        group,
        opts,
    };
    let n = y0.len() / m;
    let mut out: Vec<Option<Result<OdeSolution>>> = (0..n).map(|_| None).collect();
    let mut next = 0;
    let mut lanes: Vec<Lane> = Vec::with_capacity(window.min(n));
    loop {
        // refill the window so every batch stays full
        while lanes.len() < window && next < n {
            lanes.push(Lane::new(next, &y0[next * m..(next + 1) * m], t0));
            next += 1;
        }
        if lanes.is_empty() {
            break;
        }
        let sel: Vec<usize> = (0..lanes.len()).collect();
        let mut finished = Vec::new();
        for (i, r) in eval_lanes(sys, &mut lanes, &sel, cx.dir) {
            let r = r.and_then(|()| lanes[i].advance(sys, &cx));
            match r {
                Ok(false) => {}
                Ok(true) => finished.push((i, Ok(()))),
                Err(e) => finished.push((i, Err(e))),
            }
        }
        finished.sort_by_key(|(i, _)| std::cmp::Reverse(*i));
        for (i, r) in finished {
            let l = lanes.swap_remove(i);
            out[l.id] = Some(r.map(|()| OdeSolution { y: l.y, ..l.sol }));
        }
    }
    out.into_iter().map(|r| r.expect("every lane finishes")).collect()
}
