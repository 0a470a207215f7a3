//! Explicit Runge–Kutta integrators with early halting.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::{CrError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Method {
    /// Classical fourth-order Runge–Kutta with fixed step.
    Rk4,
    /// Dormand–Prince 5(4) with step-size control; samples at accepted steps.
    Adaptive { rtol: f64, atol: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegrationOptions {
    pub step: f64,
    pub method: Method,
}

impl Default for IntegrationOptions {
    fn default() -> Self {
        Self { step: 1e-3, method: Method::Rk4 }
    }
}

impl IntegrationOptions {
    pub fn rk4(step: f64) -> Self {
        Self { step, method: Method::Rk4 }
    }
}

/// Samples of an integrated trajectory; `stop` holds the reason for halting
/// before the end of the span, if any.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub y: Vec<DVector<f64>>,
    pub stop: Option<CrError>,
}

/// Integrate `y' = f(t, y)` over `[0, t_span]`. `guard` is checked on each
/// accepted state.
pub fn integrate<F, G>(f: F, y0: DVector<f64>, t_span: f64, opts: &IntegrationOptions, guard: G) -> Result<Trajectory>
where
    F: Fn(f64, &DVector<f64>) -> Result<DVector<f64>>,
    G: Fn(f64, &DVector<f64>) -> Result<()>,
{
    if !(opts.step > 0.0 && opts.step.is_finite()) {
        return Err(CrError::InvalidArgument(format!("step must be positive, got {}", opts.step)));
    }
    if !(t_span >= 0.0 && t_span.is_finite()) {
        return Err(CrError::InvalidArgument(format!("t_span must be finite and non-negative, got {t_span}")));
    }
    guard(0.0, &y0)?;
    match opts.method {
        Method::Rk4 => Ok(rk4(&f, y0, t_span, opts.step, &guard)),
        Method::Adaptive { rtol, atol } => Ok(dopri(&f, y0, t_span, opts.step, rtol, atol, &guard)),
    }
}

fn rk4<F, G>(f: &F, y0: DVector<f64>, t_span: f64, h: f64, guard: &G) -> Trajectory
where
    F: Fn(f64, &DVector<f64>) -> Result<DVector<f64>>,
    G: Fn(f64, &DVector<f64>) -> Result<()>,
{
    let steps = (t_span / h).round().max(if t_span > 0.0 { 1.0 } else { 0.0 }) as usize;
    let h = if steps > 0 { t_span / steps as f64 } else { h };
    let mut tr = Trajectory { t: vec![0.0], y: vec![y0.clone()], stop: None };
    let mut y = y0;
    for i in 0..steps {
        let t = i as f64 * h;
        let step = || -> Result<DVector<f64>> {
            let k1 = f(t, &y)?;
            let k2 = f(t + h / 2.0, &(&y + &k1 * (h / 2.0)))?;
            let k3 = f(t + h / 2.0, &(&y + &k2 * (h / 2.0)))?;
            let k4 = f(t + h, &(&y + &k3 * h))?;
            Ok(&y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
        };
        let t1 = (i + 1) as f64 * h;
        match step().and_then(|y1| guard(t1, &y1).map(|_| y1)) {
            Ok(y1) => {
                y = y1;
                tr.t.push(t1);
                tr.y.push(y.clone());
            }
            Err(e) => {
                tr.stop = Some(e);
                break;
            }
        }
    }
    tr
}

#[allow(clippy::too_many_arguments)]
fn dopri<F, G>(f: &F, y0: DVector<f64>, t_span: f64, h0: f64, rtol: f64, atol: f64, guard: &G) -> Trajectory
where
    F: Fn(f64, &DVector<f64>) -> Result<DVector<f64>>,
    G: Fn(f64, &DVector<f64>) -> Result<()>,
{
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
    const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
    const B4: [f64; 7] = [
        5179.0 / 57600.0,
        0.0,
        7571.0 / 16695.0,
        393.0 / 640.0,
        -92097.0 / 339200.0,
        187.0 / 2100.0,
        1.0 / 40.0,
    ];
    let mut tr = Trajectory { t: vec![0.0], y: vec![y0.clone()], stop: None };
    let mut y = y0;
    let mut t = 0.0;
    let mut h = h0.min(t_span.max(f64::MIN_POSITIVE));
    let mut rejects = 0usize;
    while t < t_span * (1.0 - 1e-14) {
        h = h.min(t_span - t);
        let attempt = || -> Result<(DVector<f64>, f64)> {
            let mut k: Vec<DVector<f64>> = Vec::with_capacity(7);
            for s in 0..7 {
                let mut ys = y.clone();
                for (j, kj) in k.iter().enumerate() {
                    if A[s][j] != 0.0 {
                        ys += kj * (h * A[s][j]);
                    }
                }
                k.push(f(t + C[s] * h, &ys)?);
            }
            let mut y5 = y.clone();
            let mut y4 = y.clone();
            for s in 0..7 {
                y5 += &k[s] * (h * B5[s]);
                y4 += &k[s] * (h * B4[s]);
            }
            let err = (0..y.len())
                .map(|i| {
                    let sc = atol + rtol * y[i].abs().max(y5[i].abs());
                    ((y5[i] - y4[i]) / sc).powi(2)
                })
                .sum::<f64>();
            Ok((y5, (err / y.len() as f64).sqrt()))
        };
        match attempt() {
            Ok((y5, err)) if err <= 1.0 => {
                if let Err(e) = guard(t + h, &y5) {
                    tr.stop = Some(e);
                    break;
                }
                t += h;
                y = y5;
                tr.t.push(t);
                tr.y.push(y.clone());
                h *= (0.9 * err.max(1e-10).powf(-0.2)).min(5.0);
                rejects = 0;
            }
            Ok((_, err)) => {
                h *= (0.9 * err.powf(-0.2)).max(0.2);
                rejects += 1;
            }
            Err(e) => {
                tr.stop = Some(e);
                break;
            }
        }
        if rejects > 50 || h < 1e-14 {
            tr.stop = Some(CrError::Degenerate("adaptive step size underflow".into()));
            break;
        }
    }
    tr
}
