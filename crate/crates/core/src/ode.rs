//! Dormand–Prince 5(4) integrator with dense output, over fixed-size states.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeOptions {
    pub atol: f64,
    pub rtol: f64,
    /// Initial step; `0.0` selects one automatically.
    pub h_init: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self { atol: 1e-9, rtol: 1e-9, h_init: 0.0, h_min: 1e-14, h_max: f64::INFINITY, max_steps: 200_000 }
    }
}

impl OdeOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self { atol: tol, rtol: tol, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OdeStatus {
    Finished,
    Stopped,
    StepUnderflow,
    MaxSteps,
}

#[derive(Debug, Clone, Copy)]
pub struct OdeResult<const N: usize> {
    pub t: f64,
    pub y: [f64; N],
    pub status: OdeStatus,
    pub steps: usize,
}

/// One accepted step, with the 4th-order continuous extension.
pub struct Step<const N: usize> {
    pub t0: f64,
    pub t1: f64,
    pub y0: [f64; N],
    pub y1: [f64; N],
    r3: [f64; N],
    r4: [f64; N],
    r5: [f64; N],
}

impl<const N: usize> Step<N> {
    /// State at `t ∈ [t0, t1]`.
    pub fn at(&self, t: f64) -> [f64; N] {
        let h = self.t1 - self.t0;
        let th = if h == 0.0 { 1.0 } else { (t - self.t0) / h };
        let th1 = 1.0 - th;
        let mut out = [0.0; N];
        for i in 0..N {
            let dy = self.y1[i] - self.y0[i];
            out[i] = self.y0[i] + th * (dy + th1 * (self.r3[i] + th * (self.r4[i] + th1 * self.r5[i])));
        }
        out
    }
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

fn axpy<const N: usize>(y: &[f64; N], h: f64, terms: &[(f64, &[f64; N])]) -> [f64; N] {
    let mut out = *y;
    for (c, k) in terms {
        for i in 0..N {
            out[i] += h * c * k[i];
        }
    }
    out
}

/// Integrates `y' = f(t, y)` from `t0` towards `t_end` (either direction).
///
/// `on_step` sees every accepted step and may modify the new state in place
/// (e.g. a constraint projection) or stop the integration.
pub fn integrate<const N: usize, F, C>(
    f: F,
    t0: f64,
    y0: [f64; N],
    t_end: f64,
    opts: &OdeOptions,
    mut on_step: C,
) -> OdeResult<N>
where
    F: Fn(f64, &[f64; N]) -> [f64; N],
    C: FnMut(&Step<N>, &mut [f64; N]) -> Control,
{
    let dir = if t_end >= t0 { 1.0 } else { -1.0 };
    let span = (t_end - t0).abs();
    let mut t = t0;
    let mut y = y0;
    if span == 0.0 {
        return OdeResult { t, y, status: OdeStatus::Finished, steps: 0 };
    }
    let scale = |a: &[f64; N], b: &[f64; N], i: usize| opts.atol + opts.rtol * a[i].abs().max(b[i].abs());
    let mut k1 = f(t, &y);
    let mut h = if opts.h_init > 0.0 {
        opts.h_init
    } else {
        let mut d0: f64 = 0.0;
        let mut d1: f64 = 0.0;
        for i in 0..N {
            let sc = scale(&y, &y, i);
            d0 = d0.max((y[i] / sc).abs());
            d1 = d1.max((k1[i] / sc).abs());
        }
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        h0.min(span).min(0.1 * span.max(1e-3))
    };
    h = h.min(opts.h_max);
    let mut steps = 0;
    loop {
        if steps >= opts.max_steps {
            return OdeResult { t, y, status: OdeStatus::MaxSteps, steps };
        }
        let remaining = (t_end - t) * dir;
        if remaining <= 1e-15 * (1.0 + t.abs()) {
            return OdeResult { t, y, status: OdeStatus::Finished, steps };
        }
        let last = h >= remaining;
        if last {
            h = remaining;
        }
        let hs = h * dir;
        let k2 = f(t + C2 * hs, &axpy(&y, hs, &[(A21, &k1)]));
        let k3 = f(t + C3 * hs, &axpy(&y, hs, &[(A31, &k1), (A32, &k2)]));
        let k4 = f(t + C4 * hs, &axpy(&y, hs, &[(A41, &k1), (A42, &k2), (A43, &k3)]));
        let k5 = f(t + C5 * hs, &axpy(&y, hs, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]));
        let k6 = f(t + hs, &axpy(&y, hs, &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]));
        let y1 = axpy(&y, hs, &[(A71, &k1), (A73, &k3), (A74, &k4), (A75, &k5), (A76, &k6)]);
        let k7 = f(t + hs, &y1);
        let mut err: f64 = 0.0;
        let mut finite = true;
        for i in 0..N {
            let e = hs * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            if !y1[i].is_finite() {
                finite = false;
            }
            err = err.max((e / scale(&y, &y1, i)).abs());
        }
        if !finite {
            err = f64::INFINITY;
        }
        if err <= 1.0 {
            let mut r3 = [0.0; N];
            let mut r4 = [0.0; N];
            let mut r5 = [0.0; N];
            for i in 0..N {
                let dy = y1[i] - y[i];
                r3[i] = hs * k1[i] - dy;
                r4[i] = dy - hs * k7[i] - r3[i];
                r5[i] = hs * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]);
            }
            let t1 = if last { t_end } else { t + hs };
            let step = Step { t0: t, t1, y0: y, y1, r3, r4, r5 };
            let mut ynew = y1;
            let ctl = on_step(&step, &mut ynew);
            steps += 1;
            let modified = ynew != y1;
            t = t1;
            y = ynew;
            if ctl == Control::Stop {
                return OdeResult { t, y, status: OdeStatus::Stopped, steps };
            }
            k1 = if modified { f(t, &y) } else { k7 };
            let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h = (h * fac).min(opts.h_max);
        } else {
            let fac = if err.is_finite() { (0.9 * err.powf(-0.2)).clamp(0.1, 0.9) } else { 0.1 };
            h *= fac;
            if h < opts.h_min {
                return OdeResult { t, y, status: OdeStatus::StepUnderflow, steps };
            }
        }
    }
}

/// Integrates to `t_end` without observing intermediate steps.
pub fn solve<const N: usize, F>(f: F, t0: f64, y0: [f64; N], t_end: f64, opts: &OdeOptions) -> OdeResult<N>
where
    F: Fn(f64, &[f64; N]) -> [f64; N],
{
    integrate(f, t0, y0, t_end, opts, |_, _| Control::Continue)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay() {
        let r = solve(|_, y: &[f64; 1]| [-y[0]], 0.0, [1.0], 2.0, &OdeOptions::with_tol(1e-11));
        assert_eq!(r.status, OdeStatus::Finished);
        assert!((r.y[0] - (-2.0f64).exp()).abs() < 1e-10);
    }

    #[test]
    fn harmonic_oscillator_backwards() {
        let r = solve(|_, y: &[f64; 2]| [y[1], -y[0]], 0.0, [0.0, 1.0], -1.5, &OdeOptions::with_tol(1e-11));
        assert!((r.y[0] - (-1.5f64).sin()).abs() < 1e-9);
        assert!((r.y[1] - (-1.5f64).cos()).abs() < 1e-9);
    }

    #[test]
    fn dense_output_is_accurate() {
        let mut worst: f64 = 0.0;
        integrate(|_, y: &[f64; 2]| [y[1], -y[0]], 0.0, [0.0, 1.0], 6.0, &OdeOptions::with_tol(1e-10), |st, _| {
            for j in 1..10 {
                let t = st.t0 + (st.t1 - st.t0) * j as f64 / 10.0;
                worst = worst.max((st.at(t)[0] - t.sin()).abs());
            }
            Control::Continue
        });
        assert!(worst < 1e-8, "{worst}");
    }

    #[test]
    fn stop_from_callback() {
        let r = integrate(|_, _: &[f64; 1]| [1.0], 0.0, [0.0], 10.0, &OdeOptions { h_max: 0.5, ..OdeOptions::default() }, |st, _| {
            if st.t1 > 3.0 {
                Control::Stop
            } else {
                Control::Continue
            }
        });
        assert_eq!(r.status, OdeStatus::Stopped);
        assert!(r.t > 3.0 && r.t < 10.0);
    }
}
