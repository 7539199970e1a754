//! Dormand–Prince 5(4) stepper with continuous extension.

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

/// Work buffers for one system size.
pub(crate) struct Dopri5 {
    n: usize,
    pub rtol: f64,
    pub atol: f64,
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
}

/// Result of one attempted step.
pub(crate) struct Attempt {
    /// Scaled error norm; the step is acceptable when `<= 1`.
    pub err: f64,
}

/// Quartic interpolant over an accepted step.
#[derive(Clone)]
pub(crate) struct Dense {
    pub t0: f64,
    pub h: f64,
    r: [Vec<f64>; 5],
}

impl Dense {
    /// Component `i` at normalised position `theta` in `[0, 1]`.
    pub fn component(&self, i: usize, theta: f64) -> f64 {
        let th1 = 1.0 - theta;
        self.r[0][i] + theta * (self.r[1][i] + th1 * (self.r[2][i] + theta * (self.r[3][i] + th1 * self.r[4][i])))
    }

    pub fn eval_theta(&self, theta: f64, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.component(i, theta);
        }
    }

    pub fn theta_of(&self, t: f64) -> f64 {
        ((t - self.t0) / self.h).clamp(0.0, 1.0)
    }

    pub fn eval(&self, t: f64, out: &mut [f64]) {
        self.eval_theta(self.theta_of(t), out);
    }
}

impl Dopri5 {
    pub fn new(n: usize, rtol: f64, atol: f64) -> Self {
        let z = || vec![0.0; n];
        Dopri5 {
            n,
            rtol,
            atol,
            k: [z(), z(), z(), z(), z(), z(), z()],
            tmp: z(),
        }
    }

    /// Attempts a step of size `h` from `(t, y)` with `f0 = f(t, y)`.
    /// Writes the 5th-order solution to `y1` and `f(t+h, y1)` to `f1`.
    #[allow(clippy::too_many_arguments)]
    pub fn attempt<F>(
        &mut self,
        f: &mut F,
        t: f64,
        y: &[f64],
        f0: &[f64],
        h: f64,
        y1: &mut [f64],
        f1: &mut [f64],
    ) -> Attempt
    where
        F: FnMut(f64, &[f64], &mut [f64]),
    {
        let n = self.n;
        self.k[0].copy_from_slice(f0);
        macro_rules! stage {
            ($dst:expr, $c:expr, [$(($a:expr, $j:expr)),*]) => {{
                for i in 0..n {
                    self.tmp[i] = y[i] + h * (0.0 $(+ $a * self.k[$j][i])*);
                }
                let (tmp, k) = (&self.tmp, &mut self.k[$dst]);
                f(t + $c * h, tmp, k);
            }};
        }
        stage!(1, C2, [(A21, 0)]);
        stage!(2, C3, [(A31, 0), (A32, 1)]);
        stage!(3, C4, [(A41, 0), (A42, 1), (A43, 2)]);
        stage!(4, C5, [(A51, 0), (A52, 1), (A53, 2), (A54, 3)]);
        stage!(5, 1.0, [(A61, 0), (A62, 1), (A63, 2), (A64, 3), (A65, 4)]);
        for i in 0..n {
            y1[i] = y[i]
                + h * (A71 * self.k[0][i]
                    + A73 * self.k[2][i]
                    + A74 * self.k[3][i]
                    + A75 * self.k[4][i]
                    + A76 * self.k[5][i]);
        }
        f(t + h, y1, f1);
        self.k[6].copy_from_slice(f1);
        let mut acc = 0.0;
        for i in 0..n {
            let e = h
                * (E1 * self.k[0][i]
                    + E3 * self.k[2][i]
                    + E4 * self.k[3][i]
                    + E5 * self.k[4][i]
                    + E6 * self.k[5][i]
                    + E7 * self.k[6][i]);
            let sc = self.atol + self.rtol * y[i].abs().max(y1[i].abs());
            acc += (e / sc).powi(2);
        }
        Attempt {
            err: (acc / n as f64).sqrt(),
        }
    }

    /// Interpolant for the step just attempted (valid only after an accepted
    /// [`Dopri5::attempt`]).
    pub fn dense(&self, t: f64, h: f64, y: &[f64], y1: &[f64]) -> Dense {
        let n = self.n;
        let mut r: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; n]);
        for i in 0..n {
            let ydiff = y1[i] - y[i];
            let bspl = h * self.k[0][i] - ydiff;
            r[0][i] = y[i];
            r[1][i] = ydiff;
            r[2][i] = bspl;
            r[3][i] = ydiff - h * self.k[6][i] - bspl;
            r[4][i] = h
                * (D1 * self.k[0][i]
                    + D3 * self.k[2][i]
                    + D4 * self.k[3][i]
                    + D5 * self.k[4][i]
                    + D6 * self.k[5][i]
                    + D7 * self.k[6][i]);
        }
        Dense { t0: t, h, r }
    }

    /// Starting step size estimate.
    pub fn initial_step<F>(&mut self, f: &mut F, t: f64, y: &[f64], f0: &[f64], h_max: f64) -> f64
    where
        F: FnMut(f64, &[f64], &mut [f64]),
    {
        let n = self.n;
        let sc = |i: usize| self.atol + self.rtol * y[i].abs();
        let d0 = (y.iter().enumerate().map(|(i, v)| (v / sc(i)).powi(2)).sum::<f64>() / n as f64).sqrt();
        let d1 = (f0.iter().enumerate().map(|(i, v)| (v / sc(i)).powi(2)).sum::<f64>() / n as f64).sqrt();
        let mut h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        h0 = h0.min(h_max);
        for i in 0..n {
            self.tmp[i] = y[i] + h0 * f0[i];
        }
        let tmp = self.tmp.clone();
        let mut f1 = vec![0.0; n];
        f(t + h0, &tmp, &mut f1);
        let d2 = (f1
            .iter()
            .zip(f0)
            .enumerate()
            .map(|(i, (a, b))| ((a - b) / sc(i)).powi(2))
            .sum::<f64>()
            / n as f64)
            .sqrt()
            / h0;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(0.2)
        };
        (100.0 * h0).min(h1).min(h_max)
    }
}

/// Step-size factor after an attempt with error norm `err`.
pub(crate) fn step_factor(err: f64) -> f64 {
    if err == 0.0 {
        5.0
    } else {
        (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
    }
}
