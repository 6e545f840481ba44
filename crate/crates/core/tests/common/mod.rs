//! Independent references for the double integrator `x'' = u` under
//! `L = q x1^2 + r u^2` with `x0(t_f) = x_r` and free terminal velocity.
//!
//! These are written against the optimality conditions directly and share
//! no code with the library beyond plain `f64` arithmetic.

#![allow(dead_code)]

/// State and co-state along the optimal trajectory.
#[derive(Clone, Copy, Debug)]
pub struct PmpPoint {
    pub t: f64,
    pub x: [f64; 2],
    pub lambda: [f64; 2],
    pub u: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LqProblem {
    pub q: f64,
    pub r: f64,
    pub x_o: [f64; 2],
    pub x_r: f64,
    pub t_f: f64,
}

/// Shooting solution: initial co-state and a dense trajectory.
#[derive(Clone, Debug)]
pub struct ShootingSolution {
    pub lambda0: [f64; 2],
    pub points: Vec<PmpPoint>,
    pub cost: f64,
    pub iterations: usize,
}

impl LqProblem {
    /// The fixed instance used for oracle comparison.
    pub fn reference_instance() -> Self {
        LqProblem {
            q: 1.0,
            r: 0.5,
            x_o: [0.0, 0.0],
            x_r: 1.0,
            t_f: 2.0,
        }
    }

    fn control(&self, lambda1: f64) -> f64 {
        -lambda1 / (2.0 * self.r)
    }

    /// Right-hand side of the Hamiltonian system in `(x0, x1, l0, l1)`.
    fn rhs(&self, z: [f64; 4]) -> [f64; 4] {
        let u = self.control(z[3]);
        [z[1], u, 0.0, -(2.0 * self.q * z[1] + z[2])]
    }

    fn flow(&self, lambda0: [f64; 2], n: usize) -> Vec<PmpPoint> {
        let h = self.t_f / n as f64;
        let mut z = [self.x_o[0], self.x_o[1], lambda0[0], lambda0[1]];
        let mut out = Vec::with_capacity(n + 1);
        let point = |t: f64, z: [f64; 4]| PmpPoint {
            t,
            x: [z[0], z[1]],
            lambda: [z[2], z[3]],
            u: self.control(z[3]),
        };
        out.push(point(0.0, z));
        let add = |a: [f64; 4], b: [f64; 4], s: f64| [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2], a[3] + s * b[3]];
        for i in 0..n {
            let k1 = self.rhs(z);
            let k2 = self.rhs(add(z, k1, h / 2.0));
            let k3 = self.rhs(add(z, k2, h / 2.0));
            let k4 = self.rhs(add(z, k3, h));
            for j in 0..4 {
                z[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            }
            out.push(point((i + 1) as f64 * h, z));
        }
        out
    }

    /// Boundary defects `(x0(t_f) - x_r, lambda1(t_f))`.
    fn defect(&self, lambda0: [f64; 2], n: usize) -> [f64; 2] {
        let end = *self.flow(lambda0, n).last().unwrap();
        [end.x[0] - self.x_r, end.lambda[1]]
    }

    /// Newton iteration on the initial co-state with a central-difference
    /// Jacobian.
    pub fn shoot(&self, n: usize) -> ShootingSolution {
        let mut l = [0.0, 0.0];
        let mut iterations = 0;
        for it in 0..50 {
            iterations = it + 1;
            let d = self.defect(l, n);
            if d[0].abs().max(d[1].abs()) < 1e-12 {
                break;
            }
            let eps = 1e-6;
            let mut jac = [[0.0; 2]; 2];
            for j in 0..2 {
                let mut lp = l;
                let mut lm = l;
                lp[j] += eps;
                lm[j] -= eps;
                let (dp, dm) = (self.defect(lp, n), self.defect(lm, n));
                for i in 0..2 {
                    jac[i][j] = (dp[i] - dm[i]) / (2.0 * eps);
                }
            }
            let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
            assert!(det.abs() > 1e-14, "singular shooting Jacobian");
            l[0] -= (jac[1][1] * d[0] - jac[0][1] * d[1]) / det;
            l[1] -= (-jac[1][0] * d[0] + jac[0][0] * d[1]) / det;
        }
        let points = self.flow(l, n);
        let cost = trapezoid(&points, |p| self.q * p.x[1] * p.x[1] + self.r * p.u * p.u);
        ShootingSolution {
            lambda0: l,
            points,
            cost,
            iterations,
        }
    }

    /// Closed-form solution for `q > 0`, returned as a function of time
    /// giving derivatives `[x0, x0', x0'', x0''', x0'''']` and
    /// `[l0, l1, l1']`.
    pub fn closed_form(&self) -> ClosedForm {
        assert!(self.q > 0.0);
        // x1'' = (q / r) x1 + l0 / (2 r): x1 = A cosh(s t) + B sinh(s t) - l0 / (2 q)
        let s = (self.q / self.r).sqrt();
        let (t, c) = (self.t_f, 1.0 / (2.0 * self.q));
        let (ch, sh) = ((s * t).cosh(), (s * t).sinh());
        // Unknowns (A, B, l0):
        //   A - c l0 = v0
        //   s (A sh + B ch) = 0            (x1'(t_f) = -l1(t_f)/(2r) = 0)
        //   p0 + A sh / s + B (ch - 1) / s - c l0 t = x_r
        let m = [[1.0, 0.0, -c], [sh, ch, 0.0], [sh / s, (ch - 1.0) / s, -c * t]];
        let rhs = [self.x_o[1], 0.0, self.x_r - self.x_o[0]];
        let sol = solve3(m, rhs);
        ClosedForm {
            a: sol[0],
            b: sol[1],
            l0: sol[2],
            s,
            c,
            r: self.r,
            p0: self.x_o[0],
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ClosedForm {
    pub a: f64,
    pub b: f64,
    pub l0: f64,
    s: f64,
    c: f64,
    r: f64,
    p0: f64,
}

impl ClosedForm {
    /// `[x0, x1, x1', x1'', x1''']` at `t`.
    pub fn state_derivatives(&self, t: f64) -> [f64; 5] {
        let (s, a, b) = (self.s, self.a, self.b);
        let (ch, sh) = ((s * t).cosh(), (s * t).sinh());
        let x0 = self.p0 + a * sh / s + b * (ch - 1.0) / s - self.c * self.l0 * t;
        let x1 = a * ch + b * sh - self.c * self.l0;
        let d1 = s * (a * sh + b * ch);
        let d2 = s * s * (a * ch + b * sh);
        let d3 = s * s * s * (a * sh + b * ch);
        [x0, x1, d1, d2, d3]
    }

    /// `[l0, l1, l1']` at `t`, from `u = x1' = -l1 / (2 r)`.
    pub fn costate(&self, t: f64) -> [f64; 3] {
        let d = self.state_derivatives(t);
        [self.l0, -2.0 * self.r * d[2], -2.0 * self.r * d[3]]
    }
}

fn solve3(m: [[f64; 3]; 3], b: [f64; 3]) -> [f64; 3] {
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(m);
    assert!(d.abs() > 1e-14);
    let mut out = [0.0; 3];
    for (j, o) in out.iter_mut().enumerate() {
        let mut mj = m;
        for i in 0..3 {
            mj[i][j] = b[i];
        }
        *o = det(mj) / d;
    }
    out
}

pub fn trapezoid(points: &[PmpPoint], f: impl Fn(&PmpPoint) -> f64) -> f64 {
    points.windows(2).map(|w| 0.5 * (w[1].t - w[0].t) * (f(&w[0]) + f(&w[1]))).sum()
}

/// Linear interpolation of `x0` on the oracle grid.
pub fn interpolate_x0(points: &[PmpPoint], t: f64) -> f64 {
    let i = points.partition_point(|p| p.t <= t).clamp(1, points.len() - 1);
    let (a, b) = (&points[i - 1], &points[i]);
    let w = (t - a.t) / (b.t - a.t);
    a.x[0] + w * (b.x[0] - a.x[0])
}
