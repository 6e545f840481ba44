use std::ops::{Add, Mul, Neg, Sub};

use super::activation::{silu_derivatives, tanh_derivatives};
use super::scalar::Scalar;
use crate::error::JetError;

/// Truncated Taylor series of a scalar function of elapsed time.
///
/// `coeffs[n]` is the n-th derivative at the evaluation point (not the
/// normalized Taylor coefficient), so a jet of order `K` carries `K + 1`
/// entries. Binary operators between jets of different order truncate to
/// the lower order; [`Jet::arith`] is the strict variant.
#[derive(Clone, Debug, PartialEq)]
pub struct Jet<S> {
    coeffs: Vec<S>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArithOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryFn {
    Silu,
    Tanh,
    Square,
    Scale(f64),
}

/// Binomial coefficients C(n, i) for n < 8.
const BINOM: [[f64; 8]; 8] = {
    let mut t = [[0.0; 8]; 8];
    let mut n = 0;
    while n < 8 {
        t[n][0] = 1.0;
        let mut i = 1;
        while i <= n {
            t[n][i] = t[n - 1][i - 1] + if i < n { t[n - 1][i] } else { 0.0 };
            i += 1;
        }
        n += 1;
    }
    t
};

/// Highest supported jet order.
pub const MAX_ORDER: usize = 7;

#[inline]
fn binom(n: usize, i: usize) -> f64 {
    BINOM[n][i]
}

impl Jet<f64> {
    /// The identity function of time evaluated at `t`: `[t, 1, 0, ...]`.
    pub fn lift_time(t: f64, order: usize) -> Result<Self, JetError> {
        if !t.is_finite() {
            return Err(JetError::RejectedInput(format!("elapsed time {t} is not finite")));
        }
        if order == 0 || order > MAX_ORDER {
            return Err(JetError::RejectedInput(format!(
                "jet order {order} outside 1..={MAX_ORDER}"
            )));
        }
        Ok(Self::time(t, t, order))
    }
}

impl<S: Scalar> Jet<S> {
    pub fn from_coeffs(coeffs: Vec<S>) -> Self {
        assert!(
            !coeffs.is_empty() && coeffs.len() <= MAX_ORDER + 1,
            "jet needs 1..={} coefficients",
            MAX_ORDER + 1
        );
        Jet { coeffs }
    }

    pub fn constant(c: S, order: usize) -> Self {
        let mut coeffs = vec![c.lift(0.0); order + 1];
        coeffs[0] = c;
        Jet::from_coeffs(coeffs)
    }

    /// The identity function of time, with scalars created in the context of `seed`.
    pub fn time(seed: S, t: f64, order: usize) -> Self {
        let mut coeffs = vec![seed.lift(0.0); order + 1];
        coeffs[0] = seed.lift(t);
        if order >= 1 {
            coeffs[1] = seed.lift(1.0);
        }
        Jet::from_coeffs(coeffs)
    }

    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeffs(&self) -> &[S] {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<S> {
        self.coeffs
    }

    pub fn value(&self) -> S {
        self.coeffs[0]
    }

    /// n-th time derivative.
    pub fn derivative(&self, n: usize) -> S {
        self.coeffs[n]
    }

    pub fn values(&self) -> Vec<f64> {
        self.coeffs.iter().map(|c| c.value()).collect()
    }

    pub fn truncate(&self, order: usize) -> Self {
        let keep = (order + 1).min(self.coeffs.len());
        Jet::from_coeffs(self.coeffs[..keep].to_vec())
    }

    /// Jet of the n-th time derivative; loses `n` orders.
    pub fn shift(&self, n: usize) -> Result<Self, JetError> {
        if n > self.order() {
            return Err(JetError::InsufficientOrder {
                have: self.order(),
                need: n,
            });
        }
        Ok(Jet::from_coeffs(self.coeffs[n..].to_vec()))
    }

    pub fn map_value(&self, f: impl FnOnce(S) -> S) -> Self {
        let mut out = self.clone();
        out.coeffs[0] = f(out.coeffs[0]);
        out
    }

    pub fn scale(&self, c: f64) -> Self {
        Jet::from_coeffs(self.coeffs.iter().map(|&a| a * c).collect())
    }

    pub fn add_scalar(&self, c: S) -> Self {
        self.map_value(|v| v + c)
    }

    /// Multiplies every coefficient by a scalar (a constant in time).
    pub fn mul_scalar(&self, c: S) -> Self {
        Jet::from_coeffs(self.coeffs.iter().map(|&a| a * c).collect())
    }

    pub fn square(&self) -> Self {
        self.mul_jet(self)
    }

    fn mul_jet(&self, other: &Self) -> Self {
        let order = self.order().min(other.order());
        let a = &self.coeffs;
        let b = &other.coeffs;
        let coeffs = (0..=order)
            .map(|n| {
                let mut acc = a[0] * b[n];
                for i in 1..=n {
                    acc = acc + a[i] * b[n - i] * binom(n, i);
                }
                acc
            })
            .collect();
        Jet::from_coeffs(coeffs)
    }

    fn zip(&self, other: &Self, f: impl Fn(S, S) -> S) -> Self {
        let order = self.order().min(other.order());
        Jet::from_coeffs((0..=order).map(|n| f(self.coeffs[n], other.coeffs[n])).collect())
    }

    /// Quotient via `a = q * b` solved order by order.
    pub fn div(&self, other: &Self) -> Result<Self, JetError> {
        let b0 = other.coeffs[0];
        if b0.value() == 0.0 {
            return Err(JetError::Singularity);
        }
        let order = self.order().min(other.order());
        let mut q: Vec<S> = Vec::with_capacity(order + 1);
        for n in 0..=order {
            let mut acc = self.coeffs[n];
            for (i, &qi) in q.iter().enumerate() {
                acc = acc - qi * other.coeffs[n - i] * binom(n, i);
            }
            q.push(acc / b0);
        }
        Ok(Jet::from_coeffs(q))
    }

    /// Strict arithmetic: both operands must carry the same order.
    pub fn arith(&self, other: &Self, op: ArithOp) -> Result<Self, JetError> {
        if self.order() != other.order() {
            return Err(JetError::OrderMismatch {
                left: self.order(),
                right: other.order(),
            });
        }
        match op {
            ArithOp::Add => Ok(self + other),
            ArithOp::Sub => Ok(self - other),
            ArithOp::Mul => Ok(self * other),
            ArithOp::Div => self.div(other),
        }
    }

    /// Composition `g(self)` given `g^(m)` at the current value for
    /// `m = 0..=order`, using `g(z) = sum_m g^(m)(z0) / m! * (z - z0)^m`.
    pub fn compose(&self, derivs: &[S]) -> Self {
        let order = self.order();
        debug_assert!(derivs.len() > order);
        let zero = self.coeffs[0].lift(0.0);
        let mut delta = self.clone();
        delta.coeffs[0] = zero;
        let mut out = Jet::constant(derivs[0], order);
        let mut power = delta.clone();
        let mut fact = 1.0;
        for (m, &d) in derivs.iter().enumerate().take(order + 1).skip(1) {
            fact *= m as f64;
            let w = d / fact;
            for n in m..=order {
                out.coeffs[n] = out.coeffs[n] + power.coeffs[n] * w;
            }
            if m < order {
                power = power.mul_jet(&delta);
            }
        }
        out
    }

    fn compose_with(&self, table: impl Fn(f64, usize) -> Vec<f64>) -> Self {
        let z0 = self.coeffs[0];
        let order = self.order();
        let d = table(z0.value(), order + 1);
        let derivs: Vec<S> = (0..=order).map(|m| z0.chain(d[m], d[m + 1])).collect();
        self.compose(&derivs)
    }

    pub fn silu(&self) -> Self {
        self.compose_with(silu_derivatives)
    }

    pub fn tanh(&self) -> Self {
        self.compose_with(tanh_derivatives)
    }

    /// Applies one of the supported univariate functions with a finiteness check.
    pub fn unary(&self, f: UnaryFn) -> Result<Self, JetError> {
        let out = match f {
            UnaryFn::Silu => self.silu(),
            UnaryFn::Tanh => self.tanh(),
            UnaryFn::Square => self.square(),
            UnaryFn::Scale(c) => self.scale(c),
        };
        out.check_finite(match f {
            UnaryFn::Silu => "silu",
            UnaryFn::Tanh => "tanh",
            UnaryFn::Square => "square",
            UnaryFn::Scale(_) => "scale",
        })?;
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.value().is_finite())
    }

    pub fn check_finite(&self, stage: &str) -> Result<(), JetError> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(JetError::NumericOverflow {
                stage: stage.to_string(),
            })
        }
    }
}

impl<S: Scalar> Add for &Jet<S> {
    type Output = Jet<S>;
    fn add(self, rhs: &Jet<S>) -> Jet<S> {
        self.zip(rhs, |a, b| a + b)
    }
}

impl<S: Scalar> Sub for &Jet<S> {
    type Output = Jet<S>;
    fn sub(self, rhs: &Jet<S>) -> Jet<S> {
        self.zip(rhs, |a, b| a - b)
    }
}

impl<S: Scalar> Mul for &Jet<S> {
    type Output = Jet<S>;
    fn mul(self, rhs: &Jet<S>) -> Jet<S> {
        self.mul_jet(rhs)
    }
}

impl<S: Scalar> Neg for &Jet<S> {
    type Output = Jet<S>;
    fn neg(self) -> Jet<S> {
        Jet::from_coeffs(self.coeffs.iter().map(|&a| -a).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn j(c: &[f64]) -> Jet<f64> {
        Jet::from_coeffs(c.to_vec())
    }

    #[test]
    fn lift_time_examples() {
        assert_eq!(Jet::lift_time(2.0, 2).unwrap().values(), vec![2.0, 1.0, 0.0]);
        assert_eq!(Jet::lift_time(0.0, 3).unwrap().values(), vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(Jet::lift_time(-1.5, 1).unwrap().values(), vec![-1.5, 1.0]);
        assert!(matches!(
            Jet::lift_time(f64::NAN, 2),
            Err(JetError::RejectedInput(_))
        ));
        assert!(Jet::lift_time(f64::INFINITY, 2).is_err());
    }

    #[test]
    fn arithmetic_examples() {
        let t = j(&[1.0, 1.0, 0.0]);
        assert_eq!((&t * &t).values(), vec![1.0, 2.0, 2.0]);
        assert_eq!((&j(&[1.0, 2.0, 3.0]) + &j(&[4.0, 5.0, 6.0])).values(), vec![5.0, 7.0, 9.0]);
        let x = j(&[0.3, -1.2, 4.0]);
        assert_eq!((&x - &x).values(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn division_by_zero_valued_jet_is_singular() {
        let a = j(&[1.0, 1.0, 0.0]);
        let b = j(&[0.0, 1.0, 0.0]);
        assert_eq!(a.arith(&b, ArithOp::Div), Err(JetError::Singularity));
    }

    #[test]
    fn division_inverts_multiplication() {
        let a = j(&[1.5, -0.5, 2.0, 0.25]);
        let b = j(&[2.0, 0.75, -1.0, 3.0]);
        let q = a.div(&b).unwrap();
        let back = &q * &b;
        for (x, y) in back.values().iter().zip(a.values()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn strict_arith_rejects_order_mismatch() {
        let a = j(&[1.0, 2.0]);
        let b = j(&[1.0, 2.0, 3.0]);
        assert_eq!(
            a.arith(&b, ArithOp::Add),
            Err(JetError::OrderMismatch { left: 1, right: 2 })
        );
    }

    #[test]
    fn unary_examples() {
        assert_eq!(j(&[0.0, 0.0, 0.0]).unary(UnaryFn::Silu).unwrap().values(), vec![0.0, 0.0, 0.0]);
        assert_eq!(j(&[3.0, 1.0, 0.0]).unary(UnaryFn::Square).unwrap().values(), vec![9.0, 6.0, 2.0]);
        assert_eq!(
            j(&[1.0, 2.0, 3.0]).unary(UnaryFn::Scale(2.0)).unwrap().values(),
            vec![2.0, 4.0, 6.0]
        );
    }

    #[test]
    fn non_finite_unary_is_overflow() {
        let err = j(&[f64::INFINITY, 1.0]).unary(UnaryFn::Square).unwrap_err();
        assert!(matches!(err, JetError::NumericOverflow { .. }));
    }

    #[test]
    fn shift_drops_orders() {
        let x = j(&[1.0, 2.0, 3.0]);
        assert_eq!(x.shift(1).unwrap().values(), vec![2.0, 3.0]);
        assert_eq!(x.shift(3), Err(JetError::InsufficientOrder { have: 2, need: 3 }));
    }

    #[test]
    fn silu_of_time_matches_closed_form() {
        // d/dt silu(t) = silu'(t); d2/dt2 = silu''(t)
        let t = Jet::lift_time(0.7, 3).unwrap();
        let y = t.silu();
        let d = silu_derivatives(0.7, 3);
        for k in 0..=3 {
            assert!((y.values()[k] - d[k]).abs() < 1e-15);
        }
    }
}
