//! Closed-form derivative tables of the activation functions.
//!
//! Derivatives of the logistic sigmoid are polynomials in `s = sigmoid(z)`:
//! `P_0(s) = s`, `P_{n+1}(s) = P_n'(s) * s * (1 - s)`. SiLU follows from
//! `silu^(n)(z) = z * sigmoid^(n)(z) + n * sigmoid^(n-1)(z)`. Tanh is handled
//! the same way with `Q_{n+1}(T) = Q_n'(T) * (1 - T^2)`.

/// Logistic sigmoid, stable for large |z|.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Applies `P -> P' * m` where `m` is a polynomial; coefficients low-to-high.
fn differentiate_poly(p: &[f64], m: &[f64]) -> Vec<f64> {
    if p.len() <= 1 {
        return vec![0.0];
    }
    let dp: Vec<f64> = p.iter().enumerate().skip(1).map(|(i, c)| c * i as f64).collect();
    let mut out = vec![0.0; dp.len() + m.len() - 1];
    for (i, a) in dp.iter().enumerate() {
        for (j, b) in m.iter().enumerate() {
            out[i + j] += a * b;
        }
    }
    out
}

fn eval_poly(p: &[f64], x: f64) -> f64 {
    p.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

fn polynomial_chain(base: f64, multiplier: &[f64], n: usize) -> Vec<f64> {
    let mut poly = vec![0.0, 1.0];
    let mut out = Vec::with_capacity(n + 1);
    for _ in 0..=n {
        out.push(eval_poly(&poly, base));
        poly = differentiate_poly(&poly, multiplier);
    }
    out
}

/// `[sigmoid(z), sigmoid'(z), ..., sigmoid^(n)(z)]`
pub fn sigmoid_derivatives(z: f64, n: usize) -> Vec<f64> {
    polynomial_chain(sigmoid(z), &[0.0, 1.0, -1.0], n)
}

/// `[tanh(z), tanh'(z), ..., tanh^(n)(z)]`
pub fn tanh_derivatives(z: f64, n: usize) -> Vec<f64> {
    polynomial_chain(z.tanh(), &[1.0, 0.0, -1.0], n)
}

/// `[silu(z), silu'(z), ..., silu^(n)(z)]`
pub fn silu_derivatives(z: f64, n: usize) -> Vec<f64> {
    let s = sigmoid_derivatives(z, n);
    (0..=n)
        .map(|k| {
            if k == 0 {
                z * s[0]
            } else {
                z * s[k] + k as f64 * s[k - 1]
            }
        })
        .collect()
}

/// SiLU and its first four derivatives, unrolled for the batched hot path.
#[inline]
pub fn silu_table(z: f64) -> [f64; 5] {
    let s = sigmoid(z);
    let s1 = s * (1.0 - s);
    let a = 1.0 - 2.0 * s;
    let s2 = s1 * a;
    let s3 = s1 * (1.0 - 6.0 * s + 6.0 * s * s);
    let s4 = s2 * (1.0 - 12.0 * s + 12.0 * s * s);
    [
        z * s,
        z * s1 + s,
        z * s2 + 2.0 * s1,
        z * s3 + 3.0 * s2,
        z * s4 + 4.0 * s3,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central(f: impl Fn(f64) -> f64, z: f64, h: f64) -> f64 {
        (f(z + h) - f(z - h)) / (2.0 * h)
    }

    #[test]
    fn unrolled_table_matches_recurrence() {
        for &z in &[-7.5, -2.0, -0.3, 0.0, 0.4, 1.7, 9.0] {
            let rec = silu_derivatives(z, 4);
            let fast = silu_table(z);
            for k in 0..5 {
                assert!((rec[k] - fast[k]).abs() < 1e-12, "z={z} k={k}");
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        for &z in &[-3.0, -0.7, 0.0, 0.9, 2.5] {
            let s = silu_derivatives(z, 4);
            let t = tanh_derivatives(z, 4);
            for k in 0..4 {
                let fd_s = central(|v| silu_derivatives(v, 4)[k], z, 1e-5);
                let fd_t = central(|v| tanh_derivatives(v, 4)[k], z, 1e-5);
                assert!((fd_s - s[k + 1]).abs() < 1e-7, "silu z={z} k={k}");
                assert!((fd_t - t[k + 1]).abs() < 1e-7, "tanh z={z} k={k}");
            }
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert_eq!(silu_table(-800.0)[0], -0.0);
    }
}
