//! Multi-layer perceptron with SiLU hidden activations and a linear output.
//!
//! Two evaluation paths share one parameter layout:
//!
//! * [`Mlp::forward_batch`] / [`Mlp::backward_batch`]: whole batches of
//!   time jets pushed through dense matrix products, with the SiLU jet
//!   recurrences and their adjoints written out by hand up to order 3.
//!   This is the training and inference hot path.
//! * [`Mlp::forward_generic`]: one row of `Jet<S>` inputs, scalar by scalar.
//!   With `S = Var` it records everything on a tape and serves as the
//!   independent reference for the batched gradients.
//!
//! Parameters are flattened layer by layer as `[W (out x in, row-major), b]`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{HionError, JetError, Result};
use crate::jets::activation::silu_table;
use crate::jets::{Jet, Scalar};

/// Highest jet order supported by the batched path.
pub const MAX_BATCH_ORDER: usize = 3;

/// A batch of jet-valued row vectors: `coeffs[k]` holds the k-th time
/// derivative of every entry, shaped `rows x width`.
#[derive(Clone, Debug, PartialEq)]
pub struct JetBatch {
    pub coeffs: Vec<Array2<f64>>,
}

impl JetBatch {
    pub fn zeros(rows: usize, width: usize, order: usize) -> Self {
        JetBatch {
            coeffs: (0..=order).map(|_| Array2::zeros((rows, width))).collect(),
        }
    }

    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn rows(&self) -> usize {
        self.coeffs[0].nrows()
    }

    pub fn width(&self) -> usize {
        self.coeffs[0].ncols()
    }

    pub fn set_jet(&mut self, row: usize, col: usize, jet: &[f64]) {
        for (k, c) in self.coeffs.iter_mut().enumerate() {
            c[[row, col]] = jet.get(k).copied().unwrap_or(0.0);
        }
    }

    pub fn jet(&self, row: usize, col: usize) -> Vec<f64> {
        self.coeffs.iter().map(|c| c[[row, col]]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    params: Vec<f64>,
}

/// Intermediate values kept from a batched forward pass.
#[derive(Debug)]
pub struct MlpCache {
    inputs: Vec<JetBatch>,
    pre: Vec<JetBatch>,
    /// SiLU derivative tables `s1..s4` at the pre-activation values of each hidden layer.
    tables: Vec<[Array2<f64>; 4]>,
}

fn layer_sizes(dims: &[usize]) -> impl Iterator<Item = (usize, usize)> + '_ {
    dims.windows(2).map(|w| (w[0], w[1]))
}

pub fn parameter_count(dims: &[usize]) -> usize {
    layer_sizes(dims).map(|(i, o)| i * o + o).sum()
}

impl Mlp {
    pub fn from_params(dims: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(HionError::Config(format!("invalid layer dims {dims:?}")));
        }
        let expected = parameter_count(&dims);
        if params.len() != expected {
            return Err(HionError::DimensionMismatch {
                context: "mlp parameters",
                expected,
                got: params.len(),
            });
        }
        Ok(Mlp { dims, params })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(dims: Vec<usize>, rng: &mut R) -> Result<Self> {
        let mut params = vec![0.0; parameter_count(&dims)];
        let mut offset = 0;
        for (fan_in, fan_out) in layer_sizes(&dims) {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            for w in &mut params[offset..offset + fan_in * fan_out] {
                *w = dist.sample(rng);
            }
            offset += fan_in * fan_out + fan_out;
        }
        Mlp::from_params(dims, params)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn offsets(&self, layer: usize) -> (usize, usize, usize, usize) {
        let mut offset = 0;
        for (l, (i, o)) in layer_sizes(&self.dims).enumerate() {
            if l == layer {
                return (offset, offset + i * o, i, o);
            }
            offset += i * o + o;
        }
        unreachable!("layer index out of range")
    }

    /// Weight matrix (out x in) and bias of one layer.
    pub fn layer(&self, layer: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (w, b, i, o) = self.offsets(layer);
        (
            ArrayView2::from_shape((o, i), &self.params[w..b]).unwrap(),
            ArrayView1::from(&self.params[b..b + o]),
        )
    }

    /// Per-layer weights as nested rows, and biases.
    pub fn weights_and_biases(&self) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>) {
        (0..self.n_layers())
            .map(|l| {
                let (w, b) = self.layer(l);
                (
                    w.outer_iter().map(|r| r.to_vec()).collect(),
                    b.to_vec(),
                )
            })
            .unzip()
    }

    pub fn from_weights_and_biases(
        dims: Vec<usize>,
        weights: &[Vec<Vec<f64>>],
        biases: &[Vec<f64>],
    ) -> Result<Self> {
        if weights.len() + 1 != dims.len() || biases.len() + 1 != dims.len() {
            return Err(HionError::Checkpoint(format!(
                "layer count mismatch for dims {dims:?}"
            )));
        }
        let mut params = Vec::with_capacity(parameter_count(&dims));
        for (l, (i, o)) in layer_sizes(&dims).enumerate() {
            if weights[l].len() != o || weights[l].iter().any(|r| r.len() != i) || biases[l].len() != o {
                return Err(HionError::Checkpoint(format!("layer {l} has wrong shape")));
            }
            for row in &weights[l] {
                params.extend_from_slice(row);
            }
            params.extend_from_slice(&biases[l]);
        }
        Mlp::from_params(dims, params)
    }

    /// Batched jet forward pass.
    pub fn forward_batch(&self, input: &JetBatch) -> Result<(JetBatch, MlpCache)> {
        let order = input.order();
        if order > MAX_BATCH_ORDER {
            return Err(JetError::InsufficientOrder {
                have: MAX_BATCH_ORDER,
                need: order,
            }
            .into());
        }
        if input.width() != self.input_dim() {
            return Err(HionError::DimensionMismatch {
                context: "mlp input width",
                expected: self.input_dim(),
                got: input.width(),
            });
        }
        let n_layers = self.n_layers();
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(n_layers),
            pre: Vec::with_capacity(n_layers),
            tables: Vec::with_capacity(n_layers.saturating_sub(1)),
        };
        let mut act = input.clone();
        for l in 0..n_layers {
            let (w, b) = self.layer(l);
            let mut z = JetBatch {
                coeffs: act.coeffs.iter().map(|a| a.dot(&w.t())).collect(),
            };
            z.coeffs[0] += &b;
            cache.inputs.push(act);
            if l + 1 == n_layers {
                act = z.clone();
                cache.pre.push(z);
            } else {
                let (y, table) = silu_forward(&z);
                cache.pre.push(z);
                cache.tables.push(table);
                act = y;
            }
        }
        if !act.is_finite() {
            return Err(JetError::NumericOverflow {
                stage: "mlp forward".into(),
            }
            .into());
        }
        Ok((act, cache))
    }

    /// Adjoint of [`Mlp::forward_batch`]. Accumulates parameter gradients
    /// into `grad` (same layout as the parameters) and returns the adjoint
    /// of the input batch.
    pub fn backward_batch(&self, cache: &MlpCache, grad_out: &JetBatch, grad: &mut [f64]) -> JetBatch {
        assert_eq!(grad.len(), self.n_params());
        let n_layers = self.n_layers();
        let mut g = grad_out.clone();
        for l in (0..n_layers).rev() {
            let gz = if l + 1 == n_layers {
                g
            } else {
                silu_backward(&cache.pre[l], &cache.tables[l], &g)
            };
            let (w, _) = self.layer(l);
            let (wo, bo, i, o) = self.offsets(l);
            let (head, tail) = grad.split_at_mut(bo);
            let mut dw = ArrayViewMut2::from_shape((o, i), &mut head[wo..]).unwrap();
            let a = &cache.inputs[l];
            for (gk, ak) in gz.coeffs.iter().zip(&a.coeffs) {
                general_mat_mul(1.0, &gk.t(), ak, 1.0, &mut dw);
            }
            let mut db = ArrayViewMut1::from(&mut tail[..o]);
            db += &gz.coeffs[0].sum_axis(Axis(0));
            g = JetBatch {
                coeffs: gz.coeffs.iter().map(|gk| gk.dot(&w)).collect(),
            };
        }
        g
    }

    /// Row-wise reference forward pass over generic scalars.
    pub fn forward_generic<S: Scalar>(&self, params: &[S], input: &[Jet<S>]) -> Result<Vec<Jet<S>>> {
        if params.len() != self.n_params() {
            return Err(HionError::DimensionMismatch {
                context: "mlp parameters",
                expected: self.n_params(),
                got: params.len(),
            });
        }
        if input.len() != self.input_dim() {
            return Err(HionError::DimensionMismatch {
                context: "mlp input width",
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        let n_layers = self.n_layers();
        let mut act: Vec<Jet<S>> = input.to_vec();
        for l in 0..n_layers {
            let (wo, bo, n_in, n_out) = self.offsets(l);
            let mut next = Vec::with_capacity(n_out);
            for j in 0..n_out {
                let row = &params[wo + j * n_in..wo + (j + 1) * n_in];
                let mut z = act[0].mul_scalar(row[0]);
                for (a, &w) in act.iter().zip(row).skip(1) {
                    z = &z + &a.mul_scalar(w);
                }
                let z = z.add_scalar(params[bo + j]);
                next.push(if l + 1 == n_layers { z } else { z.silu() });
            }
            for (j, z) in next.iter().enumerate() {
                z.check_finite(&format!("mlp layer {l} unit {j}"))?;
            }
            act = next;
        }
        Ok(act)
    }
}

fn silu_forward(z: &JetBatch) -> (JetBatch, [Array2<f64>; 4]) {
    let order = z.order();
    let shape = z.coeffs[0].dim();
    let mut y = JetBatch::zeros(shape.0, shape.1, order);
    let mut tables: [Array2<f64>; 4] = std::array::from_fn(|_| Array2::zeros(shape));
    let z0 = z.coeffs[0].as_slice().unwrap();
    let n = z0.len();
    {
        let [t1, t2, t3, t4] = &mut tables;
        let (t1, t2, t3, t4) = (
            t1.as_slice_mut().unwrap(),
            t2.as_slice_mut().unwrap(),
            t3.as_slice_mut().unwrap(),
            t4.as_slice_mut().unwrap(),
        );
        let y0 = y.coeffs[0].as_slice_mut().unwrap();
        for e in 0..n {
            let s = silu_table(z0[e]);
            y0[e] = s[0];
            t1[e] = s[1];
            t2[e] = s[2];
            t3[e] = s[3];
            t4[e] = s[4];
        }
    }
    let s1 = tables[0].as_slice().unwrap();
    let s2 = tables[1].as_slice().unwrap();
    let s3 = tables[2].as_slice().unwrap();
    if order >= 1 {
        let z1 = z.coeffs[1].as_slice().unwrap();
        let mut outs: Vec<&mut [f64]> = y.coeffs[1..]
            .iter_mut()
            .map(|c| c.as_slice_mut().unwrap())
            .collect();
        let z2 = (order >= 2).then(|| z.coeffs[2].as_slice().unwrap());
        let z3 = (order >= 3).then(|| z.coeffs[3].as_slice().unwrap());
        for e in 0..n {
            let a = z1[e];
            outs[0][e] = s1[e] * a;
            if let Some(z2) = z2 {
                let b = z2[e];
                outs[1][e] = s2[e] * a * a + s1[e] * b;
                if let Some(z3) = z3 {
                    outs[2][e] = s3[e] * a * a * a + 3.0 * s2[e] * a * b + s1[e] * z3[e];
                }
            }
        }
    }
    (y, tables)
}

fn silu_backward(z: &JetBatch, tables: &[Array2<f64>; 4], g: &JetBatch) -> JetBatch {
    let order = z.order();
    let shape = z.coeffs[0].dim();
    let mut gz = JetBatch::zeros(shape.0, shape.1, order);
    let s1 = tables[0].as_slice().unwrap();
    let s2 = tables[1].as_slice().unwrap();
    let s3 = tables[2].as_slice().unwrap();
    let s4 = tables[3].as_slice().unwrap();
    let zs: Vec<&[f64]> = z.coeffs.iter().map(|c| c.as_slice().unwrap()).collect();
    let gs: Vec<&[f64]> = g.coeffs.iter().map(|c| c.as_slice().unwrap()).collect();
    let mut outs: Vec<&mut [f64]> = gz.coeffs.iter_mut().map(|c| c.as_slice_mut().unwrap()).collect();
    let n = s1.len();
    for e in 0..n {
        let g0 = gs[0][e];
        let mut d0 = g0 * s1[e];
        if order >= 1 {
            let z1 = zs[1][e];
            let g1 = gs[1][e];
            d0 += g1 * s2[e] * z1;
            let mut d1 = g1 * s1[e];
            if order >= 2 {
                let z2 = zs[2][e];
                let g2 = gs[2][e];
                d0 += g2 * (s3[e] * z1 * z1 + s2[e] * z2);
                d1 += g2 * 2.0 * s2[e] * z1;
                let mut d2 = g2 * s1[e];
                if order >= 3 {
                    let z3 = zs[3][e];
                    let g3 = gs[3][e];
                    d0 += g3 * (s4[e] * z1 * z1 * z1 + 3.0 * s3[e] * z1 * z2 + s2[e] * z3);
                    d1 += g3 * 3.0 * (s3[e] * z1 * z1 + s2[e] * z2);
                    d2 += g3 * 3.0 * s2[e] * z1;
                    outs[3][e] = g3 * s1[e];
                }
                outs[2][e] = d2;
            }
            outs[1][e] = d1;
        }
        outs[0][e] = d0;
    }
    gz
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jets::{Tape, Var};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rows: usize, width: usize, order: usize, rng: &mut ChaCha8Rng) -> JetBatch {
        let mut b = JetBatch::zeros(rows, width, order);
        for c in &mut b.coeffs {
            c.mapv_inplace(|_| rng.random_range(-1.5..1.5));
        }
        b
    }

    #[test]
    fn init_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Mlp::init(vec![4, 16, 16, 2], &mut rng).unwrap();
        assert_eq!(m.n_params(), 4 * 16 + 16 + 16 * 16 + 16 + 16 * 2 + 2);
        for l in 0..m.n_layers() {
            let (w, b) = m.layer(l);
            let limit = (6.0 / (w.ncols() + w.nrows()) as f64).sqrt();
            assert!(b.iter().all(|&v| v == 0.0));
            assert!(w.iter().all(|v| v.abs() <= limit));
        }
        let again = Mlp::init(vec![4, 16, 16, 2], &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn batched_forward_matches_generic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = Mlp::init(vec![3, 8, 8, 2], &mut rng).unwrap();
        for p in m.params_mut() {
            *p += rng.random_range(-0.1..0.1);
        }
        for order in 0..=3 {
            let x = random_batch(4, 3, order, &mut rng);
            let (y, _) = m.forward_batch(&x).unwrap();
            for r in 0..4 {
                let row: Vec<Jet<f64>> = (0..3).map(|c| Jet::from_coeffs(x.jet(r, c))).collect();
                let out = m.forward_generic(m.params(), &row).unwrap();
                for (c, jet) in out.iter().enumerate() {
                    for (a, b) in jet.values().iter().zip(y.jet(r, c)) {
                        assert!((a - b).abs() < 1e-12, "order {order}: {a} vs {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn batched_backward_matches_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut m = Mlp::init(vec![3, 6, 5, 2], &mut rng).unwrap();
        for p in m.params_mut() {
            *p += rng.random_range(-0.2..0.2);
        }
        for order in 0..=3 {
            let x = random_batch(3, 3, order, &mut rng);
            let gy = random_batch(3, 2, order, &mut rng);
            let (_, cache) = m.forward_batch(&x).unwrap();
            let mut grad = vec![0.0; m.n_params()];
            let gx = m.backward_batch(&cache, &gy, &mut grad);

            // reference: L = sum gy * y over all rows and coefficients
            let tape = Tape::new();
            let params: Vec<Var<'_>> = m.params().iter().map(|&p| tape.var(p)).collect();
            let mut inputs = Vec::new();
            let mut loss = tape.constant(0.0);
            for r in 0..3 {
                let row: Vec<Jet<Var<'_>>> = (0..3)
                    .map(|c| Jet::from_coeffs(x.jet(r, c).iter().map(|&v| tape.var(v)).collect()))
                    .collect();
                let out = m.forward_generic(&params, &row).unwrap();
                for (c, jet) in out.iter().enumerate() {
                    for (k, &v) in jet.coeffs().iter().enumerate() {
                        loss = loss + v * gy.coeffs[k][[r, c]];
                    }
                }
                inputs.push(row);
            }
            let adj = tape.backward(loss);
            for (p, g) in params.iter().zip(&grad) {
                assert!((adj.get(*p) - g).abs() < 1e-11, "order {order}");
            }
            for (r, row) in inputs.iter().enumerate() {
                for (c, jet) in row.iter().enumerate() {
                    for (k, &v) in jet.coeffs().iter().enumerate() {
                        assert!((adj.get(v) - gx.coeffs[k][[r, c]]).abs() < 1e-11);
                    }
                }
            }
        }
    }

    #[test]
    fn weights_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Mlp::init(vec![2, 3, 1], &mut rng).unwrap();
        let (w, b) = m.weights_and_biases();
        let back = Mlp::from_weights_and_biases(m.dims().to_vec(), &w, &b).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn rejects_orders_beyond_batched_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Mlp::init(vec![2, 3, 1], &mut rng).unwrap();
        let x = JetBatch::zeros(1, 2, 4);
        assert!(m.forward_batch(&x).is_err());
    }
}
