//! Reverse-mode tape over scalar operations.
//!
//! Every arithmetic operation on a [`Var`] appends one node holding the
//! indices of its (at most two) parents and the local partial derivatives.
//! A backward sweep in reverse recording order accumulates adjoints.
//!
//! Constants are not recorded: a `Var` built with [`Tape::constant`] carries
//! no node index, so operations between constants stay off the tape.
//!
//! The sweep can be run in pieces ([`Tape::sweep`]) so that a caller can
//! inject adjoints for intermediate variables between pieces. The trainer
//! uses this to splice hand-written batched layer backward passes into the
//! middle of a recorded computation.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::scalar::Scalar;
use crate::error::JetError;

const NONE: u32 = u32::MAX;

#[derive(Clone, Copy, Debug)]
struct Node {
    parents: [u32; 2],
    partials: [f64; 2],
}

#[derive(Default, Debug)]
struct TapeInner {
    nodes: Vec<Node>,
    values: Vec<f64>,
}

/// Recording of elementary operations for reverse-mode differentiation.
#[derive(Default, Debug)]
pub struct Tape {
    inner: RefCell<TapeInner>,
}

/// A scalar whose operations are recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: u32,
    value: f64,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.index == NONE {
            write!(f, "Var(const {})", self.value)
        } else {
            write!(f, "Var(#{} = {})", self.index, self.value)
        }
    }
}

/// Adjoint accumulator for one backward pass.
#[derive(Clone, Debug)]
pub struct Adjoints {
    values: Vec<f64>,
}

impl Adjoints {
    /// Adds `g` to the adjoint of `var`. Constants are ignored.
    pub fn accumulate(&mut self, var: Var<'_>, g: f64) {
        if var.index != NONE {
            self.values[var.index as usize] += g;
        }
    }

    pub fn get(&self, var: Var<'_>) -> f64 {
        if var.index == NONE {
            0.0
        } else {
            self.values[var.index as usize]
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Tape {
            inner: RefCell::new(TapeInner {
                nodes: Vec::with_capacity(n),
                values: Vec::with_capacity(n),
            }),
        }
    }

    /// Number of recorded nodes; doubles as a position mark for [`Tape::sweep`].
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// An independent variable (a leaf node).
    pub fn var(&self, value: f64) -> Var<'_> {
        self.push([NONE, NONE], [0.0, 0.0], value)
    }

    pub fn constant(&self, value: f64) -> Var<'_> {
        Var {
            tape: self,
            index: NONE,
            value,
        }
    }

    fn push(&self, parents: [u32; 2], partials: [f64; 2], value: f64) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let index = inner.nodes.len();
        assert!(index < NONE as usize, "tape overflow");
        inner.nodes.push(Node { parents, partials });
        inner.values.push(value);
        Var {
            tape: self,
            index: index as u32,
            value,
        }
    }

    fn unary(&self, a: Var<'_>, da: f64, value: f64) -> Var<'_> {
        if a.index == NONE {
            self.constant(value)
        } else {
            self.push([a.index, NONE], [da, 0.0], value)
        }
    }

    fn binary(&self, a: Var<'_>, b: Var<'_>, da: f64, db: f64, value: f64) -> Var<'_> {
        match (a.index == NONE, b.index == NONE) {
            (true, true) => self.constant(value),
            (false, true) => self.push([a.index, NONE], [da, 0.0], value),
            (true, false) => self.push([b.index, NONE], [db, 0.0], value),
            (false, false) => self.push([a.index, b.index], [da, db], value),
        }
    }

    pub fn adjoints(&self) -> Adjoints {
        Adjoints {
            values: vec![0.0; self.len()],
        }
    }

    /// Propagates adjoints through nodes `[to, from)` in reverse order.
    pub fn sweep(&self, adj: &mut Adjoints, from: usize, to: usize) {
        let inner = self.inner.borrow();
        if adj.values.len() < inner.nodes.len() {
            adj.values.resize(inner.nodes.len(), 0.0);
        }
        for i in (to..from).rev() {
            let g = adj.values[i];
            if g == 0.0 {
                continue;
            }
            let node = inner.nodes[i];
            for k in 0..2 {
                let p = node.parents[k];
                if p != NONE {
                    adj.values[p as usize] += g * node.partials[k];
                }
            }
        }
    }

    /// Full backward pass from `output`.
    pub fn backward(&self, output: Var<'_>) -> Adjoints {
        let mut adj = self.adjoints();
        adj.accumulate(output, 1.0);
        self.sweep(&mut adj, self.len(), 0);
        adj
    }

    /// Index of the first recorded node with a non-finite value.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.inner.borrow().values.iter().position(|v| !v.is_finite())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn index(&self) -> Option<usize> {
        (self.index != NONE).then_some(self.index as usize)
    }

    pub fn is_constant(&self) -> bool {
        self.index == NONE
    }
}

impl<'t> Scalar for Var<'t> {
    #[inline]
    fn value(self) -> f64 {
        self.value
    }

    #[inline]
    fn lift(self, v: f64) -> Self {
        self.tape.constant(v)
    }

    #[inline]
    fn chain(self, value: f64, derivative: f64) -> Self {
        self.tape.unary(self, derivative, value)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self, rhs, 1.0, 1.0, self.value + rhs.value)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self, rhs, 1.0, -1.0, self.value - rhs.value)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self, rhs, rhs.value, self.value, self.value * rhs.value)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let inv = 1.0 / rhs.value;
        let value = self.value / rhs.value;
        self.tape.binary(self, rhs, inv, -value * inv, value)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.unary(self, -1.0, -self.value)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.tape.unary(self, 1.0, self.value + rhs)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.tape.unary(self, 1.0, self.value - rhs)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.tape.unary(self, rhs, self.value * rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Var<'t> {
        self.tape.unary(self, 1.0 / rhs, self.value / rhs)
    }
}

/// Gradient of a scalar loss with respect to `params`.
///
/// `loss` receives the tape and one leaf variable per parameter. Parameters
/// that do not influence the loss receive gradient zero. A non-finite loss
/// is refused with the index of the first non-finite node on the tape.
pub fn grad_scalar<F>(params: &[f64], loss: F) -> Result<(f64, Vec<f64>), JetError>
where
    F: for<'t> FnOnce(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, JetError>,
{
    let tape = Tape::new();
    let leaves: Vec<Var<'_>> = params.iter().map(|&p| tape.var(p)).collect();
    let out = loss(&tape, &leaves)?;
    if !out.value.is_finite() {
        let node = tape.first_non_finite().unwrap_or(tape.len());
        return Err(JetError::NonFiniteNode {
            node,
            len: tape.len(),
        });
    }
    let adj = tape.backward(out);
    Ok((out.value, leaves.iter().map(|&v| adj.get(v)).collect()))
}
