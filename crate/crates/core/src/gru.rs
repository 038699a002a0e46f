//! Gated recurrent cells, batched over columns.
//!
//! ```text
//! z  = sigmoid(Wz x + Uz h + bz)
//! r  = sigmoid(Wr x + Ur h + br)
//! n  = tanh(Wn x + Un (r * h) + bn)
//! h' = (1 - z) * n + z * h
//! ```
//! Gate rows are stacked `[z; r; n]` in `w`, `u` and `b`.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{shape_err, Result};
use crate::params::{add_bias, glorot, sum_columns, Parameters};

#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    /// `3h x in`
    pub w: DMatrix<f64>,
    /// `3h x h`
    pub u: DMatrix<f64>,
    /// `3h x 1`
    pub b: DMatrix<f64>,
}

impl GruCell {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, input: usize, hidden: usize) -> Self {
        Self {
            w: glorot(rng, 3 * hidden, input, input, hidden),
            u: glorot(rng, 3 * hidden, hidden, hidden, hidden),
            b: DMatrix::zeros(3 * hidden, 1),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w: DMatrix::zeros(3 * hidden, input),
            u: DMatrix::zeros(3 * hidden, hidden),
            b: DMatrix::zeros(3 * hidden, 1),
        }
    }

    pub fn hidden(&self) -> usize {
        self.u.ncols()
    }

    pub fn input(&self) -> usize {
        self.w.ncols()
    }

    fn check(&self, x: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<()> {
        let hd = self.hidden();
        if self.w.nrows() != 3 * hd || self.u.nrows() != 3 * hd || self.b.shape() != (3 * hd, 1) {
            return shape_err("inconsistent GRU cell parameters");
        }
        if x.nrows() != self.input() {
            return shape_err(format!(
                "GRU input has {} rows, cell expects {}",
                x.nrows(),
                self.input()
            ));
        }
        if h.nrows() != hd || h.ncols() != x.ncols() {
            return shape_err("GRU hidden state shape");
        }
        Ok(())
    }
}

impl Parameters for GruCell {
    fn tensors(&self) -> Vec<(String, &DMatrix<f64>)> {
        vec![("w".into(), &self.w), ("u".into(), &self.u), ("b".into(), &self.b)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        vec![&mut self.w, &mut self.u, &mut self.b]
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[derive(Debug, Clone)]
pub struct StepCache {
    x: DMatrix<f64>,
    h: DMatrix<f64>,
    z: DMatrix<f64>,
    r: DMatrix<f64>,
    n: DMatrix<f64>,
}

/// One recurrence step; returns the new hidden state.
pub fn gru_step(x: &DMatrix<f64>, h: &DMatrix<f64>, cell: &GruCell) -> Result<DMatrix<f64>> {
    Ok(gru_step_cached(x, h, cell)?.0)
}

pub fn gru_step_cached(x: &DMatrix<f64>, h: &DMatrix<f64>, cell: &GruCell) -> Result<(DMatrix<f64>, StepCache)> {
    cell.check(x, h)?;
    let hd = cell.hidden();
    let mut a = &cell.w * x;
    add_bias(&mut a, &cell.b);
    a.rows_mut(0, 2 * hd).gemm(1.0, &cell.u.rows(0, 2 * hd), h, 1.0);
    let z = a.rows(0, hd).map(sigmoid);
    let r = a.rows(hd, hd).map(sigmoid);
    let rh = r.component_mul(h);
    let mut an = a.rows(2 * hd, hd).into_owned();
    an.gemm(1.0, &cell.u.rows(2 * hd, hd), &rh, 1.0);
    let n = an.map(f64::tanh);
    let h_new = DMatrix::from_fn(hd, h.ncols(), |i, j| {
        (1.0 - z[(i, j)]) * n[(i, j)] + z[(i, j)] * h[(i, j)]
    });
    Ok((
        h_new,
        StepCache {
            x: x.clone(),
            h: h.clone(),
            z,
            r,
            n,
        },
    ))
}

/// Returns `(dx, dh, d cell)` for upstream `dh_new`.
pub fn gru_step_backward(
    cache: &StepCache,
    cell: &GruCell,
    dh_new: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>, GruCell) {
    let hd = cell.hidden();
    let StepCache { x, h, z, r, n } = cache;
    let cols = h.ncols();
    let mut da = DMatrix::zeros(3 * hd, cols);
    let mut dh = dh_new.component_mul(z);
    let rh = r.component_mul(h);
    for j in 0..cols {
        for i in 0..hd {
            let g = dh_new[(i, j)];
            let dn = g * (1.0 - z[(i, j)]);
            let dz = g * (h[(i, j)] - n[(i, j)]);
            da[(2 * hd + i, j)] = dn * (1.0 - n[(i, j)] * n[(i, j)]);
            da[(i, j)] = dz * z[(i, j)] * (1.0 - z[(i, j)]);
        }
    }
    let da_n = da.rows(2 * hd, hd).into_owned();
    let drh = cell.u.rows(2 * hd, hd).transpose() * &da_n;
    for j in 0..cols {
        for i in 0..hd {
            let dr = drh[(i, j)] * h[(i, j)];
            dh[(i, j)] += drh[(i, j)] * r[(i, j)];
            da[(hd + i, j)] = dr * r[(i, j)] * (1.0 - r[(i, j)]);
        }
    }
    let dw = &da * x.transpose();
    let mut du = DMatrix::zeros(3 * hd, hd);
    du.rows_mut(0, 2 * hd)
        .gemm(1.0, &da.rows(0, 2 * hd), &h.transpose(), 0.0);
    du.rows_mut(2 * hd, hd).gemm(1.0, &da_n, &rh.transpose(), 0.0);
    let db = sum_columns(&da);
    let dx = cell.w.transpose() * &da;
    dh.gemm(1.0, &cell.u.rows(0, 2 * hd).transpose(), &da.rows(0, 2 * hd), 1.0);
    (dx, dh, GruCell { w: dw, u: du, b: db })
}

/// Runs a cell over `xs` from a zero state; returns the hidden state after
/// every step.
pub fn run_sequence(cell: &GruCell, xs: &[DMatrix<f64>]) -> Result<(Vec<DMatrix<f64>>, Vec<StepCache>)> {
    let cols = xs.first().map_or(1, |x| x.ncols());
    let mut h = DMatrix::zeros(cell.hidden(), cols);
    let mut hs = Vec::with_capacity(xs.len());
    let mut caches = Vec::with_capacity(xs.len());
    for x in xs {
        let (hn, c) = gru_step_cached(x, &h, cell)?;
        hs.push(hn.clone());
        caches.push(c);
        h = hn;
    }
    Ok((hs, caches))
}

/// Backpropagation through time given the gradient on every output state.
/// Returns `(d inputs, d cell)`.
pub fn run_sequence_backward(
    cell: &GruCell,
    caches: &[StepCache],
    d_outputs: &[DMatrix<f64>],
) -> (Vec<DMatrix<f64>>, GruCell) {
    let mut grads = cell.zeros_like();
    let mut dxs = vec![DMatrix::zeros(0, 0); caches.len()];
    let mut carry: Option<DMatrix<f64>> = None;
    for t in (0..caches.len()).rev() {
        let mut dh = d_outputs[t].clone();
        if let Some(c) = &carry {
            dh += c;
        }
        let (dx, dh_prev, g) = gru_step_backward(&caches[t], cell, &dh);
        grads.accumulate(&g);
        dxs[t] = dx;
        carry = Some(dh_prev);
    }
    (dxs, grads)
}
