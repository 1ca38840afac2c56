//! LSTM layer without peepholes. Gate rows are laid out input, forget,
//! output, candidate: `[i | f | o | g]`, each `h` wide.

use super::tensor::{gemm, sigmoid, Matrix};
use crate::error::{Error, Result};
use crate::seed::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// Input weights, `4h x in`.
    pub w: Matrix,
    /// Recurrent weights, `4h x h`.
    pub u: Matrix,
    /// Biases, `4h`.
    pub b: Vec<f64>,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> LstmParams {
        LstmParams {
            w: Matrix::zeros(4 * hidden, input),
            u: Matrix::zeros(4 * hidden, hidden),
            b: vec![0.0; 4 * hidden],
        }
    }

    /// Glorot-uniform weights, forget-gate bias 1, other biases 0.
    pub fn init(input: usize, hidden: usize, rng: &mut Rng) -> LstmParams {
        let lw = (6.0 / (input + 4 * hidden) as f64).sqrt();
        let lu = (6.0 / (5 * hidden) as f64).sqrt();
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].iter_mut().for_each(|x| *x = 1.0);
        LstmParams {
            w: Matrix::uniform(4 * hidden, input, lw, rng),
            u: Matrix::uniform(4 * hidden, hidden, lu, rng),
            b,
        }
    }

    pub fn hidden(&self) -> usize {
        self.u.cols
    }

    pub fn input(&self) -> usize {
        self.w.cols
    }

    pub fn check_shapes(&self) -> Result<()> {
        let h = self.hidden();
        if self.u.rows != 4 * h || self.w.rows != 4 * h || self.b.len() != 4 * h {
            return Err(Error::Shape(format!(
                "lstm W {:?}, U {:?}, b {} inconsistent with hidden {h}",
                self.w.shape(),
                self.u.shape(),
                self.b.len()
            )));
        }
        Ok(())
    }
}

/// One LSTM step for a single example.
pub fn lstm_cell(p: &LstmParams, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    p.check_shapes()?;
    let h = p.hidden();
    if x.len() != p.input() || h_prev.len() != h || c_prev.len() != h {
        return Err(Error::Shape(format!(
            "x {}, h_prev {}, c_prev {} for layer in={} h={h}",
            x.len(),
            h_prev.len(),
            c_prev.len(),
            p.input()
        )));
    }
    let mut z = p.b.clone();
    gemm(1, x.len(), 4 * h, x, false, &p.w.data, true, 1.0, &mut z);
    gemm(1, h, 4 * h, h_prev, false, &p.u.data, true, 1.0, &mut z);
    let mut hn = vec![0.0; h];
    let mut cn = vec![0.0; h];
    for j in 0..h {
        let i = sigmoid(z[j]);
        let f = sigmoid(z[h + j]);
        let o = sigmoid(z[2 * h + j]);
        let g = z[3 * h + j].tanh();
        cn[j] = f * c_prev[j] + i * g;
        hn[j] = o * cn[j].tanh();
    }
    Ok((hn, cn))
}

/// Activations of a layer over `steps` time steps for `batch` examples,
/// stored time-major: row `t * batch + b`.
pub(crate) struct LayerTrace {
    pub steps: usize,
    pub batch: usize,
    /// Post-activation gates, `[i | f | o | g]` per row.
    pub gates: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

impl LayerTrace {
    pub fn h_at(&self, t: usize, hidden: usize) -> &[f64] {
        &self.h[t * self.batch * hidden..(t + 1) * self.batch * hidden]
    }
}

/// Runs the recurrence given precomputed input projections `zin`
/// (`W x_t + b`, time-major, `steps * batch * 4h`). Initial state is zero.
pub(crate) fn layer_forward(p: &LstmParams, mut zin: Vec<f64>, steps: usize, batch: usize) -> LayerTrace {
    let h = p.hidden();
    let g4 = 4 * h;
    debug_assert_eq!(zin.len(), steps * batch * g4);
    let mut c = vec![0.0; steps * batch * h];
    let mut tanh_c = vec![0.0; steps * batch * h];
    let mut hs = vec![0.0; steps * batch * h];
    for t in 0..steps {
        let z = &mut zin[t * batch * g4..(t + 1) * batch * g4];
        if t > 0 {
            let h_prev = &hs[(t - 1) * batch * h..t * batch * h];
            gemm(batch, h, g4, h_prev, false, &p.u.data, true, 1.0, z);
        }
        for b in 0..batch {
            let zr = &mut z[b * g4..(b + 1) * g4];
            let row = (t * batch + b) * h;
            let prev = if t > 0 { Some(((t - 1) * batch + b) * h) } else { None };
            for j in 0..h {
                let i = sigmoid(zr[j]);
                let f = sigmoid(zr[h + j]);
                let o = sigmoid(zr[2 * h + j]);
                let g = zr[3 * h + j].tanh();
                zr[j] = i;
                zr[h + j] = f;
                zr[2 * h + j] = o;
                zr[3 * h + j] = g;
                let cp = prev.map_or(0.0, |r| c[r + j]);
                let cn = f * cp + i * g;
                let tc = cn.tanh();
                c[row + j] = cn;
                tanh_c[row + j] = tc;
                hs[row + j] = o * tc;
            }
        }
    }
    LayerTrace {
        steps,
        batch,
        gates: zin,
        c,
        tanh_c,
        h: hs,
    }
}

/// Backpropagation through time. `dh_ext` holds the loss gradient flowing
/// into each hidden output (time-major, same layout as `trace.h`). Returns
/// pre-activation gate gradients `dz` (time-major, `4h` per row) and
/// accumulates `dU` and `db` into `grad`. Input-side gradients are left to
/// the caller, which owns the inputs.
pub(crate) fn layer_backward(p: &LstmParams, trace: &LayerTrace, dh_ext: &[f64], grad: &mut LstmParams) -> Vec<f64> {
    let h = p.hidden();
    let g4 = 4 * h;
    let (steps, batch) = (trace.steps, trace.batch);
    let mut dz = vec![0.0; steps * batch * g4];
    let mut dh_next = vec![0.0; batch * h];
    let mut dc_next = vec![0.0; batch * h];
    for t in (0..steps).rev() {
        for b in 0..batch {
            let row = (t * batch + b) * h;
            let gr = &trace.gates[(t * batch + b) * g4..(t * batch + b + 1) * g4];
            let dzr = &mut dz[(t * batch + b) * g4..(t * batch + b + 1) * g4];
            for j in 0..h {
                let (i, f, o, g) = (gr[j], gr[h + j], gr[2 * h + j], gr[3 * h + j]);
                let tc = trace.tanh_c[row + j];
                let cp = if t > 0 { trace.c[row - batch * h + j] } else { 0.0 };
                let dh = dh_ext[row + j] + dh_next[b * h + j];
                let dc = dc_next[b * h + j] + dh * o * (1.0 - tc * tc);
                dzr[j] = dc * g * i * (1.0 - i);
                dzr[h + j] = dc * cp * f * (1.0 - f);
                dzr[2 * h + j] = dh * tc * o * (1.0 - o);
                dzr[3 * h + j] = dc * i * (1.0 - g * g);
                dc_next[b * h + j] = dc * f;
            }
        }
        if t > 0 {
            let dzt = &dz[t * batch * g4..(t + 1) * batch * g4];
            gemm(batch, g4, h, dzt, false, &p.u.data, false, 0.0, &mut dh_next);
        }
    }
    if steps > 1 {
        // dU += sum_{t>=1} dz_t^T h_{t-1}
        let rows = (steps - 1) * batch;
        gemm(g4, rows, h, &dz[batch * g4..], true, &trace.h[..rows * h], false, 1.0, &mut grad.u.data);
    }
    for r in dz.chunks_exact(g4) {
        for (gb, d) in grad.b.iter_mut().zip(r) {
            *gb += d;
        }
    }
    dz
}
