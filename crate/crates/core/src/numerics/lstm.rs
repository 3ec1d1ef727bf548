//! Single-direction LSTM layer with hand-derived backpropagation through time.
//!
//! Gate order in the stacked weight matrices is input, forget, cell, output.

use crate::scalar::Scalar;

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Per-step activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LstmCache<T> {
    /// `[steps, 4H]` post-activation gates (i, f, g, o).
    gates: Vec<T>,
    /// `[steps, H]` cell states.
    cells: Vec<T>,
    /// `[steps, H]` `tanh(c_t)`.
    cell_tanh: Vec<T>,
}

/// Runs the layer over `x` (`[steps, d_in]`), returning hidden states
/// `[steps, H]`. Initial hidden and cell states are zero.
pub fn forward<T: Scalar>(
    x: &[T],
    steps: usize,
    d_in: usize,
    hidden: usize,
    w_ih: &[T],
    w_hh: &[T],
    bias: &[T],
) -> (Vec<T>, LstmCache<T>) {
    let g4 = 4 * hidden;
    // Input projections for every step at once: [steps, 4H].
    let mut pre = vec![T::zero(); steps * g4];
    T::gemm(
        steps,
        d_in,
        g4,
        T::one(),
        (x, d_in as isize, 1),
        (w_ih, 1, d_in as isize),
        T::zero(),
        (&mut pre, g4 as isize, 1),
    );
    let mut h = vec![T::zero(); steps * hidden];
    let mut gates = vec![T::zero(); steps * g4];
    let mut cells = vec![T::zero(); steps * hidden];
    let mut cell_tanh = vec![T::zero(); steps * hidden];
    for t in 0..steps {
        let row = &mut pre[t * g4..(t + 1) * g4];
        for (r, &b) in row.iter_mut().zip(bias) {
            *r += b;
        }
        if t > 0 {
            let h_prev = &h[(t - 1) * hidden..t * hidden];
            for (j, r) in row.iter_mut().enumerate() {
                let w = &w_hh[j * hidden..(j + 1) * hidden];
                *r += w.iter().zip(h_prev).map(|(&a, &b)| a * b).sum::<T>();
            }
        }
        let gt = &mut gates[t * g4..(t + 1) * g4];
        for j in 0..hidden {
            let i = sigmoid(row[j]);
            let f = sigmoid(row[hidden + j]);
            let g = row[2 * hidden + j].tanh();
            let o = sigmoid(row[3 * hidden + j]);
            gt[j] = i;
            gt[hidden + j] = f;
            gt[2 * hidden + j] = g;
            gt[3 * hidden + j] = o;
            let c_prev = if t > 0 { cells[(t - 1) * hidden + j] } else { T::zero() };
            let c = f * c_prev + i * g;
            let tc = c.tanh();
            cells[t * hidden + j] = c;
            cell_tanh[t * hidden + j] = tc;
            h[t * hidden + j] = o * tc;
        }
    }
    (
        h,
        LstmCache {
            gates,
            cells,
            cell_tanh,
        },
    )
}

pub struct LstmGrads<T> {
    pub dx: Vec<T>,
    pub dw_ih: Vec<T>,
    pub dw_hh: Vec<T>,
    pub dbias: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub fn backward<T: Scalar>(
    x: &[T],
    steps: usize,
    d_in: usize,
    hidden: usize,
    w_ih: &[T],
    w_hh: &[T],
    h: &[T],
    cache: &LstmCache<T>,
    dh_out: &[T],
) -> LstmGrads<T> {
    let g4 = 4 * hidden;
    let one = T::one();
    // Gradient wrt gate pre-activations, [steps, 4H].
    let mut dpre = vec![T::zero(); steps * g4];
    let mut dh_next = vec![T::zero(); hidden];
    let mut dc_next = vec![T::zero(); hidden];
    let mut dw_hh = vec![T::zero(); g4 * hidden];
    for t in (0..steps).rev() {
        let gt = &cache.gates[t * g4..(t + 1) * g4];
        let dp = &mut dpre[t * g4..(t + 1) * g4];
        for j in 0..hidden {
            let (i, f, g, o) = (gt[j], gt[hidden + j], gt[2 * hidden + j], gt[3 * hidden + j]);
            let tc = cache.cell_tanh[t * hidden + j];
            let dh = dh_out[t * hidden + j] + dh_next[j];
            let d_o = dh * tc;
            let dc = dc_next[j] + dh * o * (one - tc * tc);
            let c_prev = if t > 0 { cache.cells[(t - 1) * hidden + j] } else { T::zero() };
            let di = dc * g;
            let df = dc * c_prev;
            let dg = dc * i;
            dc_next[j] = dc * f;
            dp[j] = di * i * (one - i);
            dp[hidden + j] = df * f * (one - f);
            dp[2 * hidden + j] = dg * (one - g * g);
            dp[3 * hidden + j] = d_o * o * (one - o);
        }
        // dh_{t-1} = W_hh^T dpre_t ; dW_hh += dpre_t h_{t-1}^T
        dh_next.iter_mut().for_each(|v| *v = T::zero());
        if t > 0 {
            let h_prev = &h[(t - 1) * hidden..t * hidden];
            for (r, &dv) in dp.iter().enumerate() {
                let w = &w_hh[r * hidden..(r + 1) * hidden];
                let dw = &mut dw_hh[r * hidden..(r + 1) * hidden];
                for k in 0..hidden {
                    dh_next[k] += w[k] * dv;
                    dw[k] += dv * h_prev[k];
                }
            }
        }
    }
    let mut dx = vec![T::zero(); steps * d_in];
    T::gemm(
        steps,
        g4,
        d_in,
        one,
        (&dpre, g4 as isize, 1),
        (w_ih, d_in as isize, 1),
        T::zero(),
        (&mut dx, d_in as isize, 1),
    );
    let mut dw_ih = vec![T::zero(); g4 * d_in];
    T::gemm(
        g4,
        steps,
        d_in,
        one,
        (&dpre, 1, g4 as isize),
        (x, d_in as isize, 1),
        T::zero(),
        (&mut dw_ih, d_in as isize, 1),
    );
    let mut dbias = vec![T::zero(); g4];
    for t in 0..steps {
        for (b, &v) in dbias.iter_mut().zip(&dpre[t * g4..(t + 1) * g4]) {
            *b += v;
        }
    }
    LstmGrads {
        dx,
        dw_ih,
        dw_hh,
        dbias,
    }
}
