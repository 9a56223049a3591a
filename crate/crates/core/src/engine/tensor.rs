use super::EngineError;

/// Activations laid out as `batch x seq x hidden`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    batch: usize,
    seq: usize,
    hidden: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(batch: usize, seq: usize, hidden: usize) -> Self {
        Self {
            batch,
            seq,
            hidden,
            data: vec![0.0; batch * seq * hidden],
        }
    }

    pub fn from_vec(
        batch: usize,
        seq: usize,
        hidden: usize,
        data: Vec<f64>,
    ) -> Result<Self, EngineError> {
        if data.len() != batch * seq * hidden {
            return Err(EngineError::ShapeMismatch {
                what: "tensor buffer",
                expected: batch * seq * hidden,
                got: data.len(),
            });
        }
        Ok(Self {
            batch,
            seq,
            hidden,
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.batch, self.seq, self.hidden)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Number of positions, `batch * seq`.
    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn with_data(&self, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self {
            batch: self.batch,
            seq: self.seq,
            hidden: self.hidden,
            data,
        }
    }
}

/// `x W + b` for `x: rows x fan_in`, `W: fan_in x fan_out`.
pub(crate) fn linear(
    x: &[f64],
    rows: usize,
    w: &[f64],
    bias: Option<&[f64]>,
    fan_in: usize,
    fan_out: usize,
) -> Vec<f64> {
    debug_assert_eq!(x.len(), rows * fan_in);
    debug_assert_eq!(w.len(), fan_in * fan_out);
    let mut out = vec![0.0; rows * fan_out];
    for r in 0..rows {
        let o = &mut out[r * fan_out..(r + 1) * fan_out];
        if let Some(b) = bias {
            o.copy_from_slice(b);
        }
        for i in 0..fan_in {
            let xi = x[r * fan_in + i];
            if xi == 0.0 {
                continue;
            }
            let wr = &w[i * fan_out..(i + 1) * fan_out];
            for (ov, wv) in o.iter_mut().zip(wr) {
                *ov += xi * wv;
            }
        }
    }
    out
}

/// `dy W^T`: gradient of `x W` with respect to `x`.
pub(crate) fn linear_input_grad(
    dy: &[f64],
    rows: usize,
    w: &[f64],
    fan_in: usize,
    fan_out: usize,
) -> Vec<f64> {
    debug_assert_eq!(dy.len(), rows * fan_out);
    let mut dx = vec![0.0; rows * fan_in];
    for r in 0..rows {
        let g = &dy[r * fan_out..(r + 1) * fan_out];
        for i in 0..fan_in {
            let wr = &w[i * fan_out..(i + 1) * fan_out];
            dx[r * fan_in + i] = g.iter().zip(wr).map(|(a, b)| a * b).sum();
        }
    }
    dx
}

/// `x^T dy`: gradient of `x W` with respect to `W`.
pub(crate) fn linear_weight_grad(
    x: &[f64],
    dy: &[f64],
    rows: usize,
    fan_in: usize,
    fan_out: usize,
) -> Vec<f64> {
    let mut dw = vec![0.0; fan_in * fan_out];
    for r in 0..rows {
        let g = &dy[r * fan_out..(r + 1) * fan_out];
        for i in 0..fan_in {
            let xi = x[r * fan_in + i];
            if xi == 0.0 {
                continue;
            }
            let row = &mut dw[i * fan_out..(i + 1) * fan_out];
            for (d, gv) in row.iter_mut().zip(g) {
                *d += xi * gv;
            }
        }
    }
    dw
}

pub(crate) fn add_assign(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}
