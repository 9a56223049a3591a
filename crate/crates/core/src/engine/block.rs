//! Post-norm transformer block with a serial adapter after the feed-forward
//! "add & norm" sublayer, plus its hand-written backward pass.

use super::grads::AdapterGrads;
use super::params::{gelu, gelu_derivative, Activation, AdapterParams, LayerNorm, TrmBlockParams};
use super::tensor::{add_assign, linear, linear_input_grad, linear_weight_grad, Tensor3};
use super::EngineError;

const LN_EPS: f64 = 1e-5;

/// Intermediates of one block forward, enough to run its backward without recompute.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCache {
    batch: usize,
    seq: usize,
    hidden: usize,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `batch x heads x seq x seq`
    probs: Vec<f64>,
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    x1: Vec<f64>,
    ffn_pre: Vec<f64>,
    ffn_act: Vec<f64>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
    /// Adapter input (block output when no adapter is present).
    x2: Vec<f64>,
    adapter: Option<AdapterCache>,
}

#[derive(Debug, Clone, PartialEq)]
struct AdapterCache {
    pre: Vec<f64>,
    act: Vec<f64>,
}

impl BlockCache {
    /// Scalars held by this cache.
    pub fn len(&self) -> usize {
        self.q.len() * 3
            + self.probs.len()
            + self.xhat1.len()
            + self.rstd1.len()
            + self.x1.len()
            + self.ffn_pre.len()
            + self.ffn_act.len()
            + self.xhat2.len()
            + self.rstd2.len()
            + self.x2.len()
            + self
                .adapter
                .as_ref()
                .map_or(0, |a| a.pre.len() + a.act.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_adapter(hidden: usize, p: &AdapterParams) -> Result<(), EngineError> {
    if p.hidden != hidden {
        return Err(EngineError::ShapeMismatch {
            what: "adapter hidden dim",
            expected: hidden,
            got: p.hidden,
        });
    }
    let expect = p.hidden * p.bottleneck;
    if p.down.len() != expect || p.up.len() != expect {
        return Err(EngineError::ShapeMismatch {
            what: "adapter weights",
            expected: expect,
            got: p.down.len().max(p.up.len()),
        });
    }
    Ok(())
}

fn adapter_rows(
    x: &[f64],
    rows: usize,
    p: &AdapterParams,
    act: Activation,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let pre = linear(x, rows, &p.down, None, p.hidden, p.bottleneck);
    let a: Vec<f64> = pre.iter().map(|&z| act.apply(z)).collect();
    let mut out = linear(&a, rows, &p.up, None, p.bottleneck, p.hidden);
    add_assign(&mut out, x);
    (pre, a, out)
}

/// `h + act(h W_down) W_up`, position-wise.
pub fn adapter_forward(
    h: &Tensor3,
    p: &AdapterParams,
    act: Activation,
) -> Result<Tensor3, EngineError> {
    check_adapter(h.hidden(), p)?;
    let (_, _, out) = adapter_rows(h.data(), h.rows(), p, act);
    Ok(h.with_data(out))
}

fn layer_norm_rows(
    x: &[f64],
    rows: usize,
    n: usize,
    ln: &LayerNorm,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; rows * n];
    let mut rstd = vec![0.0; rows];
    let mut y = vec![0.0; rows * n];
    for r in 0..rows {
        let row = &x[r * n..(r + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for i in 0..n {
            let xh = (row[i] - mean) * rs;
            xhat[r * n + i] = xh;
            y[r * n + i] = ln.gain[i] * xh + ln.bias[i];
        }
    }
    (xhat, rstd, y)
}

fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    rows: usize,
    n: usize,
    ln: &LayerNorm,
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * n];
    let mut dxhat = vec![0.0; n];
    for r in 0..rows {
        let xh = &xhat[r * n..(r + 1) * n];
        for i in 0..n {
            dxhat[i] = dy[r * n + i] * ln.gain[i];
        }
        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        for i in 0..n {
            dx[r * n + i] = rstd[r] * (dxhat[i] - mean_d - xh[i] * mean_dx);
        }
    }
    dx
}

struct AttentionDims {
    batch: usize,
    seq: usize,
    heads: usize,
    head_dim: usize,
}

impl AttentionDims {
    fn hidden(&self) -> usize {
        self.heads * self.head_dim
    }

    fn scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }
}

fn attention_forward(q: &[f64], k: &[f64], v: &[f64], d: &AttentionDims) -> (Vec<f64>, Vec<f64>) {
    let n = d.hidden();
    let s = d.seq;
    let mut probs = vec![0.0; d.batch * d.heads * s * s];
    let mut ctx = vec![0.0; d.batch * s * n];
    let mut scores = vec![0.0; s];
    for b in 0..d.batch {
        for h in 0..d.heads {
            let off = h * d.head_dim;
            for i in 0..s {
                let qi = &q[(b * s + i) * n + off..(b * s + i) * n + off + d.head_dim];
                for (j, sc) in scores.iter_mut().enumerate() {
                    let kj = &k[(b * s + j) * n + off..(b * s + j) * n + off + d.head_dim];
                    *sc = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * d.scale();
                }
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for sc in scores.iter_mut() {
                    *sc = (*sc - max).exp();
                    z += *sc;
                }
                let p_row = &mut probs
                    [((b * d.heads + h) * s + i) * s..((b * d.heads + h) * s + i + 1) * s];
                for (p, sc) in p_row.iter_mut().zip(&scores) {
                    *p = sc / z;
                }
                let c = &mut ctx[(b * s + i) * n + off..(b * s + i) * n + off + d.head_dim];
                for (j, &p) in p_row.iter().enumerate() {
                    let vj = &v[(b * s + j) * n + off..(b * s + j) * n + off + d.head_dim];
                    for (cv, vv) in c.iter_mut().zip(vj) {
                        *cv += p * vv;
                    }
                }
            }
        }
    }
    (probs, ctx)
}

fn attention_backward(
    dctx: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    d: &AttentionDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = d.hidden();
    let s = d.seq;
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; s];
    for b in 0..d.batch {
        for h in 0..d.heads {
            let off = h * d.head_dim;
            for i in 0..s {
                let ri = (b * s + i) * n + off;
                let dci = &dctx[ri..ri + d.head_dim];
                let p_row =
                    &probs[((b * d.heads + h) * s + i) * s..((b * d.heads + h) * s + i + 1) * s];
                for j in 0..s {
                    let rj = (b * s + j) * n + off;
                    dp[j] = dci
                        .iter()
                        .zip(&v[rj..rj + d.head_dim])
                        .map(|(x, y)| x * y)
                        .sum();
                    for t in 0..d.head_dim {
                        dv[rj + t] += p_row[j] * dci[t];
                    }
                }
                let dot: f64 = p_row.iter().zip(&dp).map(|(p, g)| p * g).sum();
                for j in 0..s {
                    let ds = p_row[j] * (dp[j] - dot) * d.scale();
                    if ds == 0.0 {
                        continue;
                    }
                    let rj = (b * s + j) * n + off;
                    for t in 0..d.head_dim {
                        dq[ri + t] += ds * k[rj + t];
                        dk[rj + t] += ds * q[ri + t];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

/// One transformer block followed by the adapter when one is given.
pub fn block_forward(
    x: &Tensor3,
    block: &TrmBlockParams,
    adapter: Option<&AdapterParams>,
    act: Activation,
    num_heads: usize,
    keep_cache: bool,
) -> Result<(Tensor3, Option<BlockCache>), EngineError> {
    let (batch, seq, n) = x.dims();
    if block.query.fan_in != n {
        return Err(EngineError::ShapeMismatch {
            what: "block hidden dim",
            expected: block.query.fan_in,
            got: n,
        });
    }
    if num_heads == 0 || n % num_heads != 0 {
        return Err(EngineError::ShapeMismatch {
            what: "attention heads",
            expected: n,
            got: num_heads,
        });
    }
    if let Some(p) = adapter {
        check_adapter(n, p)?;
    }
    let rows = x.rows();
    let xs = x.data();
    let f = block.ffn_in.fan_out;
    let dims = AttentionDims {
        batch,
        seq,
        heads: num_heads,
        head_dim: n / num_heads,
    };

    let q = linear(xs, rows, &block.query.weight, Some(&block.query.bias), n, n);
    let k = linear(xs, rows, &block.key.weight, Some(&block.key.bias), n, n);
    let v = linear(xs, rows, &block.value.weight, Some(&block.value.bias), n, n);
    let (probs, ctx) = attention_forward(&q, &k, &v, &dims);
    let mut s1 = linear(
        &ctx,
        rows,
        &block.output.weight,
        Some(&block.output.bias),
        n,
        n,
    );
    add_assign(&mut s1, xs);
    let (xhat1, rstd1, x1) = layer_norm_rows(&s1, rows, n, &block.attn_norm);

    let ffn_pre = linear(
        &x1,
        rows,
        &block.ffn_in.weight,
        Some(&block.ffn_in.bias),
        n,
        f,
    );
    let ffn_act: Vec<f64> = ffn_pre.iter().map(|&z| gelu(z)).collect();
    let mut s2 = linear(
        &ffn_act,
        rows,
        &block.ffn_out.weight,
        Some(&block.ffn_out.bias),
        f,
        n,
    );
    add_assign(&mut s2, &x1);
    let (xhat2, rstd2, x2) = layer_norm_rows(&s2, rows, n, &block.ffn_norm);

    let (out, adapter_cache) = match adapter {
        Some(p) => {
            let (pre, a, out) = adapter_rows(&x2, rows, p, act);
            (out, Some(AdapterCache { pre, act: a }))
        }
        None => (x2.clone(), None),
    };
    if out.iter().any(|v| !v.is_finite()) {
        return Err(EngineError::NonFiniteActivation { layer: None });
    }
    let cache = keep_cache.then_some(BlockCache {
        batch,
        seq,
        hidden: n,
        q,
        k,
        v,
        probs,
        xhat1,
        rstd1,
        x1,
        ffn_pre,
        ffn_act,
        xhat2,
        rstd2,
        x2,
        adapter: adapter_cache,
    });
    Ok((x.with_data(out), cache))
}

/// Backward of [`block_forward`] given `d_out`, the gradient at the block output.
///
/// Adapter weight gradients are formed when the block ran with an adapter. The
/// frozen block weights never get gradients; with `need_input_grad` the
/// activation gradient is carried through them to the block input.
pub(crate) fn block_backward(
    d_out: &[f64],
    cache: &BlockCache,
    block: &TrmBlockParams,
    adapter: Option<&AdapterParams>,
    act: Activation,
    num_heads: usize,
    need_input_grad: bool,
) -> Result<(Option<Vec<f64>>, Option<AdapterGrads>), EngineError> {
    let n = cache.hidden;
    let rows = cache.batch * cache.seq;
    if d_out.len() != rows * n {
        return Err(EngineError::ShapeMismatch {
            what: "block output gradient",
            expected: rows * n,
            got: d_out.len(),
        });
    }
    let f = block.ffn_in.fan_out;

    let (dx2, grads) = match (adapter, &cache.adapter) {
        (Some(p), Some(ac)) => {
            let m = p.bottleneck;
            let d_up = linear_weight_grad(&ac.act, d_out, rows, m, n);
            let dr = linear_input_grad(d_out, rows, &p.up, m, n);
            let dz: Vec<f64> = dr
                .iter()
                .zip(&ac.pre)
                .map(|(g, &z)| g * act.derivative(z))
                .collect();
            let d_down = linear_weight_grad(&cache.x2, &dz, rows, n, m);
            let mut dx2 = linear_input_grad(&dz, rows, &p.down, n, m);
            add_assign(&mut dx2, d_out);
            (
                dx2,
                Some(AdapterGrads {
                    down: d_down,
                    up: d_up,
                }),
            )
        }
        (None, None) => (d_out.to_vec(), None),
        _ => return Err(EngineError::MissingCache { layer: None }),
    };
    if !need_input_grad {
        return Ok((None, grads));
    }

    // ffn sublayer
    let ds2 = layer_norm_backward(&dx2, &cache.xhat2, &cache.rstd2, rows, n, &block.ffn_norm);
    let dact = linear_input_grad(&ds2, rows, &block.ffn_out.weight, f, n);
    let dpre: Vec<f64> = dact
        .iter()
        .zip(&cache.ffn_pre)
        .map(|(g, &z)| g * gelu_derivative(z))
        .collect();
    let mut dx1 = linear_input_grad(&dpre, rows, &block.ffn_in.weight, n, f);
    add_assign(&mut dx1, &ds2);

    // attention sublayer
    let ds1 = layer_norm_backward(&dx1, &cache.xhat1, &cache.rstd1, rows, n, &block.attn_norm);
    let dctx = linear_input_grad(&ds1, rows, &block.output.weight, n, n);
    let dims = AttentionDims {
        batch: cache.batch,
        seq: cache.seq,
        heads: num_heads,
        head_dim: n / num_heads,
    };
    let (dq, dk, dv) = attention_backward(&dctx, &cache.q, &cache.k, &cache.v, &cache.probs, &dims);
    let mut dx = ds1;
    add_assign(
        &mut dx,
        &linear_input_grad(&dq, rows, &block.query.weight, n, n),
    );
    add_assign(
        &mut dx,
        &linear_input_grad(&dk, rows, &block.key.weight, n, n),
    );
    add_assign(
        &mut dx,
        &linear_input_grad(&dv, rows, &block.value.weight, n, n),
    );
    Ok((Some(dx), grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::LMSpec;
    use crate::engine::params::{InitOptions, ModelParams};

    fn toy() -> ModelParams {
        let spec = LMSpec {
            num_layers: 1,
            hidden_dim: 8,
            bottleneck_dim: 3,
            num_heads: 2,
            vocab_size: 5,
            seq_len: 4,
            num_classes: 2,
            scalar_bytes: 8,
        };
        let opts = InitOptions {
            pretrained_std: 0.3,
            adapter_down_std: 0.5,
            adapter_up_std: 0.5,
            head_std: 0.1,
        };
        ModelParams::init(&spec, Activation::Relu, &opts, 11).unwrap()
    }

    fn input(seed: u64) -> Tensor3 {
        let data = (0..2 * 4 * 8)
            .map(|i| ((i as f64 + seed as f64) * 0.37).sin())
            .collect();
        Tensor3::from_vec(2, 4, 8, data).unwrap()
    }

    #[test]
    fn adapter_examples() {
        let p = AdapterParams::new(1, 1, vec![1.0], vec![0.5]).unwrap();
        let h = Tensor3::from_vec(1, 1, 1, vec![2.0]).unwrap();
        assert_eq!(
            adapter_forward(&h, &p, Activation::Relu).unwrap().data(),
            &[3.0]
        );
        let h = Tensor3::from_vec(1, 1, 1, vec![-2.0]).unwrap();
        assert_eq!(
            adapter_forward(&h, &p, Activation::Relu).unwrap().data(),
            &[-2.0]
        );
    }

    #[test]
    fn zero_up_projection_is_identity() {
        let mut m = toy();
        m.adapters[0].up.iter_mut().for_each(|v| *v = 0.0);
        let x = input(3);
        assert_eq!(
            adapter_forward(&x, &m.adapters[0], Activation::Relu).unwrap(),
            x
        );
        let (with, _) = block_forward(
            &x,
            &m.blocks[0],
            Some(&m.adapters[0]),
            Activation::Gelu,
            2,
            false,
        )
        .unwrap();
        let (without, _) =
            block_forward(&x, &m.blocks[0], None, Activation::Gelu, 2, false).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn adapter_shape_mismatch() {
        let p = AdapterParams::new(4, 2, vec![0.0; 8], vec![0.0; 8]).unwrap();
        let h = Tensor3::zeros(1, 1, 3);
        assert!(matches!(
            adapter_forward(&h, &p, Activation::Relu),
            Err(EngineError::ShapeMismatch { .. })
        ));
        assert!(AdapterParams::new(4, 2, vec![0.0; 7], vec![0.0; 8]).is_err());
    }

    #[test]
    fn block_forward_is_deterministic() {
        let m = toy();
        let x = input(1);
        let a = block_forward(
            &x,
            &m.blocks[0],
            Some(&m.adapters[0]),
            Activation::Relu,
            2,
            true,
        )
        .unwrap();
        let b = block_forward(
            &x,
            &m.blocks[0],
            Some(&m.adapters[0]),
            Activation::Relu,
            2,
            true,
        )
        .unwrap();
        assert_eq!(a, b);
        assert!(a.1.is_some());
    }

    #[test]
    fn non_finite_input_is_reported() {
        let m = toy();
        let mut x = input(1);
        x.data_mut()[0] = f64::NAN;
        assert!(matches!(
            block_forward(&x, &m.blocks[0], None, Activation::Relu, 2, false),
            Err(EngineError::NonFiniteActivation { .. })
        ));
    }

    /// Scalar probe `sum(out * w)` for a fixed weighting `w`.
    fn probe(x: &Tensor3, m: &ModelParams, act: Activation) -> f64 {
        let (y, _) = block_forward(x, &m.blocks[0], Some(&m.adapters[0]), act, 2, false).unwrap();
        y.data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * ((i as f64) * 0.11).cos())
            .sum()
    }

    #[test]
    fn block_input_and_adapter_gradients_match_finite_differences() {
        for act in [Activation::Relu, Activation::Gelu] {
            let m = toy();
            let x = input(7);
            let (y, cache) =
                block_forward(&x, &m.blocks[0], Some(&m.adapters[0]), act, 2, true).unwrap();
            let w: Vec<f64> = (0..y.data().len())
                .map(|i| ((i as f64) * 0.11).cos())
                .collect();
            let (dx, grads) = block_backward(
                &w,
                cache.as_ref().unwrap(),
                &m.blocks[0],
                Some(&m.adapters[0]),
                act,
                2,
                true,
            )
            .unwrap();
            let dx = dx.unwrap();
            let grads = grads.unwrap();
            let eps = 1e-5;
            for (i, &dxi) in dx.iter().enumerate() {
                let mut xp = x.clone();
                xp.data_mut()[i] += eps;
                let mut xm = x.clone();
                xm.data_mut()[i] -= eps;
                let fd = (probe(&xp, &m, act) - probe(&xm, &m, act)) / (2.0 * eps);
                assert!(
                    (fd - dxi).abs() <= 1e-6 * fd.abs().max(1.0),
                    "{act:?} dx[{i}]: {fd} vs {dxi}"
                );
            }
            for i in 0..m.adapters[0].down.len() {
                let mut mp = m.clone();
                mp.adapters[0].down[i] += eps;
                let mut mm = m.clone();
                mm.adapters[0].down[i] -= eps;
                let fd = (probe(&x, &mp, act) - probe(&x, &mm, act)) / (2.0 * eps);
                assert!(
                    (fd - grads.down[i]).abs() <= 1e-6 * fd.abs().max(1.0),
                    "{act:?} down[{i}]"
                );
                let mut mp = m.clone();
                mp.adapters[0].up[i] += eps;
                let mut mm = m.clone();
                mm.adapters[0].up[i] -= eps;
                let fd = (probe(&x, &mp, act) - probe(&x, &mm, act)) / (2.0 * eps);
                assert!(
                    (fd - grads.up[i]).abs() <= 1e-6 * fd.abs().max(1.0),
                    "{act:?} up[{i}]"
                );
            }
        }
    }
}
