// Raw loops behind the tape's heavier nodes. Row-major slices in, row-major
// vectors out; shape checking happens in the callers.

/// `a[m×k] · b[k×n]`.
pub fn matmul_forward(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
    out
}

/// Adjoints of `a·b` given the upstream gradient `g[m×n]`.
pub(crate) fn matmul_backward(
    a: &[f64],
    b: &[f64],
    g: &[f64],
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut ga = vec![0.0; m * k];
    let mut gb = vec![0.0; k * n];
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            ga[i * k + p] = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            let a_ip = a[i * k + p];
            if a_ip != 0.0 {
                for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(g_row) {
                    *o += a_ip * gv;
                }
            }
        }
    }
    (ga, gb)
}

/// Geometry of a causal dilated 1-D convolution over `batch` sequences.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub len: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl ConvDims {
    fn pad(&self) -> usize {
        (self.kernel - 1) * self.dilation
    }
}

/// `out[n,c,t] = bias[c] + Σ_{i,k} w[c,i,k] · x[n,i,t + k·d − pad]`, reading
/// zeros left of the sequence start.
pub fn conv1d_forward(x: &[f64], w: &[f64], bias: &[f64], dims: ConvDims) -> Vec<f64> {
    let ConvDims {
        batch,
        in_channels: ci,
        out_channels: co,
        len: t_len,
        kernel,
        dilation,
    } = dims;
    let pad = dims.pad();
    let mut out = vec![0.0; batch * co * t_len];
    for n in 0..batch {
        for c in 0..co {
            let out_row = &mut out[(n * co + c) * t_len..(n * co + c + 1) * t_len];
            out_row.fill(bias[c]);
            for i in 0..ci {
                let x_row = &x[(n * ci + i) * t_len..(n * ci + i + 1) * t_len];
                for k in 0..kernel {
                    let wv = w[(c * ci + i) * kernel + k];
                    if wv == 0.0 {
                        continue;
                    }
                    let shift = pad - k * dilation;
                    if shift >= t_len {
                        continue;
                    }
                    for (o, &xv) in out_row[shift..].iter_mut().zip(x_row) {
                        *o += wv * xv;
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_x, grad_w, grad_bias)` for upstream gradient `g`.
pub fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    dims: ConvDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let ConvDims {
        batch,
        in_channels: ci,
        out_channels: co,
        len: t_len,
        kernel,
        dilation,
    } = dims;
    let pad = dims.pad();
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; co];
    for n in 0..batch {
        for c in 0..co {
            let g_row = &g[(n * co + c) * t_len..(n * co + c + 1) * t_len];
            gb[c] += g_row.iter().sum::<f64>();
            for i in 0..ci {
                let base = (n * ci + i) * t_len;
                for k in 0..kernel {
                    let shift = pad - k * dilation;
                    if shift >= t_len {
                        continue;
                    }
                    let widx = (c * ci + i) * kernel + k;
                    let wv = w[widx];
                    let x_row = &x[base..base + t_len - shift];
                    let g_tail = &g_row[shift..];
                    gw[widx] += x_row.iter().zip(g_tail).map(|(a, b)| a * b).sum::<f64>();
                    if wv != 0.0 {
                        for (gxv, &gv) in gx[base..base + t_len - shift].iter_mut().zip(g_tail) {
                            *gxv += wv * gv;
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul_forward(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn conv_kernel_longer_than_sequence() {
        // pad = 2·4 = 8 > len: the far taps only ever read padding.
        let dims = ConvDims {
            batch: 1,
            in_channels: 1,
            out_channels: 1,
            len: 3,
            kernel: 3,
            dilation: 4,
        };
        let out = conv1d_forward(&[1.0, 2.0, 3.0], &[5.0, 7.0, 1.0], &[0.0], dims);
        assert_eq!(out, vec![1.0, 2.0, 3.0]);
    }
}
