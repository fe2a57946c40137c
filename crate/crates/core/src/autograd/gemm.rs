//! Packed, register-blocked matrix multiply used by the convolution kernels.
//!
//! Each output element is produced by exactly one micro-tile that sums over
//! the shared dimension in index order, so results do not depend on how
//! tiles are scheduled.

use crate::par;

const MR: usize = 4;
const NR: usize = 8;

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        MatRef {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.row_stride + j * self.col_stride]
    }
}

#[inline(always)]
fn micro_kernel(ap: &[f64], bp: &[f64]) -> [[f64; NR]; MR] {
    let mut acc = [[0.0; NR]; MR];
    for (a, b) in ap.chunks_exact(MR).zip(bp.chunks_exact(NR)) {
        for r in 0..MR {
            let av = a[r];
            for j in 0..NR {
                acc[r][j] += av * b[j];
            }
        }
    }
    acc
}

/// `c[m x n] (+)= a[m x k] . b[k x n]`, with `c` row-major.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, c: &mut [f64], accumulate: bool) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    debug_assert_eq!(b.rows, k);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let n_panels = n.div_ceil(NR);
    let mut bpack = vec![0.0; n_panels * k * NR];
    for jp in 0..n_panels {
        let panel = &mut bpack[jp * k * NR..(jp + 1) * k * NR];
        for p in 0..k {
            for j in 0..NR {
                let col = jp * NR + j;
                if col < n {
                    panel[p * NR + j] = b.at(p, col);
                }
            }
        }
    }
    par::for_each_chunk(c, MR * n, |tile, ctile| {
        let row0 = tile * MR;
        let rows = ctile.len() / n;
        let mut apack = vec![0.0; k * MR];
        for p in 0..k {
            for r in 0..rows {
                apack[p * MR + r] = a.at(row0 + r, p);
            }
        }
        for jp in 0..n_panels {
            let acc = micro_kernel(&apack, &bpack[jp * k * NR..(jp + 1) * k * NR]);
            let cols = NR.min(n - jp * NR);
            for (r, acc_row) in acc.iter().enumerate().take(rows) {
                let crow = &mut ctile[r * n + jp * NR..r * n + jp * NR + cols];
                if accumulate {
                    crow.iter_mut().zip(acc_row).for_each(|(c, v)| *c += v);
                } else {
                    crow.copy_from_slice(&acc_row[..cols]);
                }
            }
        }
    });
}
