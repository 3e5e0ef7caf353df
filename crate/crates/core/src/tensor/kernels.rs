use rayon::prelude::*;

use super::Real;

/// Below this many multiply-adds a product runs on the calling thread.
const PARALLEL_WORK: usize = 1 << 16;

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn permute<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return (out, out_shape);
    }
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Operand layout of a (batched) matrix product `C += op(A) · op(B)`, where
/// `C` is `rows × cols` and the reduction runs over `depth`.
#[derive(Clone, Copy)]
pub(crate) enum Layout {
    /// A is rows × depth, B is depth × cols.
    NN,
    /// A is rows × depth, B is cols × depth.
    NT,
    /// A is depth × rows, B is depth × cols.
    TN,
}

pub(crate) struct Gemm {
    pub layout: Layout,
    pub batch: usize,
    pub rows: usize,
    pub depth: usize,
    pub cols: usize,
    /// Element offset between consecutive batch entries of B; 0 shares B.
    pub b_stride: usize,
}

impl Gemm {
    /// Each output row is produced by one thread in a fixed summation order,
    /// so results do not depend on the thread count.
    pub fn run<T: Real>(&self, a: &[T], b: &[T], c: &mut [T]) {
        let (rows, depth, cols) = (self.rows, self.depth, self.cols);
        if cols == 0 || rows == 0 || self.batch == 0 {
            return;
        }
        let a_stride = rows * depth;
        let row_fn = |g: usize, out: &mut [T]| {
            let bi = g / rows;
            let i = g % rows;
            let a = &a[bi * a_stride..(bi + 1) * a_stride];
            let b = &b[bi * self.b_stride..];
            match self.layout {
                Layout::NN => {
                    let a_row = &a[i * depth..(i + 1) * depth];
                    for (p, &ap) in a_row.iter().enumerate() {
                        let b_row = &b[p * cols..(p + 1) * cols];
                        for (o, &bv) in out.iter_mut().zip(b_row) {
                            *o += ap * bv;
                        }
                    }
                }
                Layout::NT => {
                    let a_row = &a[i * depth..(i + 1) * depth];
                    for (j, o) in out.iter_mut().enumerate() {
                        let b_row = &b[j * depth..(j + 1) * depth];
                        let mut acc = T::zero();
                        for (&x, &y) in a_row.iter().zip(b_row) {
                            acc += x * y;
                        }
                        *o += acc;
                    }
                }
                Layout::TN => {
                    for p in 0..depth {
                        let ap = a[p * rows + i];
                        let b_row = &b[p * cols..(p + 1) * cols];
                        for (o, &bv) in out.iter_mut().zip(b_row) {
                            *o += ap * bv;
                        }
                    }
                }
            }
        };
        let work = self.batch * rows * depth * cols;
        if work >= PARALLEL_WORK {
            c.par_chunks_mut(cols)
                .enumerate()
                .for_each(|(g, out)| row_fn(g, out));
        } else {
            c.chunks_mut(cols)
                .enumerate()
                .for_each(|(g, out)| row_fn(g, out));
        }
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
