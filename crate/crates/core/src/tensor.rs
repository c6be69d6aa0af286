//! Dense row-major matrices and the serial reference kernels.
//!
//! Every operation validates shapes at its boundary; nothing broadcasts.
//! [`index_add_serial`] is the reference behaviour every parallel scatter
//! kernel in [`crate::scatter`] is judged against: updates are applied
//! strictly in sequence order `k = 0..n`.

use std::fmt::{Debug, Display, Write as _};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::str::FromStr;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};

use num_traits::Float;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Element type of a [`Matrix`].
///
/// `f32` is the training precision; `f64` exists for gradient checking.
pub trait Real:
    Float
    + Debug
    + Display
    + std::fmt::LowerExp
    + FromStr
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    /// Lock-free cell with the same size and alignment as `Self`.
    type Atomic: Sync;

    /// Significant digits needed for an exact text round trip.
    const SIG_DIGITS: usize;

    fn of_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Reinterpret a mutable element slice as atomic cells.
    fn as_atomic(slice: &mut [Self]) -> &[Self::Atomic];

    fn atomic_add(cell: &Self::Atomic, v: Self);
}

impl Real for f32 {
    type Atomic = AtomicU32;
    const SIG_DIGITS: usize = 9;

    fn of_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn as_atomic(slice: &mut [f32]) -> &[AtomicU32] {
        // SAFETY: AtomicU32 has the size and alignment of u32, which matches
        // f32, and the exclusive borrow rules out non-atomic aliases for the
        // lifetime of the returned slice.
        unsafe { std::slice::from_raw_parts(slice.as_mut_ptr() as *const AtomicU32, slice.len()) }
    }

    fn atomic_add(cell: &AtomicU32, v: f32) {
        let mut current = cell.load(Ordering::Relaxed);
        loop {
            let next = (f32::from_bits(current) + v).to_bits();
            match cell.compare_exchange_weak(current, next, Ordering::Relaxed, Ordering::Relaxed) {
                Ok(_) => return,
                Err(seen) => current = seen,
            }
        }
    }
}

impl Real for f64 {
    type Atomic = AtomicU64;
    const SIG_DIGITS: usize = 17;

    fn of_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn as_atomic(slice: &mut [f64]) -> &[AtomicU64] {
        // SAFETY: see the f32 impl; AtomicU64 matches f64 in size and alignment
        // on every platform that provides AtomicU64.
        unsafe { std::slice::from_raw_parts(slice.as_mut_ptr() as *const AtomicU64, slice.len()) }
    }

    fn atomic_add(cell: &AtomicU64, v: f64) {
        let mut current = cell.load(Ordering::Relaxed);
        loop {
            let next = (f64::from_bits(current) + v).to_bits();
            match cell.compare_exchange_weak(current, next, Ordering::Relaxed, Ordering::Relaxed) {
                Ok(_) => return,
                Err(seen) => current = seen,
            }
        }
    }
}

/// Dense 2-D matrix stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                op: "Matrix::new",
                left: format!("{rows}x{cols}"),
                right: format!("{} elements", data.len()),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    /// Like [`Matrix::zeros`] but reports allocation failure instead of aborting.
    pub fn try_zeros(rows: usize, cols: usize) -> Result<Self> {
        let len = rows.checked_mul(cols).ok_or(Error::Resource {
            what: "matrix",
            bytes: usize::MAX,
        })?;
        let mut data = Vec::new();
        data.try_reserve_exact(len).map_err(|_| Error::Resource {
            what: "matrix",
            bytes: len.saturating_mul(std::mem::size_of::<T>()),
        })?;
        data.resize(len, T::zero());
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::Dimension {
                    op: "Matrix::from_rows",
                    left: format!("row 0 has {cols} columns"),
                    right: format!("row {r} has {}", row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Reinterpret the same row-major buffer under a new shape.
    pub fn reshape(self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.data.len() {
            return Err(Error::dims("reshape", self.shape(), (rows, cols)));
        }
        Ok(Matrix {
            rows,
            cols,
            data: self.data,
        })
    }

    pub fn transpose(&self) -> Self {
        // tiled so both sides stay cache-resident on large matrices
        const TILE: usize = 32;
        let mut out = Self::zeros(self.cols, self.rows);
        for r0 in (0..self.rows).step_by(TILE) {
            for c0 in (0..self.cols).step_by(TILE) {
                for r in r0..(r0 + TILE).min(self.rows) {
                    for c in c0..(c0 + TILE).min(self.cols) {
                        out.data[c * self.rows + r] = self.data[r * self.cols + c];
                    }
                }
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        }
    }

    /// Serialise as the fixture text format: a `rows cols` header followed
    /// by one whitespace-separated line per row.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(16 + self.data.len() * (T::SIG_DIGITS + 8));
        let _ = writeln!(out, "{} {}", self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row(r).iter().enumerate() {
                if c > 0 {
                    out.push(' ');
                }
                out.push_str(&format_real(*v));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("missing matrix header".into()))?;
        let mut dims = header.split_whitespace().map(str::parse::<usize>);
        let (rows, cols) = match (dims.next(), dims.next(), dims.next()) {
            (Some(Ok(r)), Some(Ok(c)), None) => (r, c),
            _ => return Err(Error::Parse(format!("bad matrix header {header:?}"))),
        };
        let mut data = Vec::with_capacity(rows * cols);
        let mut seen_rows = 0;
        for (lineno, line) in lines.enumerate() {
            let before = data.len();
            for tok in line.split_whitespace() {
                let v = tok
                    .parse::<T>()
                    .map_err(|_| Error::Parse(format!("row {lineno}: bad number {tok:?}")))?;
                data.push(v);
            }
            if data.len() - before != cols {
                return Err(Error::Parse(format!(
                    "row {lineno}: expected {cols} values, found {}",
                    data.len() - before
                )));
            }
            seen_rows += 1;
        }
        if seen_rows != rows {
            return Err(Error::Parse(format!(
                "expected {rows} rows, found {seen_rows}"
            )));
        }
        Matrix::new(rows, cols, data)
    }
}

/// Render a real with exactly enough significant digits to round trip.
pub fn format_real<T: Real>(v: T) -> String {
    format!("{:.*e}", T::SIG_DIGITS - 1, v)
}

/// Row indices into a target matrix. Duplicates are legal and accumulate.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IndexVector(Vec<usize>);

impl IndexVector {
    pub fn new(indices: Vec<usize>) -> Self {
        IndexVector(indices)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, usize> {
        self.0.iter()
    }

    pub fn into_inner(self) -> Vec<usize> {
        self.0
    }

    pub(crate) fn check_bounds(&self, op: &'static str, bound: usize) -> Result<()> {
        match self.0.iter().position(|&i| i >= bound) {
            Some(position) => Err(Error::Index {
                op,
                position,
                value: self.0[position],
                bound,
            }),
            None => Ok(()),
        }
    }
}

impl From<Vec<usize>> for IndexVector {
    fn from(v: Vec<usize>) -> Self {
        IndexVector(v)
    }
}

impl FromIterator<usize> for IndexVector {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        IndexVector(iter.into_iter().collect())
    }
}

/// `a × b` by the naive i-k-j loop.
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    matmul_threads(a, b, 1)
}

/// Products smaller than this many multiply-adds stay on the calling thread.
const PAR_MIN_FMAS: usize = 1 << 18;

/// Hand out contiguous blocks of output rows to `threads` workers. Each
/// output row is computed by exactly one worker in the serial order, so the
/// result is bit-identical for every thread count.
fn for_row_blocks<T: Real>(
    out: &mut Matrix<T>,
    fmas: usize,
    threads: usize,
    kernel: impl Fn(usize, &mut [T]) + Sync,
) {
    let (rows, cols) = out.shape();
    if threads <= 1 || fmas < PAR_MIN_FMAS || rows < 2 || cols == 0 {
        kernel(0, &mut out.data);
        return;
    }
    let per = rows.div_ceil(threads);
    crate::scatter::pool(threads).install(|| {
        out.data
            .par_chunks_mut(per * cols)
            .enumerate()
            .for_each(|(c, block)| kernel(c * per, block));
    });
}

/// [`matmul`] with output rows split over `threads` workers.
pub fn matmul_threads<T: Real>(a: &Matrix<T>, b: &Matrix<T>, threads: usize) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::dims("matmul", a.shape(), b.shape()));
    }
    let m = b.cols;
    let mut out = Matrix::zeros(a.rows, m);
    for_row_blocks(&mut out, a.rows * a.cols * m, threads, |first, block| {
        for (r, out_row) in block.chunks_exact_mut(m).enumerate() {
            for (k, &aik) in a.row(first + r).iter().enumerate() {
                if aik == T::zero() {
                    continue;
                }
                for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                    *o += aik * bkj;
                }
            }
        }
    });
    Ok(out)
}

/// `aᵀ·b` without materialising the transpose: one rank-1 update per
/// shared row, so the output stays cache-resident.
pub fn matmul_tn<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    matmul_tn_threads(a, b, 1)
}

pub fn matmul_tn_threads<T: Real>(a: &Matrix<T>, b: &Matrix<T>, threads: usize) -> Result<Matrix<T>> {
    if a.rows != b.rows {
        return Err(Error::dims("matmul_tn", (a.cols, a.rows), b.shape()));
    }
    let m = b.cols;
    let mut out = Matrix::zeros(a.cols, m);
    for_row_blocks(&mut out, a.rows * a.cols * m, threads, |first, block| {
        let n = block.len() / m.max(1);
        for k in 0..a.rows {
            let b_row = b.row(k);
            for (i, &aki) in a.row(k)[first..first + n].iter().enumerate() {
                if aki == T::zero() {
                    continue;
                }
                for (o, &bkj) in block[i * m..(i + 1) * m].iter_mut().zip(b_row) {
                    *o += aki * bkj;
                }
            }
        }
    });
    Ok(out)
}

/// Copy the rows of `w` selected by `idx`, in order.
pub fn gather_rows<T: Real>(w: &Matrix<T>, idx: &IndexVector) -> Result<Matrix<T>> {
    idx.check_bounds("gather_rows", w.rows)?;
    let mut data = Vec::with_capacity(idx.len() * w.cols);
    for &i in idx.iter() {
        data.extend_from_slice(w.row(i));
    }
    Ok(Matrix {
        rows: idx.len(),
        cols: w.cols,
        data,
    })
}

/// Shared precondition check for every scatter-add kernel. Runs before any
/// mutation so a failing call leaves `w` untouched.
pub(crate) fn check_index_add<T: Real>(
    op: &'static str,
    w: &Matrix<T>,
    y: &Matrix<T>,
    idx: &IndexVector,
) -> Result<()> {
    if y.rows != idx.len() {
        return Err(Error::Dimension {
            op,
            left: format!("y has {} rows", y.rows),
            right: format!("{} indices", idx.len()),
        });
    }
    if y.cols != w.cols {
        return Err(Error::dims(op, w.shape(), y.shape()));
    }
    idx.check_bounds(op, w.rows)
}

/// `w[idx[k]] += y[k]` for `k = 0..n` in order.
pub fn index_add_serial<T: Real>(w: &mut Matrix<T>, y: &Matrix<T>, idx: &IndexVector) -> Result<()> {
    check_index_add("index_add_serial", w, y, idx)?;
    let cols = w.cols;
    for (k, &target) in idx.iter().enumerate() {
        let dst = &mut w.data[target * cols..(target + 1) * cols];
        for (d, &s) in dst.iter_mut().zip(y.row(k)) {
            *d += s;
        }
    }
    Ok(())
}

pub fn elementwise_tanh<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    m.map(T::tanh)
}

/// `target += factor * source`, elementwise.
pub fn scale_add<T: Real>(target: &mut Matrix<T>, source: &Matrix<T>, factor: T) -> Result<()> {
    if target.shape() != source.shape() {
        return Err(Error::dims("scale_add", target.shape(), source.shape()));
    }
    for (t, &s) in target.data.iter_mut().zip(&source.data) {
        *t += factor * s;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f32]]) -> Matrix<f32> {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f32> {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn triple_loop(a: &Matrix<f32>, b: &Matrix<f32>) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0f64; b.cols()]; a.rows()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                for k in 0..a.cols() {
                    out[i][j] += a.get(i, k) as f64 * b.get(k, j) as f64;
                }
            }
        }
        out
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 3, 7);
        assert_eq!(matmul(&Matrix::identity(3), &a).unwrap(), a);
    }

    #[test]
    fn one_by_one_product() {
        assert_eq!(matmul(&m(&[&[2.0]]), &m(&[&[3.0]])).unwrap(), m(&[&[6.0]]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = (random(&mut rng, 4, 5), random(&mut rng, 5, 3));
        let got = matmul(&a, &b).unwrap();
        let want = triple_loop(&a, &b);
        for i in 0..4 {
            for j in 0..3 {
                assert!((got.get(i, j) as f64 - want[i][j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn threaded_products_are_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // large enough to cross the parallel threshold
        let a = random(&mut rng, 300, 160);
        let b = random(&mut rng, 160, 40);
        let c = random(&mut rng, 300, 40);
        let serial = matmul(&a, &b).unwrap();
        let tn = matmul_tn(&a, &c).unwrap();
        assert_eq!(tn, matmul(&a.transpose(), &c).unwrap());
        for threads in [2, 3, 7] {
            assert_eq!(matmul_threads(&a, &b, threads).unwrap(), serial);
            assert_eq!(matmul_tn_threads(&a, &c, threads).unwrap(), tn);
        }
        assert!(matmul_tn(&a, &b).is_err());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Matrix::<f32>::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.matches("2x3").count() == 2, "{msg}");
    }

    #[test]
    fn gather_examples() {
        let w = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let g = gather_rows(&w, &vec![1, 0].into()).unwrap();
        assert_eq!(g, m(&[&[3.0, 4.0], &[1.0, 2.0]]));

        let empty = gather_rows(&w, &IndexVector::default()).unwrap();
        assert_eq!(empty.shape(), (0, 2));

        let dup = gather_rows(&w, &vec![0, 0, 0].into()).unwrap();
        assert_eq!(dup, m(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]));
    }

    #[test]
    fn gather_reports_offending_position() {
        let w = Matrix::<f32>::zeros(2, 2);
        match gather_rows(&w, &vec![0, 1, 5].into()) {
            Err(Error::Index {
                position, value, ..
            }) => assert_eq!((position, value), (2, 5)),
            other => panic!("expected index error, got {other:?}"),
        }
    }

    #[test]
    fn index_add_examples() {
        let mut w = Matrix::<f32>::zeros(2, 2);
        index_add_serial(&mut w, &m(&[&[1.0, 2.0]]), &vec![1].into()).unwrap();
        assert_eq!(w, m(&[&[0.0, 0.0], &[1.0, 2.0]]));

        let mut w = m(&[&[0.0, 0.0]]);
        index_add_serial(&mut w, &m(&[&[1.0, 1.0], &[2.0, 3.0]]), &vec![0, 0].into()).unwrap();
        assert_eq!(w, m(&[&[3.0, 4.0]]));

        let mut w = m(&[&[5.0, 6.0]]);
        index_add_serial(&mut w, &Matrix::zeros(0, 2), &IndexVector::default()).unwrap();
        assert_eq!(w, m(&[&[5.0, 6.0]]));
    }

    #[test]
    fn index_add_errors_leave_w_untouched() {
        let orig = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let mut w = orig.clone();
        // last index out of range: nothing may be applied
        let y = m(&[&[1.0, 1.0], &[1.0, 1.0]]);
        assert!(matches!(
            index_add_serial(&mut w, &y, &vec![0, 2].into()),
            Err(Error::Index { .. })
        ));
        assert_eq!(w, orig);
        assert!(matches!(
            index_add_serial(&mut w, &y, &vec![0].into()),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            index_add_serial(&mut w, &Matrix::zeros(1, 3), &vec![0].into()),
            Err(Error::Dimension { .. })
        ));
        assert_eq!(w, orig);
    }

    #[test]
    fn tanh_and_scale_add() {
        assert_eq!(elementwise_tanh(&Matrix::<f32>::zeros(2, 3)), Matrix::zeros(2, 3));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b) = (random(&mut rng, 3, 4), random(&mut rng, 3, 4));
        let mut t = a.clone();
        scale_add(&mut t, &b, 0.0).unwrap();
        assert_eq!(t, a);

        let mut z = Matrix::zeros(3, 4);
        scale_add(&mut z, &b, -0.5).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                assert_eq!(z.get(r, c), -0.5 * b.get(r, c));
            }
        }
        assert!(scale_add(&mut z, &Matrix::zeros(4, 3), 1.0).is_err());
    }

    #[test]
    fn text_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Matrix::from_fn(5, 3, |_, _| rng.gen_range(-1e6f32..1e6) * rng.gen::<f32>());
        let text = a.to_text();
        assert!(text.starts_with("5 3\n"));
        assert_eq!(Matrix::<f32>::from_text(&text).unwrap(), a);
        let b = a.cast::<f64>().map(|v| v / 3.0);
        assert_eq!(Matrix::<f64>::from_text(&b.to_text()).unwrap(), b);
    }

    #[test]
    fn text_rejects_malformed() {
        assert!(Matrix::<f32>::from_text("").is_err());
        assert!(Matrix::<f32>::from_text("2 2\n1 2\n").is_err());
        assert!(Matrix::<f32>::from_text("1 2\n1 2 3\n").is_err());
        assert!(Matrix::<f32>::from_text("1 1\nabc\n").is_err());
    }

    fn index_case() -> impl Strategy<Value = (Matrix<f32>, Matrix<f32>, IndexVector)> {
        (1usize..12, 1usize..6, 0usize..20).prop_flat_map(|(rows, cols, n)| {
            (
                prop::collection::vec(-100.0f32..100.0, rows * cols),
                prop::collection::vec(-100.0f32..100.0, n * cols),
                prop::collection::vec(0..rows, n),
            )
                .prop_map(move |(w, y, i)| {
                    (
                        Matrix::new(rows, cols, w).unwrap(),
                        Matrix::new(n, cols, y).unwrap(),
                        IndexVector::new(i),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn distinct_index_add_is_gather_add_writeback((w, y, idx) in index_case()) {
            let mut seen = std::collections::HashSet::new();
            let keep: Vec<usize> = (0..idx.len()).filter(|&k| seen.insert(idx.as_slice()[k])).collect();
            let idx: IndexVector = keep.iter().map(|&k| idx.as_slice()[k]).collect();
            let y = gather_rows(&y, &keep.clone().into()).unwrap();

            let mut via_kernel = w.clone();
            index_add_serial(&mut via_kernel, &y, &idx).unwrap();

            let mut gathered = gather_rows(&w, &idx).unwrap();
            scale_add(&mut gathered, &y, 1.0).unwrap();
            let mut via_writeback = w.clone();
            for (k, &r) in idx.iter().enumerate() {
                via_writeback.row_mut(r).copy_from_slice(gathered.row(k));
            }
            prop_assert_eq!(&via_kernel, &via_writeback);

            // negated gather restores exactly
            let mut restored = w.clone();
            let g = gather_rows(&restored, &idx).unwrap();
            index_add_serial(&mut restored, &g.map(|v| -v), &idx).unwrap();
            let mut expected = w.clone();
            for &r in idx.iter() {
                expected.row_mut(r).fill(0.0);
            }
            prop_assert_eq!(restored, expected);
        }

        #[test]
        fn index_add_is_sequentially_decomposable((w, y, idx) in index_case(), split in 0usize..20) {
            let split = split.min(idx.len());
            let mut whole = w.clone();
            index_add_serial(&mut whole, &y, &idx).unwrap();

            let first: Vec<usize> = (0..split).collect();
            let second: Vec<usize> = (split..idx.len()).collect();
            let mut parts = w.clone();
            for ks in [first, second] {
                let sub_idx: IndexVector = ks.iter().map(|&k| idx.as_slice()[k]).collect();
                let sub_y = gather_rows(&y, &ks.into()).unwrap();
                index_add_serial(&mut parts, &sub_y, &sub_idx).unwrap();
            }
            prop_assert_eq!(whole, parts);
        }

        #[test]
        fn index_add_touches_only_indexed_rows((w, y, idx) in index_case()) {
            let mut out = w.clone();
            index_add_serial(&mut out, &y, &idx).unwrap();
            for r in 0..w.rows() {
                if !idx.as_slice().contains(&r) {
                    let before: Vec<u32> = w.row(r).iter().map(|v| v.to_bits()).collect();
                    let after: Vec<u32> = out.row(r).iter().map(|v| v.to_bits()).collect();
                    prop_assert_eq!(before, after);
                }
            }
        }

        #[test]
        fn matmul_agrees_with_triple_loop(n in 1usize..64, k in 1usize..64, p in 1usize..64, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, n, k);
            let b = random(&mut rng, k, p);
            let got = matmul(&a, &b).unwrap();
            let want = triple_loop(&a, &b);
            // absolute term covers cancellation towards zero
            let scale = (k as f64).sqrt();
            for i in 0..n {
                for j in 0..p {
                    let diff = (got.get(i, j) as f64 - want[i][j]).abs();
                    prop_assert!(diff <= 1e-6 * want[i][j].abs().max(scale), "{diff}");
                }
            }
        }
    }
}
