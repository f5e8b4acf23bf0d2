//! Array kernels that avoid dynamic-dimension iteration on hot paths.

use ndarray::{ArrayViewD, Ix1, Ix2, Ix3, Ix4, Ix5, Ix6, IxDyn, Zip};

use crate::tensor::Array;

macro_rules! by_rank {
    ($n:expr, $body:ident) => {
        match $n {
            1 => $body!(Ix1),
            2 => $body!(Ix2),
            3 => $body!(Ix3),
            4 => $body!(Ix4),
            5 => $body!(Ix5),
            6 => $body!(Ix6),
            _ => $body!(IxDyn),
        }
    };
}

/// Row-major copy of an arbitrarily strided view.
pub(crate) fn contiguous(v: ArrayViewD<f64>) -> Array {
    if v.is_standard_layout() {
        return v.to_owned();
    }
    macro_rules! go {
        ($d:ty) => {
            v.into_dimensionality::<$d>()
                .expect("rank matches")
                .as_standard_layout()
                .into_owned()
                .into_dyn()
        };
    }
    by_rank!(v.ndim(), go)
}

/// Broadcast shape of `a` and `b`, numpy rules.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| {
            let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
            let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
            match (da, db) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => panic!("shapes {a:?} and {b:?} do not broadcast"),
            }
        })
        .collect()
}

/// Elementwise `f(a, b)` with broadcasting.
pub(crate) fn zip_map(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    if a.shape() == b.shape() {
        if let (Some(x), Some(y)) = (a.as_slice(), b.as_slice()) {
            let data = x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect();
            return Array::from_shape_vec(IxDyn(a.shape()), data).unwrap();
        }
    }
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).unwrap();
    let bv = b.broadcast(IxDyn(&shape)).unwrap();
    macro_rules! go {
        ($d:ty) => {{
            let av = av.into_dimensionality::<$d>().expect("rank matches");
            let bv = bv.into_dimensionality::<$d>().expect("rank matches");
            Zip::from(&av).and(&bv).map_collect(|&p, &q| f(p, q)).into_dyn()
        }};
    }
    if shape.is_empty() {
        return Array::from_elem(IxDyn(&[]), f(a.sum(), b.sum()));
    }
    by_rank!(shape.len(), go)
}

/// Elementwise map that keeps the row-major layout.
pub(crate) fn map(a: &Array, f: impl Fn(f64) -> f64) -> Array {
    match a.as_slice() {
        Some(x) => Array::from_shape_vec(IxDyn(a.shape()), x.iter().map(|&v| f(v)).collect()).unwrap(),
        None => contiguous(a.view()).mapv_into(f),
    }
}

/// `c[i] = a[i] @ b[i]` for row-major `(batch, m, k)` and `(batch, k, n)` slices.
pub(crate) fn small_bmm(a: &[f64], b: &[f64], c: &mut [f64], batch: usize, m: usize, k: usize, n: usize) {
    for i in 0..batch {
        let a = &a[i * m * k..(i + 1) * m * k];
        let b = &b[i * k * n..(i + 1) * k * n];
        let c = &mut c[i * m * n..(i + 1) * m * n];
        for r in 0..m {
            let row = &mut c[r * n..(r + 1) * n];
            row.fill(0.0);
            for p in 0..k {
                let s = a[r * k + p];
                for (out, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *out += s * bv;
                }
            }
        }
    }
}
