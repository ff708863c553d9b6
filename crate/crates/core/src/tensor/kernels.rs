//! Plain-slice kernels shared by forward and backward rules.

use super::Scalar;

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[k×n] += aᵀ · g` where `a` is `m×k` and `g` is `m×n`.
pub fn matmul_at_b_acc<T: Scalar>(a: &[T], g: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
}

/// `c[m×k] += g[m×n] · bᵀ` where `b` is `k×n`.
pub fn matmul_a_bt_acc<T: Scalar>(g: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let bt = transpose2(b, k, n);
    matmul_acc(g, &bt, c, m, n, k);
}

pub fn transpose2<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Swaps axes `i < j` of a row-major array with the given shape.
pub fn swap_axes<T: Scalar>(a: &[T], shape: &[usize], i: usize, j: usize) -> Vec<T> {
    debug_assert!(i < j && j < shape.len());
    let pre: usize = shape[..i].iter().product();
    let ni = shape[i];
    let mid: usize = shape[i + 1..j].iter().product();
    let nj = shape[j];
    let post: usize = shape[j + 1..].iter().product();
    let mut out = Vec::with_capacity(a.len());
    for p in 0..pre {
        for y in 0..nj {
            for m in 0..mid {
                for x in 0..ni {
                    let src = ((((p * ni + x) * mid + m) * nj + y) * post) as usize;
                    out.extend_from_slice(&a[src..src + post]);
                }
            }
        }
    }
    out
}

pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
}
