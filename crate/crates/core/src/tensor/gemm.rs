use super::Scalar;

fn strides(m: usize, k: usize, n: usize, a_t: bool, b_t: bool) -> [isize; 4] {
    let (rsa, csa) = if a_t { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_t { (1, k) } else { (n, 1) };
    [rsa as isize, csa as isize, rsb as isize, csb as isize]
}

/// Below this many output rows, packing overhead outweighs the blocked
/// kernel and a plain row-update loop is faster.
const SMALL_M: usize = 1;

/// `c (+)= a·b` for row-major `a` (or its transpose) and row-major `b`.
fn small_m<T: Copy + std::ops::Mul<Output = T> + std::ops::Add<Output = T> + Default>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    if !accumulate {
        c.fill(T::default());
    }
    for (i, row) in c.chunks_mut(n).enumerate() {
        for p in 0..k {
            let x = if a_t { a[p * m + i] } else { a[i * k + p] };
            for (o, &y) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o = *o + x * y;
            }
        }
    }
}

fn check_lengths(m: usize, k: usize, n: usize, a: usize, b: usize, c: usize) {
    assert_eq!(a, m * k, "gemm: lhs length");
    assert_eq!(b, k * n, "gemm: rhs length");
    assert_eq!(c, m * n, "gemm: output length");
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                check_lengths(m, k, n, a.len(), b.len(), c.len());
                if m == 0 || n == 0 {
                    return;
                }
                if m <= SMALL_M && !b_t {
                    return small_m(m, k, n, a, a_t, b, c, accumulate);
                }
                let [rsa, csa, rsb, csb] = strides(m, k, n, a_t, b_t);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: lengths checked above; strides describe in-bounds
                // row-major (or transposed) views of those buffers.
                unsafe {
                    $gemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    let av = if a_t { a[l * m + i] } else { a[i * k + l] };
                    let bv = if b_t { b[j * k + l] } else { b[l * n + j] };
                    c[i * n + j] += av * bv;
                }
            }
        }
        c
    }

    #[test]
    fn all_transpose_combinations_match_naive() {
        // One shape on each side of the small-row fast path.
        for (m, k, n) in [(3, 4, 5), (SMALL_M + 3, 6, 7)] {
            let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
            let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
            for a_t in [false, true] {
                for b_t in [false, true] {
                    let mut c = vec![0.5; m * n];
                    f64::gemm(m, k, n, &a, a_t, &b, b_t, &mut c, false);
                    let want = naive(m, k, n, &a, a_t, &b, b_t);
                    for (x, y) in c.iter().zip(&want) {
                        assert!((x - y).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn accumulate_adds_into_output() {
        let a = [1.0f32, 2.0];
        let b = [3.0f32, 4.0];
        let mut c = [10.0f32];
        f32::gemm(1, 2, 1, &a, false, &b, false, &mut c, true);
        assert_eq!(c[0], 21.0);
    }
}
