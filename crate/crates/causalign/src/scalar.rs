use num_traits::Float;

/// Floating-point width selector carried through configs and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    Double,
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Precision::Single => write!(f, "single"),
            Precision::Double => write!(f, "double"),
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" | "f32" => Ok(Precision::Single),
            "double" | "f64" => Ok(Precision::Double),
            other => Err(format!("unknown precision {other:?}; use single or double")),
        }
    }
}

/// Element type for all model math. Implemented for `f32` and `f64`; every
/// tensor, activation, and optimizer moment is generic over this so the same
/// code path runs in either width. `gemm` routes to the matching
/// `matrixmultiply` kernel so matrix products do not pay for the abstraction.
pub trait Scalar:
    Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum<Self>
    + Default
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// C = alpha * A·B + beta * C over raw row/column strides.
    ///
    /// # Safety contract (checked by the caller)
    /// The slices must cover every index touched by the stride arithmetic:
    /// A at `i*rsa + j*csa` for i < m, j < k; B at `i*rsb + j*csb` for
    /// i < k, j < n; C at `i*rsc + j*csc` for i < m, j < n.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

/// Panics unless the strides keep every access of an m-by-k walk inside `len`.
fn check_bounds(name: &str, len: usize, m: usize, k: usize, rs: isize, cs: isize) {
    if m == 0 || k == 0 {
        return;
    }
    let mut max_idx: isize = 0;
    let mut min_idx: isize = 0;
    for (steps, stride) in [(m - 1, rs), (k - 1, cs)] {
        let span = steps as isize * stride;
        if span > 0 {
            max_idx += span;
        } else {
            min_idx += span;
        }
    }
    assert!(
        min_idx >= 0 && (max_idx as usize) < len,
        "gemm operand {name} out of bounds: len={len} m={m} k={k} rs={rs} cs={cs}"
    );
}

macro_rules! impl_scalar {
    ($ty:ty, $prec:expr, $kernel:path) => {
        impl Scalar for $ty {
            const PRECISION: Precision = $prec;

            #[inline(always)]
            fn from_f64(v: f64) -> Self {
                v as $ty
            }

            #[inline(always)]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_bounds("a", a.len(), m, k, rsa, csa);
                check_bounds("b", b.len(), k, n, rsb, csb);
                check_bounds("c", c.len(), m, n, rsc, csc);
                if k == 0 {
                    // Degenerate product: gemm semantics reduce to C *= beta.
                    for i in 0..m {
                        for j in 0..n {
                            let idx = (i as isize * rsc + j as isize * csc) as usize;
                            c[idx] *= beta;
                        }
                    }
                    return;
                }
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, Precision::Single, matrixmultiply::sgemm);
impl_scalar!(f64, Precision::Double, matrixmultiply::dgemm);
