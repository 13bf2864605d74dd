//! Extended-precision reference for the FID trace term.

use twofloat::TwoFloat;

type M = Vec<Vec<TwoFloat>>;

fn tf(v: f64) -> TwoFloat {
    TwoFloat::from(v)
}

fn zero() -> TwoFloat {
    tf(0.0)
}

fn matmul(a: &M, b: &M) -> M {
    let n = a.len();
    let mut out = vec![vec![zero(); n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = zero();
            for k in 0..n {
                acc += a[i][k] * b[k][j];
            }
            out[i][j] = acc;
        }
    }
    out
}

fn transpose(a: &M) -> M {
    let n = a.len();
    (0..n).map(|i| (0..n).map(|j| a[j][i]).collect()).collect()
}

/// Cyclic Jacobi eigensolver on a symmetric matrix in double-double arithmetic.
pub fn jacobi_eigen(a: &M) -> (Vec<TwoFloat>, M) {
    let n = a.len();
    let mut a = a.clone();
    let mut v: M = (0..n).map(|i| (0..n).map(|j| tf(f64::from(u8::from(i == j)))).collect()).collect();
    for _sweep in 0..100 {
        let mut off = zero();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off += a[i][j] * a[i][j];
                }
            }
        }
        if off.hi() < 1e-60 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].hi() == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (tf(2.0) * a[p][q]);
                let sign = if theta.hi() >= 0.0 { tf(1.0) } else { tf(-1.0) };
                let t = sign / (theta.abs() + (theta * theta + tf(1.0)).sqrt());
                let c = tf(1.0) / (t * t + tf(1.0)).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k][p], v[k][q]);
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

fn sqrt_psd(a: &M) -> M {
    let n = a.len();
    let (vals, vecs) = jacobi_eigen(a);
    let mut d = vec![vec![zero(); n]; n];
    for i in 0..n {
        d[i][i] = if vals[i].hi() > 0.0 { vals[i].sqrt() } else { zero() };
    }
    matmul(&matmul(&vecs, &d), &transpose(&vecs))
}

/// `Tr((Sa^{1/2} Sb Sa^{1/2})^{1/2})` in double-double precision.
pub fn trace_sqrt_product(sa: &[Vec<f64>], sb: &[Vec<f64>]) -> f64 {
    let conv = |m: &[Vec<f64>]| -> M { m.iter().map(|r| r.iter().map(|&v| tf(v)).collect()).collect() };
    let root = sqrt_psd(&conv(sa));
    let inner = matmul(&matmul(&root, &conv(sb)), &root);
    let (vals, _) = jacobi_eigen(&inner);
    let mut acc = zero();
    for v in vals {
        if v.hi() > 0.0 {
            acc += v.sqrt();
        }
    }
    acc.hi() + acc.lo()
}
