//! Independent numeric oracles.

/// CKA in Gram/HSIC form: HSIC(K, L) = tr(K H L H) / (n-1)^2 with the
/// centering matrix H = I - 11^T/n and linear kernels K = X X^T,
/// L = Y Y^T. Algebraically equal to the feature-space form but computed
/// through a different route.
pub fn cka_hsic(x: &[f32], dx: usize, y: &[f32], dy: usize) -> f64 {
    let n = x.len() / dx;
    assert_eq!(y.len() / dy, n, "probe counts must match");
    let gram = |m: &[f32], d: usize| -> Vec<f64> {
        let mut k = vec![0.0f64; n * n];
        for a in 0..n {
            for b in 0..n {
                let mut dot = 0.0f64;
                for j in 0..d {
                    dot += m[a * d + j] as f64 * m[b * d + j] as f64;
                }
                k[a * n + b] = dot;
            }
        }
        k
    };
    let center = |k: &[f64]| -> Vec<f64> {
        let row_mean: Vec<f64> =
            (0..n).map(|a| (0..n).map(|b| k[a * n + b]).sum::<f64>() / n as f64).collect();
        let col_mean: Vec<f64> =
            (0..n).map(|b| (0..n).map(|a| k[a * n + b]).sum::<f64>() / n as f64).collect();
        let total: f64 = k.iter().sum::<f64>() / (n * n) as f64;
        let mut out = vec![0.0f64; n * n];
        for a in 0..n {
            for b in 0..n {
                out[a * n + b] = k[a * n + b] - row_mean[a] - col_mean[b] + total;
            }
        }
        out
    };
    let hsic = |k: &[f64], l: &[f64]| -> f64 {
        let kc = center(k);
        let lc = center(l);
        let mut tr = 0.0f64;
        for a in 0..n {
            for b in 0..n {
                tr += kc[a * n + b] * lc[b * n + a];
            }
        }
        tr / ((n - 1) * (n - 1)) as f64
    };
    let kx = gram(x, dx);
    let ky = gram(y, dy);
    hsic(&kx, &ky) / (hsic(&kx, &kx).sqrt() * hsic(&ky, &ky).sqrt())
}

/// Central finite differences of an f64 scalar function, h-step, for
/// oracle-grade gradient checks where the forward must avoid f32 rounding.
pub fn central_diff<F>(f: F, x: &[f32], h: f64) -> Vec<f64>
where
    F: Fn(&[f32]) -> f64,
{
    let mut grad = vec![0.0f64; x.len()];
    let mut work = x.to_vec();
    for j in 0..x.len() {
        let orig = work[j];
        work[j] = (orig as f64 + h) as f32;
        let plus = f(&work);
        work[j] = (orig as f64 - h) as f32;
        let minus = f(&work);
        work[j] = orig;
        grad[j] = (plus - minus) / (2.0 * h);
    }
    grad
}
