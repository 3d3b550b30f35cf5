use tsnas_tensor::{cast, Element, Tape, Tensor, Var};

use crate::error::{CoreError, Result};

/// [L, L] operator of a centred moving average with replicate padding, applied as `A · x`.
pub fn moving_average_matrix<T: Element>(len: usize, kernel: usize) -> Result<Tensor<T>> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(CoreError::config(format!("moving-average kernel must be odd and positive, got {kernel}")));
    }
    let half = (kernel / 2) as isize;
    let mut a = vec![0.0f64; len * len];
    for t in 0..len as isize {
        for o in -half..=half {
            let s = (t + o).clamp(0, len as isize - 1) as usize;
            a[t as usize * len + s] += 1.0;
        }
    }
    let inv = 1.0 / kernel as f64;
    Ok(Tensor::new(&[len, len], a.into_iter().map(|v| cast::<T>(v * inv)).collect())?)
}

/// Splits [B, L, C] into (trend, seasonal) with seasonal = x − trend.
pub fn moving_average_decompose<T: Element>(tape: &Tape<T>, x: &Var<T>, kernel: usize) -> Result<(Var<T>, Var<T>)> {
    if x.rank() != 3 {
        return Err(CoreError::config(format!("decomposition expects [B, L, C], got {:?}", x.shape())));
    }
    if kernel == 1 {
        let zero = tape.constant(Tensor::zeros(x.shape()));
        return Ok((x.clone(), tape.mul(x, &zero)?));
    }
    let at = moving_average_matrix::<T>(x.dim(1), kernel)?;
    // trend^T = x^T · A^T, with A^T as the shared right operand
    let at = tape.constant(transpose2(&at));
    let xt = tape.transpose(x, 1, 2)?;
    let trend = tape.transpose(&tape.matmul(&xt, &at)?, 1, 2)?;
    let seasonal = tape.sub(x, &trend)?;
    Ok((trend, seasonal))
}

fn transpose2<T: Element>(a: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (a.dim(0), a.dim(1));
    let d = a.data();
    Tensor::new(&[c, r], (0..r * c).map(|i| d[(i % r) * c + i / r]).collect()).expect("numel")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[1, v.len(), 1], v).unwrap()
    }

    #[test]
    fn kernel_three_replicate_padded() {
        let tape = Tape::no_grad();
        let x = tape.constant(series(&[1.0, 2.0, 3.0, 4.0, 5.0]));
        let (trend, _) = moving_average_decompose(&tape, &x, 3).unwrap();
        // direct replicate-padded window means
        let padded = [1.0, 1.0, 2.0, 3.0, 4.0, 5.0, 5.0];
        let oracle: Vec<f64> = (0..5).map(|t| padded[t..t + 3].iter().sum::<f64>() / 3.0).collect();
        assert_eq!(oracle, vec![4.0 / 3.0, 2.0, 3.0, 4.0, 14.0 / 3.0]);
        for (a, b) in trend.value().data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn kernel_one_is_identity() {
        let tape = Tape::no_grad();
        let x = tape.constant(series(&[0.3, -1.0, 2.5]));
        let (t, s) = moving_average_decompose(&tape, &x, 1).unwrap();
        assert!(t.value().bit_eq(x.value()));
        assert!(s.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn even_kernel_rejected() {
        let tape = Tape::<f64>::no_grad();
        let x = tape.constant(series(&[1.0, 2.0]));
        assert!(matches!(moving_average_decompose(&tape, &x, 4), Err(CoreError::Config(_))));
    }
}
