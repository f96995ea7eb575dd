//! Central finite-difference verification of analytic gradients.

use super::{Tape, Tensor, TensorError};

/// Max over elements of `|analytic − numeric| / (|analytic| + 1e-8)` where
/// `numeric = (f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h`. `f` must be scalar-valued and
/// is re-run from scratch for every probe.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &Tensor) -> Result<Tensor, TensorError>,
{
    finite_diff_check_multi(|tape, xs| f(tape, &xs[0]), &[x.clone()], h)
}

/// [`finite_diff_check`] over several inputs jointly: one analytic backward
/// pass, then every element of every input is probed.
pub fn finite_diff_check_multi<F>(f: F, xs: &[Tensor], h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor, TensorError>,
{
    if !(h > 0.0) {
        return Err(TensorError::Param {
            op: "finite_diff_check",
            msg: format!("step size must be > 0, got {h}"),
        });
    }
    let mut tape = Tape::new();
    let leaves: Vec<Tensor> = xs.iter().map(|x| tape.watch(x)).collect();
    let loss = f(&mut tape, &leaves)?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|l| grads.wrt_or_zeros(l)).collect();

    let eval = |probe: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::inference();
        let leaves: Vec<Tensor> = probe.iter().map(|x| tape.watch(x)).collect();
        f(&mut tape, &leaves)?.item()
    };

    let mut worst = 0.0f64;
    for (pi, x) in xs.iter().enumerate() {
        for i in 0..x.numel() {
            let mut probe: Vec<Tensor> = xs.to_vec();
            let mut bumped = x.data().to_vec();
            bumped[i] += h;
            probe[pi] = Tensor::from_vec(x.shape().to_vec(), bumped.clone())?;
            let up = eval(&probe)?;
            bumped[i] -= 2.0 * h;
            probe[pi] = Tensor::from_vec(x.shape().to_vec(), bumped)?;
            let down = eval(&probe)?;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi][i];
            worst = worst.max((a - numeric).abs() / (a.abs() + 1e-8));
        }
    }
    Ok(worst)
}
