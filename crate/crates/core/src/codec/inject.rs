use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vlm::BaselineSpan;

use super::VisionInjection;

/// Interpolation position of output row `j`: `(lower index, weight on lower + 1)`.
/// The grid `j (k-1) / (l-1)` is computed in integers so on-grid rows are exact.
fn grid_point(j: usize, k: usize, l: usize) -> (usize, f64) {
    if l == 1 {
        let num = k - 1;
        return (num / 2, (num % 2) as f64 / 2.0);
    }
    let num = j * (k - 1);
    (num / (l - 1), (num % (l - 1)) as f64 / (l - 1) as f64)
}

/// `l x k` matrix `R` with `Resample(delta, l) = R delta`.
pub fn resample_matrix(k: usize, l: usize) -> Result<Tensor> {
    if l == 0 || k == 0 {
        return Err(Error::Contract(format!("cannot resample {k} rows to {l}")));
    }
    let mut r = vec![0.0; l * k];
    for j in 0..l {
        let (i, w) = grid_point(j, k, l);
        r[j * k + i] += 1.0 - w;
        if w > 0.0 {
            r[j * k + i + 1] += w;
        }
    }
    Ok(Tensor::matrix(l, k, r))
}

/// Linear interpolation of `delta`'s rows along the token index onto `l` rows.
pub fn resample(delta: &Tensor, l: usize) -> Result<Tensor> {
    let (k, d) = delta.dims2();
    if l == 0 {
        return Err(Error::Contract("resample length must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(l * d);
    for j in 0..l {
        let (i, w) = grid_point(j, k, l);
        if w == 0.0 {
            out.extend_from_slice(delta.row(i));
        } else {
            let (lo, hi) = (delta.row(i), delta.row(i + 1));
            out.extend(lo.iter().zip(hi).map(|(a, b)| (1.0 - w) * a + w * b));
        }
    }
    Ok(Tensor::matrix(l, d, out))
}

/// `baseline + gate * Resample(delta, l_img)`.
pub fn inject(baseline: &BaselineSpan, inj: &VisionInjection, l_img: usize) -> Result<Tensor> {
    if baseline.agent != inj.target_agent {
        return Err(Error::Routing(format!(
            "injection for {} applied to the baseline of {}",
            inj.target_agent, baseline.agent
        )));
    }
    let (bl, bd) = baseline.values.dims2();
    let (_, d) = inj.delta.dims2();
    if bl != l_img || bd != d {
        return Err(Error::dim(
            "inject",
            format!("baseline {bl}x{bd}, injection width {d}, span length {l_img}"),
        ));
    }
    let r = resample(&inj.delta, l_img)?;
    let g = inj.gate;
    baseline.values.zip_map(&r, "inject", |b, x| b + g * x)
}

/// Differentiable [`inject`]: `delta` is `k x d`, `gate` is `1 x 1`.
pub fn inject_on_tape<'t>(tape: &'t Tape, baseline: &Tensor, delta: Var<'t>, gate: Var<'t>) -> Result<Var<'t>> {
    let (k, d) = delta.dims();
    let (l, bd) = baseline.dims2();
    if bd != d {
        return Err(Error::dim("inject", format!("baseline width {bd}, delta width {d}")));
    }
    let r = tape.constant(resample_matrix(k, l)?);
    Ok(tape.constant(baseline.clone()).add(r.matmul(delta).mul(gate)))
}
