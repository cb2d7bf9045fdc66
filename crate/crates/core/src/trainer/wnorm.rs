//! Unit-norm projection of weight rows (Case1) or columns (Case2).

use crate::operators::WnormCase;
use crate::tensor::Tensor;

/// Project `w` onto the unit sphere per row (Case1) or column (Case2).
/// All-zero rows/columns are left as they are. Exempt tensors pass through.
pub fn wnorm_project(w: &Tensor, case: WnormCase) -> Tensor {
    let mut out = w.clone();
    wnorm_project_in_place(&mut out, case);
    out
}

/// In-place form of [`wnorm_project`]; returns the number of zero
/// rows/columns skipped.
pub fn wnorm_project_in_place(w: &mut Tensor, case: WnormCase) -> usize {
    if case == WnormCase::Exempt || w.rank() != 2 {
        return 0;
    }
    let (r, c) = w.dims2();
    let data = w.data_mut();
    let mut skipped = 0;
    match case {
        WnormCase::Case1 => {
            for row in data.chunks_mut(c) {
                let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n == 0.0 {
                    skipped += 1;
                } else {
                    row.iter_mut().for_each(|x| *x /= n);
                }
            }
        }
        WnormCase::Case2 => {
            for j in 0..c {
                let n = (0..r).map(|i| data[i * c + j].powi(2)).sum::<f64>().sqrt();
                if n == 0.0 {
                    skipped += 1;
                } else {
                    (0..r).for_each(|i| data[i * c + j] /= n);
                }
            }
        }
        WnormCase::Exempt => unreachable!(),
    }
    skipped
}
