use crate::error::{Error, Result};

/// Relative squared optimality loss in percent:
/// `100 * sum (U_perfect - U_C)^2 / sum U_perfect^2`.
pub fn rsol(pairs: impl IntoIterator<Item = (f64, f64)>) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    let mut count = 0usize;
    for (perfect, achieved) in pairs {
        let gap = perfect - achieved;
        num += gap * gap;
        den += perfect * perfect;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Empty("utility pairs"));
    }
    if den == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    Ok(100.0 * num / den)
}
