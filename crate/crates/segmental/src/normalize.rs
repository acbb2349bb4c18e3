use segmental_core::math::Mat;

/// Below this standard deviation a dimension counts as constant.
const MIN_STD: f64 = 1e-12;

/// Scales every dimension to zero mean and unit (population) standard
/// deviation over the sequence. Constant dimensions and sequences shorter
/// than two frames are returned unchanged.
pub fn normalize_sequence(x: &Mat) -> Mat {
    let (rows, cols) = x.shape();
    let mut out = x.clone();
    if rows < 2 {
        return out;
    }
    for j in 0..cols {
        let mean = (0..rows).map(|i| x.get(i, j)).sum::<f64>() / rows as f64;
        let var = (0..rows).map(|i| (x.get(i, j) - mean).powi(2)).sum::<f64>() / rows as f64;
        let std = var.sqrt();
        if std < MIN_STD {
            continue;
        }
        for i in 0..rows {
            out.set(i, j, (x.get(i, j) - mean) / std);
        }
    }
    out
}
