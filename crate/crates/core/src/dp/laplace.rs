use rand::Rng;

/// One draw from Lap(0, b) by inverting the CDF.
///
/// Always consumes exactly one uniform (plus rejections of the single
/// excluded endpoint), so noise streams stay aligned across scales.
pub fn laplace_sample<R: Rng + ?Sized>(rng: &mut R, b: f64) -> f64 {
    let u = loop {
        let u = rng.gen::<f64>() - 0.5;
        if u != -0.5 {
            break u;
        }
    };
    if b == 0.0 {
        return 0.0;
    }
    -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

pub fn laplace_cdf(x: f64, b: f64) -> f64 {
    if x < 0.0 {
        0.5 * (x / b).exp()
    } else {
        1.0 - 0.5 * (-x / b).exp()
    }
}

pub fn laplace_log_density(x: f64, mu: f64, b: f64) -> f64 {
    -(2.0 * b).ln() - (x - mu).abs() / b
}
