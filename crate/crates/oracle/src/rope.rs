/// Rotates each pair `(x[2j], x[2j+1])` by `position * base^(-2j/d)`.
pub fn rope_ref(x: &[f64], position: f64, base: f64) -> Vec<f64> {
    let d = x.len();
    assert!(d % 2 == 0, "rotary dimension must be even");
    let mut out = vec![0.0; d];
    for j in 0..d / 2 {
        let theta = base.powf(-2.0 * j as f64 / d as f64);
        let (s, c) = (position * theta).sin_cos();
        let (a, b) = (x[2 * j], x[2 * j + 1]);
        out[2 * j] = a * c - b * s;
        out[2 * j + 1] = a * s + b * c;
    }
    out
}
