/// Binary PGM (P5) with one byte per cell, `round(255 * c)` clamped to 0..=255.
pub fn encode_pgm(values: &[f32], height: usize, width: usize) -> Vec<u8> {
    assert_eq!(values.len(), height * width, "raster size");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8));
    out
}
