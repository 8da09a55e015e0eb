use std::io::Write;
use std::path::Path;

/// Tiles `count` square images (values in `[0, 1]`) into a binary PGM with
/// `cols` columns and a one-pixel gap.
pub fn write_montage(path: &Path, pixels: &[f64], count: usize, side: usize, cols: usize) -> std::io::Result<()> {
    let cols = cols.clamp(1, count.max(1));
    let rows = count.div_ceil(cols).max(1);
    let (w, h) = (cols * (side + 1) - 1, rows * (side + 1) - 1);
    let mut buf = vec![0u8; w * h];
    for k in 0..count {
        let (r0, c0) = ((k / cols) * (side + 1), (k % cols) * (side + 1));
        for y in 0..side {
            for x in 0..side {
                let v = pixels[k * side * side + y * side + x].clamp(0.0, 1.0);
                buf[(r0 + y) * w + c0 + x] = (v * 255.0).round() as u8;
            }
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{w} {h}\n255\n")?;
    f.write_all(&buf)?;
    f.flush()
}
