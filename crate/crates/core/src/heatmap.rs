//! Plain-text PGM heatmaps of snapshot fields.
//!
//! One 16-bit image per compartment per day. Pixels are linear in density,
//! `pixel = round(65535 * value / max)`, with `max` the largest value of the
//! compartment over all written days. The per-compartment `max` values go
//! to `scale.txt` next to the images. North (largest `y`) is the top row.

use crate::data::SnapshotMatrix;
use crate::error::{check_len, Result};
use crate::seird::{COMPARTMENT_NAMES, N_COMPARTMENTS};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const PGM_MAX: u32 = 65535;

pub fn pgm_text(values: &[f64], nx: usize, ny: usize, max: f64) -> String {
    let mut s = format!("P2\n{nx} {ny}\n{PGM_MAX}\n");
    for y in (0..ny).rev() {
        let row: Vec<String> = (0..nx).map(|x| pixel(values[y * nx + x], max).to_string()).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    s
}

fn pixel(v: f64, max: f64) -> u32 {
    if !(max > 0.0) || !(v > 0.0) {
        return 0;
    }
    ((v / max).min(1.0) * PGM_MAX as f64).round() as u32
}

/// Writes `<compartment>_day<NNN>.pgm` for every row and compartment plus
/// `scale.txt`; returns the written paths.
pub fn write_heatmaps(dir: &Path, matrix: &SnapshotMatrix, nx: usize, ny: usize) -> Result<Vec<PathBuf>> {
    check_len("heatmap grid", matrix.n_cells(), nx * ny)?;
    std::fs::create_dir_all(dir)?;
    let mut max = [0.0f64; N_COMPARTMENTS];
    for row in 0..matrix.n_days() {
        for (c, m) in max.iter_mut().enumerate() {
            *m = matrix.compartment(row, c).iter().fold(*m, |a, &v| a.max(v));
        }
    }
    let mut paths = Vec::new();
    for row in 0..matrix.n_days() {
        for (c, name) in COMPARTMENT_NAMES.iter().enumerate() {
            let path = dir.join(format!("{name}_day{:03}.pgm", matrix.days()[row]));
            std::fs::write(&path, pgm_text(matrix.compartment(row, c), nx, ny, max[c]))?;
            paths.push(path);
        }
    }
    let mut scale = String::from("# compartment max_value (pixel 65535)\n");
    for (name, m) in COMPARTMENT_NAMES.iter().zip(max) {
        let _ = writeln!(scale, "{name} {m}");
    }
    let scale_path = dir.join("scale.txt");
    std::fs::write(&scale_path, scale)?;
    paths.push(scale_path);
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_layout() {
        let text = pgm_text(&[0.0, 0.5, 1.0, 2.0], 2, 2, 2.0);
        assert_eq!(text, "P2\n2 2\n65535\n32768 65535\n0 16384\n");
    }

    #[test]
    fn writes_one_image_per_compartment_and_day() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![vec![1.0; 5 * 9], vec![2.0; 5 * 9]];
        let m = SnapshotMatrix::new(vec![106, 107], rows, 9).unwrap();
        let paths = write_heatmaps(dir.path(), &m, 3, 3).unwrap();
        assert_eq!(paths.len(), 11);
        assert!(dir.path().join("d_day107.pgm").exists());
        let scale = std::fs::read_to_string(dir.path().join("scale.txt")).unwrap();
        assert!(scale.contains("s 2\n"));
        assert!(write_heatmaps(dir.path(), &m, 2, 3).is_err());
    }
}
