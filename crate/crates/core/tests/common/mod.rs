use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Samples `sqrt(d_j) e_j`, so `YY' = diag(d)`. Fifty large and fifty tiny
/// eigenvalues chosen so that `Tr(YY') = 4.13e6` and `Tr((YY')^-1) = 2.06e11`.
pub fn trace_fixture(dir: &Path) -> PathBuf {
    let (n, half) = (100usize, 50.0f64);
    let sum = 4.13e6 / half;
    let inv_sum = 2.06e11 / half;
    // a + b = sum, 1/a + 1/b = inv_sum.
    let product = sum / inv_sum;
    let disc = (sum * sum - 4.0 * product).sqrt();
    let (a, b) = ((sum + disc) / 2.0, product / ((sum + disc) / 2.0));
    let mut text = String::new();
    for j in 0..n {
        let d: f64 = if j < n / 2 { a } else { b };
        let mut row = vec!["0".to_string(); n];
        row[j] = format!("{:.17e}", d.sqrt());
        let _ = writeln!(text, "{},{}", j % 2, row.join(","));
    }
    let path = dir.join("traces.csv");
    std::fs::write(&path, text).unwrap();
    path
}

#[allow(dead_code)]
pub fn write_config(dir: &Path, name: &str, lines: &[&str]) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, lines.join("\n")).unwrap();
    path
}

pub fn report_field(report: &str, key: &str) -> String {
    report
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("no `{key}` in report:\n{report}"))
        .to_string()
}
