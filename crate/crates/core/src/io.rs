//! Plain-text output helpers shared by every exporter: comma-separated rows,
//! a header line, and floats printed with 17 significant digits so that values
//! round-trip exactly.

use std::io::Write;

use crate::error::Result;
use crate::real::Real;

/// 17 significant digits in scientific notation.
pub fn fmt_float<T: Real>(x: T) -> String {
    format!("{:.16e}", x.as_f64())
}

/// Writes a header row followed by one row per record.
pub fn write_table<W: Write>(mut w: W, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Two-column numeric table.
pub fn write_xy_csv<W: Write, T: Real>(w: W, header: [&str; 2], points: &[(T, T)]) -> Result<()> {
    write_table(
        w,
        &header,
        points.iter().map(|&(a, b)| vec![fmt_float(a), fmt_float(b)]),
    )
}
