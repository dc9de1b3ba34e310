use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Float with 17 significant digits, enough to round-trip any `f64`.
pub(crate) fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

/// Comma-separated table with a header row.
pub(crate) struct Csv {
    w: BufWriter<File>,
    cols: usize,
}

impl Csv {
    pub(crate) fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{}", header.join(","))?;
        Ok(Csv { w, cols: header.len() })
    }

    pub(crate) fn row(&mut self, cells: &[String]) -> Result<()> {
        debug_assert_eq!(cells.len(), self.cols);
        writeln!(self.w, "{}", cells.join(","))?;
        Ok(())
    }

    pub(crate) fn finish(mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

/// Line-delimited JSON records.
pub(crate) struct Jsonl {
    w: BufWriter<File>,
}

impl Jsonl {
    pub(crate) fn create(path: &Path) -> Result<Self> {
        Ok(Jsonl { w: BufWriter::new(File::create(path)?) })
    }

    pub(crate) fn record<T: Serialize>(&mut self, rec: &T) -> Result<()> {
        serde_json::to_writer(&mut self.w, rec).map_err(|e| Error::Serde(e.to_string()))?;
        writeln!(self.w)?;
        Ok(())
    }

    pub(crate) fn finish(mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

pub(crate) const KERNEL_HEADER: [&str; 6] = ["kernel", "mu", "nu", "n", "np", "value"];

/// Row key of a kernel table: `(kernel, μ, ν, n, n')`.
pub type KernelKey = (String, usize, usize, usize, usize);

pub(crate) fn kernel_row(tag: &str, mu: usize, nu: usize, n: usize, np: usize, v: f64) -> Vec<String> {
    vec![tag.to_string(), mu.to_string(), nu.to_string(), n.to_string(), np.to_string(), num(v)]
}

/// Read a table written with the kernel header.
pub fn read_kernel_csv(path: &Path) -> Result<BTreeMap<KernelKey, f64>> {
    let f = File::open(path).map_err(|e| Error::config(format!("cannot open `{}`: {e}", path.display())))?;
    let mut lines = BufReader::new(f).lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.split(',').ne(KERNEL_HEADER) {
        return Err(Error::config(format!("`{}` is not a kernel table", path.display())));
    }
    let mut out = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let bad = || Error::config(format!("{}:{}: malformed row", path.display(), i + 2));
        let c: Vec<&str> = line.split(',').collect();
        if c.len() != 6 {
            return Err(bad());
        }
        let ix = |s: &str| s.parse::<usize>().map_err(|_| bad());
        let v: f64 = c[5].parse().map_err(|_| bad())?;
        out.insert((c[0].to_string(), ix(c[1])?, ix(c[2])?, ix(c[3])?, ix(c[4])?), v);
    }
    Ok(out)
}
