//! File output helpers and the samples CSV format.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::ReportMeta;

/// Writes `bytes` to a temporary sibling of `path` and renames it into place,
/// so readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Generated samples with the settings that produced them. Rows are
/// `label, x0..x{dim-1}, seed, steps, cfg_scale, sampler, config_hash`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTable {
    pub dim: usize,
    pub labels: Vec<usize>,
    /// Row-major, `labels.len() * dim`.
    pub coords: Vec<f64>,
    pub meta: ReportMeta,
}

impl SampleTable {
    pub fn header(dim: usize) -> String {
        let mut h = String::from("label");
        for j in 0..dim {
            let _ = write!(h, ",x{j}");
        }
        h.push_str(",seed,steps,cfg_scale,sampler,config_hash");
        h
    }

    pub fn to_csv(&self) -> String {
        let m = &self.meta;
        let opt = |v: Option<String>| v.unwrap_or_default();
        let tail = format!(
            "{},{},{},{},{}",
            opt(m.seed.map(|v| v.to_string())),
            opt(m.steps.map(|v| v.to_string())),
            opt(m.cfg_scale.map(|v| v.to_string())),
            opt(m.sampler.clone()),
            opt(m.config_hash.clone()),
        );
        let mut s = Self::header(self.dim);
        s.push('\n');
        for (row, label) in self.coords.chunks(self.dim.max(1)).zip(&self.labels) {
            let _ = write!(s, "{label}");
            for v in row {
                let _ = write!(s, ",{v}");
            }
            let _ = writeln!(s, ",{tail}");
        }
        s
    }

    /// Parses a samples file. Only `label` and the `x<j>` columns are
    /// required; the settings columns are kept in `meta` when every row
    /// agrees on them. `path` is used for error messages.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let label_col = cols
            .iter()
            .position(|c| *c == "label")
            .ok_or_else(|| err(1, "missing `label` column".into()))?;
        let mut coord_cols = Vec::new();
        while let Some(i) = cols.iter().position(|c| *c == format!("x{}", coord_cols.len())) {
            coord_cols.push(i);
        }
        if coord_cols.is_empty() {
            return Err(err(1, "missing coordinate columns x0, x1, ...".into()));
        }
        let find = |name: &str| cols.iter().position(|c| *c == name);
        let meta_cols = [find("seed"), find("steps"), find("cfg_scale"), find("sampler"), find("config_hash")];
        let mut seen: [Option<Option<String>>; 5] = Default::default();

        let dim = coord_cols.len();
        let mut labels = Vec::new();
        let mut coords = Vec::new();
        for (i, line) in lines {
            let lineno = i + 1;
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != cols.len() {
                return Err(err(lineno, format!("expected {} fields, found {}", cols.len(), fields.len())));
            }
            let label = fields[label_col]
                .parse::<usize>()
                .map_err(|_| err(lineno, format!("label {:?} is not a non-negative integer", fields[label_col])))?;
            labels.push(label);
            for (j, &c) in coord_cols.iter().enumerate() {
                let v = fields[c]
                    .parse::<f64>()
                    .map_err(|_| err(lineno, format!("x{j} value {:?} is not a number", fields[c])))?;
                if !v.is_finite() {
                    return Err(err(lineno, format!("x{j} value {v} is not finite")));
                }
                coords.push(v);
            }
            for (slot, col) in seen.iter_mut().zip(meta_cols) {
                let v = col.map(|c| fields[c].to_string()).filter(|v| !v.is_empty());
                match slot {
                    None => *slot = Some(v),
                    Some(prev) if *prev != v => *prev = None,
                    Some(_) => {}
                }
            }
        }
        if labels.is_empty() {
            return Err(err(2, "no sample rows".into()));
        }
        let [seed, steps, cfg, sampler, hash] = seen.map(Option::flatten);
        let meta = ReportMeta {
            seed: seed.and_then(|v| v.parse().ok()),
            steps: steps.and_then(|v| v.parse().ok()),
            cfg_scale: cfg.and_then(|v| v.parse().ok()),
            sampler,
            checkpoint: None,
            config_hash: hash,
        };
        Ok(Self {
            dim,
            labels,
            coords,
            meta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> SampleTable {
        SampleTable {
            dim: 2,
            labels: vec![0, 1, 1],
            coords: vec![0.5, -1.25, 3.0, 1e-20, -0.0, 7.125],
            meta: ReportMeta {
                seed: Some(3),
                steps: Some(50),
                cfg_scale: Some(1.45),
                sampler: Some("euler_maruyama".into()),
                checkpoint: None,
                config_hash: Some("abcd".into()),
            },
        }
    }

    #[test]
    fn samples_round_trip() {
        let t = table();
        let csv = t.to_csv();
        assert!(csv.starts_with("label,x0,x1,seed,steps,cfg_scale,sampler,config_hash\n"));
        assert_eq!(SampleTable::parse(&csv, Path::new("s.csv")).unwrap(), t);
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let p = Path::new("s.csv");
        let bad = "label,x0,x1\n0,1,2\n1,zz,2\n";
        match SampleTable::parse(bad, p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        match SampleTable::parse("label,x0\n0,1\n0\n", p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(SampleTable::parse("", p), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(SampleTable::parse("label,x0\n", p), Err(Error::Parse { .. })));
        assert!(matches!(SampleTable::parse("label,y\n0,1\n", p), Err(Error::Parse { .. })));
        assert!(matches!(SampleTable::parse("label,x0\n-1,1\n", p), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn overwrites_in_place() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/out.csv");
        atomic_write(&p, b"first").unwrap();
        atomic_write(&p, b"second").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"second");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
