use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Fixed word vectors read from a GloVe-style text file. Tokens missing from
/// the file map to the all-zeros vector.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainedVectors {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
    zeros: Vec<f64>,
}

impl PretrainedVectors {
    pub fn new(dim: usize) -> Self {
        PretrainedVectors {
            dim,
            vectors: HashMap::new(),
            zeros: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, token: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::InvalidArgument(format!(
                "vector of length {} in a {}-d table",
                vector.len(),
                self.dim
            )));
        }
        self.vectors.insert(token.into(), vector);
        Ok(())
    }

    pub fn contains(&self, token: &str) -> bool {
        self.vectors.contains_key(token)
    }

    /// Vector for `token`, or zeros when the file had none.
    pub fn get(&self, token: &str) -> &[f64] {
        self.vectors.get(token).map_or(&self.zeros, Vec::as_slice)
    }

    /// Entries sorted by token.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        let mut entries: Vec<(&str, &[f64])> = self
            .vectors
            .iter()
            .map(|(k, v)| (k.as_str(), v.as_slice()))
            .collect();
        entries.sort_by_key(|e| e.0);
        entries.into_iter()
    }

    /// GloVe text format, one `token v1 .. vd` line per entry, sorted by token.
    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (tok, v) in self.iter() {
            write!(w, "{tok}")?;
            for x in v {
                write!(w, " {x}")?;
            }
            writeln!(w)?;
        }
        w.flush()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        self.write(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Load every vector in the file.
    pub fn load(path: &Path, dim: usize) -> Result<Self> {
        Self::load_filtered(path, dim, None)
    }

    /// Load vectors, keeping only tokens in `keep` when given. Every line is
    /// still validated.
    pub fn load_filtered(path: &Path, dim: usize, keep: Option<&HashSet<String>>) -> Result<Self> {
        let file = File::open(path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        let mut out = PretrainedVectors::new(dim);
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            let lineno = i + 1;
            let mut fields = line.split_whitespace();
            let Some(token) = fields.next() else { continue };
            let values = fields
                .map(|f| {
                    f.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                        path: path.to_path_buf(),
                        line: lineno,
                        detail: format!("unparsable value `{f}`"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            if values.len() != dim {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno,
                    detail: format!("expected {dim} values, found {}", values.len()),
                });
            }
            if keep.is_none_or(|k| k.contains(token)) {
                out.vectors.insert(token.to_string(), values);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;

    fn file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn save_then_load() {
        let mut v = PretrainedVectors::new(2);
        v.insert("b", vec![0.1, -2.5]).unwrap();
        v.insert("a", vec![1.0 / 3.0, 7.0]).unwrap();
        let mut out = Vec::new();
        v.write(&mut out).unwrap();
        assert!(String::from_utf8_lossy(&out).starts_with("a 0.3333333333333333 7\n"));
        let f = file(std::str::from_utf8(&out).unwrap());
        assert_eq!(PretrainedVectors::load(f.path(), 2).unwrap(), v);
    }

    #[test]
    fn parses_a_line() {
        let f = file("the 0.1 0.2\n");
        let v = PretrainedVectors::load(f.path(), 2).unwrap();
        assert_eq!(v.get("the"), &[0.1, 0.2]);
        assert_eq!(v.get("missing"), &[0.0, 0.0]);
    }

    #[test]
    fn wrong_arity_names_the_line() {
        let f = file("the 0.1 0.2\nof 0.1 0.2 0.3\n");
        match PretrainedVectors::load(f.path(), 2) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_float_names_the_line() {
        let f = file("a 1 2\n\nb 1 x\n");
        match PretrainedVectors::load(f.path(), 2) {
            Err(Error::Parse { line, detail, .. }) => {
                assert_eq!(line, 3);
                assert!(detail.contains('x'));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn every_vector_has_the_requested_dim() {
        let mut s = String::new();
        for w in ["a", "b", "c"] {
            s.push_str(w);
            for k in 0..50 {
                s.push_str(&format!(" {}", k as f64 / 100.0));
            }
            s.push('\n');
        }
        let f = file(&s);
        let v = PretrainedVectors::load(f.path(), 50).unwrap();
        assert_eq!(v.len(), 3);
        for w in ["a", "b", "c"] {
            assert_eq!(v.get(w).len(), 50);
        }
    }

    #[test]
    fn filtered_load() {
        let f = file("a 1\nb 2\n");
        let keep: HashSet<String> = ["b".to_string()].into();
        let v = PretrainedVectors::load_filtered(f.path(), 1, Some(&keep)).unwrap();
        assert!(!v.contains("a"));
        assert_eq!(v.get("b"), &[2.0]);
    }
}
