//! Named trainable parameters and the checkpoint container.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::Rng;

use crate::tensor::{Matrix, TensorError};

/// Handle to a matrix inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.values.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    /// Registers a `rows x cols` weight drawn from `U(-1/sqrt(rows), 1/sqrt(rows))`,
    /// where `rows` is the fan-in of the `x · W` convention used throughout.
    pub fn add_uniform<R: Rng + ?Sized>(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut R) -> ParamId {
        let bound = 1.0 / (rows as f64).sqrt();
        let m = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound));
        self.add(name, m)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Matrix) {
        assert_eq!(self.values[id.0].shape(), value.shape(), "shape change for {}", self.names[id.0]);
        self.values[id.0] = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Checkpoint text: for every parameter a `[name]` line followed by the
    /// matrix in plain-text form.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (name, value) in self.names.iter().zip(&self.values) {
            writeln!(w, "[{name}]")?;
            value.write_text(&mut w)?;
        }
        Ok(())
    }

    /// Loads values from a checkpoint into already-registered parameters.
    /// Every parameter must be present with its registered shape.
    pub fn read_checkpoint<R: BufRead>(&mut self, reader: R) -> Result<(), TensorError> {
        let mut lines = reader.lines();
        let mut line_no = 0;
        let mut seen = vec![false; self.values.len()];
        loop {
            line_no += 1;
            let line = match lines.next() {
                None => break,
                Some(Err(e)) => return Err(TensorError::Parse { line: line_no, msg: e.to_string() }),
                Some(Ok(l)) => l,
            };
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            let Some(name) = trimmed.strip_prefix('[').and_then(|s| s.strip_suffix(']')) else {
                return Err(TensorError::Parse { line: line_no, msg: format!("expected [name], got {trimmed:?}") });
            };
            let Some(id) = self.id(name) else {
                return Err(TensorError::Parse { line: line_no, msg: format!("unknown parameter {name}") });
            };
            let start = line_no;
            let m = Matrix::read_text(&mut lines, &mut line_no)?;
            if m.shape() != self.values[id.0].shape() {
                let (r, c) = self.values[id.0].shape();
                return Err(TensorError::Parse {
                    line: start,
                    msg: format!("{name}: expected {r}x{c}, found {}x{}", m.rows(), m.cols()),
                });
            }
            self.values[id.0] = m;
            seen[id.0] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(TensorError::Parse { line: line_no, msg: format!("missing parameter {}", self.names[missing]) });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.add_uniform("a.w", 3, 2, &mut rng);
        store.add("a.b", Matrix::row_vector(&[0.1, -0.2]));
        let mut buf = Vec::new();
        store.write_checkpoint(&mut buf).unwrap();

        let mut other = store.clone();
        for id in other.ids().collect::<Vec<_>>() {
            let shape = other.get(id).shape();
            other.set(id, Matrix::zeros(shape.0, shape.1));
        }
        other.read_checkpoint(buf.as_slice()).unwrap();
        for id in store.ids() {
            assert_eq!(store.get(id).data(), other.get(id).data());
        }
    }

    #[test]
    fn checkpoint_rejects_missing_and_misshaped() {
        let mut store = ParamStore::new();
        store.add("w", Matrix::zeros(2, 2));
        store.add("v", Matrix::zeros(1, 2));
        assert!(store.clone().read_checkpoint("[w]\n2 2\n1 2\n3 4\n".as_bytes()).is_err());
        assert!(store.read_checkpoint("[w]\n1 2\n1 2\n[v]\n1 2\n0 0\n".as_bytes()).is_err());
    }

    #[test]
    fn uniform_init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let id = store.add_uniform("w", 16, 4, &mut rng);
        assert!(store.get(id).data().iter().all(|v| v.abs() < 0.25));
    }
}
