//! FIFO support queue of unit-norm target projections.

use crate::encoder::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Entries must be unit-norm to within this tolerance.
pub const UNIT_NORM_TOL: f64 = 1e-10;

/// Ring buffer of `capacity` vectors of length `dim`. Once full, each
/// enqueue overwrites the oldest entry.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportQueue {
    capacity: usize,
    dim: usize,
    /// `capacity × dim`, physical ring order.
    data: Vec<f64>,
    /// Next slot to write.
    cursor: usize,
    fill: usize,
}

impl SupportQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "support queue needs positive capacity and dimension, got {capacity}×{dim}"
            )));
        }
        Ok(Self {
            capacity,
            dim,
            data: vec![0.0; capacity * dim],
            cursor: 0,
            fill: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fill(&self) -> usize {
        self.fill
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// True once at least `fraction · capacity` entries are held.
    pub fn is_warm(&self, fraction: f64) -> bool {
        self.fill >= 2 && self.fill as f64 >= fraction * self.capacity as f64
    }

    /// Append the rows of `batch` (`[b, dim]`) in order, evicting the oldest
    /// entries once full. Nothing is written if any row is invalid.
    pub fn enqueue(&mut self, batch: &Tensor) -> Result<()> {
        let s = batch.shape();
        if s.len() != 2 || s[1] != self.dim {
            return Err(Error::Shape {
                op: "enqueue",
                lhs: s.to_vec(),
                rhs: vec![self.dim],
            });
        }
        for row in batch.data().chunks(self.dim) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !((norm - 1.0).abs() <= UNIT_NORM_TOL) {
                return Err(Error::Degenerate {
                    op: "enqueue (entries must be unit-norm)",
                    norm,
                });
            }
        }
        for row in batch.data().chunks(self.dim) {
            let at = self.cursor * self.dim;
            self.data[at..at + self.dim].copy_from_slice(row);
            self.cursor = (self.cursor + 1) % self.capacity;
            self.fill = (self.fill + 1).min(self.capacity);
        }
        Ok(())
    }

    /// Physical slot of the `i`-th oldest entry.
    fn slot(&self, i: usize) -> usize {
        (self.cursor + self.capacity - self.fill + i) % self.capacity
    }

    /// Detached `[fill, dim]` copy, oldest entry first.
    pub fn snapshot(&self) -> Tensor {
        let mut out = Vec::with_capacity(self.fill * self.dim);
        for i in 0..self.fill {
            let at = self.slot(i) * self.dim;
            out.extend_from_slice(&self.data[at..at + self.dim]);
        }
        Tensor::new(vec![self.fill, self.dim], out).unwrap_or_else(|_| Tensor::zeros(&[0]))
    }

    /// `[dim, fill]` support matrix ready to right-multiply a batch of
    /// projections. Requires at least two entries.
    pub fn support_columns(&self) -> Result<Tensor> {
        if self.fill < 2 {
            return Err(Error::InsufficientSupport(self.fill));
        }
        let mut out = vec![0.0; self.dim * self.fill];
        for i in 0..self.fill {
            let at = self.slot(i) * self.dim;
            for (d, v) in self.data[at..at + self.dim].iter().enumerate() {
                out[d * self.fill + i] = *v;
            }
        }
        Tensor::new(vec![self.dim, self.fill], out)
    }

    /// Store under `<name>.entries` (physical ring) and `<name>.meta`
    /// (`[capacity, dim, cursor, fill]`).
    pub fn export(&self, name: &str, ck: &mut Checkpoint) -> Result<()> {
        ck.insert(
            format!("{name}.entries"),
            Tensor::new(vec![self.capacity, self.dim], self.data.clone())?,
        );
        ck.insert(
            format!("{name}.meta"),
            Tensor::from_vec(vec![
                self.capacity as f64,
                self.dim as f64,
                self.cursor as f64,
                self.fill as f64,
            ]),
        );
        Ok(())
    }

    pub fn import(name: &str, ck: &Checkpoint) -> Result<Self> {
        let meta = ck.require(&format!("{name}.meta"))?.data().to_vec();
        let entries = ck.require(&format!("{name}.entries"))?;
        if meta.len() != 4 {
            return Err(Error::Format(format!("{name}.meta must hold 4 values")));
        }
        let [capacity, dim, cursor, fill] = [meta[0], meta[1], meta[2], meta[3]].map(|v| v as usize);
        if entries.shape() != [capacity, dim] || cursor >= capacity || fill > capacity {
            return Err(Error::Format(format!("inconsistent queue state under {name}")));
        }
        Ok(Self {
            capacity,
            dim,
            data: entries.data().to_vec(),
            cursor,
            fill,
        })
    }
}
